//! BM25 over text mirrors: baseline retrieval, corpus downsizing and
//! hard-negative mining.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentRecord, QueryRecord};
use crate::error::{Error, Result};
use crate::eval::{has_answer, RunList};
use crate::training::TrainingExample;

/// Lowercase, split on anything that is not alphanumeric, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0) || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!(
                "bm25 needs k1 >= 0 and 0 <= b <= 1, got k1={} b={}",
                self.k1, self.b
            )));
        }
        Ok(())
    }
}

/// Robertson idf with +1 inside the log so it stays positive.
pub fn idf(doc_count: usize, df: usize) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// One term's contribution for a document.
pub fn term_score(idf: f64, tf: f64, doc_len: f64, avg_len: f64, params: &Bm25Params) -> f64 {
    let norm = if avg_len > 0.0 {
        1.0 - params.b + params.b * doc_len / avg_len
    } else {
        1.0
    };
    idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
}

#[derive(Debug, Clone, Default)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<(u32, u32)>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    doc_ids: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl InvertedIndex {
    /// Builds from `(doc_id, text)` pairs; ids must be unique.
    pub fn build<'a>(docs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut index = Self::default();
        for (id, text) in docs {
            let internal = index.doc_ids.len() as u32;
            if index.lookup.insert(id.to_string(), internal).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate doc_id {id:?} in lexical index"
                )));
            }
            index.doc_ids.push(id.to_string());
            let tokens = tokenize(text);
            index.doc_lengths.push(tokens.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                index
                    .postings
                    .entry(term)
                    .or_default()
                    .push((internal, count));
            }
        }
        let total: u64 = index.doc_lengths.iter().map(|&l| u64::from(l)).sum();
        index.avg_doc_length = if index.doc_ids.is_empty() {
            0.0
        } else {
            total as f64 / index.doc_ids.len() as f64
        };
        Ok(index)
    }

    pub fn from_corpus(docs: &[DocumentRecord]) -> Result<Self> {
        Self::build(
            docs.iter()
                .map(|d| (d.doc_id.as_str(), d.text_mirror.as_str())),
        )
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<usize> {
        self.lookup
            .get(doc_id)
            .map(|&i| self.doc_lengths[i as usize] as usize)
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// `(doc_id, term frequency)` for every document containing `term`.
    pub fn postings(&self, term: &str) -> Vec<(&str, usize)> {
        self.postings.get(term).map_or_else(Vec::new, |p| {
            p.iter()
                .map(|&(d, tf)| (self.doc_ids[d as usize].as_str(), tf as usize))
                .collect()
        })
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }
}

/// Top-`k` documents for `query_text`. Only documents sharing at least one
/// term with the query are returned.
pub fn bm25_search(
    index: &InvertedIndex,
    query_id: &str,
    query_text: &str,
    k: usize,
    params: &Bm25Params,
) -> RunList {
    let n = index.doc_count();
    let mut scores = vec![0.0f64; n];
    let mut matched = vec![false; n];
    for term in tokenize(query_text) {
        let Some(postings) = index.postings.get(&term) else {
            continue;
        };
        let w = idf(n, postings.len());
        for &(d, tf) in postings {
            let d = d as usize;
            scores[d] += term_score(
                w,
                f64::from(tf),
                f64::from(index.doc_lengths[d]),
                index.avg_doc_length,
                params,
            );
            matched[d] = true;
        }
    }
    let hits = (0..n)
        .filter(|&d| matched[d])
        .map(|d| (index.doc_ids[d].clone(), scores[d]))
        .collect();
    RunList::from_scores(query_id, hits, k)
}

/// Union of each query's top-`k` for `question + " " + answers`.
pub fn downsize_corpus(
    index: &InvertedIndex,
    queries: &[QueryRecord],
    k: usize,
    params: &Bm25Params,
) -> BTreeSet<String> {
    let mut pool = BTreeSet::new();
    for q in queries {
        let mut text = q.text.clone();
        for a in &q.answers {
            text.push(' ');
            text.push_str(a);
        }
        let run = bm25_search(index, &q.query_id, &text, k, params);
        pool.extend(run.entries.into_iter().map(|(id, _)| id));
    }
    pool
}

/// Per query, BM25 top-`k` on the question alone: the best-ranked candidate
/// containing an answer becomes the positive, every candidate without one a
/// hard negative. Queries lacking either are dropped.
pub fn mine_training_examples(
    index: &InvertedIndex,
    docs: &[DocumentRecord],
    queries: &[QueryRecord],
    k: usize,
    params: &Bm25Params,
) -> Result<Vec<TrainingExample>> {
    let texts: HashMap<&str, &str> = docs
        .iter()
        .map(|d| (d.doc_id.as_str(), d.text_mirror.as_str()))
        .collect();
    let mut out = Vec::new();
    for q in queries {
        let run = bm25_search(index, &q.query_id, &q.text, k, params);
        let mut positive = None;
        let mut negatives = Vec::new();
        for (doc_id, _) in run.entries {
            let text = texts
                .get(doc_id.as_str())
                .ok_or_else(|| Error::UnknownId(format!("doc_id {doc_id:?} has no text mirror")))?;
            if has_answer(text, &q.answers) {
                positive.get_or_insert(doc_id);
            } else {
                negatives.push(doc_id);
            }
        }
        if let Some(positive) = positive {
            if !negatives.is_empty() {
                out.push(TrainingExample {
                    query_id: q.query_id.clone(),
                    positive_doc_id: positive,
                    hard_negative_doc_ids: negatives,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PixelGrid;

    fn doc(id: &str, text: &str) -> DocumentRecord {
        DocumentRecord {
            doc_id: id.into(),
            image: PixelGrid::filled(1, 1, 1, 0).unwrap(),
            text_mirror: text.into(),
        }
    }

    fn query(id: &str, text: &str, answers: &[&str]) -> QueryRecord {
        QueryRecord {
            query_id: id.into(),
            text: text.into(),
            answers: answers.iter().map(|a| a.to_string()).collect(),
        }
    }

    /// Direct evaluation of the formula per document, no postings.
    fn naive_scores(texts: &[(&str, &str)], query: &str, p: &Bm25Params) -> Vec<(String, f64)> {
        let docs: Vec<Vec<String>> = texts.iter().map(|(_, t)| tokenize(t)).collect();
        let n = docs.len() as f64;
        let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let q = tokenize(query);
        let mut out = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            let mut s = 0.0;
            let mut any = false;
            for t in &q {
                let tf = d.iter().filter(|x| *x == t).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                any = true;
                let df = docs.iter().filter(|x| x.contains(t)).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                s += idf * tf * (p.k1 + 1.0)
                    / (tf + p.k1 * (1.0 - p.b + p.b * d.len() as f64 / avg));
            }
            if any {
                out.push((texts[i].0.to_string(), s));
            }
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The Eiffel Tower!"), ["the", "eiffel", "tower"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a1-b2"), ["a1", "b2"]);
        assert_eq!(tokenize("  ÉCOLE  naïve"), ["école", "naïve"]);
    }

    #[test]
    fn params_validation() {
        assert!(Bm25Params::default().validate().is_ok());
        assert!(Bm25Params { k1: -1.0, b: 0.4 }.validate().is_err());
        assert!(Bm25Params { k1: 1.0, b: 1.5 }.validate().is_err());
        assert!(Bm25Params {
            k1: f64::NAN,
            b: 0.5
        }
        .validate()
        .is_err());
    }

    #[test]
    fn single_doc_and_no_match() {
        let idx = InvertedIndex::build([("d", "hello world")]).unwrap();
        let run = bm25_search(&idx, "q", "world", 10, &Bm25Params::default());
        assert_eq!(run.entries.len(), 1);
        assert_eq!(run.entries[0].0, "d");
        assert!(bm25_search(&idx, "q", "absent", 10, &Bm25Params::default())
            .entries
            .is_empty());
        assert!(bm25_search(&idx, "q", "?!", 10, &Bm25Params::default())
            .entries
            .is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(InvertedIndex::build([("a", "x"), ("a", "y")]).is_err());
    }

    #[test]
    fn index_statistics() {
        let idx = InvertedIndex::build([("a", "x x y"), ("b", "y z"), ("c", "")]).unwrap();
        assert_eq!(idx.doc_count(), 3);
        assert!((idx.avg_doc_length() - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(idx.document_frequency("y"), 2);
        assert_eq!(idx.postings("x"), vec![("a", 2)]);
        assert_eq!(idx.doc_length("c"), Some(0));
    }

    #[test]
    fn ten_doc_corpus_matches_naive_scorer() {
        let texts = [
            ("d0", "the cat sat on the mat"),
            ("d1", "dogs chase the cat"),
            ("d2", "a quiet mat"),
            ("d3", "cat cat cat"),
            ("d4", "nothing relevant here at all really"),
            ("d5", "the the the"),
            ("d6", "mat making for cats"),
            ("d7", "sat"),
            ("d8", "on on on the mat sat cat"),
            ("d9", "zebra"),
        ];
        let p = Bm25Params::default();
        let idx = InvertedIndex::build(texts.iter().copied()).unwrap();
        let run = bm25_search(&idx, "q", "the cat sat on a mat", 100, &p);
        let oracle = naive_scores(&texts, "the cat sat on a mat", &p);
        assert_eq!(run.entries.len(), oracle.len());
        for ((id, s), (oid, os)) in run.entries.iter().zip(&oracle) {
            assert_eq!(id, oid);
            assert!((s - os).abs() < 1e-9);
        }
    }

    #[test]
    fn unrelated_addition_keeps_relative_order() {
        let p = Bm25Params::default();
        let base = [
            ("a", "apple pie"),
            ("b", "apple apple tart"),
            ("c", "pie crust"),
        ];
        let idx = InvertedIndex::build(base.iter().copied()).unwrap();
        let before: Vec<String> = bm25_search(&idx, "q", "apple pie", 10, &p)
            .entries
            .into_iter()
            .map(|e| e.0)
            .collect();
        let idx2 =
            InvertedIndex::build(base.iter().copied().chain([("z", "unrelated words")])).unwrap();
        let after: Vec<String> = bm25_search(&idx2, "q", "apple pie", 10, &p)
            .entries
            .into_iter()
            .map(|e| e.0)
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn downsize_examples() {
        let docs: Vec<DocumentRecord> = (0..10)
            .map(|i| doc(&format!("d{i}"), &format!("word{i} shared")))
            .collect();
        let idx = InvertedIndex::from_corpus(&docs).unwrap();
        let p = Bm25Params::default();
        let q = query("q", "shared", &["x"]);
        assert_eq!(downsize_corpus(&idx, &[q.clone()], 50, &p).len(), 10);
        let single = downsize_corpus(&idx, &[q.clone()], 3, &p);
        let twice = downsize_corpus(&idx, &[q.clone(), q.clone()], 3, &p);
        assert_eq!(single, twice);

        let mut docs2 = docs.clone();
        docs2.push(doc("dx", "the answer is zanzibar"));
        let idx2 = InvertedIndex::from_corpus(&docs2).unwrap();
        let pool = downsize_corpus(&idx2, &[query("q", "shared", &["Zanzibar"])], 2, &p);
        assert!(pool.contains("dx"));
    }

    #[test]
    fn downsize_is_monotone_in_k() {
        let docs: Vec<DocumentRecord> = (0..20)
            .map(|i| {
                doc(
                    &format!("d{i:02}"),
                    &format!("t{} t{} common", i % 3, i % 5),
                )
            })
            .collect();
        let idx = InvertedIndex::from_corpus(&docs).unwrap();
        let qs = [query("a", "t1 common", &["t2"]), query("b", "t4", &[])];
        let p = Bm25Params::default();
        let mut prev = BTreeSet::new();
        for k in 1..25 {
            let pool = downsize_corpus(&idx, &qs, k, &p);
            assert!(prev.is_subset(&pool));
            prev = pool;
        }
    }

    #[test]
    fn mining_picks_best_ranked_positive() {
        let docs = vec![
            doc("a", "river delta river delta"),
            doc("b", "river delta with answer paris"),
            doc("c", "river delta paris again"),
            doc("d", "river"),
            doc("e", "delta"),
            doc("f", "other"),
        ];
        let idx = InvertedIndex::from_corpus(&docs).unwrap();
        let p = Bm25Params::default();
        let q = query("q1", "river delta", &["Paris"]);
        let run = bm25_search(&idx, "q1", &q.text, 5, &p);
        let ids: Vec<&str> = run.entries.iter().map(|e| e.0.as_str()).collect();
        let first_pos = ids.iter().position(|&id| id == "b" || id == "c").unwrap();
        let ex = mine_training_examples(&idx, &docs, &[q], 5, &p).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].positive_doc_id, ids[first_pos]);
        let mut negs = ex[0].hard_negative_doc_ids.clone();
        negs.sort();
        assert_eq!(negs, ["a", "d", "e"]);
    }

    #[test]
    fn mining_drops_degenerate_queries() {
        let docs = vec![doc("a", "alpha beta"), doc("b", "alpha gamma")];
        let idx = InvertedIndex::from_corpus(&docs).unwrap();
        let p = Bm25Params::default();
        let none = query("n", "alpha", &["omega"]);
        let all = query("all", "alpha", &["alpha"]);
        let empty = query("e", "alpha", &[]);
        assert!(
            mine_training_examples(&idx, &docs, &[none, all, empty], 5, &p)
                .unwrap()
                .is_empty()
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn index_equals_naive(
                texts in prop::collection::vec(prop::collection::vec(0u8..12, 0..15), 1..25),
                q in prop::collection::vec(0u8..14, 0..6),
                k1 in 0.0f64..2.0,
                b in 0.0f64..=1.0,
            ) {
                let texts: Vec<(String, String)> = texts
                    .iter()
                    .enumerate()
                    .map(|(i, ws)| (format!("d{i:03}"), ws.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")))
                    .collect();
                let query: String = q.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
                let borrowed: Vec<(&str, &str)> = texts.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
                let p = Bm25Params { k1, b };
                let idx = InvertedIndex::build(borrowed.iter().copied()).unwrap();
                let run = bm25_search(&idx, "q", &query, 1000, &p);
                let oracle = naive_scores(&borrowed, &query, &p);
                prop_assert_eq!(run.entries.len(), oracle.len());
                for ((_, s), (_, os)) in run.entries.iter().zip(&oracle) {
                    prop_assert!((s - os).abs() < 1e-9);
                }
            }
        }
    }
}
