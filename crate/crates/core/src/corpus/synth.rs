//! Seeded synthetic corpora of rendered text screenshots.
//!
//! Every document repeats a distinct combination of keywords, carries one
//! answer code found in no other document, and is padded with filler words.
//! A query names its target document's keywords (`what is kw1 kw2 kw3`)
//! and is answered by that document's code. Words are three characters so
//! that, at 8-pixel glyph cells, each word plus its trailing space covers
//! exactly one row of four patches.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    render_text_screenshot, save_corpus, write_qrels, write_queries, DocumentRecord, QueryRecord,
    RelevanceJudgments,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "corpus.jsonl";
pub const IMAGE_DIR: &str = "images";
pub const TRAIN_QUERIES_FILE: &str = "queries.train.jsonl";
pub const TEST_QUERIES_FILE: &str = "queries.test.jsonl";
pub const TRAIN_QRELS_FILE: &str = "qrels.train.txt";
pub const TEST_QRELS_FILE: &str = "qrels.test.txt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub docs: usize,
    pub train_queries: usize,
    pub test_queries: usize,
    pub height: usize,
    pub width: usize,
    pub keywords_per_doc: usize,
    pub keyword_vocab: usize,
    pub keyword_repeats: usize,
    pub filler_words: usize,
    pub filler_vocab: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            docs: 500,
            train_queries: 100,
            test_queries: 50,
            height: 128,
            width: 128,
            keywords_per_doc: 3,
            keyword_vocab: 32,
            keyword_repeats: 5,
            filler_words: 4,
            filler_vocab: 16,
            seed: 0,
        }
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.docs == 0 {
            return Err(Error::Config("synth needs at least one document".into()));
        }
        if self.train_queries + self.test_queries > self.docs {
            return Err(Error::Config(format!(
                "{} queries need as many distinct target documents, only {} requested",
                self.train_queries + self.test_queries,
                self.docs
            )));
        }
        if self.keywords_per_doc == 0 || self.keywords_per_doc > self.keyword_vocab {
            return Err(Error::Config(
                "keywords_per_doc must lie in 1..=keyword_vocab".into(),
            ));
        }
        if binomial(self.keyword_vocab, self.keywords_per_doc) < self.docs as u128 {
            return Err(Error::Config(format!(
                "only {} keyword combinations for {} documents",
                binomial(self.keyword_vocab, self.keywords_per_doc),
                self.docs
            )));
        }
        if self.keyword_vocab + self.filler_vocab > 26 * 26 * 26 {
            return Err(Error::Config(
                "word vocabulary exceeds three-letter words".into(),
            ));
        }
        if self.filler_words > 0 && self.filler_vocab == 0 {
            return Err(Error::Config(
                "filler_words > 0 needs filler_vocab > 0".into(),
            ));
        }
        if self.docs > 26 * 10 * 26 {
            return Err(Error::Config(
                "more documents than distinct answer codes".into(),
            ));
        }
        let words = self.keywords_per_doc * self.keyword_repeats + 1 + self.filler_words;
        let capacity = (self.height / 8) * (self.width / 8);
        if words * 4 > capacity + 1 {
            return Err(Error::Config(format!(
                "{words} words do not fit a {}x{} canvas",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub docs: Vec<DocumentRecord>,
    pub train_queries: Vec<QueryRecord>,
    pub test_queries: Vec<QueryRecord>,
    pub train_qrels: RelevanceJudgments,
    pub test_qrels: RelevanceJudgments,
}

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn letter(rng: &mut ChaCha8Rng) -> char {
    LETTERS[rng.gen_range(0..26)] as char
}

fn distinct_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..3).map(|_| letter(rng)).collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut taken = HashSet::new();
    let keywords = distinct_words(&mut rng, config.keyword_vocab, &mut taken);
    let fillers = distinct_words(&mut rng, config.filler_vocab, &mut taken);
    let width = config.docs.to_string().len().max(4);

    let mut combos = BTreeSet::new();
    let mut answers = HashSet::new();
    let mut docs = Vec::with_capacity(config.docs);
    let mut targets = Vec::with_capacity(config.docs);
    for i in 0..config.docs {
        let combo = loop {
            let mut c: Vec<usize> =
                rand::seq::index::sample(&mut rng, config.keyword_vocab, config.keywords_per_doc)
                    .into_vec();
            c.sort_unstable();
            if combos.insert(c.clone()) {
                break c;
            }
        };
        let answer = loop {
            let a = format!(
                "{}{}{}",
                letter(&mut rng),
                rng.gen_range(0..10),
                letter(&mut rng)
            );
            if answers.insert(a.clone()) {
                break a;
            }
        };
        let mut words: Vec<&str> = Vec::new();
        for _ in 0..config.keyword_repeats {
            words.extend(combo.iter().map(|&k| keywords[k].as_str()));
        }
        words.push(&answer);
        for _ in 0..config.filler_words {
            words.push(&fillers[rng.gen_range(0..fillers.len())]);
        }
        words.shuffle(&mut rng);
        let text = words.join(" ");
        let doc_id = format!("doc{i:0width$}");
        let image = render_text_screenshot(
            &text,
            config.height,
            config.width,
            config.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        )?;
        let question = format!(
            "what is {}",
            combo
                .iter()
                .map(|&k| keywords[k].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        );
        targets.push((question, answer));
        docs.push(DocumentRecord {
            doc_id,
            image,
            text_mirror: text,
        });
    }

    let mut order: Vec<usize> = (0..config.docs).collect();
    order.shuffle(&mut rng);
    let make = |prefix: &str, picks: &[usize]| {
        let mut queries = Vec::new();
        let mut qrels = RelevanceJudgments::new();
        for (n, &d) in picks.iter().enumerate() {
            let query_id = format!("{prefix}{n:0width$}");
            let (text, answer) = &targets[d];
            queries.push(QueryRecord {
                query_id: query_id.clone(),
                text: text.clone(),
                answers: vec![answer.clone()],
            });
            qrels
                .entry(query_id)
                .or_default()
                .insert(docs[d].doc_id.clone(), 1);
        }
        (queries, qrels)
    };
    let (train_queries, train_qrels) = make("train", &order[..config.train_queries]);
    let (test_queries, test_qrels) = make(
        "test",
        &order[config.train_queries..config.train_queries + config.test_queries],
    );
    Ok(SynthCorpus {
        docs,
        train_queries,
        test_queries,
        train_qrels,
        test_qrels,
    })
}

impl SynthCorpus {
    /// Writes the manifest, PNG images, query files and qrels into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_corpus(&dir.join(MANIFEST_FILE), IMAGE_DIR, &self.docs)?;
        write_queries(&dir.join(TRAIN_QUERIES_FILE), &self.train_queries)?;
        write_queries(&dir.join(TEST_QUERIES_FILE), &self.test_queries)?;
        write_qrels(&dir.join(TRAIN_QRELS_FILE), &self.train_qrels)?;
        write_qrels(&dir.join(TEST_QRELS_FILE), &self.test_qrels)
    }
}
