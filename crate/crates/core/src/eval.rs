//! Ranked runs, TREC interchange, answer-containment accuracy, graded
//! nDCG / recall, score fusion and encoder throughput.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::corpus::{PixelGrid, QueryRecord};
use crate::encoder::{encode_document, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::lexical::tokenize;
use crate::patchgrid::{layout, CropConfig};
use crate::scalar::Scalar;

/// Ranked result list for one query: descending score, ties by doc_id
/// ascending, no repeated doc_id.
#[derive(Debug, Clone, PartialEq)]
pub struct RunList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

fn rank_order(a: &(String, f64), b: &(String, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

impl RunList {
    /// Sorts by the tie rule and keeps the first `k`.
    pub fn from_scores(query_id: &str, mut scored: Vec<(String, f64)>, k: usize) -> Self {
        if k < scored.len() {
            scored.select_nth_unstable_by(k, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Self {
            query_id: query_id.to_string(),
            entries: scored,
        }
    }

    /// Validates ordering and uniqueness of already-ranked entries.
    pub fn new(query_id: &str, entries: Vec<(String, f64)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, (id, score)) in entries.iter().enumerate() {
            if !score.is_finite() {
                return Err(Error::Validation(format!(
                    "run {query_id}: non-finite score for {id}"
                )));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!(
                    "run {query_id}: doc {id} appears twice"
                )));
            }
            if i > 0 && rank_order(&entries[i - 1], &entries[i]) != std::cmp::Ordering::Less {
                return Err(Error::Validation(format!(
                    "run {query_id}: entries out of rank order at {id}"
                )));
            }
        }
        Ok(Self {
            query_id: query_id.to_string(),
            entries,
        })
    }

    pub fn empty(query_id: &str) -> Self {
        Self {
            query_id: query_id.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.0.as_str())
    }

    pub fn top(&self, k: usize) -> &[(String, f64)] {
        &self.entries[..k.min(self.entries.len())]
    }
}

/// Six-column TREC lines: `query_id Q0 doc_id rank score tag`, ranks from 1.
pub fn write_runs(mut w: impl Write, runs: &[RunList], tag: &str) -> std::io::Result<()> {
    for run in runs {
        for (rank, (doc, score)) in run.entries.iter().enumerate() {
            writeln!(
                w,
                "{} Q0 {} {} {} {}",
                run.query_id,
                doc,
                rank + 1,
                score,
                tag
            )?;
        }
    }
    w.flush()
}

pub fn write_run_file(path: &Path, runs: &[RunList], tag: &str) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_runs(BufWriter::new(f), runs, tag).map_err(|e| Error::io(path, e))
}

/// Reads a TREC run file. Runs appear in first-seen query order; entries
/// are ordered by the rank column.
pub fn read_run_file(path: &Path) -> Result<Vec<RunList>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(usize, String, f64)>> = HashMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 6 columns, got {}", cols.len()),
            ));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad rank {:?}", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad score {:?}", cols[4])))?;
        let q = cols[0].to_string();
        if !rows.contains_key(&q) {
            order.push(q.clone());
        }
        rows.entry(q)
            .or_default()
            .push((rank, cols[2].to_string(), score));
    }
    order
        .into_iter()
        .map(|q| {
            let mut r = rows.remove(&q).unwrap_or_default();
            r.sort_by_key(|e| e.0);
            RunList::new(&q, r.into_iter().map(|(_, d, s)| (d, s)).collect())
                .map_err(|e| Error::parse(path, 0, e.to_string()))
        })
        .collect()
}

/// True iff some answer's token sequence occurs contiguously in `text`.
pub fn has_answer(text: &str, answers: &[String]) -> bool {
    let hay = tokenize(text);
    answers.iter().any(|a| {
        let needle = tokenize(a);
        !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
    })
}

/// Per-query metric values plus macro averages.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metrics: Vec<String>,
    /// `(query_id, one value per metric)`, in evaluation order.
    pub per_query: Vec<(String, Vec<f64>)>,
    /// Queries left out of the averages.
    pub excluded: Vec<String>,
}

impl MetricReport {
    pub fn means(&self) -> Vec<f64> {
        let n = self.per_query.len();
        (0..self.metrics.len())
            .map(|m| {
                if n == 0 {
                    0.0
                } else {
                    self.per_query.iter().map(|(_, v)| v[m]).sum::<f64>() / n as f64
                }
            })
            .collect()
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        let i = self.metrics.iter().position(|m| m == metric)?;
        Some(self.means()[i])
    }

    /// Aligned text table with a trailing mean row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "query");
        for m in &self.metrics {
            let _ = write!(out, " {m:>10}");
        }
        out.push('\n');
        for (q, vals) in &self.per_query {
            let _ = write!(out, "{q:<16}");
            for v in vals {
                let _ = write!(out, " {v:>10.4}");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<16}", "mean");
        for v in self.means() {
            let _ = write!(out, " {v:>10.4}");
        }
        let _ = writeln!(
            out,
            "\nqueries={} excluded={}",
            self.per_query.len(),
            self.excluded.len()
        );
        out
    }

    /// `query_id,<metrics...>` with a final `mean` row.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "query_id,{}", self.metrics.join(","))?;
        for (q, vals) in &self.per_query {
            let cells: Vec<String> = vals.iter().map(f64::to_string).collect();
            writeln!(w, "{q},{}", cells.join(","))?;
        }
        let means: Vec<String> = self.means().iter().map(f64::to_string).collect();
        writeln!(w, "mean,{}", means.join(","))
    }
}

/// Answer-containment accuracy at each cutoff in `ks`. Queries with no
/// answers are excluded; queries with no run count as misses.
pub fn topk_accuracy(
    runs: &[RunList],
    queries: &[QueryRecord],
    texts: &HashMap<String, String>,
    ks: &[usize],
) -> Result<MetricReport> {
    let known: HashSet<&str> = queries.iter().map(|q| q.query_id.as_str()).collect();
    let mut by_query: HashMap<&str, &RunList> = HashMap::new();
    for run in runs {
        if !known.contains(run.query_id.as_str()) {
            return Err(Error::UnknownId(format!(
                "run for unknown query {:?}",
                run.query_id
            )));
        }
        by_query.insert(run.query_id.as_str(), run);
    }
    let mut report = MetricReport {
        metrics: ks.iter().map(|k| format!("top{k}")).collect(),
        per_query: Vec::new(),
        excluded: Vec::new(),
    };
    for q in queries {
        if q.answers.iter().all(|a| tokenize(a).is_empty()) {
            report.excluded.push(q.query_id.clone());
            continue;
        }
        let mut first_hit = None;
        if let Some(run) = by_query.get(q.query_id.as_str()) {
            for (rank, (doc, _)) in run.entries.iter().enumerate() {
                let text = texts.get(doc).ok_or_else(|| {
                    Error::UnknownId(format!("doc_id {doc:?} has no text mirror"))
                })?;
                if has_answer(text, &q.answers) {
                    first_hit = Some(rank + 1);
                    break;
                }
            }
        }
        let vals = ks
            .iter()
            .map(|&k| {
                if first_hit.is_some_and(|r| r <= k) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        report.per_query.push((q.query_id.clone(), vals));
    }
    Ok(report)
}

/// Graded nDCG with gain `2^g - 1` and discount `log2(rank + 1)`.
pub fn ndcg_at_k(run: &RunList, judgments: &BTreeMap<String, u32>, k: usize) -> f64 {
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let dcg: f64 = run
        .top(k)
        .iter()
        .enumerate()
        .map(|(i, (d, _))| gain(judgments.get(d).copied().unwrap_or(0)) / ((i + 2) as f64).log2())
        .sum();
    let mut grades: Vec<u32> = judgments.values().copied().filter(|&g| g > 0).collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Fraction of relevant documents (grade > 0) in the top `k`; `None` when
/// nothing is relevant.
pub fn recall_at_k(run: &RunList, judgments: &BTreeMap<String, u32>, k: usize) -> Option<f64> {
    let relevant = judgments.values().filter(|&&g| g > 0).count();
    if relevant == 0 {
        return None;
    }
    let found = run
        .top(k)
        .iter()
        .filter(|(d, _)| judgments.get(d).is_some_and(|&g| g > 0))
        .count();
    Some(found as f64 / relevant as f64)
}

/// `ndcg@k` and `recall@k` over every judged query with at least one
/// relevant document. Judged queries without a run score 0; other queries
/// are listed as excluded.
pub fn judged_metrics(
    runs: &[RunList],
    qrels: &BTreeMap<String, BTreeMap<String, u32>>,
    k: usize,
) -> MetricReport {
    let by_query: HashMap<&str, &RunList> = runs.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let mut report = MetricReport {
        metrics: vec![format!("ndcg@{k}"), format!("recall@{k}")],
        per_query: Vec::new(),
        excluded: Vec::new(),
    };
    for (q, judgments) in qrels {
        let empty = RunList::empty(q);
        let run = by_query.get(q.as_str()).copied().unwrap_or(&empty);
        match recall_at_k(run, judgments, k) {
            Some(recall) => report
                .per_query
                .push((q.clone(), vec![ndcg_at_k(run, judgments, k), recall])),
            None => report.excluded.push(q.clone()),
        }
    }
    for r in runs {
        if !qrels.contains_key(&r.query_id) {
            report.excluded.push(r.query_id.clone());
        }
    }
    report
}

fn min_max(entries: &[(String, f64)]) -> HashMap<&str, f64> {
    let lo = entries.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let hi = entries
        .iter()
        .map(|e| e.1)
        .fold(f64::NEG_INFINITY, f64::max);
    entries
        .iter()
        .map(|(d, s)| {
            let v = if hi > lo { (s - lo) / (hi - lo) } else { 1.0 };
            (d.as_str(), v)
        })
        .collect()
}

/// `alpha * dense + (1 - alpha) * lexical` over min-max normalised scores
/// of each run's top `pool_k`. A document absent from one run's pool gets 0
/// from it; a run whose pooled scores are all equal gives 1 to each of its
/// documents.
pub fn fuse_runs(dense: &RunList, lexical: &RunList, alpha: f64, pool_k: usize) -> Result<RunList> {
    if dense.query_id != lexical.query_id {
        return Err(Error::Validation(format!(
            "cannot fuse runs for different queries {:?} and {:?}",
            dense.query_id, lexical.query_id
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let dn = min_max(dense.top(pool_k));
    let ln = min_max(lexical.top(pool_k));
    let mut pool: Vec<&str> = dn.keys().chain(ln.keys()).copied().collect();
    pool.sort_unstable();
    pool.dedup();
    let fused = pool
        .into_iter()
        .map(|d| {
            let s = alpha * dn.get(d).copied().unwrap_or(0.0)
                + (1.0 - alpha) * ln.get(d).copied().unwrap_or(0.0);
            (d.to_string(), s)
        })
        .collect::<Vec<_>>();
    let n = fused.len();
    Ok(RunList::from_scores(&dense.query_id, fused, n))
}

/// Pairs runs by query id and fuses each pair; a query present in only one
/// input is fused against an empty run.
pub fn fuse_run_sets(
    dense: &[RunList],
    lexical: &[RunList],
    alpha: f64,
    pool_k: usize,
) -> Result<Vec<RunList>> {
    let lex: HashMap<&str, &RunList> = lexical.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for d in dense {
        seen.insert(d.query_id.as_str());
        let empty = RunList::empty(&d.query_id);
        out.push(fuse_runs(
            d,
            lex.get(d.query_id.as_str()).copied().unwrap_or(&empty),
            alpha,
            pool_k,
        )?);
    }
    for l in lexical {
        if !seen.contains(l.query_id.as_str()) {
            out.push(fuse_runs(&RunList::empty(&l.query_id), l, alpha, pool_k)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRow {
    pub cx: usize,
    pub cy: usize,
    pub docs_per_second: f64,
    pub latent_embeddings: usize,
    pub seconds: f64,
}

pub const MIN_THROUGHPUT_SAMPLE: usize = 32;

/// Times single-threaded end-to-end document encoding (resize, patching,
/// towers) for each crop grid. The first `warmup` documents are encoded
/// untimed before each measurement. Every crop must share the encoder's
/// base, patch and group sizes.
pub fn throughput_report<T: Scalar>(
    sample: &[PixelGrid],
    params: &EncoderParams<T>,
    config: &EncoderConfig,
    crops: &[(usize, usize)],
    warmup: usize,
) -> Result<Vec<ThroughputRow>> {
    if sample.len() < MIN_THROUGHPUT_SAMPLE {
        return Err(Error::Validation(format!(
            "throughput needs at least {MIN_THROUGHPUT_SAMPLE} documents, got {}",
            sample.len()
        )));
    }
    let mut rows = Vec::with_capacity(crops.len());
    for &(cx, cy) in crops {
        let crop = CropConfig {
            cx,
            cy,
            ..config.crop
        };
        let plan = layout(&crop)?;
        let cfg = EncoderConfig {
            crop,
            ..config.clone()
        };
        for img in sample.iter().take(warmup) {
            encode_document(img, params, &cfg)?;
        }
        let start = Instant::now();
        for img in sample {
            std::hint::black_box(encode_document(img, params, &cfg)?);
        }
        let seconds = start.elapsed().as_secs_f64();
        rows.push(ThroughputRow {
            cx,
            cy,
            docs_per_second: sample.len() as f64 / seconds.max(f64::MIN_POSITIVE),
            latent_embeddings: plan.latent_embeddings,
            seconds,
        });
    }
    Ok(rows)
}

pub fn write_throughput_csv(mut w: impl Write, rows: &[ThroughputRow]) -> std::io::Result<()> {
    writeln!(w, "cx,cy,docs_per_second,latent_embeddings,seconds")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.cx, r.cy, r.docs_per_second, r.latent_embeddings, r.seconds
        )?;
    }
    Ok(())
}
