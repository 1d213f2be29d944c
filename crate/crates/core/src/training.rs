//! Contrastive training of the bi-encoder: cosine similarity, InfoNCE over
//! positives, hard negatives and in-batch negatives, exact gradients and
//! the optimisation loop.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentRecord, QueryRecord};
use crate::encoder::{
    document_backward, document_forward, query_backward, query_forward, query_token_ids,
    EmbeddingVector, EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::patchgrid::crop_and_patch;
use crate::scalar::Scalar;

/// One query with its positive document and mined hard negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query_id: String,
    #[serde(rename = "positive")]
    pub positive_doc_id: String,
    #[serde(rename = "hard_negatives")]
    pub hard_negative_doc_ids: Vec<String>,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        if self.hard_negative_doc_ids.is_empty() {
            return Err(Error::Validation(format!(
                "example {} has no hard negatives",
                self.query_id
            )));
        }
        if self.hard_negative_doc_ids.contains(&self.positive_doc_id) {
            return Err(Error::Validation(format!(
                "example {} lists its positive {} as a negative",
                self.query_id, self.positive_doc_id
            )));
        }
        Ok(())
    }
}

pub fn read_examples(path: &Path) -> Result<Vec<TrainingExample>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        ex.validate()
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_examples(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("examples serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub hard_negs_per_query: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.02,
            batch_size: 16,
            hard_negs_per_query: 1,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: Optimizer::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Dot product of two unit vectors.
pub fn cosine_sim<T: Scalar>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| x * y)
        .sum())
}

/// `-log softmax` of the positive among positive and negatives at
/// temperature `tau`, computed with the max shifted out.
pub fn info_nce_loss<T: Scalar>(sim_pos: T, sim_negs: &[T], tau: T) -> T {
    let pos = sim_pos / tau;
    let max = sim_negs.iter().map(|&s| s / tau).fold(pos, T::max);
    let total: T = (pos - max).exp() + sim_negs.iter().map(|&s| (s / tau - max).exp()).sum::<T>();
    max + total.ln() - pos
}

/// Patch matrices and query token ids, computed once before training.
pub struct TrainingData<T> {
    patches: HashMap<String, Array2<T>>,
    queries: HashMap<String, Vec<u32>>,
}

impl<T: Scalar> TrainingData<T> {
    /// Keeps only documents and queries referenced by `examples`.
    pub fn new(
        docs: &[DocumentRecord],
        queries: &[QueryRecord],
        examples: &[TrainingExample],
        config: &EncoderConfig,
    ) -> Result<Self> {
        let mut wanted: BTreeMap<&str, ()> = BTreeMap::new();
        for ex in examples {
            wanted.insert(&ex.positive_doc_id, ());
            for n in &ex.hard_negative_doc_ids {
                wanted.insert(n, ());
            }
        }
        let by_id: HashMap<&str, &DocumentRecord> =
            docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
        let selected = wanted
            .keys()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::UnknownId(format!("doc_id {id:?} not in corpus")))
            })
            .collect::<Result<Vec<_>>>()?;
        let patches = selected
            .par_iter()
            .map(|d| {
                if d.image.channels() != config.channels {
                    return Err(Error::Config(format!(
                        "document {} has {} channels, encoder expects {}",
                        d.doc_id,
                        d.image.channels(),
                        config.channels
                    )));
                }
                Ok((
                    d.doc_id.clone(),
                    crop_and_patch::<T>(&d.image, &config.crop)?,
                ))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        let qtext: HashMap<&str, &str> = queries
            .iter()
            .map(|q| (q.query_id.as_str(), q.text.as_str()))
            .collect();
        let mut tokens = HashMap::new();
        for ex in examples {
            let text = qtext.get(ex.query_id.as_str()).ok_or_else(|| {
                Error::UnknownId(format!("query_id {:?} not in query set", ex.query_id))
            })?;
            tokens.insert(ex.query_id.clone(), query_token_ids(text, config));
        }
        Ok(Self {
            patches,
            queries: tokens,
        })
    }

    fn patches(&self, doc_id: &str) -> Result<&Array2<T>> {
        self.patches
            .get(doc_id)
            .ok_or_else(|| Error::UnknownId(format!("doc_id {doc_id:?} not in training data")))
    }

    fn tokens(&self, query_id: &str) -> Result<&[u32]> {
        self.queries
            .get(query_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownId(format!("query_id {query_id:?} not in training data")))
    }
}

/// Mean InfoNCE over the batch and its gradient.
///
/// Every query scores every document slot in the batch: all positives and
/// all hard negatives, in batch order. Slot `j` holding the same document as
/// query `i`'s positive still counts as a negative for `i` unless `j` is
/// `i`'s own positive slot.
pub fn batch_loss_and_grads<T: Scalar>(
    batch: &[TrainingExample],
    data: &TrainingData<T>,
    params: &EncoderParams<T>,
    config: &EncoderConfig,
    temperature: T,
) -> Result<(T, EncoderParams<T>)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty training batch".into()));
    }
    let mut slots: Vec<&str> = Vec::new();
    let mut pos_slot = Vec::with_capacity(batch.len());
    for ex in batch {
        pos_slot.push(slots.len());
        slots.push(&ex.positive_doc_id);
        slots.extend(ex.hard_negative_doc_ids.iter().map(String::as_str));
    }
    let mut unique: Vec<&str> = Vec::new();
    let mut unique_of: HashMap<&str, usize> = HashMap::new();
    let slot_doc: Vec<usize> = slots
        .iter()
        .map(|&id| {
            *unique_of.entry(id).or_insert_with(|| {
                unique.push(id);
                unique.len() - 1
            })
        })
        .collect();

    let doc_inputs = unique
        .iter()
        .map(|id| data.patches(id))
        .collect::<Result<Vec<_>>>()?;
    let query_inputs = batch
        .iter()
        .map(|ex| data.tokens(&ex.query_id).map(<[u32]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let doc_traces = doc_inputs
        .par_iter()
        .map(|p| document_forward(p, params, config))
        .collect::<Result<Vec<_>>>()?;
    let query_traces = query_inputs
        .into_par_iter()
        .map(|t| query_forward(t, params))
        .collect::<Result<Vec<_>>>()?;

    let n = batch.len();
    let m = slots.len();
    let d = config.embed_dim;
    let scale = T::one() / (temperature * T::lit(n as f64));
    let mut loss = T::zero();
    let mut d_query = vec![Array1::<T>::zeros(d); n];
    let mut d_doc = vec![Array1::<T>::zeros(d); unique.len()];
    for i in 0..n {
        let q = &query_traces[i].embedding;
        let sims: Vec<T> = slot_doc
            .iter()
            .map(|&u| q.dot(&doc_traces[u].embedding))
            .collect();
        let negs: Vec<T> = (0..m)
            .filter(|&j| j != pos_slot[i])
            .map(|j| sims[j])
            .collect();
        loss = loss + info_nce_loss(sims[pos_slot[i]], &negs, temperature);
        let max = sims.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = sims
            .iter()
            .map(|&s| ((s - max) / temperature).exp())
            .collect();
        let z: T = exps.iter().copied().sum();
        for j in 0..m {
            let target = if j == pos_slot[i] {
                T::one()
            } else {
                T::zero()
            };
            let ds = (exps[j] / z - target) * scale;
            let u = slot_doc[j];
            d_query[i].scaled_add(ds, &doc_traces[u].embedding);
            d_doc[u].scaled_add(ds, q);
        }
    }
    loss = loss / T::lit(n as f64);

    let mut grads = params.zeros_like();
    for (trace, g) in query_traces.iter().zip(&d_query) {
        query_backward(trace, g, params, &mut grads);
    }
    for ((trace, g), p) in doc_traces.iter().zip(&d_doc).zip(&doc_inputs) {
        document_backward(p, trace, g, params, config, &mut grads);
    }
    Ok((loss, grads))
}

struct OptimizerState<T> {
    kind: Optimizer,
    step: i32,
    m: Option<EncoderParams<T>>,
    v: Option<EncoderParams<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    fn new(kind: Optimizer, params: &EncoderParams<T>) -> Self {
        let moments = matches!(kind, Optimizer::Adam { .. });
        Self {
            kind,
            step: 0,
            m: moments.then(|| params.zeros_like()),
            v: moments.then(|| params.zeros_like()),
        }
    }

    fn update(&mut self, params: &mut EncoderParams<T>, grads: &EncoderParams<T>, lr: T) {
        self.step += 1;
        match self.kind {
            Optimizer::Sgd => params.scaled_add(-lr, grads),
            Optimizer::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let c1 = T::one() - b1.powi(self.step);
                let c2 = T::one() - b2.powi(self.step);
                let m = self.m.as_mut().expect("adam state");
                let v = self.v.as_mut().expect("adam state");
                let tensors = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.named_tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut());
                for (((p, (_, g)), m), v) in tensors {
                    ndarray::Zip::from(p)
                        .and(g)
                        .and(m)
                        .and(v)
                        .for_each(|p, &g, m, v| {
                            *m = b1 * *m + (T::one() - b1) * g;
                            *v = b2 * *v + (T::one() - b2) * g * g;
                            let m_hat = *m / c1;
                            let v_hat = *v / c2;
                            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                        });
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: EncoderParams<T>,
    pub history: Vec<LossRecord>,
}

impl<T> TrainOutcome<T> {
    /// Mean batch loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_means(&self.history)
    }
}

pub fn epoch_means(history: &[LossRecord]) -> Vec<f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in history {
        let e = sums.entry(r.epoch).or_default();
        e.0 += r.loss;
        e.1 += 1;
    }
    sums.values().map(|(s, c)| s / *c as f64).collect()
}

/// CSV `epoch,step,loss`, epochs and steps counted from 0.
pub fn write_loss_log(mut w: impl Write, history: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "epoch,step,loss")?;
    for r in history {
        writeln!(w, "{},{},{}", r.epoch, r.step, r.loss)?;
    }
    w.flush()
}

/// Trains from the seed-initialised encoder.
pub fn train<T: Scalar>(
    data: &TrainingData<T>,
    examples: &[TrainingExample],
    train_config: &TrainingConfig,
    encoder_config: &EncoderConfig,
) -> Result<TrainOutcome<T>> {
    let params = EncoderParams::init(encoder_config)?;
    train_from(
        params,
        data,
        examples,
        train_config,
        encoder_config,
        |_, _| {},
    )
}

/// Trains starting from `params`, calling `on_epoch(epoch, mean_loss)`
/// after each epoch. Each epoch shuffles the examples and, per batch,
/// samples `hard_negs_per_query` of each example's hard negatives (all of
/// them when 0 or when fewer are available).
pub fn train_from<T: Scalar>(
    mut params: EncoderParams<T>,
    data: &TrainingData<T>,
    examples: &[TrainingExample],
    train_config: &TrainingConfig,
    encoder_config: &EncoderConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome<T>> {
    train_config.validate()?;
    params.check_shapes(encoder_config)?;
    if examples.is_empty() {
        return Err(Error::Validation("no training examples".into()));
    }
    for ex in examples {
        ex.validate()?;
        data.tokens(&ex.query_id)?;
        data.patches(&ex.positive_doc_id)?;
        for n in &ex.hard_negative_doc_ids {
            data.patches(n)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut opt = OptimizerState::new(train_config.optimizer, &params);
    let tau = T::lit(train_config.temperature);
    let lr = T::lit(train_config.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..train_config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(train_config.batch_size).enumerate() {
            let batch: Vec<TrainingExample> = chunk
                .iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let k = train_config.hard_negs_per_query;
                    let negs = if k == 0 || k >= ex.hard_negative_doc_ids.len() {
                        ex.hard_negative_doc_ids.clone()
                    } else {
                        ex.hard_negative_doc_ids
                            .choose_multiple(&mut rng, k)
                            .cloned()
                            .collect()
                    };
                    TrainingExample {
                        query_id: ex.query_id.clone(),
                        positive_doc_id: ex.positive_doc_id.clone(),
                        hard_negative_doc_ids: negs,
                    }
                })
                .collect();
            let (loss, grads) = batch_loss_and_grads(&batch, data, &params, encoder_config, tau)?;
            let loss = loss.as_f64();
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            opt.update(&mut params, &grads, lr);
            if !params.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: "non-finite parameters after update".into(),
                });
            }
            history.push(LossRecord { epoch, step, loss });
            sum += loss;
            steps += 1;
        }
        on_epoch(epoch, sum / steps as f64);
    }
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::render_text_screenshot;
    use crate::patchgrid::CropConfig;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            vocab_size: 64,
            crop: CropConfig {
                cx: 1,
                cy: 1,
                base_side: 16,
                patch_side: 4,
                concat_group: 4,
            },
            seed: 5,
            ..EncoderConfig::default()
        }
    }

    fn fixture(n_docs: usize) -> (Vec<DocumentRecord>, Vec<QueryRecord>) {
        let docs = (0..n_docs)
            .map(|i| DocumentRecord {
                doc_id: format!("d{i}"),
                image: render_text_screenshot(&format!("w{i} x{}", i * 7), 16, 16, i as u64)
                    .unwrap(),
                text_mirror: format!("w{i}"),
            })
            .collect();
        let queries = (0..n_docs)
            .map(|i| QueryRecord {
                query_id: format!("q{i}"),
                text: format!("w{i} what"),
                answers: vec![format!("w{i}")],
            })
            .collect();
        (docs, queries)
    }

    fn ex(q: &str, pos: &str, negs: &[&str]) -> TrainingExample {
        TrainingExample {
            query_id: q.into(),
            positive_doc_id: pos.into(),
            hard_negative_doc_ids: negs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn cosine_examples() {
        let v = EmbeddingVector::normalize(vec![0.3f64, 0.4, 1.2]);
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let a = EmbeddingVector::normalize(vec![1.0f64, 0.0]);
        let b = EmbeddingVector::normalize(vec![0.0f64, 1.0]);
        let c = EmbeddingVector::normalize(vec![-1.0f64, 0.0]);
        assert_eq!(cosine_sim(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine_sim(&a, &c).unwrap(), -1.0);
        assert!(cosine_sim(&a, &v).is_err());
    }

    #[test]
    fn info_nce_closed_forms() {
        assert_eq!(info_nce_loss(0.3f64, &[], 0.02), 0.0);
        assert!((info_nce_loss(0.3f64, &[0.3], 0.02) - 2f64.ln()).abs() < 1e-12);
        assert!((info_nce_loss(-0.7f64, &[-0.7; 63], 0.02) - 64f64.ln()).abs() < 1e-12);
        // Large logits stay finite.
        let l = info_nce_loss(1.0f64, &[-1.0, 1.0], 1e-4);
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn info_nce_shift_and_permutation() {
        let negs = [0.1f64, -0.4, 0.35, 0.2];
        let base = info_nce_loss(0.25, &negs, 0.05);
        let shifted: Vec<f64> = negs.iter().map(|s| s + 0.37).collect();
        assert!((info_nce_loss(0.25 + 0.37, &shifted, 0.05) - base).abs() < 1e-12);
        let permuted = [0.35, 0.2, 0.1, -0.4];
        assert!((info_nce_loss(0.25, &permuted, 0.05) - base).abs() < 1e-15);
    }

    #[test]
    fn batch_with_zeroed_mixer_is_uniform() {
        let cfg = tiny_config();
        let (docs, queries) = fixture(4);
        let mut params = EncoderParams::<f64>::init(&cfg).unwrap();
        for l in &mut params.layers {
            for t in [
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ff_in,
                &mut l.ff_out,
            ] {
                t.fill(0.0);
            }
        }
        let batch = vec![ex("q0", "d0", &["d1", "d2", "d3"])];
        let data = TrainingData::new(&docs, &queries, &batch, &cfg).unwrap();
        let (loss, _) = batch_loss_and_grads(&batch, &data, &params, &cfg, 0.02).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unknown_doc_is_named() {
        let cfg = tiny_config();
        let (docs, queries) = fixture(2);
        let err = TrainingData::<f64>::new(&docs, &queries, &[ex("q0", "d0", &["nope"])], &cfg)
            .err()
            .unwrap();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn duplicated_example_raises_loss() {
        let cfg = tiny_config();
        let (docs, queries) = fixture(3);
        let params = EncoderParams::<f64>::init(&cfg).unwrap();
        let single = vec![ex("q0", "d0", &["d1"])];
        let doubled = vec![ex("q0", "d0", &["d1"]), ex("q0", "d0", &["d1"])];
        let data = TrainingData::new(&docs, &queries, &doubled, &cfg).unwrap();
        let (l1, _) = batch_loss_and_grads(&single, &data, &params, &cfg, 0.02).unwrap();
        let (l2, _) = batch_loss_and_grads(&doubled, &data, &params, &cfg, 0.02).unwrap();
        // Brute force: each copy sees its own positive, the other copy's
        // positive and both negatives.
        let enc = |id: &str| {
            let d = docs.iter().find(|d| d.doc_id == id).unwrap();
            crate::encoder::encode_document(&d.image, &params, &cfg).unwrap()
        };
        let q = crate::encoder::encode_query(&queries[0].text, &params, &cfg).unwrap();
        let sp = cosine_sim(&q, &enc("d0")).unwrap();
        let sn = cosine_sim(&q, &enc("d1")).unwrap();
        assert!((l1 - info_nce_loss(sp, &[sn], 0.02)).abs() < 1e-12);
        assert!((l2 - info_nce_loss(sp, &[sn, sp, sn], 0.02)).abs() < 1e-12);
        assert!(l2 > l1);
    }

    fn finite_difference_check(cfg: &EncoderConfig, tau: f64) -> f64 {
        let (docs, queries) = fixture(6);
        let batch = vec![
            ex("q0", "d0", &["d1"]),
            ex("q1", "d1", &["d2", "d3"]),
            ex("q2", "d2", &["d0"]),
            ex("q3", "d4", &["d5"]),
        ];
        let data = TrainingData::new(&docs, &queries, &batch, cfg).unwrap();
        let params = EncoderParams::<f64>::init(cfg).unwrap();
        let (_, grads) = batch_loss_and_grads(&batch, &data, &params, cfg, tau).unwrap();
        let eps = 1e-3;
        let mut worst = 0.0f64;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (t, name) in names.iter().enumerate() {
            let analytic = grads.named_tensors()[t].1.clone();
            let mut max_diff = 0.0f64;
            let mut scale = 0.0f64;
            for idx in 0..analytic.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.tensors_mut()[t].as_slice_mut().unwrap()[idx] += eps;
                minus.tensors_mut()[t].as_slice_mut().unwrap()[idx] -= eps;
                let lp = batch_loss_and_grads(&batch, &data, &plus, cfg, tau)
                    .unwrap()
                    .0;
                let lm = batch_loss_and_grads(&batch, &data, &minus, cfg, tau)
                    .unwrap()
                    .0;
                let numeric = (lp - lm) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[idx];
                max_diff = max_diff.max((a - numeric).abs());
                scale = scale.max(a.abs()).max(numeric.abs());
            }
            if scale > 0.0 {
                let rel = max_diff / scale;
                assert!(rel.is_finite(), "{name}");
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let worst = finite_difference_check(&tiny_config(), 0.02);
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradients_match_with_two_layers() {
        let mut cfg = tiny_config();
        cfg.mixer_layers = 2;
        let worst = finite_difference_check(&cfg, 0.02);
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let cfg = tiny_config();
        let (docs, queries) = fixture(6);
        let examples: Vec<_> = (0..6)
            .map(|i| {
                ex(
                    &format!("q{i}"),
                    &format!("d{i}"),
                    &[&format!("d{}", (i + 1) % 6)],
                )
            })
            .collect();
        let data = TrainingData::<f64>::new(&docs, &queries, &examples, &cfg).unwrap();
        for optimizer in [Optimizer::Sgd, Optimizer::adam()] {
            let tc = TrainingConfig {
                learning_rate: 0.0,
                // One batch per epoch, so reshuffling cannot change its loss.
                batch_size: 6,
                epochs: 3,
                optimizer,
                ..TrainingConfig::default()
            };
            let out = train(&data, &examples, &tc, &cfg).unwrap();
            assert_eq!(out.params, EncoderParams::init(&cfg).unwrap());
            let means = out.epoch_means();
            assert_eq!(means.len(), 3);
            assert!(means.iter().all(|&m| (m - means[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = tiny_config();
        let (docs, queries) = fixture(8);
        let examples: Vec<_> = (0..8)
            .map(|i| {
                ex(
                    &format!("q{i}"),
                    &format!("d{i}"),
                    &[&format!("d{}", (i + 1) % 8), &format!("d{}", (i + 3) % 8)],
                )
            })
            .collect();
        let data = TrainingData::<f64>::new(&docs, &queries, &examples, &cfg).unwrap();
        let tc = TrainingConfig {
            batch_size: 4,
            epochs: 30,
            learning_rate: 3e-3,
            temperature: 0.1,
            seed: 9,
            ..TrainingConfig::default()
        };
        let a = train(&data, &examples, &tc, &cfg).unwrap();
        let b = train(&data, &examples, &tc, &cfg).unwrap();
        let bits = |h: &[LossRecord]| h.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.history), bits(&b.history));
        assert_eq!(a.history.len(), 30 * 2);
        let means = a.epoch_means();
        assert!(means.last().unwrap() < &means[0], "{means:?}");
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = tiny_config();
        let (docs, queries) = fixture(4);
        let examples = vec![ex("q0", "d0", &["d1"]), ex("q1", "d1", &["d2"])];
        let data = TrainingData::new(&docs, &queries, &examples, &cfg).unwrap();
        let mut params = EncoderParams::<f64>::init(&cfg).unwrap();
        params.token_table[[1, 0]] = f64::NAN;
        let tc = TrainingConfig::default();
        let err = train_from(params, &data, &examples, &tc, &cfg, |_, _| {}).unwrap_err();
        assert!(matches!(
            err,
            Error::Divergence {
                epoch: 0,
                step: 0,
                ..
            }
        ));
    }

    #[test]
    fn example_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ex.jsonl");
        let examples = vec![ex("q0", "d0", &["d1", "d2"]), ex("q1", "d3", &["d0"])];
        write_examples(&path, &examples).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(
            text.starts_with(r#"{"query_id":"q0","positive":"d0","hard_negatives":["d1","d2"]}"#)
        );
        assert_eq!(read_examples(&path).unwrap(), examples);
        std::fs::write(
            &path,
            r#"{"query_id":"q","positive":"d","hard_negatives":["d"]}"#,
        )
        .unwrap();
        assert!(read_examples(&path).is_err());
        std::fs::write(
            &path,
            r#"{"query_id":"q","positive":"d","hard_negatives":[]}"#,
        )
        .unwrap();
        assert!(read_examples(&path).is_err());
    }

    #[test]
    fn loss_log_format() {
        let mut buf = Vec::new();
        let h = [
            LossRecord {
                epoch: 0,
                step: 0,
                loss: 1.5,
            },
            LossRecord {
                epoch: 0,
                step: 1,
                loss: 0.5,
            },
        ];
        write_loss_log(&mut buf, &h).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,step,loss\n0,0,1.5\n0,1,0.5\n"
        );
        assert_eq!(epoch_means(&h), [1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(TrainingConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainingConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn info_nce_monotone(pos in -1.0f64..1.0, negs in prop::collection::vec(-1.0f64..1.0, 1..8), which in 0usize..8) {
                let tau = 0.1;
                let h = 1e-6;
                let base = info_nce_loss(pos, &negs, tau);
                prop_assert!(base >= 0.0);
                prop_assert!(info_nce_loss(pos + h, &negs, tau) < base);
                let mut up = negs.clone();
                let j = which % negs.len();
                up[j] += h;
                prop_assert!(info_nce_loss(pos, &up, tau) > base);
            }

            #[test]
            fn info_nce_shift_invariant(pos in -1.0f64..1.0, negs in prop::collection::vec(-1.0f64..1.0, 0..8), c in -3.0f64..3.0) {
                let shifted: Vec<f64> = negs.iter().map(|s| s + c).collect();
                let a = info_nce_loss(pos, &negs, 0.02);
                let b = info_nce_loss(pos + c, &shifted, 0.02);
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
