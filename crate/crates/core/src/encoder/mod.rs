//! Miniature bi-encoder.
//!
//! Document tower: patches → `patch_proj` → concatenate each run of
//! `concat_group` patch latents → `group_proj` → append the prompt token
//! embeddings → shared causal mixer → last position → L2 normalise.
//!
//! Query tower: `[BOS] tokens [EOS]` embedded through `token_table` → the
//! same mixer → last position → L2 normalise.

mod checkpoint;
pub(crate) mod mixer;
mod params;

use std::io::{BufRead, Write};

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PixelGrid;
use crate::error::{Error, Result};
use crate::lexical::tokenize;
use crate::patchgrid::{crop_and_patch, layout, CropConfig};
use crate::scalar::Scalar;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use params::{EncoderParams, MixerLayer};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
/// Ids below this are never produced by token hashing.
pub const RESERVED_TOKENS: u32 = 5;
/// Stand-in for the image prompt: three prompt-word ids closed by `EOS`.
pub const DEFAULT_PROMPT: [u32; 4] = [2, 3, 4, EOS];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub prompt_tokens: Vec<u32>,
    pub crop: CropConfig,
    pub mixer_layers: usize,
    /// Image channels the patch projection expects (1 or 3).
    pub channels: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            vocab_size: 4096,
            prompt_tokens: DEFAULT_PROMPT.to_vec(),
            crop: CropConfig::toy(2, 2),
            mixer_layers: 1,
            channels: 1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "embed_dim must be >= 2, got {}",
                self.embed_dim
            )));
        }
        if self.mixer_layers < 1 {
            return Err(Error::Config("mixer_layers must be >= 1".into()));
        }
        if self.vocab_size <= RESERVED_TOKENS as usize {
            return Err(Error::Config(format!(
                "vocab_size must exceed the {RESERVED_TOKENS} reserved ids, got {}",
                self.vocab_size
            )));
        }
        if self.prompt_tokens.is_empty() {
            return Err(Error::Config("prompt_tokens must not be empty".into()));
        }
        if let Some(t) = self
            .prompt_tokens
            .iter()
            .find(|&&t| t as usize >= self.vocab_size)
        {
            return Err(Error::Config(format!(
                "prompt token {t} outside vocabulary"
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        self.crop.validate()
    }

    pub fn patch_len(&self) -> usize {
        self.crop.patch_len(self.channels)
    }

    /// Position of the pooled token in a document sequence.
    pub fn document_pooled_index(&self) -> Result<usize> {
        Ok(layout(&self.crop)?.latent_embeddings + self.prompt_tokens.len() - 1)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hashes one token into the non-reserved part of the vocabulary.
pub fn token_id(token: &str, vocab_size: usize) -> u32 {
    let buckets = vocab_size as u64 - u64::from(RESERVED_TOKENS);
    (fnv1a(token.as_bytes()) % buckets) as u32 + RESERVED_TOKENS
}

/// `[BOS] hashed(tokenize(text)) [EOS]`.
pub fn query_token_ids(text: &str, config: &EncoderConfig) -> Vec<u32> {
    let mut ids = vec![BOS];
    ids.extend(
        tokenize(text)
            .iter()
            .map(|t| token_id(t, config.vocab_size)),
    );
    ids.push(EOS);
    ids
}

/// Unit-norm embedding produced by either tower.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T>(Vec<T>);

impl<T: Scalar> EmbeddingVector<T> {
    /// Scales `raw` to unit L2 norm.
    pub fn normalize(raw: Vec<T>) -> Self {
        let norm = raw.iter().map(|&v| v * v).sum::<T>().sqrt();
        let norm = norm.max(T::min_positive_value());
        Self(raw.into_iter().map(|v| v / norm).collect())
    }

    /// Wraps an already-normalised vector, checking the norm to `tol`.
    pub fn from_unit(values: Vec<T>, tol: f64) -> Result<Self> {
        let norm = values.iter().map(|&v| v * v).sum::<T>().sqrt().as_f64();
        if (norm - 1.0).abs() > tol {
            return Err(Error::Validation(format!("vector norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|v| v.as_f32()).collect()
    }
}

/// Forward state of one document kept for the backward pass.
pub(crate) struct DocumentTrace<T> {
    grouped: Array2<T>,
    mixer: mixer::MixerCache<T>,
    pooled: Array1<T>,
    pub(crate) embedding: Array1<T>,
}

/// Forward state of one query kept for the backward pass.
pub(crate) struct QueryTrace<T> {
    tokens: Vec<u32>,
    mixer: mixer::MixerCache<T>,
    pooled: Array1<T>,
    pub(crate) embedding: Array1<T>,
}

fn l2_normalize<T: Scalar>(v: &Array1<T>) -> Array1<T> {
    let norm = v.dot(v).sqrt().max(T::min_positive_value());
    v / norm
}

/// Gradient through `e = u / |u|`.
fn normalize_backward<T: Scalar>(
    pooled: &Array1<T>,
    emb: &Array1<T>,
    d_emb: &Array1<T>,
) -> Array1<T> {
    let norm = pooled.dot(pooled).sqrt().max(T::min_positive_value());
    let along = emb.dot(d_emb);
    (d_emb - &(emb * along)) / norm
}

fn document_sequence<T: Scalar>(
    patches: &Array2<T>,
    params: &EncoderParams<T>,
    config: &EncoderConfig,
) -> Result<(Array2<T>, Array2<T>)> {
    let plen = params.patch_proj.nrows();
    if patches.ncols() != plen {
        return Err(Error::Config(format!(
            "patch vectors have length {}, encoder expects {plen}",
            patches.ncols()
        )));
    }
    let group = config.crop.concat_group;
    if patches.nrows() % group != 0 {
        return Err(Error::Config(format!(
            "{} patches do not split into groups of {group}",
            patches.nrows()
        )));
    }
    let d = params.patch_proj.ncols();
    let latents = patches.dot(&params.patch_proj);
    let n_lat = patches.nrows() / group;
    let grouped = latents
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n_lat, group * d))
        .map_err(|e| Error::Format(e.to_string()))?;
    let projected = grouped.dot(&params.group_proj);
    let prompt = params.token_table.select(
        Axis(0),
        &config
            .prompt_tokens
            .iter()
            .map(|&t| t as usize)
            .collect::<Vec<_>>(),
    );
    let seq = ndarray::concatenate(Axis(0), &[projected.view(), prompt.view()])
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((seq, grouped))
}

pub(crate) fn document_forward<T: Scalar>(
    patches: &Array2<T>,
    params: &EncoderParams<T>,
    config: &EncoderConfig,
) -> Result<DocumentTrace<T>> {
    let (seq, grouped) = document_sequence(patches, params, config)?;
    let (pooled, mixer) = mixer::forward(seq, params);
    let embedding = l2_normalize(&pooled);
    Ok(DocumentTrace {
        grouped,
        mixer,
        pooled,
        embedding,
    })
}

pub(crate) fn document_backward<T: Scalar>(
    patches: &Array2<T>,
    trace: &DocumentTrace<T>,
    d_emb: &Array1<T>,
    params: &EncoderParams<T>,
    config: &EncoderConfig,
    grads: &mut EncoderParams<T>,
) {
    let d_pooled = normalize_backward(&trace.pooled, &trace.embedding, d_emb);
    let d_seq = mixer::backward(&trace.mixer, &d_pooled, params, grads);
    let n_lat = trace.grouped.nrows();
    let d_lat = d_seq.slice(s![..n_lat, ..]);
    ndarray::linalg::general_mat_mul(
        T::one(),
        &trace.grouped.t(),
        &d_lat,
        T::one(),
        &mut grads.group_proj,
    );
    let d_grouped = d_lat.dot(&params.group_proj.t());
    let d = params.patch_proj.ncols();
    let d_latents = d_grouped
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((patches.nrows(), d))
        .expect("grouped latents reshape back to patch rows");
    ndarray::linalg::general_mat_mul(
        T::one(),
        &patches.t(),
        &d_latents,
        T::one(),
        &mut grads.patch_proj,
    );
    for (i, &tok) in config.prompt_tokens.iter().enumerate() {
        let mut row = grads.token_table.row_mut(tok as usize);
        row.scaled_add(T::one(), &d_seq.row(n_lat + i));
    }
}

pub(crate) fn query_forward<T: Scalar>(
    tokens: Vec<u32>,
    params: &EncoderParams<T>,
) -> Result<QueryTrace<T>> {
    let vocab = params.token_table.nrows();
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Config(format!(
            "token id {t} outside vocabulary of {vocab}"
        )));
    }
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let seq = params.token_table.select(Axis(0), &idx);
    let (pooled, mixer) = mixer::forward(seq, params);
    let embedding = l2_normalize(&pooled);
    Ok(QueryTrace {
        tokens,
        mixer,
        pooled,
        embedding,
    })
}

pub(crate) fn query_backward<T: Scalar>(
    trace: &QueryTrace<T>,
    d_emb: &Array1<T>,
    params: &EncoderParams<T>,
    grads: &mut EncoderParams<T>,
) {
    let d_pooled = normalize_backward(&trace.pooled, &trace.embedding, d_emb);
    let d_seq = mixer::backward(&trace.mixer, &d_pooled, params, grads);
    for (i, &tok) in trace.tokens.iter().enumerate() {
        let mut row = grads.token_table.row_mut(tok as usize);
        row.scaled_add(T::one(), &d_seq.row(i));
    }
}

fn check_image<T: Scalar>(
    image: &PixelGrid,
    params: &EncoderParams<T>,
    config: &EncoderConfig,
) -> Result<()> {
    if image.channels() != config.channels {
        return Err(Error::Config(format!(
            "image has {} channels, encoder expects {}",
            image.channels(),
            config.channels
        )));
    }
    params.check_shapes(config)
}

/// Embeds pre-computed patch vectors (rows of [`crop_and_patch`]).
pub fn encode_patches<T: Scalar>(
    patches: &Array2<T>,
    params: &EncoderParams<T>,
    config: &EncoderConfig,
) -> Result<EmbeddingVector<T>> {
    let trace = document_forward(patches, params, config)?;
    Ok(EmbeddingVector(trace.embedding.to_vec()))
}

pub fn encode_document<T: Scalar>(
    image: &PixelGrid,
    params: &EncoderParams<T>,
    config: &EncoderConfig,
) -> Result<EmbeddingVector<T>> {
    check_image(image, params, config)?;
    let patches = crop_and_patch(image, &config.crop)?;
    encode_patches(&patches, params, config)
}

pub fn encode_query<T: Scalar>(
    text: &str,
    params: &EncoderParams<T>,
    config: &EncoderConfig,
) -> Result<EmbeddingVector<T>> {
    params.check_shapes(config)?;
    let trace = query_forward(query_token_ids(text, config), params)?;
    Ok(EmbeddingVector(trace.embedding.to_vec()))
}

/// Encodes many images in parallel; output order follows input order.
pub fn encode_documents<T: Scalar>(
    images: &[&PixelGrid],
    params: &EncoderParams<T>,
    config: &EncoderConfig,
) -> Result<Vec<EmbeddingVector<T>>> {
    images
        .par_iter()
        .map(|img| encode_document(img, params, config))
        .collect()
}

/// Which part of a document sequence a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Local,
    Global,
    Prompt,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Local => "local",
            Region::Global => "global",
            Region::Prompt => "prompt",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "local" => Some(Region::Local),
            "global" => Some(Region::Global),
            "prompt" => Some(Region::Prompt),
            _ => None,
        }
    }
}

/// Attention paid by the pooled position, one row per mixer layer, over
/// every sequence position (image latents first, then prompt tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Array2<f64>,
    pub regions: Vec<Region>,
}

impl AttentionMap {
    /// Columns belonging to image latents.
    pub fn latent_weights(&self) -> ndarray::ArrayView2<'_, f64> {
        let n = self
            .regions
            .iter()
            .filter(|r| **r != Region::Prompt)
            .count();
        self.weights.slice(s![.., ..n])
    }

    /// Total attention mass on `region` per layer.
    pub fn region_mass(&self, region: Region) -> Vec<f64> {
        self.weights
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .zip(&self.regions)
                    .filter(|(_, r)| **r == region)
                    .map(|(w, _)| *w)
                    .sum()
            })
            .collect()
    }

    /// CSV `layer,position,region,weight`; weights use the shortest decimal
    /// form that parses back to the same `f64`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "layer,position,region,weight")?;
        for (layer, row) in self.weights.rows().into_iter().enumerate() {
            for (pos, (weight, region)) in row.iter().zip(&self.regions).enumerate() {
                writeln!(w, "{layer},{pos},{},{weight}", region.as_str())?;
            }
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut cells: Vec<(usize, usize, Region, f64)> = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if i == 0 || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("attention csv line {}: {line:?}", i + 1));
            if cols.len() != 4 {
                return Err(bad());
            }
            cells.push((
                cols[0].parse().map_err(|_| bad())?,
                cols[1].parse().map_err(|_| bad())?,
                Region::parse(cols[2]).ok_or_else(bad)?,
                cols[3].parse().map_err(|_| bad())?,
            ));
        }
        let layers = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let positions = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        if cells.len() != layers * positions {
            return Err(Error::Format("attention csv is not a full grid".into()));
        }
        let mut weights = Array2::zeros((layers, positions));
        let mut regions = vec![Region::Prompt; positions];
        for (l, p, region, w) in cells {
            weights[[l, p]] = w;
            regions[p] = region;
        }
        Ok(Self { weights, regions })
    }
}

/// Attention of the pooled position to every position, per layer.
pub fn attention_map<T: Scalar>(
    image: &PixelGrid,
    params: &EncoderParams<T>,
    config: &EncoderConfig,
) -> Result<AttentionMap> {
    check_image(image, params, config)?;
    let plan = layout(&config.crop)?;
    let patches = crop_and_patch(image, &config.crop)?;
    let trace = document_forward(&patches, params, config)?;
    let rows = trace.mixer.final_row_attention();
    let positions = rows[0].len();
    let mut weights = Array2::zeros((rows.len(), positions));
    for (mut dst, src) in weights.rows_mut().into_iter().zip(rows) {
        dst.assign(&src.mapv(|v| v.as_f64()));
    }
    let local = (plan.total_subimages - 1) * plan.patches_per_subimage / config.crop.concat_group;
    let regions = (0..positions)
        .map(|p| {
            if p < local {
                Region::Local
            } else if p < plan.latent_embeddings {
                Region::Global
            } else {
                Region::Prompt
            }
        })
        .collect();
    Ok(AttentionMap { weights, regions })
}
