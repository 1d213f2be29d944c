use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weights of one causal single-head attention block plus its feed-forward.
/// Matrices map row vectors: `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerLayer<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    /// `embed_dim -> 4 * embed_dim`
    pub ff_in: Array2<T>,
    /// `4 * embed_dim -> embed_dim`
    pub ff_out: Array2<T>,
}

/// All trainable weights. Document and query towers share `token_table`
/// and every mixer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    /// `patch_len -> embed_dim`
    pub patch_proj: Array2<T>,
    /// `concat_group * embed_dim -> embed_dim`
    pub group_proj: Array2<T>,
    /// `vocab_size -> embed_dim`
    pub token_table: Array2<T>,
    pub layers: Vec<MixerLayer<T>>,
}

/// Expected `(rows, cols)` of every tensor, in checkpoint order.
pub(crate) fn tensor_shapes(config: &EncoderConfig) -> Vec<(String, (usize, usize))> {
    let d = config.embed_dim;
    let mut shapes = vec![
        ("patch_proj".to_string(), (config.patch_len(), d)),
        ("group_proj".to_string(), (config.crop.concat_group * d, d)),
        ("token_table".to_string(), (config.vocab_size, d)),
    ];
    for l in 0..config.mixer_layers {
        for (name, shape) in [
            ("wq", (d, d)),
            ("wk", (d, d)),
            ("wv", (d, d)),
            ("wo", (d, d)),
            ("ff_in", (d, 4 * d)),
            ("ff_out", (4 * d, d)),
        ] {
            shapes.push((format!("layers.{l}.{name}"), shape));
        }
    }
    shapes
}

impl<T: Scalar> EncoderParams<T> {
    /// Seeded init: every matrix i.i.d. uniform in `±1/sqrt(fan_in)`, drawn
    /// in checkpoint order from one ChaCha stream.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = tensor_shapes(config)
            .into_iter()
            .map(|(_, (rows, cols))| {
                let bound = 1.0 / (rows as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || T::lit(rng.gen_range(-bound..bound)))
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let tensors = tensor_shapes(config)
            .into_iter()
            .map(|(_, shape)| Array2::zeros(shape))
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &Array2<T>| Array2::zeros(a.raw_dim());
        Self {
            patch_proj: z(&self.patch_proj),
            group_proj: z(&self.group_proj),
            token_table: z(&self.token_table),
            layers: self
                .layers
                .iter()
                .map(|l| MixerLayer {
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    ff_in: z(&l.ff_in),
                    ff_out: z(&l.ff_out),
                })
                .collect(),
        }
    }

    /// Builds params from tensors listed in checkpoint order.
    pub(crate) fn from_tensors(config: &EncoderConfig, tensors: Vec<Array2<T>>) -> Result<Self> {
        let shapes = tensor_shapes(config);
        if tensors.len() != shapes.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let patch_proj = next();
        let group_proj = next();
        let token_table = next();
        let layers = (0..config.mixer_layers)
            .map(|_| MixerLayer {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ff_in: next(),
                ff_out: next(),
            })
            .collect();
        let params = Self {
            patch_proj,
            group_proj,
            token_table,
            layers,
        };
        params.check_shapes(config)?;
        Ok(params)
    }

    /// Tensors with their names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = vec![
            ("patch_proj".to_string(), &self.patch_proj),
            ("group_proj".to_string(), &self.group_proj),
            ("token_table".to_string(), &self.token_table),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", &layer.wq),
                ("wk", &layer.wk),
                ("wv", &layer.wv),
                ("wo", &layer.wo),
                ("ff_in", &layer.ff_in),
                ("ff_out", &layer.ff_out),
            ] {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out = vec![
            &mut self.patch_proj,
            &mut self.group_proj,
            &mut self.token_table,
        ];
        for layer in &mut self.layers {
            out.extend([
                &mut layer.wq,
                &mut layer.wk,
                &mut layer.wv,
                &mut layer.wo,
                &mut layer.ff_in,
                &mut layer.ff_out,
            ]);
        }
        out
    }

    pub fn check_shapes(&self, config: &EncoderConfig) -> Result<()> {
        let expected = tensor_shapes(config);
        let actual = self.named_tensors();
        if expected.len() != actual.len() {
            return Err(Error::Config(format!(
                "params have {} mixer layers, config expects {}",
                self.layers.len(),
                config.mixer_layers
            )));
        }
        for ((name, shape), (_, t)) in expected.iter().zip(actual) {
            if t.dim() != *shape {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, config expects {shape:?}",
                    t.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::lit(v.as_f64()));
        EncoderParams {
            patch_proj: c(&self.patch_proj),
            group_proj: c(&self.group_proj),
            token_table: c(&self.token_table),
            layers: self
                .layers
                .iter()
                .map(|l| MixerLayer {
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    ff_in: c(&l.ff_in),
                    ff_out: c(&l.ff_out),
                })
                .collect(),
        }
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn scaled_add(&mut self, alpha: T, other: &Self) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            dst.scaled_add(alpha, src);
        }
    }
}
