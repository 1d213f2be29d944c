//! Screenshot-based dense document retrieval at desk scale.
//!
//! Documents are rendered (or loaded) as pixel grids, cut into sub-image
//! crops and patches, and embedded by a small bi-encoder whose query and
//! document towers share one causal sequence mixer. The crate also covers
//! contrastive training, BM25 baselines and mining, exact vector search,
//! and IR metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the usual instantiations.

mod binio;
pub mod corpus;
pub mod denseindex;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lexical;
pub mod patchgrid;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar used for training and gradient checks.
pub type Real = f64;
pub type Params = encoder::EncoderParams<f64>;
pub type Params32 = encoder::EncoderParams<f32>;
pub type Embedding = encoder::EmbeddingVector<f64>;
pub type Embedding32 = encoder::EmbeddingVector<f32>;
