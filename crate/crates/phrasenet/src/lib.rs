//! phraseNet: an attention-based encoder-decoder translator extended with an
//! external symbolic phrase memory.
//!
//! The crate implements the full pipeline: a reverse-mode autodiff tape, the
//! phrase table with matching and tagging, a bidirectional GRU encoder, a
//! decoder with two phrase-generation variants (a gated mixture and a joint
//! word/phrase softmax), mixture-likelihood training, greedy/beam decoding,
//! BLEU scoring, and a deterministic synthetic corpus generator for
//! end-to-end evaluation.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]; the
//! aliases at the crate root pin the default double-precision instantiation.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod gru;
pub mod model;
pub mod phrase;
pub mod search;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default double-precision computation graph.
pub type Graph64 = autodiff::Graph<f64>;
/// Default double-precision dense array.
pub type Tensor64 = tensor::Tensor<f64>;
/// Default double-precision model (gradient checks assume this width).
pub type Model64 = model::Model<f64>;
/// Default double-precision optimizer state.
pub type Adam64 = trainer::Adam<f64>;

/// Single-precision instantiations, for memory-bound runs.
pub type Graph32 = autodiff::Graph<f32>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model32 = model::Model<f32>;
pub type Adam32 = trainer::Adam<f32>;
