//! Core library for building small code language models at desk scale.
//!
//! The pipeline runs tokenizer training → indexed dataset → FIM transform →
//! MQA decoder training with AdamW → block quantization → KV-cache
//! inference → pass@k and infilling evaluation. Numeric code is generic over
//! [`Scalar`]; the aliases below name the instantiations used in practice.

pub mod datapipe;
pub mod error;
pub mod eval;
pub mod fim;
pub mod infer;
pub mod model;
pub mod quant;
pub mod scalar;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{ForgeError, Result};
pub use scalar::Scalar;

/// Float parameters used for training and inference.
pub type Params32 = model::Parameters<f32>;
/// Double-precision parameters, used for gradient checking and reference runs.
pub type Params64 = model::Parameters<f64>;
