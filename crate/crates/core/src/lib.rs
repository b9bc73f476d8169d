//! Adapter-based parameter-efficient fine-tuning for audio spectrogram
//! transformers.
//!
//! The crate is built around a small tape-based reverse-mode autodiff engine
//! ([`tape::Tape`]) over dense tensors, a pre-norm spectrogram transformer
//! ([`transformer::Model`]), bottleneck adapters and prompt tokens
//! ([`adapters`]), fine-tuning strategies with exact parameter accounting
//! ([`peft`]), a freeze-aware Adam training loop ([`training`]), and a
//! deterministic synthetic spectrogram task plus tensor file I/O ([`data`]).
//!
//! All numerics are generic over the scalar type via [`scalar::Scalar`]
//! (`f32` or `f64`); the aliases below pin the double-precision
//! instantiations that the shipped tools use.

pub mod adapters;
pub mod check;
pub mod data;
pub mod error;
pub mod peft;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use peft::{ParamReport, PeftStrategy};
pub use scalar::Scalar;
pub use transformer::{ModelConfig, Variant};

/// Double-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// Double-precision autodiff tape.
pub type Tape64 = tape::Tape<f64>;
/// Double-precision model.
pub type Model64 = transformer::Model<f64>;
/// Double-precision bottleneck adapter.
pub type Adapter64 = adapters::Adapter<f64>;
/// Double-precision per-layer prompt bank.
pub type PromptBank64 = adapters::PromptBank<f64>;
/// Double-precision sample.
pub type Sample64 = data::SpectrogramSample<f64>;
