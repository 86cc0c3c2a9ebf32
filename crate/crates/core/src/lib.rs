//! Mixed-precision quantization for a small diffusion denoiser.
//!
//! The crate provides four layers:
//!
//! - [`quant`]: uniform affine quantization (fit, quantize, dequantize,
//!   fake-quantize, per-channel variants, error measurement);
//! - [`omq`]: outlier-driven mixed quantization — smooth factors that migrate
//!   weight outliers into activations, kurtosis channel ranking, and the
//!   grouped intra-layer bit-allocation search;
//! - [`trd`]: time-smoothed relation distillation — feature accumulation
//!   across consecutive denoising steps, cosine-similarity distributions, and
//!   the KL relation loss with analytic gradients;
//! - [`diffusion`]: a small MLP denoiser with a DDPM noise schedule, LoRA
//!   adapters, and straight-through-estimator fine-tuning, used to exercise
//!   the quantization pipeline end to end.
//!
//! Core math is generic over the storage scalar (`f32` or `f64`) via
//! [`scalar::Scalar`]; all reductions accumulate in `f64`.

pub mod diffusion;
pub mod error;
pub mod omq;
pub mod quant;
pub mod scalar;
pub mod tensor;
pub mod trd;

pub use error::{CoreError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Default 64-bit tensor used throughout the pipeline.
pub type Tensor64 = Tensor<f64>;
/// 32-bit tensor for bulk weight storage.
pub type Tensor32 = Tensor<f32>;
