//! Query-based segmentation mask heads.
//!
//! Two ways of turning ViT patch tokens and projected queries into mask
//! logits: the classical image-space head, which rebuilds and upsamples a
//! `C`-channel feature map, and the token-space head, which scores queries
//! against tokens with one batched GEMM and upsamples the `Qn`-channel logits
//! instead. Around them sit mask-classification decoders, PQ/mIoU metrics, an
//! analytical FLOPs/memory model checked against instrumented counters, and a
//! benchmark harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for deployment-style runs,
//! `f64` for oracles); the aliases below pin the common instantiations.

pub mod bench;
pub mod cost;
pub mod decode;
pub mod error;
pub mod heads;
pub mod interp;
pub mod metrics;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use heads::{HeadConfig, HeadKind, MaskProjection, QuerySet, UpsampleLocation};
pub use interp::ResamplePlan;
pub use scalar::Scalar;
pub use tensor::{DenseTensor, OpCounter, OpCounts};

/// Single-precision tensor (default).
pub type Tensor = DenseTensor<f32>;
/// Double-precision tensor, used by oracles.
pub type Tensor64 = DenseTensor<f64>;
/// Mask logits, `B×Qn×N` (token-indexed) or `B×Qn×Ĥ×Ŵ` (grid-indexed).
pub type MaskLogits<T = f32> = DenseTensor<T>;
/// `B×N×C` patch tokens.
pub type TokenSequence<T = f32> = DenseTensor<T>;
pub type Queries = QuerySet<f32>;
pub type Queries64 = QuerySet<f64>;
pub type Projection = MaskProjection<f32>;
pub type Projection64 = MaskProjection<f64>;
