//! Vector quantization in polar coordinates.
//!
//! A vector is preconditioned by a shared random rotation, recursively
//! split into (radius, angle) pairs, and its angles are quantized against
//! per-level codebooks whose shapes are known analytically for Gaussian
//! data.  The crate covers the full pipeline: tensor IO, the polar
//! transform, the angle/radius distributions, codebook construction,
//! bit-packed encode/decode, a quantized KV-cache with approximate
//! attention, and empirical validation of the scaling claims.

pub mod bitpack;
pub mod codebook;
pub mod distribution;
pub mod error;
pub mod kvcache;
pub mod polar;
pub mod precondition;
pub mod quantizer;
pub mod rng;
pub mod tensor;
pub mod validation;

pub use codebook::{BitWidthConfig, CodebookMode, CodebookSet, LevelCodebook};
pub use error::{Error, Result};
pub use kvcache::{AppendMode, AttentionResult, KVCacheConfig, MemoryReport, QuantizedKVCache};
pub use polar::PolarRep;
pub use precondition::{RotationMatrix, RotationSpec};
pub use quantizer::{BitsPerCoord, QuantizedEmbedding, QuantizerConfig, RadiusPrecision};
pub use tensor::{DType, EmbeddingMatrix};
