//! Quantized attention on the CPU.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense row-major matrices, bit packing and the FP64-accumulated
//!   reference matmul.
//! - [`io`]: the little-endian `TQT1` tensor container.
//! - [`quant`]: stage-one symmetric INT8 block quantization, stage-two
//!   asymmetric INT4/INT2 channelwise compression of the INT8 codes, and the
//!   integer matmuls built on them.
//! - [`sas`]: exponential approximation from a lookup table for the integer
//!   part and a cubic for the fractional part, with threshold sparsification.
//! - [`planner`]: per-head priority (`gap * std` of channel ranges) and the
//!   2-bit / 4-bit assignment derived from it.
//! - [`kv_cache`]: per-head compressed cache with an INT8 decode buffer.
//! - [`attention`]: dense and tiled exact oracles, the quantized tiled prefill
//!   and decode kernels, and error metrics.

pub mod attention;
pub mod error;
pub mod io;
pub mod kv_cache;
pub mod planner;
pub mod quant;
pub mod sas;
pub mod tensor;

pub use attention::{
    decode_attend, error_metrics, exact_tiled_attention, reference_attention, turbo_decode,
    turbo_prefill, turbo_prefill_head, AttentionConfig, AttentionOutput, ErrorMetrics, ExpMode,
    HeadInput,
};
pub use error::{Error, Result};
pub use kv_cache::{CacheBits, CacheSizeReport, KvCacheHead};
pub use planner::{head_stats, plan_precision, HeadPrecisionPlan, HeadStats};
pub use quant::{QuantBlockQ1, QuantGroupQ2, Q2Block};
pub use sas::SasConfig;
pub use tensor::{matmul_f32, MatrixF32, MatrixI8, PackedMatrix};
