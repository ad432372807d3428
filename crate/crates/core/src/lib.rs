//! Post-training W8A8 quantization for transformer models, built around
//! per-channel activation smoothing.
//!
//! Activations of large transformers carry a few channels that are far
//! larger than the rest, in every token. A single quantization step for the
//! whole activation matrix then leaves the ordinary channels with only a
//! handful of usable codes. Dividing each input channel by a factor `s_j`
//! and multiplying the matching weight row by the same factor leaves the
//! layer's output unchanged while flattening the activations, so both sides
//! quantize well with integer-GEMM-friendly per-tensor steps.
//!
//! ```
//! use w8a8::smooth::{apply_smoothing, smoothing_factors};
//! use w8a8::tensor::{channel_absmax, gen_outlier_activations, matmul, max_rel_error, row_absmax, OutlierSpec, SeededRng};
//!
//! let x = gen_outlier_activations(64, 128, &OutlierSpec::new(0.01, 100.0, 7)?)?;
//! let w = SeededRng::new(1).gaussian(&[128, 32], 0.1);
//!
//! let s = smoothing_factors(&channel_absmax(&x)?, &row_absmax(&w), 0.5)?;
//! let (xs, ws) = apply_smoothing(&x, &w, &s)?;
//! assert!(max_rel_error(&matmul(&xs, &ws)?, &matmul(&x, &w)?)? < 1e-4);
//!
//! // The smoothed activations have a much smaller dynamic range.
//! assert!(xs.absmax() < x.absmax() / 5.0);
//! # Ok::<(), w8a8::Error>(())
//! ```
//!
//! Modules, bottom up:
//!
//! - [`tensor`]: dense `f32` tensors, matmul, seeded synthetic data
//! - [`quant`]: symmetric quantizers at every granularity, level and
//!   baseline recipes
//! - [`smooth`]: smoothing factors, the equivalent transform, fusion
//! - [`igemm`]: int8 GEMM with `i32` accumulation and outer-dimension
//!   rescaling
//! - [`graph`]: a toy transformer with per-operator precision mapping
//! - [`calib`]: calibration statistics and the migration-strength search
//! - [`io`]: the `SQTC` tensor container
//!
//! The guide under `book/` walks through each of these; its code samples
//! are compiled and run as doc-tests of this crate.

pub mod calib;
pub mod error;
pub mod graph;
pub mod igemm;
pub mod io;
pub mod layers;
pub mod quant;
pub mod smooth;
pub mod tensor;

pub use error::{Error, Result};

// Runs the code samples in the guide as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/outliers.md")]
    mod outliers {}
    #[doc = include_str!("../../../book/src/smoothing.md")]
    mod smoothing {}
    #[doc = include_str!("../../../book/src/integer_gemm.md")]
    mod integer_gemm {}
    #[doc = include_str!("../../../book/src/transformer.md")]
    mod transformer {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/container.md")]
    mod container {}
}
