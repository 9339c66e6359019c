//! Image-constrained radiance fields.
//!
//! A radiance field is optimized so that one viewpoint reproduces a given
//! input image exactly by construction, while every other viewpoint is
//! shaped by score-distillation updates from a pluggable denoiser.

// `!(x > 0.0)` is how validation rejects NaN along with the out-of-range
// values, and the numeric kernels index several parallel arrays per loop.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod checkpoint;
pub mod constraint;
pub mod eval;
pub mod field;
pub mod grad;
pub mod imaging;
pub mod math;
pub mod objectives;
pub mod optim;
pub mod provider;
pub mod render;
pub mod scene;
pub mod toy;
pub mod train;
