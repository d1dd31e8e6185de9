//! Attention-guided policy optimization for a toy video-reasoning policy.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analyze;
pub mod env;
pub mod error;
pub mod frame_select;
pub mod objective;
pub mod policy;
pub mod reweight;
pub mod selftest;
mod tape;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
