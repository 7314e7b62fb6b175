//! Generative adapters: streamed context is compressed into a fixed-size
//! projected Gram state and turned into low-rank weight updates for a frozen
//! decoder-only transformer.

// Index loops mirror the math, and `!(x > 0.0)` checks reject NaN on purpose.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod context;
pub mod error;
mod format;
pub mod generator;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
