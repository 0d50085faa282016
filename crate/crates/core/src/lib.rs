//! Continual online learning of a small convolutional target model under
//! representation drift: bounded replay memory, gradient-importance gating,
//! reconstruction-based memory selection and the experiment harness around them.

// Index loops in the unit-test oracles follow the math they check.
#![cfg_attr(test, allow(clippy::needless_range_loop))]

mod binio;
pub mod error;
pub mod grcl;
pub mod harness;
pub mod memory;
pub mod numerics;
pub mod par;
pub mod rmscl;
pub mod stream;
pub mod target_model;
pub mod trainer;

pub use error::{Error, Result};
