//! Real-time receding-horizon control: planners, shared-plan agent runtime
//! and built-in tasks.

// `!(a < b)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod serde_util;

pub mod agent;
pub mod dynamics;
pub mod episode;
pub mod objective;
pub mod planner;
pub mod rollout;
pub mod spline;
pub mod task;

pub use error::{Error, Result};
