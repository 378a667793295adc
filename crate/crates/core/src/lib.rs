//! Few-shot reinforcement learning with verifiable rewards (RLVR) on a toy
//! vision-language task family.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod policy;
pub mod rewards;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
