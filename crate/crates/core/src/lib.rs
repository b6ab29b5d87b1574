//! Deferred-normalization fusion for Layernorm, RMSNorm and Softmax, and a
//! two-engine latency model of the resulting schedules.

pub mod activation;
pub mod block;
pub mod cli;
pub mod equivalence;
pub mod error;
pub mod fusion;
pub mod norms;
pub mod simulator;
pub mod tensor;

pub use error::{Error, Result};
