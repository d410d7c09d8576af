//! Real-time explainability for RAN throughput prediction.
//!
//! The crate covers the whole loop: synthetic KPM traces ([`trace`]), a small
//! attention predictor with exact gradients ([`model`]), four attribution
//! methods ([`explain`]), surrogate and top-k fidelity metrics
//! ([`fidelity`]), paired block-bootstrap comparison ([`stats`]), latency
//! decomposition and budgets ([`latency`]) and an in-process xApp
//! simulation ([`pipeline`]).

pub mod error;
pub mod exec;
pub mod explain;
pub mod fidelity;
pub mod latency;
pub mod model;
pub mod pipeline;
pub mod stats;
pub mod trace;

pub use error::{Error, Result};
pub use exec::ExecMode;
