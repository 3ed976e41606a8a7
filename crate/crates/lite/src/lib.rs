//! Token-selection experiments on a small trainable video transformer:
//! a gradient-based token-value oracle, a lightweight learned selector,
//! baseline selection policies, an adaptive compute budget, an analytical
//! FLOPs model, and a synthetic-video experiment harness.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod model;
pub mod numdiff;
pub mod oracle;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod selector;
pub mod sweep;
pub mod tensor;
pub mod train;
