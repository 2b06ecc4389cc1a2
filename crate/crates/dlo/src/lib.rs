//! Dynamic Layer Operations: vertical scaling of decoder-only transformers
//! by group-based layer expansion plus per-token, per-layer MLP skipping
//! under a learned router, with an analytic FLOPs accountant.

pub mod config;
pub mod error;
pub mod expand;
pub mod metrics;
pub mod run;
pub mod tasks;
pub mod flops;
pub mod io;
pub mod model;
pub mod router;
pub mod tensor;
pub mod trainer;

pub use error::{DloError, Result};
