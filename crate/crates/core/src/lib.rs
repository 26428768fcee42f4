//! Embedding-level simulator for federated OOD-aware prompt learning.
//!
//! Clients tune three prompt banks (local ID, global ID, OOD) through a
//! frozen linear encoder with a bi-level separation loss, optionally made
//! robust by worst-case prompt exploration. The server aggregates global
//! prompts and calibrates them against the pooled OOD prompts with
//! semi-unbalanced optimal transport.

pub mod bdro;
pub mod client;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod objective;
pub mod prompt;
pub mod rng;
pub mod server;
pub mod transport;

pub use error::{Error, Result};
