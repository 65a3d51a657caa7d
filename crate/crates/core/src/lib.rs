//! Deterministic desk-scale laboratory for timing side channels in caching
//! LLM serving stacks: a simulated engine with prefix-KV and semantic caches,
//! latency models, attack protocols, and mitigation sweeps.

pub mod anonymize;
pub mod config;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod kv_cache;
pub mod ksweep;
pub mod latency;
pub mod pna;
pub mod probe;
pub mod roc;
pub mod psa;
pub mod report;
pub mod rng;
pub mod semantic;
pub mod token;
pub mod wire;

pub use error::{Error, Result};
