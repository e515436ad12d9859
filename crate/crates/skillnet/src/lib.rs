//! Sparsely activated, skill-modular transformer encoder.
//!
//! A shared encoder trunk feeds a bank of per-skill feed-forward modules in
//! its upper layers; each task activates only the subset of modules routed
//! to it and averages their outputs. The crate covers multi-task training
//! with temperature-controlled task sampling, sparse masked-language and
//! sentence-order pre-training, post-hoc injection of new skill modules,
//! and dense / mixture-of-experts / task-specific baselines, all on a
//! self-contained f64 autodiff tape.

pub mod adapt;
pub mod baselines;
pub mod checkpoint;
pub mod crf;
pub mod data;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod model;
pub mod moe;
pub mod optim;
pub mod pretrain;
pub mod report;
pub mod rng;
pub mod routing;
pub mod runs;
pub mod sampler;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
