//! Preference induction: a small autoregressive policy that reads a user's
//! comparative judgments and writes an explicit signed preference
//! description, trained by outcome-filtered supervised learning followed by
//! group-relative policy optimization.

pub mod artifact;
pub mod checkpoint;
pub mod cli;
pub mod coldstart;
pub mod config;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod optim;
pub mod oracles;
pub mod pipeline;
pub mod policy;
pub mod prefworld;
pub mod rng;
pub mod symlang;

pub use error::{Error, Result};
