//! Causal exploration for task-agnostic world-model learning.
//!
//! The crate bundles a synthetic environment family with known transition
//! causality, an online time-lagged PC search driven by kernel conditional
//! independence tests, gradient-based coreset selection, a causally masked
//! sharing-decomposition world model, the intrinsically motivated exploration
//! loop, and an empirical verifier for the linear convergence analysis.

pub mod error;
pub mod graph;
pub mod nn;
pub mod rng;
pub mod env;
pub mod world_model;
pub mod kci;
pub mod discovery;
pub mod coreset;
pub mod config;
pub mod trace;
pub mod metrics;
pub mod policy;
pub mod explorer;
pub mod theory;

pub use error::{Error, Result};
pub use graph::CausalAdjacencyMatrix;
