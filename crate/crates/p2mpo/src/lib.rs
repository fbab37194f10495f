//! Doubly pessimistic model-based policy optimization for robust offline
//! reinforcement learning on finite-horizon robust MDPs.
//!
//! The crate plans, evaluates, and learns policies that maximize worst-case
//! return over KL- or TV-divergence ambiguity sets around a nominal
//! transition kernel. Learning from offline data composes two pessimism
//! sources in one backup: a confidence ball around the estimated kernel and
//! the environment's robust set. Tabular models get the full pipeline;
//! factored and feature-linear models get estimators, confidence checks, and
//! one-step robust backups.
//!
//! Modules follow the pipeline order: [`model`] (types and files),
//! [`duals`] (one-step robust expectations), [`dp`] (planning and
//! evaluation), [`offline`] (data generation and coverage), [`estimation`]
//! (confidence regions), [`pessimism`] (the doubly pessimistic optimizer),
//! and [`experiment`] (the reproducible harness behind the CLI).

#![allow(clippy::needless_range_loop)]

pub mod dp;
pub mod duals;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod model;
pub mod offline;
pub mod pessimism;
pub mod rng;

pub use error::{Error, Result};
pub use rng::RNG_VERSION;
