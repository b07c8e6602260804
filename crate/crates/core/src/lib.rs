//! Exit-depth statistics and entropy-based generalization bounds for
//! early-exit classifiers.
//!
//! The crate reads per-exit logits from trace files ([`trace`]), maps every
//! sample to an exit depth with a label-blind policy ([`policy`]), summarises
//! the resulting depth distribution ([`stats`]), evaluates closed-form bounds
//! ([`bounds`]) and picks thresholds by bound minimisation ([`select`]).
//! [`lab`] trains a small multi-exit network on synthetic data to produce
//! traces end to end.

pub mod bounds;
pub mod cli;
pub mod lab;
pub mod policy;
pub mod report;
pub mod select;
pub mod stats;
pub mod trace;
