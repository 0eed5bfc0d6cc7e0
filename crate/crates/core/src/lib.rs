//! Measure how well a decision-maker can report the attribute weights that
//! actually drive its choices.
//!
//! The crate instills random weights through fine-tuning datasets, elicits
//! choices and introspective reports from a model backend, recovers the
//! weights behind the choices with a penalized logistic regression, and
//! scores report accuracy with Bayesian-bootstrap correlation intervals. A
//! synthetic subject with known weights stands in for a real model.

pub mod analysis;
pub mod backend;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod experiment;
#[cfg(feature = "remote")]
pub mod mock;
pub mod manifest;
pub mod model;
pub mod prompts;
#[cfg(feature = "remote")]
pub mod remote;
pub mod report;
pub mod runner;
pub mod seed;
pub mod stats;
pub mod subject;

pub use error::{Error, Result};
pub use seed::Seed;
