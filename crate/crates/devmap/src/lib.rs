//! Longitudinal spatial normative modeling.
//!
//! This crate fits a Bayesian normative model for repeated regional
//! measurements: fixed covariate effects per region, a longitudinal random
//! intercept per subject, and a per-subject spatially structured deviation
//! field with a conditional autoregressive (CAR) prior over a region
//! adjacency graph. On top of the model it provides
//!
//! * exact Gaussian conditioning for subject deviation fields ([`model`]),
//! * a Metropolis-within-Gibbs sampler for the full posterior ([`inference`]),
//! * cross-sectional and longitudinal benchmark fits ([`baselines`]),
//! * standardized deviation scoring and burden summaries ([`scoring`]),
//! * a six-scenario synthetic study generator ([`simulate`]),
//! * accuracy / calibration / detection metrics ([`evaluate`]),
//! * chain diagnostics and posterior predictive checks ([`diagnostics`]),
//! * a replicate-study harness gluing the above together ([`study`]).

pub mod baselines;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod inference;
pub mod model;
pub mod scoring;
pub mod simulate;
pub mod study;

pub use data::LongDataset;
pub use error::{Error, Result};
pub use graph::RegionGraph;
pub use model::{DeviationReport, ModelState, SubjectPosterior};
