//! Crate-wide error type. Variants carry enough context to be actionable
//! from a CLI message without a backtrace.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rho = {rho} lies outside the admissible interval ({lo}, {hi})")]
    RhoOutOfRange { rho: f64, lo: f64, hi: f64 },

    #[error("precision matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("region '{region}' has zero degree and no ridge was requested")]
    IsolatedRegion { region: String },

    #[error("{got} regions exceed the dense-storage limit of {max}")]
    TooManyRegions { got: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{name} = {value} is not a valid scale (must be finite and > 0)")]
    InvalidScale { name: &'static str, value: f64 },

    #[error("duplicate observation for subject '{subject}', visit {visit}, region '{region}'")]
    DuplicateObservation {
        subject: String,
        visit: usize,
        region: String,
    },

    #[error("subject '{subject}' visit {visit} carries conflicting covariate values")]
    CovariateMismatch { subject: String, visit: usize },

    #[error("dataset contains no observations")]
    EmptyDataset,

    #[error("unknown region label '{label}'")]
    UnknownRegion { label: String },

    #[error("unknown subject id '{id}'")]
    UnknownSubject { id: String },

    #[error("nonpositive predictive variance at observation {index}")]
    NonpositiveVariance { index: usize },

    #[error("burden window m = {m} exceeds the {available} scores available")]
    BurdenWindowTooLarge { m: usize, available: usize },

    #[error("conditional update precision is singular")]
    SingularPrecision,

    #[error("rank-deficient design for region '{region}'")]
    RankDeficientDesign { region: String },

    #[error("did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("chain {chain} diverged at iteration {iteration} (non-finite log density)")]
    ChainDiverged { chain: usize, iteration: usize },

    #[error("need at least {needed} draws per chain across >= 2 chains, got {got}")]
    TooFewDraws { needed: usize, got: usize },

    #[error("need at least {needed} scores, got {got}")]
    TooFewScores { needed: usize, got: usize },

    #[error("detection labels are degenerate (need at least one positive and one negative)")]
    DegenerateLabels,

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("fit is incompatible with the supplied data: {0}")]
    IncompatibleFit(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Exit-code class used by the CLI: configuration / usage problems
    /// versus numerical failures.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::Parse(_)
                | Error::UnknownRegion { .. }
                | Error::UnknownSubject { .. }
                | Error::EmptyDataset
                | Error::DuplicateObservation { .. }
                | Error::CovariateMismatch { .. }
                | Error::DimensionMismatch(_)
                | Error::IncompatibleFit(_)
                | Error::Alignment(_)
                | Error::TooManyRegions { .. }
                | Error::Io(_)
                | Error::Csv(_)
        )
    }
}
