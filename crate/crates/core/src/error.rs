use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("adaptive step fell below {floor:e} at t = {t}")]
    StepSizeUnderflow { t: f64, floor: f64 },

    #[error("integration failed for trajectory seed {seed}: {source}")]
    Trajectory {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("window length {length} exceeds trajectory of {steps} steps")]
    WindowTooLong { length: usize, steps: usize },

    #[error("axis {axis} has degenerate spread (std = {std:e})")]
    DegenerateAxis { axis: usize, std: f64 },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("node {0} does not belong to this graph")]
    DetachedNode(usize),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("covariance rank {rank} is below the requested {k} components")]
    RankDeficient { rank: usize, k: usize },

    #[error("sequence of length {len} exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("sculpting did not converge after {iterations} iterations (last delta {delta:e})")]
    NotConverged { iterations: usize, delta: f64 },

    #[error("no labelled windows available for {0}")]
    MissingLabels(String),

    #[error("input is empty")]
    EmptyInput,

    #[error("ground truth has zero variance")]
    ZeroVariance,

    #[error("all paired differences are zero")]
    AllZeroDifferences,

    #[error("{n} non-zero differences, at least {min} required")]
    TooFewSamples { n: usize, min: usize },

    #[error("missing prerequisite artifact {}", .0.display())]
    MissingPrerequisite(PathBuf),

    #[error("invalid configuration at `{field}`: {reason}")]
    ConfigInvalid { field: String, reason: String },

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid { .. } => 2,
            Error::MissingPrerequisite(_) => 3,
            Error::StepSizeUnderflow { .. }
            | Error::Trajectory { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NotConverged { .. }
            | Error::RankDeficient { .. }
            | Error::DegenerateAxis { .. } => 4,
            _ => 1,
        }
    }
}
