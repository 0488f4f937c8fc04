//! Library surface of the `xform` command-line tool: the five pipeline
//! commands plus config, manifest and digest plumbing. Every command is a
//! pure function of (config file, explicit flags, seed) and reproduces
//! identical output digests when re-run.

pub mod commands;
pub mod config;
pub mod digest;
pub mod manifest;

use thiserror::Error;

/// Process exit codes: 0 success, 2 config/input error, 3 runtime abort,
/// 4 infeasible request.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Infeasible(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Infeasible(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl From<xform_core::distribution::DistError> for CliError {
    fn from(e: xform_core::distribution::DistError) -> Self {
        use xform_core::distribution::DistError::*;
        match e {
            Infeasible(_) => CliError::Infeasible(e.to_string()),
            InvalidHistogram(_) | UniformOutOfRange(_) | TooFewSamples(_) | TooFewBins(_)
            | MissingParameter(_) => CliError::Config(e.to_string()),
            NonFiniteSample => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<xform_core::estimator::TrainError> for CliError {
    fn from(e: xform_core::estimator::TrainError) -> Self {
        use xform_core::estimator::TrainError::*;
        match e {
            NonFinite { .. } | Checkpoint(_) => CliError::Runtime(e.to_string()),
            Dist(d) => d.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<xform_core::data::DataError> for CliError {
    fn from(e: xform_core::data::DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<xform_core::pretext::PretextError> for CliError {
    fn from(e: xform_core::pretext::PretextError) -> Self {
        use xform_core::pretext::PretextError::*;
        match e {
            NonFinite(_) | EncoderMoved => CliError::Runtime(e.to_string()),
            DegenerateTask(_) | CropTooSmall(_) | EmptySplit(_) => {
                CliError::Infeasible(e.to_string())
            }
            Autodiff(a) => CliError::Runtime(a.to_string()),
        }
    }
}
