use thiserror::Error;

use crate::cmpo::CmpoError;
use crate::constraint::ConstraintError;
use crate::env::{EnvError, FormatError};
use crate::metrics::MetricsError;
use crate::reward::RewardError;
use crate::scenario::ScenarioError;
use crate::store::StoreError;

/// Crate-wide error, one variant per subsystem.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Cmpo(#[from] CmpoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl Error {
    /// Configuration problems map to exit code 2 in the CLI; everything else is a runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Store(StoreError::Parse(_))
                | Error::Store(StoreError::UnknownKey(_))
                | Error::Store(StoreError::InvalidConfig(_))
                | Error::Scenario(ScenarioError::InvalidSpec(_))
                | Error::Scenario(ScenarioError::Parse(_))
                | Error::Scenario(ScenarioError::Coverage(_))
                | Error::Cmpo(CmpoError::InvalidConfig(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
