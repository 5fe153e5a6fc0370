use jmbma::bma::BmaError;
use jmbma::datamodel::IngestError;
use jmbma::mcmc::McmcError;
use jmbma::model::ModelError;
use jmbma::prediction::PredictError;
use jmbma::simulation::SimError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input, configuration or arguments (exit 2).
    #[error("{0}")]
    User(String),
    /// Incompatible fitted artifacts (exit 3).
    #[error("{0}")]
    Consistency(String),
    /// Anything else (exit 1).
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 2,
            CliError::Consistency(_) => 3,
            CliError::Internal(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::User(_) => "user",
            CliError::Consistency(_) => "consistency",
            CliError::Internal(_) => "internal",
        }
    }

    pub fn to_json(&self) -> String {
        json!({"error": {"kind": self.kind(), "code": self.exit_code(), "message": self.to_string()}}).to_string()
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Spec(_) | ModelError::Basis(_) => CliError::User(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<McmcError> for CliError {
    fn from(e: McmcError) -> Self {
        match e {
            McmcError::Config(_) => CliError::User(e.to_string()),
            McmcError::Model(m) => m.into(),
            McmcError::Init(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<PredictError> for CliError {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::Input(_) => CliError::User(e.to_string()),
            PredictError::Model(m) => m.into(),
            PredictError::Numeric { .. } => CliError::Internal(e.to_string()),
        }
    }
}

impl From<BmaError> for CliError {
    fn from(e: BmaError) -> Self {
        match e {
            BmaError::Consistency(_) => CliError::Consistency(e.to_string()),
            BmaError::Input(_) => CliError::User(e.to_string()),
            BmaError::Predict(p) => p.into(),
            BmaError::Model(m) => m.into(),
            BmaError::Mcmc(m) => m.into(),
            BmaError::Evidence { .. } => CliError::Internal(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::User(e.to_string()),
            SimError::Model(m) => m.into(),
            SimError::Mcmc(m) => m.into(),
            SimError::Predict(p) => p.into(),
            SimError::Bma(b) => b.into(),
            SimError::Calibration(_) => CliError::Internal(e.to_string()),
        }
    }
}
