use crate::billing::BillingError;
use crate::building::SimError;
use crate::comfort::ComfortError;
use crate::config_opt::ConfigError;
use crate::experiment::ExperimentError;
use crate::gp::GpError;
use crate::model::ModelError;
use crate::mpc::MpcError;
use crate::qp::QpError;
use crate::sysid::SysIdError;

/// Any failure of an experiment, with the cell it happened in where known.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    SysId(#[from] SysIdError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Comfort(#[from] ComfortError),
    #[error(transparent)]
    Billing(#[from] BillingError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
