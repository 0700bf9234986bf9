use finetune_core::datasets::mnist::{IdxError, MnistTaskError};
use finetune_core::datasets::DesignError;
use finetune_core::deep::DeepError;
use finetune_core::linalg::LinalgError;
use finetune_core::linear::LinearError;
use finetune_core::ntk::NtkError;
use finetune_core::task::TaskError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("bad results file: {0}")]
    Parse(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("MNIST files not found in {0:?}; set FINETUNE_LAB_DATA or data_dir")]
    DatasetMissing(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error(transparent)]
    Deep(#[from] DeepError),
    #[error(transparent)]
    Ntk(#[from] NtkError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    MnistTask(#[from] MnistTaskError),
}

pub type Result<T> = std::result::Result<T, LabError>;

/// Fails with [`LabError::Verify`] when `ok` is false.
pub fn ensure(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(LabError::Verify(what()))
    }
}
