use crate::grids::GridError;
use crate::nn::NnError;
use crate::persistence::PersistError;

/// Errors from the model, search, training and evaluation layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("empty set: {0}")]
    EmptySet(&'static str),
    #[error("latent dimension is {got}, expected {expected}")]
    WrongLatentDim { expected: usize, got: usize },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("task {0} has a query without a known output")]
    MissingTruth(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
