//! Orchestration: configuration, datasets, training, evaluation, ablation
//! grids and reporting.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod report;
pub mod train;

pub mod cli;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint architecture hash {got} conflicts with configured {expected}")]
    ArchMismatch { expected: String, got: String },
    #[error("training diverged (non-finite loss) at step {step}; batch dumped to divergence.json")]
    Diverged { step: usize },
    #[error(transparent)]
    Episode(#[from] crate::error::EpisodeError),
    #[error(transparent)]
    Model(#[from] crate::error::ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
