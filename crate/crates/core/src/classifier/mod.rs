//! The CNN detector, its three training regimes, and confusion-matrix metrics.

mod metrics;
mod model;
mod train;

pub use metrics::{confusion, f1, metrics, ConfusionMatrix, MetricsReport};
pub use model::{Classifier, CnnSpec, DEFAULT_THRESHOLD};
pub use train::{
    evaluate, train_classifier, train_on_images, training_pool, AccessLog, ClassifierConfig, EpochStats, TrainCurve,
    TrainOutcome, TrainRegime,
};

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::fid::FidError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("empty training pool: {0}")]
    EmptyPool(String),
    #[error("pool mixes image sizes {0} and {1}")]
    MixedSizes(usize, usize),
    #[error("classifier expects {expected}px images, got {got}px")]
    SizeMismatch { expected: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid classifier configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Fid(#[from] FidError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}
