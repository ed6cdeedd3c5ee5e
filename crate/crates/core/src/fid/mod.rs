//! Fréchet distances between image sets, FID∞ extrapolation, and
//! anomaly-filtered FID series.

mod embed;
mod gaussian;
mod infinity;

pub use embed::{embed, images_to_tensor, EmbeddingSet, Extractor, DEFAULT_FEATURE_DIM, FEATURE_SCALE};
pub use gaussian::{fit_gaussian, frechet_distance, matrix_sqrt_psd, FidEstimate, FidKind, GaussianStats};
pub use infinity::{
    extrapolate, fid_infinity, fid_infinity_with, fid_series, flag_anomalies, write_series_csv, FidInfinityReport, FidSeries,
    FidSeriesPoint, Schedule, DEFAULT_RESAMPLES,
};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum FidError {
    #[error("{n} samples cannot estimate a {d}-dimensional covariance")]
    TooFewSamples { n: usize, d: usize },
    #[error("image size mismatch: {0}")]
    SizeMismatch(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix has eigenvalue {0:e} below tolerance")]
    IndefiniteMatrix(f64),
    #[error("schedule needs at least 3 increasing sizes within the sample: {0}")]
    ScheduleTooSmall(String),
    #[error("non-finite embedding values")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}
