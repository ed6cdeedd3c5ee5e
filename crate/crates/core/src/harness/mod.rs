//! The experiment matrix: sizes × regimes × GAN variants × seeds, with
//! resumable per-cell artifacts, result tables and plot data.

mod config;
mod report;
mod run;

pub use config::{CorpusSource, ExperimentConfig};
pub use report::{
    compare_variants, emit_plot_data, median, read_results_csv, results_csv, tables_markdown, FidSeriesRow, VariantComparison,
    VariantPair, F1_VS_SIZE_HEADER, FID_VS_EPOCH_HEADER,
};
pub use run::{cell_hash, cells, run_experiment, Cell, CellRecord, CellStatus, GateSummary, RunOptions, RunSummary};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, MetricsReport, TrainRegime};
use crate::corpus::CorpusError;
use crate::fid::FidError;
use crate::gan::{GanError, GanVariant};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("unmatched cells: {0}")]
    UnmatchedCells(String),
    #[error("cell exceeded its {0} s budget")]
    Budget(f64),
    #[error("all {0} cells failed")]
    AllCellsFailed(usize),
    #[error("malformed artifact {0}")]
    Artifact(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Fid(#[from] FidError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// One completed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub image_size: usize,
    pub regime: TrainRegime,
    pub gan_variant: Option<GanVariant>,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub specificity: Option<f64>,
    /// Mean per-class FID∞ of the synthetic images trained on.
    pub fid_inf: Option<f64>,
    pub wall_time_s: f64,
}

impl ResultRow {
    pub fn new(cell: &Cell, report: &MetricsReport, fid_inf: Option<f64>, wall_time_s: f64) -> Self {
        Self {
            image_size: cell.image_size,
            regime: cell.regime,
            gan_variant: cell.gan_variant,
            seed: cell.seed,
            accuracy: report.accuracy,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            specificity: report.specificity,
            fid_inf,
            wall_time_s,
        }
    }
}
