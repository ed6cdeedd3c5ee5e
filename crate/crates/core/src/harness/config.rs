use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::classifier::TrainRegime;
use crate::corpus::{EntryKind, DEFAULT_GAN_FRACTION};
use crate::gan::GanVariant;

/// Where the run's images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// The built-in two-class generator.
    Synth { n_per_class: usize, seed: u64 },
    /// A directory of application files plus a `path,label` CSV.
    Dir {
        input_dir: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_entry")]
        entry: EntryKind,
    },
}

fn default_entry() -> EntryKind {
    EntryKind::DexCode
}

/// Every knob of an experiment run. Missing TOML keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub corpus: CorpusSource,
    pub sizes: Vec<usize>,
    /// Sizes above this are upscaled from images at this size.
    pub native_max: Option<usize>,
    pub gan_variants: Vec<GanVariant>,
    pub regimes: Vec<TrainRegime>,
    pub seeds: Vec<u64>,
    pub gan_fraction: f64,
    pub fid_threshold: f64,
    pub gate_rounds: usize,
    pub gate_batch: usize,
    /// Extra GAN epochs between failed gate rounds.
    pub gate_extra_epochs: usize,
    pub gan_epochs: usize,
    pub gan_batch_size: usize,
    pub gan_checkpoint_every: usize,
    /// GANs for larger sizes run at this size; their output is upscaled.
    pub gan_max_size: usize,
    pub gan_base_channels: usize,
    pub gan_latent_dim: usize,
    /// Images generated per checkpoint for the FID∞ series.
    pub series_batch: usize,
    pub clf_epochs: usize,
    pub clf_batch_size: usize,
    /// Synthetic images per class for Models 2 and 3; `None` matches the
    /// real training pool.
    pub synthetic_count: Option<usize>,
    /// Embedding width; lowered to fit small reference pools.
    pub fid_dim: usize,
    pub fid_extractor_seed: u64,
    /// Wall-clock cap per cell in seconds.
    pub cell_budget_s: Option<f64>,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/experiment"),
            corpus: CorpusSource::Synth { n_per_class: 100, seed: 0 },
            sizes: vec![32, 64, 128, 256, 360, 400],
            native_max: Some(128),
            gan_variants: vec![GanVariant::WganGp, GanVariant::Dcgan],
            regimes: TrainRegime::ALL.to_vec(),
            seeds: vec![0],
            gan_fraction: DEFAULT_GAN_FRACTION,
            fid_threshold: 90.0,
            gate_rounds: 3,
            gate_batch: crate::gan::GATE_BATCH,
            gate_extra_epochs: 10,
            gan_epochs: 100,
            gan_batch_size: 16,
            gan_checkpoint_every: 10,
            gan_max_size: 128,
            gan_base_channels: 8,
            gan_latent_dim: 100,
            series_batch: 200,
            clf_epochs: 30,
            clf_batch_size: 32,
            synthetic_count: None,
            fid_dim: crate::fid::DEFAULT_FEATURE_DIM,
            fid_extractor_seed: 0,
            cell_budget_s: None,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return bad("sizes must be non-empty and positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if repeats(&self.sizes) || repeats(&self.seeds) || repeats(&self.regimes) || repeats(&self.gan_variants) {
            return bad("sizes, seeds, regimes and gan_variants must not repeat".into());
        }
        if self.regimes.is_empty() {
            return bad("regimes must be non-empty".into());
        }
        if self.regimes.iter().any(|r| r.uses_synthetic()) && self.gan_variants.is_empty() {
            return bad("regimes with synthetic data need at least one GAN variant".into());
        }
        if !(0.2..=0.35).contains(&self.gan_fraction) {
            return bad(format!("gan_fraction {} outside [0.2, 0.35]", self.gan_fraction));
        }
        if self.gan_max_size == 0 || self.gan_max_size % 4 != 0 {
            return bad("gan_max_size must be a positive multiple of 4".into());
        }
        let gans = self.regimes.iter().any(|r| r.uses_synthetic());
        if gans && self.sizes.iter().any(|&s| s <= self.gan_max_size && s % 4 != 0) {
            return bad("sizes trained natively by the GAN must be multiples of 4".into());
        }
        if self.gate_rounds == 0 || self.gate_batch < 4 || self.series_batch < 4 {
            return bad("gate_rounds, gate_batch and series_batch must be positive".into());
        }
        if self.fid_dim == 0 || self.workers == 0 || self.clf_batch_size == 0 || self.gan_batch_size < 2 {
            return bad("fid_dim, workers and batch sizes must be positive".into());
        }
        if let CorpusSource::Synth { n_per_class, .. } = self.corpus {
            if n_per_class < crate::corpus::SYNTH_MIN_PER_CLASS {
                return bad(format!("synth corpus needs ≥ {} per class", crate::corpus::SYNTH_MIN_PER_CLASS));
            }
        }
        Ok(())
    }
}

fn repeats<T: PartialEq>(v: &[T]) -> bool {
    v.iter().enumerate().any(|(i, x)| v[..i].contains(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.sizes, vec![32, 64, 128, 256, 360, 400]);
        assert_eq!(cfg.fid_threshold, 90.0);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            out_dir = "runs/small"
            sizes = [32]
            regimes = ["model1", "model3"]
            gan_variants = ["wgan-gp"]
            seeds = [0, 1, 2]
            [corpus]
            kind = "synth"
            n_per_class = 60
            seed = 4
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.corpus, CorpusSource::Synth { n_per_class: 60, seed: 4 });
        assert_eq!(cfg.clf_epochs, 30);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml("sizes = []").is_err());
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml("gan_fraction = 0.5").is_err());
        assert!(ExperimentConfig::from_toml("unknown_key = 1").is_err());
        assert!(ExperimentConfig::from_toml("sizes = [30]").is_err());
        assert!(ExperimentConfig::from_toml("seeds = [1, 1]").is_err());
        assert!(ExperimentConfig::from_toml("sizes = [30]\nregimes = [\"model1\"]").is_ok());
    }
}
