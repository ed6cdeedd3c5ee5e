//! Per-class WGAN-GP and DCGAN training, generation, and FID-gated
//! generation.

mod generate;
mod model;
mod train;

pub use generate::{
    fid_gated_generate, fid_series_for_checkpoints, generate, generate_raw, score_batch, store_generated, GateConfig, GateOutcome, RoundHook, GATE_BATCH,
};
pub use model::{Architecture, GanModel};
pub use train::{
    critic_loss, dcgan_losses, dcgan_train_step, interpolate, sample_latent, train_gan, train_on_tensor,
    wgan_train_step, BatchSampler, CheckpointProbe, CriticLoss, EpochLog, StepLog, TrainLog, TrainState,
};

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::fid::FidError;
use crate::rng;
use crate::tensor::{AdamConfig, Tensor, TensorError};
use rand::Rng as _;
use rand_distr::StandardNormal;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("invalid GAN configuration: {0}")]
    Config(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("sampler holds {have} samples, batch needs {need}")]
    DataExhausted { have: usize, need: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Fid(#[from] FidError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanVariant {
    WganGp,
    Dcgan,
}

impl GanVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            GanVariant::WganGp => "wgan-gp",
            GanVariant::Dcgan => "dcgan",
        }
    }
}

impl std::fmt::Display for GanVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GanVariant {
    type Err = GanError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "wgan-gp" | "wgangp" | "wgan" => Ok(GanVariant::WganGp),
            "dcgan" => Ok(GanVariant::Dcgan),
            other => Err(GanError::Config(format!("unknown GAN variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    /// Gradient-penalty coefficient λ.
    pub lambda: f64,
    /// Critic updates per generator update (WGAN-GP only).
    pub n_critic: usize,
    /// Batch size m.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub latent_dim: usize,
    pub epochs: usize,
    pub image_size: usize,
    pub variant: GanVariant,
    pub seed: u64,
    pub arch: Architecture,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            n_critic: 5,
            batch_size: 16,
            adam: AdamConfig::GAN,
            latent_dim: 100,
            epochs: 100,
            image_size: 32,
            variant: GanVariant::WganGp,
            seed: 0,
            arch: Architecture::default(),
            checkpoint_every: 0,
        }
    }
}

/// Samples in the 1-D toy task; an epoch is 20 steps of 50.
pub const TOY_SAMPLES: usize = 1000;

/// `n` draws from Normal(4, 0.5) as size-1 samples, shape `[n, 1]`.
pub fn toy_samples(n: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, rng::streams::SYNTH);
    let data = (0..n).map(|_| 4.0 + 0.5 * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![n, 1], data).expect("shape matches data")
}

impl GanConfig {
    /// Dense networks for [`toy_samples`]: 2000 generator steps for
    /// WGAN-GP, 4000 for DCGAN at [`TOY_SAMPLES`] samples.
    pub fn toy(variant: GanVariant, seed: u64) -> Self {
        let base = Self { image_size: 1, latent_dim: 4, batch_size: 50, variant, seed, ..Default::default() };
        match variant {
            GanVariant::WganGp => Self {
                lambda: 0.1,
                adam: AdamConfig { lr: 1e-3, beta1: 0.5, ..AdamConfig::GAN },
                arch: Architecture::Mlp { hidden: 64 },
                epochs: 100,
                ..base
            },
            GanVariant::Dcgan => Self {
                adam: AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, ..AdamConfig::GAN },
                arch: Architecture::Mlp { hidden: 16 },
                epochs: 200,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), GanError> {
        let bad = |m: &str| Err(GanError::Config(m.into()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("λ must be ≥ 0");
        }
        if self.n_critic == 0 {
            return bad("n_critic must be ≥ 1");
        }
        if self.batch_size < 2 {
            return bad("batch size must be ≥ 2");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be ≥ 1");
        }
        if self.image_size == 0 {
            return bad("image size must be ≥ 1");
        }
        if let Architecture::Conv { base_channels } = self.arch {
            if self.image_size % 4 != 0 || base_channels == 0 {
                return bad("convolutional GANs need an image size divisible by 4");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_algorithm() {
        let c = GanConfig::default();
        assert_eq!(c.lambda, 10.0);
        assert_eq!(c.n_critic, 5);
        assert_eq!(c.latent_dim, 100);
        assert_eq!((c.adam.lr, c.adam.beta1, c.adam.beta2), (1e-4, 0.0, 0.9));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        for c in [
            GanConfig { lambda: -1.0, ..Default::default() },
            GanConfig { n_critic: 0, ..Default::default() },
            GanConfig { batch_size: 1, ..Default::default() },
            GanConfig { latent_dim: 0, ..Default::default() },
            GanConfig { image_size: 30, ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(GanError::Config(_))));
        }
    }

    #[test]
    fn variant_names() {
        assert_eq!("wgan-gp".parse::<GanVariant>().unwrap(), GanVariant::WganGp);
        assert_eq!("DCGAN".parse::<GanVariant>().unwrap(), GanVariant::Dcgan);
        assert_eq!(serde_json::to_string(&GanVariant::WganGp).unwrap(), "\"wgan-gp\"");
    }
}
