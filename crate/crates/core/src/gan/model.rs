use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{GanConfig, GanError};
use crate::corpus::Label;
use crate::rng;
use crate::tensor::{init_params, read_checkpoint, write_checkpoint, Checkpoint, Layer, NetSpec, Network};

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Generator: dense → reshape → two stride-2 transposed convs → tanh.
    /// Critic: two stride-2 convs → dense scalar.
    Conv { base_channels: usize },
    /// Three dense layers each side, unbounded generator output of
    /// `image_size` values. For low-dimensional toy data.
    Mlp { hidden: usize },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Conv { base_channels: 8 }
    }
}

/// Generator θ and critic (or discriminator) w for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct GanModel {
    pub generator: Network,
    /// Outputs one unbounded score per sample; DCGAN treats it as a logit.
    pub critic: Network,
    pub config: GanConfig,
    pub class_label: Option<Label>,
}

pub(crate) fn generator_spec(c: &GanConfig) -> NetSpec {
    match c.arch {
        Architecture::Conv { base_channels: b } => {
            let q = c.image_size / 4;
            NetSpec::new(
                vec![c.latent_dim],
                vec![
                    Layer::dense("fc", c.latent_dim, 2 * b * q * q),
                    Layer::Reshape { shape: vec![2 * b, q, q] },
                    Layer::LeakyRelu { slope: LEAK },
                    Layer::conv_t("up1", 2 * b, b, 4, 2, 1),
                    Layer::LeakyRelu { slope: LEAK },
                    Layer::conv_t("up2", b, 1, 4, 2, 1),
                    Layer::Tanh,
                ],
            )
        }
        Architecture::Mlp { hidden: h } => NetSpec::new(
            vec![c.latent_dim],
            vec![
                Layer::dense("fc1", c.latent_dim, h),
                Layer::LeakyRelu { slope: LEAK },
                Layer::dense("fc2", h, h),
                Layer::LeakyRelu { slope: LEAK },
                Layer::dense("out", h, c.image_size),
            ],
        ),
    }
}

pub(crate) fn critic_spec(c: &GanConfig) -> NetSpec {
    match c.arch {
        Architecture::Conv { base_channels: b } => {
            let q = c.image_size / 4;
            NetSpec::new(
                vec![1, c.image_size, c.image_size],
                vec![
                    Layer::conv("c1", 1, b, 4, 2, 1),
                    Layer::LeakyRelu { slope: LEAK },
                    Layer::conv("c2", b, 2 * b, 4, 2, 1),
                    Layer::LeakyRelu { slope: LEAK },
                    Layer::Flatten,
                    Layer::dense("fc", 2 * b * q * q, 1),
                ],
            )
        }
        Architecture::Mlp { hidden: h } => NetSpec::new(
            vec![c.image_size],
            vec![
                Layer::dense("fc1", c.image_size, h),
                Layer::LeakyRelu { slope: LEAK },
                Layer::dense("fc2", h, h),
                Layer::LeakyRelu { slope: LEAK },
                Layer::dense("out", h, 1),
            ],
        ),
    }
}

impl GanModel {
    /// Freshly initialized networks; generator and critic use derived seeds.
    pub fn new(config: GanConfig, class_label: Option<Label>) -> Result<Self, GanError> {
        config.validate()?;
        let gs = generator_spec(&config);
        let cs = critic_spec(&config);
        let gp = init_params(&gs, rng::derive(config.seed, 1))?;
        let cp = init_params(&cs, rng::derive(config.seed, 2))?;
        Ok(Self { generator: Network::new(gs, gp)?, critic: Network::new(cs, cp)?, config, class_label })
    }

    /// Per-sample shape of generated data.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.critic.spec.input.clone()
    }

    pub fn to_checkpoint(&self, epoch: usize) -> Result<Checkpoint, GanError> {
        let mut params = self.generator.params.prefixed("generator.");
        params.extend(self.critic.params.prefixed("critic."))?;
        let meta = json!({
            "kind": "gan",
            "config": self.config,
            "class_label": self.class_label,
            "epoch": epoch,
        });
        Ok(Checkpoint { meta, params })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, usize), GanError> {
        let bad = |m: &str| GanError::Config(format!("not a GAN checkpoint: {m}"));
        if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("gan") {
            return Err(bad("kind"));
        }
        let config: GanConfig =
            serde_json::from_value(ckpt.meta["config"].clone()).map_err(|e| bad(&e.to_string()))?;
        let class_label: Option<Label> =
            serde_json::from_value(ckpt.meta["class_label"].clone()).map_err(|e| bad(&e.to_string()))?;
        let epoch = ckpt.meta["epoch"].as_u64().ok_or_else(|| bad("epoch"))? as usize;
        let generator = Network::new(generator_spec(&config), ckpt.params.strip_prefix("generator."))?;
        let critic = Network::new(critic_spec(&config), ckpt.params.strip_prefix("critic."))?;
        Ok((Self { generator, critic, config, class_label }, epoch))
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<(), GanError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_checkpoint(path, &self.to_checkpoint(epoch)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, usize), GanError> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_emits_configured_size() {
        for size in [8, 32, 64] {
            let c = GanConfig { image_size: size, ..Default::default() };
            let m = GanModel::new(c, None).unwrap();
            assert_eq!(m.generator.spec.output_shape().unwrap(), vec![1, size, size]);
            assert_eq!(m.critic.spec.output_shape().unwrap(), vec![1]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = GanConfig { image_size: 8, seed: 4, ..Default::default() };
        let m = GanModel::new(c, Some(Label::Malware)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ckpt");
        m.save(&p, 7).unwrap();
        let (back, epoch) = GanModel::load(&p).unwrap();
        assert_eq!(epoch, 7);
        assert_eq!(back, m);
    }

    #[test]
    fn generator_and_critic_seeds_differ() {
        let c = GanConfig { arch: Architecture::Mlp { hidden: 4 }, image_size: 4, latent_dim: 4, ..Default::default() };
        let m = GanModel::new(c, None).unwrap();
        assert_ne!(m.generator.params.tensors()[0], m.critic.params.tensors()[0]);
    }
}
