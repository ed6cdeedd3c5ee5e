use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::ClassifierError;
use crate::corpus::{GrayImage, Label};
use crate::fid::{images_to_tensor, Extractor};
use crate::rng;
use crate::tensor::{read_checkpoint, sigmoid, write_checkpoint, Checkpoint, Layer, NetSpec, Network, ParamSet, Tensor};

const CHUNK: usize = 64;

/// Default decision threshold; outputs equal to it count as malware.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Conv blocks (conv → leaky → max pool) then one hidden dense layer and a
/// single logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub image_size: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub dense: usize,
    pub leak: f64,
}

impl CnnSpec {
    pub fn new(image_size: usize) -> Self {
        Self { image_size, channels: vec![8, 16], kernel: 3, pool: 2, dense: 64, leak: 0.2 }
    }

    pub fn net_spec(&self) -> Result<NetSpec, ClassifierError> {
        let shrink = self.pool.pow(self.channels.len() as u32);
        if self.image_size == 0 || self.pool == 0 || self.image_size % shrink != 0 || self.kernel % 2 == 0 {
            return Err(ClassifierError::Config(format!(
                "image size {} must be a positive multiple of {shrink} with an odd kernel",
                self.image_size
            )));
        }
        let mut layers = Vec::new();
        let mut in_ch = 1;
        for (i, &c) in self.channels.iter().enumerate() {
            layers.push(Layer::conv(&format!("conv{}", i + 1), in_ch, c, self.kernel, 1, self.kernel / 2));
            layers.push(Layer::LeakyRelu { slope: self.leak });
            layers.push(Layer::MaxPool2d { size: self.pool });
            in_ch = c;
        }
        let side = self.image_size / shrink;
        layers.push(Layer::Flatten);
        layers.push(Layer::dense("fc", in_ch * side * side, self.dense));
        layers.push(Layer::LeakyRelu { slope: self.leak });
        layers.push(Layer::dense("out", self.dense, 1));
        Ok(NetSpec::new(vec![1, self.image_size, self.image_size], layers))
    }

    /// Layers up to and including the hidden dense activation.
    pub fn penultimate_layers(&self) -> usize {
        3 * self.channels.len() + 3
    }
}

/// Weights ~ Normal(0, 2/fan_in), zero biases.
fn he_init(spec: &NetSpec, seed: u64) -> Result<ParamSet, ClassifierError> {
    let mut r = rng::stream(seed, rng::streams::INIT);
    let mut set = ParamSet::new();
    for (name, shape, is_bias) in spec.param_shapes()? {
        let n: usize = shape.iter().product();
        let t = if is_bias {
            Tensor::zeros(&shape)
        } else {
            let fan_in = if shape.len() == 2 { shape[0] } else { shape[1..].iter().product() };
            let std = (2.0 / fan_in as f64).sqrt();
            Tensor::new(shape, (0..n).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect())?
        };
        set.insert(name, t)?;
    }
    Ok(set)
}

/// A binary detector: logit network plus its spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub spec: CnnSpec,
    pub net: Network,
}

impl Classifier {
    pub fn new(spec: CnnSpec, seed: u64) -> Result<Self, ClassifierError> {
        let ns = spec.net_spec()?;
        let params = he_init(&ns, seed)?;
        Ok(Self { net: Network::new(ns, params)?, spec })
    }

    fn check_sizes(&self, images: &[GrayImage]) -> Result<(), ClassifierError> {
        match images.iter().find(|i| i.width() != self.spec.image_size) {
            Some(bad) => Err(ClassifierError::SizeMismatch { expected: self.spec.image_size, got: bad.width() }),
            None => Ok(()),
        }
    }

    /// Raw logits for a `[n, 1, W, W]` tensor.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>, ClassifierError> {
        Ok(self.net.predict(x, None, CHUNK)?.into_data())
    }

    /// Malware probabilities in (0, 1).
    pub fn probabilities(&self, images: &[GrayImage]) -> Result<Vec<f64>, ClassifierError> {
        self.check_sizes(images)?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.logits(&images_to_tensor(images)?)?.into_iter().map(sigmoid).collect())
    }

    /// Malware iff the output is at least `threshold`.
    pub fn predict(&self, images: &[GrayImage], threshold: f64) -> Result<Vec<Label>, ClassifierError> {
        Ok(self
            .probabilities(images)?
            .into_iter()
            .map(|p| if p >= threshold { Label::Malware } else { Label::Benign })
            .collect())
    }

    /// The hidden dense activations as an FID feature extractor.
    pub fn extractor(&self) -> Extractor {
        let digest = Sha256::digest(self.to_checkpoint(json!(null)).to_bytes());
        Extractor::Network {
            net: Box::new(self.net.clone()),
            layers: self.spec.penultimate_layers(),
            id: format!("cnn-penultimate:{}", &hex::encode(digest)[..16]),
        }
    }

    /// `extra` is stored verbatim under `"training"`.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            meta: json!({ "kind": "classifier", "spec": self.spec, "training": extra }),
            params: self.net.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ClassifierError> {
        let bad = |m: String| ClassifierError::Config(format!("not a classifier checkpoint: {m}"));
        if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("classifier") {
            return Err(bad("kind".into()));
        }
        let spec: CnnSpec = serde_json::from_value(ckpt.meta["spec"].clone()).map_err(|e| bad(e.to_string()))?;
        Ok(Self { net: Network::new(spec.net_spec()?, ckpt.params.clone())?, spec })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), ClassifierError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_checkpoint(path, &self.to_checkpoint(extra))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}
