use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::FidError;
use crate::corpus::GrayImage;
use crate::rng;
use crate::tensor::{Layer, NetSpec, Network, ParamSet, Tensor};

pub const DEFAULT_FEATURE_DIM: usize = 64;

/// Multiplies random-conv features so distances land on a familiar FID scale.
pub const FEATURE_SCALE: f64 = 5.0;

const HIDDEN: usize = 8;
const KERNEL: usize = 5;
const CHUNK: usize = 64;
const ENERGY_FLOOR: f64 = 1e-3;

/// n × d feature vectors plus the extractor that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: DMatrix<f64>,
    pub extractor_id: String,
    pub source: String,
}

impl EmbeddingSet {
    pub fn new(vectors: DMatrix<f64>, extractor_id: impl Into<String>, source: impl Into<String>) -> Result<Self, FidError> {
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(FidError::NonFinite);
        }
        Ok(Self { vectors, extractor_id: extractor_id.into(), source: source.into() })
    }

    pub fn from_rows(rows: &[Vec<f64>], extractor_id: &str, source: &str) -> Result<Self, FidError> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(FidError::DimensionMismatch(d, rows.iter().map(Vec::len).find(|&l| l != d).unwrap_or(d)));
        }
        let m = DMatrix::from_row_iterator(rows.len(), d, rows.iter().flatten().copied());
        Self::new(m, extractor_id, source)
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> DMatrix<f64> {
        self.vectors.select_rows(idx)
    }
}

/// How images become feature vectors.
#[derive(Debug, Clone)]
pub enum Extractor {
    /// A fixed seeded two-layer tanh conv stack (zero-mean first-layer
    /// kernels) with one globally energy-pooled channel per feature.
    RandomConv { seed: u64, dim: usize },
    /// The first `layers` layers of a trained network, flattened.
    Network { net: Box<Network>, layers: usize, id: String },
}

impl Extractor {
    pub fn random(seed: u64) -> Self {
        Extractor::RandomConv { seed, dim: DEFAULT_FEATURE_DIM }
    }

    pub fn id(&self) -> String {
        match self {
            Extractor::RandomConv { seed, dim } => format!("random-conv:seed={seed}:d={dim}"),
            Extractor::Network { id, .. } => id.clone(),
        }
    }

    /// Feature width for images of the given size.
    pub fn dim(&self) -> Result<usize, FidError> {
        match self {
            Extractor::RandomConv { dim, .. } => Ok(*dim),
            Extractor::Network { net, layers, .. } => Ok(net.spec.shape_after(*layers)?.iter().product()),
        }
    }
}

/// `[n, 1, W, W]` in [−1, 1].
pub fn images_to_tensor(images: &[GrayImage]) -> Result<Tensor, FidError> {
    let w = images.first().map_or(0, GrayImage::width);
    if let Some(bad) = images.iter().find(|i| i.width() != w) {
        return Err(FidError::SizeMismatch(format!("{w} vs {}", bad.width())));
    }
    let mut data = Vec::with_capacity(images.len() * w * w);
    for img in images {
        data.extend(img.to_unit_range());
    }
    Ok(Tensor::new(vec![images.len(), 1, w, w], data)?)
}

fn random_conv_net(seed: u64, dim: usize, width: usize) -> Result<Network, FidError> {
    if dim == 0 {
        return Err(FidError::DimensionMismatch(dim, 1));
    }
    let spec = NetSpec::new(
        vec![1, width, width],
        vec![
            Layer::conv("c1", 1, HIDDEN, KERNEL, 2, 2),
            Layer::Tanh,
            Layer::conv("c2", HIDDEN, dim, KERNEL, 2, 2),
            Layer::Tanh,
        ],
    );
    let mut rng = rng::stream(seed, rng::streams::EXTRACTOR);
    let mut params = ParamSet::new();
    for (name, shape, is_bias) in spec.param_shapes()? {
        let n: usize = shape.iter().product();
        let std = if is_bias { 0.1 } else { 1.0 / ((shape[1] * KERNEL * KERNEL) as f64).sqrt() };
        let mut data: Vec<f64> = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        if name == "c1.weight" {
            for k in data.chunks_mut(KERNEL * KERNEL) {
                let mean = k.iter().sum::<f64>() / k.len() as f64;
                k.iter_mut().for_each(|v| *v -= mean);
            }
        }
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(Network::new(spec, params)?)
}

fn energy_means(maps: &[f64], channels: usize) -> Vec<f64> {
    let per = maps.len() / channels;
    maps.chunks(per).map(|plane| FEATURE_SCALE * (ENERGY_FLOOR + plane.iter().map(|v| v * v).sum::<f64>() / per as f64).ln()).collect()
}

/// One feature vector per image. Deterministic per extractor.
pub fn embed(images: &[GrayImage], extractor: &Extractor) -> Result<EmbeddingSet, FidError> {
    let x = images_to_tensor(images)?;
    let n = images.len();
    let width = images.first().map_or(0, GrayImage::width);
    let vectors = match extractor {
        Extractor::RandomConv { seed, dim } => {
            let net = random_conv_net(*seed, *dim, width)?;
            let shape = net.spec.output_shape()?;
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let y = net.predict(&x, None, CHUNK)?;
            let per = c * h * w;
            let rows: Vec<f64> = (0..n).flat_map(|i| energy_means(&y.data()[i * per..(i + 1) * per], c)).collect();
            DMatrix::from_row_slice(n, *dim, &rows)
        }
        Extractor::Network { net, layers, .. } => {
            if net.spec.input.last() != Some(&width) && n > 0 {
                return Err(FidError::SizeMismatch(format!("network expects {:?}, images are {width}", net.spec.input)));
            }
            let y = net.predict(&x, Some(*layers), CHUNK)?;
            let d = if n == 0 { 0 } else { y.len() / n };
            DMatrix::from_row_slice(n, d, y.data())
        }
    };
    EmbeddingSet::new(vectors, extractor.id(), format!("{n} images of {width}px"))
}
