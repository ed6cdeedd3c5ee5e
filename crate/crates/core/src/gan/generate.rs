use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::train::sample_latent;
use super::{GanError, GanModel};
use crate::corpus::{CorpusManifest, GrayImage, Label, Origin, Split};
use crate::fid::{embed, fid_infinity_with, fid_series, fit_gaussian, EmbeddingSet, Extractor, FidSeries, GaussianStats, Schedule};
use crate::rng;
use crate::tensor::Tensor;

/// Images per gated generation round.
pub const GATE_BATCH: usize = 1000;

const CHUNK: usize = 100;

/// Raw generator output for `n` latent draws from `seed`.
pub fn generate_raw(model: &GanModel, n: usize, seed: u64) -> Result<Tensor, GanError> {
    let mut r = rng::stream(seed, rng::streams::GENERATE);
    let z = sample_latent(n, model.config.latent_dim, &mut r);
    Ok(model.generator.predict(&z, None, CHUNK)?)
}

/// `n` images, tanh outputs mapped affinely from [−1, 1] to [0, 255].
pub fn generate(model: &GanModel, n: usize, seed: u64) -> Result<Vec<GrayImage>, GanError> {
    let shape = model.sample_shape();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(GanError::Config(format!("generator output {shape:?} is not an image")));
    }
    let w = shape[2];
    let raw = generate_raw(model, n, seed)?;
    raw.data()
        .chunks(w * w)
        .map(|c| GrayImage::from_unit_range(w, c).map_err(GanError::from))
        .collect()
}

/// Adds `images` to the manifest as synthetic ClassifierTrain records under
/// `images/{size}/{label}/synthetic/{tag}/`, with source ids
/// `gan:{tag}:{label}:{i}`. Returns the number stored.
pub fn store_generated(
    manifest: &mut CorpusManifest,
    images: &[GrayImage],
    label: Label,
    tag: &str,
) -> Result<usize, GanError> {
    for (i, img) in images.iter().enumerate() {
        let rel = format!("images/{}/{label}/synthetic/{tag}/{i:05}.pgm", img.width());
        let source = format!("gan:{tag}:{label}:{i}");
        let rec = manifest.store_image(img, &rel, label, Some(Split::ClassifierTrain), Origin::Synthetic, &source)?;
        manifest.records.push(rec);
    }
    Ok(images.len())
}

/// FID∞ of `images` against reference statistics.
pub fn score_batch(
    images: &[GrayImage],
    reference: &GaussianStats,
    extractor: &Extractor,
    schedule: &Schedule,
) -> Result<f64, GanError> {
    let fake = embed(images, extractor)?;
    Ok(fid_infinity_with(reference, &fake, schedule)?.estimate.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Accept a batch when its FID∞ is at most this.
    pub threshold: f64,
    pub max_rounds: usize,
    pub batch: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { threshold: 90.0, max_rounds: 3, batch: GATE_BATCH, schedule: Schedule::default(), seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GateOutcome {
    /// The accepted batch, or the lowest-FID batch when no round passed.
    pub images: Vec<GrayImage>,
    pub fid_inf: f64,
    pub accepted: bool,
    pub rounds: usize,
    /// FID∞ of every round in order.
    pub history: Vec<f64>,
}

/// Hook run between failed rounds, typically more training.
pub type RoundHook<'a> = dyn FnMut(&mut GanModel, usize) -> Result<(), GanError> + 'a;

/// Generates batches until one scores FID∞ ≤ threshold against `reference`
/// or `max_rounds` is exhausted. Between rounds `between` may keep training.
pub fn fid_gated_generate(
    model: &mut GanModel,
    reference: &EmbeddingSet,
    extractor: &Extractor,
    cfg: &GateConfig,
    mut between: Option<&mut RoundHook<'_>>,
) -> Result<GateOutcome, GanError> {
    let stats = fit_gaussian(reference)?;
    let mut best: Option<(f64, Vec<GrayImage>)> = None;
    let mut history = Vec::new();
    for round in 0..cfg.max_rounds.max(1) {
        let images = generate(model, cfg.batch, rng::derive(cfg.seed, round as u64))?;
        let fid = score_batch(&images, &stats, extractor, &cfg.schedule)?;
        history.push(fid);
        if fid <= cfg.threshold {
            return Ok(GateOutcome { images, fid_inf: fid, accepted: true, rounds: round + 1, history });
        }
        if best.as_ref().is_none_or(|(b, _)| fid < *b) {
            best = Some((fid, images));
        }
        if round + 1 < cfg.max_rounds {
            if let Some(h) = between.as_mut() {
                h(model, round)?;
            }
        }
    }
    let (fid, images) = best.expect("at least one round");
    let rounds = history.len();
    Ok(GateOutcome { images, fid_inf: fid, accepted: false, rounds, history })
}

/// FID∞ of a seeded `n`-image batch from each checkpoint, anomaly-flagged.
pub fn fid_series_for_checkpoints(
    checkpoints: &[(usize, PathBuf)],
    reference: &EmbeddingSet,
    extractor: &Extractor,
    n: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<FidSeries, GanError> {
    let stats = fit_gaussian(reference)?;
    let mut values = Vec::with_capacity(checkpoints.len());
    for (epoch, path) in checkpoints {
        let (model, _) = GanModel::load(path)?;
        let images = generate(&model, n, seed)?;
        values.push((*epoch, score_batch(&images, &stats, extractor, schedule)?));
    }
    Ok(fid_series(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{bytes_to_image, synth_stream};
    use crate::gan::GanConfig;

    fn model(size: usize) -> GanModel {
        GanModel::new(GanConfig { image_size: size, ..Default::default() }, None).unwrap()
    }

    #[test]
    fn batch_of_thousand_in_range() {
        let m = model(8);
        let imgs = generate(&m, 1000, 3).unwrap();
        assert_eq!(imgs.len(), 1000);
        assert!(imgs.iter().all(|i| i.width() == 8 && i.pixels().len() == 64));
        assert_eq!(imgs, generate(&m, 1000, 3).unwrap());
        assert_ne!(imgs, generate(&m, 1000, 4).unwrap());
    }

    #[test]
    fn generated_images_round_trip_through_pgm() {
        let img = generate(&model(8), 1, 0).unwrap().remove(0);
        let back = crate::corpus::decode_pgm(&crate::corpus::encode_pgm(&img)).unwrap();
        assert_eq!(back, img);
    }

    fn reference(n: usize) -> Vec<GrayImage> {
        (0..n).map(|i| bytes_to_image(&synth_stream(Label::Malware, i, 1), 16).unwrap()).collect()
    }

    #[test]
    fn infinite_threshold_accepts_first_round() {
        let mut m = model(16);
        let ext = Extractor::RandomConv { seed: 0, dim: 16 };
        let refs = embed(&reference(40), &ext).unwrap();
        let cfg = GateConfig { threshold: f64::INFINITY, batch: 100, ..Default::default() };
        let out = fid_gated_generate(&mut m, &refs, &ext, &cfg, None).unwrap();
        assert!(out.accepted);
        assert_eq!(out.rounds, 1);
        assert_eq!(out.images.len(), 100);
    }

    #[test]
    fn untrained_generator_rejected_and_best_kept() {
        let mut m = model(16);
        let ext = Extractor::RandomConv { seed: 0, dim: 16 };
        let refs = embed(&reference(40), &ext).unwrap();
        let cfg = GateConfig { batch: 100, max_rounds: 2, ..Default::default() };
        let mut hooks = 0;
        let mut hook = |_: &mut GanModel, _: usize| -> Result<(), GanError> {
            hooks += 1;
            Ok(())
        };
        let out = fid_gated_generate(&mut m, &refs, &ext, &cfg, Some(&mut hook)).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.rounds, 2);
        assert_eq!(hooks, 1);
        assert_eq!(out.fid_inf, out.history.iter().copied().fold(f64::INFINITY, f64::min));
        assert!(out.fid_inf > 90.0);
    }

    #[test]
    fn self_comparison_passes_gate() {
        let ext = Extractor::RandomConv { seed: 0, dim: 16 };
        let imgs = reference(120);
        let stats = fit_gaussian(&embed(&imgs, &ext).unwrap()).unwrap();
        let fid = score_batch(&imgs, &stats, &ext, &Schedule::default()).unwrap();
        assert!(fid <= 90.0 && fid < 1.0, "{fid}");
    }

    #[test]
    fn stored_batches_are_synthetic_training_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = CorpusManifest::new(dir.path(), Default::default());
        let imgs = generate(&model(8), 3, 0).unwrap();
        assert_eq!(store_generated(&mut manifest, &imgs, Label::Benign, "wgan-gp-s0").unwrap(), 3);
        assert_eq!(manifest.records.len(), 3);
        let r = &manifest.records[2];
        assert_eq!(r.image_path, "images/8/benign/synthetic/wgan-gp-s0/00002.pgm");
        assert_eq!((r.origin, r.split), (Origin::Synthetic, Some(Split::ClassifierTrain)));
        assert_eq!(r.source_id, "gan:wgan-gp-s0:benign:2");
        assert_eq!(manifest.load_image(r).unwrap(), imgs[2]);
        manifest.validate().unwrap();
    }

    #[test]
    fn series_from_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(16);
        let p = dir.path().join("a.ckpt");
        m.save(&p, 0).unwrap();
        let ext = Extractor::RandomConv { seed: 0, dim: 16 };
        let refs = embed(&reference(40), &ext).unwrap();
        let s = fid_series_for_checkpoints(&[(0, p.clone()), (5, p)], &refs, &ext, 80, &Schedule::default(), 1).unwrap();
        assert_eq!(s.points.len(), 2);
        assert_eq!(s.points[0].fid_inf, s.points[1].fid_inf);
    }
}
