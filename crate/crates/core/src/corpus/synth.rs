//! A seeded two-class byte-stream corpus for desk-scale runs.
//!
//! Benign streams are a smooth low-frequency wave with mild noise; about a
//! third carry one short textured patch. Malware streams share that
//! background but 30–60% of their bytes are replaced by high-frequency
//! noisy repeating motifs, and 60% of them start with a fixed 64-byte header.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng as _;

use super::archive::{ByteStream, EntryKind};
use super::image::{bytes_to_image, upscale};
use super::manifest::{CorpusManifest, Label, ManifestMeta, Origin};
use super::split::{split_corpus, SplitConfig, DEFAULT_GAN_FRACTION};
use super::CorpusError;
use crate::rng::{self, Rng};

pub const SYNTH_MIN_PER_CLASS: usize = 20;

const MIN_LEN: usize = 4096;
const MAX_LEN: usize = 12288;
const HEADER_LEN: usize = 64;

fn header() -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    for (i, b) in h.iter_mut().enumerate() {
        *b = if i % 2 == 0 { 0xde } else { (i * 37 % 256) as u8 };
    }
    h
}

fn background(rng: &mut Rng, len: usize) -> Vec<f64> {
    let f1 = rng.random_range(1.0..4.0);
    let f2 = rng.random_range(4.0..12.0);
    let a1 = rng.random_range(30.0..70.0);
    let a2 = rng.random_range(10.0..30.0);
    let p1 = rng.random_range(0.0..TAU);
    let p2 = rng.random_range(0.0..TAU);
    let mid = rng.random_range(100.0..156.0);
    (0..len)
        .map(|t| {
            let x = t as f64 / len as f64;
            mid + a1 * (TAU * f1 * x + p1).sin() + a2 * (TAU * f2 * x + p2).sin() + rng.random_range(-10.0..10.0)
        })
        .collect()
}

fn texture(rng: &mut Rng, values: &mut [f64]) {
    let period = rng.random_range(2..9);
    let amp = rng.random_range(60.0..120.0);
    let motif: Vec<f64> = (0..period).map(|_| rng.random_range(-1.0..1.0) * amp).collect();
    let centre = rng.random_range(96.0..160.0);
    let jitter = amp / 2.0;
    for (i, v) in values.iter_mut().enumerate() {
        *v = centre + motif[i % period] + rng.random_range(-jitter..jitter);
    }
}

/// The `index`-th stream of `label` for `seed`.
pub fn synth_stream(label: Label, index: usize, seed: u64) -> ByteStream {
    let class = match label {
        Label::Malware => 1,
        Label::Benign => 2,
    };
    let mut rng = rng::stream(rng::derive(rng::derive(seed, class), index as u64), rng::streams::SYNTH);
    let len = rng.random_range(MIN_LEN..=MAX_LEN);
    let mut values = background(&mut rng, len);
    match label {
        Label::Benign => {
            if rng.random_bool(1.0 / 3.0) {
                let seg = len * rng.random_range(5..11) / 100;
                let start = rng.random_range(0..len - seg);
                texture(&mut rng, &mut values[start..start + seg]);
            }
        }
        Label::Malware => {
            let parts = rng.random_range(1..4usize);
            let total = len * rng.random_range(30..61) / 100;
            let seg = total / parts;
            let stride = len / parts;
            for p in 0..parts {
                let start = p * stride + rng.random_range(0..stride - seg);
                texture(&mut rng, &mut values[start..start + seg]);
            }
        }
    }
    let mut bytes: Vec<u8> = values.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    if label == Label::Malware && rng.random_bool(0.6) {
        bytes[..HEADER_LEN].copy_from_slice(&header());
    }
    ByteStream::new(bytes, format!("synth:{seed}:{label}:{index}"), EntryKind::Raw).expect("non-empty")
}

/// Regenerates a stream from a `synth:{seed}:{label}:{index}` id.
pub(crate) fn synth_stream_from_id(id: &str) -> Option<Result<ByteStream, CorpusError>> {
    let rest = id.strip_prefix("synth:")?;
    let parsed = (|| {
        let mut it = rest.split(':');
        let seed = it.next()?.parse().ok()?;
        let label = it.next()?.parse().ok()?;
        let index = it.next()?.parse().ok()?;
        it.next().is_none().then_some((seed, label, index))
    })();
    Some(match parsed {
        Some((seed, label, index)) => Ok(synth_stream(label, index, seed)),
        None => Err(CorpusError::Manifest(format!("bad synthetic source id {id:?}"))),
    })
}

/// Writes `n_per_class` streams per label as images at every size in
/// `sizes`, applies the default split, and saves `manifest.jsonl`.
pub fn synth_corpus(n_per_class: usize, sizes: &[usize], seed: u64, out_dir: &Path) -> Result<CorpusManifest, CorpusError> {
    synth_corpus_with(n_per_class, sizes, seed, out_dir, None)
}

/// [`synth_corpus`] where sizes above `native_max` are upscaled from the
/// image at `native_max`.
pub fn synth_corpus_with(
    n_per_class: usize,
    sizes: &[usize],
    seed: u64,
    out_dir: &Path,
    native_max: Option<usize>,
) -> Result<CorpusManifest, CorpusError> {
    if n_per_class < SYNTH_MIN_PER_CLASS {
        return Err(CorpusError::InsufficientSamples(format!(
            "{n_per_class} per class, need at least {SYNTH_MIN_PER_CLASS}"
        )));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(CorpusError::Config("size set must be non-empty and positive".into()));
    }
    let meta = ManifestMeta {
        seed,
        size_set: sizes.to_vec(),
        created_at: 0,
        input_dir: None,
        entry_kind: Some(EntryKind::Raw),
        skipped: Vec::new(),
    };
    let mut manifest = CorpusManifest::new(out_dir, meta);
    for label in Label::ALL {
        for i in 0..n_per_class {
            let stream = synth_stream(label, i, seed);
            for &size in sizes {
                let img = match native_max {
                    Some(m) if size > m => upscale(&bytes_to_image(&stream, m)?, size)?,
                    _ => bytes_to_image(&stream, size)?,
                };
                let rel = format!("images/{size}/{label}/synth_{i:05}.pgm");
                let rec = manifest.store_image(&img, &rel, label, None, Origin::Real, stream.source_id())?;
                manifest.records.push(rec);
            }
        }
    }
    split_corpus(&mut manifest, &SplitConfig::new(DEFAULT_GAN_FRACTION, seed))?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
