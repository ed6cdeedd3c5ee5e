use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::manifest::{CorpusManifest, Label, Origin, Split};
use super::CorpusError;
use crate::rng;

pub const DEFAULT_GAN_FRACTION: f64 = 0.30;

/// Stratified split ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    /// Share of each class used for GAN training; the classifier trains on
    /// the same pool.
    pub gan_fraction: f64,
    /// Share held out for testing. `None` means everything not in the GAN pool.
    pub test_fraction: Option<f64>,
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(gan_fraction: f64, seed: u64) -> Self {
        Self { gan_fraction, test_fraction: None, seed }
    }
}

/// Assigns every real record a split, stratified by label. All sizes of one
/// source share a split. Non-real records are left untouched.
///
/// Per class with `n` sources: `round(n·gan_fraction)` go to
/// [`Split::GanTrain`], `round(n·test_fraction)` (or the rest) to
/// [`Split::Test`], and any remainder to [`Split::ClassifierTrain`].
pub fn split_corpus(manifest: &mut CorpusManifest, cfg: &SplitConfig) -> Result<(), CorpusError> {
    if !(0.2..=0.35).contains(&cfg.gan_fraction) {
        return Err(CorpusError::Config(format!("gan fraction {} outside [0.2, 0.35]", cfg.gan_fraction)));
    }
    let test_fraction = cfg.test_fraction.unwrap_or(1.0 - cfg.gan_fraction);
    if !(0.0..=1.0).contains(&test_fraction) || cfg.gan_fraction + test_fraction > 1.0 + 1e-12 {
        return Err(CorpusError::Config(format!(
            "fractions {} + {test_fraction} exceed 1",
            cfg.gan_fraction
        )));
    }

    let mut by_label: BTreeMap<Label, Vec<String>> = BTreeMap::new();
    for r in manifest.records.iter().filter(|r| r.origin == Origin::Real) {
        let v = by_label.entry(r.label).or_default();
        if !v.contains(&r.source_id) {
            v.push(r.source_id.clone());
        }
    }
    if by_label.is_empty() {
        return Err(CorpusError::InsufficientSamples("no real records".into()));
    }

    let mut rng = rng::stream(cfg.seed, rng::streams::SPLIT);
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    for (label, mut sources) in by_label {
        sources.sort();
        sources.shuffle(&mut rng);
        let n = sources.len();
        let n_gan = (n as f64 * cfg.gan_fraction).round() as usize;
        let n_test = if cfg.test_fraction.is_some() {
            (n as f64 * test_fraction).round() as usize
        } else {
            n - n_gan
        };
        if n_gan == 0 || n_test == 0 || n_gan + n_test > n {
            return Err(CorpusError::InsufficientSamples(format!(
                "{label}: {n} sources cannot fill gan={n_gan} test={n_test}"
            )));
        }
        for (i, s) in sources.into_iter().enumerate() {
            let split = if i < n_gan {
                Split::GanTrain
            } else if i < n_gan + n_test {
                Split::Test
            } else {
                Split::ClassifierTrain
            };
            assignment.insert(s, split);
        }
    }
    for r in manifest.records.iter_mut().filter(|r| r.origin == Origin::Real) {
        r.split = assignment.get(&r.source_id).copied();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ManifestMeta, SampleRecord};

    fn manifest(per_class: usize, sizes: &[usize]) -> CorpusManifest {
        let mut m = CorpusManifest::new("/tmp", ManifestMeta::default());
        for label in Label::ALL {
            for i in 0..per_class {
                for &size in sizes {
                    m.records.push(SampleRecord {
                        image_path: format!("{label}/{i}_{size}.pgm"),
                        label,
                        split: None,
                        content_hash: format!("{label}{i}{size}"),
                        origin: Origin::Real,
                        source_id: format!("{label}-{i}"),
                        image_size: size,
                    });
                }
            }
        }
        m
    }

    fn count(m: &CorpusManifest, label: Label, split: Split, size: usize) -> usize {
        m.records.iter().filter(|r| r.label == label && r.split == Some(split) && r.image_size == size).count()
    }

    #[test]
    fn stratified_counts() {
        let mut m = manifest(100, &[32]);
        split_corpus(&mut m, &SplitConfig::new(0.3, 1)).unwrap();
        for l in Label::ALL {
            assert_eq!(count(&m, l, Split::GanTrain, 32), 30);
            assert_eq!(count(&m, l, Split::Test, 32), 70);
        }
    }

    #[test]
    fn all_sizes_of_a_source_share_split() {
        let mut m = manifest(20, &[32, 64]);
        split_corpus(&mut m, &SplitConfig::new(0.25, 4)).unwrap();
        let mut by_source: BTreeMap<&str, Vec<Option<Split>>> = BTreeMap::new();
        for r in &m.records {
            by_source.entry(&r.source_id).or_default().push(r.split);
        }
        assert!(by_source.values().all(|v| v.iter().all(|s| *s == v[0] && s.is_some())));
    }

    #[test]
    fn overfull_fractions_rejected() {
        let mut m = manifest(10, &[8]);
        let cfg = SplitConfig { gan_fraction: 0.3, test_fraction: Some(0.8), seed: 0 };
        assert!(matches!(split_corpus(&mut m, &cfg), Err(CorpusError::Config(_))));
        assert!(split_corpus(&mut m, &SplitConfig::new(0.5, 0)).is_err());
    }

    #[test]
    fn empty_cells_rejected() {
        let mut m = manifest(1, &[8]);
        assert!(matches!(
            split_corpus(&mut m, &SplitConfig::new(0.3, 0)),
            Err(CorpusError::InsufficientSamples(_))
        ));
    }

    #[test]
    fn separate_classifier_pool() {
        let mut m = manifest(100, &[8]);
        let cfg = SplitConfig { gan_fraction: 0.25, test_fraction: Some(0.5), seed: 3 };
        split_corpus(&mut m, &cfg).unwrap();
        assert_eq!(count(&m, Label::Malware, Split::ClassifierTrain, 8), 25);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut a = manifest(40, &[8]);
        let mut b = manifest(40, &[8]);
        split_corpus(&mut a, &SplitConfig::new(0.3, 11)).unwrap();
        split_corpus(&mut b, &SplitConfig::new(0.3, 11)).unwrap();
        assert_eq!(a.records, b.records);
        let mut c = manifest(40, &[8]);
        split_corpus(&mut c, &SplitConfig::new(0.3, 12)).unwrap();
        assert_ne!(a.records, c.records);
    }

    proptest::proptest! {
        #[test]
        fn partition_within_one_of_target(n_mal in 4usize..60, n_ben in 4usize..60, frac in 0.2f64..0.35, seed: u64) {
            let mut m = manifest(0, &[8]);
            for (label, n) in [(Label::Malware, n_mal), (Label::Benign, n_ben)] {
                for i in 0..n {
                    m.records.push(SampleRecord {
                        image_path: format!("{label}{i}"), label, split: None,
                        content_hash: format!("{label}{i}"), origin: Origin::Real,
                        source_id: format!("{label}{i}"), image_size: 8,
                    });
                }
            }
            split_corpus(&mut m, &SplitConfig::new(frac, seed)).unwrap();
            for (label, n) in [(Label::Malware, n_mal), (Label::Benign, n_ben)] {
                let gan = count(&m, label, Split::GanTrain, 8);
                let test = count(&m, label, Split::Test, 8);
                proptest::prop_assert_eq!(gan + test, n);
                proptest::prop_assert!((gan as f64 - n as f64 * frac).abs() <= 1.0);
            }
        }
    }
}
