use std::io::Write;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::metrics::{confusion, metrics, MetricsReport};
use super::model::{Classifier, CnnSpec};
use super::ClassifierError;
use crate::corpus::{CorpusManifest, GrayImage, Label, Origin, SampleRecord, Split};
use crate::fid::images_to_tensor;
use crate::rng;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRegime {
    /// Real images only.
    Model1,
    /// GAN-generated images only.
    Model2,
    /// Real and generated images.
    Model3,
}

impl TrainRegime {
    pub const ALL: [TrainRegime; 3] = [TrainRegime::Model1, TrainRegime::Model2, TrainRegime::Model3];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainRegime::Model1 => "model1",
            TrainRegime::Model2 => "model2",
            TrainRegime::Model3 => "model3",
        }
    }

    pub fn uses_real(self) -> bool {
        self != TrainRegime::Model2
    }

    pub fn uses_synthetic(self) -> bool {
        self != TrainRegime::Model1
    }
}

impl std::fmt::Display for TrainRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainRegime {
    type Err = ClassifierError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['_', ' '], "").as_str() {
            "model1" | "1" | "real" => Ok(TrainRegime::Model1),
            "model2" | "2" | "gan" => Ok(TrainRegime::Model2),
            "model3" | "3" | "real+gan" => Ok(TrainRegime::Model3),
            other => Err(ClassifierError::Config(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub regime: TrainRegime,
    /// Synthetic images per class; `None` matches the real pool size of
    /// that class.
    pub synthetic_count: Option<usize>,
    /// Only synthetic records whose `source_id` starts with this are used.
    pub synthetic_source: Option<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            regime: TrainRegime::Model1,
            synthetic_count: None,
            synthetic_source: None,
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::STANDARD,
            seed: 0,
        }
    }
}

/// Every record whose pixels were read for training, in read order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessLog {
    pub entries: Vec<(Origin, String)>,
}

impl AccessLog {
    pub fn count(&self, origin: Origin) -> usize {
        self.entries.iter().filter(|(o, _)| *o == origin).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean binary cross-entropy over the epoch's batches.
    pub loss: f64,
    /// Training accuracy of the pre-update predictions.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub epochs: Vec<EpochStats>,
}

impl TrainCurve {
    /// Columns `epoch,loss,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,accuracy\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.accuracy));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub classifier: Classifier,
    pub curve: TrainCurve,
    pub access: AccessLog,
    /// `(real, synthetic)` images used per class, malware first.
    pub pool: [(usize, usize); 2],
}

/// The records a regime trains on at one image size.
pub fn training_pool<'a>(
    manifest: &'a CorpusManifest,
    size: usize,
    cfg: &ClassifierConfig,
) -> Result<(Vec<&'a SampleRecord>, [(usize, usize); 2]), ClassifierError> {
    let mut pool = Vec::new();
    let mut counts = [(0, 0); 2];
    for (k, label) in Label::ALL.into_iter().enumerate() {
        let real: Vec<&SampleRecord> = manifest
            .select(Some(size), Some(label), None, |s| s.is_some_and(Split::is_training))
            .filter(|r| r.origin != Origin::Synthetic)
            .collect();
        if cfg.regime.uses_synthetic() {
            let want = cfg.synthetic_count.unwrap_or(real.len());
            let synth: Vec<&SampleRecord> = manifest
                .select(Some(size), Some(label), Some(Origin::Synthetic), |s| s != Some(Split::Test))
                .filter(|r| cfg.synthetic_source.as_deref().is_none_or(|p| r.source_id.starts_with(p)))
                .take(want)
                .collect();
            counts[k].1 = synth.len();
            pool.extend(synth);
        }
        if cfg.regime.uses_real() {
            counts[k].0 = real.len();
            pool.extend(real);
        }
    }
    if pool.is_empty() {
        return Err(ClassifierError::EmptyPool(format!("{} at {size}px", cfg.regime)));
    }
    Ok((pool, counts))
}

fn bce_step(
    clf: &mut Classifier,
    adam: &mut AdamState,
    x: Tensor,
    labels: &[f64],
) -> Result<(f64, usize), ClassifierError> {
    let mut tape = Tape::new();
    let pv = clf.net.params.to_tape(&mut tape, true)?;
    let xv = tape.constant(x)?;
    let logits = clf.net.forward(&mut tape, &pv, xv)?;
    let logits = tape.reshape(logits, &[labels.len()])?;
    // softplus((1 − 2y)·z) is the cross-entropy of logit z against label y.
    let signs = Rc::new(Tensor::vector(labels.iter().map(|y| 1.0 - 2.0 * y).collect()));
    let s = tape.mul_const(logits, signs)?;
    let sp = tape.softplus(s)?;
    let loss = tape.mean(sp)?;
    let correct = tape
        .value(logits)
        .data()
        .iter()
        .zip(labels)
        .filter(|(&z, &y)| (z >= 0.0) == (y == 1.0))
        .count();
    let value = tape.value(loss).item();
    let grads = tape.gradients_or_zero(loss, &pv)?;
    adam_step(&mut clf.net.params, &grads, adam)?;
    Ok((value, correct))
}

/// Minibatch Adam on labelled images, reshuffled each epoch.
pub fn train_on_images(
    spec: CnnSpec,
    images: &[GrayImage],
    labels: &[Label],
    cfg: &ClassifierConfig,
) -> Result<(Classifier, TrainCurve), ClassifierError> {
    if images.is_empty() {
        return Err(ClassifierError::EmptyPool("no images".into()));
    }
    if images.len() != labels.len() {
        return Err(ClassifierError::LengthMismatch(images.len(), labels.len()));
    }
    if let Some(bad) = images.iter().find(|i| i.width() != spec.image_size) {
        return Err(ClassifierError::MixedSizes(spec.image_size, bad.width()));
    }
    if cfg.batch_size == 0 {
        return Err(ClassifierError::Config("batch size must be ≥ 1".into()));
    }
    let mut clf = Classifier::new(spec, rng::derive(cfg.seed, 1))?;
    let mut adam = AdamState::new(&clf.net.params, cfg.adam);
    let data = images_to_tensor(images)?;
    let y: Vec<f64> = labels.iter().map(|l| if l.is_positive() { 1.0 } else { 0.0 }).collect();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, rng::streams::SHUFFLE);
    let mut curve = TrainCurve::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let (l, c) = bce_step(&mut clf, &mut adam, data.select_rows(batch), &yb)?;
            loss_sum += l * batch.len() as f64;
            correct += c;
        }
        let n = images.len() as f64;
        curve.epochs.push(EpochStats { epoch, loss: loss_sum / n, accuracy: correct as f64 / n });
    }
    Ok((clf, curve))
}

/// Trains one regime at `size`. With `out_dir`, writes `classifier.ckpt`
/// and `train_curve.csv` there.
pub fn train_classifier(
    manifest: &CorpusManifest,
    size: usize,
    cfg: &ClassifierConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, ClassifierError> {
    let (records, pool) = training_pool(manifest, size, cfg)?;
    let mut access = AccessLog::default();
    let mut images = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        access.entries.push((r.origin, r.image_path.clone()));
        images.push(manifest.load_image(r)?);
        labels.push(r.label);
    }
    let (classifier, curve) = train_on_images(CnnSpec::new(size), &images, &labels, cfg)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        classifier.save(&dir.join("classifier.ckpt"), json!({ "config": cfg, "pool": pool }))?;
        std::fs::File::create(dir.join("train_curve.csv"))?.write_all(curve.to_csv().as_bytes())?;
    }
    Ok(TrainOutcome { classifier, curve, access, pool })
}

/// Metrics over every record of the classifier's size in `split`.
pub fn evaluate(
    classifier: &Classifier,
    manifest: &CorpusManifest,
    split: Split,
    threshold: f64,
) -> Result<MetricsReport, ClassifierError> {
    let records: Vec<&SampleRecord> =
        manifest.select(Some(classifier.spec.image_size), None, None, |s| s == Some(split)).collect();
    let images = records.iter().map(|r| manifest.load_image(r)).collect::<Result<Vec<_>, _>>()?;
    let truth: Vec<Label> = records.iter().map(|r| r.label).collect();
    let predicted = classifier.predict(&images, threshold)?;
    Ok(metrics(&confusion(&predicted, &truth)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: u8) -> GrayImage {
        GrayImage::new(8, vec![v; 64]).unwrap()
    }

    #[test]
    fn zero_epochs_is_initial_model() {
        let cfg = ClassifierConfig { epochs: 0, seed: 4, ..Default::default() };
        let (c, curve) = train_on_images(CnnSpec::new(8), &[img(0), img(255)], &[Label::Benign, Label::Malware], &cfg).unwrap();
        assert!(curve.epochs.is_empty());
        assert_eq!(c, Classifier::new(CnnSpec::new(8), rng::derive(4, 1)).unwrap());
    }

    #[test]
    fn memorizes_two_images() {
        let cfg = ClassifierConfig { epochs: 200, ..Default::default() };
        let imgs = [img(10), img(240)];
        let labels = [Label::Benign, Label::Malware];
        let (c, curve) = train_on_images(CnnSpec::new(8), &imgs, &labels, &cfg).unwrap();
        assert!(curve.epochs.iter().any(|e| e.accuracy == 1.0));
        assert_eq!(c.predict(&imgs, 0.5).unwrap(), labels);
    }

    #[test]
    fn bad_pools() {
        let cfg = ClassifierConfig::default();
        assert!(matches!(train_on_images(CnnSpec::new(8), &[], &[], &cfg), Err(ClassifierError::EmptyPool(_))));
        let mixed = [img(0), GrayImage::new(16, vec![0; 256]).unwrap()];
        assert!(matches!(
            train_on_images(CnnSpec::new(8), &mixed, &[Label::Benign; 2], &cfg),
            Err(ClassifierError::MixedSizes(8, 16))
        ));
    }

    #[test]
    fn regime_names() {
        for r in TrainRegime::ALL {
            assert_eq!(r.as_str().parse::<TrainRegime>().unwrap(), r);
            assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{}\"", r.as_str()));
        }
    }

    #[test]
    fn curve_csv() {
        let c = TrainCurve { epochs: vec![EpochStats { epoch: 1, loss: 0.5, accuracy: 1.0 }] };
        assert_eq!(c.to_csv(), "epoch,loss,accuracy\n1,0.5,1\n");
    }
}
