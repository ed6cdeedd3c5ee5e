#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use malvis::corpus::{synth_corpus, Label, Split};
use malvis::fid::{embed, fit_gaussian, Extractor, Schedule};
use malvis::gan::*;

#[test]
fn wgan_critic_prefers_reals_after_warmup() {
    let cfg = GanConfig::toy(GanVariant::WganGp, 2);
    let (_, log) = train_on_tensor(GanModel::new(cfg, None).unwrap(), toy_samples(TOY_SAMPLES, 2), None, None).unwrap();
    let after: Vec<_> = log.epochs.iter().skip(10).collect();
    let good = after.iter().filter(|e| e.mean_real_score > e.mean_fake_score).count();
    assert!(good as f64 >= 0.9 * after.len() as f64, "{good}/{}", after.len());
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GanConfig { epochs: 3, checkpoint_every: 1, ..GanConfig::toy(GanVariant::WganGp, 9) };
    for run in ["a", "b"] {
        let model = GanModel::new(cfg.clone(), None).unwrap();
        train_on_tensor(model, toy_samples(200, 9), Some(&dir.path().join(run)), None).unwrap();
    }
    for name in ["epoch_00000.ckpt", "epoch_00001.ckpt", "epoch_00002.ckpt", "final.ckpt", "train_log.csv"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn training_lowers_fid_on_synthetic_class() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_corpus(110, &[32], 11, dir.path()).unwrap();
    let ext = Extractor::RandomConv { seed: 0, dim: 16 };
    let held_out: Vec<_> = manifest
        .select(Some(32), Some(Label::Malware), None, |s| s != Some(Split::GanTrain))
        .map(|r| manifest.load_image(r).unwrap())
        .collect();
    let stats = fit_gaussian(&embed(&held_out, &ext).unwrap()).unwrap();
    let mut gains = Vec::new();
    for seed in 0..3 {
        let cfg = GanConfig { epochs: 300, seed, ..Default::default() };
        let before = GanModel::new(cfg.clone(), Some(Label::Malware)).unwrap();
        let (after, _) = train_gan(&manifest, Label::Malware, &cfg, None, None).unwrap();
        let score = |m: &GanModel| score_batch(&generate(m, 200, 5).unwrap(), &stats, &ext, &Schedule::default()).unwrap();
        gains.push(score(&before) - score(&after));
    }
    gains.sort_by(f64::total_cmp);
    assert!(gains[1] > 0.0, "{gains:?}");
}

#[test]
fn too_few_class_images() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_corpus(20, &[32], 1, dir.path()).unwrap();
    let cfg = GanConfig { epochs: 1, ..Default::default() };
    assert!(matches!(train_gan(&manifest, Label::Benign, &cfg, None, None), Err(GanError::InsufficientSamples(_))));
}
