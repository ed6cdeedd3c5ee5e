#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use malvis::classifier::{evaluate, train_classifier, Classifier, ClassifierConfig, TrainRegime};
use malvis::corpus::{
    build_corpus, load_labels, perturb_manifest, read_image, split_corpus, synth_corpus_with, write_image, BuildOptions,
    CorpusManifest, EntryKind, GrayImage, Label, MixMode, Origin, PerturbKind, PerturbOptions, Split, SplitConfig,
    DEFAULT_GAN_FRACTION,
};
use malvis::fid::{embed, fid_infinity, fit_gaussian, frechet_distance, Extractor, Schedule, DEFAULT_FEATURE_DIM};
use malvis::gan::{fid_gated_generate, generate, store_generated, train_gan, Architecture, GanConfig, GanModel, GanVariant, GateConfig};
use malvis::harness::{run_experiment, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "malvis", version, about = "Malware images, GAN augmentation and FID tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Duplicate,
    Replace,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a directory of applications into a multi-size image corpus.
    Convert {
        #[arg(long)]
        input: PathBuf,
        /// CSV of `path,label` rows relative to the input directory.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [32, 64, 128, 256, 360, 400])]
        sizes: Vec<usize>,
        /// dex, manifest or raw.
        #[arg(long, default_value = "dex")]
        entry: EntryKind,
        /// Produce larger sizes by upscaling this one.
        #[arg(long)]
        native_max: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Assign GanTrain / ClassifierTrain / Test splits in a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GAN_FRACTION)]
        gan_fraction: f64,
        /// Defaults to everything outside the GAN pool.
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output manifest; defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add obfuscation-style perturbed copies of real records.
    Perturb {
        #[arg(long)]
        manifest: PathBuf,
        /// junk:N, reorder:N, xor:N, encrypt:F or remap. Defaults to all.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<PerturbKind>,
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        #[arg(long, value_enum, default_value_t = Mode::Duplicate)]
        mode: Mode,
        /// Eligible split, or `all`.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the built-in two-class fixture corpus.
    SynthCorpus {
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [32, 64])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        native_max: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one class GAN on the GanTrain images of a manifest.
    TrainGan {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        label: Label,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value = "wgan-gp")]
        variant: GanVariant,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 10)]
        checkpoint_every: usize,
        #[arg(long, default_value_t = 10.0)]
        lambda: f64,
        #[arg(long, default_value_t = 5)]
        n_critic: usize,
        #[arg(long, default_value_t = 100)]
        latent_dim: usize,
        #[arg(long, default_value_t = 8)]
        base_channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate images from a GAN checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for PGM files when no manifest is given.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Store the images as synthetic records of this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "generated")]
        tag: String,
        /// Keep generating until a batch scores FID∞ at or below the threshold.
        #[arg(long)]
        fid_gate: bool,
        /// Manifest holding the GanTrain reference images for the gate.
        #[arg(long)]
        ref_manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 90.0)]
        threshold: f64,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
        #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
        fid_dim: usize,
    },
    /// FID or FID∞ between two image sets (manifests or PGM directories).
    Fid {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        label: Option<Label>,
        /// Split filter for manifest inputs.
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        infinity: bool,
        #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        extractor_seed: u64,
    },
    /// Train a classifier under one regime.
    TrainClf {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        size: usize,
        /// model1 (real), model2 (synthetic) or model3 (both).
        #[arg(long, default_value = "model1")]
        regime: TrainRegime,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        synthetic_count: Option<usize>,
        /// Source-id prefix selecting synthetic records, e.g. `gan:wgan-gp:`.
        #[arg(long)]
        synthetic_source: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a classifier checkpoint on a split; prints a JSON report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment matrix from a TOML config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        resume: bool,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json serializes"));
}

fn load_set(path: &Path, size: Option<usize>, label: Option<Label>, split: Option<Split>) -> Result<Vec<GrayImage>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "pgm"));
        files.sort();
        return files.iter().map(|p| read_image(p).with_context(|| p.display().to_string())).collect();
    }
    let m = CorpusManifest::load(path)?;
    let images = m
        .select(size, label, None, |s| split.is_none_or(|want| s == Some(want)))
        .map(|r| m.load_image(r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(images)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert { input, labels, out, sizes, entry, native_max, seed } => {
            let opts = BuildOptions { source: entry, native_max, ..Default::default() };
            let (m, summary) = build_corpus(&input, &out, &load_labels(&labels)?, &sizes, seed, &opts)?;
            for (file, reason) in &summary.skipped {
                eprintln!("skipped {file}: {reason}");
            }
            print_json(&json!({
                "converted": summary.converted,
                "skipped": summary.skipped.len(),
                "records": m.records.len(),
                "manifest": out.join("manifest.jsonl"),
            }));
        }
        Command::Split { manifest, gan_fraction, test_fraction, seed, out } => {
            let mut m = CorpusManifest::load(&manifest)?;
            split_corpus(&mut m, &SplitConfig { gan_fraction, test_fraction, seed })?;
            m.save(out.as_deref().unwrap_or(&manifest))?;
            let count = |s| m.records.iter().filter(|r| r.split == Some(s)).count();
            print_json(&json!({
                "gan_train": count(Split::GanTrain),
                "classifier_train": count(Split::ClassifierTrain),
                "test": count(Split::Test),
            }));
        }
        Command::Perturb { manifest, kinds, fraction, mode, split, seed, out } => {
            let mut m = CorpusManifest::load(&manifest)?;
            let split = match split.as_str() {
                "all" => None,
                s => Some(s.parse()?),
            };
            let opts = PerturbOptions {
                kinds: if kinds.is_empty() { PerturbKind::all() } else { kinds },
                fraction,
                mode: match mode {
                    Mode::Duplicate => MixMode::Duplicate,
                    Mode::Replace => MixMode::Replace,
                },
                split,
                seed,
                ..Default::default()
            };
            let n = perturb_manifest(&mut m, &opts)?;
            m.save(out.as_deref().unwrap_or(&manifest))?;
            print_json(&json!({ "perturbed_records": n }));
        }
        Command::SynthCorpus { n_per_class, sizes, seed, native_max, out } => {
            let m = synth_corpus_with(n_per_class, &sizes, seed, &out, native_max)?;
            print_json(&json!({ "records": m.records.len(), "manifest": out.join("manifest.jsonl") }));
        }
        Command::TrainGan {
            manifest,
            label,
            size,
            variant,
            epochs,
            batch_size,
            checkpoint_every,
            lambda,
            n_critic,
            latent_dim,
            base_channels,
            seed,
            out,
        } => {
            let m = CorpusManifest::load(&manifest)?;
            let cfg = GanConfig {
                lambda,
                n_critic,
                batch_size,
                latent_dim,
                epochs,
                image_size: size,
                variant,
                seed,
                arch: Architecture::Conv { base_channels },
                checkpoint_every,
                ..Default::default()
            };
            let (_, log) = train_gan(&m, label, &cfg, Some(&out), None)?;
            let last = log.epochs.last();
            print_json(&json!({
                "epochs": log.epochs.len(),
                "checkpoints": log.checkpoints.iter().map(|(_, p)| p).collect::<Vec<_>>(),
                "final_mean_real_score": last.map(|e| e.mean_real_score),
                "final_mean_fake_score": last.map(|e| e.mean_fake_score),
                "train_log": out.join("train_log.csv"),
            }));
        }
        Command::Generate {
            checkpoint,
            n,
            seed,
            out,
            manifest,
            tag,
            fid_gate,
            ref_manifest,
            threshold,
            rounds,
            fid_dim,
        } => {
            let (mut model, _) = GanModel::load(&checkpoint)?;
            let label = model.class_label;
            let mut report = json!({});
            let images = if fid_gate {
                let Some(rm) = ref_manifest else { bail!("--fid-gate needs --ref-manifest") };
                let Some(label) = label else { bail!("checkpoint has no class label") };
                let rm = CorpusManifest::load(&rm)?;
                let refs: Vec<GrayImage> = rm
                    .select(Some(model.config.image_size), Some(label), Some(Origin::Real), |s| s == Some(Split::GanTrain))
                    .map(|r| rm.load_image(r))
                    .collect::<Result<_, _>>()?;
                let ext = Extractor::RandomConv { seed: 0, dim: fid_dim.min(refs.len().saturating_sub(1)).max(1) };
                let reference = embed(&refs, &ext)?;
                let cfg = GateConfig { threshold, max_rounds: rounds, batch: n, schedule: Schedule::default(), seed };
                let outcome = fid_gated_generate(&mut model, &reference, &ext, &cfg, None)?;
                report = json!({
                    "fid_inf": outcome.fid_inf,
                    "accepted": outcome.accepted,
                    "rounds": outcome.rounds,
                    "history": outcome.history,
                    "extractor": ext.id(),
                });
                outcome.images
            } else {
                generate(&model, n, seed)?
            };
            match (manifest, out) {
                (Some(mp), _) => {
                    let Some(label) = label else { bail!("checkpoint has no class label") };
                    let mut m = CorpusManifest::load(&mp)?;
                    store_generated(&mut m, &images, label, &tag)?;
                    m.save(&mp)?;
                }
                (None, Some(dir)) => {
                    std::fs::create_dir_all(&dir)?;
                    for (i, img) in images.iter().enumerate() {
                        write_image(img, &dir.join(format!("{i:05}.pgm")))?;
                    }
                }
                (None, None) => bail!("give --out or --manifest"),
            }
            report["written"] = json!(images.len());
            print_json(&report);
        }
        Command::Fid { real, fake, size, label, split, infinity, dim, extractor_seed } => {
            let a = load_set(&real, size, label, split)?;
            let b = load_set(&fake, size, label, split)?;
            if a.is_empty() || b.is_empty() {
                bail!("empty image set ({} real, {} fake)", a.len(), b.len());
            }
            let ext = Extractor::RandomConv { seed: extractor_seed, dim };
            let (ea, eb) = (embed(&a, &ext)?, embed(&b, &ext)?);
            let v = if infinity {
                let r = fid_infinity(&ea, &eb, &Schedule::default())?;
                json!({ "fid_inf": r.estimate.value, "slope": r.slope, "points": r.points })
            } else {
                json!({ "fid": frechet_distance(&fit_gaussian(&ea)?, &fit_gaussian(&eb)?)?.value })
            };
            let mut v = v;
            v["n_real"] = json!(a.len());
            v["n_fake"] = json!(b.len());
            v["extractor"] = json!(ext.id());
            print_json(&v);
        }
        Command::TrainClf {
            manifest,
            size,
            regime,
            epochs,
            batch_size,
            synthetic_count,
            synthetic_source,
            seed,
            out,
        } => {
            let m = CorpusManifest::load(&manifest)?;
            let cfg = ClassifierConfig { regime, synthetic_count, synthetic_source, epochs, batch_size, seed, ..Default::default() };
            let o = train_classifier(&m, size, &cfg, Some(&out))?;
            print_json(&json!({
                "checkpoint": out.join("classifier.ckpt"),
                "pool": o.pool,
                "final": o.curve.epochs.last(),
            }));
        }
        Command::Evaluate { checkpoint, manifest, split, threshold, out } => {
            let c = Classifier::load(&checkpoint)?;
            let m = CorpusManifest::load(&manifest)?;
            let r = evaluate(&c, &m, split, threshold)?;
            let text = serde_json::to_string_pretty(&r)?;
            if let Some(p) = out {
                std::fs::write(&p, &text)?;
            }
            println!("{text}");
        }
        Command::Experiment { config, workers, resume, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let progress = |m: &str| eprintln!("{m}");
            let opts = RunOptions { workers, resume, progress: Some(&progress) };
            let s = run_experiment(&cfg, &opts)?;
            for r in s.failed() {
                eprintln!("failed {}: {}", r.cell, r.reason.as_deref().unwrap_or(""));
            }
            print_json(&json!({
                "out_dir": s.out_dir,
                "completed": s.rows.len(),
                "failed": s.failed().count(),
                "retrained": s.retrained,
                "reused": s.reused,
                "results": s.out_dir.join("results.csv"),
            }));
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
