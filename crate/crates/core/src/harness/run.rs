use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::report::{self, FidSeriesRow};
use super::{CorpusSource, ExperimentConfig, HarnessError, ResultRow};
use crate::classifier::{evaluate, train_classifier, ClassifierConfig, MetricsReport, TrainRegime, DEFAULT_THRESHOLD};
use crate::corpus::{
    build_corpus, load_labels, split_corpus, synth_corpus_with, upscale, BuildOptions, CorpusManifest, Label, Origin,
    SampleRecord, Split, SplitConfig,
};
use crate::fid::{embed, fid_series, fit_gaussian, images_to_tensor, Extractor, Schedule};
use crate::gan::{
    fid_gated_generate, generate, score_batch, store_generated, train_gan, train_on_tensor, Architecture, GanConfig,
    GanError, GanModel, GanVariant, GateConfig, RoundHook,
};
use crate::rng;
use crate::tensor::AdamConfig;

const HASH_VERSION: u32 = 1;

/// One point of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub image_size: usize,
    pub regime: TrainRegime,
    /// `None` for regimes without synthetic data.
    pub gan_variant: Option<GanVariant>,
    pub seed: u64,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.image_size, self.regime)?;
        if let Some(v) = self.gan_variant {
            write!(f, "/{v}")?;
        }
        write!(f, "/s{}", self.seed)
    }
}

/// Cells in run order: size, then seed, then regime, then variant.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &image_size in &cfg.sizes {
        for &seed in &cfg.seeds {
            for &regime in &cfg.regimes {
                if regime.uses_synthetic() {
                    for &v in &cfg.gan_variants {
                        out.push(Cell { image_size, regime, gan_variant: Some(v), seed });
                    }
                } else {
                    out.push(Cell { image_size, regime, gan_variant: None, seed });
                }
            }
        }
    }
    out
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_value(v: &Value) -> String {
    sha_hex(serde_json::to_string(v).expect("json serializes").as_bytes())[..16].to_string()
}

fn gan_size(cfg: &ExperimentConfig, size: usize) -> usize {
    size.min(cfg.gan_max_size)
}

fn gan_config(cfg: &ExperimentConfig, variant: GanVariant, size: usize, seed: u64) -> GanConfig {
    let adam = match variant {
        GanVariant::WganGp => AdamConfig::GAN,
        GanVariant::Dcgan => AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, ..AdamConfig::GAN },
    };
    GanConfig {
        batch_size: cfg.gan_batch_size,
        adam,
        latent_dim: cfg.gan_latent_dim,
        epochs: cfg.gan_epochs,
        image_size: size,
        variant,
        seed,
        arch: Architecture::Conv { base_channels: cfg.gan_base_channels },
        checkpoint_every: cfg.gan_checkpoint_every,
        ..Default::default()
    }
}

fn corpus_key(cfg: &ExperimentConfig) -> Value {
    json!({ "corpus": cfg.corpus, "native_max": cfg.native_max })
}

fn gan_key(cfg: &ExperimentConfig, variant: GanVariant, size: usize, seed: u64) -> Value {
    json!({
        "version": HASH_VERSION,
        "corpus": corpus_key(cfg),
        "gan_fraction": cfg.gan_fraction,
        "seed": seed,
        "gan": gan_config(cfg, variant, size, seed),
        "gate": [cfg.fid_threshold, cfg.gate_rounds as f64, cfg.gate_batch as f64, cfg.gate_extra_epochs as f64],
        "fid": [cfg.fid_dim as u64, cfg.fid_extractor_seed],
        "series_batch": cfg.series_batch,
    })
}

fn classifier_config(cfg: &ExperimentConfig, cell: &Cell, synthetic_source: Option<String>) -> ClassifierConfig {
    ClassifierConfig {
        regime: cell.regime,
        synthetic_count: cfg.synthetic_count,
        synthetic_source,
        epochs: cfg.clf_epochs,
        batch_size: cfg.clf_batch_size,
        adam: AdamConfig::STANDARD,
        seed: cell.seed,
    }
}

/// A 16-hex digest of every parameter that influences the cell's outputs.
pub fn cell_hash(cfg: &ExperimentConfig, cell: &Cell) -> String {
    let gan = cell.gan_variant.map(|v| hash_value(&gan_key(cfg, v, gan_size(cfg, cell.image_size), cell.seed)));
    hash_value(&json!({
        "version": HASH_VERSION,
        "cell": cell,
        "corpus": corpus_key(cfg),
        "gan_fraction": cfg.gan_fraction,
        "gan": gan,
        "classifier": classifier_config(cfg, cell, None),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// How the FID gate went for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub label: Label,
    pub fid_inf: f64,
    pub accepted: bool,
    pub rounds: usize,
    pub history: Vec<f64>,
    /// Round whose batch was kept.
    pub chosen_round: usize,
    pub extractor: String,
}

/// The per-cell JSON report under `cells/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub hash: String,
    pub cell: Cell,
    pub status: CellStatus,
    pub reason: Option<String>,
    pub report: Option<MetricsReport>,
    pub fid_inf: Option<f64>,
    pub gates: Vec<GateSummary>,
    /// `(real, synthetic)` training images per class, malware first.
    pub pool: Option<[(usize, usize); 2]>,
    /// GAN stage directory relative to the run directory.
    pub gan_dir: Option<String>,
    pub wall_time_s: f64,
    /// sha256 of every checkpoint and log the cell produced or used.
    pub artifacts: BTreeMap<String, String>,
}

impl CellRecord {
    pub fn row(&self) -> Option<ResultRow> {
        let report = self.report.as_ref().filter(|_| self.status == CellStatus::Ok)?;
        Some(ResultRow::new(&self.cell, report, self.fid_inf, self.wall_time_s))
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Overrides the config's worker count.
    pub workers: Option<usize>,
    /// Reuse completed cells and GAN stages found in the run directory.
    pub resume: bool,
    pub progress: Option<&'a (dyn Fn(&str) + Sync)>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub records: Vec<CellRecord>,
    /// One per completed cell, in run order.
    pub rows: Vec<ResultRow>,
    pub retrained: usize,
    pub reused: usize,
}

impl RunSummary {
    pub fn failed(&self) -> impl Iterator<Item = &CellRecord> {
        self.records.iter().filter(|r| r.status == CellStatus::Failed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GanStage {
    key: String,
    tag: String,
    dir: String,
    gates: Vec<GateSummary>,
    series: Vec<FidSeriesRow>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    run_dir: PathBuf,
    corpus_dir: PathBuf,
    resume: bool,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    fresh: Mutex<HashSet<String>>,
    progress: Option<&'a (dyn Fn(&str) + Sync)>,
}

impl Ctx<'_> {
    fn lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.locks.lock().expect("lock table").entry(key.to_string()).or_default().clone()
    }

    fn say(&self, msg: &str) {
        if let Some(p) = self.progress {
            p(msg);
        }
    }

    fn reusable(&self, key: &str) -> bool {
        self.resume || self.fresh.lock().expect("fresh set").contains(key)
    }

    fn split_path(&self, seed: u64) -> PathBuf {
        self.corpus_dir.join(format!("split_s{seed}.jsonl"))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.run_dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn prepare_corpus(ctx: &Ctx) -> Result<(), HarnessError> {
    let cfg = ctx.cfg;
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let key = hash_value(&json!({ "corpus": corpus_key(cfg), "sizes": sizes }));
    let manifest_path = ctx.corpus_dir.join("manifest.jsonl");
    let key_path = ctx.corpus_dir.join("source.key");
    let current = std::fs::read_to_string(&key_path).ok();
    if !(ctx.resume && current.as_deref() == Some(key.as_str()) && manifest_path.exists()) {
        ctx.say("building corpus");
        match &cfg.corpus {
            CorpusSource::Synth { n_per_class, seed } => {
                synth_corpus_with(*n_per_class, &sizes, *seed, &ctx.corpus_dir, cfg.native_max)?;
            }
            CorpusSource::Dir { input_dir, labels, entry } => {
                let opts = BuildOptions { source: *entry, native_max: cfg.native_max, ..Default::default() };
                let (m, summary) = build_corpus(input_dir, &ctx.corpus_dir, &load_labels(labels)?, &sizes, 0, &opts)?;
                if summary.converted == 0 {
                    return Err(HarnessError::Config(format!("no file in {} converted", input_dir.display())));
                }
                m.save(&manifest_path)?;
            }
        }
        write_atomic(&key_path, key.as_bytes())?;
    }
    for &seed in &cfg.seeds {
        let mut m = CorpusManifest::load(&manifest_path)?;
        split_corpus(&mut m, &SplitConfig::new(cfg.gan_fraction, seed))?;
        m.save(&ctx.split_path(seed))?;
    }
    Ok(())
}

fn reference_images(manifest: &CorpusManifest, size: usize, label: Label) -> Result<Vec<crate::corpus::GrayImage>, HarnessError> {
    manifest
        .select(Some(size), Some(label), Some(Origin::Real), |s| s == Some(Split::GanTrain))
        .map(|r| manifest.load_image(r).map_err(HarnessError::from))
        .collect()
}

fn gate_checkpoint(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("gate_round_{round}.ckpt"))
}

/// Trains, tracks and gates one GAN per class, or loads a finished stage.
fn gan_stage(ctx: &Ctx, variant: GanVariant, size: usize, seed: u64) -> Result<GanStage, HarnessError> {
    let cfg = ctx.cfg;
    let key = hash_value(&gan_key(cfg, variant, size, seed));
    let dir = ctx.run_dir.join("gan_logs").join(format!("{variant}_{size}_s{seed}_{}", &key[..8]));
    let stage_path = dir.join("stage.json");
    let lock = ctx.lock(&key);
    let _guard = lock.lock().expect("stage lock");
    if ctx.reusable(&key) {
        if let Ok(text) = std::fs::read_to_string(&stage_path) {
            if let Ok(stage) = serde_json::from_str::<GanStage>(&text) {
                if stage.key == key {
                    return Ok(stage);
                }
            }
        }
    }
    let manifest = CorpusManifest::load(&ctx.split_path(seed))?;
    let mut gates = Vec::new();
    let mut series = Vec::new();
    for (k, label) in Label::ALL.into_iter().enumerate() {
        ctx.say(&format!("training {variant} {label} at {size}px, seed {seed}"));
        let ldir = dir.join(label.as_str());
        let gcfg = gan_config(cfg, variant, size, rng::derive(seed, k as u64 + 1));
        let refs = reference_images(&manifest, size, label)?;
        let smallest_fake = cfg.series_batch.min(cfg.gate_batch).div_ceil(4);
        let dim = cfg.fid_dim.min(refs.len().saturating_sub(1)).min(smallest_fake.saturating_sub(1));
        if dim == 0 {
            return Err(GanError::InsufficientSamples(format!("{} {label} reference images", refs.len())).into());
        }
        let ext = Extractor::RandomConv { seed: cfg.fid_extractor_seed, dim };
        let reference = embed(&refs, &ext)?;
        let stats = fit_gaussian(&reference)?;
        let schedule = Schedule::default();

        let mut values = Vec::new();
        let probe_seed = rng::derive(seed, 7);
        let mut probe = |m: &GanModel, epoch: usize| -> Result<Option<f64>, GanError> {
            let v = score_batch(&generate(m, cfg.series_batch, probe_seed)?, &stats, &ext, &schedule)?;
            values.push((epoch, v));
            Ok(Some(v))
        };
        let (mut model, _) = train_gan(&manifest, label, &gcfg, Some(&ldir), Some(&mut probe))?;
        for p in fid_series(&values).points {
            series.push(FidSeriesRow {
                gan_variant: variant,
                image_size: size,
                seed,
                label,
                epoch: p.epoch,
                fid_inf: p.fid_inf,
                is_anomaly: p.is_anomaly,
            });
        }

        model.save(&gate_checkpoint(&ldir, 0), cfg.gan_epochs)?;
        let data = images_to_tensor(&refs)?;
        let extra = cfg.gate_extra_epochs;
        let mut hook = |m: &mut GanModel, round: usize| -> Result<(), GanError> {
            let base = m.config.clone();
            let more = GanConfig { epochs: extra, checkpoint_every: 0, seed: rng::derive(base.seed, 100 + round as u64), ..base.clone() };
            let (mut trained, _) = train_on_tensor(GanModel { config: more, ..m.clone() }, data.clone(), None, None)?;
            trained.config = base;
            *m = trained;
            m.save(&gate_checkpoint(&ldir, round + 1), cfg.gan_epochs + (round + 1) * extra)
        };
        let gate_cfg = GateConfig {
            threshold: cfg.fid_threshold,
            max_rounds: cfg.gate_rounds,
            batch: cfg.gate_batch,
            schedule: Schedule::default(),
            seed: rng::derive(seed, 200 + k as u64),
        };
        let hook_ref: Option<&mut RoundHook<'_>> = if extra > 0 { Some(&mut hook) } else { None };
        let out = fid_gated_generate(&mut model, &reference, &ext, &gate_cfg, hook_ref)?;
        let chosen_round = if out.accepted {
            out.rounds - 1
        } else {
            out.history.iter().position(|&f| f == out.fid_inf).unwrap_or(0)
        };
        ctx.say(&format!(
            "gate {variant} {label} at {size}px: FID∞ {:.2} {}",
            out.fid_inf,
            if out.accepted { "accepted" } else { "rejected, keeping best batch" }
        ));
        gates.push(GateSummary {
            label,
            fid_inf: out.fid_inf,
            accepted: out.accepted,
            rounds: out.rounds,
            history: out.history,
            chosen_round,
            extractor: ext.id(),
        });
    }
    let stage = GanStage {
        key: key.clone(),
        tag: format!("{variant}-s{seed}-{}", &key[..8]),
        dir: ctx.rel(&dir),
        gates,
        series,
    };
    write_atomic(&stage_path, serde_json::to_string_pretty(&stage)?.as_bytes())?;
    ctx.fresh.lock().expect("fresh set").insert(key);
    Ok(stage)
}

/// The kept gate batch of each class, truncated to `need` and resized to
/// `size`, stored in the corpus. Cached per stage and size.
fn synthetic_records(
    ctx: &Ctx,
    stage: &GanStage,
    size: usize,
    seed: u64,
    need: [usize; 2],
) -> Result<Vec<SampleRecord>, HarnessError> {
    let dir = ctx.run_dir.join(&stage.dir);
    let path = dir.join(format!("synthetic_{size}_{}_{}.jsonl", need[0], need[1]));
    let lock = ctx.lock(&stage.key);
    let _guard = lock.lock().expect("stage lock");
    if ctx.reusable(&format!("{}:{size}", stage.key)) && path.exists() {
        let mut m = CorpusManifest::load(&path)?;
        m.set_root(&ctx.corpus_dir);
        if m.records.iter().all(|r| m.resolve(r).exists()) {
            return Ok(m.records);
        }
    }
    let mut m = CorpusManifest::new(&ctx.corpus_dir, Default::default());
    for (k, gate) in stage.gates.iter().enumerate() {
        let round = if ctx.cfg.gate_extra_epochs > 0 { gate.chosen_round } else { 0 };
        let (model, _) = GanModel::load(&gate_checkpoint(&dir.join(gate.label.as_str()), round))?;
        let n = need[k].min(ctx.cfg.gate_batch);
        let batch_seed = rng::derive(rng::derive(seed, 200 + k as u64), gate.chosen_round as u64);
        let mut images = generate(&model, n, batch_seed)?;
        if model.config.image_size != size {
            images = images.iter().map(|i| upscale(i, size)).collect::<Result<_, _>>()?;
        }
        store_generated(&mut m, &images, gate.label, &stage.tag)?;
    }
    write_atomic(&path, m.to_jsonl().as_bytes())?;
    ctx.fresh.lock().expect("fresh set").insert(format!("{}:{size}", stage.key));
    Ok(m.records)
}

fn file_hash(path: &Path) -> Result<String, HarnessError> {
    Ok(sha_hex(&std::fs::read(path)?))
}

fn run_cell(ctx: &Ctx, cell: &Cell, hash: &str) -> Result<CellRecord, HarnessError> {
    let cfg = ctx.cfg;
    let start = Instant::now();
    let check_budget = || match cfg.cell_budget_s {
        Some(b) if start.elapsed().as_secs_f64() > b => Err(HarnessError::Budget(b)),
        _ => Ok(()),
    };
    let mut manifest = CorpusManifest::load(&ctx.split_path(cell.seed))?;
    let mut artifacts = BTreeMap::new();
    let (mut fid_inf, mut gates, mut gan_dir, mut source) = (None, Vec::new(), None, None);
    if let Some(variant) = cell.gan_variant {
        let stage = gan_stage(ctx, variant, gan_size(cfg, cell.image_size), cell.seed)?;
        check_budget()?;
        let mut need = [0; 2];
        for (k, label) in Label::ALL.into_iter().enumerate() {
            need[k] = cfg.synthetic_count.unwrap_or_else(|| {
                manifest
                    .select(Some(cell.image_size), Some(label), None, |s| s.is_some_and(Split::is_training))
                    .filter(|r| r.origin != Origin::Synthetic)
                    .count()
            });
        }
        manifest.records.extend(synthetic_records(ctx, &stage, cell.image_size, cell.seed, need)?);
        for g in &stage.gates {
            let p = ctx.run_dir.join(&stage.dir).join(g.label.as_str()).join("final.ckpt");
            artifacts.insert(ctx.rel(&p), file_hash(&p)?);
        }
        fid_inf = Some(stage.gates.iter().map(|g| g.fid_inf).sum::<f64>() / stage.gates.len() as f64);
        source = Some(format!("gan:{}:", stage.tag));
        gates = stage.gates;
        gan_dir = Some(stage.dir);
    }
    ctx.say(&format!("training classifier for {cell}"));
    let cdir = ctx.run_dir.join("classifiers").join(hash);
    let out = train_classifier(&manifest, cell.image_size, &classifier_config(cfg, cell, source), Some(&cdir))?;
    check_budget()?;
    for name in ["classifier.ckpt", "train_curve.csv"] {
        let p = cdir.join(name);
        artifacts.insert(ctx.rel(&p), file_hash(&p)?);
    }
    let report = evaluate(&out.classifier, &manifest, Split::Test, DEFAULT_THRESHOLD)?;
    Ok(CellRecord {
        hash: hash.to_string(),
        cell: *cell,
        status: CellStatus::Ok,
        reason: None,
        report: Some(report),
        fid_inf,
        gates,
        pool: Some(out.pool),
        gan_dir,
        wall_time_s: start.elapsed().as_secs_f64(),
        artifacts,
    })
}

fn load_record(path: &Path) -> Option<CellRecord> {
    let rec: CellRecord = serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()?;
    (rec.status == CellStatus::Ok).then_some(rec)
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            if p != root.join("corpus").join("images") {
                list_files(root, &p, out)?;
            }
        } else {
            out.push(p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Runs every cell of the matrix under `cfg.out_dir`.
///
/// Writes `results.csv`, `cells/{hash}.json`, `timings.csv`,
/// `fid_series.csv`, `gan_logs/`, `classifiers/`, `tables.md`, `plots/`,
/// `variant_comparison.{csv,md}` when both variants ran Model 2, and
/// `run_manifest.json` listing every artifact. Failed cells are recorded
/// and skipped; the run errors only when every cell fails.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let run_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&run_dir)?;
    write_atomic(&run_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let ctx = Ctx {
        cfg,
        corpus_dir: run_dir.join("corpus"),
        run_dir: run_dir.clone(),
        resume: opts.resume,
        locks: Mutex::default(),
        fresh: Mutex::default(),
        progress: opts.progress,
    };
    prepare_corpus(&ctx)?;

    let all = cells(cfg);
    let hashes: Vec<String> = all.iter().map(|c| cell_hash(cfg, c)).collect();
    let cell_path = |h: &str| run_dir.join("cells").join(format!("{h}.json"));
    let mut records: Vec<Option<CellRecord>> = vec![None; all.len()];
    let mut pending = Vec::new();
    for (i, h) in hashes.iter().enumerate() {
        match load_record(&cell_path(h)).filter(|r| opts.resume && r.hash == *h) {
            Some(r) => records[i] = Some(r),
            None => pending.push(i),
        }
    }
    let reused = all.len() - pending.len();
    ctx.say(&format!("{} cells, {reused} already complete", all.len()));

    let done = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let workers = opts.workers.unwrap_or(cfg.workers).max(1).min(pending.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(j) else { break };
                let (cell, hash) = (&all[i], &hashes[i]);
                let start = Instant::now();
                let rec = run_cell(&ctx, cell, hash).unwrap_or_else(|e| CellRecord {
                    hash: hash.clone(),
                    cell: *cell,
                    status: CellStatus::Failed,
                    reason: Some(e.to_string()),
                    report: None,
                    fid_inf: None,
                    gates: Vec::new(),
                    pool: None,
                    gan_dir: None,
                    wall_time_s: start.elapsed().as_secs_f64(),
                    artifacts: BTreeMap::new(),
                });
                let msg = match (&rec.status, rec.report.as_ref().and_then(|r| r.f1)) {
                    (CellStatus::Ok, f1) => format!("cell {cell} done, f1 {f1:?}, {:.1} s", rec.wall_time_s),
                    (CellStatus::Failed, _) => format!("cell {cell} failed: {}", rec.reason.as_deref().unwrap_or("")),
                };
                ctx.say(&msg);
                let json = serde_json::to_string_pretty(&rec).expect("record serializes");
                if let Err(e) = write_atomic(&cell_path(hash), json.as_bytes()) {
                    ctx.say(&format!("could not write cell report for {cell}: {e}"));
                }
                done.lock().expect("results").push((i, rec));
            });
        }
    });
    for (i, rec) in done.into_inner().expect("results") {
        records[i] = Some(rec);
    }
    let records: Vec<CellRecord> = records.into_iter().map(|r| r.expect("every cell has a record")).collect();
    let rows: Vec<ResultRow> = records.iter().filter_map(CellRecord::row).collect();

    write_atomic(&run_dir.join("results.csv"), report::results_csv(&rows).as_bytes())?;
    let mut timings = String::from("cell,hash,status,wall_time_s\n");
    for r in &records {
        let status = if r.status == CellStatus::Ok { "ok" } else { "failed" };
        timings.push_str(&format!("{},{},{status},{:.3}\n", r.cell, r.hash, r.wall_time_s));
    }
    write_atomic(&run_dir.join("timings.csv"), timings.as_bytes())?;

    let mut series = Vec::new();
    let mut seen = HashSet::new();
    for dir in records.iter().filter_map(|r| r.gan_dir.as_ref()) {
        if seen.insert(dir.clone()) {
            let text = std::fs::read_to_string(run_dir.join(dir).join("stage.json"))?;
            let stage: GanStage = serde_json::from_str(&text)?;
            series.extend(stage.series);
        }
    }
    write_atomic(&run_dir.join("fid_series.csv"), report::fid_series_csv(&series).as_bytes())?;
    write_atomic(&run_dir.join("tables.md"), report::tables_markdown(&rows).as_bytes())?;
    if let Ok(cmp) = report::compare_variants(&rows) {
        write_atomic(&run_dir.join("variant_comparison.csv"), cmp.to_csv().as_bytes())?;
        write_atomic(&run_dir.join("variant_comparison.md"), cmp.summary().as_bytes())?;
    }
    report::emit_plot_data(&rows, &series, &run_dir.join("plots"))?;

    let failed = records.iter().filter(|r| r.status == CellStatus::Failed).count();
    let mut files = Vec::new();
    list_files(&run_dir, &run_dir, &mut files)?;
    files.retain(|f| f != "run_manifest.json");
    let manifest = json!({
        "cells": records.len(),
        "completed": records.len() - failed,
        "failed": failed,
        "cell_reports": hashes.iter().map(|h| format!("cells/{h}.json")).collect::<Vec<_>>(),
        "artifacts": files,
    });
    write_atomic(&run_dir.join("run_manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    if failed == records.len() && !records.is_empty() {
        return Err(HarnessError::AllCellsFailed(failed));
    }
    Ok(RunSummary { out_dir: run_dir, records, rows, retrained: pending.len(), reused })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig {
            sizes: vec![32, 64],
            regimes: TrainRegime::ALL.to_vec(),
            seeds: vec![0, 1],
            ..Default::default()
        }
    }

    #[test]
    fn matrix_has_one_cell_per_variant_for_synthetic_regimes() {
        let c = cells(&cfg());
        assert_eq!(c.len(), 2 * 2 * (1 + 2 + 2));
        assert_eq!(c[0], Cell { image_size: 32, regime: TrainRegime::Model1, gan_variant: None, seed: 0 });
        assert_eq!(c[1].gan_variant, Some(GanVariant::WganGp));
        assert_eq!(c[0].to_string(), "32/model1/s0");
        assert_eq!(c[1].to_string(), "32/model2/wgan-gp/s0");
    }

    #[test]
    fn hash_tracks_influencing_parameters_only() {
        let base = cfg();
        let c = cells(&base);
        let h: HashSet<String> = c.iter().map(|x| cell_hash(&base, x)).collect();
        assert_eq!(h.len(), c.len());

        let model1 = c[0];
        let model2 = c[1];
        let more_gan = ExperimentConfig { gan_epochs: 7, ..base.clone() };
        assert_eq!(cell_hash(&base, &model1), cell_hash(&more_gan, &model1));
        assert_ne!(cell_hash(&base, &model2), cell_hash(&more_gan, &model2));
        let elsewhere = ExperimentConfig { out_dir: "x".into(), workers: 4, cell_budget_s: Some(1.0), ..base.clone() };
        assert_eq!(cell_hash(&base, &model2), cell_hash(&elsewhere, &model2));
        let clf = ExperimentConfig { clf_epochs: 3, ..base.clone() };
        assert_ne!(cell_hash(&base, &model1), cell_hash(&clf, &model1));
        let other_corpus = ExperimentConfig { corpus: CorpusSource::Synth { n_per_class: 50, seed: 0 }, ..base.clone() };
        assert_ne!(cell_hash(&base, &model1), cell_hash(&other_corpus, &model1));
    }

    #[test]
    fn large_sizes_share_the_capped_gan() {
        let base = ExperimentConfig { sizes: vec![128, 256, 400], ..cfg() };
        assert_eq!(gan_size(&base, 400), 128);
        assert_eq!(gan_size(&base, 64), 64);
    }
}
