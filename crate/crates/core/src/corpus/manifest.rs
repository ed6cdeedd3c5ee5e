//! Sample records, the JSON-lines manifest, and corpus construction.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::archive::{extract_streams, EntryKind};
use super::image::{bytes_to_image_with, upscale, GrayImage, Resampling};
use super::pgm::{decode_pgm, encode_pgm};
use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Malware,
    Benign,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Malware, Label::Benign];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Malware => "malware",
            Label::Benign => "benign",
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Malware
    }
}

impl std::str::FromStr for Label {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "malware" | "malicious" | "1" => Ok(Label::Malware),
            "benign" | "0" => Ok(Label::Benign),
            other => Err(CorpusError::Config(format!("unknown label {other:?}"))),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    GanTrain,
    ClassifierTrain,
    Test,
}

impl std::str::FromStr for Split {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "gan_train" | "gan" => Ok(Split::GanTrain),
            "classifier_train" | "train" => Ok(Split::ClassifierTrain),
            "test" => Ok(Split::Test),
            other => Err(CorpusError::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl Split {
    /// Records a classifier may be trained on. The GAN pool doubles as the
    /// classifier-training pool.
    pub fn is_training(self) -> bool {
        matches!(self, Split::GanTrain | Split::ClassifierTrain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Synthetic,
    Perturbed,
}

/// One image on disk. Field names are the manifest's JSON keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub label: Label,
    /// `null` until the corpus is split.
    pub split: Option<Split>,
    /// Lowercase hex SHA-256 of the image file.
    pub content_hash: String,
    pub origin: Origin,
    pub source_id: String,
    pub image_size: usize,
}

/// Corpus-level metadata, stored beside the records in `<name>.meta.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub seed: u64,
    pub size_set: Vec<usize>,
    /// Unix seconds.
    pub created_at: u64,
    #[serde(default)]
    pub input_dir: Option<String>,
    #[serde(default)]
    pub entry_kind: Option<EntryKind>,
    #[serde(default)]
    pub skipped: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<SampleRecord>,
    pub meta: ManifestMeta,
    root: PathBuf,
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

impl CorpusManifest {
    pub fn new(root: impl Into<PathBuf>, meta: ManifestMeta) -> Self {
        Self { records: Vec::new(), meta, root: root.into() }
    }

    /// Directory that record paths are relative to.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    /// Records as JSON lines, in stored order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes records to `path` and metadata to the sibling `.meta.json`.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        }
        std::fs::write(path, self.to_jsonl()).map_err(|e| CorpusError::io(path, e))?;
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        let mp = meta_path(path);
        std::fs::write(&mp, meta).map_err(|e| CorpusError::io(&mp, e))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: SampleRecord = serde_json::from_str(line)
                .map_err(|e| CorpusError::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        let mp = meta_path(path);
        let meta = match std::fs::read_to_string(&mp) {
            Ok(s) => serde_json::from_str(&s).map_err(|e| CorpusError::Manifest(e.to_string()))?,
            Err(_) => ManifestMeta::default(),
        };
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { records, meta, root })
    }

    /// Reads a record's image, checking it against the stored hash.
    pub fn load_image(&self, record: &SampleRecord) -> Result<GrayImage, CorpusError> {
        let path = self.resolve(record);
        let bytes = std::fs::read(&path).map_err(|e| CorpusError::io(&path, e))?;
        if content_hash(&bytes) != record.content_hash {
            return Err(CorpusError::Manifest(format!("hash mismatch for {}", record.image_path)));
        }
        let img = decode_pgm(&bytes)?;
        if img.width() != record.image_size {
            return Err(CorpusError::Manifest(format!(
                "{} is {}px, record says {}",
                record.image_path,
                img.width(),
                record.image_size
            )));
        }
        Ok(img)
    }

    /// Writes `image` under the manifest root and returns its record.
    pub fn store_image(
        &self,
        image: &GrayImage,
        rel_path: &str,
        label: Label,
        split: Option<Split>,
        origin: Origin,
        source_id: &str,
    ) -> Result<SampleRecord, CorpusError> {
        let path = self.root.join(rel_path);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        }
        let bytes = encode_pgm(image);
        let mut f = std::fs::File::create(&path).map_err(|e| CorpusError::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| CorpusError::io(&path, e))?;
        Ok(SampleRecord {
            image_path: rel_path.to_string(),
            label,
            split,
            content_hash: content_hash(&bytes),
            origin,
            source_id: source_id.to_string(),
            image_size: image.width(),
        })
    }

    pub fn select<'a>(
        &'a self,
        size: Option<usize>,
        label: Option<Label>,
        origin: Option<Origin>,
        split: impl Fn(Option<Split>) -> bool + 'a,
    ) -> impl Iterator<Item = &'a SampleRecord> + 'a {
        self.records.iter().filter(move |r| {
            size.is_none_or(|s| r.image_size == s)
                && label.is_none_or(|l| r.label == l)
                && origin.is_none_or(|o| r.origin == o)
                && split(r.split)
        })
    }

    /// Checks the manifest invariants: unique real hashes per size, no
    /// synthetic test records.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.origin == Origin::Real && !seen.insert((&r.content_hash, r.image_size)) {
                return Err(CorpusError::Manifest(format!("duplicate real image {}", r.image_path)));
            }
            if r.origin == Origin::Synthetic && r.split == Some(Split::Test) {
                return Err(CorpusError::Manifest(format!("synthetic record {} in test split", r.image_path)));
            }
        }
        Ok(())
    }
}

/// Reads a label file: one `relative/path,label` per line, `#` comments,
/// optional header row.
pub fn load_labels(path: &Path) -> Result<BTreeMap<String, Label>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, label) = line
            .rsplit_once([',', '\t'])
            .ok_or_else(|| CorpusError::Config(format!("{}:{}: expected path,label", path.display(), i + 1)))?;
        match label.parse() {
            Ok(l) => {
                map.insert(file.trim().to_string(), l);
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(map)
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub source: EntryKind,
    pub resampling: Resampling,
    /// Sizes above this are produced by upscaling the image at this size.
    pub native_max: Option<usize>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { source: EntryKind::DexCode, resampling: Resampling::Linear, native_max: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildSummary {
    pub converted: usize,
    /// `(file, reason)` for each input that produced no records.
    pub skipped: Vec<(String, String)>,
}

fn walk(dir: &Path, base: &Path, out: &mut Vec<String>) -> Result<(), CorpusError> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CorpusError::io(dir, e))?
        .collect::<Result<_, _>>()
        .map_err(|e| CorpusError::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk(&p, base, out)?;
        } else if let Ok(rel) = p.strip_prefix(base) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

pub(crate) fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// Sizes to convert natively and, for each upscaled size, its native source.
fn plan_sizes(size_set: &[usize], native_max: Option<usize>) -> Vec<(usize, Option<usize>)> {
    size_set
        .iter()
        .map(|&s| match native_max {
            Some(m) if s > m => (s, Some(m)),
            _ => (s, None),
        })
        .collect()
}

/// Converts every labeled file under `input_dir` to one image per size and
/// writes images plus `manifest.jsonl` under `out_dir`.
///
/// Per-file failures are recorded in the summary and skipped. Output order
/// is by relative path then size, so reruns produce identical manifests.
pub fn build_corpus(
    input_dir: &Path,
    out_dir: &Path,
    labels: &BTreeMap<String, Label>,
    size_set: &[usize],
    seed: u64,
    opts: &BuildOptions,
) -> Result<(CorpusManifest, BuildSummary), CorpusError> {
    if size_set.is_empty() || size_set.contains(&0) {
        return Err(CorpusError::Config("size set must be non-empty and positive".into()));
    }
    let mut files = Vec::new();
    walk(input_dir, input_dir, &mut files)?;
    let meta = ManifestMeta {
        seed,
        size_set: size_set.to_vec(),
        created_at: now_unix(),
        input_dir: Some(input_dir.display().to_string()),
        entry_kind: Some(opts.source),
        skipped: Vec::new(),
    };
    let mut manifest = CorpusManifest::new(out_dir, meta);
    let mut summary = BuildSummary::default();
    let mut seen_streams = HashSet::new();
    let mut seen_images = HashSet::new();
    let plan = plan_sizes(size_set, opts.native_max);

    for rel in &files {
        let Some(&label) = labels.get(rel) else {
            summary.skipped.push((rel.clone(), "unlabeled".into()));
            continue;
        };
        let path = input_dir.join(rel);
        let result = (|| -> Result<Vec<SampleRecord>, CorpusError> {
            let bytes = std::fs::read(&path).map_err(|e| CorpusError::io(&path, e))?;
            let streams = extract_streams(&bytes, opts.source, rel)?;
            let stream = &streams[0];
            if !seen_streams.insert(content_hash(stream.bytes())) {
                return Err(CorpusError::Manifest("duplicate byte stream".into()));
            }
            let mut records = Vec::new();
            for &(size, base) in &plan {
                let img = match base {
                    None => bytes_to_image_with(stream.bytes(), size, opts.resampling)?,
                    Some(b) => upscale(&bytes_to_image_with(stream.bytes(), b, opts.resampling)?, size)?,
                };
                let rel_img = format!("images/{size}/{}/{}.pgm", label.as_str(), sanitize(rel));
                let rec = manifest.store_image(&img, &rel_img, label, None, Origin::Real, stream.source_id())?;
                records.push(rec);
            }
            Ok(records)
        })();
        match result {
            Ok(records) => {
                let dup = records.iter().any(|r| seen_images.contains(&(r.content_hash.clone(), r.image_size)));
                if dup {
                    for r in &records {
                        let _ = std::fs::remove_file(manifest.resolve(r));
                    }
                    summary.skipped.push((rel.clone(), "duplicate image".into()));
                    continue;
                }
                for r in &records {
                    seen_images.insert((r.content_hash.clone(), r.image_size));
                }
                summary.converted += 1;
                manifest.records.extend(records);
            }
            Err(e) => summary.skipped.push((rel.clone(), e.to_string())),
        }
    }
    for rel in labels.keys() {
        if !files.contains(rel) {
            summary.skipped.push((rel.clone(), "listed in labels but not found".into()));
        }
    }
    manifest.meta.skipped = summary.skipped.clone();
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok((manifest, summary))
}
