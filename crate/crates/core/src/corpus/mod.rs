//! Application archives to labeled grayscale image datasets.

mod archive;
mod image;
mod manifest;
mod perturb;
mod pgm;
mod split;
mod synth;

pub use archive::{build_zip, extract_streams, ByteStream, EntryKind};
pub use image::{bytes_to_image, bytes_to_image_with, resample, upscale, GrayImage, Resampling};
pub use manifest::{
    build_corpus, content_hash, load_labels, BuildOptions, BuildSummary, CorpusManifest, Label, ManifestMeta, Origin,
    SampleRecord, Split,
};
pub use perturb::{perturb_manifest, perturb_stream, resolve_stream, MixMode, PerturbKind, PerturbOptions};
pub use pgm::{decode_pgm, encode_pgm, read_image, write_image};
pub use split::{split_corpus, SplitConfig, DEFAULT_GAN_FRACTION};
pub use synth::{synth_corpus, synth_corpus_with, synth_stream, SYNTH_MIN_PER_CLASS};

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed archive: {0}")]
    MalformedArchive(String),
    #[error("no archive entry matches {0}")]
    NoMatchingEntry(String),
    #[error("empty byte stream")]
    EmptyStream,
    #[error("format violation: {0}")]
    FormatViolation(String),
    #[error("I/O failure on {path}: {source}")]
    IoFailure { path: String, source: std::io::Error },
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::IoFailure { path: path.display().to_string(), source }
    }
}
