//! Pulling byte streams out of APK/ZIP containers.

use std::io::{Cursor, Read};

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Which part of an application the stream was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// Every root-level `classes*.dex`, concatenated.
    DexCode,
    /// The `AndroidManifest.xml` entry.
    Manifest,
    /// The whole input file, not parsed as an archive.
    Raw,
}

impl std::str::FromStr for EntryKind {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "dex_code" | "dex" => Ok(EntryKind::DexCode),
            "manifest" => Ok(EntryKind::Manifest),
            "raw" => Ok(EntryKind::Raw),
            other => Err(CorpusError::Config(format!("unknown entry kind {other:?}"))),
        }
    }
}

/// Raw bytes plus where they came from. Never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteStream {
    bytes: Vec<u8>,
    source_id: String,
    entry_kind: EntryKind,
}

impl ByteStream {
    pub fn new(bytes: Vec<u8>, source_id: String, entry_kind: EntryKind) -> Result<Self, CorpusError> {
        if bytes.is_empty() {
            return Err(CorpusError::EmptyStream);
        }
        Ok(Self { bytes, source_id, entry_kind })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn entry_kind(&self) -> EntryKind {
        self.entry_kind
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Position of a dex entry in natural numeric order: `classes.dex` is 1,
/// `classesN.dex` is N.
fn dex_ordinal(name: &str) -> Option<u64> {
    let middle = name.strip_prefix("classes")?.strip_suffix(".dex")?;
    if middle.is_empty() {
        return Some(1);
    }
    if middle.starts_with('0') || !middle.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    middle.parse().ok()
}

/// Extracts the stream selected by `selector` from an archive.
///
/// `origin` labels the stream's `source_id` (usually the archive path).
/// For [`EntryKind::Raw`] the input is returned as-is without ZIP parsing.
pub fn extract_streams(archive_bytes: &[u8], selector: EntryKind, origin: &str) -> Result<Vec<ByteStream>, CorpusError> {
    if selector == EntryKind::Raw {
        return Ok(vec![ByteStream::new(archive_bytes.to_vec(), origin.to_string(), EntryKind::Raw)?]);
    }
    let mut zip = zip::ZipArchive::new(Cursor::new(archive_bytes))
        .map_err(|e| CorpusError::MalformedArchive(e.to_string()))?;
    let names: Vec<String> = zip
        .file_names()
        .map(|n| n.map(|n| n.into_owned()))
        .collect::<Result<_, _>>()
        .map_err(|e| CorpusError::MalformedArchive(e.to_string()))?;

    let mut read_entry = |name: &str| -> Result<Vec<u8>, CorpusError> {
        let mut f = zip.by_name(name).map_err(|e| CorpusError::MalformedArchive(e.to_string()))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| CorpusError::MalformedArchive(format!("{name}: {e}")))?;
        Ok(buf)
    };

    match selector {
        EntryKind::DexCode => {
            let mut dex: Vec<(u64, &String)> =
                names.iter().filter_map(|n| dex_ordinal(n).map(|k| (k, n))).collect();
            if dex.is_empty() {
                return Err(CorpusError::NoMatchingEntry("classes*.dex".into()));
            }
            dex.sort();
            let mut bytes = Vec::new();
            for (_, name) in &dex {
                bytes.extend(read_entry(name)?);
            }
            let entries: Vec<&str> = dex.iter().map(|(_, n)| n.as_str()).collect();
            let source = format!("{origin}!{}", entries.join("+"));
            Ok(vec![ByteStream::new(bytes, source, EntryKind::DexCode)?])
        }
        EntryKind::Manifest => {
            let name = "AndroidManifest.xml";
            if !names.iter().any(|n| n == name) {
                return Err(CorpusError::NoMatchingEntry(name.into()));
            }
            let bytes = read_entry(name)?;
            Ok(vec![ByteStream::new(bytes, format!("{origin}!{name}"), EntryKind::Manifest)?])
        }
        EntryKind::Raw => unreachable!(),
    }
}

/// Builds a stored (uncompressed) ZIP with fixed timestamps. Used for fixtures.
pub fn build_zip(entries: &[(&str, &[u8])]) -> Result<Vec<u8>, CorpusError> {
    use std::io::Write;
    use zip::write::SimpleFileOptions;
    let mut w = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default());
    for (name, data) in entries {
        w.start_file(*name, opts).map_err(|e| CorpusError::MalformedArchive(e.to_string()))?;
        w.write_all(data).map_err(|e| CorpusError::MalformedArchive(e.to_string()))?;
    }
    let cursor = w.finish().map_err(|e| CorpusError::MalformedArchive(e.to_string()))?;
    Ok(cursor.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dex_entries_concatenate_in_numeric_order() {
        let zip = build_zip(&[
            ("classes10.dex", &[10]),
            ("classes2.dex", &[3]),
            ("res/x.png", &[99]),
            ("classes.dex", &[1, 2]),
            ("AndroidManifest.xml", &[9, 9]),
        ])
        .unwrap();
        let s = extract_streams(&zip, EntryKind::DexCode, "app.apk").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].bytes(), &[1, 2, 3, 10]);
        assert_eq!(s[0].source_id(), "app.apk!classes.dex+classes2.dex+classes10.dex");
    }

    #[test]
    fn spec_example_two_dex_files() {
        let zip = build_zip(&[("classes.dex", &[1, 2]), ("classes2.dex", &[3])]).unwrap();
        assert_eq!(extract_streams(&zip, EntryKind::DexCode, "a").unwrap()[0].bytes(), &[1, 2, 3]);
    }

    #[test]
    fn missing_dex_is_an_error() {
        let zip = build_zip(&[("AndroidManifest.xml", &[9, 9])]).unwrap();
        assert!(matches!(extract_streams(&zip, EntryKind::DexCode, "a"), Err(CorpusError::NoMatchingEntry(_))));
        let m = extract_streams(&zip, EntryKind::Manifest, "a").unwrap();
        assert_eq!(m[0].bytes(), &[9, 9]);
        assert_eq!(m[0].entry_kind(), EntryKind::Manifest);
    }

    #[test]
    fn non_zip_is_malformed() {
        let err = extract_streams(b"definitely not a zip", EntryKind::DexCode, "a").unwrap_err();
        assert!(matches!(err, CorpusError::MalformedArchive(_)));
        let raw = extract_streams(b"raw", EntryKind::Raw, "a").unwrap();
        assert_eq!(raw[0].bytes(), b"raw");
    }

    #[test]
    fn empty_dex_is_empty_stream() {
        let zip = build_zip(&[("classes.dex", &[])]).unwrap();
        assert!(matches!(extract_streams(&zip, EntryKind::DexCode, "a"), Err(CorpusError::EmptyStream)));
    }

    #[test]
    fn ordinal_parsing() {
        assert_eq!(dex_ordinal("classes.dex"), Some(1));
        assert_eq!(dex_ordinal("classes3.dex"), Some(3));
        assert_eq!(dex_ordinal("classes03.dex"), None);
        assert_eq!(dex_ordinal("lib/classes2.dex"), None);
        assert_eq!(dex_ordinal("classesX.dex"), None);
    }
}
