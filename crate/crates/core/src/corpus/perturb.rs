//! Byte-level perturbations standing in for app obfuscation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore};

use super::archive::{extract_streams, ByteStream, EntryKind};
use super::image::{bytes_to_image_with, Resampling};
use super::manifest::{sanitize, CorpusManifest, Origin, SampleRecord, Split};
use super::synth::synth_stream_from_id;
use super::CorpusError;
use crate::rng;

/// Length of the decryptor stub prepended by [`PerturbKind::SegmentEncryptStub`].
const STUB_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PerturbKind {
    /// Inserts `count` random bytes at random positions.
    JunkInsertion { count: usize },
    /// Cuts the stream into blocks and shuffles them.
    BlockReorder { block_size: usize },
    /// XORs every byte with `key`.
    XorMask { key: u8 },
    /// Encrypts a contiguous segment with a keystream and prepends a stub.
    SegmentEncryptStub { fraction: f64 },
    /// Permutes ASCII letters, like identifier renaming.
    ByteRemap,
}

impl std::str::FromStr for PerturbKind {
    type Err = CorpusError;

    /// `junk:N`, `reorder:N`, `xor:N`, `encrypt:F`, `remap`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let bad = || CorpusError::Config(format!("bad perturbation {s:?}"));
        let num = |default: &str| arg.unwrap_or(default).parse::<f64>().map_err(|_| bad());
        Ok(match name {
            "junk" => PerturbKind::JunkInsertion { count: num("64")? as usize },
            "reorder" => {
                let block_size = num("256")? as usize;
                if block_size == 0 {
                    return Err(bad());
                }
                PerturbKind::BlockReorder { block_size }
            }
            "xor" => {
                let key = num("90")?;
                if !(0.0..=255.0).contains(&key) {
                    return Err(bad());
                }
                PerturbKind::XorMask { key: key as u8 }
            }
            "encrypt" => {
                let fraction = num("0.25")?;
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(bad());
                }
                PerturbKind::SegmentEncryptStub { fraction }
            }
            "remap" => PerturbKind::ByteRemap,
            _ => return Err(bad()),
        })
    }
}

impl PerturbKind {
    /// One of each kind with moderate strength.
    pub fn all() -> Vec<PerturbKind> {
        vec![
            PerturbKind::JunkInsertion { count: 64 },
            PerturbKind::BlockReorder { block_size: 256 },
            PerturbKind::XorMask { key: 0x5a },
            PerturbKind::SegmentEncryptStub { fraction: 0.25 },
            PerturbKind::ByteRemap,
        ]
    }
}

fn apply(bytes: &mut Vec<u8>, kind: PerturbKind, budget: usize, rng: &mut crate::rng::Rng) {
    match kind {
        PerturbKind::JunkInsertion { count } => {
            let count = count.min(budget);
            let mut positions: Vec<usize> = (0..count).map(|_| rng.random_range(0..=bytes.len())).collect();
            positions.sort_unstable();
            let mut out = Vec::with_capacity(bytes.len() + count);
            let mut next = 0;
            for (i, &b) in bytes.iter().enumerate() {
                while next < positions.len() && positions[next] == i {
                    out.push(rng.random());
                    next += 1;
                }
                out.push(b);
            }
            for _ in next..positions.len() {
                out.push(rng.random());
            }
            *bytes = out;
        }
        PerturbKind::BlockReorder { block_size } => {
            let mut blocks: Vec<Vec<u8>> = bytes.chunks(block_size.max(1)).map(<[u8]>::to_vec).collect();
            blocks.shuffle(rng);
            *bytes = blocks.concat();
        }
        PerturbKind::XorMask { key } => bytes.iter_mut().for_each(|b| *b ^= key),
        PerturbKind::SegmentEncryptStub { fraction } => {
            let seg = ((bytes.len() as f64) * fraction).round() as usize;
            let seg = seg.min(bytes.len());
            if seg > 0 {
                let start = rng.random_range(0..=bytes.len() - seg);
                let mut key = vec![0u8; seg];
                rng.fill_bytes(&mut key);
                for (b, k) in bytes[start..start + seg].iter_mut().zip(key) {
                    *b ^= k;
                }
            }
            let mut stub = vec![0u8; STUB_LEN.min(budget)];
            rng.fill_bytes(&mut stub);
            stub.extend_from_slice(bytes);
            *bytes = stub;
        }
        PerturbKind::ByteRemap => {
            let mut lower: Vec<u8> = (b'a'..=b'z').collect();
            lower.shuffle(rng);
            let mut upper: Vec<u8> = (b'A'..=b'Z').collect();
            upper.shuffle(rng);
            for b in bytes.iter_mut() {
                match *b {
                    b'a'..=b'z' => *b = lower[(*b - b'a') as usize],
                    b'A'..=b'Z' => *b = upper[(*b - b'A') as usize],
                    _ => {}
                }
            }
        }
    }
}

/// Applies `kinds` in order to a copy of `stream`.
///
/// Insertions are capped so the output never exceeds twice the input length.
pub fn perturb_stream(stream: &ByteStream, kinds: &[PerturbKind], seed: u64) -> Result<ByteStream, CorpusError> {
    if kinds.is_empty() {
        return Err(CorpusError::Config("at least one perturbation kind required".into()));
    }
    let limit = 2 * stream.len();
    let mut rng = rng::stream(seed, rng::streams::PERTURB);
    let mut bytes = stream.bytes().to_vec();
    for &kind in kinds {
        let budget = limit - bytes.len();
        apply(&mut bytes, kind, budget, &mut rng);
    }
    ByteStream::new(bytes, format!("{}~perturbed", stream.source_id()), stream.entry_kind())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixMode {
    /// Perturbed records are added next to their originals.
    #[default]
    Duplicate,
    /// Perturbed records take the place of their originals.
    Replace,
}

#[derive(Debug, Clone)]
pub struct PerturbOptions {
    pub kinds: Vec<PerturbKind>,
    /// Share of eligible sources to perturb.
    pub fraction: f64,
    pub mode: MixMode,
    /// Only real records in this split are eligible; `None` means all.
    pub split: Option<Split>,
    pub resampling: Resampling,
    pub seed: u64,
}

impl Default for PerturbOptions {
    fn default() -> Self {
        Self {
            kinds: PerturbKind::all(),
            fraction: 0.5,
            mode: MixMode::Duplicate,
            split: Some(Split::Test),
            resampling: Resampling::Linear,
            seed: 0,
        }
    }
}

/// Recovers the byte stream behind a record from its `source_id`.
///
/// Handles `synth:` ids and `relative/path!entries` ids under the manifest's
/// input directory.
pub fn resolve_stream(manifest: &CorpusManifest, record: &SampleRecord) -> Result<ByteStream, CorpusError> {
    if let Some(s) = synth_stream_from_id(&record.source_id) {
        return s;
    }
    let input = manifest
        .meta
        .input_dir
        .as_deref()
        .ok_or_else(|| CorpusError::Manifest("manifest has no input_dir".into()))?;
    let kind = manifest.meta.entry_kind.unwrap_or(EntryKind::DexCode);
    let rel = match kind {
        EntryKind::Raw => record.source_id.as_str(),
        _ => record.source_id.split_once('!').map_or(record.source_id.as_str(), |(p, _)| p),
    };
    let path = Path::new(input).join(rel);
    let bytes = std::fs::read(&path).map_err(|e| CorpusError::io(&path, e))?;
    Ok(extract_streams(&bytes, kind, rel)?.remove(0))
}

/// Perturbs a seeded `fraction` of eligible sources and writes the new
/// images under `images/{size}/{label}/perturbed/`. Returns the number of
/// sources perturbed.
pub fn perturb_manifest(manifest: &mut CorpusManifest, opts: &PerturbOptions) -> Result<usize, CorpusError> {
    if !(0.0..=1.0).contains(&opts.fraction) {
        return Err(CorpusError::Config(format!("fraction {} outside [0, 1]", opts.fraction)));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if r.origin == Origin::Real && opts.split.is_none_or(|s| r.split == Some(s)) {
            groups.entry(r.source_id.clone()).or_default().push(i);
        }
    }
    let mut sources: Vec<String> = groups.keys().cloned().collect();
    let mut rng = rng::stream(opts.seed, rng::streams::PERTURB);
    sources.shuffle(&mut rng);
    let n = ((sources.len() as f64) * opts.fraction).round() as usize;
    sources.truncate(n);
    sources.sort();

    let mut added = Vec::new();
    let mut replaced = Vec::new();
    for (k, source) in sources.iter().enumerate() {
        let idx = &groups[source];
        let first = manifest.records[idx[0]].clone();
        let stream = resolve_stream(manifest, &first)?;
        let perturbed = perturb_stream(&stream, &opts.kinds, rng::derive(opts.seed, k as u64))?;
        for &i in idx {
            let r = &manifest.records[i];
            let img = bytes_to_image_with(perturbed.bytes(), r.image_size, opts.resampling)?;
            let rel = format!("images/{}/{}/perturbed/{}.pgm", r.image_size, r.label.as_str(), sanitize(source));
            added.push(manifest.store_image(&img, &rel, r.label, r.split, Origin::Perturbed, perturbed.source_id())?);
            replaced.push(i);
        }
    }
    if opts.mode == MixMode::Replace {
        replaced.sort_unstable();
        for i in replaced.into_iter().rev() {
            manifest.records.remove(i);
        }
    }
    manifest.records.extend(added);
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(bytes: &[u8]) -> ByteStream {
        ByteStream::new(bytes.to_vec(), "s".into(), EntryKind::Raw).unwrap()
    }

    #[test]
    fn xor_zero_is_identity() {
        let s = stream(b"hello world");
        let p = perturb_stream(&s, &[PerturbKind::XorMask { key: 0 }], 3).unwrap();
        assert_eq!(p.bytes(), s.bytes());
    }

    #[test]
    fn junk_adds_exactly_k() {
        let s = stream(&[7; 100]);
        let p = perturb_stream(&s, &[PerturbKind::JunkInsertion { count: 13 }], 3).unwrap();
        assert_eq!(p.len(), 113);
    }

    #[test]
    fn junk_capped_at_double() {
        let s = stream(&[7; 10]);
        let p = perturb_stream(&s, &[PerturbKind::JunkInsertion { count: 50 }], 3).unwrap();
        assert_eq!(p.len(), 20);
    }

    #[test]
    fn single_block_reorder_is_identity() {
        let s = stream(b"abcdefgh");
        let p = perturb_stream(&s, &[PerturbKind::BlockReorder { block_size: 8 }], 9).unwrap();
        assert_eq!(p.bytes(), s.bytes());
    }

    #[test]
    fn remap_only_touches_letters() {
        let s = stream(b"Ab1-zZ");
        let p = perturb_stream(&s, &[PerturbKind::ByteRemap], 1).unwrap();
        assert_eq!(p.bytes()[2..4], *b"1-");
        assert!(p.bytes()[0].is_ascii_uppercase() && p.bytes()[1].is_ascii_lowercase());
    }

    #[test]
    fn encrypt_stub_prepends() {
        let s = stream(&[1; 64]);
        let p = perturb_stream(&s, &[PerturbKind::SegmentEncryptStub { fraction: 0.0 }], 1).unwrap();
        assert_eq!(p.len(), 64 + STUB_LEN);
        assert_eq!(&p.bytes()[STUB_LEN..], s.bytes());
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("junk:5".parse::<PerturbKind>().unwrap(), PerturbKind::JunkInsertion { count: 5 });
        assert_eq!("remap".parse::<PerturbKind>().unwrap(), PerturbKind::ByteRemap);
        assert!("xor:300".parse::<PerturbKind>().is_err());
        assert!("reorder:0".parse::<PerturbKind>().is_err());
        assert!("bogus".parse::<PerturbKind>().is_err());
    }

    #[test]
    fn no_kinds_rejected() {
        assert!(perturb_stream(&stream(b"x"), &[], 0).is_err());
    }

    fn kind() -> impl Strategy<Value = PerturbKind> {
        prop_oneof![
            (0usize..500).prop_map(|count| PerturbKind::JunkInsertion { count }),
            (1usize..300).prop_map(|block_size| PerturbKind::BlockReorder { block_size }),
            any::<u8>().prop_map(|key| PerturbKind::XorMask { key }),
            (0.0f64..=1.0).prop_map(|fraction| PerturbKind::SegmentEncryptStub { fraction }),
            Just(PerturbKind::ByteRemap),
        ]
    }

    proptest! {
        #[test]
        fn closure_and_determinism(
            bytes in proptest::collection::vec(any::<u8>(), 1..400),
            kinds in proptest::collection::vec(kind(), 1..6),
            seed: u64,
        ) {
            let s = stream(&bytes);
            let a = perturb_stream(&s, &kinds, seed).unwrap();
            let b = perturb_stream(&s, &kinds, seed).unwrap();
            prop_assert_eq!(a.bytes(), b.bytes());
            prop_assert!(!a.is_empty() && a.len() <= 2 * bytes.len());
            prop_assert_eq!(s.bytes(), &bytes[..]);
            prop_assert!(crate::corpus::bytes_to_image(&a, 8).is_ok());
        }
    }
}
