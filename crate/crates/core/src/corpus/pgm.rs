//! Binary PGM ("P5", maxval 255) encoding.

use std::path::Path;

use super::{CorpusError, GrayImage};

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.pixels());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, CorpusError> {
    let bad = |m: &str| CorpusError::FormatViolation(m.to_string());
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments before each header field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a header number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(CorpusError::FormatViolation(format!("maxval {maxval}, expected 255")));
    }
    if width != height {
        return Err(CorpusError::FormatViolation(format!("non-square image {width}×{height}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != width * height {
        return Err(CorpusError::FormatViolation(format!(
            "expected {} data bytes, found {}",
            width * height,
            data.len()
        )));
    }
    GrayImage::new(width, data.to_vec())
}

pub fn write_image(image: &GrayImage, path: &Path) -> Result<(), CorpusError> {
    std::fs::write(path, encode_pgm(image)).map_err(|e| CorpusError::io(path, e))
}

pub fn read_image(path: &Path) -> Result<GrayImage, CorpusError> {
    let bytes = std::fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    decode_pgm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_layout() {
        let img = GrayImage::new(2, vec![0, 1, 2, 3]).unwrap();
        let bytes = encode_pgm(&img);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 1, 2, 3]);
    }

    #[test]
    fn maxval_other_than_255_rejected() {
        let mut bytes = b"P5\n2 2\n15\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 3]);
        assert!(matches!(decode_pgm(&bytes), Err(CorpusError::FormatViolation(_))));
    }

    #[test]
    fn comments_and_truncation() {
        let mut bytes = b"P5 # made by hand\n2 2 255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7, 6]);
        assert_eq!(decode_pgm(&bytes).unwrap().pixels(), &[9, 8, 7, 6]);
        bytes.pop();
        assert!(decode_pgm(&bytes).is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = GrayImage::new(3, (0..9).collect()).unwrap();
        write_image(&img, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(width in 1usize..20, seed in any::<u64>()) {
            let pixels = (0..width * width).map(|i| (crate::rng::derive(seed, i as u64) & 0xff) as u8).collect();
            let img = GrayImage::new(width, pixels).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
        }
    }
}
