use serde::{Deserialize, Serialize};

use super::{ByteStream, CorpusError};

/// Square 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, pixels: Vec<u8>) -> Result<Self, CorpusError> {
        if width == 0 || pixels.len() != width * width {
            return Err(CorpusError::FormatViolation(format!(
                "{} pixels do not form a {width}×{width} image",
                pixels.len()
            )));
        }
        Ok(Self { width, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    /// Pixels scaled affinely to `[-1, 1]`.
    pub fn to_unit_range(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 127.5 - 1.0).collect()
    }

    /// Inverse of [`GrayImage::to_unit_range`], clamping and rounding half-up.
    pub fn from_unit_range(width: usize, values: &[f64]) -> Result<Self, CorpusError> {
        let pixels = values
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect();
        Self::new(width, pixels)
    }
}

/// How the 1×L byte vector is stretched to 1×W².
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    Linear,
    Nearest,
}

/// Resamples `bytes` to `target` values.
///
/// Target position `j` maps to source position `j·(L−1)/(T−1)`. The
/// arithmetic is done on integers so results are bit-identical everywhere:
/// with `num = j·(L−1)` and `den = T−1`, the interpolated value times `den`
/// is `b[i]·den + (b[i+1]−b[i])·(num mod den)`, which is then rounded half-up.
pub fn resample(bytes: &[u8], target: usize, method: Resampling) -> Vec<u8> {
    let len = bytes.len();
    if len == 1 {
        return vec![bytes[0]; target];
    }
    if target == 1 {
        return vec![bytes[0]];
    }
    let den = (target - 1) as u128;
    let span = (len - 1) as u128;
    (0..target)
        .map(|j| {
            let num = j as u128 * span;
            let i = (num / den) as usize;
            let frac = num % den;
            match method {
                Resampling::Nearest => {
                    let idx = if 2 * frac >= den { i + 1 } else { i };
                    bytes[idx.min(len - 1)]
                }
                Resampling::Linear => {
                    if frac == 0 {
                        return bytes[i];
                    }
                    let lo = bytes[i] as i128;
                    let hi = bytes[i + 1] as i128;
                    let d = den as i128;
                    let scaled = lo * d + (hi - lo) * frac as i128;
                    (2 * scaled + d).div_euclid(2 * d) as u8
                }
            }
        })
        .collect()
}

/// Converts a byte stream to a `width × width` image by resampling to `width²`
/// values and reshaping row-major.
pub fn bytes_to_image(stream: &ByteStream, width: usize) -> Result<GrayImage, CorpusError> {
    bytes_to_image_with(stream.bytes(), width, Resampling::Linear)
}

pub fn bytes_to_image_with(bytes: &[u8], width: usize, method: Resampling) -> Result<GrayImage, CorpusError> {
    if bytes.is_empty() {
        return Err(CorpusError::EmptyStream);
    }
    if width == 0 {
        return Err(CorpusError::Config("image width must be positive".into()));
    }
    GrayImage::new(width, resample(bytes, width * width, method))
}

/// Rescales an image by running its row-major pixel vector back through the
/// resampler, the same way a longer byte stream would be converted.
pub fn upscale(image: &GrayImage, width: usize) -> Result<GrayImage, CorpusError> {
    bytes_to_image_with(image.pixels(), width, Resampling::Linear)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntryKind;
    use proptest::prelude::*;

    fn stream(bytes: Vec<u8>) -> ByteStream {
        ByteStream::new(bytes, "test".into(), EntryKind::Raw).unwrap()
    }

    #[test]
    fn equal_length_is_identity() {
        let bytes: Vec<u8> = (1..=9).map(|i| i * 10).collect();
        let img = bytes_to_image(&stream(bytes.clone()), 3).unwrap();
        assert_eq!(img.pixels(), bytes.as_slice());
    }

    #[test]
    fn two_bytes_to_four_pixels() {
        let img = bytes_to_image(&stream(vec![0, 255]), 2).unwrap();
        assert_eq!(img.pixels(), &[0, 85, 170, 255]);
    }

    #[test]
    fn constant_stream_gives_constant_image() {
        for (len, width) in [(1, 4), (3, 2), (1000, 7), (17, 32)] {
            let img = bytes_to_image(&stream(vec![7; len]), width).unwrap();
            assert!(img.pixels().iter().all(|&p| p == 7));
        }
    }

    #[test]
    fn half_way_rounds_up() {
        // [0, 1] to 3 values: positions 0, 0.5, 1 → 0, 0.5→1, 1
        assert_eq!(resample(&[0, 1], 3, Resampling::Linear), vec![0, 1, 1]);
        // descending: 1 → 0.5 rounds up to 1
        assert_eq!(resample(&[1, 0], 3, Resampling::Linear), vec![1, 1, 0]);
    }

    #[test]
    fn nearest_neighbor_option() {
        assert_eq!(resample(&[0, 255], 4, Resampling::Nearest), vec![0, 0, 255, 255]);
    }

    #[test]
    fn empty_stream_rejected() {
        assert!(matches!(bytes_to_image_with(&[], 4, Resampling::Linear), Err(CorpusError::EmptyStream)));
    }

    #[test]
    fn unit_range_round_trip() {
        let img = GrayImage::new(2, vec![0, 1, 128, 255]).unwrap();
        let back = GrayImage::from_unit_range(2, &img.to_unit_range()).unwrap();
        assert_eq!(back, img);
    }

    proptest! {
        #[test]
        fn endpoints_and_range_preserved(bytes in proptest::collection::vec(any::<u8>(), 2..300), width in 2usize..24) {
            let out = resample(&bytes, width * width, Resampling::Linear);
            prop_assert_eq!(out[0], bytes[0]);
            prop_assert_eq!(*out.last().unwrap(), *bytes.last().unwrap());
            let lo = *bytes.iter().min().unwrap();
            let hi = *bytes.iter().max().unwrap();
            prop_assert!(out.iter().all(|&p| p >= lo && p <= hi));
        }

        #[test]
        fn matches_float_reference(bytes in proptest::collection::vec(any::<u8>(), 1..200), target in 1usize..500) {
            let out = resample(&bytes, target, Resampling::Linear);
            prop_assert_eq!(out.len(), target);
            if bytes.len() > 1 && target > 1 {
                for (j, &p) in out.iter().enumerate() {
                    let pos = j as f64 * (bytes.len() - 1) as f64 / (target - 1) as f64;
                    let i = (pos.floor() as usize).min(bytes.len() - 2);
                    let f = pos - i as f64;
                    let v = bytes[i] as f64 * (1.0 - f) + bytes[i + 1] as f64 * f;
                    prop_assert!((p as f64 - v).abs() <= 0.5 + 1e-9);
                }
            }
        }
    }
}
