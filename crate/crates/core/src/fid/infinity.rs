use std::io::Write;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::embed::EmbeddingSet;
use super::gaussian::{fit_rows, frechet_distance, FidEstimate, FidKind, GaussianStats};
use super::FidError;
use crate::rng;

pub const DEFAULT_RESAMPLES: usize = 5;

const MAD_SCALE: f64 = 1.4826;
const MAD_CUTOFF: f64 = 3.0;
const MIN_SERIES_FOR_ANOMALIES: usize = 5;

/// Subsample sizes of the fake set and resamples per size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// `None` means `{⌈n/4⌉, ⌈n/2⌉, n}`.
    pub sizes: Option<Vec<usize>>,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { sizes: None, resamples: DEFAULT_RESAMPLES, seed: 0 }
    }
}

impl Schedule {
    pub fn sizes_for(&self, n: usize) -> Vec<usize> {
        self.sizes.clone().unwrap_or_else(|| vec![n.div_ceil(4), n.div_ceil(2), n])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidInfinityReport {
    pub estimate: FidEstimate,
    /// `(N, mean FID_N, std FID_N)` per schedule size.
    pub points: Vec<(usize, f64, f64)>,
    pub slope: f64,
}

/// Ordinary least squares of `y` on `1/N`; returns `(intercept, slope)`.
pub fn extrapolate(points: &[(usize, f64)]) -> (f64, f64) {
    let k = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(n, _)| 1.0 / n as f64).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, &(_, y)) in xs.iter().zip(points) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    (my - slope * mx, slope)
}

/// Bias-corrected FID: fits `FID_N = c₀ + c₁/N` over subsamples of `fake`
/// and returns `c₀`. The real side is fitted once on all of `real`.
pub fn fid_infinity(real: &EmbeddingSet, fake: &EmbeddingSet, schedule: &Schedule) -> Result<FidInfinityReport, FidError> {
    let real_stats = fit_rows(real.vectors())?;
    fid_infinity_with(&real_stats, fake, schedule)
}

/// [`fid_infinity`] against precomputed real statistics.
pub fn fid_infinity_with(
    real: &GaussianStats,
    fake: &EmbeddingSet,
    schedule: &Schedule,
) -> Result<FidInfinityReport, FidError> {
    if real.dim() != fake.dim() {
        return Err(FidError::DimensionMismatch(real.dim(), fake.dim()));
    }
    let n = fake.n();
    let d = fake.dim();
    let sizes = schedule.sizes_for(n);
    let increasing = sizes.windows(2).all(|w| w[0] < w[1]);
    if sizes.len() < 3 || !increasing || sizes[sizes.len() - 1] > n || sizes[0] < d + 1 || schedule.resamples == 0 {
        return Err(FidError::ScheduleTooSmall(format!("sizes {sizes:?}, n = {n}, d = {d}")));
    }
    let mut rng = rng::stream(schedule.seed, rng::streams::RESAMPLE);
    let mut points = Vec::with_capacity(sizes.len());
    for &size in &sizes {
        let mut values = Vec::with_capacity(schedule.resamples);
        for r in 0..schedule.resamples {
            if size == n && r > 0 {
                values.push(values[0]);
                continue;
            }
            let mut idx = index::sample(&mut rng, n, size).into_vec();
            idx.sort_unstable();
            let stats = fit_rows(&fake.select(&idx))?;
            values.push(frechet_distance(real, &stats)?.value);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        points.push((size, mean, var.sqrt()));
    }
    let (c0, slope) = extrapolate(&points.iter().map(|&(n, m, _)| (n, m)).collect::<Vec<_>>());
    Ok(FidInfinityReport {
        estimate: FidEstimate { value: c0.max(0.0), n_used: n, kind: FidKind::Infinity },
        points,
        slope,
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Marks points farther than 3 scaled MADs from the median. Series shorter
/// than 5 are never flagged.
pub fn flag_anomalies(values: &[f64]) -> Vec<bool> {
    if values.len() < MIN_SERIES_FOR_ANOMALIES {
        return vec![false; values.len()];
    }
    let med = median(&mut values.to_vec());
    let mut dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    let mad = MAD_SCALE * median(&mut dev);
    values.iter().map(|v| (v - med).abs() > MAD_CUTOFF * mad).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidSeriesPoint {
    pub epoch: usize,
    pub fid_inf: f64,
    pub is_anomaly: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FidSeries {
    /// Every point, anomalies included and flagged.
    pub points: Vec<FidSeriesPoint>,
}

impl FidSeries {
    pub fn clean(&self) -> impl Iterator<Item = &FidSeriesPoint> {
        self.points.iter().filter(|p| !p.is_anomaly)
    }

    pub fn anomalies(&self) -> impl Iterator<Item = &FidSeriesPoint> {
        self.points.iter().filter(|p| p.is_anomaly)
    }
}

/// Builds a flagged series from `(epoch, FID∞)` pairs.
pub fn fid_series(values: &[(usize, f64)]) -> FidSeries {
    let flags = flag_anomalies(&values.iter().map(|v| v.1).collect::<Vec<_>>());
    FidSeries {
        points: values
            .iter()
            .zip(flags)
            .map(|(&(epoch, fid_inf), is_anomaly)| FidSeriesPoint { epoch, fid_inf, is_anomaly })
            .collect(),
    }
}

/// CSV with columns `epoch,fid_inf,is_anomaly`.
pub fn write_series_csv(series: &FidSeries, path: &Path) -> Result<(), FidError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,fid_inf,is_anomaly")?;
    for p in &series.points {
        writeln!(f, "{},{},{}", p.epoch, p.fid_inf, p.is_anomaly)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn intercept_of_constructed_series() {
        let pts: Vec<(usize, f64)> = [100, 200, 400].iter().map(|&n| (n, 10.0 + 100.0 / n as f64)).collect();
        let (c0, c1) = extrapolate(&pts);
        assert!((c0 - 10.0).abs() <= 1e-9, "{c0}");
        assert!((c1 - 100.0).abs() <= 1e-6);
    }

    #[test]
    fn constant_series_intercept() {
        let (c0, c1) = extrapolate(&[(10, 3.5), (20, 3.5), (40, 3.5)]);
        assert!((c0 - 3.5).abs() < 1e-12);
        assert_eq!(c1, 0.0);
    }

    #[test]
    fn anomaly_rule() {
        assert_eq!(flag_anomalies(&[90.0, 85.0, 80.0, 79.0, 500.0]), vec![false, false, false, false, true]);
        assert!(flag_anomalies(&[7.0; 8]).iter().all(|f| !f));
        assert_eq!(flag_anomalies(&[1.0, 1000.0]), vec![false, false]);
        let s = fid_series(&[(0, 42.0)]);
        assert_eq!(s.points.len(), 1);
        assert_eq!(s.anomalies().count(), 0);
    }

    fn gaussian_set(rng: &mut crate::rng::Rng, n: usize, mean: &[f64], scale: &[f64]) -> EmbeddingSet {
        let d = mean.len();
        let m = DMatrix::from_fn(n, d, |_, j| mean[j] + scale[j] * rng.sample::<f64, _>(StandardNormal));
        EmbeddingSet::new(m, "test", "gaussian").unwrap()
    }

    #[test]
    fn schedule_validation() {
        let mut rng = crate::rng::stream(0, 0);
        let a = gaussian_set(&mut rng, 40, &[0.0; 8], &[1.0; 8]);
        let s = Schedule { sizes: Some(vec![10, 20]), ..Default::default() };
        assert!(matches!(fid_infinity(&a, &a, &s), Err(FidError::ScheduleTooSmall(_))));
        let s = Schedule { sizes: Some(vec![5, 20, 40]), ..Default::default() };
        assert!(matches!(fid_infinity(&a, &a, &s), Err(FidError::ScheduleTooSmall(_))));
        let s = Schedule { sizes: Some(vec![10, 20, 80]), ..Default::default() };
        assert!(fid_infinity(&a, &a, &s).is_err());
    }

    #[test]
    fn self_comparison_near_zero() {
        let mut rng = crate::rng::stream(1, 0);
        let a = gaussian_set(&mut rng, 400, &[0.0; 8], &[1.0; 8]);
        let r = fid_infinity(&a, &a, &Schedule::default()).unwrap();
        assert!(r.estimate.value < 0.05, "{}", r.estimate.value);
        assert_eq!(r.estimate.kind, FidKind::Infinity);
        assert!(r.points[0].1 >= r.points[2].1);
    }

    #[test]
    fn recovers_closed_form() {
        // Means differ by 1 per axis, variances 1 vs 4: F* = 8·1 + 8·(1 − 2)² = 16.
        let d = 8;
        let truth = {
            let a = GaussianStats { mean: DVector::zeros(d), cov: DMatrix::identity(d, d), n: 1 };
            let b = GaussianStats {
                mean: DVector::from_element(d, 1.0),
                cov: DMatrix::identity(d, d) * 4.0,
                n: 1,
            };
            frechet_distance(&a, &b).unwrap().value
        };
        assert!((truth - 16.0).abs() < 1e-9);
        let mut rng = crate::rng::stream(2, 0);
        let real = gaussian_set(&mut rng, 2000, &[0.0; 8], &[1.0; 8]);
        let fake = gaussian_set(&mut rng, 2000, &[1.0; 8], &[2.0; 8]);
        let r = fid_infinity(&real, &fake, &Schedule { seed: 3, ..Default::default() }).unwrap();
        assert!((r.estimate.value - truth).abs() <= 0.05 * truth, "{}", r.estimate.value);
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_series_csv(&fid_series(&[(0, 1.5), (10, 2.0)]), &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "epoch,fid_inf,is_anomaly\n0,1.5,false\n10,2,false\n");
        write_series_csv(&FidSeries::default(), &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "epoch,fid_inf,is_anomaly\n");
    }
}
