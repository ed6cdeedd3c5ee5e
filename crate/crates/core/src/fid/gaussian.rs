use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::embed::EmbeddingSet;
use super::FidError;

const SYM_TOL: f64 = 1e-10;
const NEG_EIG_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    /// Unbiased (n−1) and exactly symmetric.
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidKind {
    FiniteN,
    Infinity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidEstimate {
    /// Never negative.
    pub value: f64,
    pub n_used: usize,
    pub kind: FidKind,
}

/// Sample mean and unbiased covariance. Requires `n ≥ d + 1`.
pub fn fit_gaussian(set: &EmbeddingSet) -> Result<GaussianStats, FidError> {
    fit_rows(set.vectors())
}

pub(crate) fn fit_rows(x: &DMatrix<f64>) -> Result<GaussianStats, FidError> {
    let (n, d) = x.shape();
    if n < d + 1 || n < 2 {
        return Err(FidError::TooFewSamples { n, d });
    }
    let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    symmetrize(&mut cov);
    Ok(GaussianStats { mean, cov, n })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn scale_of(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(1.0f64, |acc, v| acc.max(v.abs()))
}

fn sqrt_from_eigen(a: DMatrix<f64>, strict: bool) -> Result<DMatrix<f64>, FidError> {
    let scale = scale_of(&a);
    let eig = SymmetricEigen::new(a);
    let min = eig.eigenvalues.min();
    if strict && min < -NEG_EIG_TOL * scale {
        return Err(FidError::IndefiniteMatrix(min));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let mut s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    symmetrize(&mut s);
    Ok(s)
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Eigenvalues within tolerance below zero are clamped to zero.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>, FidError> {
    if !a.is_square() {
        return Err(FidError::DimensionMismatch(a.nrows(), a.ncols()));
    }
    let asym = (a - a.transpose()).amax();
    if asym > SYM_TOL * scale_of(a) {
        return Err(FidError::NotSymmetric(asym));
    }
    let mut sym = a.clone();
    symmetrize(&mut sym);
    sqrt_from_eigen(sym, true)
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2·(Σa^½ Σb Σa^½)^½)`, clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<FidEstimate, FidError> {
    if a.dim() != b.dim() {
        return Err(FidError::DimensionMismatch(a.dim(), b.dim()));
    }
    let diff = &a.mean - &b.mean;
    let sa = matrix_sqrt_psd(&a.cov)?;
    let mut m = &sa * &b.cov * &sa;
    symmetrize(&mut m);
    let cross = sqrt_from_eigen(m, false)?.trace();
    let value = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(FidEstimate { value: value.max(0.0), n_used: a.n.min(b.n), kind: FidKind::FiniteN })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn stats(mean: &[f64], cov: DMatrix<f64>) -> GaussianStats {
        GaussianStats { mean: DVector::from_column_slice(mean), cov, n: 100 }
    }

    fn random_psd(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut a = b.transpose() * b;
        symmetrize(&mut a);
        a
    }

    #[test]
    fn two_points_in_one_dim() {
        let s = fit_rows(&DMatrix::from_row_slice(2, 1, &[0.0, 2.0])).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.cov[(0, 0)], 2.0);
    }

    #[test]
    fn identical_rows_give_zero_covariance() {
        let x = DMatrix::from_fn(5, 3, |_, j| j as f64);
        assert!(fit_rows(&x).unwrap().cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_few_rows_rejected() {
        let x = DMatrix::zeros(3, 3);
        assert!(matches!(fit_rows(&x), Err(FidError::TooFewSamples { n: 3, d: 3 })));
    }

    #[test]
    fn permuting_rows_keeps_stats() {
        let mut rng = crate::rng::stream(1, 0);
        let x = DMatrix::from_fn(20, 3, |_, _| rng.random::<f64>());
        let mut y = x.clone();
        y.swap_rows(0, 19);
        y.swap_rows(3, 7);
        let (a, b) = (fit_rows(&x).unwrap(), fit_rows(&y).unwrap());
        assert!((a.mean - b.mean).amax() < 1e-15);
        assert!((a.cov - b.cov).amax() < 1e-15);
    }

    #[test]
    fn sqrt_of_diagonal_and_identity() {
        let i = DMatrix::<f64>::identity(4, 4);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).amax() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&[4.0, 9.0]));
        let s = matrix_sqrt_psd(&d).unwrap();
        assert!((s - DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 3.0]))).amax() < 1e-14);
    }

    #[test]
    fn sqrt_reconstructs_random_psd() {
        let mut rng = crate::rng::stream(2, 0);
        for _ in 0..50 {
            let a = random_psd(&mut rng, 5);
            let s = matrix_sqrt_psd(&a).unwrap();
            let err = (&s * &s - &a).norm() / a.norm().max(1.0);
            assert!(err <= 1e-8, "{err}");
        }
    }

    #[test]
    fn sqrt_rejects_bad_input() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(matrix_sqrt_psd(&a), Err(FidError::NotSymmetric(_))));
        let b = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -0.1]));
        assert!(matches!(matrix_sqrt_psd(&b), Err(FidError::IndefiniteMatrix(_))));
    }

    #[test]
    fn closed_form_cases() {
        let i1 = DMatrix::identity(1, 1);
        assert!(frechet_distance(&stats(&[0.0], i1.clone()), &stats(&[0.0], i1.clone())).unwrap().value.abs() < 1e-12);
        let f = frechet_distance(&stats(&[0.0], i1.clone()), &stats(&[1.0], i1)).unwrap().value;
        assert!((f - 1.0).abs() < 1e-12);
        let i2 = DMatrix::identity(2, 2);
        let f = frechet_distance(&stats(&[0.0, 0.0], i2.clone()), &stats(&[3.0, 4.0], i2)).unwrap().value;
        assert!((f - 25.0).abs() < 1e-12);
    }

    #[test]
    fn one_dim_variance_term() {
        // (σa − σb)² for scalar Gaussians.
        let a = stats(&[0.0], DMatrix::from_element(1, 1, 4.0));
        let b = stats(&[0.0], DMatrix::from_element(1, 1, 9.0));
        assert!((frechet_distance(&a, &b).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let a = stats(&[0.0], DMatrix::identity(1, 1));
        let b = stats(&[0.0, 0.0], DMatrix::identity(2, 2));
        assert!(matches!(frechet_distance(&a, &b), Err(FidError::DimensionMismatch(1, 2))));
    }

    #[test]
    fn symmetric_and_nonnegative_on_random_pairs() {
        let mut rng = crate::rng::stream(3, 0);
        for _ in 0..1000 {
            let d = rng.random_range(1..6);
            let mu = |rng: &mut crate::rng::Rng| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>();
            let a = stats(&mu(&mut rng), random_psd(&mut rng, d));
            let b = stats(&mu(&mut rng), random_psd(&mut rng, d));
            let ab = frechet_distance(&a, &b).unwrap().value;
            let ba = frechet_distance(&b, &a).unwrap().value;
            assert!(ab >= 0.0);
            assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0), "{ab} {ba}");
        }
    }

    #[test]
    fn translation_adds_squared_norm() {
        let mut rng = crate::rng::stream(4, 0);
        let cov = random_psd(&mut rng, 3);
        let a = stats(&[0.0, 0.0, 0.0], cov.clone());
        let b = stats(&[1.0, -2.0, 0.5], cov);
        let f = frechet_distance(&a, &b).unwrap().value;
        assert!((f - 5.25).abs() < 1e-8, "{f}");
    }
}
