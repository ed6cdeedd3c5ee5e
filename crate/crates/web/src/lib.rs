//! Browser bindings: bytes to image, a Gaussian FID explorer, and a toy
//! GAN trained a few steps at a time.

use malvis::corpus::{bytes_to_image, ByteStream, EntryKind};
use malvis::fid::{fid_infinity, frechet_distance, EmbeddingSet, GaussianStats, Schedule};
use malvis::gan::{dcgan_train_step, generate_raw, toy_samples, wgan_train_step, GanConfig, GanModel, GanVariant, TrainState, TOY_SAMPLES};
use malvis::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Gray pixels of `bytes` as a `width`-wide image.
pub fn image_pixels(bytes: &[u8], width: usize) -> Result<Vec<u8>, String> {
    let stream = ByteStream::new(bytes.to_vec(), "upload".into(), EntryKind::Raw).map_err(|e| e.to_string())?;
    bytes_to_image(&stream, width).map(|i| i.pixels().to_vec()).map_err(|e| e.to_string())
}

/// RGBA pixels ready for `ImageData`.
#[wasm_bindgen]
pub fn image_rgba(bytes: &[u8], width: usize) -> Result<Vec<u8>, JsError> {
    let gray = image_pixels(bytes, width).map_err(js)?;
    Ok(gray.iter().flat_map(|&g| [g, g, g, 255]).collect())
}

/// Closed-form FID between N(0, I) and N(shift·e₁, scale·I) in `dim` dimensions.
pub fn closed_form(dim: usize, shift: f64, scale: f64) -> Result<f64, String> {
    let stats = |m0: f64, v: f64| {
        let mut mean = DVector::zeros(dim);
        mean[0] = m0;
        GaussianStats { mean, cov: DMatrix::identity(dim, dim) * v, n: usize::MAX }
    };
    frechet_distance(&stats(0.0, 1.0), &stats(shift, scale)).map(|e| e.value).map_err(|e| e.to_string())
}

fn draw(n: usize, dim: usize, shift: f64, scale: f64, seed: u64) -> Result<EmbeddingSet, String> {
    let mut r = rng::stream(seed, rng::streams::SYNTH);
    let sd = scale.sqrt();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..dim)
                .map(|j| sd * r.sample::<f64, _>(StandardNormal) + if j == 0 { shift } else { 0.0 })
                .collect()
        })
        .collect();
    EmbeddingSet::from_rows(&rows, "gaussian", "sampled").map_err(|e| e.to_string())
}

/// `[closed form, FID at n, FID∞]` for sampled sets of `n` points each.
pub fn explore(dim: usize, shift: f64, scale: f64, n: usize, seed: u64) -> Result<Vec<f64>, String> {
    if dim == 0 || n <= 4 * dim || !(scale > 0.0) {
        return Err(format!("need dim ≥ 1, n > 4·dim and scale > 0 (got {dim}, {n}, {scale})"));
    }
    let real = draw(n, dim, 0.0, 1.0, rng::derive(seed, 1))?;
    let fake = draw(n, dim, shift, scale, rng::derive(seed, 2))?;
    let fit = |s: &EmbeddingSet| malvis::fid::fit_gaussian(s).map_err(|e| e.to_string());
    let at_n = frechet_distance(&fit(&real)?, &fit(&fake)?).map_err(|e| e.to_string())?.value;
    let inf = fid_infinity(&real, &fake, &Schedule::default()).map_err(|e| e.to_string())?.estimate.value;
    Ok(vec![closed_form(dim, shift, scale)?, at_n, inf])
}

#[wasm_bindgen]
pub fn fid_explore(dim: usize, shift: f64, scale: f64, n: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    explore(dim, shift, scale, n, seed as u64).map_err(js)
}

/// A 1-D GAN learning Normal(4, 0.5), advanced a few steps per call.
#[wasm_bindgen]
pub struct ToyGan {
    model: GanModel,
    state: TrainState,
    steps: usize,
    budget: usize,
}

impl ToyGan {
    pub fn create(variant: &str, seed: u64) -> Result<Self, String> {
        let variant: GanVariant = variant.parse().map_err(|e: malvis::gan::GanError| e.to_string())?;
        let cfg = GanConfig::toy(variant, seed);
        let budget = cfg.epochs * (TOY_SAMPLES / cfg.batch_size);
        let model = GanModel::new(cfg, None).map_err(|e| e.to_string())?;
        let state = TrainState::new(&model, toy_samples(TOY_SAMPLES, seed));
        Ok(Self { model, state, steps: 0, budget })
    }

    /// Runs up to `n` generator steps, stopping at the budget. Returns the
    /// last critic loss.
    pub fn advance(&mut self, n: usize) -> Result<f64, String> {
        let mut loss = f64::NAN;
        for _ in 0..n.min(self.budget - self.steps) {
            let log = match self.model.config.variant {
                GanVariant::WganGp => wgan_train_step(&mut self.model, &mut self.state),
                GanVariant::Dcgan => dcgan_train_step(&mut self.model, &mut self.state),
            }
            .map_err(|e| e.to_string())?;
            loss = log.critic_loss;
            self.steps += 1;
        }
        Ok(loss)
    }

    pub fn draw(&self, n: usize) -> Result<Vec<f64>, String> {
        generate_raw(&self.model, n, 0).map(|t| t.data().to_vec()).map_err(|e| e.to_string())
    }
}

#[wasm_bindgen]
impl ToyGan {
    /// `variant` is `wgan-gp` or `dcgan`.
    #[wasm_bindgen(constructor)]
    pub fn new(variant: &str, seed: u32) -> Result<ToyGan, JsError> {
        Self::create(variant, seed as u64).map_err(js)
    }

    pub fn train(&mut self, steps: usize) -> Result<f64, JsError> {
        self.advance(steps).map_err(js)
    }

    pub fn samples(&self, n: usize) -> Result<Vec<f64>, JsError> {
        self.draw(n).map_err(js)
    }

    /// Mean of 1000 fixed generator draws.
    pub fn mean(&self) -> Result<f64, JsError> {
        let s = self.draw(1000).map_err(js)?;
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[wasm_bindgen(getter)]
    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Draws from the target distribution, for the comparison histogram.
    pub fn target(n: usize, seed: u32) -> Vec<f64> {
        toy_samples(n, seed as u64).data().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixels_follow_the_conversion() {
        assert_eq!(image_pixels(&[0, 255], 1).unwrap().len(), 1);
        assert_eq!(image_pixels(&[7; 16], 4).unwrap(), vec![7; 16]);
        assert!(image_pixels(&[], 4).is_err());
    }

    #[test]
    fn closed_form_matches_isotropic_formula() {
        let want = |d: f64, m: f64, s: f64| m * m + d * (1.0 + s - 2.0 * s.sqrt());
        for (d, m, s) in [(1, 0.0, 1.0), (4, 3.0, 1.0), (8, 1.0, 4.0)] {
            assert!((closed_form(d, m, s).unwrap() - want(d as f64, m, s)).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_estimates_approach_closed_form() {
        let [exact, at_n, inf] = explore(4, 2.0, 1.0, 2000, 3).unwrap()[..] else { panic!() };
        assert_eq!(exact, 4.0);
        assert!((inf - exact).abs() < 0.2 * exact, "{inf}");
        assert!((at_n - exact).abs() < 0.2 * exact, "{at_n}");
        assert!(explore(4, 0.0, 1.0, 10, 0).is_err());
    }

    #[test]
    fn toy_gan_stops_at_budget() {
        let mut g = ToyGan::create("dcgan", 1).unwrap();
        assert_eq!(g.budget, 4000);
        g.advance(10).unwrap();
        assert_eq!(g.steps, 10);
        g.steps = g.budget - 2;
        g.advance(10).unwrap();
        assert_eq!(g.steps, g.budget);
        assert_eq!(g.draw(5).unwrap().len(), 5);
        assert!(ToyGan::create("vae", 0).is_err());
    }
}
