use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GanError, GanModel, GanVariant};
use crate::corpus::{CorpusManifest, Label, Origin, Split};
use crate::fid::images_to_tensor;
use crate::rng::{self, Rng};
use crate::tensor::{adam_step, AdamState, Network, Tape, Tensor, Var};

/// `m × latent_dim` standard normal draws.
pub fn sample_latent(m: usize, latent_dim: usize, rng: &mut Rng) -> Tensor {
    let data = (0..m * latent_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![m, latent_dim], data).expect("shape matches data")
}

/// Per-sample `ε·x + (1 − ε)·x̂`.
pub fn interpolate(x_real: &Tensor, x_fake: &Tensor, eps: &[f64]) -> Result<Tensor, GanError> {
    let (rows, cols) = x_real.rows_cols();
    if x_real.shape() != x_fake.shape() || eps.len() != rows {
        return Err(GanError::Tensor(crate::tensor::TensorError::ShapeMismatch {
            op: "interpolate",
            detail: format!("{:?} vs {:?} with {} ε", x_real.shape(), x_fake.shape(), eps.len()),
        }));
    }
    let mut out = x_real.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let e = eps[i / cols];
        *o = e * *o + (1.0 - e) * x_fake.data()[i];
    }
    Ok(out)
}

/// The batch-mean WGAN-GP critic loss and its parameter gradients.
#[derive(Debug, Clone)]
pub struct CriticLoss {
    pub loss: f64,
    /// Per-sample `D(x̂) − D(x) + λ(‖∇D(x̃)‖ − 1)²`.
    pub per_sample: Vec<f64>,
    pub penalties: Vec<f64>,
    pub mean_real: f64,
    pub mean_fake: f64,
    pub grads: Vec<Tensor>,
}

fn flat_scores(tape: &mut Tape, scores: Var) -> Result<Var, GanError> {
    let m = tape.shape(scores)[0];
    Ok(tape.reshape(scores, &[m])?)
}

/// Mean over the batch of `D(x̂) − D(x) + λ(‖∇x̃ D(x̃)‖₂ − 1)²`, with
/// gradients that flow through the gradient-norm term.
pub fn critic_loss(
    critic: &Network,
    x_real: &Tensor,
    x_fake: &Tensor,
    x_interp: &Tensor,
    lambda: f64,
) -> Result<CriticLoss, GanError> {
    let mut tape = Tape::new();
    let pv = critic.params.to_tape(&mut tape, true)?;
    let xr = tape.constant(x_real.clone())?;
    let xf = tape.constant(x_fake.clone())?;
    let xi = tape.leaf(x_interp.clone(), true)?;
    let dr = critic.forward(&mut tape, &pv, xr)?;
    let dr = flat_scores(&mut tape, dr)?;
    let df = critic.forward(&mut tape, &pv, xf)?;
    let df = flat_scores(&mut tape, df)?;
    let di = critic.forward(&mut tape, &pv, xi)?;
    let m = tape.shape(dr)[0];
    let total = tape.sum(di)?;
    let norms = if tape.reaches(total, xi) {
        let g = tape.grad(total, &[xi])?[0];
        tape.row_norm(g)?
    } else {
        tape.constant(Tensor::zeros(&[m]))?
    };
    let shifted = tape.add_scalar(norms, -1.0)?;
    let sq = tape.square(shifted)?;
    let pen = tape.scale(sq, lambda)?;
    let diff = tape.sub(df, dr)?;
    let per = tape.add(diff, pen)?;
    let loss = tape.mean(per)?;
    let out = CriticLoss {
        loss: tape.value(loss).item(),
        per_sample: tape.value(per).data().to_vec(),
        penalties: tape.value(pen).data().to_vec(),
        mean_real: tape.value(dr).mean(),
        mean_fake: tape.value(df).mean(),
        grads: Vec::new(),
    };
    let grads = tape.gradients_or_zero(loss, &pv)?;
    Ok(CriticLoss { grads, ..out })
}

/// Discriminator BCE (real = 1, fake = 0) averaged over all 2m samples,
/// computed from logits. Returns `(loss, grads, mean D(x), mean D(x̂))`.
pub fn dcgan_losses(critic: &Network, x_real: &Tensor, x_fake: &Tensor) -> Result<(f64, Vec<Tensor>, f64, f64), GanError> {
    let mut tape = Tape::new();
    let pv = critic.params.to_tape(&mut tape, true)?;
    let xr = tape.constant(x_real.clone())?;
    let xf = tape.constant(x_fake.clone())?;
    let lr = critic.forward(&mut tape, &pv, xr)?;
    let lf = critic.forward(&mut tape, &pv, xf)?;
    let neg = tape.neg(lr)?;
    let real_term = tape.softplus(neg)?;
    let fake_term = tape.softplus(lf)?;
    let sr = tape.sum(real_term)?;
    let sf = tape.sum(fake_term)?;
    let both = tape.add(sr, sf)?;
    let n = (tape.value(lr).len() + tape.value(lf).len()) as f64;
    let loss = tape.scale(both, 1.0 / n)?;
    let p_real = tape.value(lr).map(crate::tensor::sigmoid).mean();
    let p_fake = tape.value(lf).map(crate::tensor::sigmoid).mean();
    let value = tape.value(loss).item();
    let grads = tape.gradients_or_zero(loss, &pv)?;
    Ok((value, grads, p_real, p_fake))
}

/// Generator loss and gradients: `mean −D(G(z))` for WGAN-GP, the
/// non-saturating `mean −log σ(D(G(z)))` for DCGAN.
fn generator_loss(model: &GanModel, z: &Tensor) -> Result<(f64, Vec<Tensor>), GanError> {
    let mut tape = Tape::new();
    let gv = model.generator.params.to_tape(&mut tape, true)?;
    let cv = model.critic.params.to_tape(&mut tape, false)?;
    let zv = tape.constant(z.clone())?;
    let fake = model.generator.forward(&mut tape, &gv, zv)?;
    let score = model.critic.forward(&mut tape, &cv, fake)?;
    let loss = match model.config.variant {
        GanVariant::WganGp => {
            let m = tape.mean(score)?;
            tape.neg(m)?
        }
        GanVariant::Dcgan => {
            let neg = tape.neg(score)?;
            let sp = tape.softplus(neg)?;
            tape.mean(sp)?
        }
    };
    let value = tape.value(loss).item();
    Ok((value, tape.gradients_or_zero(loss, &gv)?))
}

/// Cycles over a data tensor in seeded shuffled order.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    data: Tensor,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(data: Tensor, seed: u64) -> Self {
        let n = data.shape().first().copied().unwrap_or(0);
        let mut s = Self { data, order: (0..n).collect(), pos: n, rng: rng::stream(seed, rng::streams::SHUFFLE) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The next `m` samples; reshuffles when a pass is exhausted.
    pub fn next_batch(&mut self, m: usize) -> Result<Tensor, GanError> {
        if self.order.len() < m {
            return Err(GanError::DataExhausted { have: self.order.len(), need: m });
        }
        if self.pos + m > self.order.len() {
            self.reshuffle();
        }
        let idx = &self.order[self.pos..self.pos + m];
        self.pos += m;
        Ok(self.data.select_rows(idx))
    }
}

/// Optimizer state and random streams for one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub critic_adam: AdamState,
    pub generator_adam: AdamState,
    pub sampler: BatchSampler,
    latent_rng: Rng,
    eps_rng: Rng,
}

impl TrainState {
    pub fn new(model: &GanModel, data: Tensor) -> Self {
        let seed = model.config.seed;
        Self {
            critic_adam: AdamState::new(&model.critic.params, model.config.adam),
            generator_adam: AdamState::new(&model.generator.params, model.config.adam),
            sampler: BatchSampler::new(data, seed),
            latent_rng: rng::stream(seed, rng::streams::LATENT),
            eps_rng: rng::stream(seed, rng::streams::EPSILON),
        }
    }
}

/// What one generator iteration observed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLog {
    pub mean_real_score: f64,
    pub mean_fake_score: f64,
    pub critic_loss: f64,
    pub gen_loss: f64,
}

fn fake_batch(model: &GanModel, m: usize, rng: &mut Rng) -> Result<Tensor, GanError> {
    let z = sample_latent(m, model.config.latent_dim, rng);
    Ok(model.generator.predict(&z, None, m)?)
}

/// `n_critic` critic updates, each on a fresh real batch, z and ε, then one
/// generator update.
pub fn wgan_train_step(model: &mut GanModel, state: &mut TrainState) -> Result<StepLog, GanError> {
    let m = model.config.batch_size;
    let mut log = StepLog::default();
    for _ in 0..model.config.n_critic {
        let x = state.sampler.next_batch(m)?;
        let fake = fake_batch(model, m, &mut state.latent_rng)?;
        let eps: Vec<f64> = (0..m).map(|_| state.eps_rng.random::<f64>()).collect();
        let xi = interpolate(&x, &fake, &eps)?;
        let cl = critic_loss(&model.critic, &x, &fake, &xi, model.config.lambda)?;
        adam_step(&mut model.critic.params, &cl.grads, &mut state.critic_adam)?;
        log.mean_real_score = cl.mean_real;
        log.mean_fake_score = cl.mean_fake;
        log.critic_loss = cl.loss;
    }
    let z = sample_latent(m, model.config.latent_dim, &mut state.latent_rng);
    let (gl, gg) = generator_loss(model, &z)?;
    adam_step(&mut model.generator.params, &gg, &mut state.generator_adam)?;
    log.gen_loss = gl;
    Ok(log)
}

/// One discriminator update then one non-saturating generator update.
pub fn dcgan_train_step(model: &mut GanModel, state: &mut TrainState) -> Result<StepLog, GanError> {
    let m = model.config.batch_size;
    let x = state.sampler.next_batch(m)?;
    let fake = fake_batch(model, m, &mut state.latent_rng)?;
    let (dl, dg, pr, pf) = dcgan_losses(&model.critic, &x, &fake)?;
    adam_step(&mut model.critic.params, &dg, &mut state.critic_adam)?;
    let z = sample_latent(m, model.config.latent_dim, &mut state.latent_rng);
    let (gl, gg) = generator_loss(model, &z)?;
    adam_step(&mut model.generator.params, &gg, &mut state.generator_adam)?;
    Ok(StepLog { mean_real_score: pr, mean_fake_score: pf, critic_loss: dl, gen_loss: gl })
}

fn step(model: &mut GanModel, state: &mut TrainState) -> Result<StepLog, GanError> {
    match model.config.variant {
        GanVariant::WganGp => wgan_train_step(model, state),
        GanVariant::Dcgan => dcgan_train_step(model, state),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_real_score: f64,
    pub mean_fake_score: f64,
    pub critic_loss: f64,
    pub gen_loss: f64,
    pub wall_time_s: f64,
    pub fid_inf: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// `(epoch, path)` of every saved checkpoint.
    pub checkpoints: Vec<(usize, PathBuf)>,
}

impl TrainLog {
    /// Columns `epoch,mean_real_score,mean_fake_score,gen_loss,fid_inf`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_real_score,mean_fake_score,gen_loss,fid_inf\n");
        for e in &self.epochs {
            let fid = e.fid_inf.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.mean_real_score, e.mean_fake_score, e.gen_loss, fid));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), GanError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn clock() -> impl FnMut() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64()
}

#[cfg(target_arch = "wasm32")]
fn clock() -> impl FnMut() -> f64 {
    || 0.0
}

/// Called at every checkpoint with the model and epoch; may return an FID∞.
pub type CheckpointProbe<'a> = dyn FnMut(&GanModel, usize) -> Result<Option<f64>, GanError> + 'a;

/// Trains on `data` (`[N, …sample shape]`) for the configured epochs of
/// `⌊N/m⌋` generator iterations. Checkpoints go to `out_dir` when given.
pub fn train_on_tensor(
    mut model: GanModel,
    data: Tensor,
    out_dir: Option<&Path>,
    mut probe: Option<&mut CheckpointProbe<'_>>,
) -> Result<(GanModel, TrainLog), GanError> {
    let cfg = model.config.clone();
    let n = data.shape().first().copied().unwrap_or(0);
    if n < 2 * cfg.batch_size {
        return Err(GanError::InsufficientSamples(format!("{n} samples for batch size {}", cfg.batch_size)));
    }
    let steps = n / cfg.batch_size;
    let mut state = TrainState::new(&model, data);
    let mut log = TrainLog::default();
    let mut elapsed = clock();

    let mut save = |model: &GanModel, epoch: usize, log: &mut TrainLog, name: String| -> Result<Option<f64>, GanError> {
        if let Some(dir) = out_dir {
            let path = dir.join(name);
            model.save(&path, epoch)?;
            log.checkpoints.push((epoch, path));
        }
        match probe.as_mut() {
            Some(p) => p(model, epoch),
            None => Ok(None),
        }
    };

    if cfg.checkpoint_every > 0 && cfg.epochs > 0 {
        save(&model, 0, &mut log, "epoch_00000.ckpt".into())?;
    }
    for epoch in 1..=cfg.epochs {
        let mut acc = StepLog::default();
        for _ in 0..steps {
            let s = step(&mut model, &mut state)?;
            acc.mean_real_score += s.mean_real_score;
            acc.mean_fake_score += s.mean_fake_score;
            acc.critic_loss += s.critic_loss;
            acc.gen_loss += s.gen_loss;
        }
        let k = steps as f64;
        let mut entry = EpochLog {
            epoch,
            mean_real_score: acc.mean_real_score / k,
            mean_fake_score: acc.mean_fake_score / k,
            critic_loss: acc.critic_loss / k,
            gen_loss: acc.gen_loss / k,
            wall_time_s: elapsed(),
            fid_inf: None,
        };
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
            entry.fid_inf = save(&model, epoch, &mut log, format!("epoch_{epoch:05}.ckpt"))?;
        }
        if epoch == cfg.epochs {
            entry.fid_inf = save(&model, epoch, &mut log, "final.ckpt".into())?;
        }
        log.epochs.push(entry);
    }
    if cfg.epochs == 0 {
        save(&model, 0, &mut log, "final.ckpt".into())?;
    }
    if let Some(dir) = out_dir {
        log.write_csv(&dir.join("train_log.csv"))?;
    }
    Ok((model, log))
}

/// Trains one GAN on the real GanTrain images of `label` at the configured size.
pub fn train_gan(
    manifest: &CorpusManifest,
    label: Label,
    config: &crate::gan::GanConfig,
    out_dir: Option<&Path>,
    probe: Option<&mut CheckpointProbe<'_>>,
) -> Result<(GanModel, TrainLog), GanError> {
    let images = manifest
        .select(Some(config.image_size), Some(label), Some(Origin::Real), |s| s == Some(Split::GanTrain))
        .map(|r| manifest.load_image(r))
        .collect::<Result<Vec<_>, _>>()?;
    if images.len() < 2 * config.batch_size {
        return Err(GanError::InsufficientSamples(format!(
            "{} {label} GanTrain images at {}px, need {}",
            images.len(),
            config.image_size,
            2 * config.batch_size
        )));
    }
    let data = images_to_tensor(&images)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let model = GanModel::new(config.clone(), Some(label))?;
    train_on_tensor(model, data, out_dir, probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::{Architecture, GanConfig};
    use crate::tensor::{Layer, NetSpec, ParamSet};

    fn toy_config(variant: GanVariant) -> GanConfig {
        GanConfig {
            arch: Architecture::Mlp { hidden: 8 },
            image_size: 1,
            latent_dim: 2,
            batch_size: 8,
            epochs: 2,
            variant,
            ..Default::default()
        }
    }

    fn toy_data(n: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 99);
        Tensor::new(vec![n, 1], (0..n).map(|_| 4.0 + 0.5 * r.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    }

    /// `D(x) = w·x + b` on one input.
    fn linear_critic(w: f64, b: f64) -> Network {
        let spec = NetSpec::new(vec![1], vec![Layer::dense("out", 1, 1)]);
        let mut p = ParamSet::new();
        p.insert("out.weight", Tensor::new(vec![1, 1], vec![w]).unwrap()).unwrap();
        p.insert("out.bias", Tensor::vector(vec![b])).unwrap();
        Network::new(spec, p).unwrap()
    }

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn latent_shape_and_determinism() {
        let a = sample_latent(3, 5, &mut rng::stream(1, rng::streams::LATENT));
        let b = sample_latent(3, 5, &mut rng::stream(1, rng::streams::LATENT));
        assert_eq!(a.shape(), &[3, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn latent_mean_within_clt_bound() {
        let z = sample_latent(100_000, 1, &mut rng::stream(8, rng::streams::LATENT));
        assert!(z.mean().abs() <= 4.0 / (1e5f64).sqrt());
    }

    #[test]
    fn interpolation_endpoints() {
        let x = col(&[0.0, 1.0]);
        let f = col(&[10.0, 3.0]);
        assert_eq!(interpolate(&x, &f, &[1.0, 1.0]).unwrap(), x);
        assert_eq!(interpolate(&x, &f, &[0.0, 0.0]).unwrap(), f);
        assert_eq!(interpolate(&x, &f, &[0.5, 0.5]).unwrap().data()[0], 5.0);
        assert!(interpolate(&x, &col(&[1.0]), &[0.5]).is_err());
    }

    #[test]
    fn constant_critic_loss_is_lambda() {
        let c = linear_critic(0.0, 0.7);
        let l = critic_loss(&c, &col(&[1.0, 2.0]), &col(&[0.0, 5.0]), &col(&[0.3, 4.0]), 10.0).unwrap();
        assert!(l.per_sample.iter().all(|&v| v == 10.0));
        assert_eq!(l.loss, 10.0);
    }

    #[test]
    fn unit_slope_critic_has_no_penalty() {
        let c = linear_critic(1.0, 0.0);
        let l = critic_loss(&c, &col(&[1.0]), &col(&[0.0]), &col(&[0.5]), 10.0).unwrap();
        assert_eq!(l.penalties, vec![0.0]);
        assert_eq!(l.loss, -1.0);
    }

    #[test]
    fn slope_two_critic() {
        let c = linear_critic(2.0, 0.0);
        let (x, xh) = (1.5, -0.25);
        let l = critic_loss(&c, &col(&[x]), &col(&[xh]), &col(&[0.0]), 10.0).unwrap();
        assert!((l.loss - (2.0 * (xh - x) + 10.0)).abs() < 1e-12);
        // ∂/∂w [w(x̂ − x) + λ(|w| − 1)²] = (x̂ − x) + 2λ(w − 1)
        assert!((l.grads[0].item() - ((xh - x) + 20.0)).abs() < 1e-12);
        assert!(l.grads[1].item().abs() < 1e-12);
    }

    #[test]
    fn dcgan_half_discriminator_is_ln2() {
        let d = linear_critic(0.0, 0.0);
        let (loss, _, pr, pf) = dcgan_losses(&d, &col(&[1.0, 2.0, 3.0]), &col(&[0.0, 0.0, 9.0])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!((pr, pf), (0.5, 0.5));
    }

    #[test]
    fn perfect_discriminator_limits() {
        let d = linear_critic(10.0, -20.0);
        let (loss, _, _, _) = dcgan_losses(&d, &col(&[4.0; 4]), &col(&[0.0; 4])).unwrap();
        assert!(loss < 1e-8);
        let model = GanModel {
            critic: d,
            ..GanModel::new(GanConfig { batch_size: 4, ..toy_config(GanVariant::Dcgan) }, None).unwrap()
        };
        let (gl, _) = generator_loss(&model, &sample_latent(4, 2, &mut rng::stream(0, 0))).unwrap();
        assert!(gl > 15.0);
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        for variant in [GanVariant::WganGp, GanVariant::Dcgan] {
            let mut m = GanModel::new(GanConfig { image_size: 2, ..toy_config(variant) }, None).unwrap();
            for (k, v) in m.generator.params.values_mut().chain(m.critic.params.values_mut()).enumerate() {
                for (i, x) in v.iter_mut().enumerate() {
                    *x = ((i + 3 * k) as f64 * 1.3).sin() * 0.7;
                }
            }
            let z = sample_latent(3, 2, &mut rng::stream(5, 0));
            let (_, grads) = generator_loss(&m, &z).unwrap();
            let h = 1e-6;
            for pi in 0..m.generator.params.len() {
                for j in 0..m.generator.params.tensors()[pi].len() {
                    let shifted = |d: f64| {
                        let mut p = m.clone();
                        p.generator.params.values_mut().nth(pi).unwrap()[j] += d;
                        generator_loss(&p, &z).unwrap().0
                    };
                    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                    let an = grads[pi].data()[j];
                    assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1.0), "{variant} {pi}/{j}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn wgan_step_ratio() {
        let mut m = GanModel::new(toy_config(GanVariant::WganGp), None).unwrap();
        let mut s = TrainState::new(&m, toy_data(64, 0));
        wgan_train_step(&mut m, &mut s).unwrap();
        assert_eq!((s.critic_adam.step, s.generator_adam.step), (5, 1));
        let mut m = GanModel::new(toy_config(GanVariant::Dcgan), None).unwrap();
        let mut s = TrainState::new(&m, toy_data(64, 0));
        dcgan_train_step(&mut m, &mut s).unwrap();
        assert_eq!((s.critic_adam.step, s.generator_adam.step), (1, 1));
    }

    #[test]
    fn epoch_counters() {
        let cfg = GanConfig { epochs: 3, ..toy_config(GanVariant::WganGp) };
        let model = GanModel::new(cfg, None).unwrap();
        let data = toy_data(20, 1);
        let mut state = TrainState::new(&model, data.clone());
        let mut m = model.clone();
        let steps = 20 / 8;
        for _ in 0..3 * steps {
            wgan_train_step(&mut m, &mut state).unwrap();
        }
        assert_eq!(state.critic_adam.step, 3 * 2 * 5);
        assert_eq!(state.generator_adam.step, 3 * 2);
        let (trained, log) = train_on_tensor(model, data, None, None).unwrap();
        assert_eq!(trained, m);
        assert_eq!(log.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut cfg = toy_config(GanVariant::WganGp);
        cfg.adam.lr = 0.0;
        let model = GanModel::new(cfg, None).unwrap();
        let (after, log) = train_on_tensor(model.clone(), toy_data(32, 2), None, None).unwrap();
        assert_eq!(after, model);
        assert_eq!(log.epochs.len(), 2);
        assert!(log.epochs.iter().all(|e| e.critic_loss.is_finite()));
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let cfg = GanConfig { epochs: 0, ..toy_config(GanVariant::WganGp) };
        let model = GanModel::new(cfg, None).unwrap();
        let (after, log) = train_on_tensor(model.clone(), toy_data(32, 2), None, None).unwrap();
        assert_eq!(after, model);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn too_little_data() {
        let model = GanModel::new(toy_config(GanVariant::WganGp), None).unwrap();
        assert!(matches!(train_on_tensor(model, toy_data(15, 0), None, None), Err(GanError::InsufficientSamples(_))));
        let mut s = BatchSampler::new(toy_data(3, 0), 0);
        assert!(matches!(s.next_batch(4), Err(GanError::DataExhausted { have: 3, need: 4 })));
    }

    #[test]
    fn sampler_covers_each_pass() {
        let mut s = BatchSampler::new(col(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), 3);
        let mut seen: Vec<f64> = (0..3).flat_map(|_| s.next_batch(2).unwrap().into_data()).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn checkpoints_and_log_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GanConfig { epochs: 4, checkpoint_every: 2, ..toy_config(GanVariant::Dcgan) };
        let model = GanModel::new(cfg, None).unwrap();
        let mut calls = Vec::new();
        let mut probe = |_: &GanModel, e: usize| -> Result<Option<f64>, GanError> {
            calls.push(e);
            Ok(Some(e as f64))
        };
        let (_, log) = train_on_tensor(model, toy_data(32, 5), Some(dir.path()), Some(&mut probe)).unwrap();
        assert_eq!(calls, vec![0, 2, 4]);
        let epochs: Vec<usize> = log.checkpoints.iter().map(|c| c.0).collect();
        assert_eq!(epochs, vec![0, 2, 4]);
        assert!(dir.path().join("final.ckpt").exists());
        let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(2).unwrap().ends_with(",2"));
    }
}
