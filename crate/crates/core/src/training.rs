//! Denoising score matching objectives and the training loop.
//!
//! All objectives regress the network on the corruption noise in some
//! weighting; they differ in how the residual is scaled:
//!
//! * `RescaledDsm`: `|| eta/sigma_t + sigma_t F(v, t) ||^2`, bounded in t on
//!   both ends, the default for annealed Langevin models.
//! * `PlainDsm`: `|| eta + F(v, t) ||^2`, the unscaled regression.
//! * `PrecondDsm`: `|| C^{-1/2}(eta - F(v)) ||^2`. Only meaningful when the
//!   residual stays in the Cameron-Martin space of C; its per-resolution
//!   behaviour is what the regularity experiment measures.
//! * `DdpmW2` / `DdpmKl`: the two DDPM objectives; `DdpmKl` trains a network
//!   G with the model output post-composed as `F = C^{1/2} G`. Both are
//!   undefined at t = 1 (the weight divides by 1 - alpha_bar_0 = 0), so
//!   levels are drawn from 2..=T.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::{Corruption, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fno::FnoModel;
use crate::grf::GrfSampler;
use crate::grid::{l2_inner, Dataset, GridFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    RescaledDsm,
    PlainDsm,
    PrecondDsm,
    DdpmW2,
    DdpmKl,
}

impl LossKind {
    pub fn is_ddpm(self) -> bool {
        matches!(self, LossKind::DdpmW2 | LossKind::DdpmKl)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub corruption: Corruption,
}

impl LossSpec {
    pub fn new(kind: LossKind, corruption: Corruption) -> Result<Self> {
        let ddpm_schedule = matches!(corruption.schedule, NoiseSchedule::Ddpm { .. });
        if kind.is_ddpm() != ddpm_schedule {
            return Err(Error::InvalidConfig(format!(
                "loss kind {kind:?} does not match the schedule type"
            )));
        }
        if kind.is_ddpm() && corruption.t_count() < 2 {
            return Err(Error::InvalidConfig("DDPM losses need at least two levels".into()));
        }
        if corruption.white_noise && matches!(kind, LossKind::PrecondDsm | LossKind::DdpmKl) {
            return Err(Error::InvalidConfig(
                "C^{-1}-weighted losses are undefined under white noise".into(),
            ));
        }
        Ok(Self { kind, corruption })
    }

    /// Value fed into the conditioning channel: log sigma_t for annealed
    /// schedules, t/T for DDPM.
    pub fn cond_value(&self, t: usize) -> Result<f64> {
        match &self.corruption.schedule {
            NoiseSchedule::Ncsn { .. } => Ok(self.corruption.schedule.sigma(t)?.ln()),
            NoiseSchedule::Ddpm { .. } => Ok(t as f64 / self.corruption.t_count() as f64),
        }
    }

    pub fn draw_level(&self, rng: &mut impl Rng) -> usize {
        let lo = if self.kind.is_ddpm() { 2 } else { 1 };
        rng.gen_range(lo..=self.corruption.t_count())
    }

    pub fn prepare(
        &self,
        u: &GridFunction,
        t: usize,
        sampler: &GrfSampler,
        rng: &mut impl Rng,
    ) -> Result<PreparedExample> {
        if self.kind.is_ddpm() && t < 2 {
            return Err(Error::InvalidConfig("DDPM losses are undefined at t = 1".into()));
        }
        let s = self.corruption.corrupt_with(u, t, sampler, rng)?;
        Ok(PreparedExample {
            t,
            cond: self.cond_value(t)?,
            input: s.noisy,
            noise: s.noise,
            data: if self.kind.is_ddpm() { Some(u.clone()) } else { None },
        })
    }
}

#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub t: usize,
    pub cond: f64,
    /// Model input: the corrupted field.
    pub input: GridFunction,
    pub noise: GridFunction,
    /// Clean datum, kept only for the KL objective.
    pub data: Option<GridFunction>,
}

/// Mean loss over the batch and its gradient in the flat parameter vector.
pub fn batch_value_and_grad(
    model: &FnoModel,
    spec: &LossSpec,
    batch: &[PreparedExample],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let inputs: Vec<(GridFunction, f64)> =
        batch.iter().map(|e| (e.input.clone(), e.cond)).collect();
    let nb = batch.len() as f64;
    model.value_and_grad(&inputs, |outputs| {
        let mut value = 0.0;
        let mut grads = Vec::with_capacity(outputs.len());
        for (e, y) in batch.iter().zip(outputs) {
            let cv = y.domain.cell_volume(y.resolution);
            match spec.kind {
                LossKind::RescaledDsm => {
                    // The network is parametrized to emit the unit-scale
                    // quantity G = sigma F directly, so every level carries
                    // the same gradient signal; the loss is still
                    // || eta/sigma + sigma F ||^2.
                    let sigma = spec.corruption.schedule.sigma(e.t)?;
                    let mut r = y.clone();
                    r.axpy(1.0 / sigma, &e.noise)?;
                    value += l2_inner(&r, &r)? / nb;
                    grads.push(r.scaled(2.0 * cv / nb));
                }
                LossKind::PlainDsm => {
                    let r = e.noise.add(y)?;
                    value += l2_inner(&r, &r)? / nb;
                    grads.push(r.scaled(2.0 * cv / nb));
                }
                LossKind::PrecondDsm => {
                    let r = e.noise.sub(y)?;
                    let cinv_r = spec.corruption.cov.apply_power(&r, -1.0)?;
                    value += l2_inner(&cinv_r, &r)? / nb;
                    grads.push(cinv_r.scaled(-2.0 * cv / nb));
                }
                LossKind::DdpmW2 => {
                    let beta = spec.corruption.schedule.beta(e.t)?;
                    let abar = spec.corruption.schedule.alpha_bar(e.t)?;
                    let w = beta * beta / ((1.0 - beta) * (1.0 - abar));
                    // e.noise is sqrt(1 - abar) * eta; the target is eta.
                    let eta = e.noise.scaled(1.0 / (1.0 - abar).sqrt());
                    let r = y.sub(&eta)?;
                    value += w * l2_inner(&r, &r)? / nb;
                    grads.push(r.scaled(2.0 * w * cv / nb));
                }
                LossKind::DdpmKl => {
                    let beta = spec.corruption.schedule.beta(e.t)?;
                    let abar = spec.corruption.schedule.alpha_bar(e.t)?;
                    let abar_prev = spec.corruption.schedule.alpha_bar(e.t - 1)?;
                    let w = (1.0 - abar) / ((1.0 - abar_prev) * beta);
                    let u = e
                        .data
                        .as_ref()
                        .ok_or_else(|| Error::InvalidConfig("KL example lacks clean datum".into()))?;
                    let m = u.scaled(abar_prev.sqrt() * beta / (1.0 - abar));
                    let r = m.sub(&spec.corruption.cov.apply_power(y, 0.5)?)?;
                    let cinv_r = spec.corruption.cov.apply_power(&r, -1.0)?;
                    value += w * l2_inner(&cinv_r, &r)? / nb;
                    grads.push(spec.corruption.cov.apply_power(&r, -0.5)?.scaled(-2.0 * w * cv / nb));
                }
            }
        }
        Ok((value, grads))
    })
}

pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

fn default_epochs() -> usize {
    300
}
fn default_lr() -> f64 {
    1e-3
}
fn default_halving() -> usize {
    50
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Learning rate halves every this many epochs.
    #[serde(default = "default_halving")]
    pub lr_halving_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            lr_halving_every: default_halving(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// (epoch, mean loss over the epoch, learning rate).
    pub history: Vec<(usize, f64, f64)>,
}

impl TrainReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut s = String::from("epoch,mean_loss,lr\n");
        for (e, l, lr) in &self.history {
            s.push_str(&format!("{e},{l},{lr}\n"));
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

pub fn train(
    model: &mut FnoModel,
    spec: &LossSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) || cfg.lr_halving_every == 0 {
        return Err(Error::InvalidConfig("bad training hyperparameters".into()));
    }
    let sampler = GrfSampler::new(&spec.corruption.cov, data.resolution);
    let mut adam = Adam::new(model.params.len());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * 0.5f64.powi((epoch / cfg.lr_halving_every) as i32);
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let t = spec.draw_level(rng);
                batch.push(spec.prepare(&data.samples[i], t, &sampler, rng)?);
            }
            let (value, grad) = batch_value_and_grad(model, spec, &batch)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at epoch {epoch}"
                )));
            }
            adam.step(&mut model.params, &grad, lr);
            epoch_loss += value;
            batches += 1;
        }
        report.history.push((epoch, epoch_loss / batches as f64, lr));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fno::{Activation, FnoConfig};
    use crate::grf::MaternCovariance;
    use crate::grid::DomainSpec;
    use crate::spectral::{forward, Coeffs};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn circle_cov(sigma: f64, tau: f64, alpha: f64) -> MaternCovariance {
        MaternCovariance::new(DomainSpec::circle(1.0), sigma, tau, alpha).unwrap()
    }

    fn ncsn_spec(kind: LossKind) -> LossSpec {
        let cov = circle_cov(0.5, 1.0, 1.0);
        let c = Corruption::new(NoiseSchedule::geometric(1.0, 0.01, 10).unwrap(), cov, None)
            .unwrap();
        LossSpec::new(kind, c).unwrap()
    }

    fn ddpm_spec(kind: LossKind) -> LossSpec {
        let cov = circle_cov(0.5, 1.0, 1.0);
        let c = Corruption::new(NoiseSchedule::Ddpm { betas: vec![0.05; 8] }, cov, None).unwrap();
        LossSpec::new(kind, c).unwrap()
    }

    fn zero_model(domain: DomainSpec) -> FnoModel {
        FnoModel::zeros(FnoConfig {
            domain,
            modes: 3,
            width: 4,
            layers: 2,
            activation: Activation::Gelu,
        })
        .unwrap()
    }

    #[test]
    fn kind_schedule_mismatch_rejected() {
        let cov = circle_cov(0.5, 1.0, 1.0);
        let ncsn = Corruption::new(NoiseSchedule::geometric(1.0, 0.01, 10).unwrap(), cov, None)
            .unwrap();
        assert!(LossSpec::new(LossKind::DdpmW2, ncsn.clone()).is_err());
        let ddpm = Corruption::new(NoiseSchedule::Ddpm { betas: vec![0.1; 4] }, cov, None)
            .unwrap();
        assert!(LossSpec::new(LossKind::RescaledDsm, ddpm).is_err());
        assert!(LossSpec::new(LossKind::PlainDsm, ncsn).is_ok());
    }

    #[test]
    fn zero_model_expected_losses() {
        // With F = 0: rescaled loss = E||eta/sigma||^2 = tr C,
        // plain loss = sigma_t^2 tr C.
        let res = 32;
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for (kind, t, factor) in [
            (LossKind::RescaledDsm, 3usize, 1.0),
            (LossKind::PlainDsm, 3, 0.0), // factor filled below
        ] {
            let spec = ncsn_spec(kind);
            let model = zero_model(spec.corruption.cov.domain);
            let sampler = GrfSampler::new(&spec.corruption.cov, res);
            let u = GridFunction::zeros(spec.corruption.cov.domain, res).unwrap();
            let n_mc = 4000;
            let mut acc = 0.0;
            for _ in 0..n_mc {
                let batch = [spec.prepare(&u, t, &sampler, &mut rng).unwrap()];
                let (v, _) = batch_value_and_grad(&model, &spec, &batch).unwrap();
                acc += v;
            }
            let sigma = spec.corruption.schedule.sigma(t).unwrap();
            let expected = spec.corruption.cov.trace(res)
                * if factor == 1.0 { 1.0 } else { sigma * sigma };
            let emp = acc / n_mc as f64;
            assert!(
                (emp - expected).abs() / expected < 0.05,
                "{kind:?}: {emp} vs {expected}"
            );
        }
    }

    #[test]
    fn precond_loss_counts_modes() {
        // F = 0 gives E <C^{-1} eta, eta> = sigma_t^2 * (number of modes),
        // which doubles with resolution while the plain loss stays flat.
        let spec = ncsn_spec(LossKind::PrecondDsm);
        let model = zero_model(spec.corruption.cov.domain);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let t = 2;
        let sigma = spec.corruption.schedule.sigma(t).unwrap();
        let mut means = Vec::new();
        for res in [32usize, 64] {
            let sampler = GrfSampler::new(&spec.corruption.cov, res);
            let u = GridFunction::zeros(spec.corruption.cov.domain, res).unwrap();
            let n_mc = 2000;
            let mut acc = 0.0;
            for _ in 0..n_mc {
                let batch = [spec.prepare(&u, t, &sampler, &mut rng).unwrap()];
                acc += batch_value_and_grad(&model, &spec, &batch).unwrap().0;
            }
            let emp = acc / n_mc as f64;
            // Periodic grid at res n carries n - 1 nonzero modes.
            let expected = sigma * sigma * (res - 1) as f64;
            assert!((emp - expected).abs() / expected < 0.1, "res {res}: {emp} vs {expected}");
            means.push(emp);
        }
        assert!(means[1] / means[0] > 1.8);
    }

    #[test]
    fn ddpm_w2_weight_value() {
        let spec = ddpm_spec(LossKind::DdpmW2);
        // beta = 0.05 everywhere; at t = 4 the weight is
        // beta^2 / ((1 - beta)(1 - 0.95^4)).
        let beta: f64 = 0.05;
        let abar = 0.95f64.powi(4);
        let w = beta * beta / ((1.0 - beta) * (1.0 - abar));
        // Check through the loss: with F = 0 and a known noise, the loss is
        // w * ||eta||^2.
        let model = zero_model(spec.corruption.cov.domain);
        let sampler = GrfSampler::new(&spec.corruption.cov, 32);
        let u = GridFunction::zeros(spec.corruption.cov.domain, 32).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let e = spec.prepare(&u, 4, &sampler, &mut rng).unwrap();
        let eta = e.noise.scaled(1.0 / (1.0 - abar).sqrt());
        let expected = w * l2_inner(&eta, &eta).unwrap();
        let (v, _) = batch_value_and_grad(&model, &spec, &[e]).unwrap();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
    }

    #[test]
    fn ddpm_levels_skip_t_equals_one() {
        let spec = ddpm_spec(LossKind::DdpmKl);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..200 {
            assert!(spec.draw_level(&mut rng) >= 2);
        }
        let sampler = GrfSampler::new(&spec.corruption.cov, 32);
        let u = GridFunction::zeros(spec.corruption.cov.domain, 32).unwrap();
        assert!(spec.prepare(&u, 1, &sampler, &mut rng).is_err());
    }

    #[test]
    fn adam_steps() {
        let mut params = vec![1.0, -2.0, 0.5];
        let mut adam = Adam::new(3);
        adam.step(&mut params, &[0.0, 0.0, 0.0], 1e-2);
        assert_eq!(params, vec![1.0, -2.0, 0.5]);

        // Constant gradient: the first update has magnitude ~ lr.
        let mut adam = Adam::new(1);
        let mut p = vec![0.0];
        adam.step(&mut p, &[3.0], 1e-2);
        assert_abs_diff_eq!(p[0], -1e-2, epsilon = 1e-8);
        adam.step(&mut p, &[3.0], 1e-2);
        assert_abs_diff_eq!(p[0], -2e-2, epsilon = 1e-7);
    }

    #[test]
    fn regression_oracle_slope_per_mode() {
        // For v = u + sigma eta with independent Gaussian coefficients, the
        // best linear predictor of -eta_k from (v_k - m_k) has slope
        // -sigma^2 c_k / (d_k + sigma^2 c_k).
        let dom = DomainSpec::circle(1.0);
        let data_cov = MaternCovariance::new(dom, 1.0, 1.0, 2.0).unwrap();
        let noise_cov = MaternCovariance::new(dom, 0.5, 1.0, 1.0).unwrap();
        let sched = NoiseSchedule::geometric(1.0, 0.01, 10).unwrap();
        let corr = Corruption::new(sched, noise_cov, None).unwrap();
        let res = 32;
        let t = 2;
        let sigma = corr.schedule.sigma(t).unwrap();
        let data_sampler = GrfSampler::new(&data_cov, res);
        let noise_sampler = GrfSampler::new(&noise_cov, res);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n_mc = 100_000;
        let bins = [1usize, 2, 5];
        let mut sxy = vec![0.0; bins.len()];
        let mut sxx = vec![0.0; bins.len()];
        for _ in 0..n_mc {
            let u = data_sampler.sample(None, &mut rng).unwrap();
            let s = corr.corrupt_with(&u, t, &noise_sampler, &mut rng).unwrap();
            let vc = forward(&s.noisy).unwrap();
            let ec = forward(&s.noise).unwrap();
            if let (Coeffs::Complex(v), Coeffs::Complex(e)) = (&vc.coeffs, &ec.coeffs) {
                for (i, &b) in bins.iter().enumerate() {
                    // Real parts of a mean-zero mode.
                    sxy[i] += v[b].re * (-e[b].re);
                    sxx[i] += v[b].re * v[b].re;
                }
            }
        }
        for (i, &b) in bins.iter().enumerate() {
            let slope = sxy[i] / sxx[i];
            let k = [b as i64, 0];
            let d = data_cov.eigenvalue(k);
            let c = noise_cov.eigenvalue(k);
            let expected = -sigma * sigma * c / (d + sigma * sigma * c);
            assert!(
                (slope - expected).abs() / expected.abs() < 0.03,
                "mode {b}: slope {slope} vs {expected}"
            );
        }
    }

    #[test]
    fn training_runs_and_reports() {
        let dom = DomainSpec::circle(1.0);
        let data_cov = MaternCovariance::new(dom, 1.0, 1.0, 2.0).unwrap();
        let spec = ncsn_spec(LossKind::RescaledDsm);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut data = Dataset::new(dom, 16).unwrap();
        for _ in 0..16 {
            data.push(data_cov.sample(None, 16, &mut rng).unwrap()).unwrap();
        }
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 2e-3,
            lr_halving_every: 20,
            seed: 0,
        };
        let mut model =
            FnoModel::init(zero_model(dom).config, &mut ChaCha20Rng::seed_from_u64(7)).unwrap();
        let report = train(&mut model, &spec, &data, &cfg, &mut rng).unwrap();
        assert_eq!(report.history.len(), 30);
        let first = report.history[0].1;
        let last = report.history[29].1;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        // Halving kicks in at epoch 20.
        assert_abs_diff_eq!(report.history[19].2, 2e-3, epsilon = 1e-12);
        assert_abs_diff_eq!(report.history[20].2, 1e-3, epsilon = 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("loss.csv");
        report.write_csv(&csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 31);
        assert!(text.starts_with("epoch,mean_loss,lr\n"));
    }

    #[test]
    fn training_deterministic_under_seed() {
        let dom = DomainSpec::circle(1.0);
        let data_cov = MaternCovariance::new(dom, 1.0, 1.0, 2.0).unwrap();
        let spec = ncsn_spec(LossKind::PlainDsm);
        let mut data = Dataset::new(dom, 16).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..8 {
            data.push(data_cov.sample(None, 16, &mut rng).unwrap()).unwrap();
        }
        let cfg = TrainConfig { epochs: 3, batch_size: 4, ..Default::default() };
        let run = |seed: u64| {
            let mut model =
                FnoModel::init(zero_model(dom).config, &mut ChaCha20Rng::seed_from_u64(9))
                    .unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            train(&mut model, &spec, &data, &cfg, &mut rng).unwrap();
            model.params
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }
}
