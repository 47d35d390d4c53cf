//! Annealed Langevin and DDPM ancestral samplers.
//!
//! Score conventions. A model exposes two related quantities at level t:
//!
//! * `noise_prediction(v, t)`: the posterior expectation `E[-eta_t | v]`,
//!   the quantity the regression objectives actually fit;
//! * `langevin_drift(v, t) = noise_prediction / sigma_t^2`, which equals the
//!   preconditioned score `C grad log p_t(v)` and is what the Langevin
//!   update consumes. Conflating the two changes the stationary law by a
//!   factor sigma_t^2 per mode, so the split is kept explicit.
//!
//! The Euler update is `u += (h/2) drift + sqrt(h) xi`, `xi ~ N(0, C)`,
//! `h_t = eps sigma_t^2 / sigma_T^2`. The Crank-Nicolson update treats the
//! reference Gaussian `N(0, sigma_t^2 C)` implicitly:
//! `u' = u + (2h/(2+h)) sigma_t^2 drift(u) + beta sigma_t xi` with
//! `beta = sqrt(8h)/(2+h)`; for an exactly Gaussian target the reference
//! measure is invariant for every step size, and h = 2 resamples it.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::{Corruption, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fno::FnoModel;
use crate::grf::{GrfSampler, MaternCovariance, WhiteNoise};
use crate::grid::{Dataset, GridFunction};
use crate::spectral;
use crate::training::{LossKind, LossSpec};

pub trait ScoreModel: Sync {
    /// E[-eta_t | v].
    fn noise_prediction(&self, v: &GridFunction, t: usize) -> Result<GridFunction>;
    fn sigma(&self, t: usize) -> Result<f64>;
    fn t_count(&self) -> usize;

    fn langevin_drift(&self, v: &GridFunction, t: usize) -> Result<GridFunction> {
        let s = self.sigma(t)?;
        Ok(self.noise_prediction(v, t)?.scaled(1.0 / (s * s)))
    }
}

/// Predicts the forward noise eta from u_t; what ancestral DDPM consumes.
pub trait DdpmModel: Sync {
    fn eta_prediction(&self, u: &GridFunction, t: usize) -> Result<GridFunction>;
}

/// Trained network plus the objective it was trained under; the objective
/// fixes how raw outputs map onto the score conventions above.
pub struct FnoScore {
    pub model: FnoModel,
    pub spec: LossSpec,
}

impl FnoScore {
    fn raw(&self, v: &GridFunction, t: usize) -> Result<GridFunction> {
        self.model.forward(v, self.spec.cond_value(t)?)
    }
}

impl ScoreModel for FnoScore {
    fn noise_prediction(&self, v: &GridFunction, t: usize) -> Result<GridFunction> {
        let y = self.raw(v, t)?;
        match self.spec.kind {
            // Trained target -eta/sigma (unit scale at every level).
            LossKind::RescaledDsm => {
                let s = self.sigma(t)?;
                Ok(y.scaled(s))
            }
            // Trained target -eta.
            LossKind::PlainDsm => Ok(y),
            // Trained target +eta.
            LossKind::PrecondDsm => Ok(y.scaled(-1.0)),
            LossKind::DdpmW2 | LossKind::DdpmKl => Err(Error::InvalidConfig(
                "DDPM-trained models drive the ancestral sampler, not Langevin".into(),
            )),
        }
    }

    fn sigma(&self, t: usize) -> Result<f64> {
        self.spec.corruption.schedule.sigma(t)
    }

    fn t_count(&self) -> usize {
        self.spec.corruption.t_count()
    }
}

impl DdpmModel for FnoScore {
    fn eta_prediction(&self, u: &GridFunction, t: usize) -> Result<GridFunction> {
        let y = self.raw(u, t)?;
        let sched = &self.spec.corruption.schedule;
        match self.spec.kind {
            LossKind::DdpmW2 => Ok(y),
            LossKind::DdpmKl => {
                // The network G fits sqrt(abar_{t-1}) beta_t / (1 - abar_t)
                // E[u | u_t] through C^{1/2}; invert that affinely.
                let beta = sched.beta(t)?;
                let abar = sched.alpha_bar(t)?;
                let abar_prev = if t == 1 { 1.0 } else { sched.alpha_bar(t - 1)? };
                let mean_part = self.spec.corruption.cov.apply_power(&y, 0.5)?;
                let u_hat = mean_part.scaled((1.0 - abar) / (abar_prev.sqrt() * beta));
                let mut eta = u.clone();
                eta.axpy(-abar.sqrt(), &u_hat)?;
                Ok(eta.scaled(1.0 / (1.0 - abar).sqrt()))
            }
            _ => Err(Error::InvalidConfig(
                "Langevin-trained models do not define an ancestral update".into(),
            )),
        }
    }
}

/// Closed-form score for Gaussian data u ~ N(mean, data_cov) under
/// v = u + sigma_t eta. Per mode:
/// `E[-eta | v] = -sigma_t^2 c_k / (d_k + sigma_t^2 c_k) (v_k - m_k)`.
pub struct OracleScore {
    pub data_mean: Option<GridFunction>,
    pub data_cov: MaternCovariance,
    pub corruption: Corruption,
}

impl OracleScore {
    pub fn new(
        data_mean: Option<GridFunction>,
        data_cov: MaternCovariance,
        corruption: Corruption,
    ) -> Result<Self> {
        if !matches!(corruption.schedule, NoiseSchedule::Ncsn { .. }) {
            return Err(Error::InvalidConfig("oracle score expects an annealed schedule".into()));
        }
        if data_cov.domain != corruption.cov.domain {
            return Err(Error::ShapeMismatch("data and noise covariances disagree on domain".into()));
        }
        Ok(Self { data_mean, data_cov, corruption })
    }
}

impl ScoreModel for OracleScore {
    fn noise_prediction(&self, v: &GridFunction, t: usize) -> Result<GridFunction> {
        let sigma = self.sigma(t)?;
        let s2 = sigma * sigma;
        let r = match &self.data_mean {
            Some(m) => v.sub(m)?,
            None => v.clone(),
        };
        spectral::apply_multiplier(&r, |k| {
            let d = self.data_cov.eigenvalue(k);
            let c = self.corruption.cov.power_multiplier(k, 1.0);
            if d + s2 * c == 0.0 {
                0.0
            } else {
                -s2 * c / (d + s2 * c)
            }
        })
    }

    fn sigma(&self, t: usize) -> Result<f64> {
        self.corruption.schedule.sigma(t)
    }

    fn t_count(&self) -> usize {
        self.corruption.t_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Euler,
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    /// xi ~ N(0, C), the function-space algorithm.
    Covariance,
    /// Pointwise i.i.d. noise; the finite-dimensional baseline.
    White,
    /// Deterministic dynamics, for debugging fixed points.
    Off,
}

fn default_m_steps() -> usize {
    200
}
fn default_epsilon() -> f64 {
    2e-5
}
fn default_step() -> StepKind {
    StepKind::Euler
}
fn default_noise() -> NoiseMode {
    NoiseMode::Covariance
}
fn default_chains() -> usize {
    1
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_m_steps")]
    pub m_steps: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_step")]
    pub step: StepKind,
    #[serde(default = "default_noise")]
    pub noise: NoiseMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_chains")]
    pub chains: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            m_steps: default_m_steps(),
            epsilon: default_epsilon(),
            step: default_step(),
            noise: default_noise(),
            seed: 0,
            chains: default_chains(),
        }
    }
}

/// h_t = eps sigma_t^2 / sigma_T^2; equals eps at the final level.
pub fn step_size(epsilon: f64, sigma_t: f64, sigma_last: f64) -> f64 {
    epsilon * sigma_t * sigma_t / (sigma_last * sigma_last)
}

fn draw_noise(
    mode: NoiseMode,
    sampler: &GrfSampler,
    white: &WhiteNoise,
    resolution: usize,
    rng: &mut impl Rng,
) -> Result<Option<GridFunction>> {
    match mode {
        NoiseMode::Covariance => Ok(Some(sampler.sample(None, rng)?)),
        NoiseMode::White => Ok(Some(white.sample(resolution, rng)?)),
        NoiseMode::Off => Ok(None),
    }
}

/// One Euler step: u += (h/2) drift + sqrt(h) xi.
pub fn euler_step(
    u: &mut GridFunction,
    drift: &GridFunction,
    h: f64,
    xi: Option<&GridFunction>,
) -> Result<()> {
    u.axpy(h / 2.0, drift)?;
    if let Some(xi) = xi {
        u.axpy(h.sqrt(), xi)?;
    }
    Ok(())
}

/// One Crank-Nicolson step against the reference measure N(0, sigma^2 C).
pub fn crank_nicolson_step(
    u: &mut GridFunction,
    drift: &GridFunction,
    h: f64,
    sigma: f64,
    xi: Option<&GridFunction>,
) -> Result<()> {
    let alpha = (2.0 - h) / (2.0 + h);
    let beta = (8.0 * h).sqrt() / (2.0 + h);
    debug_assert!((alpha * alpha + beta * beta - 1.0).abs() < 1e-12);
    u.axpy(2.0 * h / (2.0 + h) * sigma * sigma, drift)?;
    if let Some(xi) = xi {
        u.axpy(beta * sigma, xi)?;
    }
    Ok(())
}

/// Run `steps` Langevin updates at a fixed level.
pub fn langevin_at_level(
    score: &dyn ScoreModel,
    cov: &MaternCovariance,
    t: usize,
    h: f64,
    steps: usize,
    u: &mut GridFunction,
    kind: StepKind,
    noise: NoiseMode,
    rng: &mut impl Rng,
) -> Result<()> {
    let grf = GrfSampler::new(cov, u.resolution);
    let white = WhiteNoise::new(cov.domain, 1.0);
    let sigma = score.sigma(t)?;
    for step in 0..steps {
        let drift = score.langevin_drift(u, t)?;
        let xi = draw_noise(noise, &grf, &white, u.resolution, rng)?;
        match kind {
            StepKind::Euler => euler_step(u, &drift, h, xi.as_ref())?,
            StepKind::CrankNicolson => crank_nicolson_step(u, &drift, h, sigma, xi.as_ref())?,
        }
        if !u.is_finite() {
            return Err(Error::Numeric(format!(
                "Langevin state became non-finite at level {t}, inner step {step}"
            )));
        }
    }
    Ok(())
}

/// Algorithm: anneal from the widest level down, M inner steps each, carrying
/// the state; by default the chain starts at u ~ N(0, sigma_1^2 C).
pub fn annealed_langevin(
    score: &dyn ScoreModel,
    cov: &MaternCovariance,
    resolution: usize,
    cfg: &SamplerConfig,
    init: Option<GridFunction>,
    rng: &mut impl Rng,
) -> Result<GridFunction> {
    if cfg.m_steps == 0 || !(cfg.epsilon > 0.0) {
        return Err(Error::InvalidConfig("sampler needs m_steps > 0 and epsilon > 0".into()));
    }
    let t_count = score.t_count();
    let sigma_last = score.sigma(t_count)?;
    let mut u = match init {
        Some(u0) => {
            if u0.resolution != resolution || u0.domain != cov.domain {
                return Err(Error::ShapeMismatch("initial state has wrong shape".into()));
            }
            u0
        }
        None => {
            let draw = match cfg.noise {
                NoiseMode::White => WhiteNoise::new(cov.domain, 1.0).sample(resolution, rng)?,
                _ => GrfSampler::new(cov, resolution).sample(None, rng)?,
            };
            draw.scaled(score.sigma(1)?)
        }
    };
    for t in 1..=t_count {
        let h = step_size(cfg.epsilon, score.sigma(t)?, sigma_last);
        langevin_at_level(score, cov, t, h, cfg.m_steps, &mut u, cfg.step, cfg.noise, rng)?;
    }
    Ok(u)
}

/// Many independent chains, rayon-parallel, each with its own seeded rng so
/// results do not depend on scheduling.
pub fn sample_chains(
    score: &(impl ScoreModel + Sync),
    cov: &MaternCovariance,
    resolution: usize,
    cfg: &SamplerConfig,
    init: Option<&GridFunction>,
) -> Result<Dataset> {
    let samples: Result<Vec<GridFunction>> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ (chain as u64).wrapping_mul(0x9e3779b97f4a7c15));
            annealed_langevin(score, cov, resolution, cfg, init.cloned(), &mut rng)
        })
        .collect();
    let mut out = Dataset::new(cov.domain, resolution)?;
    for s in samples? {
        out.push(s)?;
    }
    Ok(out)
}

/// Posterior noise weight `c_t = (1 - abar_{t-1}) beta_t / (1 - abar_t)`.
pub fn ddpm_posterior_var(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    let beta = schedule.beta(t)?;
    let abar = schedule.alpha_bar(t)?;
    let abar_prev = if t == 1 { 1.0 } else { schedule.alpha_bar(t - 1)? };
    Ok((1.0 - abar_prev) * beta / (1.0 - abar))
}

/// Ancestral sampler: u_{t-1} = (u_t - beta_t/sqrt(1-abar_t) eta_hat)
/// / sqrt(1-beta_t) + sqrt(c_t) xi, with no noise at the final step.
pub fn ddpm_sample(
    model: &impl DdpmModel,
    corruption: &Corruption,
    resolution: usize,
    noise: NoiseMode,
    init: Option<GridFunction>,
    rng: &mut impl Rng,
) -> Result<GridFunction> {
    let t_count = corruption.t_count();
    if !matches!(corruption.schedule, NoiseSchedule::Ddpm { .. }) {
        return Err(Error::InvalidConfig("ancestral sampling needs a DDPM schedule".into()));
    }
    let grf = GrfSampler::new(&corruption.cov, resolution);
    let white = WhiteNoise::new(corruption.cov.domain, 1.0);
    let mut u = match init {
        Some(u0) => u0,
        None => grf.sample(None, rng)?,
    };
    for t in (1..=t_count).rev() {
        let beta = corruption.schedule.beta(t)?;
        let abar = corruption.schedule.alpha_bar(t)?;
        let eta_hat = model.eta_prediction(&u, t)?;
        u.axpy(-beta / (1.0 - abar).sqrt(), &eta_hat)?;
        u.scale(1.0 / (1.0 - beta).sqrt());
        if t > 1 {
            if let Some(xi) = draw_noise(noise, &grf, &white, resolution, rng)? {
                u.axpy(ddpm_posterior_var(&corruption.schedule, t)?.sqrt(), &xi)?;
            }
        }
        if !u.is_finite() {
            return Err(Error::Numeric(format!("ancestral state became non-finite at level {t}")));
        }
    }
    Ok(u)
}
