//! Forward corruption processes: `v_t = A_t u + eta_t` with trace-class
//! Gaussian noise `eta_t ~ N(0, sigma_t^2 C)` (annealed / NCSN style), or the
//! DDPM discretization `u_t = sqrt(alpha_bar_t) u + sqrt(1 - alpha_bar_t) eta`.
//!
//! Noise levels are 1-indexed: t runs from 1 (least corrupted) to T.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grf::{GrfSampler, MaternCovariance, SmoothingOperator, WhiteNoise};
use crate::grid::GridFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseSchedule {
    /// Annealed Langevin levels sigma_1 > ... > sigma_T.
    Ncsn { sigmas: Vec<f64> },
    /// DDPM step sizes beta_1, ..., beta_T.
    Ddpm { betas: Vec<f64> },
}

/// Geometric interpolation from `sigma_first` down to `sigma_last`.
pub fn geometric_sigmas(sigma_first: f64, sigma_last: f64, t_count: usize) -> Result<Vec<f64>> {
    if t_count < 2 || !(sigma_first > 0.0) || !(sigma_last > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "geometric schedule needs t_count >= 2 and positive endpoints; got {t_count}, {sigma_first}, {sigma_last}"
        )));
    }
    let ratio = (sigma_last / sigma_first).powf(1.0 / (t_count - 1) as f64);
    Ok((0..t_count).map(|i| sigma_first * ratio.powi(i as i32)).collect())
}

/// Cumulative products `alpha_bar_t = prod_{s<=t} (1 - beta_s)`, 1-indexed
/// result (index 0 holds alpha_bar_1).
pub fn ddpm_alpha_bars(betas: &[f64]) -> Result<Vec<f64>> {
    if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
        return Err(Error::InvalidConfig("betas must be nonempty and in (0, 1)".into()));
    }
    let mut out = Vec::with_capacity(betas.len());
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        out.push(acc);
    }
    Ok(out)
}

impl NoiseSchedule {
    pub fn geometric(sigma_first: f64, sigma_last: f64, t_count: usize) -> Result<Self> {
        Ok(NoiseSchedule::Ncsn { sigmas: geometric_sigmas(sigma_first, sigma_last, t_count)? })
    }

    pub fn t_count(&self) -> usize {
        match self {
            NoiseSchedule::Ncsn { sigmas } => sigmas.len(),
            NoiseSchedule::Ddpm { betas } => betas.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseSchedule::Ncsn { sigmas } => {
                if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::InvalidConfig("sigmas must be nonempty and positive".into()));
                }
                if sigmas.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::InvalidConfig("sigmas must be strictly decreasing".into()));
                }
            }
            NoiseSchedule::Ddpm { betas } => {
                ddpm_alpha_bars(betas)?;
            }
        }
        Ok(())
    }

    /// sigma_t for the annealed schedule (1-indexed).
    pub fn sigma(&self, t: usize) -> Result<f64> {
        match self {
            NoiseSchedule::Ncsn { sigmas } => sigmas
                .get(t.wrapping_sub(1))
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("noise level t={t} out of range"))),
            NoiseSchedule::Ddpm { .. } => {
                Err(Error::InvalidConfig("sigma(t) queried on a DDPM schedule".into()))
            }
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        match self {
            NoiseSchedule::Ddpm { betas } => betas
                .get(t.wrapping_sub(1))
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("noise level t={t} out of range"))),
            NoiseSchedule::Ncsn { .. } => {
                Err(Error::InvalidConfig("beta(t) queried on an annealed schedule".into()))
            }
        }
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match self {
            NoiseSchedule::Ddpm { betas } => {
                if t == 0 || t > betas.len() {
                    return Err(Error::InvalidConfig(format!("noise level t={t} out of range")));
                }
                Ok(betas[..t].iter().map(|b| 1.0 - b).product())
            }
            NoiseSchedule::Ncsn { .. } => {
                Err(Error::InvalidConfig("alpha_bar(t) queried on an annealed schedule".into()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub schedule: NoiseSchedule,
    pub cov: MaternCovariance,
    /// Conditional mean operator A_t; `None` means the identity.
    pub smoothing: Option<SmoothingOperator>,
    /// Replace the trace-class noise with pointwise i.i.d. noise of the same
    /// scale. The finite-dimensional baseline; `cov` still defines the domain.
    #[serde(default)]
    pub white_noise: bool,
}

#[derive(Debug, Clone)]
pub struct CorruptionSample {
    pub t: usize,
    /// A_t u (annealed) or sqrt(alpha_bar_t) u (DDPM).
    pub clean: GridFunction,
    pub noise: GridFunction,
    /// clean + noise, exactly.
    pub noisy: GridFunction,
}

impl Corruption {
    pub fn new(
        schedule: NoiseSchedule,
        cov: MaternCovariance,
        smoothing: Option<SmoothingOperator>,
    ) -> Result<Self> {
        schedule.validate()?;
        if matches!(schedule, NoiseSchedule::Ddpm { .. }) && smoothing.is_some() {
            return Err(Error::InvalidConfig(
                "DDPM corruption fixes A_t = sqrt(alpha_bar_t) I; smoothing is not supported".into(),
            ));
        }
        Ok(Self { schedule, cov, smoothing, white_noise: false })
    }

    pub fn t_count(&self) -> usize {
        self.schedule.t_count()
    }

    /// Amplitude of the noise term at level t: sigma_t (annealed) or
    /// sqrt(1 - alpha_bar_t) (DDPM).
    pub fn noise_scale(&self, t: usize) -> Result<f64> {
        match &self.schedule {
            NoiseSchedule::Ncsn { .. } => self.schedule.sigma(t),
            NoiseSchedule::Ddpm { .. } => Ok((1.0 - self.schedule.alpha_bar(t)?).sqrt()),
        }
    }

    pub fn conditional_mean(&self, u: &GridFunction, t: usize) -> Result<GridFunction> {
        match &self.schedule {
            NoiseSchedule::Ncsn { .. } => match &self.smoothing {
                Some(s) => s.apply(u),
                None => Ok(u.clone()),
            },
            NoiseSchedule::Ddpm { .. } => Ok(u.scaled(self.schedule.alpha_bar(t)?.sqrt())),
        }
    }

    pub fn corrupt(
        &self,
        u: &GridFunction,
        t: usize,
        rng: &mut impl Rng,
    ) -> Result<CorruptionSample> {
        self.corrupt_with(u, t, &GrfSampler::new(&self.cov, u.resolution), rng)
    }

    /// Variant that reuses a prepared sampler (hot path in training loops).
    pub fn corrupt_with(
        &self,
        u: &GridFunction,
        t: usize,
        sampler: &GrfSampler,
        rng: &mut impl Rng,
    ) -> Result<CorruptionSample> {
        if t == 0 || t > self.t_count() {
            return Err(Error::InvalidConfig(format!(
                "noise level t={t} out of range 1..={}",
                self.t_count()
            )));
        }
        let clean = self.conditional_mean(u, t)?;
        let mut noise = if self.white_noise {
            WhiteNoise::new(self.cov.domain, 1.0).sample(u.resolution, rng)?
        } else {
            sampler.sample(None, rng)?
        };
        noise.scale(self.noise_scale(t)?);
        let noisy = clean.add(&noise)?;
        Ok(CorruptionSample { t, clean, noise, noisy })
    }
}
