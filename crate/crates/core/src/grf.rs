//! Gaussian random fields with Matérn-type covariance operators.
//!
//! `C = sigma^2 (-Laplacian + tau^2 I)^(-alpha)` is diagonal in the transform
//! basis of [`crate::spectral`], so sampling reduces to a truncated
//! Karhunen–Loève expansion materialized by one inverse transform:
//! `u = m + sum_k sqrt(lambda_k) xi_k phi_k`.
//!
//! On periodic domains the operator acts on the mean-zero subspace: the k = 0
//! coefficient is never sampled and every power of the covariance projects it
//! out. Draws are ordered by increasing |k| so a sample at resolution 2r with
//! the same seed extends the sample at resolution r on the shared band.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Boundary, DomainSpec, GridFunction};
use crate::spectral::{
    self, bin_to_signed, inverse, laplacian_eigenvalue, Coeffs, SpectralField, Wavevector,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternCovariance {
    pub domain: DomainSpec,
    pub sigma: f64,
    pub tau: f64,
    pub alpha: f64,
}

impl MaternCovariance {
    pub fn new(domain: DomainSpec, sigma: f64, tau: f64, alpha: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !(tau > 0.0) || !(alpha > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "Matern parameters must satisfy sigma >= 0, tau > 0, alpha > 0; got sigma={sigma}, tau={tau}, alpha={alpha}"
            )));
        }
        if alpha <= domain.dims as f64 / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "covariance is not trace-class: alpha = {alpha} <= dims/2 = {}",
                domain.dims as f64 / 2.0
            )));
        }
        Ok(Self { domain, sigma, tau, alpha })
    }

    /// Eigenvalue `sigma^2 (eig(k) + tau^2)^(-alpha)`.
    pub fn eigenvalue(&self, k: Wavevector) -> f64 {
        let eig = laplacian_eigenvalue(&self.domain, k);
        self.sigma * self.sigma * (eig + self.tau * self.tau).powf(-self.alpha)
    }

    /// `lambda_k^power` with the mean mode projected out on periodic domains.
    pub fn power_multiplier(&self, k: Wavevector, power: f64) -> f64 {
        if self.domain.boundary == Boundary::Periodic && k == [0, 0] {
            return 0.0;
        }
        self.eigenvalue(k).powf(power)
    }

    /// Apply `C^power` for power in {1, 1/2, -1/2, -1}.
    pub fn apply_power(&self, u: &GridFunction, power: f64) -> Result<GridFunction> {
        if u.domain != self.domain {
            return Err(Error::ShapeMismatch("domain mismatch in apply_power".into()));
        }
        spectral::apply_multiplier(u, |k| self.power_multiplier(k, power))
    }

    /// Sum of eigenvalues over all wavenumbers represented at `resolution`.
    pub fn trace(&self, resolution: usize) -> f64 {
        GrfSampler::new(self, resolution).trace()
    }

    /// Draw one sample; convenience wrapper that builds a fresh sampler.
    pub fn sample(
        &self,
        mean: Option<&GridFunction>,
        resolution: usize,
        rng: &mut impl Rng,
    ) -> Result<GridFunction> {
        GrfSampler::new(self, resolution).sample(mean, rng)
    }
}

enum Slot {
    /// Real coefficient (Dirichlet mode, or self-conjugate periodic bin).
    Real { idx: usize, sd: f64 },
    /// Conjugate pair of periodic bins; draws two normals.
    Pair { idx: usize, partner: usize, sd: f64 },
}

/// Prepared KL sampler: eigenvalue square roots and a draw order fixed by
/// increasing |k|.
pub struct GrfSampler {
    domain: DomainSpec,
    resolution: usize,
    slots: Vec<Slot>,
    trace: f64,
}

impl GrfSampler {
    pub fn new(cov: &MaternCovariance, resolution: usize) -> Self {
        let n = resolution;
        let mut keyed: Vec<(i64, i64, i64, Slot)> = Vec::new();
        let mut trace = 0.0;
        match (cov.domain.boundary, cov.domain.dims) {
            (Boundary::Dirichlet, _) => {
                for k in 1..n as i64 {
                    let lam = cov.eigenvalue([k, 0]);
                    trace += lam;
                    keyed.push((k * k, k, 0, Slot::Real { idx: (k - 1) as usize, sd: lam.sqrt() }));
                }
            }
            (Boundary::Periodic, 1) => {
                for i in 0..n {
                    let k = bin_to_signed(i, n);
                    if k == 0 {
                        continue;
                    }
                    let lam = cov.eigenvalue([k, 0]);
                    trace += lam;
                    let partner = if k == (n / 2) as i64 { i } else { (n - i) % n };
                    if partner == i {
                        keyed.push((k * k, k, 0, Slot::Real { idx: i, sd: lam.sqrt() }));
                    } else if is_representative([k, 0]) {
                        keyed.push((k * k, k, 0, Slot::Pair { idx: i, partner, sd: lam.sqrt() }));
                    }
                }
            }
            (Boundary::Periodic, _) => {
                for i1 in 0..n {
                    let k1 = bin_to_signed(i1, n);
                    for i2 in 0..n {
                        let k2 = bin_to_signed(i2, n);
                        if k1 == 0 && k2 == 0 {
                            continue;
                        }
                        let lam = cov.eigenvalue([k1, k2]);
                        trace += lam;
                        let p1 = (n - i1) % n;
                        let p2 = (n - i2) % n;
                        let idx = i1 * n + i2;
                        let partner = p1 * n + p2;
                        if partner == idx {
                            keyed.push((k1 * k1 + k2 * k2, k1, k2, Slot::Real { idx, sd: lam.sqrt() }));
                        } else if is_representative([k1, k2]) {
                            keyed.push((
                                k1 * k1 + k2 * k2,
                                k1,
                                k2,
                                Slot::Pair { idx, partner, sd: lam.sqrt() },
                            ));
                        }
                    }
                }
            }
        }
        keyed.sort_by_key(|(r2, k1, k2, _)| (*r2, *k1, *k2));
        GrfSampler {
            domain: cov.domain,
            resolution,
            slots: keyed.into_iter().map(|(_, _, _, s)| s).collect(),
            trace,
        }
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn sample(&self, mean: Option<&GridFunction>, rng: &mut impl Rng) -> Result<GridFunction> {
        let field = self.sample_spectral(rng);
        let mut u = inverse(&field)?;
        if let Some(m) = mean {
            u.axpy(1.0, m)?;
        }
        Ok(u)
    }

    /// Coefficients of a zero-mean draw.
    pub fn sample_spectral(&self, rng: &mut impl Rng) -> SpectralField {
        let n = self.resolution;
        match self.domain.boundary {
            Boundary::Dirichlet => {
                let mut c = vec![0.0; n - 1];
                for slot in &self.slots {
                    if let Slot::Real { idx, sd } = slot {
                        let xi: f64 = rng.sample(StandardNormal);
                        c[*idx] = sd * xi;
                    }
                }
                SpectralField { domain: self.domain, resolution: n, coeffs: Coeffs::Real(c) }
            }
            Boundary::Periodic => {
                let len = n.pow(self.domain.dims as u32);
                let mut c = vec![Complex64::new(0.0, 0.0); len];
                let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
                for slot in &self.slots {
                    match slot {
                        Slot::Real { idx, sd } => {
                            let xi: f64 = rng.sample(StandardNormal);
                            c[*idx] = Complex64::new(sd * xi, 0.0);
                        }
                        Slot::Pair { idx, partner, sd } => {
                            let a: f64 = rng.sample(StandardNormal);
                            let b: f64 = rng.sample(StandardNormal);
                            let z = Complex64::new(a, b) * (sd * inv_sqrt2);
                            c[*idx] = z;
                            c[*partner] = z.conj();
                        }
                    }
                }
                SpectralField { domain: self.domain, resolution: n, coeffs: Coeffs::Complex(c) }
            }
        }
    }
}

/// Canonical element of a conjugate pair {k, -k}.
fn is_representative(k: Wavevector) -> bool {
    k[0] > 0 || (k[0] == 0 && k[1] > 0)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WhiteNoise {
    pub domain: DomainSpec,
    pub sd: f64,
}

impl WhiteNoise {
    pub fn new(domain: DomainSpec, sd: f64) -> Self {
        Self { domain, sd }
    }

    /// I.i.d. N(0, sd^2) at every grid point. Not trace-class in the
    /// continuum limit; this is the finite-dimensional NCSN baseline.
    ///
    /// On a Dirichlet grid the last node sits on the boundary, where every
    /// sine mode vanishes; it is not a degree of freedom of the
    /// discretization, so it gets no noise. (Leaving noise there creates a
    /// runaway direction in Langevin sampling: a shared pointwise network
    /// cannot contract a single special node.)
    pub fn sample(&self, resolution: usize, rng: &mut impl Rng) -> Result<GridFunction> {
        let mut u = GridFunction::zeros(self.domain, resolution)?;
        for v in &mut u.values {
            let xi: f64 = rng.sample(StandardNormal);
            *v = self.sd * xi;
        }
        if self.domain.boundary == Boundary::Dirichlet {
            let n = u.values.len();
            u.values[n - 1] = 0.0;
        }
        Ok(u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SmoothingOperator {
    Identity,
    /// `exp(t * Laplacian)`, t > 0.
    HeatSemigroup(f64),
    /// `exp(-bandwidth^2 * eig(k) / 2)`.
    GaussianBlur(f64),
    /// Scalar multiple of the identity.
    Scalar(f64),
}

impl SmoothingOperator {
    pub fn multiplier(&self, domain: &DomainSpec, k: Wavevector) -> f64 {
        let eig = laplacian_eigenvalue(domain, k);
        match self {
            SmoothingOperator::Identity => 1.0,
            SmoothingOperator::HeatSemigroup(t) => (-t * eig).exp(),
            SmoothingOperator::GaussianBlur(b) => (-0.5 * b * b * eig).exp(),
            SmoothingOperator::Scalar(f) => *f,
        }
    }

    pub fn apply(&self, u: &GridFunction) -> Result<GridFunction> {
        match self {
            SmoothingOperator::Identity => Ok(u.clone()),
            SmoothingOperator::Scalar(f) => Ok(u.scaled(*f)),
            _ => spectral::apply_multiplier(u, |k| self.multiplier(&u.domain, k)),
        }
    }
}
