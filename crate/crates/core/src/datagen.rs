//! Training data generators: a two-component Gaussian mixture over functions
//! on an interval, and forced 2D Navier-Stokes vorticity fields on the torus.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grf::{GrfSampler, MaternCovariance};
use crate::grid::{Dataset, DomainSpec, GridFunction};
use crate::spectral::{fft2_inplace, laplacian_eigenvalue};

/// Closed-form mixture component means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MixtureMean {
    /// f(x) = sin(x/2) on (0, 2pi); the two components use +f and -f.
    SineHalf,
    /// f(x) = a x + b; useful for targets that sit outside the span of the
    /// noise's Cameron-Martin space.
    Affine { a: f64, b: f64 },
}

impl MixtureMean {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            MixtureMean::SineHalf => (x / 2.0).sin(),
            MixtureMean::Affine { a, b } => a * x + b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    pub cov: MaternCovariance,
    pub mean: MixtureMean,
    /// Probability of the +f component.
    pub p: f64,
}

impl GaussianMixtureSpec {
    /// The interval setup used throughout: domain (0, 2pi), +-sin(x/2) with
    /// equal weights, covariance (sigma, tau, alpha) = (3, 3, 3).
    pub fn default_interval() -> Result<Self> {
        let domain = DomainSpec::interval(2.0 * std::f64::consts::PI);
        Ok(Self {
            cov: MaternCovariance::new(domain, 3.0, 3.0, 3.0)?,
            mean: MixtureMean::SineHalf,
            p: 0.5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!("mixture weight p={} not in [0,1]", self.p)));
        }
        Ok(())
    }

    pub fn mean_function(&self, resolution: usize) -> Result<GridFunction> {
        GridFunction::from_fn(self.cov.domain, resolution, |x, _| self.mean.eval(x))
    }
}

pub fn gen_gaussian_mixture(
    spec: &GaussianMixtureSpec,
    count: usize,
    resolution: usize,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    spec.validate()?;
    let plus = spec.mean_function(resolution)?;
    let minus = plus.scaled(-1.0);
    let sampler = GrfSampler::new(&spec.cov, resolution);
    let mut out = Dataset::new(spec.cov.domain, resolution)?;
    for _ in 0..count {
        let mean = if rng.gen_bool(spec.p) { &plus } else { &minus };
        out.push(sampler.sample(Some(mean), rng)?)?;
    }
    out.metadata.insert("generator".into(), "gaussian_mixture".into());
    out.metadata.insert("p".into(), spec.p.to_string());
    // How singular the component means are relative to the covariance:
    // ||C^{-1/2} f|| at this resolution (diverges under refinement when f is
    // outside the Cameron-Martin space).
    if spec.cov.sigma > 0.0 {
        let precond = spec.cov.apply_power(&plus, -0.5)?;
        out.metadata
            .insert("mean_cameron_martin_norm".into(), crate::grid::l2_norm(&precond).to_string());
    }
    Ok(out)
}

fn default_dt() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavierStokesSpec {
    /// Viscosity.
    pub epsilon: f64,
    /// Integration horizon; the stored field is the vorticity at this time.
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub resolution: usize,
    /// Covariance of the random (time-constant) forcing.
    pub forcing_cov: MaternCovariance,
}

impl NavierStokesSpec {
    /// The torus setup used throughout: viscosity 1/500, horizon 5, forcing
    /// drawn from (sigma, tau, alpha) = (3 sqrt(3), 3, 4).
    pub fn default_torus(resolution: usize, dt: f64) -> Result<Self> {
        Ok(Self {
            epsilon: 1.0 / 500.0,
            t_end: 5.0,
            dt,
            resolution,
            forcing_cov: MaternCovariance::new(DomainSpec::torus(), 3.0 * 3f64.sqrt(), 3.0, 4.0)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.t_end > 0.0) || !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("bad Navier-Stokes parameters".into()));
        }
        if self.forcing_cov.domain != DomainSpec::torus() {
            return Err(Error::InvalidConfig("the vorticity solver runs on the unit torus".into()));
        }
        Ok(())
    }
}

/// Pseudo-spectral vorticity solver on the unit torus: Heun in time with the
/// viscous factor integrated exactly, 2/3-rule dealiasing on the advection
/// term, and the mean mode pinned to zero.
pub struct NsSolver {
    n: usize,
    eps: f64,
    dt: f64,
    /// Laplacian eigenvalues per FFT bin.
    eig: Vec<f64>,
    /// Derivative multipliers i 2 pi k per axis.
    dx1: Vec<Complex64>,
    dx2: Vec<Complex64>,
    /// Dealiasing mask (2/3 rule).
    mask: Vec<f64>,
    /// exp(-eps * eig * dt).
    decay: Vec<f64>,
    /// Forcing in spectral space.
    forcing: Vec<Complex64>,
}

fn signed(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

impl NsSolver {
    pub fn new(spec: &NavierStokesSpec, forcing: &GridFunction) -> Result<Self> {
        spec.validate()?;
        let n = spec.resolution;
        let dom = DomainSpec::torus();
        if forcing.domain != dom || forcing.resolution != n {
            return Err(Error::ShapeMismatch("forcing shape mismatch".into()));
        }
        let npts = n * n;
        let mut eig = vec![0.0; npts];
        let mut dx1 = vec![Complex64::new(0.0, 0.0); npts];
        let mut dx2 = vec![Complex64::new(0.0, 0.0); npts];
        let mut mask = vec![0.0; npts];
        let cutoff = (n / 3) as i64;
        let tau = std::f64::consts::TAU;
        for i1 in 0..n {
            let k1 = signed(i1, n);
            for i2 in 0..n {
                let k2 = signed(i2, n);
                let idx = i1 * n + i2;
                eig[idx] = laplacian_eigenvalue(&dom, [k1, k2]);
                dx1[idx] = Complex64::new(0.0, tau * k1 as f64);
                dx2[idx] = Complex64::new(0.0, tau * k2 as f64);
                mask[idx] = if k1.abs() <= cutoff && k2.abs() <= cutoff { 1.0 } else { 0.0 };
            }
        }
        let decay: Vec<f64> = eig.iter().map(|e| (-spec.epsilon * e * spec.dt).exp()).collect();
        let mut fhat: Vec<Complex64> =
            forcing.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2_inplace(&mut fhat, n, false);
        let inv = 1.0 / npts as f64;
        for (i, f) in fhat.iter_mut().enumerate() {
            *f *= inv * mask[i];
        }
        fhat[0] = Complex64::new(0.0, 0.0);
        Ok(Self { n, eps: spec.epsilon, dt: spec.dt, eig, dx1, dx2, mask, decay, forcing: fhat })
    }

    /// -(u . grad omega) + f in spectral space, dealiased. Also returns the
    /// maximum velocity magnitude for the CFL check.
    fn tendency(&self, what: &[Complex64]) -> (Vec<Complex64>, f64) {
        let n = self.n;
        let npts = n * n;
        // Streamfunction psi_hat = omega_hat / eig, velocity u = (d_y psi, -d_x psi).
        let mut u1 = vec![Complex64::new(0.0, 0.0); npts];
        let mut u2 = vec![Complex64::new(0.0, 0.0); npts];
        let mut w1 = vec![Complex64::new(0.0, 0.0); npts];
        let mut w2 = vec![Complex64::new(0.0, 0.0); npts];
        for i in 0..npts {
            let m = self.mask[i];
            if self.eig[i] > 0.0 {
                let psi = what[i] / self.eig[i] * m;
                u1[i] = self.dx2[i] * psi;
                u2[i] = -self.dx1[i] * psi;
            }
            w1[i] = self.dx1[i] * what[i] * m;
            w2[i] = self.dx2[i] * what[i] * m;
        }
        fft2_inplace(&mut u1, n, true);
        fft2_inplace(&mut u2, n, true);
        fft2_inplace(&mut w1, n, true);
        fft2_inplace(&mut w2, n, true);
        let mut adv = vec![Complex64::new(0.0, 0.0); npts];
        let mut max_u: f64 = 0.0;
        for i in 0..npts {
            let a = u1[i].re;
            let b = u2[i].re;
            max_u = max_u.max(a.abs()).max(b.abs());
            adv[i] = Complex64::new(a * w1[i].re + b * w2[i].re, 0.0);
        }
        fft2_inplace(&mut adv, n, false);
        let inv = 1.0 / npts as f64;
        for i in 0..npts {
            adv[i] = self.forcing[i] - adv[i] * inv * self.mask[i];
        }
        adv[0] = Complex64::new(0.0, 0.0);
        (adv, max_u)
    }

    /// One Heun step with exact viscous integrating factor.
    pub fn step(&self, what: &mut [Complex64]) -> Result<()> {
        let npts = self.n * self.n;
        let (n1, max_u) = self.tendency(what);
        let dx = 1.0 / self.n as f64;
        if self.dt * max_u / dx > 0.5 {
            return Err(Error::Cfl(self.dt * max_u / dx));
        }
        // Predictor: w_tilde = E (w + dt N1).
        let mut wt = vec![Complex64::new(0.0, 0.0); npts];
        for i in 0..npts {
            wt[i] = self.decay[i] * (what[i] + self.dt * n1[i]);
        }
        let (n2, _) = self.tendency(&wt);
        for i in 0..npts {
            what[i] = self.decay[i] * (what[i] + 0.5 * self.dt * n1[i]) + 0.5 * self.dt * n2[i];
        }
        Ok(())
    }

    pub fn spectral_state(omega: &GridFunction) -> Vec<Complex64> {
        let n = omega.resolution;
        let mut w: Vec<Complex64> =
            omega.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2_inplace(&mut w, n, false);
        let inv = 1.0 / (n * n) as f64;
        for v in w.iter_mut() {
            *v *= inv;
        }
        w[0] = Complex64::new(0.0, 0.0);
        w
    }

    pub fn physical_state(&self, what: &[Complex64]) -> Result<GridFunction> {
        let mut buf = what.to_vec();
        fft2_inplace(&mut buf, self.n, true);
        let mut out = GridFunction::zeros(DomainSpec::torus(), self.n)?;
        for (o, v) in out.values.iter_mut().zip(&buf) {
            *o = v.re;
        }
        Ok(out)
    }

    /// Kinetic energy (1/2) sum |omega_k|^2 / eig(k) of a spectral state.
    pub fn kinetic_energy(&self, what: &[Complex64]) -> f64 {
        let mut e = 0.0;
        for i in 0..what.len() {
            if self.eig[i] > 0.0 {
                e += what[i].norm_sqr() / self.eig[i];
            }
        }
        0.5 * e
    }

    /// Enstrophy (1/2) sum |omega_k|^2.
    pub fn enstrophy(&self, what: &[Complex64]) -> f64 {
        0.5 * what.iter().map(|v| v.norm_sqr()).sum::<f64>()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

/// Integrate a single trajectory from rest under one random forcing draw.
pub fn ns_trajectory(
    spec: &NavierStokesSpec,
    forcing: &GridFunction,
    omega0: Option<&GridFunction>,
) -> Result<GridFunction> {
    let solver = NsSolver::new(spec, forcing)?;
    let mut what = match omega0 {
        Some(w) => NsSolver::spectral_state(w),
        None => vec![Complex64::new(0.0, 0.0); spec.resolution * spec.resolution],
    };
    let steps = (spec.t_end / spec.dt).round() as usize;
    if ((steps as f64) * spec.dt - spec.t_end).abs() > 1e-9 {
        return Err(Error::InvalidConfig("t_end must be an integer multiple of dt".into()));
    }
    for _ in 0..steps {
        solver.step(&mut what)?;
    }
    solver.physical_state(&what)
}

/// Draw `count` forcings and record the vorticity at t_end for each;
/// trajectories run in parallel with per-sample seeds.
pub fn gen_navier_stokes(spec: &NavierStokesSpec, count: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let sampler = GrfSampler::new(&spec.forcing_cov, spec.resolution);
    let fields: Result<Vec<GridFunction>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                ChaCha20Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let forcing = sampler.sample(None, &mut rng)?;
            ns_trajectory(spec, &forcing, None)
        })
        .collect();
    let mut out = Dataset::new(DomainSpec::torus(), spec.resolution)?;
    for f in fields? {
        out.push(f)?;
    }
    out.metadata.insert("generator".into(), "navier_stokes".into());
    out.metadata.insert("epsilon".into(), spec.epsilon.to_string());
    out.metadata.insert("t_end".into(), spec.t_end.to_string());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const PI: f64 = std::f64::consts::PI;
    const TAU: f64 = std::f64::consts::TAU;

    #[test]
    fn mixture_extremes() {
        let mut spec = GaussianMixtureSpec::default_interval().unwrap();
        let res = 64;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        spec.p = 1.0;
        let d = gen_gaussian_mixture(&spec, 32, res, &mut rng).unwrap();
        let f = spec.mean_function(res).unwrap();
        // Every sample centred on +f: the empirical mean is close to f.
        let mut mean = GridFunction::zeros(f.domain, res).unwrap();
        for s in &d.samples {
            mean.axpy(1.0 / 32.0, s).unwrap();
        }
        let err = crate::grid::l2_norm(&mean.sub(&f).unwrap());
        assert!(err < 0.5, "mean misses +f by {err}");

        // Zero covariance collapses onto the means exactly.
        spec.cov = MaternCovariance::new(spec.cov.domain, 0.0, 3.0, 3.0).unwrap();
        spec.p = 0.0;
        let d = gen_gaussian_mixture(&spec, 4, res, &mut rng).unwrap();
        for s in &d.samples {
            for (a, b) in s.values.iter().zip(&f.values) {
                assert_abs_diff_eq!(a, &(-b), epsilon = 1e-14);
            }
        }
        spec.p = 1.5;
        assert!(gen_gaussian_mixture(&spec, 1, res, &mut rng).is_err());
    }

    #[test]
    fn mixture_metadata_and_determinism() {
        let spec = GaussianMixtureSpec::default_interval().unwrap();
        let a = gen_gaussian_mixture(&spec, 8, 64, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let b = gen_gaussian_mixture(&spec, 8, 64, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.values, y.values);
        }
        assert_eq!(a.metadata.get("p").unwrap(), "0.5");
        assert!(a.metadata.contains_key("mean_cameron_martin_norm"));
    }

    fn quiet_spec(res: usize, dt: f64, eps: f64) -> NavierStokesSpec {
        NavierStokesSpec {
            epsilon: eps,
            t_end: 1.0,
            dt,
            resolution: res,
            forcing_cov: MaternCovariance::new(DomainSpec::torus(), 1.0, 1.0, 4.0).unwrap(),
        }
    }

    #[test]
    fn single_mode_decays_exactly() {
        let eps = 1.0 / 500.0;
        let spec = NavierStokesSpec { t_end: 2.0, ..quiet_spec(32, 1e-2, eps) };
        let zero_forcing = GridFunction::zeros(DomainSpec::torus(), 32).unwrap();
        let w0 = GridFunction::from_fn(DomainSpec::torus(), 32, |x, _| (TAU * x).cos()).unwrap();
        let out = ns_trajectory(&spec, &zero_forcing, Some(&w0)).unwrap();
        // One Fourier mode self-advects to zero; viscosity is integrated
        // exactly, so the decay factor is exact.
        let factor = (-eps * 4.0 * PI * PI * 2.0).exp();
        for (a, b) in out.values.iter().zip(&w0.values) {
            assert_abs_diff_eq!(a, &(factor * b), epsilon = 1e-12);
        }
    }

    #[test]
    fn rest_stays_at_rest() {
        let spec = quiet_spec(16, 1e-2, 1e-3);
        let zero_forcing = GridFunction::zeros(DomainSpec::torus(), 16).unwrap();
        let out = ns_trajectory(&spec, &zero_forcing, None).unwrap();
        assert!(out.values.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn linear_response_to_small_forcing() {
        // At tiny amplitude the equation linearizes per mode:
        // omega_hat(T) = f_hat (1 - exp(-eps eig T)) / (eps eig).
        let eps = 0.1;
        let spec = NavierStokesSpec { t_end: 1.0, ..quiet_spec(32, 1e-3, eps) };
        let amp = 1e-6;
        let forcing =
            GridFunction::from_fn(DomainSpec::torus(), 32, |x, _| amp * (TAU * x).cos()).unwrap();
        let out = ns_trajectory(&spec, &forcing, None).unwrap();
        let eig = 4.0 * PI * PI;
        let expected = amp * (1.0 - (-eps * eig).exp()) / (eps * eig);
        let probe = out.values[0]; // x = 0, cos = 1
        assert!(
            (probe - expected).abs() / expected < 1e-4,
            "{probe} vs {expected}"
        );
    }

    #[test]
    fn inviscid_invariants() {
        let spec = NavierStokesSpec { t_end: 0.1, ..quiet_spec(64, 1e-3, 0.0) };
        let zero_forcing = GridFunction::zeros(DomainSpec::torus(), 64).unwrap();
        let w0 = GridFunction::from_fn(DomainSpec::torus(), 64, |x, y| {
            (TAU * x).cos() + 0.7 * (TAU * (x + 2.0 * y)).sin() + 0.3 * (2.0 * TAU * y).cos()
        })
        .unwrap();
        let solver = NsSolver::new(&spec, &zero_forcing).unwrap();
        let mut what = NsSolver::spectral_state(&w0);
        let e0 = solver.kinetic_energy(&what);
        let z0 = solver.enstrophy(&what);
        for _ in 0..100 {
            solver.step(&mut what).unwrap();
        }
        let e1 = solver.kinetic_energy(&what);
        let z1 = solver.enstrophy(&what);
        assert!((e1 - e0).abs() / e0 < 1e-4, "energy drift {} -> {}", e0, e1);
        assert!((z1 - z0).abs() / z0 < 1e-4, "enstrophy drift {} -> {}", z0, z1);
    }

    #[test]
    fn heun_second_order_in_dt() {
        let forcing = GridFunction::from_fn(DomainSpec::torus(), 32, |x, y| {
            (TAU * x).cos() + (TAU * (x + y)).sin()
        })
        .unwrap();
        let run = |dt: f64| {
            let spec = NavierStokesSpec { t_end: 0.5, ..quiet_spec(32, dt, 0.05) };
            ns_trajectory(&spec, &forcing, None).unwrap()
        };
        let reference = run(0.5 / 512.0);
        let err = |dt: f64| {
            let out = run(dt);
            crate::grid::l2_norm(&out.sub(&reference).unwrap())
        };
        let e1 = err(0.5 / 32.0);
        let e2 = err(0.5 / 64.0);
        assert!(e1 / e2 > 3.5, "convergence ratio {} below second order", e1 / e2);
    }

    #[test]
    fn cfl_violation_reported() {
        let spec = NavierStokesSpec { t_end: 1.0, ..quiet_spec(32, 0.5, 1e-3) };
        let zero_forcing = GridFunction::zeros(DomainSpec::torus(), 32).unwrap();
        let w0 = GridFunction::from_fn(DomainSpec::torus(), 32, |x, _| 50.0 * (TAU * x).cos())
            .unwrap();
        let err = ns_trajectory(&spec, &zero_forcing, Some(&w0)).unwrap_err();
        assert!(matches!(err, Error::Cfl(_)));
    }

    #[test]
    fn ns_generation_deterministic() {
        let spec = NavierStokesSpec {
            t_end: 0.05,
            ..NavierStokesSpec::default_torus(32, 5e-3).unwrap()
        };
        let a = gen_navier_stokes(&spec, 3, 7).unwrap();
        let b = gen_navier_stokes(&spec, 3, 7).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.values, y.values);
        }
        assert_eq!(a.metadata.get("generator").unwrap(), "navier_stokes");
    }
}
