//! Transforms diagonalizing the Laplacian for each boundary condition.
//!
//! Coefficients are taken against L²-orthonormal bases on the physical
//! domain, so Parseval holds against [`crate::grid::l2_inner`] and covariance
//! eigenvalues apply to coefficients without grid-dependent rescaling:
//!
//! * Periodic: `phi_k(x) = exp(2 pi i k x / extent) / sqrt(extent)` (complex
//!   coefficients with conjugate symmetry for real input).
//! * Dirichlet: `phi_k(x) = sqrt(2/extent) sin(pi k x / extent)`, k = 1..n-1
//!   (real coefficients).

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{Boundary, Dataset, DomainSpec, GridFunction};

/// Wavenumber index; `k[1] == 0` in 1D. Signed for periodic domains,
/// `k[0] >= 1` for Dirichlet.
pub type Wavevector = [i64; 2];

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan_forward(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn plan_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Unnormalized DFT, `X_k = sum_j x_j exp(-2 pi i j k / n)`.
pub fn fft(data: &mut [Complex64]) {
    plan_forward(data.len()).process(data);
}

/// Unnormalized inverse kernel, `x_j = sum_k X_k exp(+2 pi i j k / n)`.
pub fn ifft(data: &mut [Complex64]) {
    plan_inverse(data.len()).process(data);
}

/// Sine sums `S_k = sum_{j=1}^{m} x_j sin(pi j k / (m+1))` for k = 1..m,
/// where `x` holds the m interior values. Self-inverse up to `2/(m+1)`.
pub fn dst(x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let n = m + 1;
    let mut buf = vec![Complex64::new(0.0, 0.0); 2 * n];
    for (j, &v) in x.iter().enumerate() {
        buf[j + 1] = Complex64::new(v, 0.0);
        buf[2 * n - 1 - j] = Complex64::new(-v, 0.0);
    }
    fft(&mut buf);
    (1..n).map(|k| -0.5 * buf[k].im).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Coeffs {
    /// Periodic: full complex spectrum, bin order matches the DFT
    /// (row-major in 2D).
    Complex(Vec<Complex64>),
    /// Dirichlet: real sine coefficients for k = 1..n-1.
    Real(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    pub domain: DomainSpec,
    pub resolution: usize,
    pub coeffs: Coeffs,
}

/// Signed wavenumber of a DFT bin.
pub fn bin_to_signed(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

fn signed_to_bin(k: i64, n: usize) -> Option<usize> {
    let half = (n / 2) as i64;
    if k > half || k < -half + 1 {
        None
    } else if k >= 0 {
        Some(k as usize)
    } else {
        Some((k + n as i64) as usize)
    }
}

impl SpectralField {
    /// Wavevector of the coefficient at linear index `i`.
    pub fn wavevector(&self, i: usize) -> Wavevector {
        let n = self.resolution;
        match (&self.coeffs, self.domain.dims) {
            (Coeffs::Real(_), _) => [(i + 1) as i64, 0],
            (Coeffs::Complex(_), 1) => [bin_to_signed(i, n), 0],
            (Coeffs::Complex(_), _) => [bin_to_signed(i / n, n), bin_to_signed(i % n, n)],
        }
    }

    pub fn num_coeffs(&self) -> usize {
        match &self.coeffs {
            Coeffs::Complex(c) => c.len(),
            Coeffs::Real(c) => c.len(),
        }
    }

    pub fn coeff_abs(&self, i: usize) -> f64 {
        match &self.coeffs {
            Coeffs::Complex(c) => c[i].norm(),
            Coeffs::Real(c) => c[i].abs(),
        }
    }

    /// Sum of squared coefficient magnitudes (the spectral side of Parseval).
    pub fn energy(&self) -> f64 {
        match &self.coeffs {
            Coeffs::Complex(c) => c.iter().map(|z| z.norm_sqr()).sum(),
            Coeffs::Real(c) => c.iter().map(|v| v * v).sum(),
        }
    }

    /// Pad or truncate the coefficient band for a new grid resolution.
    /// Nyquist bins of the source are dropped to keep the result real and
    /// the operation exact on shared bands.
    pub fn change_resolution(&self, new_resolution: usize) -> SpectralField {
        let n2 = new_resolution;
        match &self.coeffs {
            Coeffs::Real(c) => {
                let mut out = vec![0.0; n2 - 1];
                for k in 1..self.resolution.min(n2) {
                    if k - 1 < c.len() && k - 1 < out.len() {
                        out[k - 1] = c[k - 1];
                    }
                }
                SpectralField { domain: self.domain, resolution: n2, coeffs: Coeffs::Real(out) }
            }
            Coeffs::Complex(c) => {
                let n1 = self.resolution;
                let keep = (n1.min(n2) / 2) as i64; // |k| < keep survives
                match self.domain.dims {
                    1 => {
                        let mut out = vec![Complex64::new(0.0, 0.0); n2];
                        for (i, &v) in c.iter().enumerate() {
                            let k = bin_to_signed(i, n1);
                            if k.abs() < keep {
                                out[signed_to_bin(k, n2).unwrap()] = v;
                            }
                        }
                        SpectralField {
                            domain: self.domain,
                            resolution: n2,
                            coeffs: Coeffs::Complex(out),
                        }
                    }
                    _ => {
                        let mut out = vec![Complex64::new(0.0, 0.0); n2 * n2];
                        for (i, &v) in c.iter().enumerate() {
                            let k1 = bin_to_signed(i / n1, n1);
                            let k2 = bin_to_signed(i % n1, n1);
                            if k1.abs() < keep && k2.abs() < keep {
                                let b1 = signed_to_bin(k1, n2).unwrap();
                                let b2 = signed_to_bin(k2, n2).unwrap();
                                out[b1 * n2 + b2] = v;
                            }
                        }
                        SpectralField {
                            domain: self.domain,
                            resolution: n2,
                            coeffs: Coeffs::Complex(out),
                        }
                    }
                }
            }
        }
    }
}

/// Orthonormal-basis coefficients of a grid function.
pub fn forward(u: &GridFunction) -> Result<SpectralField> {
    let n = u.resolution;
    let coeffs = match (u.domain.boundary, u.domain.dims) {
        (Boundary::Dirichlet, _) => {
            // Interior nodes are indices 0..n-2; the last node sits on the
            // boundary and carries no sine content.
            let scale = (2.0 * u.domain.extent).sqrt() / n as f64;
            let s = dst(&u.values[..n - 1]);
            Coeffs::Real(s.into_iter().map(|v| v * scale).collect())
        }
        (Boundary::Periodic, 1) => {
            let mut buf: Vec<Complex64> =
                u.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft(&mut buf);
            let scale = u.domain.extent.sqrt() / n as f64;
            Coeffs::Complex(buf.into_iter().map(|z| z * scale).collect())
        }
        (Boundary::Periodic, _) => {
            let mut buf: Vec<Complex64> =
                u.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft2_inplace(&mut buf, n, false);
            let scale = u.domain.extent / (n * n) as f64;
            Coeffs::Complex(buf.into_iter().map(|z| z * scale).collect())
        }
    };
    Ok(SpectralField { domain: u.domain, resolution: n, coeffs })
}

/// Inverse of [`forward`].
pub fn inverse(s: &SpectralField) -> Result<GridFunction> {
    let n = s.resolution;
    match (&s.coeffs, s.domain.dims) {
        (Coeffs::Real(c), _) => {
            let scale = (2.0 / s.domain.extent).sqrt();
            let sums = dst(c);
            let mut values = vec![0.0; n];
            for (j, v) in sums.into_iter().enumerate() {
                values[j] = v * scale;
            }
            values[n - 1] = 0.0; // boundary node
            GridFunction::new(s.domain, n, values)
        }
        (Coeffs::Complex(c), 1) => {
            let mut buf = c.clone();
            ifft(&mut buf);
            let scale = 1.0 / s.domain.extent.sqrt();
            GridFunction::new(s.domain, n, buf.into_iter().map(|z| z.re * scale).collect())
        }
        (Coeffs::Complex(c), _) => {
            let mut buf = c.clone();
            fft2_inplace(&mut buf, n, true);
            let scale = 1.0 / s.domain.extent;
            GridFunction::new(s.domain, n, buf.into_iter().map(|z| z.re * scale).collect())
        }
    }
}

/// In-place 2D FFT over an n*n row-major buffer.
pub fn fft2_inplace(buf: &mut [Complex64], n: usize, inverse_dir: bool) {
    let plan = if inverse_dir { plan_inverse(n) } else { plan_forward(n) };
    // Rows.
    for row in buf.chunks_mut(n) {
        plan.process(row);
    }
    // Columns via transpose.
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = buf[i * n + j];
        }
        plan.process(&mut col);
        for i in 0..n {
            buf[i * n + j] = col[i];
        }
    }
}

/// Eigenvalue of the negative Laplacian for wavevector `k`.
pub fn laplacian_eigenvalue(domain: &DomainSpec, k: Wavevector) -> f64 {
    match domain.boundary {
        Boundary::Periodic => {
            let c = 2.0 * std::f64::consts::PI / domain.extent;
            let k2 = (k[0] * k[0] + k[1] * k[1]) as f64;
            c * c * k2
        }
        Boundary::Dirichlet => {
            let c = std::f64::consts::PI / domain.extent;
            (c * k[0] as f64).powi(2)
        }
    }
}

/// Apply a diagonal spectral multiplier `m(k)`.
pub fn apply_multiplier(
    u: &GridFunction,
    m: impl Fn(Wavevector) -> f64,
) -> Result<GridFunction> {
    let mut s = forward(u)?;
    multiply_in_place(&mut s, m)?;
    inverse(&s)
}

/// Multiply coefficients in place by `m(k)`.
pub fn multiply_in_place(s: &mut SpectralField, m: impl Fn(Wavevector) -> f64) -> Result<()> {
    let n = s.num_coeffs();
    for i in 0..n {
        let k = s.wavevector(i);
        let v = m(k);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite multiplier at k = {k:?}")));
        }
        match &mut s.coeffs {
            Coeffs::Complex(c) => c[i] *= v,
            Coeffs::Real(c) => c[i] *= v,
        }
    }
    Ok(())
}

/// Zero every coefficient with any component beyond resolution/3.
pub fn dealias_two_thirds(s: &SpectralField) -> SpectralField {
    let cutoff = (s.resolution / 3) as i64;
    let mut out = s.clone();
    let n = out.num_coeffs();
    for i in 0..n {
        let k = out.wavevector(i);
        if k[0].abs() > cutoff || k[1].abs() > cutoff {
            match &mut out.coeffs {
                Coeffs::Complex(c) => c[i] = Complex64::new(0.0, 0.0),
                Coeffs::Real(c) => c[i] = 0.0,
            }
        }
    }
    out
}

/// Per-wavenumber mean coefficient magnitude over a dataset. Wavenumbers are
/// binned by |k| rounded to the nearest integer (radial bins in 2D).
pub fn average_spectrum(d: &Dataset) -> Result<Vec<(u64, f64)>> {
    if d.is_empty() {
        return Err(Error::InvalidConfig("average_spectrum of empty dataset".into()));
    }
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    for u in &d.samples {
        let s = forward(u)?;
        for i in 0..s.num_coeffs() {
            let k = s.wavevector(i);
            let r = ((k[0] * k[0] + k[1] * k[1]) as f64).sqrt().round() as usize;
            if r >= sums.len() {
                sums.resize(r + 1, 0.0);
                counts.resize(r + 1, 0);
            }
            sums[r] += s.coeff_abs(i);
            counts[r] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .enumerate()
        .filter(|(_, (_, c))| *c > 0)
        .map(|(r, (s, c))| (r as u64, s / c as f64))
        .collect())
}

/// Write a spectrum as CSV with header `k,mean_abs_coeff`.
pub fn write_spectrum_csv(spectrum: &[(u64, f64)], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("k,mean_abs_coeff\n");
    for (k, v) in spectrum {
        out.push_str(&format!("{k},{v:.17e}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
