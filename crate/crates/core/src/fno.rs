//! Fourier neural operator with hand-rolled reverse-mode gradients.
//!
//! The network maps (u, cond) to a scalar field: a pointwise lift to `width`
//! channels, `layers` spectral blocks, and a pointwise linear projection.
//! Each block computes `act(K h + B h + bias)` where K multiplies the lowest
//! Fourier amplitudes channelwise by learned complex matrices and B is a
//! pointwise real matrix. Amplitudes are normalized coefficients (FFT / N),
//! so a trained model evaluates consistently across grid resolutions.
//!
//! The conditioning scalar (noise level, time, ...) enters as a constant
//! second input channel.
//!
//! All parameters live in one flat `Vec<f64>` in a fixed order (lift, then
//! per block: spectral real, spectral imag, bypass, bias, then projection),
//! which keeps the optimizer and the serializer trivial.

use std::io::{Read as _, Write as _};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Boundary, DomainSpec, GridFunction};
use crate::spectral::{fft, fft2_inplace, ifft};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
    /// Debug switch: makes the whole network linear in its input.
    Identity,
}

fn default_layers() -> usize {
    4
}
fn default_activation() -> Activation {
    Activation::Gelu
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnoConfig {
    pub domain: DomainSpec,
    /// Retained amplitudes per axis: signed wavenumbers |k| <= modes - 1.
    pub modes: usize,
    pub width: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

impl FnoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 || self.width == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig(
                "modes, width and layers must all be positive".into(),
            ));
        }
        if self.domain.boundary == Boundary::Dirichlet && self.domain.dims != 1 {
            return Err(Error::InvalidConfig(
                "Dirichlet inputs are only supported in one dimension".into(),
            ));
        }
        Ok(())
    }

    /// Number of retained Fourier bins.
    pub fn bins(&self) -> usize {
        let per_axis = 2 * self.modes - 1;
        match self.domain.dims {
            1 => per_axis,
            _ => per_axis * per_axis,
        }
    }

    pub fn param_count(&self) -> usize {
        let w = self.width;
        let per_block = 2 * self.bins() * w * w + w * w + w;
        2 * w + w + self.layers * per_block + w + 1
    }

    /// Smallest grid the retained band fits on.
    pub fn min_resolution(&self) -> usize {
        (2 * self.modes).next_power_of_two()
    }
}

/// Offsets into the flat parameter vector.
struct Layout {
    lift_w: usize,
    lift_b: usize,
    blocks: Vec<BlockOffsets>,
    proj_w: usize,
    proj_b: usize,
}

struct BlockOffsets {
    spec_re: usize,
    spec_im: usize,
    bypass: usize,
    bias: usize,
}

impl Layout {
    fn new(cfg: &FnoConfig) -> Self {
        let w = cfg.width;
        let bins = cfg.bins();
        let mut at = 0;
        let lift_w = at;
        at += 2 * w;
        let lift_b = at;
        at += w;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let spec_re = at;
            at += bins * w * w;
            let spec_im = at;
            at += bins * w * w;
            let bypass = at;
            at += w * w;
            let bias = at;
            at += w;
            blocks.push(BlockOffsets { spec_re, spec_im, bypass, bias });
        }
        let proj_w = at;
        at += w;
        let proj_b = at;
        at += 1;
        debug_assert_eq!(at, cfg.param_count());
        Layout { lift_w, lift_b, blocks, proj_w, proj_b }
    }
}

#[derive(Debug, Clone)]
pub struct FnoModel {
    pub config: FnoConfig,
    pub params: Vec<f64>,
}

/// Odd extension of Dirichlet nodal values (nodes (j+1) E / n, j < n, the
/// last one on the boundary) onto the periodic grid of the doubled domain.
/// The sine basis on (0, E) is exactly the odd subspace of that circle, so
/// the network sees a periodic problem.
fn odd_extend(vals: &[f64]) -> Vec<f64> {
    let n = vals.len();
    let mut ext = vec![0.0; 2 * n];
    ext[1..=n].copy_from_slice(vals);
    for j in n + 1..2 * n {
        ext[j] = -vals[2 * n - j - 1];
    }
    ext
}

/// Antisymmetric part of a periodic field, read back on the Dirichlet nodes.
fn odd_restrict(ext: &[f64]) -> Vec<f64> {
    let n = ext.len() / 2;
    (1..=n).map(|j| 0.5 * (ext[j] - ext[2 * n - j])).collect()
}

/// Transpose of `odd_restrict`, for the backward pass.
fn odd_restrict_t(d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let mut ext = vec![0.0; 2 * n];
    for j in 1..n {
        ext[j] += 0.5 * d[j - 1];
        ext[2 * n - j] -= 0.5 * d[j - 1];
    }
    ext
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_prime(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)) + x * phi
}

impl FnoModel {
    pub fn init(config: FnoConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let w = config.width;
        let bins = config.bins();
        let mut params = vec![0.0; config.param_count()];
        let unif = |scale: f64, slice: &mut [f64], rng: &mut dyn rand::RngCore| {
            for v in slice.iter_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        };
        let lift_scale = 1.0 / (2f64).sqrt();
        unif(lift_scale, &mut params[layout.lift_w..layout.lift_w + 2 * w], rng);
        unif(lift_scale, &mut params[layout.lift_b..layout.lift_b + w], rng);
        let spec_scale = 1.0 / (w * w) as f64;
        let point_scale = 1.0 / (w as f64).sqrt();
        for b in &layout.blocks {
            unif(spec_scale, &mut params[b.spec_re..b.spec_re + bins * w * w], rng);
            unif(spec_scale, &mut params[b.spec_im..b.spec_im + bins * w * w], rng);
            unif(point_scale, &mut params[b.bypass..b.bypass + w * w], rng);
            unif(point_scale, &mut params[b.bias..b.bias + w], rng);
        }
        unif(point_scale, &mut params[layout.proj_w..layout.proj_w + w], rng);
        unif(point_scale, &mut params[layout.proj_b..layout.proj_b + 1], rng);
        Ok(Self { config, params })
    }

    /// All parameters zero; the output is identically zero. Debug aid.
    pub fn zeros(config: FnoConfig) -> Result<Self> {
        config.validate()?;
        let n = config.param_count();
        Ok(Self { config, params: vec![0.0; n] })
    }

    /// FFT bin index of retained-mode slot `b` at resolution `n`.
    fn bin_index(&self, b: usize, n: usize) -> usize {
        let m = self.config.modes;
        let per_axis = 2 * m - 1;
        let signed = |j: usize| -> i64 {
            if j < m {
                j as i64
            } else {
                j as i64 - per_axis as i64
            }
        };
        match self.config.domain.dims {
            1 => {
                let k = signed(b);
                k.rem_euclid(n as i64) as usize
            }
            _ => {
                let k1 = signed(b / per_axis);
                let k2 = signed(b % per_axis);
                k1.rem_euclid(n as i64) as usize * n + k2.rem_euclid(n as i64) as usize
            }
        }
    }

    fn check_input(&self, u: &GridFunction) -> Result<()> {
        if u.domain != self.config.domain {
            return Err(Error::ShapeMismatch("input domain differs from model domain".into()));
        }
        let eff = if self.config.domain.boundary == Boundary::Dirichlet {
            2 * u.resolution
        } else {
            u.resolution
        };
        if eff < self.config.min_resolution() {
            return Err(Error::InvalidConfig(format!(
                "resolution {} too small for {} retained modes",
                u.resolution, self.config.modes
            )));
        }
        Ok(())
    }

    fn transform(&self, buf: &mut [Complex64], n: usize, inverse_dir: bool) {
        match self.config.domain.dims {
            1 => {
                if inverse_dir {
                    ifft(buf)
                } else {
                    fft(buf)
                }
            }
            _ => fft2_inplace(buf, n, inverse_dir),
        }
    }

    pub fn forward(&self, u: &GridFunction, cond: f64) -> Result<GridFunction> {
        let (out, _) = self.forward_cached(u, cond)?;
        Ok(out)
    }

    fn forward_cached(&self, u: &GridFunction, cond: f64) -> Result<(GridFunction, Cache)> {
        self.check_input(u)?;
        let cfg = &self.config;
        let dirichlet = cfg.domain.boundary == Boundary::Dirichlet;
        let vals: Vec<f64> =
            if dirichlet { odd_extend(&u.values) } else { u.values.clone() };
        let n = if dirichlet { 2 * u.resolution } else { u.resolution };
        let npts = vals.len();
        let layout = Layout::new(cfg);
        let w = cfg.width;
        let bins = cfg.bins();
        let p = &self.params;

        // Lift.
        let mut h: Vec<Vec<f64>> = (0..w)
            .map(|c| {
                let a = p[layout.lift_w + c];
                let b = p[layout.lift_w + w + c];
                let bias = p[layout.lift_b + c];
                vals.iter().map(|&x| a * x + b * cond + bias).collect()
            })
            .collect();

        let mut cache = Cache {
            h_in: Vec::with_capacity(cfg.layers),
            amps: Vec::with_capacity(cfg.layers),
            z: Vec::with_capacity(cfg.layers),
        };

        let inv_n = 1.0 / npts as f64;
        let mut buf = vec![Complex64::new(0.0, 0.0); npts];
        for (l, blk) in layout.blocks.iter().enumerate() {
            // Retained amplitudes per input channel.
            let mut amp_in = vec![vec![Complex64::new(0.0, 0.0); bins]; w];
            for c in 0..w {
                for (dst, src) in buf.iter_mut().zip(&h[c]) {
                    *dst = Complex64::new(*src, 0.0);
                }
                self.transform(&mut buf, n, false);
                for b in 0..bins {
                    amp_in[c][b] = buf[self.bin_index(b, n)] * inv_n;
                }
            }
            // Channel mix per retained mode.
            let mut amp_out = vec![vec![Complex64::new(0.0, 0.0); bins]; w];
            for b in 0..bins {
                for ci in 0..w {
                    let a = amp_in[ci][b];
                    if a == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    let base = blk.spec_re + (b * w + ci) * w;
                    let base_im = blk.spec_im + (b * w + ci) * w;
                    for co in 0..w {
                        let wgt = Complex64::new(p[base + co], p[base_im + co]);
                        amp_out[co][b] += wgt * a;
                    }
                }
            }
            // Back to physical space, add bypass and bias, activate.
            let last = l + 1 == cfg.layers;
            let mut z = vec![vec![0.0; npts]; w];
            for co in 0..w {
                buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                for b in 0..bins {
                    buf[self.bin_index(b, n)] = amp_out[co][b];
                }
                self.transform(&mut buf, n, true);
                let bias = p[blk.bias + co];
                let zc = &mut z[co];
                for (j, v) in buf.iter().enumerate() {
                    zc[j] = v.re + bias;
                }
                for ci in 0..w {
                    let bw = p[blk.bypass + ci * w + co];
                    if bw != 0.0 {
                        let hci = &h[ci];
                        for j in 0..npts {
                            zc[j] += bw * hci[j];
                        }
                    }
                }
            }
            let h_next: Vec<Vec<f64>> = z
                .iter()
                .map(|zc| {
                    zc.iter()
                        .map(|&v| {
                            if last || cfg.activation == Activation::Identity {
                                v
                            } else {
                                gelu(v)
                            }
                        })
                        .collect()
                })
                .collect();
            cache.h_in.push(std::mem::replace(&mut h, h_next));
            cache.amps.push(amp_in);
            cache.z.push(z);
        }

        // Projection.
        let q0 = p[layout.proj_b];
        let mut y = vec![q0; npts];
        for c in 0..w {
            let q = p[layout.proj_w + c];
            for j in 0..npts {
                y[j] += q * h[c][j];
            }
        }
        let mut out = GridFunction::zeros(cfg.domain, u.resolution)?;
        out.values = if dirichlet { odd_restrict(&y) } else { y };
        cache.h_in.push(h);
        Ok((out, cache))
    }

    /// Evaluate the batch, hand the outputs to `loss`, and backpropagate the
    /// returned output gradients into a flat parameter gradient.
    ///
    /// `loss` must return `dL/dy` as plain partial derivatives with respect
    /// to every output grid value (quadrature weights, if the loss is an
    /// integral, belong inside those derivatives).
    pub fn value_and_grad<F>(
        &self,
        batch: &[(GridFunction, f64)],
        loss: F,
    ) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&[GridFunction]) -> Result<(f64, Vec<GridFunction>)>,
    {
        let mut outputs = Vec::with_capacity(batch.len());
        let mut caches = Vec::with_capacity(batch.len());
        for (u, cond) in batch {
            let (y, cache) = self.forward_cached(u, *cond)?;
            outputs.push(y);
            caches.push(cache);
        }
        let (value, grads_out) = loss(&outputs)?;
        if grads_out.len() != batch.len() {
            return Err(Error::ShapeMismatch(format!(
                "loss returned {} gradients for {} outputs",
                grads_out.len(),
                batch.len()
            )));
        }
        let mut grad = vec![0.0; self.config.param_count()];
        for (i, (u, cond)) in batch.iter().enumerate() {
            self.backward(u, *cond, &caches[i], &grads_out[i], &mut grad)?;
        }
        Ok((value, grad))
    }

    fn backward(
        &self,
        u: &GridFunction,
        cond: f64,
        cache: &Cache,
        dy: &GridFunction,
        grad: &mut [f64],
    ) -> Result<()> {
        if dy.values.len() != u.values.len() {
            return Err(Error::ShapeMismatch("output gradient has wrong shape".into()));
        }
        let cfg = &self.config;
        let dirichlet = cfg.domain.boundary == Boundary::Dirichlet;
        let vals: Vec<f64> =
            if dirichlet { odd_extend(&u.values) } else { u.values.clone() };
        let dyv: Vec<f64> =
            if dirichlet { odd_restrict_t(&dy.values) } else { dy.values.clone() };
        let n = if dirichlet { 2 * u.resolution } else { u.resolution };
        let npts = vals.len();
        let layout = Layout::new(cfg);
        let w = cfg.width;
        let bins = cfg.bins();
        let p = &self.params;
        let inv_n = 1.0 / npts as f64;

        // Projection.
        let h_last = &cache.h_in[cfg.layers];
        let mut dh: Vec<Vec<f64>> = (0..w)
            .map(|c| {
                let q = p[layout.proj_w + c];
                let mut acc = 0.0;
                for j in 0..npts {
                    acc += dyv[j] * h_last[c][j];
                }
                grad[layout.proj_w + c] += acc;
                dyv.iter().map(|&g| q * g).collect()
            })
            .collect();
        grad[layout.proj_b] += dyv.iter().sum::<f64>();

        let mut buf = vec![Complex64::new(0.0, 0.0); npts];
        for l in (0..cfg.layers).rev() {
            let blk = &layout.blocks[l];
            let last = l + 1 == cfg.layers;
            let z = &cache.z[l];
            let h_in = &cache.h_in[l];
            let amp_in = &cache.amps[l];

            // Through the activation.
            let dz: Vec<Vec<f64>> = (0..w)
                .map(|c| {
                    (0..npts)
                        .map(|j| {
                            let g = dh[c][j];
                            if last || cfg.activation == Activation::Identity {
                                g
                            } else {
                                g * gelu_prime(z[c][j])
                            }
                        })
                        .collect()
                })
                .collect();

            // Bias and bypass.
            for co in 0..w {
                grad[blk.bias + co] += dz[co].iter().sum::<f64>();
            }
            let mut dh_prev = vec![vec![0.0; npts]; w];
            for ci in 0..w {
                let hci = &h_in[ci];
                for co in 0..w {
                    let mut acc = 0.0;
                    let dzc = &dz[co];
                    for j in 0..npts {
                        acc += hci[j] * dzc[j];
                    }
                    grad[blk.bypass + ci * w + co] += acc;
                    let bw = p[blk.bypass + ci * w + co];
                    if bw != 0.0 {
                        let dp = &mut dh_prev[ci];
                        for j in 0..npts {
                            dp[j] += bw * dzc[j];
                        }
                    }
                }
            }

            // Spectral path. G_out[o][b] = FFT(dz[o]) at the retained bins.
            let mut g_out = vec![vec![Complex64::new(0.0, 0.0); bins]; w];
            for co in 0..w {
                for (dst, src) in buf.iter_mut().zip(&dz[co]) {
                    *dst = Complex64::new(*src, 0.0);
                }
                self.transform(&mut buf, n, false);
                for b in 0..bins {
                    g_out[co][b] = buf[self.bin_index(b, n)];
                }
            }
            // Weight gradient and input-amplitude gradient.
            let mut g_in = vec![vec![Complex64::new(0.0, 0.0); bins]; w];
            for b in 0..bins {
                for ci in 0..w {
                    let a_conj = amp_in[ci][b].conj();
                    let base = blk.spec_re + (b * w + ci) * w;
                    let base_im = blk.spec_im + (b * w + ci) * w;
                    let mut acc = Complex64::new(0.0, 0.0);
                    for co in 0..w {
                        let g = g_out[co][b];
                        let dw = g * a_conj;
                        grad[base + co] += dw.re;
                        grad[base_im + co] += dw.im;
                        acc += Complex64::new(p[base + co], -p[base_im + co]) * g;
                    }
                    g_in[ci][b] = acc;
                }
            }
            // Back to physical space: dh += Re(unnormalized inverse of G_in) / N.
            for ci in 0..w {
                buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                for b in 0..bins {
                    buf[self.bin_index(b, n)] = g_in[ci][b];
                }
                self.transform(&mut buf, n, true);
                let dp = &mut dh_prev[ci];
                for j in 0..npts {
                    dp[j] += buf[j].re * inv_n;
                }
            }
            dh = dh_prev;
        }

        // Lift.
        for c in 0..w {
            let mut acc_u = 0.0;
            let mut acc_c = 0.0;
            let mut acc_b = 0.0;
            for j in 0..npts {
                let g = dh[c][j];
                acc_u += g * vals[j];
                acc_c += g * cond;
                acc_b += g;
            }
            grad[layout.lift_w + c] += acc_u;
            grad[layout.lift_w + w + c] += acc_c;
            grad[layout.lift_b + c] += acc_b;
        }
        Ok(())
    }
}

struct Cache {
    /// Channel fields entering each block; one extra entry holds the final
    /// hidden state entering the projection.
    h_in: Vec<Vec<Vec<f64>>>,
    /// Retained input amplitudes per block.
    amps: Vec<Vec<Vec<Complex64>>>,
    /// Pre-activations per block.
    z: Vec<Vec<Vec<f64>>>,
}

const MODEL_MAGIC: &[u8; 4] = b"DDOM";
const MODEL_VERSION: u32 = 1;

pub fn save_model(model: &FnoModel, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MODEL_MAGIC)?;
    f.write_all(&MODEL_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config)?;
    f.write_all(&(cfg.len() as u64).to_le_bytes())?;
    f.write_all(&cfg)?;
    f.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for v in &model.params {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FnoModel> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let mut u32b = [0u8; 4];
    f.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let mut u64b = [0u8; 8];
    f.read_exact(&mut u64b)?;
    let cfg_len = u64::from_le_bytes(u64b) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    f.read_exact(&mut cfg_bytes)?;
    let config: FnoConfig = serde_json::from_slice(&cfg_bytes)?;
    config.validate()?;
    f.read_exact(&mut u64b)?;
    let count = u64::from_le_bytes(u64b) as usize;
    if count != config.param_count() {
        return Err(Error::Format(format!(
            "parameter count {count} does not match config ({})",
            config.param_count()
        )));
    }
    let mut params = Vec::with_capacity(count);
    let mut f64b = [0u8; 8];
    for _ in 0..count {
        f.read_exact(&mut f64b)?;
        params.push(f64::from_le_bytes(f64b));
    }
    let mut probe = [0u8; 1];
    if f.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after model payload".into()));
    }
    Ok(FnoModel { config, params })
}
