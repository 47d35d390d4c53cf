//! Discretized functions on uniform grids, their L² geometry, and dataset
//! persistence.
//!
//! A [`GridFunction`] holds real values on a uniform grid over a 1D interval
//! or the 2D torus. Grid conventions:
//!
//! * Periodic: nodes `x_j = j * extent / n` for `j = 0..n-1` per dimension,
//!   values row-major in 2D.
//! * Dirichlet (1D only): nodes `x_j = j * extent / n` for `j = 1..n`. The
//!   left endpoint is dropped; the right endpoint coincides with the boundary
//!   where admissible functions vanish, so the last stored value is zero for
//!   anything in the sine span. The grids nest exactly under halving.
//!
//! The discrete inner product is the Riemann sum `(extent/n)^d * sum(a*b)`,
//! which is exact on the trigonometric band of the grid.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    Periodic,
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub dims: u8,
    pub extent: f64,
    pub boundary: Boundary,
}

impl DomainSpec {
    pub fn new(dims: u8, extent: f64, boundary: Boundary) -> Result<Self> {
        if dims != 1 && dims != 2 {
            return Err(Error::InvalidConfig(format!("dims must be 1 or 2, got {dims}")));
        }
        if !(extent > 0.0) {
            return Err(Error::InvalidConfig(format!("extent must be positive, got {extent}")));
        }
        if dims == 2 && boundary != Boundary::Periodic {
            return Err(Error::InvalidConfig(
                "2D domains must be periodic (torus)".into(),
            ));
        }
        Ok(Self { dims, extent, boundary })
    }

    /// 1D interval (0, extent) with zero boundary conditions.
    pub fn interval(extent: f64) -> Self {
        Self::new(1, extent, Boundary::Dirichlet).unwrap()
    }

    /// 1D circle of circumference `extent`.
    pub fn circle(extent: f64) -> Self {
        Self::new(1, extent, Boundary::Periodic).unwrap()
    }

    /// 2D unit torus.
    pub fn torus() -> Self {
        Self::new(2, 1.0, Boundary::Periodic).unwrap()
    }

    /// Grid node coordinate along one dimension.
    pub fn node(&self, resolution: usize, j: usize) -> f64 {
        match self.boundary {
            Boundary::Periodic => j as f64 * self.extent / resolution as f64,
            Boundary::Dirichlet => (j + 1) as f64 * self.extent / resolution as f64,
        }
    }

    /// Quadrature weight of a single grid cell.
    pub fn cell_volume(&self, resolution: usize) -> f64 {
        (self.extent / resolution as f64).powi(self.dims as i32)
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 2 || !resolution.is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "resolution must be a power of two >= 2, got {resolution}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub domain: DomainSpec,
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(domain: DomainSpec, resolution: usize, values: Vec<f64>) -> Result<Self> {
        check_resolution(resolution)?;
        let expect = resolution.pow(domain.dims as u32);
        if values.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "expected {expect} values for resolution {resolution}^{}, got {}",
                domain.dims,
                values.len()
            )));
        }
        Ok(Self { domain, resolution, values })
    }

    pub fn zeros(domain: DomainSpec, resolution: usize) -> Result<Self> {
        check_resolution(resolution)?;
        let n = resolution.pow(domain.dims as u32);
        Ok(Self { domain, resolution, values: vec![0.0; n] })
    }

    /// Evaluate a closure at every grid node. 1D gets `f(x, 0)`, 2D `f(x, y)`.
    pub fn from_fn(
        domain: DomainSpec,
        resolution: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut g = Self::zeros(domain, resolution)?;
        match domain.dims {
            1 => {
                for j in 0..resolution {
                    g.values[j] = f(domain.node(resolution, j), 0.0);
                }
            }
            _ => {
                for i in 0..resolution {
                    let x = domain.node(resolution, i);
                    for j in 0..resolution {
                        g.values[i * resolution + j] = f(x, domain.node(resolution, j));
                    }
                }
            }
        }
        Ok(g)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.domain == other.domain && self.resolution == other.resolution
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "grids differ: res {} vs {}",
                self.resolution, other.resolution
            )));
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// self += a * other
    pub fn axpy(&mut self, a: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (v, w) in self.values.iter_mut().zip(&other.values) {
            *v += a * w;
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Riemann-sum approximation of the L² inner product.
pub fn l2_inner(a: &GridFunction, b: &GridFunction) -> Result<f64> {
    a.check_same_shape(b)?;
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(a.domain.cell_volume(a.resolution) * dot)
}

pub fn l2_norm(a: &GridFunction) -> f64 {
    l2_inner(a, a).expect("same grid").sqrt()
}

/// Spectral interpolation to a new resolution: transform, pad or truncate
/// the coefficient band, inverse-transform. Exact on band-limited inputs.
pub fn resample(u: &GridFunction, new_resolution: usize) -> Result<GridFunction> {
    check_resolution(new_resolution)?;
    if new_resolution == u.resolution {
        return Ok(u.clone());
    }
    let s = crate::spectral::forward(u)?;
    crate::spectral::inverse(&s.change_resolution(new_resolution))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub domain: DomainSpec,
    pub resolution: usize,
    pub samples: Vec<GridFunction>,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(domain: DomainSpec, resolution: usize) -> Result<Self> {
        check_resolution(resolution)?;
        Ok(Self { domain, resolution, samples: Vec::new(), metadata: BTreeMap::new() })
    }

    pub fn push(&mut self, u: GridFunction) -> Result<()> {
        if u.domain != self.domain || u.resolution != self.resolution {
            return Err(Error::ShapeMismatch("sample does not match dataset grid".into()));
        }
        self.samples.push(u);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Spectrally resample every sample.
    pub fn resample(&self, new_resolution: usize) -> Result<Dataset> {
        let mut out = Dataset::new(self.domain, new_resolution)?;
        out.metadata = self.metadata.clone();
        for u in &self.samples {
            out.push(resample(u, new_resolution)?)?;
        }
        Ok(out)
    }
}

const MAGIC: &[u8; 4] = b"DDOF";
const VERSION: u32 = 1;

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(d.domain.dims as u32).to_le_bytes());
    let boundary: u32 = match d.domain.boundary {
        Boundary::Periodic => 0,
        Boundary::Dirichlet => 1,
    };
    buf.extend_from_slice(&boundary.to_le_bytes());
    buf.extend_from_slice(&d.domain.extent.to_le_bytes());
    buf.extend_from_slice(&(d.resolution as u32).to_le_bytes());
    buf.extend_from_slice(&(d.samples.len() as u64).to_le_bytes());
    for s in &d.samples {
        for v in &s.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    if !d.metadata.is_empty() {
        let meta_path = sidecar_path(path);
        let json = serde_json::to_string_pretty(&d.metadata)?;
        std::fs::write(meta_path, json)?;
    }
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated payload while reading {what}")))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut f, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    read_exact_or(&mut f, &mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    read_exact_or(&mut f, &mut u32buf, "dims")?;
    let dims = u32::from_le_bytes(u32buf) as u8;
    read_exact_or(&mut f, &mut u32buf, "boundary")?;
    let boundary = match u32::from_le_bytes(u32buf) {
        0 => Boundary::Periodic,
        1 => Boundary::Dirichlet,
        b => return Err(Error::Format(format!("unknown boundary tag {b}"))),
    };
    read_exact_or(&mut f, &mut u64buf, "extent")?;
    let extent = f64::from_le_bytes(u64buf);
    read_exact_or(&mut f, &mut u32buf, "resolution")?;
    let resolution = u32::from_le_bytes(u32buf) as usize;
    read_exact_or(&mut f, &mut u64buf, "count")?;
    let count = u64::from_le_bytes(u64buf) as usize;

    let domain = DomainSpec::new(dims, extent, boundary)?;
    let mut d = Dataset::new(domain, resolution)?;
    let per_sample = resolution.pow(dims as u32);
    for _ in 0..count {
        let mut values = vec![0.0f64; per_sample];
        for v in values.iter_mut() {
            read_exact_or(&mut f, &mut u64buf, "sample values")?;
            *v = f64::from_le_bytes(u64buf);
        }
        d.push(GridFunction::new(domain, resolution, values)?)?;
    }
    // Trailing bytes would indicate a count mismatch.
    let mut extra = [0u8; 1];
    if f.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after declared sample count".into()));
    }
    let meta_path = sidecar_path(path);
    if meta_path.exists() {
        let json = std::fs::read_to_string(meta_path)?;
        d.metadata = serde_json::from_str(&json)?;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn inner_product_constant_on_torus() {
        let dom = DomainSpec::torus();
        let one = GridFunction::from_fn(dom, 8, |_, _| 1.0).unwrap();
        assert_abs_diff_eq!(l2_inner(&one, &one).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn inner_product_sine_on_interval() {
        let dom = DomainSpec::interval(2.0 * std::f64::consts::PI);
        let u = GridFunction::from_fn(dom, 1024, |x, _| (x / 2.0).sin()).unwrap();
        assert_abs_diff_eq!(l2_inner(&u, &u).unwrap(), std::f64::consts::PI, epsilon = 1e-6);
    }

    #[test]
    fn inner_product_with_zero() {
        let dom = DomainSpec::circle(1.0);
        let u = GridFunction::from_fn(dom, 16, |x, _| x.cos()).unwrap();
        let z = GridFunction::zeros(dom, 16).unwrap();
        assert_eq!(l2_inner(&u, &z).unwrap(), 0.0);
    }

    #[test]
    fn inner_product_shape_mismatch() {
        let dom = DomainSpec::circle(1.0);
        let a = GridFunction::zeros(dom, 16).unwrap();
        let b = GridFunction::zeros(dom, 32).unwrap();
        assert!(l2_inner(&a, &b).is_err());
    }

    #[test]
    fn resample_band_limited_exact() {
        let dom = DomainSpec::interval(2.0 * std::f64::consts::PI);
        let coarse = GridFunction::from_fn(dom, 64, |x, _| (x / 2.0).sin()).unwrap();
        let fine = resample(&coarse, 256).unwrap();
        let exact = GridFunction::from_fn(dom, 256, |x, _| (x / 2.0).sin()).unwrap();
        for (a, b) in fine.values.iter().zip(&exact.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn resample_round_trip_on_band() {
        let dom = DomainSpec::circle(1.0);
        // Band-limited: modes |k| < 16 only.
        let u = GridFunction::from_fn(dom, 64, |x, _| {
            (2.0 * std::f64::consts::TAU * x).sin() + 0.5 * (7.0 * std::f64::consts::TAU * x).cos()
        })
        .unwrap();
        let down = resample(&u, 32).unwrap();
        let back = resample(&down, 64).unwrap();
        for (a, b) in back.values.iter().zip(&u.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn resample_zero_any_resolution() {
        let z = GridFunction::zeros(DomainSpec::torus(), 8).unwrap();
        let up = resample(&z, 32).unwrap();
        assert!(up.values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn resample_idempotent_at_fixed_resolution() {
        let dom = DomainSpec::circle(2.0);
        let u = GridFunction::from_fn(dom, 32, |x, _| (std::f64::consts::PI * x).sin()).unwrap();
        let same = resample(&u, 32).unwrap();
        assert_eq!(same, u);
    }

    #[test]
    fn dataset_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ddof");
        let dom = DomainSpec::torus();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let mut d = Dataset::new(dom, 8).unwrap();
        for _ in 0..3 {
            let values: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() - 0.5).collect();
            d.push(GridFunction::new(dom, 8, values).unwrap()).unwrap();
        }
        d.metadata.insert("source".into(), "test".into());
        save_dataset(&d, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.metadata["source"], "test");
        for (a, b) in loaded.samples.iter().zip(&d.samples) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn dataset_empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ddof");
        let d = Dataset::new(DomainSpec::interval(1.0), 16).unwrap();
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap().len(), 0);
    }

    #[test]
    fn dataset_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ddof");
        std::fs::write(&path, b"NOPE").unwrap();
        match load_dataset(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ddof");
        let dom = DomainSpec::circle(1.0);
        let mut d = Dataset::new(dom, 8).unwrap();
        d.push(GridFunction::zeros(dom, 8).unwrap()).unwrap();
        save_dataset(&d, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
    }
}
