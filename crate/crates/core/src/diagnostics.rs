//! Evaluation utilities: spectra comparison, empirical Wasserstein
//! distances, turbulence statistics, and the two headline experiments
//! (resolution invariance of the sampler, and how the training objective
//! reacts to noise regularity).

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::Corruption;
use crate::datagen::{gen_gaussian_mixture, GaussianMixtureSpec};
use crate::error::{Error, Result};
use crate::fno::{FnoConfig, FnoModel};
use crate::grf::{GrfSampler, MaternCovariance};
use crate::grid::{Dataset, GridFunction};
use crate::sampler::{sample_chains, SamplerConfig, ScoreModel};
use crate::spectral::{self, average_spectrum, laplacian_eigenvalue, Coeffs};
use crate::training::{batch_value_and_grad, train, LossKind, LossSpec, TrainConfig};

/// Largest relative deviation between two radially averaged spectra over the
/// shared wavenumbers up to `max_k`, with `reference` in the denominator.
pub fn spectrum_sup_error(
    candidate: &[(u64, f64)],
    reference: &[(u64, f64)],
    max_k: u64,
) -> f64 {
    let mut sup = 0.0f64;
    for &(k, r) in reference {
        if k == 0 || k > max_k || r <= 0.0 {
            continue;
        }
        if let Some(&(_, c)) = candidate.iter().find(|(kk, _)| *kk == k) {
            sup = sup.max((c - r).abs() / r);
        }
    }
    sup
}

/// Kinetic energy of a vorticity field: (1/2) sum_{k != 0} |w_k|^2 / eig(k)
/// in the orthonormal basis.
pub fn kinetic_energy(omega: &GridFunction) -> Result<f64> {
    let s = spectral::forward(omega)?;
    let mut e = 0.0;
    for i in 0..s.num_coeffs() {
        let k = s.wavevector(i);
        let eig = laplacian_eigenvalue(&omega.domain, k);
        if eig > 0.0 {
            e += s.coeff_abs(i).powi(2) / eig;
        }
    }
    Ok(0.5 * e)
}

/// Empirical 2-Wasserstein distance between two scalar samples via the
/// quantile coupling; sample sizes may differ.
pub fn empirical_w2(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let (mut i, mut j) = (0usize, 0usize);
    let mut q = 0.0;
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let qa = (i + 1) as f64 / na;
        let qb = (j + 1) as f64 / nb;
        let qn = qa.min(qb);
        let d = a[i] - b[j];
        acc += d * d * (qn - q);
        q = qn;
        if qa <= qb {
            i += 1;
        }
        if qb <= qa {
            j += 1;
        }
    }
    acc.sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub resolution: usize,
    pub sup_error: f64,
    pub sampled: Vec<(u64, f64)>,
    pub reference: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub rows: Vec<SpectrumRow>,
}

impl InvarianceReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut s = String::from("resolution,sup_error\n");
        for r in &self.rows {
            s.push_str(&format!("{},{}\n", r.resolution, r.sup_error));
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Sample the model at several resolutions and compare each spectrum against
/// the reference data resampled to that grid. A resolution-invariant sampler
/// keeps all sup errors flat and small.
pub fn invariance_report(
    score: &(impl ScoreModel + Sync),
    cov: &MaternCovariance,
    resolutions: &[usize],
    reference: &Dataset,
    cfg: &SamplerConfig,
    max_k: u64,
) -> Result<InvarianceReport> {
    let mut report = InvarianceReport::default();
    for &res in resolutions {
        let sampled = sample_chains(score, cov, res, cfg, None)?;
        let samp_spec = average_spectrum(&sampled)?;
        let reference_at_res =
            if reference.resolution == res { reference.clone() } else { reference.resample(res)? };
        let ref_spec = average_spectrum(&reference_at_res)?;
        let sup = spectrum_sup_error(&samp_spec, &ref_spec, max_k);
        report.rows.push(SpectrumRow {
            resolution: res,
            sup_error: sup,
            sampled: samp_spec,
            reference: ref_spec,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularityConfig {
    pub data: GaussianMixtureSpec,
    pub corruption: Corruption,
    pub fno: FnoConfig,
    pub train: TrainConfig,
    pub train_resolution: usize,
    pub eval_resolutions: Vec<usize>,
    pub train_count: usize,
    pub eval_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegularityRow {
    pub resolution: usize,
    pub plain: f64,
    pub precond: f64,
}

pub fn write_regularity_csv(rows: &[RegularityRow], path: &std::path::Path) -> Result<()> {
    let mut s = String::from("resolution,plain,precond\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.resolution, r.plain, r.precond));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Train the same architecture under the plain and the preconditioned
/// objectives, then measure each model's own test loss across resolutions.
/// When the residual noise is rougher than the covariance allows, the
/// preconditioned loss grows with resolution while the plain one stays flat.
pub fn noise_regularity_experiment(cfg: &RegularityConfig) -> Result<Vec<RegularityRow>> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let train_data =
        gen_gaussian_mixture(&cfg.data, cfg.train_count, cfg.train_resolution, &mut rng)?;

    let specs = [
        LossSpec::new(LossKind::PlainDsm, cfg.corruption.clone())?,
        LossSpec::new(LossKind::PrecondDsm, cfg.corruption.clone())?,
    ];
    let mut models = Vec::new();
    for spec in &specs {
        let mut model = FnoModel::init(cfg.fno, &mut ChaCha20Rng::seed_from_u64(cfg.seed ^ 1))?;
        let mut train_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 2);
        train(&mut model, spec, &train_data, &cfg.train, &mut train_rng)?;
        models.push(model);
    }

    let mut rows = Vec::new();
    for &res in &cfg.eval_resolutions {
        let mut eval_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 3);
        let eval_data = gen_gaussian_mixture(&cfg.data, cfg.eval_count, res, &mut eval_rng)?;
        let mut losses = [0.0; 2];
        for (which, (model, spec)) in models.iter().zip(&specs).enumerate() {
            let sampler = GrfSampler::new(&spec.corruption.cov, res);
            let mut acc = 0.0;
            for u in &eval_data.samples {
                let t = spec.draw_level(&mut eval_rng);
                let prepared = [spec.prepare(u, t, &sampler, &mut eval_rng)?];
                let (value, _) = batch_value_and_grad(model, spec, &prepared)?;
                acc += value;
            }
            losses[which] = acc / eval_data.len() as f64;
        }
        rows.push(RegularityRow { resolution: res, plain: losses[0], precond: losses[1] });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurbulenceStats {
    /// Radially binned kinetic energy per wavenumber, averaged over samples.
    pub energy_spectrum: Vec<(u64, f64)>,
    /// (bin center, density) over all vorticity point values.
    pub vorticity_histogram: Vec<(f64, f64)>,
    pub mean_kinetic_energy: f64,
}

impl TurbulenceStats {
    pub fn write_csv(&self, dir: &std::path::Path) -> Result<()> {
        let mut s = String::from("k,energy\n");
        for (k, e) in &self.energy_spectrum {
            s.push_str(&format!("{k},{e}\n"));
        }
        std::fs::write(dir.join("energy_spectrum.csv"), s)?;
        let mut s = String::from("vorticity,density\n");
        for (v, d) in &self.vorticity_histogram {
            s.push_str(&format!("{v},{d}\n"));
        }
        std::fs::write(dir.join("vorticity_histogram.csv"), s)?;
        Ok(())
    }
}

pub fn turbulence_stats(data: &Dataset, histogram_bins: usize) -> Result<TurbulenceStats> {
    if data.is_empty() || histogram_bins == 0 {
        return Err(Error::InvalidConfig("need samples and a positive bin count".into()));
    }
    // Energy spectrum: bin (1/2)|w_k|^2 / eig by round(|k|).
    let mut acc: std::collections::BTreeMap<u64, f64> = std::collections::BTreeMap::new();
    let mut mean_ke = 0.0;
    for u in &data.samples {
        mean_ke += kinetic_energy(u)? / data.len() as f64;
        let s = spectral::forward(u)?;
        if let Coeffs::Complex(c) = &s.coeffs {
            for i in 0..c.len() {
                let k = s.wavevector(i);
                let eig = laplacian_eigenvalue(&data.domain, k);
                if eig > 0.0 {
                    let radius =
                        ((k[0] * k[0] + k[1] * k[1]) as f64).sqrt().round() as u64;
                    *acc.entry(radius).or_insert(0.0) +=
                        0.5 * c[i].norm_sqr() / eig / data.len() as f64;
                }
            }
        } else {
            return Err(Error::InvalidConfig("turbulence statistics expect periodic data".into()));
        }
    }

    // Histogram over a symmetric range.
    let mut maxabs = 0.0f64;
    for u in &data.samples {
        for v in &u.values {
            maxabs = maxabs.max(v.abs());
        }
    }
    if maxabs == 0.0 {
        maxabs = 1.0;
    }
    let lo = -maxabs;
    let width = 2.0 * maxabs / histogram_bins as f64;
    let mut counts = vec![0u64; histogram_bins];
    let mut total = 0u64;
    for u in &data.samples {
        for v in &u.values {
            let b = (((v - lo) / width) as usize).min(histogram_bins - 1);
            counts[b] += 1;
            total += 1;
        }
    }
    let histogram = counts
        .iter()
        .enumerate()
        .map(|(b, &c)| {
            let center = lo + (b as f64 + 0.5) * width;
            (center, c as f64 / (total as f64 * width))
        })
        .collect();

    Ok(TurbulenceStats {
        energy_spectrum: acc.into_iter().collect(),
        vorticity_histogram: histogram,
        mean_kinetic_energy: mean_ke,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::NoiseSchedule;
    use crate::fno::Activation;
    use crate::grid::DomainSpec;
    use crate::sampler::OracleScore;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    const PI: f64 = std::f64::consts::PI;
    const TAU: f64 = std::f64::consts::TAU;

    #[test]
    fn kinetic_energy_closed_form() {
        // omega = cos(2 pi k x) on the torus has KE = 1 / (16 pi^2 k^2).
        for k in [1usize, 2] {
            let w = GridFunction::from_fn(DomainSpec::torus(), 32, |x, _| {
                (k as f64 * TAU * x).cos()
            })
            .unwrap();
            let ke = kinetic_energy(&w).unwrap();
            let expected = 1.0 / (16.0 * PI * PI * (k * k) as f64);
            assert_abs_diff_eq!(ke, expected, epsilon = 1e-12);
        }
        // Additive over orthogonal modes.
        let w = GridFunction::from_fn(DomainSpec::torus(), 32, |x, y| {
            (TAU * x).cos() + (2.0 * TAU * y).cos()
        })
        .unwrap();
        let expected = 1.0 / (16.0 * PI * PI) + 1.0 / (64.0 * PI * PI);
        assert_abs_diff_eq!(kinetic_energy(&w).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn w2_basics() {
        let a = vec![0.0, 1.0, 2.0];
        assert_abs_diff_eq!(empirical_w2(&a, &a), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(empirical_w2(&[0.0], &[1.0]), 1.0, epsilon = 1e-15);
        // Pure shift: distance equals the shift for any sample.
        let b: Vec<f64> = a.iter().map(|v| v + 0.7).collect();
        assert_abs_diff_eq!(empirical_w2(&a, &b), 0.7, epsilon = 1e-12);
        // Order invariance.
        assert_abs_diff_eq!(
            empirical_w2(&[2.0, 0.0, 1.0], &[1.7, 2.7, 0.7]),
            0.7,
            epsilon = 1e-12
        );
    }

    #[test]
    fn w2_equal_n_matches_sorted_coupling() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..200).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal) + 1.0).collect();
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        let direct = (sa
            .iter()
            .zip(&sb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 200.0)
            .sqrt();
        assert_abs_diff_eq!(empirical_w2(&a, &b), direct, epsilon = 1e-12);
    }

    #[test]
    fn w2_gaussian_shift() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..40_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..30_000)
            .map(|_| rng.sample::<f64, _>(StandardNormal) + 2.0)
            .collect();
        let w = empirical_w2(&a, &b);
        assert!((w - 2.0).abs() < 0.05, "W2 = {w}, expected about 2");
    }

    #[test]
    fn sup_error_behaviour() {
        let refspec = vec![(0u64, 1.0), (1, 1.0), (2, 2.0), (3, 4.0)];
        let cand = vec![(1u64, 1.1), (2, 2.0), (3, 3.0), (9, 100.0)];
        // k=0 skipped, k=9 not shared below max_k, worst is k=3: 25%.
        assert_abs_diff_eq!(spectrum_sup_error(&cand, &refspec, 5), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(spectrum_sup_error(&cand, &refspec, 2), 0.1, epsilon = 1e-12);
        assert_eq!(spectrum_sup_error(&refspec, &refspec, 5), 0.0);
    }

    #[test]
    fn invariance_report_runs_on_oracle() {
        let dom = DomainSpec::interval(2.0 * PI);
        let data_cov = MaternCovariance::new(dom, 3.0, 3.0, 3.0).unwrap();
        let noise_cov = MaternCovariance::new(dom, 0.5, 0.1, 0.6).unwrap();
        let corr = Corruption::new(
            NoiseSchedule::geometric(1.0, 0.01, 10).unwrap(),
            noise_cov,
            None,
        )
        .unwrap();
        let oracle = OracleScore::new(None, data_cov, corr).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut reference = Dataset::new(dom, 128).unwrap();
        let sampler = GrfSampler::new(&data_cov, 128);
        for _ in 0..64 {
            reference.push(sampler.sample(None, &mut rng).unwrap()).unwrap();
        }
        let cfg = SamplerConfig { m_steps: 3, chains: 8, seed: 4, ..Default::default() };
        let rep = invariance_report(
            &oracle,
            &oracle.corruption.cov,
            &[32, 64],
            &reference,
            &cfg,
            8,
        )
        .unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert!(rep.rows.iter().all(|r| r.sup_error.is_finite()));
        // Deterministic under the same seed.
        let rep2 = invariance_report(
            &oracle,
            &oracle.corruption.cov,
            &[32, 64],
            &reference,
            &cfg,
            8,
        )
        .unwrap();
        assert_eq!(rep.rows[0].sup_error, rep2.rows[0].sup_error);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inv.csv");
        rep.write_csv(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
    }

    #[test]
    fn regularity_experiment_separates_objectives() {
        let dom = DomainSpec::interval(2.0 * PI);
        let cfg = RegularityConfig {
            data: GaussianMixtureSpec {
                cov: MaternCovariance::new(dom, 4.0, 1.0, 3.0).unwrap(),
                mean: crate::datagen::MixtureMean::SineHalf,
                p: 0.5,
            },
            corruption: Corruption::new(
                NoiseSchedule::geometric(1.0, 0.01, 10).unwrap(),
                MaternCovariance::new(dom, 0.2, 1.0, 2.0).unwrap(),
                None,
            )
            .unwrap(),
            fno: FnoConfig {
                domain: dom,
                modes: 4,
                width: 6,
                layers: 2,
                activation: Activation::Gelu,
            },
            train: TrainConfig { epochs: 3, batch_size: 8, ..Default::default() },
            train_resolution: 32,
            eval_resolutions: vec![16, 32, 64],
            train_count: 16,
            eval_count: 8,
            seed: 7,
        };
        let rows = noise_regularity_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 3);
        // The preconditioned objective roughly doubles with resolution; the
        // plain objective does not.
        let precond_ratio = rows[2].precond / rows[0].precond;
        let plain_ratio = rows[2].plain / rows[0].plain;
        assert!(precond_ratio > 2.0, "precond ratio {precond_ratio}");
        assert!(plain_ratio < 1.5, "plain ratio {plain_ratio}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.csv");
        write_regularity_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("resolution,plain,precond\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn turbulence_stats_single_mode() {
        let dom = DomainSpec::torus();
        let mut d = Dataset::new(dom, 32).unwrap();
        let w = GridFunction::from_fn(dom, 32, |x, _| (2.0 * TAU * x).cos()).unwrap();
        d.push(w).unwrap();
        let stats = turbulence_stats(&d, 16).unwrap();
        // All energy sits in the |k| = 2 shell.
        let expected = 1.0 / (64.0 * PI * PI);
        for (k, e) in &stats.energy_spectrum {
            if *k == 2 {
                assert_abs_diff_eq!(*e, expected, epsilon = 1e-12);
            } else {
                assert!(*e < 1e-20);
            }
        }
        assert_abs_diff_eq!(stats.mean_kinetic_energy, expected, epsilon = 1e-12);
        // Histogram integrates to one.
        let width = stats.vorticity_histogram[1].0 - stats.vorticity_histogram[0].0;
        let mass: f64 = stats.vorticity_histogram.iter().map(|(_, d)| d * width).sum();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn turbulence_stats_permutation_invariant() {
        let dom = DomainSpec::torus();
        let cov = MaternCovariance::new(dom, 1.0, 1.0, 2.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut d = Dataset::new(dom, 16).unwrap();
        for _ in 0..6 {
            d.push(cov.sample(None, 16, &mut rng).unwrap()).unwrap();
        }
        let mut shuffled = d.clone();
        shuffled.samples.reverse();
        let a = turbulence_stats(&d, 8).unwrap();
        let b = turbulence_stats(&shuffled, 8).unwrap();
        for ((k1, e1), (k2, e2)) in a.energy_spectrum.iter().zip(&b.energy_spectrum) {
            assert_eq!(k1, k2);
            assert_abs_diff_eq!(e1, e2, epsilon = 1e-14);
        }
        assert_eq!(a.vorticity_histogram, b.vorticity_histogram);
    }
}
