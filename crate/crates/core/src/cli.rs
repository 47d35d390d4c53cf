//! Command line front end. Every subcommand reads one JSON config, writes
//! its outputs plus a `manifest.json` echoing the resolved config into
//! `--out`, and refuses to overwrite existing files unless `--force` is
//! given. Exit codes: 0 success, 1 configuration or I/O problems, 2 numeric
//! failures (non-finite states, CFL violations).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::corruption::Corruption;
use crate::datagen::{gen_gaussian_mixture, gen_navier_stokes, GaussianMixtureSpec, NavierStokesSpec};
use crate::diagnostics::{
    invariance_report, noise_regularity_experiment, turbulence_stats, write_regularity_csv,
    RegularityConfig,
};
use crate::error::{Error, Result};
use crate::fno::{load_model, save_model, FnoConfig, FnoModel};
use crate::grid::{load_dataset, save_dataset, Dataset};
use crate::sampler::{ddpm_sample, sample_chains, FnoScore, NoiseMode, SamplerConfig};
use crate::spectral::{average_spectrum, write_spectrum_csv};
use crate::training::{train, LossKind, LossSpec, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "scoreflow", about = "Function-space diffusion models", version)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate Gaussian mixture data on the interval.
    GenGm(CommonArgs),
    /// Generate Navier-Stokes vorticity data on the torus.
    GenNs(CommonArgs),
    /// Train a score model on a dataset.
    Train(CommonArgs),
    /// Draw samples from a trained model.
    Sample(CommonArgs),
    /// Radially averaged spectrum of a dataset.
    EvalSpectrum(CommonArgs),
    /// Turbulence statistics of a vorticity dataset.
    EvalTurbulence(CommonArgs),
    /// Sample a model across resolutions and compare spectra.
    ExpInvariance(CommonArgs),
    /// Plain vs preconditioned objective across resolutions.
    ExpNoiseRegularity(CommonArgs),
    /// Train and sample under a smoothed conditional mean.
    ExpSmoothing(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Rayon thread count (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn prepare_out(args: &CommonArgs, files: &[&str]) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    if !args.force {
        for f in files {
            let p = args.out.join(f);
            if p.exists() {
                return Err(Error::InvalidConfig(format!(
                    "{} already exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
    }
    Ok(())
}

fn write_manifest<C: Serialize>(args: &CommonArgs, command: &str, config: &C) -> Result<()> {
    let manifest = serde_json::json!({
        "command": command,
        "config": serde_json::to_value(config)?,
    });
    std::fs::write(args.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn init_workers(args: &CommonArgs) {
    if let Some(n) = args.workers {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenGm(a) => gen_gm(a),
        Cmd::GenNs(a) => gen_ns(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Sample(a) => sample_cmd(a),
        Cmd::EvalSpectrum(a) => eval_spectrum(a),
        Cmd::EvalTurbulence(a) => eval_turbulence(a),
        Cmd::ExpInvariance(a) => exp_invariance(a),
        Cmd::ExpNoiseRegularity(a) => exp_noise_regularity(a),
        Cmd::ExpSmoothing(a) => exp_smoothing(a),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenGmConfig {
    mixture: GaussianMixtureSpec,
    count: usize,
    resolution: usize,
    #[serde(default)]
    seed: u64,
}

fn gen_gm(args: CommonArgs) -> Result<()> {
    init_workers(&args);
    let mut cfg: GenGmConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    prepare_out(&args, &["data.bin", "manifest.json"])?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let data = gen_gaussian_mixture(&cfg.mixture, cfg.count, cfg.resolution, &mut rng)?;
    save_dataset(&data, &args.out.join("data.bin"))?;
    write_manifest(&args, "gen-gm", &cfg)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenNsConfig {
    ns: NavierStokesSpec,
    count: usize,
    #[serde(default)]
    seed: u64,
}

fn gen_ns(args: CommonArgs) -> Result<()> {
    init_workers(&args);
    let mut cfg: GenNsConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    prepare_out(&args, &["data.bin", "manifest.json"])?;
    let data = gen_navier_stokes(&cfg.ns, cfg.count, cfg.seed)?;
    save_dataset(&data, &args.out.join("data.bin"))?;
    write_manifest(&args, "gen-ns", &cfg)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCliConfig {
    data: PathBuf,
    kind: LossKind,
    corruption: Corruption,
    fno: FnoConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn train_cmd(args: CommonArgs) -> Result<()> {
    init_workers(&args);
    let mut cfg: TrainCliConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    prepare_out(&args, &["model.bin", "loss_history.csv", "manifest.json"])?;
    let data = load_dataset(&cfg.data)?;
    let spec = LossSpec::new(cfg.kind, cfg.corruption.clone())?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.train.seed);
    let mut model = FnoModel::init(cfg.fno, &mut rng)?;
    let report = train(&mut model, &spec, &data, &cfg.train, &mut rng)?;
    save_model(&model, &args.out.join("model.bin"))?;
    report.write_csv(&args.out.join("loss_history.csv"))?;
    write_manifest(&args, "train", &cfg)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleCliConfig {
    model: PathBuf,
    kind: LossKind,
    corruption: Corruption,
    #[serde(default)]
    sampler: SamplerConfig,
    resolution: usize,
}

fn sample_cmd(args: CommonArgs) -> Result<()> {
    init_workers(&args);
    let mut cfg: SampleCliConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.sampler.seed = s;
    }
    prepare_out(&args, &["samples.bin", "manifest.json"])?;
    let model = load_model(&cfg.model)?;
    let spec = LossSpec::new(cfg.kind, cfg.corruption.clone())?;
    let score = FnoScore { model, spec };
    let samples = if cfg.kind.is_ddpm() {
        let fields: Result<Vec<_>> = (0..cfg.sampler.chains)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha20Rng::seed_from_u64(
                    cfg.sampler.seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15),
                );
                ddpm_sample(
                    &score,
                    &score.spec.corruption,
                    cfg.resolution,
                    cfg.sampler.noise,
                    None,
                    &mut rng,
                )
            })
            .collect();
        let mut out = Dataset::new(score.spec.corruption.cov.domain, cfg.resolution)?;
        for f in fields? {
            out.push(f)?;
        }
        out
    } else {
        sample_chains(&score, &score.spec.corruption.cov, cfg.resolution, &cfg.sampler, None)?
    };
    save_dataset(&samples, &args.out.join("samples.bin"))?;
    write_manifest(&args, "sample", &cfg)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSpectrumConfig {
    data: PathBuf,
}

fn eval_spectrum(args: CommonArgs) -> Result<()> {
    let cfg: EvalSpectrumConfig = read_config(&args.config)?;
    prepare_out(&args, &["spectrum.csv", "manifest.json"])?;
    let data = load_dataset(&cfg.data)?;
    let spec = average_spectrum(&data)?;
    write_spectrum_csv(&spec, &args.out.join("spectrum.csv"))?;
    write_manifest(&args, "eval-spectrum", &cfg)
}

fn default_bins() -> usize {
    64
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalTurbulenceConfig {
    data: PathBuf,
    #[serde(default = "default_bins")]
    histogram_bins: usize,
}

fn eval_turbulence(args: CommonArgs) -> Result<()> {
    let cfg: EvalTurbulenceConfig = read_config(&args.config)?;
    prepare_out(
        &args,
        &["energy_spectrum.csv", "vorticity_histogram.csv", "stats.json", "manifest.json"],
    )?;
    let data = load_dataset(&cfg.data)?;
    let stats = turbulence_stats(&data, cfg.histogram_bins)?;
    stats.write_csv(&args.out)?;
    std::fs::write(
        args.out.join("stats.json"),
        serde_json::to_string_pretty(
            &serde_json::json!({ "mean_kinetic_energy": stats.mean_kinetic_energy }),
        )?,
    )?;
    write_manifest(&args, "eval-turbulence", &cfg)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpInvarianceConfig {
    model: PathBuf,
    kind: LossKind,
    corruption: Corruption,
    reference: PathBuf,
    resolutions: Vec<usize>,
    max_k: u64,
    #[serde(default)]
    sampler: SamplerConfig,
}

fn exp_invariance(args: CommonArgs) -> Result<()> {
    init_workers(&args);
    let mut cfg: ExpInvarianceConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.sampler.seed = s;
    }
    prepare_out(&args, &["invariance.csv", "manifest.json"])?;
    let model = load_model(&cfg.model)?;
    let spec = LossSpec::new(cfg.kind, cfg.corruption.clone())?;
    let score = FnoScore { model, spec };
    let reference = load_dataset(&cfg.reference)?;
    let report = invariance_report(
        &score,
        &score.spec.corruption.cov,
        &cfg.resolutions,
        &reference,
        &cfg.sampler,
        cfg.max_k,
    )?;
    report.write_csv(&args.out.join("invariance.csv"))?;
    for row in &report.rows {
        write_spectrum_csv(
            &row.sampled,
            &args.out.join(format!("spectrum_sampled_{}.csv", row.resolution)),
        )?;
        write_spectrum_csv(
            &row.reference,
            &args.out.join(format!("spectrum_reference_{}.csv", row.resolution)),
        )?;
    }
    write_manifest(&args, "exp-invariance", &cfg)
}

fn exp_noise_regularity(args: CommonArgs) -> Result<()> {
    init_workers(&args);
    let mut cfg: RegularityConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    prepare_out(&args, &["regularity.csv", "manifest.json"])?;
    let rows = noise_regularity_experiment(&cfg)?;
    write_regularity_csv(&rows, &args.out.join("regularity.csv"))?;
    write_manifest(&args, "exp-noise-regularity", &cfg)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpSmoothingConfig {
    mixture: GaussianMixtureSpec,
    kind: LossKind,
    /// A corruption whose conditional mean applies a smoothing operator.
    corruption: Corruption,
    fno: FnoConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    sampler: SamplerConfig,
    resolution: usize,
    train_count: usize,
}

fn exp_smoothing(args: CommonArgs) -> Result<()> {
    init_workers(&args);
    let mut cfg: ExpSmoothingConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
        cfg.sampler.seed = s;
    }
    prepare_out(
        &args,
        &["model.bin", "loss_history.csv", "samples.bin", "spectrum.csv", "manifest.json"],
    )?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.train.seed);
    let data = gen_gaussian_mixture(&cfg.mixture, cfg.train_count, cfg.resolution, &mut rng)?;
    let spec = LossSpec::new(cfg.kind, cfg.corruption.clone())?;
    let mut model = FnoModel::init(cfg.fno, &mut rng)?;
    let report = train(&mut model, &spec, &data, &cfg.train, &mut rng)?;
    save_model(&model, &args.out.join("model.bin"))?;
    report.write_csv(&args.out.join("loss_history.csv"))?;
    let score = FnoScore { model, spec };
    let samples = if cfg.kind.is_ddpm() {
        let mut out = Dataset::new(score.spec.corruption.cov.domain, cfg.resolution)?;
        for i in 0..cfg.sampler.chains {
            let mut srng = ChaCha20Rng::seed_from_u64(
                cfg.sampler.seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15),
            );
            out.push(ddpm_sample(
                &score,
                &score.spec.corruption,
                cfg.resolution,
                NoiseMode::Covariance,
                None,
                &mut srng,
            )?)?;
        }
        out
    } else {
        sample_chains(&score, &score.spec.corruption.cov, cfg.resolution, &cfg.sampler, None)?
    };
    save_dataset(&samples, &args.out.join("samples.bin"))?;
    write_spectrum_csv(&average_spectrum(&samples)?, &args.out.join("spectrum.csv"))?;
    write_manifest(&args, "exp-smoothing", &cfg)
}
