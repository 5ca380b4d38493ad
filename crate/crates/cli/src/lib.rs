//! `hrkan` subcommands. Each one reads an experiment config, does its work and
//! writes its artifacts under the run directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hrkan::config::ExperimentConfig;
use hrkan::gradcheck;
use hrkan::model::BhrKanModel;
use hrkan::oracles;
use hrkan::pde::{make_grid, sample_functional_noise, write_grid_csv};
use hrkan::train::{seeded_stream, train_run, RunManifest, Task};
use hrkan::uq::{build_report, emit_report, read_metrics, test_set, Metrics};

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "HRKAN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hrkan", version, about = "Bayesian higher-order ReLU-KAN experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a 1-D regression task and write the uncertainty report.
    Fit1d(RunArgs),
    /// Train on a PDE task and write the uncertainty report.
    Pde(RunArgs),
    /// Load a trained model and recompute the posterior report.
    Sample(SampleArgs),
    /// Print the manifest and metrics of a finished run.
    Report {
        /// Run directory holding manifest.json and metrics.json.
        run: PathBuf,
    },
    /// Check every parameter gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Regenerate the reference fixtures from the independent oracles.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "oracle_fixtures.json")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the number of posterior samples in the report.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Saved model; defaults to `model.json` in the output directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(n) = args.samples {
        if n < 2 {
            bail!("--samples must be at least 2");
        }
        cfg.inference.samples = n;
    }
    Ok(cfg)
}

fn write_report(model: &BhrKanModel, cfg: &ExperimentConfig) -> Result<Metrics> {
    let test = test_set(&cfg.task, cfg.inference.test_points, cfg.inference.test_grid, cfg.seed)?;
    let report = build_report(model, test, cfg.inference.samples, cfg.seed)?;
    emit_report(&report, &cfg.out_dir)?;
    Ok(report.metrics)
}

fn print_metrics(m: &Metrics) {
    println!("mse           {:.6e}", m.mse);
    println!("std(sq err)   {:.6e}", m.std);
    println!("epi_avg       {:.6e}", m.epi_avg);
    if let Some(s) = m.sigma_avg {
        println!("sigma_avg     {s:.6}");
        println!("sigma q2.5    {:.6}", m.q2_5.unwrap_or(f64::NAN));
        println!("sigma q97.5   {:.6}", m.q97_5.unwrap_or(f64::NAN));
    }
    if let Some(nu) = m.nu_hat {
        println!("nu_hat        {nu:.4}");
    }
}

fn train(args: &RunArgs, want_pde: bool) -> Result<()> {
    let cfg = load_config(args)?;
    if cfg.name.is_pde() != want_pde {
        let cmd = if cfg.name.is_pde() { "pde" } else { "fit1d" };
        bail!("config task {:?} must be run with `{cmd}`", cfg.name);
    }
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if let Task::Pde(task) = &cfg.task {
        let grid = make_grid(task.train_grid_n, task.domain)?;
        let u_true: Vec<f64> = grid.points.iter().map(|p| task.exact(p[0], p[1])).collect();
        let noise = sample_functional_noise(&grid.points, task.sigma_noise, task.noise_dependence, &mut seeded_stream(cfg.seed, 4));
        let u_noisy: Vec<f64> = u_true.iter().zip(noise).map(|(u, e)| u + e).collect();
        write_grid_csv(&out.join("train_grid.csv"), &grid, &u_true, &u_noisy)?;
    }
    eprintln!("training {:?} for {} iterations", cfg.name, cfg.train.iterations);
    let outcome = train_run(&cfg.task, &cfg.model, &cfg.train, Some(&out.join("loss.csv")))?;
    outcome.model.save(&out.join("model.json"))?;
    let mut manifest = outcome.manifest;
    manifest.experiment = Some(cfg.to_toml()?);
    manifest.write(&out.join("manifest.json"))?;
    let last = manifest.final_losses;
    println!(
        "final loss {:.6e} (data {:.6e}, bc {:.6e}, kl {:.6e}) in {:.1} s",
        last.total, last.data, last.bc, last.kl, manifest.wall_seconds
    );
    eprintln!("sampling {} posterior draws", cfg.inference.samples);
    print_metrics(&write_report(&outcome.model, &cfg)?);
    println!("artifacts in {}", out.display());
    Ok(())
}

fn sample(args: &SampleArgs) -> Result<()> {
    let cfg = load_config(&args.run)?;
    let path = args.model.clone().unwrap_or_else(|| cfg.out_dir.join("model.json"));
    let model = BhrKanModel::load(&path)?;
    if model.input_dim() != cfg.model.width[0] {
        bail!("{} has input dimension {}, config expects {}", path.display(), model.input_dim(), cfg.model.width[0]);
    }
    print_metrics(&write_report(&model, &cfg)?);
    println!("report in {}", cfg.out_dir.display());
    Ok(())
}

fn report(run: &Path) -> Result<()> {
    if !run.is_dir() {
        bail!("run directory {} does not exist", run.display());
    }
    let manifest = RunManifest::read(&run.join("manifest.json"))?;
    let metrics = read_metrics(&run.join("metrics.json"))?;
    println!("run           {}", run.display());
    println!("version       {}", manifest.git_describe);
    println!("seed          {}", manifest.seed);
    println!("iterations    {} ({} optimizer resets)", manifest.iterations, manifest.resets);
    println!("wall time     {:.1} s", manifest.wall_seconds);
    println!("final loss    {:.6e}", manifest.final_losses.total);
    println!("floor events  {}", manifest.floor_events);
    print_metrics(&metrics);
    Ok(())
}

fn run_gradcheck(seed: u64, tolerance: f64) -> Result<()> {
    let results = gradcheck::run_all(seed, tolerance)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<20} {:>4} parameters  max error {:.3e}", r.name, r.parameters, r.max_error);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        bail!("{failed} gradient suite(s) exceeded tolerance {tolerance:e}");
    }
    Ok(())
}

fn run_oracle(seed: u64, out: &Path) -> Result<()> {
    let fixtures = oracles::fixtures(seed)?;
    std::fs::write(out, serde_json::to_string_pretty(&fixtures)?).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Sizes the global worker pool from [`THREADS_ENV`] when set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Fit1d(args) => train(args, false),
        Command::Pde(args) => train(args, true),
        Command::Sample(args) => sample(args),
        Command::Report { run } => report(run),
        Command::Gradcheck { seed, tolerance } => run_gradcheck(*seed, *tolerance),
        Command::Oracle { seed, out } => run_oracle(*seed, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_replace_config_values() {
        let cli = Cli::try_parse_from(["hrkan", "pde", "--config", "c.toml", "--seed", "9", "--samples", "12"]).unwrap();
        let Command::Pde(args) = cli.command else { panic!() };
        assert_eq!((args.seed, args.samples), (Some(9), Some(12)));
        assert!(Cli::try_parse_from(["hrkan", "pde"]).is_err());
    }
}
