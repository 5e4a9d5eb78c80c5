use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tactile_fscil::config::{DataSource, ExperimentConfig};
use tactile_fscil::experiment::{format_report, gen_dataset, report, report_csv, run_experiment};
use tactile_fscil::selftest::{gradcheck_suite, selftest, Check};

#[derive(Parser)]
#[command(name = "tactile-fscil", version, about = "Few-shot class-incremental learning on tactile spectrograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Library defaults.
    Default,
    /// 40-material synthetic benchmark at workstation scale.
    Desk,
    /// Seconds-long plumbing run.
    Smoke,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML experiment config; omitted sections take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base config used when --config is absent.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// Replace the configured seeds with this one.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => match self.preset {
                Preset::Default => ExperimentConfig::default(),
                Preset::Desk => ExperimentConfig::desk(),
                Preset::Smoke => ExperimentConfig::smoke(),
            },
        };
        if let Some(s) = self.seed {
            cfg.run.seeds = vec![s];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset to a directory.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate every session for each configured seed.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Run seeds on parallel threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Compare run directories: per-session accuracy and summary metrics.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every loss term.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the invariant suites.
    Selftest {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn ensure_fresh(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        bail!("{} exists and is not empty (use --force to overwrite)", dir.display());
    }
    Ok(())
}

fn print_checks(checks: &[Check]) -> bool {
    for c in checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        println!("{mark} {}/{}: {}", c.suite, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    failed == 0
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { cfg, out, force } => {
            let cfg = cfg.load()?;
            let DataSource::Synthetic(spec) = &cfg.data else {
                bail!("config field data.kind: gen needs a synthetic data source");
            };
            let ds = gen_dataset(spec, &out, force)?;
            println!("wrote {} records to {}", ds.samples.len(), out.display());
        }
        Command::Run { cfg, out, force, parallel } => {
            let cfg = cfg.load()?;
            ensure_fresh(&out, force)?;
            let results = run_experiment(&cfg, &out, parallel).context("run failed")?;
            for (seed, r) in cfg.run.seeds.iter().zip(&results) {
                println!("seed {seed}: AA {:.2}%", 100.0 * r.metrics.aa);
            }
            let rows = report(&[out.clone()])?;
            print!("{}", format_report(&rows));
        }
        Command::Report { runs, out } => {
            let rows = report(&runs)?;
            print!("{}", format_report(&rows));
            if let Some(p) = out {
                fs::write(&p, report_csv(&rows)?).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Gradcheck { seed } => return Ok(print_checks(&gradcheck_suite(seed))),
        Command::Selftest { cfg } => {
            let cfg = cfg.load()?;
            return Ok(print_checks(&selftest(&cfg, cfg.run.seeds[0])));
        }
    }
    Ok(true)
}
