use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use mhfpn::config::RunConfig;
use mhfpn::data::{generate_dataset, save_annotations};
use mhfpn::gradsuite::{run_suite, SuiteOptions};
use mhfpn::harness::{run_ablate, run_eval, run_train};
use mhfpn::metrics::{fmt_opt, REPORT_COLUMNS};
use mhfpn::OpKind;

/// Train, evaluate and compare feature-pyramid necks on synthetic detection data.
#[derive(Debug, Parser)]
#[command(name = "mhfpn", version)]
struct Cli {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the configured replicate, keeping the best-validation checkpoint.
    Train,
    /// Evaluate a checkpoint on the replicate's test part.
    Eval {
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every variant on every replicate.
    Ablate,
    /// Finite-difference check of every op, every neck and the detector loss.
    Gradcheck {
        /// Random points per component.
        #[arg(long, default_value_t = 10)]
        points: usize,
        /// Scale the adjoint of one op kind (fault injection), e.g. `conv2d:1.01`.
        #[arg(long, value_name = "OP[:FACTOR]")]
        corrupt: Option<String>,
    },
    /// Write the synthetic dataset as PGM images plus `annotations.json`.
    GenData,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {o:?}"))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| anyhow!("--set: {e}"))?;
    }
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_fault(spec: &str) -> Result<(OpKind, f64)> {
    let (name, factor) = match spec.split_once(':') {
        Some((n, f)) => (n, f.parse().with_context(|| format!("bad factor in {spec:?}"))?),
        None => (spec, 1.5),
    };
    let kind = OpKind::parse(name).ok_or_else(|| anyhow!("unknown op {name:?}"))?;
    Ok((kind, factor))
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    info!("resolved config:\n{}", cfg.resolved());
    let out = &cli.out;
    match &cli.command {
        Command::Train => {
            let outcome = run_train(&cfg, out)?;
            println!(
                "best epoch {} of {}; wrote {}",
                outcome.best_epoch,
                cfg.train.epochs,
                out.join("checkpoint.bin").display()
            );
        }
        Command::Eval { checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.bin"));
            let report = run_eval(&cfg, &ckpt, out)?;
            for (name, v) in REPORT_COLUMNS.iter().skip(1).zip(report.row_values()) {
                println!("{name:<8} {}", fmt_opt(v));
            }
        }
        Command::Ablate => {
            let result = run_ablate(&cfg, out)?;
            print!("{}", result.summary_csv());
        }
        Command::Gradcheck { points, corrupt } => {
            if *points == 0 {
                bail!("--points must be positive");
            }
            let opts = SuiteOptions {
                points: *points,
                seed: cfg.train.seed,
                neck: cfg.model.neck.clone(),
                fault: corrupt.as_deref().map(parse_fault).transpose()?,
                ..Default::default()
            };
            let report = run_suite(&opts)?;
            println!("{report}");
            return Ok(report.passed());
        }
        Command::GenData => {
            let n = cfg.data.n_images + cfg.data.extra_train;
            let images = generate_dataset(&cfg.data.scene, n)?;
            fs::create_dir_all(out)?;
            save_annotations(&images, out)?;
            let masses: usize = images.iter().map(|i| i.gts.len()).sum();
            println!("wrote {n} images with {masses} masses to {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
