//! `diffmavil` command-line harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use diffmavil::config::RunConfig;
use diffmavil::data::{dump_pairs, LatentSpec};
use diffmavil::diffusion::DiffusionSchedule;
use diffmavil::flops::{flops_compare, flops_pretraining};
use diffmavil::rng;
use diffmavil::selftest;
use diffmavil::train::pretrain;

/// Output directory override, used when `--out` is absent.
const OUT_DIR_ENV: &str = "DIFFMAVIL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "diffmavil",
    version,
    about = "Audio-video masked autoencoder pre-training on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on synthetic pairs; writes config, metrics, checkpoint and summary.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic pre-training FLOPS, optionally as ratios against a baseline.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Per-epoch masking ratio, batch size, step count and learning rate.
    Schedule {
        #[arg(long)]
        config: PathBuf,
    },
    /// Noise-level statistics of the forward diffusion on a synthetic clip.
    Diffuse {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Timestep in 1..=T; several values sampled across the range if absent.
        #[arg(long)]
        t: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write synthetic audio/video pairs as raw little-endian f64.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient checks and invariant suite; fails if any check fails.
    Selftest,
}

fn load(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::toy(diffmavil::model::Mode::Diffmavil)),
    }
}

fn out_dir(flag: Option<PathBuf>, fallback: impl FnOnce() -> PathBuf) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(fallback)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain {
            config,
            seed,
            steps,
            out,
        } => {
            let mut cfg = load(Some(&config))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if steps.is_some() {
                cfg.max_steps = steps;
            }
            let mode = serde_json::to_value(cfg.mode)?;
            let dir = out_dir(out, || {
                PathBuf::from("runs").join(format!("{}-seed{}", mode.as_str().unwrap_or("run"), cfg.seed))
            });
            let outcome = pretrain(&cfg, Some(&dir))?;
            print_json(&json!({
                "out": dir,
                "steps": outcome.steps,
                "initial": outcome.initial,
                "final": outcome.last,
                "cumulative_flops": outcome.cumulative_flops,
            }))?;
        }
        Command::Flops { config, baseline } => {
            let cfg = load(Some(&config))?;
            let report = flops_pretraining(&cfg.workload())?;
            match baseline {
                Some(b) => {
                    let base = flops_pretraining(&load(Some(&b))?.workload())?;
                    let cmp = flops_compare(&report, &base)?;
                    eprint!("{}", cmp.table());
                    print_json(&json!({ "candidate": report, "baseline": base, "ratios": cmp }))?;
                }
                None => print_json(&report)?,
            }
        }
        Command::Schedule { config } => {
            let cfg = load(Some(&config))?;
            let s = cfg.training_schedule()?;
            print_json(&json!({
                "epochs": s.rows().len(),
                "dataset_size": s.dataset,
                "total_steps": s.total_steps(),
                "warmup_steps": s.warmup_steps(),
                "rows": s.rows(),
            }))?;
        }
        Command::Diffuse { config, t, seed } => {
            let cfg = load(config.as_deref())?;
            let schedule = DiffusionSchedule::new(&cfg.diffusion)?;
            let steps = schedule.steps();
            let ts = match t {
                Some(t) if (1..=steps).contains(&t) => vec![t],
                Some(t) => bail!("--t {t} outside 1..={steps}"),
                None => {
                    let mut v: Vec<usize> = (0..5).map(|k| 1 + k * (steps - 1) / 4).collect();
                    v.dedup();
                    v
                }
            };
            let seed = seed.unwrap_or(cfg.seed);
            let x0 = diffmavil::data::generate_audio(&LatentSpec::from_seed(seed), cfg.data.audio, &cfg.synthetic);
            let mut rows = Vec::new();
            for t in ts {
                let ab = schedule.alpha_bar(t)?;
                let xt = schedule.diffuse(&x0, t, rng::derive(seed, &[t as u64]))?;
                let n = xt.numel() as f64;
                let residual: Vec<f64> = xt
                    .data()
                    .iter()
                    .zip(x0.data())
                    .map(|(x, a)| x - ab.sqrt() * a)
                    .collect();
                let mean = residual.iter().sum::<f64>() / n;
                let var = residual.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let corr = xt.data().iter().zip(x0.data()).map(|(x, a)| x * a).sum::<f64>()
                    / (xt.data().iter().map(|x| x * x).sum::<f64>() * x0.data().iter().map(|a| a * a).sum::<f64>())
                        .sqrt();
                rows.push(json!({
                    "t": t,
                    "beta": schedule.beta(t)?,
                    "beta_eff": schedule.beta_eff(t)?,
                    "alpha_bar": ab,
                    "signal_scale": ab.sqrt(),
                    "noise_scale": (1.0 - ab).sqrt(),
                    "elements": xt.numel(),
                    "noise_mean": mean,
                    "noise_variance": var,
                    "correlation_with_input": corr,
                }));
            }
            print_json(&json!({ "steps": steps, "phi": schedule.phi(), "seed": seed, "samples": rows }))?;
        }
        Command::GenData {
            config,
            count,
            seed,
            out,
        } => {
            let cfg = load(config.as_deref())?;
            let seed = seed.unwrap_or(cfg.seed);
            let dir = out_dir(out, || PathBuf::from("data"));
            dump_pairs(&dir, &cfg.data, &cfg.synthetic, seed, count)
                .with_context(|| format!("writing pairs to {}", dir.display()))?;
            print_json(&json!({ "out": dir, "pairs": count, "seed": seed }))?;
        }
        Command::Selftest => {
            let outcomes = selftest::run();
            for o in &outcomes {
                eprintln!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            let ok = outcomes.iter().all(|o| o.passed);
            print_json(&json!({ "passed": ok, "checks": outcomes }))?;
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    // Clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
