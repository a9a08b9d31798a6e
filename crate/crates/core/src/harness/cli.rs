//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::{ExperimentConfig, ExperimentKind, Precision};
use super::experiments::{
    balance_experiment, forgetting_experiment, gen_data_experiment, grad_check_experiment, imbalance_experiment,
    mixture_experiment, route_dump_experiment,
};
use crate::error::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "loramoe", version, about = "Mixture of low-rank experts with a localized balancing loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config; missing fields take the subcommand's preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference check of one random layer.
    GradCheck,
    /// Balance training (kind `balance`) or the β = 0 comparison
    /// (kind `imbalance-baseline`).
    Train,
    /// Pretrain, fine-tune in every mode and report retention.
    Forget,
    /// Log-likelihood sweep over the fixed mixing weight.
    SweepM(SweepArgs),
    /// Router weights of a saved checkpoint on held-out data.
    RouteDump {
        /// Directory holding manifest.json and checkpoint.bin.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write every dataset split as CSV.
    GenData,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    p1: Option<f64>,
    #[arg(long)]
    grid_step: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    mu1: Option<f64>,
    #[arg(long)]
    mu2: Option<f64>,
    #[arg(long)]
    var1: Option<f64>,
    #[arg(long)]
    var2: Option<f64>,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s}")),
    }
}

fn resolve(common: &Common, default_kind: ExperimentKind, allowed: &[ExperimentKind]) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_path(path, default_kind)?,
        None => ExperimentConfig::preset(default_kind),
    };
    if !allowed.contains(&cfg.kind) {
        return Err(Error::Config(vec![format!(
            "config kind {} does not fit this subcommand",
            cfg.kind.as_str()
        )]));
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(p) = common.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::GradCheck => {
            let cfg = resolve(c, ExperimentKind::GradCheck, &[ExperimentKind::GradCheck])?;
            let r = grad_check_experiment(&cfg)?;
            writeln!(stdout, "max relative error {:.3e} (tolerance {:.0e}, {} parameters)", r.max_relative_error, r.tolerance, r.parameters)?;
            if !r.passed {
                return Err(Error::Degenerate(format!(
                    "gradient check failed: {:.3e} >= {:.0e}",
                    r.max_relative_error, r.tolerance
                )));
            }
        }
        Command::Train => {
            let cfg = resolve(
                c,
                ExperimentKind::Balance,
                &[ExperimentKind::Balance, ExperimentKind::ImbalanceBaseline],
            )?;
            if cfg.kind == ExperimentKind::Balance {
                let r = match cfg.precision {
                    Precision::F32 => balance_experiment::<f32>(&cfg)?,
                    Precision::F64 => balance_experiment::<f64>(&cfg)?,
                };
                writeln!(stdout, "{}", serde_json::to_string_pretty(&r)?)?;
            } else {
                let r = match cfg.precision {
                    Precision::F32 => imbalance_experiment::<f32>(&cfg)?,
                    Precision::F64 => imbalance_experiment::<f64>(&cfg)?,
                };
                writeln!(
                    stdout,
                    "importance cv: beta=0 {:.4}, beta={} {:.4} (ratio {:.2}); within-group cv {:.4}",
                    r.unconstrained.importance_cv,
                    r.constrained.beta,
                    r.constrained.importance_cv,
                    r.cv_ratio,
                    r.constrained.within_group_cv
                )?;
            }
        }
        Command::Forget => {
            let cfg = resolve(c, ExperimentKind::Forgetting, &[ExperimentKind::Forgetting])?;
            let r = match cfg.precision {
                Precision::F32 => forgetting_experiment::<f32>(&cfg)?,
                Precision::F64 => forgetting_experiment::<f64>(&cfg)?,
            };
            writeln!(
                stdout,
                "pretrained eval-a {:.3} after {} steps",
                r.pretrained_eval_a, r.pretrain_steps
            )?;
            for b in &r.branches {
                writeln!(
                    stdout,
                    "{:<15} eval-a {:.3} eval-b {:.3} drop {:+.1} points",
                    b.mode.as_str(),
                    b.eval_a,
                    b.eval_b,
                    b.retention_drop
                )?;
            }
        }
        Command::SweepM(args) => {
            let mut cfg = resolve(c, ExperimentKind::MixtureSweep, &[ExperimentKind::MixtureSweep])?;
            let m = &mut cfg.mixture;
            m.p1 = args.p1.unwrap_or(m.p1);
            m.grid_step = args.grid_step.unwrap_or(m.grid_step);
            m.n = args.n.unwrap_or(m.n);
            m.mu1 = args.mu1.unwrap_or(m.mu1);
            m.mu2 = args.mu2.unwrap_or(m.mu2);
            m.var1 = args.var1.unwrap_or(m.var1);
            m.var2 = args.var2.unwrap_or(m.var2);
            cfg.validate()?;
            let sweep = mixture_experiment(&cfg)?;
            writeln!(stdout, "best_m {}", sweep.best_m)?;
        }
        Command::RouteDump { checkpoint } => {
            let cfg = resolve(c, ExperimentKind::RouteDump, &[ExperimentKind::RouteDump, ExperimentKind::Balance])?;
            let manifest = super::checkpoint::Manifest::read(&checkpoint)?;
            let precision = manifest
                .checkpoint
                .as_ref()
                .map(|i| i.precision)
                .ok_or_else(|| Error::Checkpoint(format!("{} holds no checkpoint", checkpoint.display())))?;
            let out = c.out.clone().unwrap_or(cfg.out);
            let rows = match precision {
                Precision::F32 => route_dump_experiment::<f32>(&checkpoint, &out)?,
                Precision::F64 => route_dump_experiment::<f64>(&checkpoint, &out)?,
            };
            writeln!(stdout, "wrote {rows} routing rows to {}", out.join("routing.csv").display())?;
        }
        Command::GenData => {
            let allowed = [
                ExperimentKind::Balance,
                ExperimentKind::ImbalanceBaseline,
                ExperimentKind::Forgetting,
                ExperimentKind::RouteDump,
            ];
            let mut cfg = resolve(c, ExperimentKind::Balance, &allowed)?;
            if c.out.is_none() && c.config.is_none() {
                cfg.out = PathBuf::from("runs/data");
            }
            let ds = gen_data_experiment(&cfg)?;
            writeln!(
                stdout,
                "pretrain {} finetune {} eval-a {} eval-b {}",
                ds.pretrain.len(),
                ds.finetune.len(),
                ds.eval_a.len(),
                ds.eval_b.len()
            )?;
        }
    }
    Ok(())
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 for
/// usage and validation errors, 2 for runtime failures.
pub fn cli_main<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(stderr, "{}", e.render());
                    1
                }
            };
        }
    };
    match run(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
