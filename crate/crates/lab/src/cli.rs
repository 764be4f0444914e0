//! Argument parsing and exit codes.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{self, ExperimentConfig};
use crate::error::{LabError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_EARLY_STOP: i32 = 2;

/// Default output root when neither `--out` nor `run.out` is given.
pub const OUT_ENV: &str = "COLLAPSE_LAB_OUT";

fn config_help() -> String {
    format!("Configuration keys and defaults:\n{}", config::reference())
}

#[derive(Debug, Parser)]
#[command(name = "collapse-lab", version, about = "Template-collapse experiments on tabular reasoning policies")]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Config file, key-value or JSON. Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set filter.rho=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one policy. Exits 2 if early stopping fired.
    #[command(after_long_help = config_help())]
    Train(RunArgs),
    /// Recompute the proxies of a rollout log from its checkpoint.
    Diagnose {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// first_turn | trajectory (default: the checkpoint's)
        #[arg(long)]
        scope: Option<String>,
        /// Compare against this metrics CSV; exit 1 on any mismatch.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the theorem audits. Exits 0 iff no audit has a violation.
    Verify {
        /// `all` or one of g3, g4_snr, g5_drift, h1_mixing, i1_mse,
        /// k1_continuity, l1_decomp, m1_floor.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// quartile | traj_filter | noise_sweep | filter_compare, over
    /// `ablate.seeds` (or `--seed`).
    #[command(after_long_help = config_help())]
    Ablate {
        kind: String,
        #[command(flatten)]
        run: RunArgs,
    },
}

fn out_dir(flag: Option<&Path>, configured: Option<&Path>, name: &str) -> PathBuf {
    if let Some(p) = flag.or(configured) {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(name),
        _ => PathBuf::from("runs").join(name),
    }
}

fn load(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
        cfg.ablate.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train(args) => {
            let cfg = load(&args)?;
            let out = out_dir(args.out.as_deref(), cfg.out.as_deref(), "train");
            let run = commands::train(&cfg, &out)?;
            let last = run.last();
            println!(
                "{}: {} iterations, final succ {:.4}, mi_est {:.6}, peak succ {:.4}",
                out.display(),
                run.records.len(),
                last.succ,
                last.proxies.mi_est,
                run.peak_success
            );
            Ok(match run.stop {
                Some(reason) => {
                    println!("early stop: {}", reason.name());
                    EXIT_EARLY_STOP
                }
                None => EXIT_OK,
            })
        }
        Command::Diagnose {
            log,
            checkpoint,
            scope,
            metrics,
            out,
        } => {
            let scope = scope
                .map(|s| {
                    config::parse_scope(&s)
                        .ok_or_else(|| LabError::Config(format!("--scope must be first_turn or trajectory, got {s:?}")))
                })
                .transpose()?;
            let d = commands::diagnose(&log, &checkpoint, scope, metrics.as_deref())?;
            let out = out_dir(out.as_deref(), None, "diagnose");
            let path = commands::write_diagnosis(&d, &out)?;
            println!("{}", path.display());
            match &d.comparison {
                Some(c) if !c.mismatches.is_empty() => {
                    for m in &c.mismatches {
                        eprintln!("mismatch in {}: logged {:?}, recomputed {:?}", m.column, m.logged, m.recomputed);
                    }
                    Ok(EXIT_ERROR)
                }
                Some(c) => {
                    println!("consistent with {} (max abs diff {:e})", c.metrics, c.max_abs_diff);
                    Ok(EXIT_OK)
                }
                None => Ok(EXIT_OK),
            }
        }
        Command::Verify { suite, trials, seed, out } => {
            let reports = commands::verify(&suite, trials, seed)?;
            let out = out_dir(out.as_deref(), None, "verify");
            for r in &reports {
                println!(
                    "{:<14} {} trials={} violations={} max_gap={:e}",
                    r.name,
                    if r.pass { "PASS" } else { "FAIL" },
                    r.trials,
                    r.violations,
                    r.max_gap
                );
            }
            let path = commands::write_verify_report(&reports, seed, &out)?;
            println!("{}", path.display());
            Ok(if reports.iter().all(|r| r.pass) { EXIT_OK } else { EXIT_ERROR })
        }
        Command::Ablate { kind, run } => {
            let cfg = load(&run)?;
            let out = out_dir(run.out.as_deref(), cfg.out.as_deref(), &format!("ablate_{kind}"));
            commands::ablate(&kind, &cfg, &out)?;
            println!("{}", out.join("comparison.json").display());
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
