//! The four commands, independent of argument parsing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use collapse_core::filtering::Strategy;
use collapse_core::math::{median, spearman};
use collapse_core::miproxy::{compute_proxies, cross_score_with, ProxyValues, TurnScope};
use collapse_core::rollout::{batch_rv_statistics, RolloutBatch, RvStats};
use collapse_core::trainer::{self, proxy_seed, IterationView, RunResult, TrainConfig, FILTER_ARMS};
use collapse_core::verify::{self, AuditReport, AUDIT_NAMES};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::metrics::{self, Summary};
use crate::rollout_log::save_rollout_log;

/// Tolerance of the offline/online proxy comparison.
pub const DIAGNOSE_TOLERANCE: f64 = 1e-9;

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write(path, text + "\n")
}

fn iteration_checkpoint(view: &IterationView<'_>, cfg: &TrainConfig) -> Checkpoint {
    Checkpoint {
        iteration: Some(view.iteration),
        seed: Some(cfg.seed),
        scope: Some(cfg.scope),
        ema: Some(view.ema),
        ..Checkpoint::new(view.params)
    }
}

/// Trains and writes `metrics.csv`, `summary.json`, `resolved.cfg`,
/// `checkpoints/` and `rollouts/` under `out`.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<RunResult> {
    cfg.validate()?;
    let env = cfg.env.build()?;
    let (ck_dir, log_dir) = (out.join("checkpoints"), out.join("rollouts"));
    mkdir(&ck_dir)?;
    mkdir(&log_dir)?;
    let resolved = ExperimentConfig {
        out: Some(out.to_path_buf()),
        ..cfg.clone()
    };
    write(&out.join("resolved.cfg"), resolved.to_canonical())?;

    let csv_path = out.join("metrics.csv");
    let file = fs::File::create(&csv_path).map_err(|e| LabError::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{}", metrics::csv_header()).map_err(|e| LabError::io(&csv_path, e))?;

    let tc = &cfg.train;
    let log_every = cfg.log_every;
    let name = |it: usize| format!("iter_{it:05}");
    // The last iteration is only known once training ends (early stopping),
    // so its artifacts are held back until then.
    let mut pending: Option<(RolloutBatch, Checkpoint)> = None;
    let mut io_error = None;
    let result = trainer::train_observed(tc, &env, |view| {
        let row = view.record.csv_row();
        if let Err(e) = writeln!(csv, "{row}") {
            io_error = Some(LabError::io(&csv_path, e));
            return Err(collapse_core::Error::Protocol("metrics write failed".into()));
        }
        let ck = iteration_checkpoint(view, tc);
        if log_every > 0 && view.iteration % log_every == 0 {
            let it = view.iteration;
            let r = save_rollout_log(view.batch, &log_dir.join(name(it) + ".jsonl"))
                .and_then(|_| ck.save(&ck_dir.join(name(it) + ".json")));
            if let Err(e) = r {
                io_error = Some(e);
                return Err(collapse_core::Error::Protocol("artifact write failed".into()));
            }
        }
        pending = Some((view.batch.clone(), ck));
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let run = result?;
    csv.flush().map_err(|e| LabError::io(&csv_path, e))?;

    if let Some((batch, ck)) = pending {
        let it = batch.iteration;
        save_rollout_log(&batch, &log_dir.join(name(it) + ".jsonl"))?;
        ck.save(&ck_dir.join(name(it) + ".json"))?;
    }
    let last = Checkpoint {
        seed: Some(tc.seed),
        scope: Some(tc.scope),
        ema: Some(run.ema),
        ..Checkpoint::new(&run.params)
    };
    last.save(&ck_dir.join("final.json"))?;
    write_json(&out.join("summary.json"), &Summary::new(tc.seed, &run))?;
    Ok(run)
}

#[derive(Debug, Clone, Serialize)]
pub struct Mismatch {
    pub column: String,
    pub logged: f64,
    pub recomputed: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub metrics: String,
    pub tolerance: f64,
    pub max_abs_diff: f64,
    pub mismatches: Vec<Mismatch>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnosis {
    pub iteration: usize,
    pub scope: &'static str,
    pub num_prompts: usize,
    pub group_size: usize,
    pub ret: f64,
    pub proxies: ProxyValues,
    pub rv: RvStats,
    pub comparison: Option<Comparison>,
}

impl Diagnosis {
    fn columns(&self) -> Vec<(&'static str, f64)> {
        let p = &self.proxies;
        let r = &self.rv;
        vec![
            ("ret", self.ret),
            ("ret_acc", p.ret_acc),
            ("recall2", p.recall2),
            ("recall4", p.recall4),
            ("recall8", p.recall8),
            ("mi_est", p.mi_est),
            ("mi_seq", p.mi_seq),
            ("mi_z", p.mi_z),
            ("mi_z_ema", p.mi_z_ema),
            ("h_cond", p.h_cond),
            ("h_marg", p.h_marg),
            ("rv_mean", r.mean),
            ("rv_std", r.std),
            ("rv_min", r.min),
            ("rv_max", r.max),
            ("rv_som", r.std_over_mean.unwrap_or(f64::NAN)),
            ("zero_var", r.zero_variance_count as f64),
        ]
    }

    pub fn consistent(&self) -> bool {
        self.comparison.as_ref().is_none_or(|c| c.mismatches.is_empty())
    }
}

/// Recomputes every proxy of a logged batch from the checkpoint that
/// generated it, optionally checking them against a metrics CSV.
pub fn diagnose(log: &Path, checkpoint: &Path, scope: Option<TurnScope>, metrics_csv: Option<&Path>) -> Result<Diagnosis> {
    let batch = crate::rollout_log::load_rollout_log(log)?;
    let ck = Checkpoint::load(checkpoint)?;
    let params = ck.params()?;
    let mismatch = |msg: String| LabError::Invalid(format!("{} and {} do not match: {msg}", log.display(), checkpoint.display()));
    if let Some(it) = ck.iteration {
        if it != batch.iteration {
            return Err(mismatch(format!("checkpoint iteration {it}, log iteration {}", batch.iteration)));
        }
    }
    for g in &batch.groups {
        for t in &g.trajectories {
            t.validate(&params.spec).map_err(|e| mismatch(e.to_string()))?;
        }
    }
    let seed = ck
        .seed
        .ok_or_else(|| mismatch("the checkpoint carries no run seed".into()))?;
    let scope = scope.or(ck.scope).unwrap_or(TurnScope::FirstTurn);
    let ema = ck.ema.unwrap_or_default();

    let scores = cross_score_with(&params.tables(), &batch, scope, seed)?;
    let (proxies, _) = compute_proxies(&scores, ema, proxy_seed(seed, batch.iteration))?;
    let mut d = Diagnosis {
        iteration: batch.iteration,
        scope: match scope {
            TurnScope::FirstTurn => "first_turn",
            TurnScope::TrajectoryUniform => "trajectory",
        },
        num_prompts: batch.num_prompts(),
        group_size: batch.group_size,
        ret: batch.mean_return(),
        proxies,
        rv: batch_rv_statistics(&batch),
        comparison: None,
    };
    if let Some(path) = metrics_csv {
        let rows = metrics::load_csv(path)?;
        let row = rows
            .iter()
            .find(|r| r.get("iter") == Some(batch.iteration as f64))
            .ok_or_else(|| LabError::Invalid(format!("{} has no row for iteration {}", path.display(), batch.iteration)))?;
        let mut max_abs_diff: f64 = 0.0;
        let mut mismatches = Vec::new();
        for (col, recomputed) in d.columns() {
            let logged = row.get(col).expect("header checked");
            let same = (logged.is_nan() && recomputed.is_nan()) || (logged - recomputed).abs() <= DIAGNOSE_TOLERANCE;
            if !(logged.is_nan() && recomputed.is_nan()) {
                max_abs_diff = max_abs_diff.max((logged - recomputed).abs());
            }
            if !same {
                mismatches.push(Mismatch {
                    column: col.into(),
                    logged,
                    recomputed,
                });
            }
        }
        d.comparison = Some(Comparison {
            metrics: path.display().to_string(),
            tolerance: DIAGNOSE_TOLERANCE,
            max_abs_diff,
            mismatches,
        });
    }
    Ok(d)
}

pub fn write_diagnosis(d: &Diagnosis, out: &Path) -> Result<PathBuf> {
    mkdir(out)?;
    let path = out.join(format!("diagnosis_iter_{:05}.json", d.iteration));
    write_json(&path, d)?;
    Ok(path)
}

/// Runs one audit or all of them. `trials` overrides every audit's default.
pub fn verify(suite: &str, trials: Option<usize>, seed: u64) -> Result<Vec<AuditReport>> {
    let names: Vec<&str> = if suite == "all" {
        AUDIT_NAMES.to_vec()
    } else if AUDIT_NAMES.contains(&suite) {
        vec![suite]
    } else {
        return Err(LabError::Config(format!(
            "unknown audit {suite:?}; valid names are all, {}",
            AUDIT_NAMES.join(", ")
        )));
    };
    names
        .into_iter()
        .map(|n| {
            let t = trials.unwrap_or_else(|| verify::default_trials(n).expect("listed audit"));
            Ok(verify::run_audit(n, t, seed)?)
        })
        .collect()
}

pub fn write_verify_report(reports: &[AuditReport], seed: u64, out: &Path) -> Result<PathBuf> {
    mkdir(out)?;
    let path = out.join("verify.json");
    write_json(
        &path,
        &json!({ "seed": seed, "pass": reports.iter().all(|r| r.pass), "audits": reports }),
    )?;
    Ok(path)
}

pub const ABLATE_KINDS: [&str; 4] = ["quartile", "traj_filter", "noise_sweep", "filter_compare"];

/// Named runs of one ablation for one seed.
pub fn ablate_runs(kind: &str, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(String, RunResult)>> {
    let env = cfg.env.build()?;
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    Ok(match kind {
        "quartile" => trainer::quartile_ablation(&tc, &env)?
            .into_iter()
            .enumerate()
            .map(|(i, r)| (format!("q{}", i + 1), r))
            .collect(),
        "traj_filter" => vec![
            ("prompt_filter".into(), trainer::train(&tc, &env)?),
            (
                "traj_filter".into(),
                trainer::trajectory_filter_baseline(&tc, &env, cfg.ablate.keep_top, cfg.ablate.keep_bottom)?,
            ),
        ],
        "noise_sweep" => {
            let mut out = Vec::new();
            for strategy in sweep_strategies(&tc) {
                let c = TrainConfig {
                    filter: collapse_core::filtering::FilterConfig { strategy, ..tc.filter },
                    ..tc.clone()
                };
                let runs = trainer::noise_sweep(&c, &env, &cfg.ablate.slip_levels)?;
                for (level, r) in cfg.ablate.slip_levels.iter().zip(runs) {
                    out.push((sweep_arm(strategy, *level), r));
                }
            }
            out
        }
        "filter_compare" => FILTER_ARMS
            .iter()
            .map(|s| s.to_string())
            .zip(trainer::filter_compare(&tc, &env)?)
            .collect(),
        _ => {
            return Err(LabError::Config(format!(
                "unknown ablation {kind:?}; valid kinds are {}",
                ABLATE_KINDS.join(", ")
            )))
        }
    })
}

/// The configured strategy, then `none` as the reference arm.
fn sweep_strategies(tc: &TrainConfig) -> Vec<Strategy> {
    let mut v = vec![tc.filter.strategy];
    if tc.filter.strategy != Strategy::None {
        v.push(Strategy::None);
    }
    v
}

fn sweep_arm(strategy: Strategy, level: f64) -> String {
    format!("{}_slip{level:?}", strategy.name())
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmSummary {
    pub name: String,
    pub final_succ: f64,
    pub final_mi_est: f64,
    pub final_h_cond: f64,
    pub final_ret: f64,
    pub peak_success: f64,
    pub early_stopped: usize,
}

/// Medians over seeds of each arm's final metrics.
pub fn summarize_arms(per_seed: &[Vec<(String, RunResult)>]) -> Vec<ArmSummary> {
    let Some(first) = per_seed.first() else { return Vec::new() };
    first
        .iter()
        .enumerate()
        .map(|(a, (name, _))| {
            let runs: Vec<&RunResult> = per_seed.iter().map(|s| &s[a].1).collect();
            let med = |f: &dyn Fn(&RunResult) -> f64| median(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
            ArmSummary {
                name: name.clone(),
                final_succ: med(&|r| r.last().succ),
                final_mi_est: med(&|r| r.last().proxies.mi_est),
                final_h_cond: med(&|r| r.last().proxies.h_cond),
                final_ret: med(&|r| r.last().ret),
                peak_success: med(&|r| r.peak_success),
                early_stopped: runs.iter().filter(|r| r.stop.is_some()).count(),
            }
        })
        .collect()
}

/// Runs an ablation for every configured seed, writing
/// `seed_<s>/<arm>.csv` and `comparison.json` under `out`.
pub fn ablate(kind: &str, cfg: &ExperimentConfig, out: &Path) -> Result<serde_json::Value> {
    if !ABLATE_KINDS.contains(&kind) {
        return Err(LabError::Config(format!(
            "unknown ablation {kind:?}; valid kinds are {}",
            ABLATE_KINDS.join(", ")
        )));
    }
    cfg.validate()?;
    if kind == "noise_sweep" && cfg.env.kind != crate::config::EnvKind::SlipGrid {
        return Err(LabError::Config("env.kind: the noise sweep needs slip_grid".into()));
    }
    mkdir(out)?;
    write(
        &out.join("resolved.cfg"),
        ExperimentConfig {
            out: Some(out.to_path_buf()),
            ..cfg.clone()
        }
        .to_canonical(),
    )?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.ablate.seeds {
        let runs = ablate_runs(kind, cfg, seed)?;
        let dir = out.join(format!("seed_{seed}"));
        mkdir(&dir)?;
        for (arm, r) in &runs {
            metrics::write_csv(&r.records, &dir.join(format!("{arm}.csv")))?;
        }
        per_seed.push(runs);
    }
    let arms = summarize_arms(&per_seed);
    let mut report = json!({ "kind": kind, "seeds": cfg.ablate.seeds, "arms": arms });
    if kind == "noise_sweep" {
        report["sweep"] = sweep_report(&cfg.train, &cfg.ablate.slip_levels, &arms);
    }
    write_json(&out.join("comparison.json"), &report)?;
    Ok(report)
}

/// Spearman of median final `mi_est` against slip per strategy, and the
/// success advantage of the configured filter over `none` per level.
fn sweep_report(tc: &TrainConfig, levels: &[f64], arms: &[ArmSummary]) -> serde_json::Value {
    let find = |s: Strategy, l: f64| arms.iter().find(|a| a.name == sweep_arm(s, l)).expect("arm ran");
    let mut by_strategy = serde_json::Map::new();
    for s in sweep_strategies(tc) {
        let mi: Vec<f64> = levels.iter().map(|&l| find(s, l).final_mi_est).collect();
        let succ: Vec<f64> = levels.iter().map(|&l| find(s, l).final_succ).collect();
        let rho = if levels.len() >= 2 { spearman(levels, &mi) } else { f64::NAN };
        by_strategy.insert(
            s.name().into(),
            json!({ "mi_est": mi, "succ": succ, "spearman_mi_vs_slip": rho }),
        );
    }
    let advantage: Option<Vec<f64>> = (tc.filter.strategy != Strategy::None).then(|| {
        levels
            .iter()
            .map(|&l| find(tc.filter.strategy, l).final_succ - find(Strategy::None, l).final_succ)
            .collect()
    });
    json!({ "levels": levels, "strategies": by_strategy, "filter_advantage": advantage })
}
