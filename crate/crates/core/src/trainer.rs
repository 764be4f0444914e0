//! Closed-loop training: rollout, filter, update, measure.
//!
//! One iteration collects a `P × G` batch under the current policy, scores it
//! for the MI proxies, selects groups, and takes a plain gradient-ascent step
//! on `Σ_i w_i (g_task,i + g_reg,i)` where `w_i` are the filter weights. The
//! regularizer of a masked group is masked with it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{ContextualTargetEnv, Env, GridLayout, SlipGridEnv};
use crate::error::{config, Error, Result};
use crate::filtering::{self, FilterConfig, FilterDecision, Strategy};
use crate::gradients::{accumulate_task_gradient, dominance_ratio, AdvantageMode, RegParts};
use crate::math::{self, norm};
use crate::miproxy::{compute_proxies, cross_score_with, EmaState, ProxyValues, TurnScope};
use crate::policy::{sample_episode, PolicyParams, PolicySpec, PolicyTables, SampleKey};
use crate::rng::{derive_key, stream, Purpose};
use crate::rollout::{batch_rv_statistics, collect_groups, select_prompts, RolloutBatch, RvStats};

/// Initial parameter distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Standard deviation of Gaussian reasoning logits.
    pub reasoning_scale: f64,
    /// Standard deviation of Gaussian action logits.
    pub action_scale: f64,
    /// Extra logit on one seeded token per (prompt, position).
    pub reasoning_peak: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            reasoning_scale: 0.5,
            action_scale: 0.0,
            reasoning_peak: 1.0,
        }
    }
}

/// Initial policy: Gaussian logits plus a prompt-specific token bump.
pub fn init_params(spec: PolicySpec, init: &InitConfig, seed: u64) -> PolicyParams {
    let mut params = PolicyParams::random(spec, init.reasoning_scale, init.action_scale, seed);
    if init.reasoning_peak != 0.0 {
        for x in 0..spec.num_prompts {
            for pos in 0..spec.reasoning_len {
                let mut s = stream(seed, Purpose::Init, &[1, x as u64, pos as u64]);
                let tok = s.random_range(0..spec.vocab_size);
                params.reasoning_logits_mut(x, pos)[tok] += init.reasoning_peak;
            }
        }
    }
    params
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub rv_floor_frac: f64,
    pub rv_floor_patience: usize,
    pub success_floor: f64,
    pub success_patience: usize,
    pub baseline_window: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rv_floor_frac: 0.10,
            rv_floor_patience: 5,
            success_floor: 0.01,
            success_patience: 5,
            baseline_window: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RvCollapse,
    SuccessCollapse,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::RvCollapse => "rv_collapse",
            StopReason::SuccessCollapse => "success_collapse",
        }
    }
}

/// Stop when mean RV stays under `rv_floor_frac` of its baseline (mean over
/// the first `baseline_window` iterations) for `rv_floor_patience`
/// consecutive iterations, or success stays under `success_floor` for
/// `success_patience` consecutive evaluation checkpoints.
pub fn early_stop_check(rv_history: &[f64], success_history: &[f64], cfg: &EarlyStopConfig) -> Option<StopReason> {
    if rv_history.len() > cfg.baseline_window && cfg.rv_floor_patience > 0 {
        let baseline = math::mean(&rv_history[..cfg.baseline_window]);
        let tail = &rv_history[cfg.baseline_window..];
        if tail.len() >= cfg.rv_floor_patience
            && tail[tail.len() - cfg.rv_floor_patience..]
                .iter()
                .all(|&v| v < cfg.rv_floor_frac * baseline)
        {
            return Some(StopReason::RvCollapse);
        }
    }
    if cfg.success_patience > 0
        && success_history.len() >= cfg.success_patience
        && success_history[success_history.len() - cfg.success_patience..]
            .iter()
            .all(|&s| s < cfg.success_floor)
    {
        return Some(StopReason::SuccessCollapse);
    }
    None
}

/// Group selection beyond the configured filter, used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Ablation {
    /// Keep one RV rank band (0 = highest) of `num_bands`.
    RankBand { band: usize, num_bands: usize },
    /// Keep every group but only its `keep_top` highest- and `keep_bottom`
    /// lowest-return trajectories.
    TrajectoryExtremes { keep_top: usize, keep_bottom: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_prompts: usize,
    pub group_size: usize,
    pub learning_rate: f64,
    pub lambda_kl: f64,
    pub lambda_ent: f64,
    pub advantage: AdvantageMode,
    pub filter: FilterConfig,
    /// Multiply the `1/k*`-normalized loss by the keep rate.
    pub scale_by_rho: bool,
    pub ablation: Option<Ablation>,
    pub reasoning_len: usize,
    pub vocab_size: usize,
    pub init: InitConfig,
    pub early_stop: EarlyStopConfig,
    pub eval_prompts: usize,
    pub eval_temperature: f64,
    pub eval_every: usize,
    pub scope: TurnScope,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            batch_prompts: 8,
            group_size: 16,
            learning_rate: 1e-6,
            lambda_kl: 0.001,
            lambda_ent: 0.001,
            advantage: AdvantageMode::Centered,
            filter: FilterConfig::default(),
            scale_by_rho: true,
            ablation: None,
            reasoning_len: 2,
            vocab_size: 8,
            init: InitConfig::default(),
            early_stop: EarlyStopConfig::default(),
            eval_prompts: 512,
            eval_temperature: 0.5,
            eval_every: 1,
            scope: TurnScope::FirstTurn,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.iterations", self.iterations),
            ("train.group_size", self.group_size),
            ("policy.reasoning_len", self.reasoning_len),
            ("policy.vocab_size", self.vocab_size),
            ("eval.prompts", self.eval_prompts),
            ("eval.every", self.eval_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config(format!("{name} must be positive")));
        }
        if self.batch_prompts < 2 {
            return Err(config("train.batch_prompts must be at least 2"));
        }
        if self.group_size < 2 {
            return Err(config("train.group_size must be at least 2"));
        }
        for (name, v) in [
            ("train.learning_rate", self.learning_rate),
            ("train.lambda_kl", self.lambda_kl),
            ("train.lambda_ent", self.lambda_ent),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.eval_temperature > 0.0) {
            return Err(config("eval.temperature must be positive"));
        }
        self.filter.validate()?;
        let es = &self.early_stop;
        for (name, v) in [
            ("early_stop.rv_floor_frac", es.rv_floor_frac),
            ("early_stop.success_floor", es.success_floor),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if es.baseline_window == 0 || es.rv_floor_patience == 0 || es.success_patience == 0 {
            return Err(config("early-stop windows and patiences must be positive"));
        }
        match self.ablation {
            Some(Ablation::RankBand { band, num_bands })
                if num_bands == 0 || band >= num_bands || !self.batch_prompts.is_multiple_of(num_bands) =>
            {
                return Err(config("rank band ablation needs band < num_bands dividing batch_prompts"));
            }
            Some(Ablation::TrajectoryExtremes { keep_top, keep_bottom })
                if keep_top + keep_bottom > self.group_size || keep_top + keep_bottom == 0 =>
            {
                return Err(config(format!(
                    "keep_top + keep_bottom must lie in 1..={} (the group size)",
                    self.group_size
                )));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn spec_for(&self, env: &Env) -> Result<PolicySpec> {
        PolicySpec::for_env(env, self.reasoning_len, self.vocab_size)
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub ret: f64,
    pub succ: f64,
    pub proxies: ProxyValues,
    pub rv: RvStats,
    pub g_task: f64,
    pub g_reg: f64,
    pub rho: f64,
    pub kept_ratio: f64,
    pub zero_var: usize,
    pub rejected: bool,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "iter,ret,succ,ret_acc,recall2,recall4,recall8,mi_est,mi_seq,mi_z,mi_z_ema,h_cond,h_marg,rv_mean,rv_std,rv_min,rv_max,rv_som,g_task,g_reg,rho,kept_ratio,zero_var,rejected";

    /// Comma-separated row. Floats use the shortest round-trip form; an
    /// undefined value (such as `rv_som` at zero mean RV) is `NaN`.
    pub fn csv_row(&self) -> String {
        let p = &self.proxies;
        let r = &self.rv;
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{}",
            self.iter,
            self.ret,
            self.succ,
            p.ret_acc,
            p.recall2,
            p.recall4,
            p.recall8,
            p.mi_est,
            p.mi_seq,
            p.mi_z,
            p.mi_z_ema,
            p.h_cond,
            p.h_marg,
            r.mean,
            r.std,
            r.min,
            r.max,
            r.std_over_mean.unwrap_or(f64::NAN),
            self.g_task,
            self.g_reg,
            self.rho,
            self.kept_ratio,
            self.zero_var,
            u8::from(self.rejected),
        )
    }
}

/// Everything an observer may persist about one iteration. `params` and
/// `ema` are the values the iteration started from.
pub struct IterationView<'a> {
    pub iteration: usize,
    pub params: &'a PolicyParams,
    pub ema: EmaState,
    pub batch: &'a RolloutBatch,
    pub decision: &'a FilterDecision,
    pub record: &'a MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub params: PolicyParams,
    pub ema: EmaState,
    pub stop: Option<StopReason>,
    /// Max success over evaluation checkpoints.
    pub peak_success: f64,
}

impl RunResult {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("a run has at least one record")
    }
}

/// Seed for proxy tie-breaking at `iteration`.
pub fn proxy_seed(seed: u64, iteration: usize) -> u64 {
    derive_key(seed, Purpose::TieBreak, &[iteration as u64])
}

fn filter_seed(seed: u64, iteration: usize) -> u64 {
    derive_key(seed, Purpose::FilterOrder, &[iteration as u64])
}

/// Fixed evaluation prompt list.
pub fn eval_prompt_set(num_env_prompts: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut s = stream(seed, Purpose::Eval, &[u64::MAX]);
    (0..count).map(|_| s.random_range(0..num_env_prompts)).collect()
}

/// Success rate at the evaluation temperature on noiseless returns.
pub fn evaluate(params: &PolicyParams, env: &Env, prompts: &[usize], temperature: f64, seed: u64, iteration: usize) -> Result<f64> {
    let tables = PolicyTables::new(params, temperature);
    let one = |(n, &x): (usize, &usize)| -> Result<bool> {
        let key = SampleKey {
            seed,
            lane: 1,
            iteration: iteration as u64,
            sample: n as u64,
        };
        let (_, clean) = sample_episode(&tables, env, x, key, false)?;
        Ok(clean >= env.success_threshold())
    };
    #[cfg(feature = "std")]
    let hits: Vec<bool> = {
        use rayon::prelude::*;
        prompts.par_iter().enumerate().map(one).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "std"))]
    let hits: Vec<bool> = prompts.iter().enumerate().map(one).collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / prompts.len().max(1) as f64)
}

/// Per-trajectory inclusion mask keeping the extreme returns of a group.
pub fn trajectory_extremes(returns: &[f64], keep_top: usize, keep_bottom: usize, tie_seed: u64) -> Vec<bool> {
    let order = filtering::ranked(returns, false, tie_seed);
    let mut mask = vec![false; returns.len()];
    for &i in order.iter().take(keep_top) {
        mask[i] = true;
    }
    for &i in order.iter().rev().take(keep_bottom) {
        mask[i] = true;
    }
    mask
}

/// Group selection and loss weights for one batch.
pub fn select_groups(cfg: &TrainConfig, batch: &RolloutBatch, tables: &PolicyTables) -> Result<(FilterDecision, Vec<f64>)> {
    let seed = filter_seed(cfg.seed, batch.iteration);
    let p = batch.num_prompts();
    let values = filtering::group_statistics(batch, tables, cfg.filter.statistic)?;
    let (decision, rate) = match cfg.ablation {
        Some(Ablation::RankBand { band, num_bands }) => (filtering::select_rank_band(&values, band, num_bands, seed)?, 1.0),
        Some(Ablation::TrajectoryExtremes { .. }) => (filtering::select_all(&values), 1.0),
        None => {
            let rate = match cfg.filter.strategy {
                Strategy::TopP | Strategy::TopK | Strategy::ReverseTopP if cfg.scale_by_rho => cfg.filter.rho,
                Strategy::MinP if cfg.scale_by_rho => cfg.filter.min_p,
                _ => 1.0,
            };
            (filtering::select(&cfg.filter, &values, seed)?, rate)
        }
    };
    let mut weights = filtering::apply_filter_mask(&decision, p)?;
    for w in &mut weights {
        *w *= rate;
    }
    Ok((decision, weights))
}

/// Weighted task and regularizer gradients of one batch.
pub fn batch_gradients(
    cfg: &TrainConfig,
    params: &PolicyParams,
    reference: &PolicyParams,
    tables: &PolicyTables,
    batch: &RolloutBatch,
    weights: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = params.spec.num_params();
    let mut g_task = vec![0.0; n];
    let mut g_reg = vec![0.0; n];
    for (i, group) in batch.groups.iter().enumerate() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let include = match cfg.ablation {
            Some(Ablation::TrajectoryExtremes { keep_top, keep_bottom }) => {
                let seed = derive_key(cfg.seed, Purpose::TrajectoryOrder, &[batch.iteration as u64, i as u64]);
                Some(trajectory_extremes(&group.returns(), keep_top, keep_bottom, seed))
            }
            _ => None,
        };
        accumulate_task_gradient(tables, group, cfg.advantage, include.as_deref(), w, &mut g_task)?;
        if cfg.lambda_kl != 0.0 || cfg.lambda_ent != 0.0 {
            let reg = RegParts::compute(params, reference, group.prompt_id)?.combine(cfg.lambda_kl, cfg.lambda_ent);
            math::axpy(w, &reg, &mut g_reg);
        }
    }
    Ok((g_task, g_reg))
}

/// Runs training from the configured initialization.
pub fn train(cfg: &TrainConfig, env: &Env) -> Result<RunResult> {
    train_observed(cfg, env, |_| Ok(()))
}

/// As [`train`], calling `observe` after every iteration.
pub fn train_observed<F>(cfg: &TrainConfig, env: &Env, observe: F) -> Result<RunResult>
where
    F: FnMut(&IterationView<'_>) -> Result<()>,
{
    cfg.validate()?;
    env.validate()?;
    let spec = cfg.spec_for(env)?;
    let params = init_params(spec, &cfg.init, cfg.seed);
    train_from(cfg, env, params, observe)
}

/// Runs training from explicit initial parameters, which also serve as the
/// KL reference.
pub fn train_from<F>(cfg: &TrainConfig, env: &Env, mut params: PolicyParams, mut observe: F) -> Result<RunResult>
where
    F: FnMut(&IterationView<'_>) -> Result<()>,
{
    cfg.validate()?;
    env.validate()?;
    params.spec.check_compatible(&cfg.spec_for(env)?)?;
    if cfg.batch_prompts > env.num_prompts() {
        return Err(config(format!(
            "train.batch_prompts = {} exceeds the environment's {} prompts",
            cfg.batch_prompts,
            env.num_prompts()
        )));
    }
    let reference = params.clone();
    let eval_set = eval_prompt_set(env.num_prompts(), cfg.eval_prompts, cfg.seed);
    let mut ema = EmaState::default();
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut rv_history = Vec::with_capacity(cfg.iterations);
    let mut success_history = Vec::new();
    let mut succ = 0.0;
    let mut stop = None;

    for it in 0..cfg.iterations {
        let tables = params.tables();
        let prompts = select_prompts(env.num_prompts(), cfg.batch_prompts, cfg.seed, it)?;
        let groups = collect_groups(&tables, env, &prompts, cfg.group_size, cfg.seed, it)?;
        let batch = RolloutBatch::new(it, groups)?;
        let rv = batch_rv_statistics(&batch);
        let scores = cross_score_with(&tables, &batch, cfg.scope, cfg.seed)?;
        let (proxies, next_ema) = compute_proxies(&scores, ema, proxy_seed(cfg.seed, it))?;
        let (decision, weights) = select_groups(cfg, &batch, &tables)?;
        let (g_task, g_reg) = batch_gradients(cfg, &params, &reference, &tables, &batch, &weights)?;
        let (task_norm, reg_norm) = (norm(&g_task), norm(&g_reg));

        if it % cfg.eval_every == 0 || it + 1 == cfg.iterations {
            succ = evaluate(&params, env, &eval_set, cfg.eval_temperature, cfg.seed, it)?;
            success_history.push(succ);
        }
        let record = MetricsRecord {
            iter: it,
            ret: batch.mean_return(),
            succ,
            proxies,
            rv,
            g_task: task_norm,
            g_reg: reg_norm,
            rho: dominance_ratio(task_norm, reg_norm),
            kept_ratio: decision.effective_keep_ratio,
            zero_var: rv.zero_variance_count,
            rejected: decision.rejected_batch,
        };
        observe(&IterationView {
            iteration: it,
            params: &params,
            ema,
            batch: &batch,
            decision: &decision,
            record: &record,
        })?;
        records.push(record);
        ema = next_ema;

        if !decision.rejected_batch && cfg.learning_rate != 0.0 {
            for ((th, t), r) in params.theta.iter_mut().zip(&g_task).zip(&g_reg) {
                *th += cfg.learning_rate * (t + r);
            }
            if params.check_finite().is_err() {
                return Err(Error::NonFinite { iteration: it });
            }
        }

        rv_history.push(rv.mean);
        if cfg.early_stop.enabled {
            stop = early_stop_check(&rv_history, &success_history, &cfg.early_stop);
            if stop.is_some() {
                break;
            }
        }
    }
    let peak_success = success_history.iter().copied().fold(0.0, f64::max);
    Ok(RunResult {
        records,
        params,
        ema,
        stop,
        peak_success,
    })
}

/// Gradient norms of one group, unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupGradStat {
    pub rv: f64,
    pub task_norm: f64,
    pub reg_norm: f64,
}

/// Per-group task and regularizer gradient norms of a batch.
pub fn group_grad_stats(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &RolloutBatch,
    lambda_kl: f64,
    lambda_ent: f64,
) -> Result<Vec<GroupGradStat>> {
    let tables = params.tables();
    let n = params.spec.num_params();
    batch
        .groups
        .iter()
        .map(|group| {
            let mut g = vec![0.0; n];
            accumulate_task_gradient(&tables, group, AdvantageMode::Centered, None, 1.0, &mut g)?;
            let reg = RegParts::compute(params, reference, group.prompt_id)?.combine(lambda_kl, lambda_ent);
            Ok(GroupGradStat {
                rv: group.rv,
                task_norm: norm(&g),
                reg_norm: norm(&reg),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub rv_mean: f64,
    pub task_norm: f64,
    pub reg_norm: f64,
    pub count: usize,
}

/// Sorts groups by RV and splits them into `num_buckets` equal slices
/// (lowest RV first); a remainder is spread over the first buckets.
pub fn rv_bucket_report(stats: &[GroupGradStat], num_buckets: usize) -> Result<Vec<BucketStat>> {
    if num_buckets == 0 || stats.len() < num_buckets {
        return Err(config(format!(
            "{} groups cannot fill {num_buckets} reward-variance buckets",
            stats.len()
        )));
    }
    let mut sorted = stats.to_vec();
    sorted.sort_by(|a, b| a.rv.total_cmp(&b.rv));
    let base = sorted.len() / num_buckets;
    let extra = sorted.len() % num_buckets;
    let mut out = Vec::with_capacity(num_buckets);
    let mut start = 0;
    for b in 0..num_buckets {
        let len = base + usize::from(b < extra);
        let slice = &sorted[start..start + len];
        start += len;
        let m = |f: fn(&GroupGradStat) -> f64| math::mean(&slice.iter().map(f).collect::<Vec<_>>());
        out.push(BucketStat {
            rv_mean: m(|s| s.rv),
            task_norm: m(|s| s.task_norm),
            reg_norm: m(|s| s.reg_norm),
            count: len,
        });
    }
    Ok(out)
}

/// Four runs, each updating only on one RV quartile (Q1 = highest).
pub fn quartile_ablation(cfg: &TrainConfig, env: &Env) -> Result<Vec<RunResult>> {
    (0..4)
        .map(|band| {
            let c = TrainConfig {
                ablation: Some(Ablation::RankBand { band, num_bands: 4 }),
                ..cfg.clone()
            };
            train(&c, env)
        })
        .collect()
}

/// All prompts kept; only the extreme-return trajectories of each group update.
pub fn trajectory_filter_baseline(cfg: &TrainConfig, env: &Env, keep_top: usize, keep_bottom: usize) -> Result<RunResult> {
    let c = TrainConfig {
        ablation: Some(Ablation::TrajectoryExtremes { keep_top, keep_bottom }),
        filter: FilterConfig {
            strategy: Strategy::None,
            ..cfg.filter
        },
        ..cfg.clone()
    };
    train(&c, env)
}

/// One run per slip level on a slip-grid environment.
pub fn noise_sweep(cfg: &TrainConfig, env: &Env, slip_levels: &[f64]) -> Result<Vec<RunResult>> {
    let Env::SlipGrid(grid) = env else {
        return Err(config("the noise sweep needs a slip_grid environment"));
    };
    if let Some(s) = slip_levels.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(config(format!("slip level {s} is outside [0, 1]")));
    }
    slip_levels
        .iter()
        .map(|&slip| {
            let e = Env::SlipGrid(SlipGridEnv {
                slip_prob: slip,
                ..grid.clone()
            });
            train(cfg, &e)
        })
        .collect()
}

/// Arm names of [`filter_compare`], in order.
pub const FILTER_ARMS: [&str; 4] = ["none", "top_p", "top_k", "min_p"];

/// The same run under no filter, top-p, top-k and min-p.
pub fn filter_compare(cfg: &TrainConfig, env: &Env) -> Result<Vec<RunResult>> {
    [Strategy::None, Strategy::TopP, Strategy::TopK, Strategy::MinP]
        .iter()
        .map(|&strategy| {
            let c = TrainConfig {
                filter: FilterConfig { strategy, ..cfg.filter },
                ..cfg.clone()
            };
            train(&c, env)
        })
        .collect()
}

/// Median over runs of a final-record quantity.
pub fn median_final(runs: &[RunResult], f: impl Fn(&MetricsRecord) -> f64) -> f64 {
    math::median(&runs.iter().map(|r| f(r.last())).collect::<Vec<_>>())
}

/// Shuffled copy of `0..n` keyed by `seed`, for harnesses that need a
/// seeded permutation.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut stream(seed, Purpose::Trial, &[n as u64, 7]));
    v
}

/// Contextual-target environment of the collapse scenario: 16 prompts, 12
/// sharing one target and 4 with distinct targets.
pub fn collapse_env() -> Env {
    let mut targets = vec![0; 12];
    targets.extend([1, 2, 3, 4]);
    Env::ContextualTarget(ContextualTargetEnv::new(targets, 6).expect("valid scenario"))
}

/// Training settings of the collapse scenario.
pub fn collapse_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 400,
        batch_prompts: 16,
        group_size: 16,
        learning_rate: 40.0,
        lambda_kl: 0.0,
        lambda_ent: 0.01,
        reasoning_len: 2,
        vocab_size: 16,
        init: InitConfig {
            reasoning_scale: 0.3,
            action_scale: 0.0,
            reasoning_peak: 2.0,
        },
        early_stop: EarlyStopConfig {
            enabled: false,
            ..EarlyStopConfig::default()
        },
        eval_every: 10,
        seed,
        ..TrainConfig::default()
    }
}

/// Collapse environment with Gaussian reward noise (σ = 0.3), used by the
/// quartile ablation. Noise keeps low-RV groups from being pure
/// zero-variance groups.
pub fn quartile_env() -> Env {
    let mut env = collapse_env();
    env.set_reward_noise_sigma(0.3);
    env
}

/// 4×4 slip grid with holes in two corners and a 12-turn budget.
pub fn noise_sweep_env() -> Env {
    Env::SlipGrid(SlipGridEnv::with_layout(4, 0.0, 12, GridLayout::Corners).expect("valid scenario"))
}

/// Training settings of the noise sweep: the collapse settings with a
/// smaller step, a strong entropy bonus and 8 prompts per batch.
pub fn noise_sweep_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_prompts: 8,
        learning_rate: 5.0,
        lambda_ent: 1.0,
        ..collapse_config(seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (TrainConfig, Env) {
        let env = Env::ContextualTarget(ContextualTargetEnv::new(vec![0, 1, 2, 0], 5).unwrap());
        let cfg = TrainConfig {
            iterations: 5,
            batch_prompts: 4,
            group_size: 4,
            learning_rate: 0.5,
            eval_prompts: 32,
            ..TrainConfig::default()
        };
        (cfg, env)
    }

    #[test]
    fn early_stop_rules() {
        let es = EarlyStopConfig::default();
        let healthy = vec![1.0; 30];
        assert_eq!(early_stop_check(&healthy, &[0.5; 10], &es), None);
        let mut dropped = vec![1.0; 10];
        dropped.extend([0.05; 5]);
        assert_eq!(early_stop_check(&dropped, &[0.5], &es), Some(StopReason::RvCollapse));
        let mut blip = vec![1.0; 10];
        blip.extend([0.05, 0.05, 0.05, 0.05, 1.0]);
        assert_eq!(early_stop_check(&blip, &[0.5], &es), None);
        assert_eq!(early_stop_check(&healthy, &[0.0; 5], &es), Some(StopReason::SuccessCollapse));
        assert_eq!(early_stop_check(&healthy, &[0.0; 4], &es), None);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut cfg, env) = small();
        cfg.learning_rate = 0.0;
        let spec = cfg.spec_for(&env).unwrap();
        let init = init_params(spec, &cfg.init, cfg.seed);
        let run = train(&cfg, &env).unwrap();
        assert_eq!(run.params, init);
        assert_eq!(run.records.len(), 5);
    }

    #[test]
    fn runs_are_deterministic() {
        let (cfg, env) = small();
        let a = train(&cfg, &env).unwrap();
        let b = train(&cfg, &env).unwrap();
        let rows = |r: &RunResult| r.records.iter().map(MetricsRecord::csv_row).collect::<Vec<_>>();
        assert_eq!(rows(&a), rows(&b));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn csv_header_matches_row_width() {
        let (cfg, env) = small();
        let run = train(&cfg, &env).unwrap();
        let cols = MetricsRecord::CSV_HEADER.split(',').count();
        assert_eq!(cols, 24);
        assert_eq!(run.records[0].csv_row().split(',').count(), cols);
    }

    #[test]
    fn half_and_half_extremes_keep_everything() {
        let r = [0.3, 0.1, 0.9, 0.5];
        assert_eq!(trajectory_extremes(&r, 2, 2, 0), vec![true; 4]);
        assert_eq!(trajectory_extremes(&r, 1, 1, 0), vec![false, true, true, false]);
    }

    #[test]
    fn bucket_report_needs_enough_groups() {
        let s = GroupGradStat {
            rv: 1.0,
            task_norm: 1.0,
            reg_norm: 1.0,
        };
        assert!(rv_bucket_report(&[s; 5], 6).is_err());
        assert_eq!(rv_bucket_report(&[s; 13], 6).unwrap()[0].count, 3);
    }
}
