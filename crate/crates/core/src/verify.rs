//! Randomized audits of the analytical results the lab relies on.
//!
//! Each audit draws its configurations from a seeded stream, checks one
//! inequality or identity per configuration and reports the worst excess
//! over the bound (`max_gap`, nonpositive when every trial holds).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{ContextualTargetEnv, Env, SlipGridEnv};
use crate::error::{config, Result};
use crate::gradients::{
    drift_experiment, expected_reward, filtered_mse_experiment, grpo_floor_check, rv_gradient_bound_check, snr_estimate,
    task_gradient_exact,
};
use crate::infotheory::{exact_mi, fannes_mi_bound, mi_change_decomposition, sup_kl, template_mix, DiscreteJoint};
use crate::math::{self, abs};
use crate::policy::{
    kl_to_reference, policy_entropy, sample_trajectory, score_function, PolicyParams, PolicySpec, SampleKey, Trajectory,
};
use crate::miproxy::{cross_score_with, retrieval_acc, TurnScope};
use crate::rollout::{collect_groups, RolloutBatch};
use crate::trainer::{group_grad_stats, rv_bucket_report, BucketStat};
use crate::rng::{derive_key, stream, Purpose, Stream};

pub const AUDIT_NAMES: [&str; 8] = [
    "g3",
    "g4_snr",
    "g5_drift",
    "h1_mixing",
    "i1_mse",
    "k1_continuity",
    "l1_decomp",
    "m1_floor",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// Largest excess of the checked side over its bound across trials;
    /// nonpositive when every trial holds. Monte Carlo audits measure it
    /// against the 3-standard-error band.
    pub max_gap: f64,
    pub pass: bool,
}

impl AuditReport {
    fn new(name: &str, trials: usize, violations: usize, max_gap: f64) -> Self {
        Self {
            name: name.to_string(),
            trials,
            violations,
            max_gap,
            pass: violations == 0,
        }
    }
}

/// Default trial count of each audit.
pub fn default_trials(name: &str) -> Option<usize> {
    Some(match name {
        "g3" => 1000,
        "g4_snr" => 200,
        "g5_drift" => 10_000,
        "h1_mixing" => 10_000,
        "i1_mse" => 100_000,
        "k1_continuity" => 500,
        "l1_decomp" => 1000,
        "m1_floor" => 100,
        _ => return None,
    })
}

/// Runs one audit by name.
pub fn run_audit(name: &str, trials: usize, seed: u64) -> Result<AuditReport> {
    match name {
        "g3" => audit_g3(trials, seed),
        "g4_snr" => audit_g4_snr(trials, 400, seed),
        "g5_drift" => Ok(audit_g5_drift(trials, seed)),
        "h1_mixing" => audit_h1_mixing(trials, seed),
        "i1_mse" => audit_i1_mse(trials, seed),
        "k1_continuity" => audit_k1_continuity(trials, seed),
        "l1_decomp" => audit_l1_decomp(trials, seed),
        "m1_floor" => audit_m1_floor(trials, 10_000, seed),
        _ => Err(config(format!(
            "unknown audit '{name}'; valid names are {}",
            AUDIT_NAMES.join(", ")
        ))),
    }
}

/// Random single-turn contextual-target instance and policy. Logit scales
/// span near-uniform to near-deterministic policies.
pub fn random_instance(s: &mut Stream) -> Result<(Env, PolicyParams)> {
    let num_prompts = s.random_range(2..=3);
    let num_actions = s.random_range(3..=6);
    let targets = (0..num_prompts).map(|_| s.random_range(0..num_actions - 1)).collect();
    let mut ct = ContextualTargetEnv::new(targets, num_actions)?;
    ct.partial_reward = s.random::<f64>();
    let env = Env::ContextualTarget(ct);
    let spec = PolicySpec::for_env(&env, s.random_range(1..=2), s.random_range(2..=4))?;
    let scale = [0.1, 1.0, 3.0, 10.0][s.random_range(0..4)];
    let params = PolicyParams::random(spec, scale, scale, s.random());
    Ok((env, params))
}

/// `‖g_task‖ ≤ √RV · √E‖s‖²` on random instances, tolerance 1e-9.
pub fn audit_g3(trials: usize, seed: u64) -> Result<AuditReport> {
    let mut violations = 0;
    let mut max_gap = f64::NEG_INFINITY;
    for t in 0..trials {
        let mut s = stream(seed, Purpose::Trial, &[3, t as u64]);
        let (env, params) = random_instance(&mut s)?;
        let prompt = s.random_range(0..params.spec.num_prompts);
        let c = rv_gradient_bound_check(&params, &env, prompt)?;
        let gap = c.lhs - c.rhs;
        max_gap = max_gap.max(gap);
        if gap > 1e-9 {
            violations += 1;
        }
    }
    Ok(AuditReport::new("g3", trials, violations, max_gap))
}

/// SNR of the `G`-sample estimator against `√G·√RV/σ`, σ ∈ {0.1, 0.5, 1},
/// G ∈ {4, 16}; a trial fails only outside the 3-standard-error band.
pub fn audit_g4_snr(trials: usize, mc_trials: usize, seed: u64) -> Result<AuditReport> {
    let mut violations = 0;
    let mut max_gap = f64::NEG_INFINITY;
    for t in 0..trials {
        let mut s = stream(seed, Purpose::Trial, &[4, t as u64]);
        let (env, params) = random_instance(&mut s)?;
        let sigma = [0.1, 0.5, 1.0][t % 3];
        let g = [4, 16][(t / 3) % 2];
        let prompt = s.random_range(0..params.spec.num_prompts);
        let r = snr_estimate(&params, &env, prompt, g, mc_trials, sigma, 0.0, s.random())?;
        if let Some(bound) = r.bound {
            let banded = r.signal_norm / math::sqrt(r.mse + 3.0 * r.mse_std_error);
            max_gap = max_gap.max(banded - bound);
        }
        if !r.holds {
            violations += 1;
        }
    }
    Ok(AuditReport::new("g4_snr", trials, violations, max_gap))
}

/// Mean squared drift of `η`-scaled noise steps, η = 0.1, T = 100, v = 1,
/// over `seeds` walks; must match `η²Tv` within 5%.
pub fn audit_g5_drift(seeds: usize, seed: u64) -> AuditReport {
    let r = drift_experiment(0.1, 100, 1.0, seeds, seed);
    let rel = abs(r.empirical - r.theory) / r.theory;
    AuditReport::new("g5_drift", seeds, usize::from(rel > 0.05), rel - 0.05)
}

fn random_distribution(s: &mut Stream, n: usize, scale: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| scale * s.sample::<f64, _>(StandardNormal)).collect();
    math::softmax(&logits)
}

fn random_joint(s: &mut Stream, nx: usize, nz: usize) -> Result<DiscreteJoint> {
    let scale = [0.3, 1.0, 3.0][s.random_range(0..3)];
    let marginal = random_distribution(s, nx, 1.0);
    let rows = (0..nx).map(|_| random_distribution(s, nz, scale)).collect();
    DiscreteJoint::new(marginal, rows)
}

/// `I(mix_α) ≤ (1 − α)·I` for random joints, templates and weights.
pub fn audit_h1_mixing(trials: usize, seed: u64) -> Result<AuditReport> {
    let mut violations = 0;
    let mut max_gap = f64::NEG_INFINITY;
    for t in 0..trials {
        let mut s = stream(seed, Purpose::Trial, &[8, t as u64]);
        let (nx, nz) = (s.random_range(2..=5), s.random_range(2..=6));
        let j = random_joint(&mut s, nx, nz)?;
        let q = random_distribution(&mut s, nz, 1.0);
        let alpha: f64 = s.random();
        let mixed = exact_mi(&template_mix(&j, &q, alpha)?);
        let gap = mixed - (1.0 - alpha) * exact_mi(&j);
        max_gap = max_gap.max(gap);
        if gap > 1e-12 {
            violations += 1;
        }
    }
    Ok(AuditReport::new("h1_mixing", trials, violations, max_gap))
}

/// Averaged-estimator MSE of 8 groups with σ_i ~ U[0, 2] against
/// `(1/n²)Σσ_i²`, within 3%.
pub fn audit_i1_mse(trials: usize, seed: u64) -> Result<AuditReport> {
    let mut s = stream(seed, Purpose::Trial, &[9]);
    let sigmas: Vec<f64> = (0..8).map(|_| 2.0 * s.random::<f64>()).collect();
    let r = filtered_mse_experiment(&sigmas, trials, s.random())?;
    let rel = abs(r.empirical - r.theory) / r.theory;
    Ok(AuditReport::new("i1_mse", trials, usize::from(rel > 0.03), rel - 0.03))
}

/// `|I_θ − I_0| ≤ f(ε)` with `ε = sup_x KL(π_θ ‖ π_0)` on random
/// perturbations. Pairs whose `δ = √(ε/2)` exceeds 1 make the bound
/// vacuous and hold trivially.
pub fn audit_k1_continuity(trials: usize, seed: u64) -> Result<AuditReport> {
    let mut violations = 0;
    let mut max_gap = f64::NEG_INFINITY;
    for t in 0..trials {
        let mut s = stream(seed, Purpose::Trial, &[11, t as u64]);
        let (nx, nz) = (s.random_range(2..=4), s.random_range(2..=6));
        let base = random_joint(&mut s, nx, nz)?;
        let size = [0.01, 0.1, 0.5, 1.0][s.random_range(0..4)];
        let rows = (0..nx)
            .map(|x| {
                let logits: Vec<f64> = base
                    .row(x)
                    .iter()
                    .map(|&p| math::ln(p) + size * s.sample::<f64, _>(StandardNormal))
                    .collect();
                math::softmax(&logits)
            })
            .collect();
        let moved = DiscreteJoint::new(base.prompt_marginal.clone(), rows)?;
        let eps = sup_kl(&moved, &base);
        let Ok(bound) = fannes_mi_bound(eps, nx, nz) else {
            continue;
        };
        let gap = abs(exact_mi(&moved) - exact_mi(&base)) - bound;
        max_gap = max_gap.max(gap);
        if gap > 1e-12 {
            violations += 1;
        }
    }
    Ok(AuditReport::new("k1_continuity", trials, violations, max_gap))
}

/// `ΔI = Δ_marg − Δ_in` within 1e-12 on random joint pairs sharing a
/// prompt marginal.
pub fn audit_l1_decomp(trials: usize, seed: u64) -> Result<AuditReport> {
    let mut violations = 0;
    let mut max_gap = f64::NEG_INFINITY;
    for t in 0..trials {
        let mut s = stream(seed, Purpose::Trial, &[12, t as u64]);
        let (nx, nz) = (s.random_range(2..=5), s.random_range(2..=6));
        let a = random_joint(&mut s, nx, nz)?;
        let rows = (0..nx).map(|_| random_distribution(&mut s, nz, 1.0)).collect();
        let b = DiscreteJoint::new(a.prompt_marginal.clone(), rows)?;
        let c = mi_change_decomposition(&a, &b)?;
        let gap = abs(c.delta_i - (c.delta_marg - c.delta_in)) - 1e-12;
        max_gap = max_gap.max(gap);
        if gap > 0.0 {
            violations += 1;
        }
    }
    Ok(AuditReport::new("l1_decomp", trials, violations, max_gap))
}

/// Normalized-estimator MSE against `(1/K)(σ²/RV)E‖s‖²`; a configuration
/// fails only below the 3-standard-error band.
pub fn audit_m1_floor(trials: usize, mc_trials: usize, seed: u64) -> Result<AuditReport> {
    let mut violations = 0;
    let mut max_gap = f64::NEG_INFINITY;
    for t in 0..trials {
        let mut s = stream(seed, Purpose::Trial, &[13, t as u64]);
        let (env, params) = random_instance(&mut s)?;
        let sigma = [0.1, 0.5, 1.0][t % 3];
        let k = [4, 16][(t / 3) % 2];
        let prompt = s.random_range(0..params.spec.num_prompts);
        let r = grpo_floor_check(&params, &env, prompt, k, sigma, mc_trials, s.random())?;
        if !r.skipped {
            max_gap = max_gap.max(r.floor - (r.empirical_mse + 3.0 * r.std_error));
        }
        if !r.holds {
            violations += 1;
        }
    }
    Ok(AuditReport::new("m1_floor", trials, violations, max_gap))
}

/// Largest relative error of each analytic gradient against central
/// differences, over all draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub draws: usize,
    pub step: f64,
    pub score: f64,
    pub kl: f64,
    pub entropy: f64,
    pub task: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.score.max(self.kl).max(self.entropy).max(self.task)
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = math::norm(a).max(math::norm(b));
    if scale == 0.0 {
        0.0
    } else {
        math::norm(&diff) / scale
    }
}

/// Central differences of `f` at `theta` with step `h`.
pub fn central_differences(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + h;
        let up = f(&x)?;
        x[i] = theta[i] - h;
        let down = f(&x)?;
        x[i] = theta[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

fn trajectory_logp(params: &PolicyParams, t: &Trajectory) -> f64 {
    let spec = &params.spec;
    let mut row = Vec::new();
    let mut total = 0.0;
    for turn in &t.turns {
        for (pos, &tok) in turn.tokens.iter().enumerate() {
            row.resize(spec.vocab_size, 0.0);
            math::log_softmax_into(params.reasoning_logits(t.prompt_id, pos), 1.0, &mut row);
            total += row[tok];
        }
        row.resize(spec.num_actions, 0.0);
        math::log_softmax_into(params.action_logits(t.prompt_id), 1.0, &mut row);
        total += row[turn.action];
    }
    total
}

/// Checks the score function (on single- and multi-turn episodes), the KL
/// and entropy gradients, and the exact task gradient against central
/// differences of the corresponding scalar, step `h`. Logits are Gaussian
/// with scale 0.5, 1 or 2.
pub fn gradient_check(draws: usize, h: f64, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        draws,
        step: h,
        score: 0.0,
        kl: 0.0,
        entropy: 0.0,
        task: 0.0,
    };
    for d in 0..draws {
        let mut s = stream(seed, Purpose::Trial, &[11, d as u64]);
        let num_prompts = s.random_range(2..=3);
        let num_actions = s.random_range(3..=5);
        let targets = (0..num_prompts).map(|_| s.random_range(0..num_actions - 1)).collect();
        let mut ct = ContextualTargetEnv::new(targets, num_actions)?;
        ct.partial_reward = s.random::<f64>();
        let env = Env::ContextualTarget(ct);
        let spec = PolicySpec::for_env(&env, s.random_range(1..=2), s.random_range(2..=4))?;
        let scale = [0.5, 1.0, 2.0][d % 3];
        let params = PolicyParams::random(spec, scale, scale, s.random());
        let reference = PolicyParams::random(spec, scale, scale, s.random());
        let prompt = s.random_range(0..num_prompts);
        let with = |theta: &[f64]| PolicyParams {
            spec,
            theta: theta.to_vec(),
        };

        // Multi-turn score on a slip grid with the same reasoning shape.
        let grid = Env::SlipGrid(SlipGridEnv::new(3, 0.3, 4)?);
        let gspec = PolicySpec::for_env(&grid, spec.reasoning_len, spec.vocab_size)?;
        let gparams = PolicyParams::random(gspec, scale, scale, s.random());
        for (env, params) in [(&env, &params), (&grid, &gparams)] {
            let key = SampleKey::train(s.random(), d, 0);
            let x = s.random_range(0..env.num_prompts());
            let t = sample_trajectory(params, env, x, key)?;
            let analytic = score_function(params, &t)?;
            let fd = central_differences(&params.theta, h, |th| {
                Ok(trajectory_logp(
                    &PolicyParams {
                        spec: params.spec,
                        theta: th.to_vec(),
                    },
                    &t,
                ))
            })?;
            report.score = report.score.max(relative_error(&analytic, &fd));
        }

        let (_, kl) = kl_to_reference(&params, &reference, prompt)?;
        let fd = central_differences(&params.theta, h, |th| Ok(kl_to_reference(&with(th), &reference, prompt)?.0))?;
        report.kl = report.kl.max(relative_error(&kl, &fd));

        let (_, ent) = policy_entropy(&params, prompt)?;
        let fd = central_differences(&params.theta, h, |th| Ok(policy_entropy(&with(th), prompt)?.0))?;
        report.entropy = report.entropy.max(relative_error(&ent, &fd));

        let task = task_gradient_exact(&params, &env, prompt)?;
        let fd = central_differences(&params.theta, h, |th| expected_reward(&with(th), &env, prompt))?;
        report.task = report.task.max(relative_error(&task, &fd));
    }
    Ok(report)
}

/// Per-bucket gradient norms of one constructed batch and their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketExperiment {
    pub buckets: Vec<BucketStat>,
    /// Spearman of bucket index against mean task-gradient norm.
    pub task_spearman: f64,
    /// `(max − min) / mean` of the bucket mean regularizer norms.
    pub reg_spread: f64,
}

/// Builds a batch whose groups span the reward-variance range and reports
/// gradient norms in `num_buckets` RV buckets.
///
/// 48 single-turn prompts share one reasoning table; prompt `i` hits its
/// target with probability rising linearly from 0.02 to 0.5, so RV grows
/// with `i` while the regularizer sees the same reasoning head everywhere.
/// The regularizer is the entropy bonus (the KL reference is the policy
/// itself, so the KL term vanishes).
pub fn rv_bucket_experiment(num_buckets: usize, seed: u64) -> Result<BucketExperiment> {
    const PROMPTS: usize = 48;
    const ACTIONS: usize = 4;
    let targets = (0..PROMPTS).map(|i| i % (ACTIONS - 1)).collect();
    let mut ct = ContextualTargetEnv::new(targets, ACTIONS)?;
    ct.partial_reward = 0.0;
    let env = Env::ContextualTarget(ct);
    let spec = PolicySpec::for_env(&env, 4, 8)?;
    let shared = PolicyParams::random(spec, 1.0, 0.0, derive_key(seed, Purpose::Init, &[48]));
    let mut params = PolicyParams::uniform(spec);
    for x in 0..PROMPTS {
        for pos in 0..spec.reasoning_len {
            params.reasoning_logits_mut(x, pos).copy_from_slice(shared.reasoning_logits(0, pos));
        }
        // Target probability p, the rest spread evenly over the other actions.
        let p = 0.02 + 0.48 * x as f64 / (PROMPTS - 1) as f64;
        let target = x % (ACTIONS - 1);
        let rest = (1.0 - p) / (ACTIONS - 1) as f64;
        for (a, l) in params.action_logits_mut(x).iter_mut().enumerate() {
            *l = math::ln(if a == target { p } else { rest });
        }
    }
    let prompts: Vec<usize> = (0..PROMPTS).collect();
    let groups = collect_groups(&params.tables(), &env, &prompts, 16, seed, 0)?;
    let batch = RolloutBatch::new(0, groups)?;
    let stats = group_grad_stats(&params, &params, &batch, 0.0, 0.01)?;
    let buckets = rv_bucket_report(&stats, num_buckets)?;
    let idx: Vec<f64> = (0..buckets.len()).map(|i| i as f64).collect();
    let task: Vec<f64> = buckets.iter().map(|b| b.task_norm).collect();
    let reg: Vec<f64> = buckets.iter().map(|b| b.reg_norm).collect();
    let lo = reg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = reg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(BucketExperiment {
        task_spearman: math::spearman(&idx, &task),
        reg_spread: (hi - lo) / math::mean(&reg),
        buckets,
    })
}

/// Mean retrieval accuracy over `batches` batches of a policy whose
/// prompts all share one reasoning table, so no sample carries prompt
/// information. Chance level is `1/num_prompts`.
pub fn chance_retrieval(num_prompts: usize, group_size: usize, batches: usize, seed: u64) -> Result<f64> {
    let env = Env::ContextualTarget(ContextualTargetEnv::new(alloc::vec![0; num_prompts], 3)?);
    let spec = PolicySpec::for_env(&env, 2, 8)?;
    let shared = PolicyParams::random(spec, 1.0, 0.0, seed);
    let mut params = PolicyParams::uniform(spec);
    for x in 0..num_prompts {
        for pos in 0..spec.reasoning_len {
            params.reasoning_logits_mut(x, pos).copy_from_slice(shared.reasoning_logits(0, pos));
        }
    }
    let tables = params.tables();
    let prompts: Vec<usize> = (0..num_prompts).collect();
    let mut total = 0.0;
    for b in 0..batches {
        let groups = collect_groups(&tables, &env, &prompts, group_size, seed, b)?;
        let batch = RolloutBatch::new(b, groups)?;
        let m = cross_score_with(&tables, &batch, TurnScope::FirstTurn, seed)?;
        total += retrieval_acc(&m, derive_key(seed, Purpose::TieBreak, &[b as u64]));
    }
    Ok(total / batches as f64)
}
