//! Advantages, task and regularizer gradients, and the exact-enumeration
//! machinery used to check gradient-norm, SNR and variance-floor bounds.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::Env;
use crate::error::{domain, Result};
use crate::math::{self, norm, sqrt};
use crate::policy::{kl_to_reference, policy_entropy, PolicyParams, PolicyTables, Trajectory, Turn};
use crate::rng::{stream, Purpose};
use crate::rollout::{TrajectoryGroup, ZERO_VARIANCE};

/// `A_g = R_g − mean(R)`. Equal returns give exact zeros, which the
/// rounded mean would not.
pub fn advantages(returns: &[f64]) -> Vec<f64> {
    if returns.windows(2).all(|w| w[0] == w[1]) {
        return vec![0.0; returns.len()];
    }
    let mean = math::mean(returns);
    returns.iter().map(|r| r - mean).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub advantages: Vec<f64>,
    /// Set when the group had (numerically) zero variance and was zeroed out.
    pub skipped: bool,
}

/// Divides advantages by `√rv`; zero-variance groups come back as zeros.
pub fn grpo_normalize(advantages: &[f64], rv: f64) -> Result<Normalized> {
    if !(rv >= 0.0) {
        return Err(domain(format!("reward variance must be nonnegative, got {rv}")));
    }
    if rv < ZERO_VARIANCE {
        return Ok(Normalized {
            advantages: vec![0.0; advantages.len()],
            skipped: true,
        });
    }
    let scale = sqrt(rv);
    Ok(Normalized {
        advantages: advantages.iter().map(|a| a / scale).collect(),
        skipped: false,
    })
}

/// How group advantages are scaled before the score-function sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    Centered,
    Grpo,
}

/// Group-baseline REINFORCE estimate `(1/(G−1)) Σ_g A_g s_g`, added into `out`
/// with `weight`.
///
/// The group mean includes each sample's own return, which shrinks
/// `E[Σ A_g s_g]` by `(G−1)/G`; dividing by `G − 1` instead of `G` makes the
/// estimate unbiased for the per-prompt task gradient. Only trajectories with
/// `include[g]` contribute. Returns `false` when GRPO scaling skipped the group.
pub fn accumulate_task_gradient(
    tables: &PolicyTables,
    group: &TrajectoryGroup,
    mode: AdvantageMode,
    include: Option<&[bool]>,
    weight: f64,
    out: &mut [f64],
) -> Result<bool> {
    let g = group.len();
    if g < 2 {
        return Err(domain("task gradient needs at least 2 trajectories per group"));
    }
    let adv = advantages(&group.returns());
    let adv = match mode {
        AdvantageMode::Centered => adv,
        AdvantageMode::Grpo => {
            let n = grpo_normalize(&adv, group.rv)?;
            if n.skipped {
                return Ok(false);
            }
            n.advantages
        }
    };
    let scale = weight / (g - 1) as f64;
    for (idx, (traj, a)) in group.trajectories.iter().zip(&adv).enumerate() {
        if include.is_some_and(|m| !m[idx]) || *a == 0.0 {
            continue;
        }
        tables.accumulate_score(traj, scale * a, out);
    }
    Ok(true)
}

/// Monte Carlo task gradient for one group (centered advantages).
pub fn task_gradient_mc(params: &PolicyParams, group: &TrajectoryGroup) -> Result<Vec<f64>> {
    for t in &group.trajectories {
        t.validate(&params.spec)?;
    }
    let mut out = vec![0.0; params.spec.num_params()];
    accumulate_task_gradient(&params.tables(), group, AdvantageMode::Centered, None, 1.0, &mut out)?;
    Ok(out)
}

/// Ascent direction of `−λ_KL·KL(π‖π_ref) + λ_ent·H(π)` for one prompt.
pub fn reg_gradient(
    params: &PolicyParams,
    reference: &PolicyParams,
    prompt_id: usize,
    lambda_kl: f64,
    lambda_ent: f64,
) -> Result<Vec<f64>> {
    let parts = RegParts::compute(params, reference, prompt_id)?;
    Ok(parts.combine(lambda_kl, lambda_ent))
}

/// Unscaled regularizer ascent directions for one prompt.
#[derive(Debug, Clone)]
pub struct RegParts {
    /// `−∇KL`
    pub kl: Vec<f64>,
    /// `∇H`
    pub ent: Vec<f64>,
}

impl RegParts {
    pub fn compute(params: &PolicyParams, reference: &PolicyParams, prompt_id: usize) -> Result<Self> {
        let (_, mut kl) = kl_to_reference(params, reference, prompt_id)?;
        for v in &mut kl {
            *v = -*v;
        }
        let (_, ent) = policy_entropy(params, prompt_id)?;
        Ok(Self { kl, ent })
    }

    pub fn combine(&self, lambda_kl: f64, lambda_ent: f64) -> Vec<f64> {
        self.kl
            .iter()
            .zip(&self.ent)
            .map(|(k, e)| lambda_kl * k + lambda_ent * e)
            .collect()
    }
}

/// `ρ = ‖g_reg‖ / (‖g_task‖ + ‖g_reg‖)`, with `ρ = 0` when both vanish.
pub fn dominance_ratio(task_norm: f64, reg_norm: f64) -> f64 {
    let denom = task_norm + reg_norm;
    if denom > 0.0 {
        reg_norm / denom
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientDecomposition {
    pub g_task: Vec<f64>,
    /// `−∇KL`, unscaled.
    pub g_reg_kl: Vec<f64>,
    /// `∇H`, unscaled.
    pub g_reg_ent: Vec<f64>,
    pub lambda_kl: f64,
    pub lambda_ent: f64,
    pub task_norm: f64,
    pub reg_norm: f64,
    pub rho: f64,
}

impl GradientDecomposition {
    pub fn new(g_task: Vec<f64>, g_reg_kl: Vec<f64>, g_reg_ent: Vec<f64>, lambda_kl: f64, lambda_ent: f64) -> Self {
        let reg: Vec<f64> = g_reg_kl
            .iter()
            .zip(&g_reg_ent)
            .map(|(k, e)| lambda_kl * k + lambda_ent * e)
            .collect();
        let task_norm = norm(&g_task);
        let reg_norm = norm(&reg);
        Self {
            g_task,
            g_reg_kl,
            g_reg_ent,
            lambda_kl,
            lambda_ent,
            task_norm,
            reg_norm,
            rho: dominance_ratio(task_norm, reg_norm),
        }
    }

    pub fn g_reg(&self) -> Vec<f64> {
        self.g_reg_kl
            .iter()
            .zip(&self.g_reg_ent)
            .map(|(k, e)| self.lambda_kl * k + self.lambda_ent * e)
            .collect()
    }
}

/// Every single-turn outcome `(z, a)` of one prompt with its probability,
/// noiseless reward and score restricted to that prompt's parameters
/// (`L·V` reasoning entries followed by `A` action entries).
#[derive(Debug, Clone)]
pub struct ExactOutcomes {
    pub prompt_id: usize,
    pub probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub scores: Vec<Vec<f64>>,
    pub trajectories: Vec<Trajectory>,
}

impl ExactOutcomes {
    pub fn enumerate(params: &PolicyParams, env: &Env, prompt_id: usize) -> Result<Self> {
        let spec = params.spec;
        spec.check_prompt(prompt_id)?;
        let Env::ContextualTarget(ct) = env else {
            return Err(domain("exact enumeration supports the single-turn contextual target environment only"));
        };
        if env.num_prompts() != spec.num_prompts || env.num_actions() != spec.num_actions {
            return Err(crate::error::config("environment and policy disagree on sizes"));
        }
        let n_seq = spec.num_sequences()?;
        let total = n_seq as u128 * spec.num_actions as u128;
        if total > crate::policy::ENUMERATION_LIMIT as u128 {
            return Err(crate::error::Error::Capacity {
                size: total,
                limit: crate::policy::ENUMERATION_LIMIT,
            });
        }
        let tables = params.tables();
        let (l, v, a_n) = (spec.reasoning_len, spec.vocab_size, spec.num_actions);
        let dim = l * v + a_n;
        let mut out = Self {
            prompt_id,
            probs: Vec::with_capacity(total as usize),
            rewards: Vec::with_capacity(total as usize),
            scores: Vec::with_capacity(total as usize),
            trajectories: Vec::with_capacity(total as usize),
        };
        let action_probs = tables.action_probs(prompt_id);
        for idx in 0..n_seq {
            let tokens = spec.decode_sequence(idx);
            let mut base = vec![0.0; dim];
            let mut p_seq = 1.0;
            for (pos, &tok) in tokens.iter().enumerate() {
                let row = tables.token_probs(prompt_id, pos);
                p_seq *= row[tok];
                for (j, &pj) in row.iter().enumerate() {
                    base[pos * v + j] = -pj;
                }
                base[pos * v + tok] += 1.0;
            }
            for action in 0..a_n {
                let mut s = base.clone();
                for (j, &qj) in action_probs.iter().enumerate() {
                    s[l * v + j] = -qj;
                }
                s[l * v + action] += 1.0;
                out.probs.push(p_seq * action_probs[action]);
                out.rewards.push(ct.reward(prompt_id, action));
                out.scores.push(s);
                out.trajectories.push(Trajectory::new(
                    prompt_id,
                    vec![Turn {
                        tokens: tokens.clone(),
                        action,
                        reward: ct.reward(prompt_id, action),
                    }],
                ));
            }
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn mean_reward(&self) -> f64 {
        self.probs.iter().zip(&self.rewards).map(|(p, r)| p * r).sum()
    }

    /// `Var(μ | x)` of the noiseless reward.
    pub fn reward_variance(&self) -> f64 {
        let b = self.mean_reward();
        self.probs
            .iter()
            .zip(&self.rewards)
            .map(|(p, r)| p * (r - b) * (r - b))
            .sum::<f64>()
            .max(0.0)
    }

    /// `E[(μ − b) s]` in local coordinates.
    pub fn task_gradient_local(&self) -> Vec<f64> {
        let b = self.mean_reward();
        let mut g = vec![0.0; self.dim()];
        for ((p, r), s) in self.probs.iter().zip(&self.rewards).zip(&self.scores) {
            math::axpy(p * (r - b), s, &mut g);
        }
        g
    }

    /// `E‖s‖²`.
    pub fn score_second_moment(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.scores)
            .map(|(p, s)| p * math::dot(s, s))
            .sum()
    }

    /// Embeds a local vector into the full parameter layout.
    pub fn embed(&self, params: &PolicyParams, local: &[f64]) -> Vec<f64> {
        let spec = params.spec;
        let lv = spec.reasoning_len * spec.vocab_size;
        let mut full = vec![0.0; spec.num_params()];
        let r_off = spec.reasoning_offset(self.prompt_id, 0);
        full[r_off..r_off + lv].copy_from_slice(&local[..lv]);
        let a_off = spec.action_offset(self.prompt_id);
        full[a_off..a_off + spec.num_actions].copy_from_slice(&local[lv..]);
        full
    }

    fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect()
    }
}

fn draw<R: Rng>(cumulative: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

/// Exact per-prompt task gradient `E[A·s]` by enumeration.
pub fn task_gradient_exact(params: &PolicyParams, env: &Env, prompt_id: usize) -> Result<Vec<f64>> {
    let ex = ExactOutcomes::enumerate(params, env, prompt_id)?;
    Ok(ex.embed(params, &ex.task_gradient_local()))
}

/// `E[R | x]` by enumeration (noiseless).
pub fn expected_reward(params: &PolicyParams, env: &Env, prompt_id: usize) -> Result<f64> {
    Ok(ExactOutcomes::enumerate(params, env, prompt_id)?.mean_reward())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `‖g_task‖ ≤ √RV · √E‖s‖²`, both sides exact.
pub fn rv_gradient_bound_check(params: &PolicyParams, env: &Env, prompt_id: usize) -> Result<BoundCheck> {
    let ex = ExactOutcomes::enumerate(params, env, prompt_id)?;
    let lhs = norm(&ex.task_gradient_local());
    let rhs = sqrt(ex.reward_variance()) * sqrt(ex.score_second_moment());
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    /// `‖g‖ / √E‖ĝ − g‖²`.
    pub snr_rms: f64,
    /// `‖g‖ / (E‖ĝ − g‖ + ‖g_reg‖)`.
    pub snr_with_reg: f64,
    pub signal_norm: f64,
    pub mse: f64,
    pub mse_std_error: f64,
    pub mean_noise_norm: f64,
    /// Total `Var(R|x)` including reward noise.
    pub rv: f64,
    /// `√G·√RV/σ`; `None` when `σ = 0` (vacuous).
    pub bound: Option<f64>,
    /// Within three standard errors of the bound.
    pub holds: bool,
}

/// Monte Carlo SNR of the `G`-sample estimator with exact baseline and
/// Gaussian reward noise `σ`, against the `√G·√RV/σ` ceiling.
#[allow(clippy::too_many_arguments)]
pub fn snr_estimate(
    params: &PolicyParams,
    env: &Env,
    prompt_id: usize,
    group_size: usize,
    num_trials: usize,
    sigma: f64,
    reg_norm: f64,
    seed: u64,
) -> Result<SnrReport> {
    if group_size == 0 || num_trials == 0 {
        return Err(domain("G and the trial count must be positive"));
    }
    if !(sigma >= 0.0) {
        return Err(domain("sigma must be nonnegative"));
    }
    let ex = ExactOutcomes::enumerate(params, env, prompt_id)?;
    let g = ex.task_gradient_local();
    let b = ex.mean_reward();
    let cum = ex.cumulative();
    let mut errs = Vec::with_capacity(num_trials);
    let mut abs = 0.0;
    let mut est = vec![0.0; ex.dim()];
    for trial in 0..num_trials {
        let mut s = stream(seed, Purpose::Trial, &[prompt_id as u64, trial as u64]);
        est.iter_mut().for_each(|x| *x = 0.0);
        for _ in 0..group_size {
            let o = draw(&cum, &mut s);
            let noise: f64 = s.sample(StandardNormal);
            let a = ex.rewards[o] + sigma * noise - b;
            math::axpy(a / group_size as f64, &ex.scores[o], &mut est);
        }
        let err: f64 = est.iter().zip(&g).map(|(x, y)| (x - y) * (x - y)).sum();
        abs += sqrt(err);
        errs.push(err);
    }
    let MonteCarloMean { empirical: mse, std_error, .. } = summarize(&errs, 0.0);
    let mean_noise_norm = abs / num_trials as f64;
    let signal_norm = norm(&g);
    let rv = ex.reward_variance() + sigma * sigma;
    let snr = if mse > 0.0 { signal_norm / sqrt(mse) } else { f64::INFINITY };
    let bound = (sigma > 0.0).then(|| sqrt(group_size as f64) * sqrt(rv) / sigma);
    // SNR ≤ bound  ⇔  MSE ≥ ‖g‖²/bound², checked against the MSE's
    // 3-standard-error band.
    let holds = match bound {
        Some(bd) => mse + 3.0 * std_error >= signal_norm * signal_norm / (bd * bd),
        None => true,
    };
    let reg_denom = mean_noise_norm + reg_norm;
    Ok(SnrReport {
        snr_rms: snr,
        snr_with_reg: if reg_denom > 0.0 { signal_norm / reg_denom } else { f64::INFINITY },
        signal_norm,
        mse,
        mse_std_error: std_error,
        mean_noise_norm,
        rv,
        bound,
        holds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorCheck {
    pub empirical_mse: f64,
    pub floor: f64,
    pub std_error: f64,
    pub rv: f64,
    pub holds: bool,
    /// Set when `RV ≈ 0` made the check vacuous.
    pub skipped: bool,
}

/// Variance floor of the `√RV`-normalized estimator with `K` samples.
pub fn grpo_floor_check(
    params: &PolicyParams,
    env: &Env,
    prompt_id: usize,
    samples: usize,
    sigma: f64,
    num_trials: usize,
    seed: u64,
) -> Result<FloorCheck> {
    if samples == 0 || num_trials == 0 {
        return Err(domain("K and the trial count must be positive"));
    }
    if !(sigma >= 0.0) {
        return Err(domain("sigma must be nonnegative"));
    }
    let ex = ExactOutcomes::enumerate(params, env, prompt_id)?;
    let rv = ex.reward_variance() + sigma * sigma;
    if rv < ZERO_VARIANCE {
        return Ok(FloorCheck {
            empirical_mse: 0.0,
            floor: 0.0,
            std_error: 0.0,
            rv,
            holds: true,
            skipped: true,
        });
    }
    let scale = 1.0 / sqrt(rv);
    let g: Vec<f64> = ex.task_gradient_local().iter().map(|x| x * scale).collect();
    let b = ex.mean_reward();
    let cum = ex.cumulative();
    let mut errs = Vec::with_capacity(num_trials);
    let mut est = vec![0.0; ex.dim()];
    for trial in 0..num_trials {
        let mut s = stream(seed, Purpose::Trial, &[prompt_id as u64, trial as u64, 1]);
        est.iter_mut().for_each(|x| *x = 0.0);
        for _ in 0..samples {
            let o = draw(&cum, &mut s);
            let noise: f64 = s.sample(StandardNormal);
            let a = (ex.rewards[o] + sigma * noise - b) * scale;
            math::axpy(a / samples as f64, &ex.scores[o], &mut est);
        }
        errs.push(est.iter().zip(&g).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
    }
    let MonteCarloMean { empirical: empirical_mse, std_error, .. } = summarize(&errs, 0.0);
    let floor = sigma * sigma / rv * ex.score_second_moment() / samples as f64;
    Ok(FloorCheck {
        empirical_mse,
        floor,
        rv,
        std_error,
        holds: empirical_mse + 3.0 * std_error >= floor,
        skipped: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloMean {
    pub empirical: f64,
    pub std_error: f64,
    pub theory: f64,
}

/// Dimension of the synthetic noise vectors in the drift and MSE experiments.
const NOISE_DIM: usize = 4;

/// Random walk `θ_{t+1} = θ_t + η ξ_t` with `E‖ξ‖² = v`; mean squared
/// displacement after `steps` against `η² T v`.
pub fn drift_experiment(eta: f64, steps: usize, noise_variance: f64, num_seeds: usize, seed: u64) -> MonteCarloMean {
    let component_sd = sqrt(noise_variance / NOISE_DIM as f64);
    let samples: Vec<f64> = (0..num_seeds)
        .map(|run| {
            let mut s = stream(seed, Purpose::Trial, &[run as u64]);
            let mut theta = [0.0; NOISE_DIM];
            for _ in 0..steps {
                for th in &mut theta {
                    let z: f64 = s.sample(StandardNormal);
                    *th += eta * component_sd * z;
                }
            }
            theta.iter().map(|x| x * x).sum()
        })
        .collect();
    summarize(&samples, eta * eta * steps as f64 * noise_variance)
}

/// Mean of independent noisy group gradients `ĝ_i = g_i + ε_i` with
/// `E‖ε_i‖² = σ_i²`; empirical MSE against `(1/n²) Σ σ_i²`.
pub fn filtered_mse_experiment(group_noise_sigmas: &[f64], num_trials: usize, seed: u64) -> Result<MonteCarloMean> {
    let n = group_noise_sigmas.len();
    if n == 0 {
        return Err(domain("at least one group is required"));
    }
    let theory = group_noise_sigmas.iter().map(|s| s * s).sum::<f64>() / (n * n) as f64;
    let samples: Vec<f64> = (0..num_trials)
        .map(|trial| {
            let mut s = stream(seed, Purpose::Trial, &[trial as u64, 2]);
            let mut err = [0.0; NOISE_DIM];
            for &sigma in group_noise_sigmas {
                let sd = sigma / sqrt(NOISE_DIM as f64);
                for e in &mut err {
                    let z: f64 = s.sample(StandardNormal);
                    *e += sd * z / n as f64;
                }
            }
            err.iter().map(|x| x * x).sum()
        })
        .collect();
    Ok(summarize(&samples, theory))
}

fn summarize(samples: &[f64], theory: f64) -> MonteCarloMean {
    let n = samples.len().max(1) as f64;
    let empirical = math::mean(samples);
    let var = if samples.len() > 1 {
        samples.iter().map(|x| (x - empirical) * (x - empirical)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MonteCarloMean {
        empirical,
        std_error: sqrt(var / n),
        theory,
    }
}
