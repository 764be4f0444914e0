//! Post-sampling selection of prompt groups.
//!
//! Every strategy ranks groups by a nonnegative per-group statistic and
//! returns a [`FilterDecision`]; the trainer turns the decision into per-group
//! loss weights with [`apply_filter_mask`]. Filtering never touches the batch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::math;
use crate::policy::PolicyTables;
use crate::rng::{stream, Purpose};
use crate::rollout::{reward_variance, RolloutBatch, ZERO_VARIANCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    TopP,
    TopK,
    MinP,
    ReverseTopP,
}

impl Strategy {
    pub const NAMES: [&'static str; 5] = ["none", "top_p", "top_k", "min_p", "reverse_top_p"];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::TopP => "top_p",
            Strategy::TopK => "top_k",
            Strategy::MinP => "min_p",
            Strategy::ReverseTopP => "reverse_top_p",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Strategy::None,
            "top_p" => Strategy::TopP,
            "top_k" => Strategy::TopK,
            "min_p" => Strategy::MinP,
            "reverse_top_p" => Strategy::ReverseTopP,
            _ => return None,
        })
    }
}

/// Per-group quantity the filter ranks by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    RewardVariance,
    RewardSum,
    Entropy,
    EntropyVariance,
    Length,
}

impl Statistic {
    pub const NAMES: [&'static str; 5] = ["reward_variance", "reward_sum", "entropy", "entropy_variance", "length"];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::RewardVariance => "reward_variance",
            Statistic::RewardSum => "reward_sum",
            Statistic::Entropy => "entropy",
            Statistic::EntropyVariance => "entropy_variance",
            Statistic::Length => "length",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "reward_variance" => Statistic::RewardVariance,
            "reward_sum" => Statistic::RewardSum,
            "entropy" => Statistic::Entropy,
            "entropy_variance" => Statistic::EntropyVariance,
            "length" => Statistic::Length,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub strategy: Strategy,
    /// Keep rate for `top_p`, `top_k` and `reverse_top_p`.
    pub rho: f64,
    /// Threshold fraction for `min_p`.
    pub min_p: f64,
    pub include_zero: bool,
    pub epsilon: f64,
    pub statistic: Statistic,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::None,
            rho: 0.9,
            min_p: 0.5,
            include_zero: false,
            epsilon: 0.01,
            statistic: Statistic::RewardVariance,
        }
    }
}

impl FilterConfig {
    pub fn top_p(rho: f64) -> Self {
        Self {
            strategy: Strategy::TopP,
            rho,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(config(format!("filter.rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(self.min_p > 0.0 && self.min_p <= 1.0) {
            return Err(config(format!("filter.min_p must lie in (0, 1], got {}", self.min_p)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) {
            return Err(config(format!("filter.epsilon must lie in [0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    /// Kept group indices, ascending.
    pub kept: Vec<usize>,
    pub k_star: usize,
    pub effective_keep_ratio: f64,
    pub zero_variance_count: usize,
    pub values: Vec<f64>,
    pub rejected_batch: bool,
    /// Mass or value threshold the selection compared against. The mass
    /// target is computed after zero groups are removed.
    pub threshold: f64,
}

impl FilterDecision {
    fn from_kept(mut kept: Vec<usize>, values: &[f64], threshold: f64) -> Self {
        kept.sort_unstable();
        let p = values.len();
        Self {
            k_star: kept.len(),
            effective_keep_ratio: if p == 0 { 0.0 } else { kept.len() as f64 / p as f64 },
            zero_variance_count: values.iter().filter(|&&v| v < ZERO_VARIANCE).count(),
            values: values.to_vec(),
            rejected_batch: kept.is_empty(),
            kept,
            threshold,
        }
    }

    pub fn is_kept(&self, group: usize) -> bool {
        self.kept.binary_search(&group).is_ok()
    }
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(config("filtering needs at least one group"));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(config(format!("filter statistics must be finite and nonnegative, got {v}")));
    }
    Ok(())
}

fn check_rate(name: &str, rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(config(format!("filter.{name} must lie in (0, 1], got {rho}")))
    }
}

/// Group indices ordered by value (descending unless `ascending`), ties in a
/// seeded random order.
pub fn ranked(values: &[f64], ascending: bool, tie_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.shuffle(&mut stream(tie_seed, Purpose::TieBreak, &[values.len() as u64]));
    // Stable sort keeps the shuffled order within ties.
    order.sort_by(|&a, &b| {
        let o = values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal);
        if ascending {
            o
        } else {
            o.reverse()
        }
    });
    order
}

fn candidates(values: &[f64], include_zero: bool) -> Vec<bool> {
    values.iter().map(|&v| include_zero || v >= ZERO_VARIANCE).collect()
}

fn mass_prefix(values: &[f64], rho: f64, include_zero: bool, epsilon: f64, ascending: bool, tie_seed: u64) -> Result<FilterDecision> {
    check_values(values)?;
    check_rate("rho", rho)?;
    if !(epsilon >= 0.0) {
        return Err(config("filter.epsilon must be nonnegative"));
    }
    let cand = candidates(values, include_zero);
    let total: f64 = values.iter().zip(&cand).filter(|(_, c)| **c).map(|(v, _)| v).sum();
    let tau = rho * total;
    if !(total > 0.0) {
        return Ok(FilterDecision::from_kept(Vec::new(), values, tau));
    }
    let order: Vec<usize> = ranked(values, ascending, tie_seed).into_iter().filter(|&i| cand[i]).collect();
    if rho >= 1.0 {
        return Ok(FilterDecision::from_kept(order, values, tau));
    }
    let target = tau * (1.0 - epsilon);
    let mut kept = Vec::new();
    let mut acc = 0.0;
    for i in order {
        kept.push(i);
        acc += values[i];
        if acc >= target {
            break;
        }
    }
    Ok(FilterDecision::from_kept(kept, values, tau))
}

/// Smallest descending prefix whose mass reaches `ρ·Σv` (relative slack `ε`).
pub fn select_top_p(values: &[f64], rho: f64, include_zero: bool, epsilon: f64, tie_seed: u64) -> Result<FilterDecision> {
    mass_prefix(values, rho, include_zero, epsilon, false, tie_seed)
}

/// Smallest ascending prefix whose mass reaches `ρ·Σv`.
pub fn select_reverse_top_p(values: &[f64], rho: f64, include_zero: bool, epsilon: f64, tie_seed: u64) -> Result<FilterDecision> {
    mass_prefix(values, rho, include_zero, epsilon, true, tie_seed)
}

/// The `max(1, ⌊ρP⌋)` largest groups.
pub fn select_top_k(values: &[f64], rho: f64, include_zero: bool, tie_seed: u64) -> Result<FilterDecision> {
    check_values(values)?;
    check_rate("rho", rho)?;
    let k = (math::floor(rho * values.len() as f64) as usize).max(1);
    let cand = candidates(values, include_zero);
    let kept: Vec<usize> = ranked(values, false, tie_seed)
        .into_iter()
        .filter(|&i| cand[i])
        .take(k)
        .collect();
    Ok(FilterDecision::from_kept(kept, values, k as f64))
}

/// Every group with `v ≥ p·max v`; rejects the batch when `max v = 0`.
pub fn select_min_p(values: &[f64], p: f64, include_zero: bool) -> Result<FilterDecision> {
    check_values(values)?;
    check_rate("min_p", p)?;
    let max = values.iter().copied().fold(0.0, f64::max);
    let tau = p * max;
    if !(max > 0.0) {
        return Ok(FilterDecision::from_kept(Vec::new(), values, tau));
    }
    let cand = candidates(values, include_zero);
    let kept = (0..values.len()).filter(|&i| cand[i] && values[i] >= tau).collect();
    Ok(FilterDecision::from_kept(kept, values, tau))
}

/// Keeps everything.
pub fn select_all(values: &[f64]) -> FilterDecision {
    FilterDecision::from_kept((0..values.len()).collect(), values, 0.0)
}

/// Keeps rank band `band` (0 = highest) of `num_bands` equal slices of the
/// descending order. Used by the quartile ablation.
pub fn select_rank_band(values: &[f64], band: usize, num_bands: usize, tie_seed: u64) -> Result<FilterDecision> {
    check_values(values)?;
    if num_bands == 0 || band >= num_bands || !values.len().is_multiple_of(num_bands) {
        return Err(config(format!(
            "rank band {band} of {num_bands} needs a group count divisible by the band count (got {})",
            values.len()
        )));
    }
    let width = values.len() / num_bands;
    let kept = ranked(values, false, tie_seed)[band * width..(band + 1) * width].to_vec();
    Ok(FilterDecision::from_kept(kept, values, width as f64))
}

/// Dispatches on the configured strategy.
pub fn select(cfg: &FilterConfig, values: &[f64], tie_seed: u64) -> Result<FilterDecision> {
    match cfg.strategy {
        Strategy::None => {
            check_values(values)?;
            Ok(select_all(values))
        }
        Strategy::TopP => select_top_p(values, cfg.rho, cfg.include_zero, cfg.epsilon, tie_seed),
        Strategy::ReverseTopP => select_reverse_top_p(values, cfg.rho, cfg.include_zero, cfg.epsilon, tie_seed),
        Strategy::TopK => select_top_k(values, cfg.rho, cfg.include_zero, tie_seed),
        Strategy::MinP => select_min_p(values, cfg.min_p, cfg.include_zero),
    }
}

/// Per-group loss weights: `1/k*` on kept groups, zero elsewhere and on a
/// rejected batch.
pub fn apply_filter_mask(decision: &FilterDecision, num_groups: usize) -> Result<Vec<f64>> {
    if decision.values.len() != num_groups || decision.kept.iter().any(|&i| i >= num_groups) {
        return Err(config(format!(
            "filter decision covers {} groups but the batch has {num_groups}",
            decision.values.len()
        )));
    }
    let mut w = vec![0.0; num_groups];
    if decision.rejected_batch {
        return Ok(w);
    }
    let each = 1.0 / decision.k_star as f64;
    for &i in &decision.kept {
        w[i] = each;
    }
    Ok(w)
}

/// Per-group value of `statistic` on a batch.
///
/// Entropy-type statistics use per-token surprisal `−log π(z|x)/|z|` of the
/// sampled reasoning under the sampling policy: `entropy` is its group mean,
/// `entropy_variance` its unbiased group variance. `length` is the mean
/// reasoning length. `reward_sum` is shifted so the batch minimum is zero,
/// keeping every statistic a nonnegative mass.
pub fn group_statistics(batch: &RolloutBatch, tables: &PolicyTables, statistic: Statistic) -> Result<Vec<f64>> {
    let vals: Vec<f64> = match statistic {
        Statistic::RewardVariance => batch.variances(),
        Statistic::RewardSum => {
            let sums: Vec<f64> = batch.groups.iter().map(|g| g.returns().iter().sum()).collect();
            let min = sums.iter().copied().fold(f64::INFINITY, f64::min);
            sums.iter().map(|s| s - min).collect()
        }
        Statistic::Entropy | Statistic::EntropyVariance => {
            let mut out = Vec::with_capacity(batch.groups.len());
            for g in &batch.groups {
                let surprisal: Vec<f64> = g
                    .trajectories
                    .iter()
                    .map(|t| {
                        let toks = t.reasoning_tokens();
                        -tables.sequence_logp(t.prompt_id, &toks) / toks.len().max(1) as f64
                    })
                    .collect();
                out.push(if statistic == Statistic::Entropy {
                    math::mean(&surprisal)
                } else {
                    reward_variance(&surprisal)?
                });
            }
            out
        }
        Statistic::Length => batch
            .groups
            .iter()
            .map(|g| math::mean(&g.trajectories.iter().map(|t| t.reasoning_tokens().len() as f64).collect::<Vec<_>>()))
            .collect(),
    };
    Ok(vals)
}
