//! In-batch cross-scoring and the retrieval-style mutual-information proxies.
//!
//! Every sampled reasoning trace `Z[i,k]` is teacher-forced under every prompt
//! of its batch. The resulting score matrix feeds matched/marginal per-token
//! log-likelihoods, retrieval accuracy, Recall@k, the MI estimates and the
//! parallel entropy proxies.

use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::math::{self, log_sum_exp};
use crate::policy::{PolicyParams, PolicyTables};
use crate::rng::{stream, Purpose};
use crate::rollout::RolloutBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnScope {
    FirstTurn,
    TrajectoryUniform,
}

/// `scores[(i * G + k) * P + j] = log p(Z[i,k] | X[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub num_prompts: usize,
    pub group_size: usize,
    pub iteration: usize,
    pub scores: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(num_prompts: usize, group_size: usize, scores: Vec<f64>, lengths: Vec<usize>) -> Result<Self> {
        if num_prompts == 0 || group_size == 0 {
            return Err(domain("score matrix needs P >= 1 and G >= 1"));
        }
        if scores.len() != num_prompts * group_size * num_prompts || lengths.len() != num_prompts * group_size {
            return Err(domain("score matrix dimensions do not match P and G"));
        }
        if lengths.contains(&0) {
            return Err(domain("reasoning lengths must be at least 1"));
        }
        Ok(Self {
            num_prompts,
            group_size,
            iteration: 0,
            scores,
            lengths,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.num_prompts * self.group_size
    }

    /// Scores of sample `row = i * G + k` against every candidate prompt.
    pub fn row(&self, row: usize) -> &[f64] {
        &self.scores[row * self.num_prompts..(row + 1) * self.num_prompts]
    }

    /// Source prompt position of a row.
    #[inline]
    pub fn source(&self, row: usize) -> usize {
        row / self.group_size
    }
}

/// Teacher-forces every reasoning trace of `batch` under every batch prompt.
///
/// `FirstTurn` scores the first turn's tokens; `TrajectoryUniform` scores one
/// turn per sample, drawn uniformly from a stream keyed by
/// `(seed, iteration, i, k)`.
pub fn cross_score(params: &PolicyParams, batch: &RolloutBatch, scope: TurnScope, seed: u64) -> Result<ScoreMatrix> {
    cross_score_with(&params.tables(), batch, scope, seed)
}

pub fn cross_score_with(tables: &PolicyTables, batch: &RolloutBatch, scope: TurnScope, seed: u64) -> Result<ScoreMatrix> {
    let spec = &tables.spec;
    let prompts = batch.prompt_ids();
    let p = prompts.len();
    let g = batch.group_size;
    for group in &batch.groups {
        for traj in &group.trajectories {
            traj.validate(spec).map_err(|e| config(alloc::format!("batch does not fit the policy: {e}")))?;
        }
    }
    let row = |row: usize| -> (Vec<f64>, usize) {
        let (i, k) = (row / g, row % g);
        let traj = &batch.groups[i].trajectories[k];
        let turn = match scope {
            TurnScope::FirstTurn => 0,
            TurnScope::TrajectoryUniform => {
                let mut s = stream(seed, Purpose::TurnPick, &[batch.iteration as u64, i as u64, k as u64]);
                s.random_range(0..traj.turns.len())
            }
        };
        let tokens = &traj.turns[turn].tokens;
        let scores = prompts.iter().map(|&x| tables.sequence_logp(x, tokens)).collect();
        (scores, tokens.len())
    };
    #[cfg(feature = "std")]
    let rows: Vec<(Vec<f64>, usize)> = {
        use rayon::prelude::*;
        (0..p * g).into_par_iter().map(row).collect()
    };
    #[cfg(not(feature = "std"))]
    let rows: Vec<(Vec<f64>, usize)> = (0..p * g).map(row).collect();

    let mut scores = Vec::with_capacity(p * g * p);
    let mut lengths = Vec::with_capacity(p * g);
    for (s, len) in rows {
        scores.extend(s);
        lengths.push(len);
    }
    let mut m = ScoreMatrix::new(p, g, scores, lengths)?;
    m.iteration = batch.iteration;
    Ok(m)
}

/// Per-token matched and mixture-marginal log-likelihoods.
pub fn matched_marginal(m: &ScoreMatrix) -> (Vec<f64>, Vec<f64>) {
    let log_p = math::ln(m.num_prompts as f64);
    (0..m.num_samples())
        .map(|r| {
            let row = m.row(r);
            let len = m.lengths[r] as f64;
            let matched = row[m.source(r)] / len;
            let marginal = (log_sum_exp(row) - log_p) / len;
            (matched, marginal)
        })
        .unzip()
}

/// Rank of the true prompt within each row (0 = best). Ties with the true
/// prompt are ordered uniformly at random from the tie-break stream.
pub fn true_prompt_ranks(m: &ScoreMatrix, seed: u64) -> Vec<usize> {
    (0..m.num_samples())
        .map(|r| {
            let row = m.row(r);
            let i = m.source(r);
            let own = row[i];
            let mut above = 0;
            let mut tied = 0;
            for (j, &v) in row.iter().enumerate() {
                if j == i {
                    continue;
                }
                if v > own {
                    above += 1;
                } else if v == own {
                    tied += 1;
                }
            }
            if tied == 0 {
                above
            } else {
                let (i, k) = (r / m.group_size, r % m.group_size);
                let mut s = stream(seed, Purpose::TieBreak, &[m.iteration as u64, i as u64, k as u64]);
                above + s.random_range(0..=tied)
            }
        })
        .collect()
}

fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// Fraction of samples whose own prompt wins the argmax over the row.
pub fn retrieval_acc(m: &ScoreMatrix, seed: u64) -> f64 {
    recall_from_ranks(&true_prompt_ranks(m, seed), 1)
}

/// Fraction of samples whose own prompt ranks in the top `k`.
pub fn recall_at_k(m: &ScoreMatrix, k: usize, seed: u64) -> Result<f64> {
    if k == 0 || k > m.num_prompts {
        return Err(domain(alloc::format!("recall@k needs 1 <= k <= P = {}, got {k}", m.num_prompts)));
    }
    Ok(recall_from_ranks(&true_prompt_ranks(m, seed), k))
}

pub fn mi_est(matched: &[f64], marginal: &[f64]) -> f64 {
    debug_assert_eq!(matched.len(), marginal.len());
    let n = matched.len() as f64;
    matched.iter().zip(marginal).map(|(a, b)| a - b).sum::<f64>() / n
}

/// Sequence-level estimate: no division by reasoning length.
pub fn mi_seq_est(m: &ScoreMatrix) -> f64 {
    let log_p = math::ln(m.num_prompts as f64);
    let total: f64 = (0..m.num_samples())
        .map(|r| {
            let row = m.row(r);
            row[m.source(r)] - (log_sum_exp(row) - log_p)
        })
        .sum();
    total / m.num_samples() as f64
}

pub const DEFAULT_EMA_ALPHA: f64 = 0.9;
pub const DEFAULT_ZSCORE_EPSILON: f64 = 1e-3;

/// Running scale for the EMA z-score proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub sigma_ema: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub initialized: bool,
}

impl Default for EmaState {
    fn default() -> Self {
        Self {
            sigma_ema: 0.0,
            alpha: DEFAULT_EMA_ALPHA,
            epsilon: DEFAULT_ZSCORE_EPSILON,
            initialized: false,
        }
    }
}

impl EmaState {
    pub fn new(alpha: f64, epsilon: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(domain("EMA alpha must lie in (0, 1)"));
        }
        if !(epsilon > 0.0) {
            return Err(domain("z-score epsilon must be positive"));
        }
        Ok(Self {
            alpha,
            epsilon,
            ..Self::default()
        })
    }

    /// Folds in one batch scale. The first update copies it.
    pub fn update(self, sigma_batch: f64) -> Self {
        let sigma_ema = if self.initialized {
            self.alpha * self.sigma_ema + (1.0 - self.alpha) * sigma_batch
        } else {
            sigma_batch
        };
        Self {
            sigma_ema,
            initialized: true,
            ..self
        }
    }
}

/// Population standard deviation of the marginal scores in this batch.
pub fn marginal_std(marginal: &[f64]) -> f64 {
    math::sqrt(math::population_variance(marginal))
}

fn scaled_gap(matched: &[f64], marginal: &[f64], scale: f64) -> f64 {
    mi_est(matched, marginal) / scale
}

pub fn mi_zscore(matched: &[f64], marginal: &[f64], epsilon: f64) -> f64 {
    scaled_gap(matched, marginal, marginal_std(marginal) + epsilon)
}

pub fn mi_zscore_ema(matched: &[f64], marginal: &[f64], state: EmaState) -> Result<(f64, EmaState)> {
    if !(state.alpha > 0.0 && state.alpha < 1.0) {
        return Err(domain("EMA alpha must lie in (0, 1)"));
    }
    let next = state.update(marginal_std(marginal));
    Ok((scaled_gap(matched, marginal, next.sigma_ema + next.epsilon), next))
}

/// `(H(Z|X), H(Z))` proxies: negated means of matched and marginal scores.
pub fn proxy_entropies(matched: &[f64], marginal: &[f64]) -> (f64, f64) {
    (-math::mean(matched), -math::mean(marginal))
}

/// Every proxy column logged per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyValues {
    pub ret_acc: f64,
    /// `NaN` when `k > P`.
    pub recall2: f64,
    pub recall4: f64,
    pub recall8: f64,
    pub mi_est: f64,
    pub mi_seq: f64,
    pub mi_z: f64,
    pub mi_z_ema: f64,
    pub h_cond: f64,
    pub h_marg: f64,
}

pub fn compute_proxies(m: &ScoreMatrix, ema: EmaState, seed: u64) -> Result<(ProxyValues, EmaState)> {
    let (matched, marginal) = matched_marginal(m);
    let ranks = true_prompt_ranks(m, seed);
    let recall = |k: usize| {
        if k <= m.num_prompts {
            recall_from_ranks(&ranks, k)
        } else {
            f64::NAN
        }
    };
    let (mi_z_ema, next) = mi_zscore_ema(&matched, &marginal, ema)?;
    let (h_cond, h_marg) = proxy_entropies(&matched, &marginal);
    let values = ProxyValues {
        ret_acc: recall(1),
        recall2: recall(2),
        recall4: recall(4),
        recall8: recall(8),
        mi_est: mi_est(&matched, &marginal),
        mi_seq: mi_seq_est(m),
        mi_z: mi_zscore(&matched, &marginal, ema.epsilon),
        mi_z_ema,
        h_cond,
        h_marg,
    };
    Ok((values, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::LOG_ZERO;
    use alloc::vec;

    /// Matrix whose row for sample `(i, k)` is `f(i, j)`.
    fn matrix(p: usize, g: usize, len: usize, f: impl Fn(usize, usize) -> f64) -> ScoreMatrix {
        let mut scores = Vec::new();
        for i in 0..p {
            for _ in 0..g {
                scores.extend((0..p).map(|j| f(i, j)));
            }
        }
        ScoreMatrix::new(p, g, scores, vec![len; p * g]).unwrap()
    }

    #[test]
    fn identical_rows_give_matched_equal_marginal() {
        let m = matrix(4, 3, 2, |_, _| -1.7);
        let (a, b) = matched_marginal(&m);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(mi_est(&a, &b).abs() < 1e-15);
        assert!(mi_seq_est(&m).abs() < 1e-15);
    }

    #[test]
    fn disjoint_one_hot_closed_form() {
        let m = matrix(4, 2, 1, |i, j| if i == j { 0.0 } else { LOG_ZERO });
        let (a, b) = matched_marginal(&m);
        assert!(a.iter().all(|&x| x == 0.0));
        assert!(b.iter().all(|&x| (x + 4f64.ln()).abs() < 1e-12));
        assert!((mi_est(&a, &b) - 4f64.ln()).abs() < 1e-12);
        assert!((mi_seq_est(&m) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(retrieval_acc(&m, 0), 1.0);
        assert_eq!(recall_at_k(&m, 1, 0).unwrap(), 1.0);
    }

    #[test]
    fn two_prompt_mixture_by_hand() {
        let m = matrix(2, 1, 1, |i, j| if i == j { -1.0 } else { -3.0 });
        let (_, b) = matched_marginal(&m);
        let expected = (0.5 * ((-1f64).exp() + (-3f64).exp())).ln();
        assert!((b[0] - expected).abs() < 1e-14);
        assert!((b[0] + 1.5662).abs() < 1e-4);
    }

    #[test]
    fn recall_bounds_and_monotonicity() {
        let m = matrix(8, 4, 1, |i, j| -(((i * 7 + j * 3) % 5) as f64));
        assert!(recall_at_k(&m, 9, 1).is_err());
        assert!(recall_at_k(&m, 0, 1).is_err());
        assert_eq!(recall_at_k(&m, 8, 1).unwrap(), 1.0);
        let mut prev = 0.0;
        for k in 1..=8 {
            let r = recall_at_k(&m, k, 1).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn ema_recurrence() {
        let s = EmaState {
            sigma_ema: 1.0,
            alpha: 0.9,
            epsilon: 1e-3,
            initialized: true,
        };
        assert!((s.update(2.0).sigma_ema - 1.1).abs() < 1e-15);
        let first = EmaState::default().update(2.0);
        assert_eq!(first.sigma_ema, 2.0);
    }

    #[test]
    fn zscores_vanish_without_gap_and_stay_finite_at_zero_spread() {
        let matched = vec![-1.0, -2.0, -3.0];
        let (z, _) = mi_zscore_ema(&matched, &matched, EmaState::default()).unwrap();
        assert_eq!(z, 0.0);
        assert_eq!(mi_zscore(&matched, &matched, 1e-3), 0.0);

        let marginal = vec![-2.0; 3];
        let z = mi_zscore(&[-1.0; 3], &marginal, 1e-3);
        assert!((z - 1.0 / 1e-3).abs() < 1e-9);
        let (z, s) = mi_zscore_ema(&[-1.0; 3], &marginal, EmaState::default()).unwrap();
        assert_eq!(s.sigma_ema, 0.0);
        assert!(z.is_finite());
    }

    #[test]
    fn deterministic_trace_has_zero_conditional_entropy() {
        let (h, _) = proxy_entropies(&[0.0, 0.0], &[-0.5, -0.2]);
        assert_eq!(h, 0.0);
    }
}
