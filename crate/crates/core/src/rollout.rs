//! Grouped rollout batches and reward-variance statistics.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::envs::Env;
use crate::error::{config, domain, Result};
use crate::policy::{sample_episode, PolicyParams, PolicyTables, SampleKey, Trajectory};
use crate::rng::{stream, Purpose};

/// Variances below this count as zero.
pub const ZERO_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub prompt_id: usize,
    pub trajectories: Vec<Trajectory>,
    pub rv: f64,
    pub mean_return: f64,
}

impl TrajectoryGroup {
    /// Builds a group and its return statistics. Groups of one trajectory get `rv = 0`.
    pub fn new(prompt_id: usize, trajectories: Vec<Trajectory>) -> Self {
        let returns = returns_of(&trajectories);
        let mean_return = crate::math::mean(&returns);
        let rv = reward_variance(&returns).unwrap_or(0.0);
        Self {
            prompt_id,
            trajectories,
            rv,
            mean_return,
        }
    }

    pub fn returns(&self) -> Vec<f64> {
        returns_of(&self.trajectories)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

fn returns_of(trajectories: &[Trajectory]) -> Vec<f64> {
    trajectories.iter().map(|t| t.episode_return).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub iteration: usize,
    pub group_size: usize,
    pub groups: Vec<TrajectoryGroup>,
}

impl RolloutBatch {
    pub fn new(iteration: usize, groups: Vec<TrajectoryGroup>) -> Result<Self> {
        if groups.len() < 2 {
            return Err(domain("a batch needs at least 2 prompt groups"));
        }
        let group_size = groups[0].len();
        if groups.iter().any(|g| g.len() != group_size) || group_size == 0 {
            return Err(domain("all groups in a batch must share one nonzero group size"));
        }
        Ok(Self {
            iteration,
            group_size,
            groups,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.groups.len()
    }

    pub fn num_trajectories(&self) -> usize {
        self.groups.len() * self.group_size
    }

    pub fn prompt_ids(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.prompt_id).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.rv).collect()
    }

    pub fn mean_return(&self) -> f64 {
        crate::math::mean(&self.groups.iter().map(|g| g.mean_return).collect::<Vec<_>>())
    }
}

/// Unbiased sample variance (`G - 1` denominator). Needs at least two returns.
pub fn reward_variance(returns: &[f64]) -> Result<f64> {
    let g = returns.len();
    if g < 2 {
        return Err(domain(format!("reward variance needs G >= 2 returns, got {g}")));
    }
    let mean = returns.iter().sum::<f64>() / g as f64;
    let ss: f64 = returns.iter().map(|r| (r - mean) * (r - mean)).sum();
    Ok(ss / (g - 1) as f64)
}

/// Prompts used in one iteration: the whole prompt set when `batch_prompts`
/// covers it, otherwise a seeded sample without replacement, sorted.
pub fn select_prompts(num_env_prompts: usize, batch_prompts: usize, seed: u64, iteration: usize) -> Result<Vec<usize>> {
    if batch_prompts < 2 || batch_prompts > num_env_prompts {
        return Err(config(format!(
            "batch prompt count {batch_prompts} must lie in 2..={num_env_prompts}"
        )));
    }
    if batch_prompts == num_env_prompts {
        return Ok((0..num_env_prompts).collect());
    }
    let mut s = stream(seed, Purpose::PromptPick, &[iteration as u64]);
    let mut ids = rand::seq::index::sample(&mut s, num_env_prompts, batch_prompts).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Samples `group_size` trajectories for each prompt in `prompts`.
pub fn collect_groups(
    tables: &PolicyTables,
    env: &Env,
    prompts: &[usize],
    group_size: usize,
    seed: u64,
    iteration: usize,
) -> Result<Vec<TrajectoryGroup>> {
    let one = |&prompt: &usize| -> Result<TrajectoryGroup> {
        let trajectories = (0..group_size)
            .map(|k| sample_episode(tables, env, prompt, SampleKey::train(seed, iteration, k), true).map(|(t, _)| t))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrajectoryGroup::new(prompt, trajectories))
    };
    #[cfg(feature = "std")]
    {
        use rayon::prelude::*;
        prompts.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "std"))]
    {
        prompts.iter().map(one).collect()
    }
}

/// Collects one `P × G` batch. Groups are ordered by prompt id.
pub fn collect_batch(
    params: &PolicyParams,
    env: &Env,
    num_prompts: usize,
    group_size: usize,
    seed: u64,
    iteration: usize,
) -> Result<RolloutBatch> {
    if group_size < 2 {
        return Err(config("group size G must be at least 2"));
    }
    if env.num_prompts() != params.spec.num_prompts {
        return Err(config("environment and policy disagree on the prompt count"));
    }
    let prompts = select_prompts(env.num_prompts(), num_prompts, seed, iteration)?;
    let groups = collect_groups(&params.tables(), env, &prompts, group_size, seed, iteration)?;
    RolloutBatch::new(iteration, groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RvStats {
    pub mean: f64,
    pub std: f64,
    pub var: f64,
    pub min: f64,
    pub max: f64,
    /// `std / mean`; `None` when the mean variance is not positive.
    pub std_over_mean: Option<f64>,
    pub zero_variance_count: usize,
}

/// Summary of per-group reward variances. Spread is the population spread
/// across groups.
pub fn rv_statistics(variances: &[f64]) -> RvStats {
    let mean = crate::math::mean(variances);
    let var = crate::math::population_variance(variances);
    let std = crate::math::sqrt(var);
    let min = variances.iter().copied().fold(f64::INFINITY, f64::min);
    let max = variances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    RvStats {
        mean,
        std,
        var,
        min,
        max,
        std_over_mean: (mean > 0.0).then(|| std / mean),
        zero_variance_count: variances.iter().filter(|&&v| v < ZERO_VARIANCE).count(),
    }
}

pub fn batch_rv_statistics(batch: &RolloutBatch) -> RvStats {
    rv_statistics(&batch.variances())
}
