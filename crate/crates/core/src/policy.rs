//! Tabular softmax policy: prompt → reasoning tokens → action.
//!
//! Reasoning tokens are independent across positions given the prompt, the
//! action depends on the prompt only, and every turn of a multi-turn episode
//! reuses the same per-prompt tables. The parameter vector is flat:
//! `[prompt][position][token]` reasoning logits followed by
//! `[prompt][action]` action logits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::{inject_reward_noise, Env};
use crate::error::{config, domain, Error, Result};
use crate::math::{self, clamp_log, log_softmax_into};
use crate::rng::{stream, Purpose};

/// Largest `V^L` any exact-distribution routine will enumerate.
pub const ENUMERATION_LIMIT: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub num_prompts: usize,
    pub reasoning_len: usize,
    pub vocab_size: usize,
    pub num_actions: usize,
    pub num_turns: usize,
}

impl PolicySpec {
    pub fn new(
        num_prompts: usize,
        reasoning_len: usize,
        vocab_size: usize,
        num_actions: usize,
        num_turns: usize,
    ) -> Result<Self> {
        let spec = Self {
            num_prompts,
            reasoning_len,
            vocab_size,
            num_actions,
            num_turns,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Policy shaped for `env` with the given reasoning table sizes.
    pub fn for_env(env: &Env, reasoning_len: usize, vocab_size: usize) -> Result<Self> {
        Self::new(
            env.num_prompts(),
            reasoning_len,
            vocab_size,
            env.num_actions(),
            env.max_turns(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_prompts < 2 {
            return Err(config("policy needs at least 2 prompts"));
        }
        if self.reasoning_len == 0 || self.vocab_size == 0 || self.num_actions == 0 || self.num_turns == 0 {
            return Err(config("policy sizes must be positive"));
        }
        Ok(())
    }

    pub fn reasoning_params(&self) -> usize {
        self.num_prompts * self.reasoning_len * self.vocab_size
    }

    pub fn num_params(&self) -> usize {
        self.reasoning_params() + self.num_prompts * self.num_actions
    }

    #[inline]
    pub fn reasoning_offset(&self, prompt: usize, position: usize) -> usize {
        (prompt * self.reasoning_len + position) * self.vocab_size
    }

    #[inline]
    pub fn action_offset(&self, prompt: usize) -> usize {
        self.reasoning_params() + prompt * self.num_actions
    }

    /// `V^L`, or a capacity error when it exceeds [`ENUMERATION_LIMIT`].
    pub fn num_sequences(&self) -> Result<usize> {
        let size = (self.vocab_size as u128).checked_pow(self.reasoning_len as u32);
        match size {
            Some(s) if s <= ENUMERATION_LIMIT as u128 => Ok(s as usize),
            _ => Err(Error::Capacity {
                size: size.unwrap_or(u128::MAX),
                limit: ENUMERATION_LIMIT,
            }),
        }
    }

    /// Token sequence for an enumeration index; position 0 is most significant.
    pub fn decode_sequence(&self, mut index: usize) -> Vec<usize> {
        let mut tokens = vec![0; self.reasoning_len];
        for slot in tokens.iter_mut().rev() {
            *slot = index % self.vocab_size;
            index /= self.vocab_size;
        }
        tokens
    }

    pub fn check_prompt(&self, prompt: usize) -> Result<()> {
        if prompt >= self.num_prompts {
            return Err(Error::Index {
                what: "prompt",
                index: prompt,
                limit: self.num_prompts,
            });
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &PolicySpec) -> Result<()> {
        if self != other {
            return Err(config(format!("policy spec mismatch: {self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// The trainable logits θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: PolicySpec,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    /// All-zero logits: the uniform policy.
    pub fn uniform(spec: PolicySpec) -> Self {
        Self {
            spec,
            theta: vec![0.0; spec.num_params()],
        }
    }

    pub fn from_parts(spec: PolicySpec, reasoning: Vec<f64>, action: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if reasoning.len() != spec.reasoning_params() || action.len() != spec.num_prompts * spec.num_actions {
            return Err(config("logit array sizes do not match the policy spec"));
        }
        let mut theta = reasoning;
        theta.extend(action);
        let params = Self { spec, theta };
        params.check_finite()?;
        Ok(params)
    }

    /// Gaussian logits with independent scales for the reasoning and action heads.
    pub fn random(spec: PolicySpec, reasoning_scale: f64, action_scale: f64, seed: u64) -> Self {
        let mut s = stream(seed, Purpose::Init, &[]);
        let split = spec.reasoning_params();
        let theta = (0..spec.num_params())
            .map(|i| {
                let z: f64 = s.sample(StandardNormal);
                z * if i < split { reasoning_scale } else { action_scale }
            })
            .collect();
        Self { spec, theta }
    }

    pub fn reasoning_logits(&self, prompt: usize, position: usize) -> &[f64] {
        let off = self.spec.reasoning_offset(prompt, position);
        &self.theta[off..off + self.spec.vocab_size]
    }

    pub fn reasoning_logits_mut(&mut self, prompt: usize, position: usize) -> &mut [f64] {
        let off = self.spec.reasoning_offset(prompt, position);
        &mut self.theta[off..off + self.spec.vocab_size]
    }

    pub fn action_logits(&self, prompt: usize) -> &[f64] {
        let off = self.spec.action_offset(prompt);
        &self.theta[off..off + self.spec.num_actions]
    }

    pub fn action_logits_mut(&mut self, prompt: usize) -> &mut [f64] {
        let off = self.spec.action_offset(prompt);
        &mut self.theta[off..off + self.spec.num_actions]
    }

    pub fn reasoning_block(&self) -> &[f64] {
        &self.theta[..self.spec.reasoning_params()]
    }

    pub fn action_block(&self) -> &[f64] {
        &self.theta[self.spec.reasoning_params()..]
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.theta.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(domain("policy logits must be finite"))
        }
    }

    /// Per-row softmax and log-softmax, laid out like `theta`.
    pub fn tables(&self) -> PolicyTables {
        PolicyTables::new(self, 1.0)
    }
}

/// Cached probabilities and log-probabilities for one parameter snapshot.
#[derive(Debug, Clone)]
pub struct PolicyTables {
    pub spec: PolicySpec,
    pub probs: Vec<f64>,
    pub logp: Vec<f64>,
}

impl PolicyTables {
    pub fn new(params: &PolicyParams, temperature: f64) -> Self {
        let spec = params.spec;
        let mut logp = vec![0.0; spec.num_params()];
        let rows = (0..spec.num_prompts * spec.reasoning_len)
            .map(|r| (r * spec.vocab_size, spec.vocab_size))
            .chain((0..spec.num_prompts).map(|p| (spec.action_offset(p), spec.num_actions)));
        for (off, len) in rows {
            log_softmax_into(&params.theta[off..off + len], temperature, &mut logp[off..off + len]);
        }
        let probs = logp.iter().map(|&l| math::exp(l)).collect();
        Self { spec, probs, logp }
    }

    pub fn token_probs(&self, prompt: usize, position: usize) -> &[f64] {
        let off = self.spec.reasoning_offset(prompt, position);
        &self.probs[off..off + self.spec.vocab_size]
    }

    pub fn action_probs(&self, prompt: usize) -> &[f64] {
        let off = self.spec.action_offset(prompt);
        &self.probs[off..off + self.spec.num_actions]
    }

    #[inline]
    pub fn token_logp(&self, prompt: usize, position: usize, token: usize) -> f64 {
        clamp_log(self.logp[self.spec.reasoning_offset(prompt, position) + token])
    }

    #[inline]
    pub fn action_logp(&self, prompt: usize, action: usize) -> f64 {
        clamp_log(self.logp[self.spec.action_offset(prompt) + action])
    }

    /// Teacher-forced log-likelihood of `tokens` under `prompt`, clamped at the sentinel.
    /// Callers guarantee bounds.
    pub fn sequence_logp(&self, prompt: usize, tokens: &[usize]) -> f64 {
        let l = self.spec.reasoning_len;
        let total: f64 = tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| self.token_logp(prompt, t % l, tok))
            .sum();
        clamp_log(total)
    }

    /// Adds `weight · ∇θ log π(τ)` into `out`.
    pub fn accumulate_score(&self, traj: &Trajectory, weight: f64, out: &mut [f64]) {
        let spec = &self.spec;
        let p = traj.prompt_id;
        for turn in &traj.turns {
            for (pos, &tok) in turn.tokens.iter().enumerate() {
                let off = spec.reasoning_offset(p, pos);
                let probs = &self.probs[off..off + spec.vocab_size];
                for (j, &pj) in probs.iter().enumerate() {
                    out[off + j] -= weight * pj;
                }
                out[off + tok] += weight;
            }
            let off = spec.action_offset(p);
            for (j, &pj) in self.action_probs(p).iter().enumerate() {
                out[off + j] -= weight * pj;
            }
            out[off + turn.action] += weight;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub tokens: Vec<usize>,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: usize,
    pub turns: Vec<Turn>,
    pub episode_return: f64,
}

impl Trajectory {
    pub fn new(prompt_id: usize, turns: Vec<Turn>) -> Self {
        let episode_return = turns.iter().map(|t| t.reward).sum();
        Self {
            prompt_id,
            turns,
            episode_return,
        }
    }

    /// All reasoning tokens of the episode, turn after turn.
    pub fn reasoning_tokens(&self) -> Vec<usize> {
        self.turns.iter().flat_map(|t| t.tokens.iter().copied()).collect()
    }

    pub fn validate(&self, spec: &PolicySpec) -> Result<()> {
        spec.check_prompt(self.prompt_id)?;
        if self.turns.is_empty() || self.turns.len() > spec.num_turns {
            return Err(domain(format!(
                "trajectory has {} turns, expected 1..={}",
                self.turns.len(),
                spec.num_turns
            )));
        }
        for turn in &self.turns {
            if turn.tokens.len() != spec.reasoning_len {
                return Err(domain("turn token count differs from the reasoning length"));
            }
            if let Some(&tok) = turn.tokens.iter().find(|&&t| t >= spec.vocab_size) {
                return Err(Error::Index {
                    what: "token",
                    index: tok,
                    limit: spec.vocab_size,
                });
            }
            if turn.action >= spec.num_actions {
                return Err(Error::Index {
                    what: "action",
                    index: turn.action,
                    limit: spec.num_actions,
                });
            }
        }
        Ok(())
    }
}

/// Stream coordinates for one sampled episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleKey {
    pub seed: u64,
    /// 0 for training rollouts, 1 for evaluation episodes.
    pub lane: u64,
    pub iteration: u64,
    pub sample: u64,
}

impl SampleKey {
    pub fn train(seed: u64, iteration: usize, sample: usize) -> Self {
        Self {
            seed,
            lane: 0,
            iteration: iteration as u64,
            sample: sample as u64,
        }
    }
}

fn draw_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = j;
            if u < cum {
                return j;
            }
        }
    }
    last
}

/// Episode sampled from cached tables.
///
/// Returns the trajectory (rewards include noise when `add_noise`) and the
/// noiseless return.
pub fn sample_episode(
    tables: &PolicyTables,
    env: &Env,
    prompt_id: usize,
    key: SampleKey,
    add_noise: bool,
) -> Result<(Trajectory, f64)> {
    let spec = &tables.spec;
    spec.check_prompt(prompt_id)?;
    let mut state = env.reset(prompt_id)?;
    let mut turns = Vec::with_capacity(spec.num_turns);
    let mut clean = 0.0;
    let p = prompt_id as u64;
    for t in 0..spec.num_turns {
        if state.done {
            break;
        }
        let coords = |slot: u64| [key.lane, key.iteration, p, key.sample, t as u64, slot];
        let tokens: Vec<usize> = (0..spec.reasoning_len)
            .map(|pos| {
                let mut s = stream(key.seed, Purpose::Token, &coords(pos as u64));
                draw_index(tables.token_probs(prompt_id, pos), &mut s)
            })
            .collect();
        let mut s = stream(key.seed, Purpose::Action, &coords(0));
        let action = draw_index(tables.action_probs(prompt_id), &mut s);
        let mut s = stream(key.seed, Purpose::Transition, &coords(0));
        let step = env.step(&state, action, &mut s)?;
        clean += step.reward;
        let reward = if add_noise {
            let mut s = stream(key.seed, Purpose::RewardNoise, &coords(0));
            inject_reward_noise(step.reward, env.reward_noise_sigma(), &mut s)?
        } else {
            step.reward
        };
        turns.push(Turn {
            tokens,
            action,
            reward,
        });
        state = step.state;
    }
    Ok((Trajectory::new(prompt_id, turns), clean))
}

/// One training rollout at temperature 1 with reward noise.
pub fn sample_trajectory(params: &PolicyParams, env: &Env, prompt_id: usize, key: SampleKey) -> Result<Trajectory> {
    params.spec.check_prompt(prompt_id)?;
    sample_episode(&params.tables(), env, prompt_id, key, true).map(|(t, _)| t)
}

/// Per-token and total teacher-forced log-probabilities of `tokens` under `prompt_id`.
pub fn logprob_reasoning(params: &PolicyParams, prompt_id: usize, tokens: &[usize]) -> Result<(Vec<f64>, f64)> {
    let spec = &params.spec;
    spec.check_prompt(prompt_id)?;
    if tokens.is_empty() || !tokens.len().is_multiple_of(spec.reasoning_len) {
        return Err(domain(format!(
            "token count {} is not a positive multiple of the reasoning length {}",
            tokens.len(),
            spec.reasoning_len
        )));
    }
    if let Some(&tok) = tokens.iter().find(|&&t| t >= spec.vocab_size) {
        return Err(domain(format!("token {tok} outside vocabulary of size {}", spec.vocab_size)));
    }
    let mut row = vec![0.0; spec.vocab_size];
    let mut per_token = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        log_softmax_into(params.reasoning_logits(prompt_id, t % spec.reasoning_len), 1.0, &mut row);
        per_token.push(clamp_log(row[tok]));
    }
    let total = clamp_log(per_token.iter().sum());
    Ok((per_token, total))
}

/// `∇θ log π(τ | prompt)` as a dense vector.
pub fn score_function(params: &PolicyParams, trajectory: &Trajectory) -> Result<Vec<f64>> {
    trajectory.validate(&params.spec)?;
    let mut out = vec![0.0; params.spec.num_params()];
    params.tables().accumulate_score(trajectory, 1.0, &mut out);
    Ok(out)
}

/// Exact `π(z | prompt)` over all `V^L` reasoning sequences, in
/// [`PolicySpec::decode_sequence`] order.
pub fn conditional_distribution(params: &PolicyParams, prompt_id: usize) -> Result<Vec<f64>> {
    let spec = &params.spec;
    spec.check_prompt(prompt_id)?;
    let n = spec.num_sequences()?;
    let rows: Vec<Vec<f64>> = (0..spec.reasoning_len)
        .map(|pos| math::softmax(params.reasoning_logits(prompt_id, pos)))
        .collect();
    Ok((0..n)
        .map(|idx| {
            spec.decode_sequence(idx)
                .iter()
                .zip(&rows)
                .map(|(&tok, row)| row[tok])
                .product()
        })
        .collect())
}

/// Entropy of one categorical and its gradient with respect to the logits.
pub fn categorical_entropy(logits: &[f64]) -> (f64, Vec<f64>) {
    let mut logp = vec![0.0; logits.len()];
    log_softmax_into(logits, 1.0, &mut logp);
    let probs: Vec<f64> = logp.iter().map(|&l| math::exp(l)).collect();
    let h: f64 = -probs.iter().zip(&logp).map(|(&p, &l)| if p > 0.0 { p * l } else { 0.0 }).sum::<f64>();
    let grad = probs
        .iter()
        .zip(&logp)
        .map(|(&p, &l)| if p > 0.0 { -p * (l + h) } else { 0.0 })
        .collect();
    (h.max(0.0), grad)
}

/// `KL(softmax(logits) ‖ softmax(reference))` and its gradient with respect to `logits`.
pub fn categorical_kl(logits: &[f64], reference: &[f64]) -> (f64, Vec<f64>) {
    let mut logp = vec![0.0; logits.len()];
    let mut logr = vec![0.0; logits.len()];
    log_softmax_into(logits, 1.0, &mut logp);
    log_softmax_into(reference, 1.0, &mut logr);
    let probs: Vec<f64> = logp.iter().map(|&l| math::exp(l)).collect();
    let terms: Vec<f64> = logp.iter().zip(&logr).map(|(a, b)| a - b).collect();
    let kl: f64 = probs.iter().zip(&terms).map(|(&p, &d)| if p > 0.0 { p * d } else { 0.0 }).sum();
    let grad = probs
        .iter()
        .zip(&terms)
        .map(|(&p, &d)| if p > 0.0 { p * (d - kl) } else { 0.0 })
        .collect();
    (kl.max(0.0), grad)
}

/// Visits each categorical factor of one turn for `prompt`: reasoning
/// positions first, then the action head. Yields `(offset, len)`.
fn factors(spec: &PolicySpec, prompt: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..spec.reasoning_len)
        .map(move |pos| (spec.reasoning_offset(prompt, pos), spec.vocab_size))
        .chain(core::iter::once((spec.action_offset(prompt), spec.num_actions)))
}

/// KL of one turn's factorized distribution to the reference, with gradient.
pub fn kl_to_reference(params: &PolicyParams, reference: &PolicyParams, prompt_id: usize) -> Result<(f64, Vec<f64>)> {
    params.spec.check_compatible(&reference.spec)?;
    params.spec.check_prompt(prompt_id)?;
    let mut grad = vec![0.0; params.spec.num_params()];
    let mut value = 0.0;
    for (off, len) in factors(&params.spec, prompt_id) {
        let (kl, g) = categorical_kl(&params.theta[off..off + len], &reference.theta[off..off + len]);
        value += kl;
        grad[off..off + len].copy_from_slice(&g);
    }
    Ok((value, grad))
}

/// Entropy of one turn's factorized distribution (reasoning plus action), with gradient.
pub fn policy_entropy(params: &PolicyParams, prompt_id: usize) -> Result<(f64, Vec<f64>)> {
    params.spec.check_prompt(prompt_id)?;
    let mut grad = vec![0.0; params.spec.num_params()];
    let mut value = 0.0;
    for (off, len) in factors(&params.spec, prompt_id) {
        let (h, g) = categorical_entropy(&params.theta[off..off + len]);
        value += h;
        grad[off..off + len].copy_from_slice(&g);
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::ContextualTargetEnv;

    fn spec(v: usize, l: usize) -> PolicySpec {
        PolicySpec::new(2, l, v, 3, 1).unwrap()
    }

    #[test]
    fn one_hot_logits_sample_with_certainty() {
        let mut params = PolicyParams::uniform(spec(4, 2));
        params.reasoning_logits_mut(0, 0)[2] = 1e6;
        params.reasoning_logits_mut(0, 1)[1] = 1e6;
        params.action_logits_mut(0)[1] = 1e6;
        let env = Env::ContextualTarget(ContextualTargetEnv::new(vec![1, 0], 3).unwrap());
        for k in 0..50 {
            let t = sample_trajectory(&params, &env, 0, SampleKey::train(5, 0, k)).unwrap();
            assert_eq!(t.turns[0].tokens, vec![2, 1]);
            assert_eq!(t.turns[0].action, 1);
            assert_eq!(t.episode_return, 1.0);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let params = PolicyParams::random(spec(4, 3), 1.0, 1.0, 9);
        let env = Env::ContextualTarget(ContextualTargetEnv::new(vec![1, 0], 3).unwrap());
        let key = SampleKey::train(1, 4, 2);
        assert_eq!(
            sample_trajectory(&params, &env, 1, key).unwrap(),
            sample_trajectory(&params, &env, 1, key).unwrap()
        );
        assert!(matches!(sample_trajectory(&params, &env, 2, key), Err(Error::Index { .. })));
    }

    #[test]
    fn uniform_logprob_closed_form() {
        let params = PolicyParams::uniform(spec(4, 3));
        let (per, total) = logprob_reasoning(&params, 1, &[0, 3, 2]).unwrap();
        assert_eq!(per.len(), 3);
        assert!((total - 3.0 * (0.25f64).ln()).abs() < 1e-12);
        assert!((total + 4.1589).abs() < 1e-4);
    }

    #[test]
    fn deterministic_policy_own_sequence_has_zero_logprob() {
        let mut params = PolicyParams::uniform(spec(3, 2));
        params.reasoning_logits_mut(0, 0)[1] = 1e6;
        params.reasoning_logits_mut(0, 1)[2] = 1e6;
        let (_, total) = logprob_reasoning(&params, 0, &[1, 2]).unwrap();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn impossible_tokens_hit_the_sentinel() {
        let mut params = PolicyParams::uniform(spec(3, 1));
        params.reasoning_logits_mut(0, 0)[0] = 1e10;
        let (per, total) = logprob_reasoning(&params, 0, &[1]).unwrap();
        assert_eq!(per[0], math::LOG_ZERO);
        assert_eq!(total, math::LOG_ZERO);
    }

    #[test]
    fn logprob_rejects_out_of_vocabulary() {
        let params = PolicyParams::uniform(spec(3, 2));
        assert!(matches!(logprob_reasoning(&params, 0, &[0, 3]), Err(Error::Domain(_))));
        assert!(logprob_reasoning(&params, 0, &[0]).is_err());
    }

    #[test]
    fn uniform_binary_score_factor() {
        let params = PolicyParams::uniform(PolicySpec::new(2, 1, 2, 1, 1).unwrap());
        let traj = Trajectory::new(
            0,
            vec![Turn {
                tokens: vec![0],
                action: 0,
                reward: 0.0,
            }],
        );
        let s = score_function(&params, &traj).unwrap();
        assert_eq!(&s[0..2], &[0.5, -0.5]);
        // single-action head has zero score
        assert_eq!(s[params.spec.action_offset(0)], 0.0);
    }

    #[test]
    fn conditional_distribution_examples() {
        let params = PolicyParams::uniform(PolicySpec::new(2, 1, 2, 1, 1).unwrap());
        assert_eq!(conditional_distribution(&params, 0).unwrap(), vec![0.5, 0.5]);

        let mut params = PolicyParams::uniform(PolicySpec::new(2, 2, 2, 1, 1).unwrap());
        let logit = (0.8f64 / 0.2).ln();
        params.reasoning_logits_mut(0, 0)[0] = logit;
        params.reasoning_logits_mut(0, 1)[0] = logit;
        let dist = conditional_distribution(&params, 0).unwrap();
        assert!((dist[0] - 0.64).abs() < 1e-12);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_limit_is_enforced() {
        let params = PolicyParams::uniform(PolicySpec::new(2, 9, 4, 1, 1).unwrap());
        assert!(matches!(conditional_distribution(&params, 0), Err(Error::Capacity { .. })));
    }

    #[test]
    fn two_point_kl() {
        let p = [(0.9f64 / 0.1).ln(), 0.0];
        let (kl, _) = categorical_kl(&p, &[0.0, 0.0]);
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn kl_identity_and_mismatch() {
        let params = PolicyParams::random(spec(4, 2), 1.0, 1.0, 3);
        let (kl, g) = kl_to_reference(&params, &params, 1).unwrap();
        assert_eq!(kl, 0.0);
        assert!(g.iter().all(|&x| x.abs() < 1e-15));
        let other = PolicyParams::uniform(spec(5, 2));
        assert!(matches!(kl_to_reference(&params, &other, 0), Err(Error::Config(_))));
    }

    #[test]
    fn entropy_extremes() {
        let params = PolicyParams::uniform(PolicySpec::new(2, 1, 4, 1, 1).unwrap());
        let (h, _) = policy_entropy(&params, 0).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);

        let mut params = PolicyParams::uniform(PolicySpec::new(2, 2, 4, 3, 1).unwrap());
        params.reasoning_logits_mut(1, 0)[0] = 1e6;
        params.reasoning_logits_mut(1, 1)[3] = 1e6;
        params.action_logits_mut(1)[2] = 1e6;
        let (h, _) = policy_entropy(&params, 1).unwrap();
        assert_eq!(h, 0.0);
    }
}
