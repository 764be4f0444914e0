//! Synthetic environments with prompt-dependent reward structure.

use alloc::vec::Vec;
use alloc::format;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::rng::Stream;

/// One-step task: each prompt has a target action.
///
/// The last action index is reserved as the "invalid" action and earns the
/// format penalty. Actions one step away from the target on the ring of valid
/// actions earn the partial reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualTargetEnv {
    pub targets: Vec<usize>,
    pub num_actions: usize,
    pub partial_reward: f64,
    pub reward_noise_sigma: f64,
    pub format_penalty: f64,
}

impl ContextualTargetEnv {
    pub fn new(targets: Vec<usize>, num_actions: usize) -> Result<Self> {
        let env = Self {
            targets,
            num_actions,
            partial_reward: 0.1,
            reward_noise_sigma: 0.0,
            format_penalty: -0.1,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_actions < 3 {
            return Err(config("contextual target needs at least 3 actions (2 valid + 1 reserved)"));
        }
        if self.targets.len() < 2 {
            return Err(config("contextual target needs at least 2 prompts"));
        }
        if let Some((i, &t)) = self
            .targets
            .iter()
            .enumerate()
            .find(|(_, &t)| t >= self.invalid_action())
        {
            return Err(config(format!(
                "target {t} of prompt {i} is not a valid action (valid actions are 0..{})",
                self.invalid_action()
            )));
        }
        if !(0.0..=1.0).contains(&self.partial_reward) {
            return Err(config("env.partial_reward must lie in [0, 1]"));
        }
        if !(self.reward_noise_sigma >= 0.0) {
            return Err(config("env.reward_noise_sigma must be nonnegative"));
        }
        Ok(())
    }

    pub fn invalid_action(&self) -> usize {
        self.num_actions - 1
    }

    /// Noiseless reward; a pure function of `(prompt, action)`.
    pub fn reward(&self, prompt: usize, action: usize) -> f64 {
        if action == self.invalid_action() {
            return self.format_penalty;
        }
        let target = self.targets[prompt];
        let ring = self.num_actions - 1;
        let dist = (action + ring - target) % ring;
        if dist == 0 {
            1.0
        } else if dist == 1 || dist == ring - 1 {
            self.partial_reward
        } else {
            0.0
        }
    }
}

/// Moves on the grid, in FrozenLake order.
pub const LEFT: usize = 0;
pub const DOWN: usize = 1;
pub const RIGHT: usize = 2;
pub const UP: usize = 3;

/// Small slippery grid. Each start cell is a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlipGridEnv {
    pub grid_size: usize,
    pub slip_prob: f64,
    pub goal: usize,
    pub holes: Vec<usize>,
    pub starts: Vec<usize>,
    pub max_turns: usize,
    pub reward_noise_sigma: f64,
}

/// Where the holes of a slip grid sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridLayout {
    /// The classic FrozenLake 4x4 pattern, stretched for other sizes.
    FrozenLake,
    /// Holes in the top-right and bottom-left corners only, so every cell
    /// off the first row and column has a hole-free down/right route.
    Corners,
}

impl GridLayout {
    pub fn name(self) -> &'static str {
        match self {
            GridLayout::FrozenLake => "frozen_lake",
            GridLayout::Corners => "corners",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "frozen_lake" => Some(GridLayout::FrozenLake),
            "corners" => Some(GridLayout::Corners),
            _ => None,
        }
    }
}

impl SlipGridEnv {
    /// FrozenLake layout with the goal in the bottom-right corner. Every
    /// remaining cell is a start cell.
    pub fn new(grid_size: usize, slip_prob: f64, max_turns: usize) -> Result<Self> {
        Self::with_layout(grid_size, slip_prob, max_turns, GridLayout::FrozenLake)
    }

    pub fn with_layout(grid_size: usize, slip_prob: f64, max_turns: usize, layout: GridLayout) -> Result<Self> {
        if grid_size < 2 {
            return Err(config("env.grid_size must be at least 2"));
        }
        let n = grid_size;
        let cell = |r: usize, c: usize| r * n + c;
        let goal = cell(n - 1, n - 1);
        let mut holes: Vec<usize> = Vec::new();
        if n >= 3 {
            let pattern: &[usize] = match layout {
                GridLayout::FrozenLake => &[cell(1, 1), cell(1, n - 1), cell(n - 2, n - 1), cell(n - 1, 0)],
                GridLayout::Corners => &[cell(0, n - 1), cell(n - 1, 0)],
            };
            for &h in pattern {
                if h != goal && !holes.contains(&h) {
                    holes.push(h);
                }
            }
        }
        holes.sort_unstable();
        let starts = (0..n * n)
            .filter(|c| *c != goal && !holes.contains(c))
            .collect();
        let env = Self {
            grid_size,
            slip_prob,
            goal,
            holes,
            starts,
            max_turns,
            reward_noise_sigma: 0.0,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return Err(config("env.slip_prob must lie in [0, 1]"));
        }
        if self.max_turns == 0 {
            return Err(config("env.max_turns must be positive"));
        }
        if self.starts.len() < 2 {
            return Err(config("slip grid needs at least 2 start cells"));
        }
        if !(self.reward_noise_sigma >= 0.0) {
            return Err(config("env.reward_noise_sigma must be nonnegative"));
        }
        Ok(())
    }

    /// Deterministic move with wall clamping.
    pub fn shift(&self, cell: usize, direction: usize) -> usize {
        let n = self.grid_size;
        let (r, c) = (cell / n, cell % n);
        let (r, c) = match direction {
            LEFT => (r, c.saturating_sub(1)),
            DOWN => ((r + 1).min(n - 1), c),
            RIGHT => (r, (c + 1).min(n - 1)),
            _ => (r.saturating_sub(1), c),
        };
        r * n + c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Env {
    ContextualTarget(ContextualTargetEnv),
    SlipGrid(SlipGridEnv),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvState {
    pub prompt: usize,
    pub cell: usize,
    pub turn: usize,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

impl Env {
    pub fn num_prompts(&self) -> usize {
        match self {
            Env::ContextualTarget(e) => e.targets.len(),
            Env::SlipGrid(e) => e.starts.len(),
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            Env::ContextualTarget(e) => e.num_actions,
            Env::SlipGrid(_) => 4,
        }
    }

    pub fn max_turns(&self) -> usize {
        match self {
            Env::ContextualTarget(_) => 1,
            Env::SlipGrid(e) => e.max_turns,
        }
    }

    pub fn reward_noise_sigma(&self) -> f64 {
        match self {
            Env::ContextualTarget(e) => e.reward_noise_sigma,
            Env::SlipGrid(e) => e.reward_noise_sigma,
        }
    }

    pub fn set_reward_noise_sigma(&mut self, sigma: f64) {
        match self {
            Env::ContextualTarget(e) => e.reward_noise_sigma = sigma,
            Env::SlipGrid(e) => e.reward_noise_sigma = sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Env::ContextualTarget(e) => e.validate(),
            Env::SlipGrid(e) => e.validate(),
        }
    }

    /// Noiseless episode return that counts as a success.
    pub fn success_threshold(&self) -> f64 {
        1.0
    }

    pub fn reset(&self, prompt: usize) -> Result<EnvState> {
        if prompt >= self.num_prompts() {
            return Err(Error::Index {
                what: "prompt",
                index: prompt,
                limit: self.num_prompts(),
            });
        }
        let cell = match self {
            Env::ContextualTarget(_) => 0,
            Env::SlipGrid(e) => e.starts[prompt],
        };
        Ok(EnvState {
            prompt,
            cell,
            turn: 0,
            done: false,
        })
    }

    /// Advances one turn and returns the noiseless reward.
    pub fn step(&self, state: &EnvState, action: usize, stream: &mut Stream) -> Result<Step> {
        if state.done {
            return Err(Error::Protocol(format!(
                "step called on a finished episode (prompt {}, turn {})",
                state.prompt, state.turn
            )));
        }
        if action >= self.num_actions() {
            return Err(Error::Index {
                what: "action",
                index: action,
                limit: self.num_actions(),
            });
        }
        match self {
            Env::ContextualTarget(e) => {
                let reward = e.reward(state.prompt, action);
                let next = EnvState {
                    turn: state.turn + 1,
                    done: true,
                    ..*state
                };
                Ok(Step {
                    state: next,
                    reward,
                    done: true,
                })
            }
            Env::SlipGrid(e) => {
                let u: f64 = stream.random();
                let other: usize = stream.random_range(0..3);
                let direction = if u < e.slip_prob {
                    // the three non-intended directions, in index order
                    if other >= action {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    action
                };
                let cell = e.shift(state.cell, direction);
                let turn = state.turn + 1;
                let (reward, done) = if cell == e.goal {
                    (1.0, true)
                } else if e.holes.contains(&cell) {
                    (0.0, true)
                } else {
                    (0.0, turn >= e.max_turns)
                };
                Ok(Step {
                    state: EnvState {
                        prompt: state.prompt,
                        cell,
                        turn,
                        done,
                    },
                    reward,
                    done,
                })
            }
        }
    }
}

/// Adds zero-mean Gaussian noise with standard deviation `sigma`.
pub fn inject_reward_noise(reward: f64, sigma: f64, stream: &mut Stream) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(domain(format!("reward noise sigma must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(reward);
    }
    let z: f64 = stream.sample(StandardNormal);
    Ok(reward + sigma * z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn target_env() -> Env {
        Env::ContextualTarget(ContextualTargetEnv::new(alloc::vec![0, 2, 4], 6).unwrap())
    }

    #[test]
    fn target_action_earns_full_reward() {
        let env = target_env();
        let mut s = stream(0, Purpose::Transition, &[]);
        let st = env.reset(1).unwrap();
        let step = env.step(&st, 2, &mut s).unwrap();
        assert_eq!(step.reward, 1.0);
        assert!(step.done);
    }

    #[test]
    fn contextual_reward_levels() {
        let Env::ContextualTarget(e) = target_env() else { unreachable!() };
        // ring of 5 valid actions, target 0: neighbours are 1 and 4
        assert_eq!(e.reward(0, 0), 1.0);
        assert_eq!(e.reward(0, 1), 0.1);
        assert_eq!(e.reward(0, 4), 0.1);
        assert_eq!(e.reward(0, 2), 0.0);
        assert_eq!(e.reward(0, 5), -0.1);
    }

    #[test]
    fn step_after_done_is_protocol_error() {
        let env = target_env();
        let mut s = stream(0, Purpose::Transition, &[]);
        let st = env.reset(0).unwrap();
        let step = env.step(&st, 0, &mut s).unwrap();
        assert!(matches!(env.step(&step.state, 0, &mut s), Err(Error::Protocol(_))));
    }

    #[test]
    fn invalid_prompt_and_targets_rejected() {
        assert!(matches!(target_env().reset(3), Err(Error::Index { .. })));
        assert!(ContextualTargetEnv::new(alloc::vec![0, 5], 6).is_err());
    }

    #[test]
    fn deterministic_grid_reaches_goal() {
        let env = SlipGridEnv::new(4, 0.0, 8).unwrap();
        let start = env.starts.iter().position(|&c| c == 14).unwrap();
        let env = Env::SlipGrid(env);
        let mut s = stream(0, Purpose::Transition, &[]);
        let st = env.reset(start).unwrap();
        let step = env.step(&st, RIGHT, &mut s).unwrap();
        assert_eq!(step.reward, 1.0);
        assert!(step.done);
    }

    #[test]
    fn default_four_by_four_matches_frozen_lake() {
        let env = SlipGridEnv::new(4, 0.02, 8).unwrap();
        assert_eq!(env.holes, alloc::vec![5, 7, 11, 12]);
        assert_eq!(env.goal, 15);
        assert_eq!(env.starts.len(), 11);
        let corners = SlipGridEnv::with_layout(4, 0.0, 8, GridLayout::Corners).unwrap();
        assert_eq!(corners.holes, alloc::vec![3, 12]);
        assert_eq!(corners.starts.len(), 13);
    }

    #[test]
    fn full_slip_never_moves_as_intended() {
        let grid = SlipGridEnv::new(4, 1.0, 8).unwrap();
        // cell 6 = (1,2): every direction leads to a distinct neighbour
        let start = grid.starts.iter().position(|&c| c == 6).unwrap();
        let env = Env::SlipGrid(grid.clone());
        let st = env.reset(start).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 4];
        for t in 0..n {
            let mut s = stream(3, Purpose::Transition, &[t]);
            let step = env.step(&st, UP, &mut s).unwrap();
            let dir = (0..4).find(|&d| grid.shift(6, d) == step.state.cell).unwrap();
            counts[dir] += 1;
        }
        assert_eq!(counts[UP], 0);
        for d in [LEFT, DOWN, RIGHT] {
            let f = counts[d] as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.01, "direction {d}: {f}");
        }
    }

    #[test]
    fn zero_slip_is_deterministic() {
        let env = Env::SlipGrid(SlipGridEnv::new(4, 0.0, 8).unwrap());
        let actions = [DOWN, DOWN, RIGHT, RIGHT, DOWN, RIGHT];
        let run = |seed: u64| {
            let mut st = env.reset(0).unwrap();
            let mut ret = 0.0;
            for (t, &a) in actions.iter().enumerate() {
                if st.done {
                    break;
                }
                let mut s = stream(seed, Purpose::Transition, &[t as u64]);
                let step = env.step(&st, a, &mut s).unwrap();
                ret += step.reward;
                st = step.state;
            }
            (ret, st.cell)
        };
        assert_eq!(run(1), run(2));
        assert_eq!(run(1), (1.0, 15));
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let mut s = stream(0, Purpose::RewardNoise, &[]);
        assert_eq!(inject_reward_noise(0.7, 0.0, &mut s).unwrap(), 0.7);
        assert!(inject_reward_noise(0.7, -1.0, &mut s).is_err());
    }

    #[test]
    fn noise_moments() {
        let n = 1_000_000u64;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for i in 0..n {
            let mut s = stream(11, Purpose::RewardNoise, &[i]);
            let e = inject_reward_noise(0.0, 0.5, &mut s).unwrap();
            sum += e;
            sq += e * e;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!((var - 0.25).abs() < 0.005, "var {var}");
    }
}
