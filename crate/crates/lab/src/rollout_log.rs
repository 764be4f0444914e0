//! Rollout logs: one JSON object per trajectory per line.

use std::io::Write;
use std::path::Path;

use collapse_core::policy::{Trajectory, Turn};
use collapse_core::rollout::{RolloutBatch, TrajectoryGroup};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogLine {
    pub iter: usize,
    pub prompt: usize,
    pub k: usize,
    /// Reasoning tokens, one array per turn.
    pub tokens: Vec<Vec<usize>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub ret: f64,
}

pub fn to_lines(batch: &RolloutBatch) -> Vec<LogLine> {
    let mut out = Vec::with_capacity(batch.num_trajectories());
    for group in &batch.groups {
        for (k, t) in group.trajectories.iter().enumerate() {
            out.push(LogLine {
                iter: batch.iteration,
                prompt: group.prompt_id,
                k,
                tokens: t.turns.iter().map(|u| u.tokens.clone()).collect(),
                actions: t.turns.iter().map(|u| u.action).collect(),
                rewards: t.turns.iter().map(|u| u.reward).collect(),
                ret: t.episode_return,
            });
        }
    }
    out
}

pub fn write_rollout_log(batch: &RolloutBatch, mut w: impl Write) -> std::io::Result<()> {
    for line in to_lines(batch) {
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_rollout_log(batch: &RolloutBatch, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    write_rollout_log(batch, std::io::BufWriter::new(f)).map_err(|e| LabError::io(path, e))
}

/// Rebuilds a batch. Groups appear in first-seen prompt order and each
/// group's lines must run `k = 0, 1, …` in order.
pub fn parse_rollout_log(text: &str, origin: &str) -> Result<RolloutBatch> {
    let err = |line: usize, msg: String| LabError::Parse {
        origin: origin.into(),
        line,
        msg,
    };
    let mut iteration = None;
    let mut groups: Vec<(usize, Vec<Trajectory>)> = Vec::new();
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        last_line = n;
        if raw.trim().is_empty() {
            return Err(err(n, "blank line".into()));
        }
        let l: LogLine = serde_json::from_str(raw).map_err(|e| err(n, e.to_string()))?;
        if *iteration.get_or_insert(l.iter) != l.iter {
            return Err(err(n, format!("iteration {} differs from the log's iteration {}", l.iter, iteration.unwrap())));
        }
        if l.tokens.len() != l.actions.len() || l.rewards.len() != l.actions.len() || l.actions.is_empty() {
            return Err(err(n, "tokens, actions and rewards must have one equal, nonzero length".into()));
        }
        let turns: Vec<Turn> = l
            .tokens
            .into_iter()
            .zip(&l.actions)
            .zip(&l.rewards)
            .map(|((tokens, &action), &reward)| Turn { tokens, action, reward })
            .collect();
        let t = Trajectory::new(l.prompt, turns);
        if t.episode_return.to_bits() != l.ret.to_bits() {
            return Err(err(n, format!("ret {} is not the sum of rewards {}", l.ret, t.episode_return)));
        }
        let slot = match groups.iter().position(|(p, _)| *p == l.prompt) {
            Some(s) if s + 1 == groups.len() => s,
            Some(_) => return Err(err(n, format!("prompt {} reappears after another prompt's group", l.prompt))),
            None => {
                groups.push((l.prompt, Vec::new()));
                groups.len() - 1
            }
        };
        let group = &mut groups[slot].1;
        if l.k != group.len() {
            return Err(err(n, format!("expected k = {}, found {}", group.len(), l.k)));
        }
        group.push(t);
    }
    let iteration = iteration.ok_or_else(|| LabError::Invalid(format!("{origin}: empty rollout log (a batch needs at least 2 prompts)")))?;
    let groups = groups
        .into_iter()
        .map(|(p, ts)| TrajectoryGroup::new(p, ts))
        .collect();
    RolloutBatch::new(iteration, groups).map_err(|e| err(last_line, e.to_string()))
}

pub fn load_rollout_log(path: &Path) -> Result<RolloutBatch> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_rollout_log(&text, &path.display().to_string())
}
