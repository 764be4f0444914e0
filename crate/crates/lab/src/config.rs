//! Experiment configuration: a flat, sectioned key-value file.
//!
//! ```text
//! # comment
//! [filter]
//! strategy = top_p
//! rho = 0.9
//! ```
//!
//! Keys may also be written fully qualified (`filter.rho = 0.9`) outside any
//! section. A JSON object, nested by section or flat with dotted keys, is
//! accepted as well. Unknown keys are errors; missing keys keep their
//! defaults. [`ExperimentConfig::to_canonical`] renders every key, and parsing
//! that output yields the same config again.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use collapse_core::envs::{ContextualTargetEnv, Env, GridLayout, SlipGridEnv};
use collapse_core::filtering::{Statistic, Strategy};
use collapse_core::gradients::AdvantageMode;
use collapse_core::miproxy::TurnScope;
use collapse_core::trainer::TrainConfig;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    ContextualTarget,
    SlipGrid,
}

impl EnvKind {
    pub const NAMES: [&'static str; 2] = ["contextual_target", "slip_grid"];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::ContextualTarget => "contextual_target",
            EnvKind::SlipGrid => "slip_grid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "contextual_target" => Some(EnvKind::ContextualTarget),
            "slip_grid" => Some(EnvKind::SlipGrid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSection {
    pub kind: EnvKind,
    pub slip_prob: f64,
    pub reward_noise_sigma: f64,
    pub partial_reward: f64,
    pub format_penalty: f64,
    pub grid_size: usize,
    pub max_turns: usize,
    pub layout: GridLayout,
    pub num_actions: usize,
    pub targets: Vec<usize>,
}

impl Default for EnvSection {
    fn default() -> Self {
        let mut targets = vec![0; 12];
        targets.extend([1, 2, 3, 4]);
        Self {
            kind: EnvKind::ContextualTarget,
            slip_prob: 0.0,
            reward_noise_sigma: 0.0,
            partial_reward: 0.1,
            format_penalty: -0.1,
            grid_size: 4,
            max_turns: 12,
            layout: GridLayout::FrozenLake,
            num_actions: 6,
            targets,
        }
    }
}

impl EnvSection {
    pub fn build(&self) -> Result<Env> {
        let env = match self.kind {
            EnvKind::ContextualTarget => {
                let mut e = ContextualTargetEnv::new(self.targets.clone(), self.num_actions)?;
                e.partial_reward = self.partial_reward;
                e.format_penalty = self.format_penalty;
                e.reward_noise_sigma = self.reward_noise_sigma;
                Env::ContextualTarget(e)
            }
            EnvKind::SlipGrid => {
                let mut e = SlipGridEnv::with_layout(self.grid_size, self.slip_prob, self.max_turns, self.layout)?;
                e.reward_noise_sigma = self.reward_noise_sigma;
                Env::SlipGrid(e)
            }
        };
        env.validate()?;
        Ok(env)
    }
}

/// Settings of the `ablate` harnesses.
#[derive(Debug, Clone, PartialEq)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    pub slip_levels: Vec<f64>,
    pub keep_top: usize,
    pub keep_bottom: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            slip_levels: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            keep_top: 4,
            keep_bottom: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    /// Policy, training, filter, early-stop, evaluation and proxy settings,
    /// plus the run seed.
    pub train: TrainConfig,
    /// Rollout logs and checkpoints are written every `log_every`
    /// iterations and at the last one; 0 keeps only the last.
    pub log_every: usize,
    pub ablate: AblateSection,
    /// Output directory; `None` defers to the command line and environment.
    pub out: Option<PathBuf>,
}

/// Every recognized key with a one-line description, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("run.seed", "global seed of every random stream"),
    ("run.out", "output directory (empty: --out, then $COLLAPSE_LAB_OUT/<command>)"),
    ("env.kind", "contextual_target | slip_grid"),
    ("env.slip_prob", "slip_grid: probability a move goes perpendicular"),
    ("env.reward_noise_sigma", "std of zero-mean Gaussian noise added to each reward"),
    ("env.partial_reward", "contextual_target: reward for a neighbouring action"),
    ("env.format_penalty", "contextual_target: reward of the reserved invalid action"),
    ("env.grid_size", "slip_grid: side length"),
    ("env.max_turns", "slip_grid: turn budget per episode"),
    ("env.layout", "slip_grid: frozen_lake | corners"),
    ("env.num_actions", "contextual_target: actions including the reserved one"),
    ("env.targets", "contextual_target: comma-separated target action per prompt"),
    ("policy.reasoning_len", "reasoning tokens per turn"),
    ("policy.vocab_size", "reasoning vocabulary size"),
    ("init.reasoning_scale", "std of initial reasoning logits"),
    ("init.action_scale", "std of initial action logits"),
    ("init.reasoning_peak", "logit bump on one seeded token per prompt and position"),
    ("train.iterations", "rollout-update iterations"),
    ("train.batch_prompts", "prompts per batch (P)"),
    ("train.group_size", "trajectories per prompt (G)"),
    ("train.learning_rate", "gradient-ascent step size"),
    ("train.lambda_kl", "KL penalty toward the initial policy"),
    ("train.lambda_ent", "entropy bonus"),
    ("train.advantage", "centered | grpo"),
    ("train.scale_by_rho", "multiply the filtered loss by the keep rate"),
    ("filter.strategy", "none | top_p | top_k | min_p | reverse_top_p"),
    ("filter.rho", "keep mass (top_p, reverse_top_p) or fraction (top_k), in (0, 1]"),
    ("filter.min_p", "min_p threshold relative to the largest statistic, in (0, 1]"),
    ("filter.include_zero", "let zero-statistic groups be selected"),
    ("filter.epsilon", "relative slack on the kept-mass target"),
    ("filter.statistic", "reward_variance | reward_sum | entropy | entropy_variance | length"),
    ("early_stop.enabled", "stop on RV or success collapse"),
    ("early_stop.rv_floor_frac", "RV floor as a fraction of the baseline RV"),
    ("early_stop.rv_floor_patience", "consecutive iterations under the RV floor"),
    ("early_stop.success_floor", "success floor"),
    ("early_stop.success_patience", "consecutive evaluations under the success floor"),
    ("early_stop.baseline_window", "iterations averaged into the baseline RV"),
    ("eval.prompts", "evaluation episodes per checkpoint"),
    ("eval.temperature", "sampling temperature during evaluation"),
    ("eval.every", "iterations between evaluations"),
    ("proxy.scope", "first_turn | trajectory"),
    ("log.every", "iterations between rollout logs and checkpoints (0: last only)"),
    ("ablate.seeds", "comma-separated seeds; comparison JSON holds medians over them"),
    ("ablate.slip_levels", "comma-separated slip levels of the noise sweep"),
    ("ablate.keep_top", "traj_filter: highest-return trajectories kept per group"),
    ("ablate.keep_bottom", "traj_filter: lowest-return trajectories kept per group"),
];

fn bad(key: &str, value: &str, expected: &str) -> LabError {
    LabError::Config(format!("{key}: cannot parse {value:?} as {expected}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value, expected))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<Vec<T>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(key, p, expected)).collect()
}

fn choice<T>(key: &str, value: &str, parse: impl Fn(&str) -> Option<T>, names: &[&str]) -> Result<T> {
    parse(value.trim()).ok_or_else(|| bad(key, value, &format!("one of {}", names.join(", "))))
}

fn join<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn scope_name(s: TurnScope) -> &'static str {
    match s {
        TurnScope::FirstTurn => "first_turn",
        TurnScope::TrajectoryUniform => "trajectory",
    }
}

pub fn parse_scope(s: &str) -> Option<TurnScope> {
    match s {
        "first_turn" => Some(TurnScope::FirstTurn),
        "trajectory" => Some(TurnScope::TrajectoryUniform),
        _ => None,
    }
}

fn advantage_name(a: AdvantageMode) -> &'static str {
    match a {
        AdvantageMode::Centered => "centered",
        AdvantageMode::Grpo => "grpo",
    }
}

fn parse_advantage(s: &str) -> Option<AdvantageMode> {
    match s {
        "centered" => Some(AdvantageMode::Centered),
        "grpo" => Some(AdvantageMode::Grpo),
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let e = &mut self.env;
        let v = value.trim();
        match key {
            "run.seed" => t.seed = num(key, v, "an unsigned integer")?,
            "run.out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            "env.kind" => e.kind = choice(key, v, EnvKind::parse, &EnvKind::NAMES)?,
            "env.slip_prob" => e.slip_prob = num(key, v, "a real")?,
            "env.reward_noise_sigma" => e.reward_noise_sigma = num(key, v, "a real")?,
            "env.partial_reward" => e.partial_reward = num(key, v, "a real")?,
            "env.format_penalty" => e.format_penalty = num(key, v, "a real")?,
            "env.grid_size" => e.grid_size = num(key, v, "an unsigned integer")?,
            "env.max_turns" => e.max_turns = num(key, v, "an unsigned integer")?,
            "env.layout" => e.layout = choice(key, v, GridLayout::parse, &["frozen_lake", "corners"])?,
            "env.num_actions" => e.num_actions = num(key, v, "an unsigned integer")?,
            "env.targets" => e.targets = list(key, v, "a list of unsigned integers")?,
            "policy.reasoning_len" => t.reasoning_len = num(key, v, "an unsigned integer")?,
            "policy.vocab_size" => t.vocab_size = num(key, v, "an unsigned integer")?,
            "init.reasoning_scale" => t.init.reasoning_scale = num(key, v, "a real")?,
            "init.action_scale" => t.init.action_scale = num(key, v, "a real")?,
            "init.reasoning_peak" => t.init.reasoning_peak = num(key, v, "a real")?,
            "train.iterations" => t.iterations = num(key, v, "an unsigned integer")?,
            "train.batch_prompts" => t.batch_prompts = num(key, v, "an unsigned integer")?,
            "train.group_size" => t.group_size = num(key, v, "an unsigned integer")?,
            "train.learning_rate" => t.learning_rate = num(key, v, "a real")?,
            "train.lambda_kl" => t.lambda_kl = num(key, v, "a real")?,
            "train.lambda_ent" => t.lambda_ent = num(key, v, "a real")?,
            "train.advantage" => t.advantage = choice(key, v, parse_advantage, &["centered", "grpo"])?,
            "train.scale_by_rho" => t.scale_by_rho = boolean(key, v)?,
            "filter.strategy" => t.filter.strategy = choice(key, v, Strategy::parse, &Strategy::NAMES)?,
            "filter.rho" => t.filter.rho = num(key, v, "a real")?,
            "filter.min_p" => t.filter.min_p = num(key, v, "a real")?,
            "filter.include_zero" => t.filter.include_zero = boolean(key, v)?,
            "filter.epsilon" => t.filter.epsilon = num(key, v, "a real")?,
            "filter.statistic" => t.filter.statistic = choice(key, v, Statistic::parse, &Statistic::NAMES)?,
            "early_stop.enabled" => t.early_stop.enabled = boolean(key, v)?,
            "early_stop.rv_floor_frac" => t.early_stop.rv_floor_frac = num(key, v, "a real")?,
            "early_stop.rv_floor_patience" => t.early_stop.rv_floor_patience = num(key, v, "an unsigned integer")?,
            "early_stop.success_floor" => t.early_stop.success_floor = num(key, v, "a real")?,
            "early_stop.success_patience" => t.early_stop.success_patience = num(key, v, "an unsigned integer")?,
            "early_stop.baseline_window" => t.early_stop.baseline_window = num(key, v, "an unsigned integer")?,
            "eval.prompts" => t.eval_prompts = num(key, v, "an unsigned integer")?,
            "eval.temperature" => t.eval_temperature = num(key, v, "a real")?,
            "eval.every" => t.eval_every = num(key, v, "an unsigned integer")?,
            "proxy.scope" => t.scope = choice(key, v, parse_scope, &["first_turn", "trajectory"])?,
            "log.every" => self.log_every = num(key, v, "an unsigned integer")?,
            "ablate.seeds" => self.ablate.seeds = list(key, v, "a list of unsigned integers")?,
            "ablate.slip_levels" => self.ablate.slip_levels = list(key, v, "a list of reals")?,
            "ablate.keep_top" => self.ablate.keep_top = num(key, v, "an unsigned integer")?,
            "ablate.keep_bottom" => self.ablate.keep_bottom = num(key, v, "an unsigned integer")?,
            _ => return Err(LabError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Text form of one key, as [`set`](Self::set) reads it back.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let e = &self.env;
        Some(match key {
            "run.seed" => t.seed.to_string(),
            "run.out" => self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "env.kind" => e.kind.name().into(),
            "env.slip_prob" => format!("{:?}", e.slip_prob),
            "env.reward_noise_sigma" => format!("{:?}", e.reward_noise_sigma),
            "env.partial_reward" => format!("{:?}", e.partial_reward),
            "env.format_penalty" => format!("{:?}", e.format_penalty),
            "env.grid_size" => e.grid_size.to_string(),
            "env.max_turns" => e.max_turns.to_string(),
            "env.layout" => e.layout.name().into(),
            "env.num_actions" => e.num_actions.to_string(),
            "env.targets" => join(&e.targets),
            "policy.reasoning_len" => t.reasoning_len.to_string(),
            "policy.vocab_size" => t.vocab_size.to_string(),
            "init.reasoning_scale" => format!("{:?}", t.init.reasoning_scale),
            "init.action_scale" => format!("{:?}", t.init.action_scale),
            "init.reasoning_peak" => format!("{:?}", t.init.reasoning_peak),
            "train.iterations" => t.iterations.to_string(),
            "train.batch_prompts" => t.batch_prompts.to_string(),
            "train.group_size" => t.group_size.to_string(),
            "train.learning_rate" => format!("{:?}", t.learning_rate),
            "train.lambda_kl" => format!("{:?}", t.lambda_kl),
            "train.lambda_ent" => format!("{:?}", t.lambda_ent),
            "train.advantage" => advantage_name(t.advantage).into(),
            "train.scale_by_rho" => t.scale_by_rho.to_string(),
            "filter.strategy" => t.filter.strategy.name().into(),
            "filter.rho" => format!("{:?}", t.filter.rho),
            "filter.min_p" => format!("{:?}", t.filter.min_p),
            "filter.include_zero" => t.filter.include_zero.to_string(),
            "filter.epsilon" => format!("{:?}", t.filter.epsilon),
            "filter.statistic" => t.filter.statistic.name().into(),
            "early_stop.enabled" => t.early_stop.enabled.to_string(),
            "early_stop.rv_floor_frac" => format!("{:?}", t.early_stop.rv_floor_frac),
            "early_stop.rv_floor_patience" => t.early_stop.rv_floor_patience.to_string(),
            "early_stop.success_floor" => format!("{:?}", t.early_stop.success_floor),
            "early_stop.success_patience" => t.early_stop.success_patience.to_string(),
            "early_stop.baseline_window" => t.early_stop.baseline_window.to_string(),
            "eval.prompts" => t.eval_prompts.to_string(),
            "eval.temperature" => format!("{:?}", t.eval_temperature),
            "eval.every" => t.eval_every.to_string(),
            "proxy.scope" => scope_name(t.scope).into(),
            "log.every" => self.log_every.to_string(),
            "ablate.seeds" => join(&self.ablate.seeds),
            "ablate.slip_levels" => join(&self.ablate.slip_levels),
            "ablate.keep_top" => self.ablate.keep_top.to_string(),
            "ablate.keep_bottom" => self.ablate.keep_bottom.to_string(),
            _ => return None,
        })
    }

    /// Parses config text, key-value or JSON, on top of the defaults.
    /// `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let entries = if text.trim_start().starts_with('{') {
            json_entries(text, origin)?
        } else {
            kv_entries(text, origin)?
        };
        let mut seen = std::collections::HashSet::new();
        for (line, key, value) in entries {
            let at = |e: LabError| match line {
                Some(line) => LabError::Parse {
                    origin: origin.into(),
                    line,
                    msg: e.to_string(),
                },
                None => e,
            };
            if !seen.insert(key.clone()) {
                return Err(at(LabError::Config(format!("duplicate key {key:?}"))));
            }
            cfg.set(&key, &value).map_err(at)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("override {o:?} is not of the form key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Checks every section, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let env = self.env.build()?;
        self.train.spec_for(&env)?;
        if self.train.batch_prompts > env.num_prompts() {
            return Err(LabError::Config(format!(
                "train.batch_prompts = {} exceeds the environment's {} prompts",
                self.train.batch_prompts,
                env.num_prompts()
            )));
        }
        if self.ablate.seeds.is_empty() {
            return Err(LabError::Config("ablate.seeds must list at least one seed".into()));
        }
        if let Some(s) = self.ablate.slip_levels.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(LabError::Config(format!("ablate.slip_levels: {s} is outside [0, 1]")));
        }
        Ok(())
    }

    /// Every key, grouped by section, in [`KEYS`] order.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, _) in KEYS {
            let (sec, name) = key.split_once('.').expect("keys are dotted");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {}", self.get(key).expect("listed key"));
        }
        out
    }
}

/// Reference table of every key and its default.
pub fn reference() -> String {
    let d = ExperimentConfig::default();
    let mut out = String::new();
    for (key, help) in KEYS {
        let value = d.get(key).expect("listed key");
        let value = if value.is_empty() { "(empty)".to_string() } else { value };
        let _ = writeln!(out, "  {key:<28} {value}\n  {:<28} {help}", "");
    }
    out
}

type Entry = (Option<usize>, String, String);

fn kv_entries(text: &str, origin: &str) -> Result<Vec<Entry>> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| LabError::Parse {
            origin: origin.into(),
            line: i + 1,
            msg,
        };
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(format!("unterminated section header {line:?}")))?
                .trim();
            if name.is_empty() || name.contains('.') {
                return Err(err(format!("bad section name {name:?}")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let k = k.trim();
        let key = match &section {
            Some(s) if !k.contains('.') => format!("{s}.{k}"),
            Some(s) => return Err(err(format!("dotted key {k:?} inside section [{s}]"))),
            None => k.to_string(),
        };
        out.push((Some(i + 1), key, v.trim().to_string()));
    }
    Ok(out)
}

fn json_entries(text: &str, origin: &str) -> Result<Vec<Entry>> {
    use serde_json::Value;
    let root: Value = serde_json::from_str(text).map_err(|e| LabError::Parse {
        origin: origin.into(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    fn scalar(key: &str, v: &Value) -> Result<String> {
        Ok(match v {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
            Value::Array(xs) => xs.iter().map(|x| scalar(key, x)).collect::<Result<Vec<_>>>()?.join(","),
            _ => return Err(LabError::Config(format!("{key}: unsupported JSON value {v}"))),
        })
    }
    fn walk(prefix: &str, v: &Value, out: &mut Vec<Entry>) -> Result<()> {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out)?;
                }
            }
            _ if prefix.is_empty() => return Err(LabError::Config("JSON config must be an object".into())),
            _ => out.push((None, prefix.to_string(), scalar(prefix, v)?)),
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk("", &root, &mut out)?;
    Ok(out)
}
