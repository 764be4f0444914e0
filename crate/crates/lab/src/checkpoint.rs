//! Versioned JSON policy checkpoints.
//!
//! Floats are written in shortest round-trip form and read back with
//! correctly rounded parsing, so a save/load cycle is bit-exact.

use std::path::Path;

use collapse_core::miproxy::{EmaState, TurnScope};
use collapse_core::policy::{PolicyParams, PolicySpec};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: PolicySpec,
    pub reasoning_logits: Vec<f64>,
    pub action_logits: Vec<f64>,
    /// Iteration whose rollouts these parameters generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    /// Run seed, needed to replay proxy tie-breaking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<TurnScope>,
    /// EMA z-score state before `iteration`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema: Option<EmaState>,
}

impl Checkpoint {
    pub fn new(params: &PolicyParams) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            spec: params.spec,
            reasoning_logits: params.reasoning_block().to_vec(),
            action_logits: params.action_block().to_vec(),
            iteration: None,
            seed: None,
            scope: None,
            ema: None,
        }
    }

    pub fn params(&self) -> Result<PolicyParams> {
        Ok(PolicyParams::from_parts(
            self.spec,
            self.reasoning_logits.clone(),
            self.action_logits.clone(),
        )?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| LabError::Parse {
            origin: origin.into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(LabError::Invalid(format!(
                "{origin}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.params()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}
