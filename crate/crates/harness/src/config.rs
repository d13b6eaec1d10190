//! Run configuration: one JSON document drives a whole experiment.
//!
//! Every field except the problem shape and the evaluator has a default, and
//! parsing materializes all of them, so the config embedded in a trace
//! header is complete and replays never depend on binary defaults.

use asyndbt_core::federated::OuterConfig;
use asyndbt_core::lower::InnerConfig;
use asyndbt_core::oracle::{EvaluatorSpec, ProblemShape};
use asyndbt_core::simnet::{RunOptions, SimConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// The asynchronous tuner.
    Asyn,
    /// Centralized reference: single location, no consensus variables.
    Cen,
    /// Synchronous reference: all workers every round, slowest-paced clock.
    Sync,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub shape: ProblemShape,
    pub evaluator: EvaluatorSpec,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub inner: InnerConfig,
    #[serde(default)]
    pub outer: OuterConfig,
    #[serde(default)]
    pub run: RunOptions,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
}

fn default_mode() -> RunMode {
    RunMode::Asyn
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.shape.validate()?;
        self.sim.validate()?;
        self.inner.validate()?;
        self.outer.validate()?;
        if !self.evaluator.is_remote() {
            // Fails fast on malformed tables and scores.
            self.evaluator.build_local(&self.shape)?;
        }
        Ok(())
    }

    /// Canonical JSON used both for the trace header and the config hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical_json().as_bytes()))
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
