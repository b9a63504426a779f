//! The resolved experiment configuration: one TOML file with a section per
//! module. Every key has a default and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::Mode;
use crate::online::EngineConfig;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Observation noise level `l` applied to test observations.
    pub noise_level: f64,
    /// Evaluate only the first this many test sequences; 0 means all.
    pub max_sequences: usize,
    pub modes: Vec<Mode>,
    /// Write SVG plots next to the reports.
    pub plots: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            noise_level: 0.0,
            max_sequences: 0,
            modes: Mode::ALL.to_vec(),
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub engine: EngineConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.engine.seed = seed;
    }

    /// Every violated key across all sections, including cross-section
    /// consistency between the trained window and the engine.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.synth.violations();
        v.extend(self.train.violations());
        v.extend(self.engine.violations());
        let (t, e) = (&self.train, &self.engine);
        for (key, engine, train) in [
            ("history", e.history, t.history),
            ("horizon", e.horizon, t.horizon),
            ("max_level", e.max_level, t.max_level),
        ] {
            if engine != train {
                v.push(format!("engine.{key}: {engine} differs from train.{key} = {train}"));
            }
        }
        if !(self.eval.noise_level >= 0.0) {
            v.push(format!("eval.noise_level: must be >= 0, got {}", self.eval.noise_level));
        }
        if self.eval.modes.is_empty() {
            v.push("eval.modes: at least one mode required".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes to JSON");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}
