//! Top-level TOML configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::CodecConfig;
use crate::drl::DqnConfig;
use crate::env::{RewardParams, WorldConfig};
use crate::error::{Error, Result};
use crate::robot::KinematicChain;
use crate::slq::{RbfParams, SlqSettings};

/// How the inner control loop advances the action clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingMode {
    /// Each control step holds the control for `world.control_dt`.
    #[default]
    Sync,
    /// Each control step holds the control for the measured solve time.
    Realtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Repetitions of every grid configuration.
    pub runs: usize,
    /// Uniform start perturbation per run (m, rad).
    pub position_jitter: f64,
    pub yaw_jitter: f64,
    /// Worker threads; 0 uses one per CPU.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            position_jitter: 0.02,
            yaw_jitter: 0.02,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { episodes: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Simulated time one RL action is held (s).
    pub action_duration: f64,
    pub timing_mode: TimingMode,
    pub seed: u64,
    pub world: WorldConfig,
    pub rewards: RewardParams,
    pub chain: KinematicChain,
    pub solver: SlqSettings,
    pub rbf: RbfParams,
    pub codec: CodecConfig,
    pub dqn: DqnConfig,
    pub eval: EvalConfig,
    pub train: TrainConfig,
}

/// On-disk form: every section optional, the codec default depends on the chain.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_action_duration")]
    action_duration: f64,
    #[serde(default)]
    timing_mode: TimingMode,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    world: WorldConfig,
    #[serde(default)]
    rewards: RewardParams,
    #[serde(default)]
    chain: KinematicChain,
    #[serde(default)]
    solver: SlqSettings,
    #[serde(default)]
    rbf: RbfParams,
    codec: Option<CodecConfig>,
    #[serde(default)]
    dqn: DqnConfig,
    #[serde(default)]
    eval: EvalConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn default_action_duration() -> f64 {
    0.5
}

impl From<RawConfig> for PipelineConfig {
    fn from(r: RawConfig) -> Self {
        let n_arm = r.chain.joints.len();
        Self {
            action_duration: r.action_duration,
            timing_mode: r.timing_mode,
            seed: r.seed,
            codec: r.codec.unwrap_or_else(|| CodecConfig::default_for(n_arm)),
            world: r.world,
            rewards: r.rewards,
            chain: r.chain,
            solver: r.solver,
            rbf: r.rbf,
            dqn: r.dqn,
            eval: r.eval,
            train: r.train,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let chain = KinematicChain::default();
        Self {
            action_duration: default_action_duration(),
            timing_mode: TimingMode::Sync,
            seed: 0,
            codec: CodecConfig::default_for(chain.joints.len()),
            world: WorldConfig::default(),
            rewards: RewardParams::default(),
            chain,
            solver: SlqSettings::default(),
            rbf: RbfParams::default(),
            dqn: DqnConfig::default(),
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parse and validate TOML text; `origin` only labels parse errors.
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let cfg = PipelineConfig::from(raw);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<dump>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.chain.validate()?;
        self.world.validate(&self.chain)?;
        self.rewards.validate()?;
        self.solver.validate()?;
        if !(self.rbf.mu > 0.0 && self.rbf.delta > 0.0) {
            return Err(Error::config("rbf", "mu and delta must be positive"));
        }
        self.codec.validate(self.chain.n_joints())?;
        self.dqn.validate()?;
        if !(self.action_duration.is_finite() && self.action_duration >= self.world.control_dt) {
            return Err(Error::config("action_duration", "must be at least world.control_dt"));
        }
        if self.eval.runs == 0 {
            return Err(Error::config("eval.runs", "must be at least 1"));
        }
        if !(self.eval.position_jitter >= 0.0 && self.eval.yaw_jitter >= 0.0) {
            return Err(Error::config("eval.position_jitter", "jitter must be non-negative"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config is always serializable");
        hex::encode(Sha256::digest(&bytes))
    }
}
