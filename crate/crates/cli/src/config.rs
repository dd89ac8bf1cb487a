//! Run configuration: one TOML document with a section per module.
//!
//! ```toml
//! seed = 42
//!
//! [env]
//! corpus = "corpus.jsonl"   # omit to generate from [corpus]
//! rollouts = 8
//! window = 3
//! variant = "MAX"
//! policy = "noisy_oracle"
//! sigma = 0.05
//!
//! [casc]
//! memory = "latest_round"
//!
//! [reward]
//! tau_min = 0.1
//! ```
//!
//! Every key is optional and unknown keys are rejected. Command-line
//! overrides use dotted paths (`trainer.lr=0.3`, `env.variant="MIN"`).

use std::path::{Path, PathBuf};

use guirl_core::action::ActionTaxonomy;
use guirl_core::advantage::AdvantageConfig;
use guirl_core::casc::{CompressVariant, RoiMemory, RoiParams};
use guirl_core::corpus::CorpusParams;
use guirl_core::env::{EnvConfig, NoisyOracle, OraclePolicy, Policy, Taxonomies, UniformRandom};
use guirl_core::metrics::MetricsConfig;
use guirl_core::reward::RewardConfig;
use guirl_core::screen::TokenModel;
use guirl_core::trainer::{TrainConfig, TrainSetup};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("override `{0}`: expected key.path=value")]
    Override(String),
    #[error("{section}: {msg}")]
    Invalid { section: &'static str, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PolicyKind {
    Oracle,
    NoisyOracle,
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    /// JSONL corpus; relative paths resolve against the config file.
    pub corpus: Option<PathBuf>,
    pub rollouts: usize,
    pub patch_threshold: usize,
    pub window: usize,
    pub variant: CompressVariant,
    /// Policy used by `simulate` and `eval`.
    pub policy: PolicyKind,
    /// Coordinate noise of `noisy_oracle`, in normalized screen units.
    pub sigma: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let env = EnvConfig::default();
        Self {
            corpus: None,
            rollouts: env.rollouts,
            patch_threshold: env.patch_threshold,
            window: env.window,
            variant: env.variant,
            policy: PolicyKind::Oracle,
            sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascSection {
    pub pad: f64,
    pub min_side: f64,
    pub memory: RoiMemory,
    pub patch_px: u32,
    pub merge: u32,
}

impl Default for CascSection {
    fn default() -> Self {
        let roi = RoiParams::default();
        let tm = TokenModel::default();
        Self {
            pad: roi.pad,
            min_side: roi.min_side,
            memory: roi.memory,
            patch_px: tm.patch_px,
            merge: tm.merge,
        }
    }
}

/// Synthetic corpus used when `env.corpus` is not set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub episodes: usize,
    pub steps: usize,
    pub seed: u64,
    pub preset: String,
    pub width: u32,
    pub height: u32,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let p = CorpusParams::default();
        Self {
            episodes: p.episodes,
            steps: p.steps,
            seed: p.seed,
            preset: p.preset,
            width: p.width,
            height: p.height,
        }
    }
}

impl From<&CorpusSection> for CorpusParams {
    fn from(c: &CorpusSection) -> Self {
        CorpusParams {
            episodes: c.episodes,
            steps: c.steps,
            seed: c.seed,
            preset: c.preset.clone(),
            width: c.width,
            height: c.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvSection,
    pub casc: CascSection,
    pub corpus: CorpusSection,
    pub reward: RewardConfig,
    pub advantage: AdvantageConfig,
    pub trainer: TrainConfig,
    pub metrics: MetricsConfig,
    /// User-defined taxonomies, addressable by name from episode `preset`s.
    pub taxonomy: Vec<ActionTaxonomy>,
    /// Directory the config was loaded from.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            env: EnvSection::default(),
            casc: CascSection::default(),
            corpus: CorpusSection::default(),
            reward: RewardConfig::default(),
            advantage: AdvantageConfig::default(),
            trainer: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            taxonomy: Vec::new(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults when `None`) and applies the
    /// dotted `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let (mut doc, name, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                let doc: toml::Table = toml::from_str(&text).map_err(|e| ConfigError::Parse {
                    path: p.display().to_string(),
                    msg: e.to_string(),
                })?;
                let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (doc, p.display().to_string(), dir)
            }
            None => (toml::Table::new(), "<defaults>".to_string(), PathBuf::from(".")),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig =
            toml::Value::Table(doc)
                .try_into()
                .map_err(|e: toml::de::Error| ConfigError::Parse {
                    path: name,
                    msg: e.to_string(),
                })?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section, msg: String| ConfigError::Invalid { section, msg };
        if self.env.rollouts == 0 {
            return Err(invalid("env", "rollouts must be positive".into()));
        }
        if !(self.env.sigma.is_finite() && self.env.sigma >= 0.0) {
            return Err(invalid("env", "sigma must be finite and non-negative".into()));
        }
        if !(0.0..=0.5).contains(&self.casc.pad) || !(0.0..=1.0).contains(&self.casc.min_side) {
            return Err(invalid(
                "casc",
                "pad must lie in [0, 0.5] and min_side in [0, 1]".into(),
            ));
        }
        if self.casc.patch_px == 0 || self.casc.merge == 0 {
            return Err(invalid("casc", "patch_px and merge must be positive".into()));
        }
        if self.corpus.episodes == 0 || self.corpus.steps == 0 || self.corpus.width == 0 || self.corpus.height == 0 {
            return Err(invalid(
                "corpus",
                "episodes, steps, width and height must be positive".into(),
            ));
        }
        self.reward.validate().map_err(|e| invalid("reward", e.to_string()))?;
        self.advantage.validate().map_err(|e| invalid("advantage", e))?;
        self.trainer.validate().map_err(|e| invalid("trainer", e))?;
        if self.metrics.windows.is_empty() || self.metrics.variants.is_empty() {
            return Err(invalid("metrics", "windows and variants must be non-empty".into()));
        }
        self.taxonomies()?;
        Ok(())
    }

    pub fn taxonomies(&self) -> Result<Taxonomies, ConfigError> {
        Taxonomies::with_custom(self.taxonomy.clone()).map_err(|e| ConfigError::Invalid {
            section: "taxonomy",
            msg: e.to_string(),
        })
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            rollouts: self.env.rollouts,
            patch_threshold: self.env.patch_threshold,
            window: self.env.window,
            variant: self.env.variant,
        }
    }

    pub fn roi(&self) -> RoiParams {
        RoiParams {
            pad: self.casc.pad,
            min_side: self.casc.min_side,
            memory: self.casc.memory,
        }
    }

    pub fn tokens(&self) -> TokenModel {
        TokenModel {
            patch_px: self.casc.patch_px,
            merge: self.casc.merge,
        }
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            env: self.env_config(),
            roi: self.roi(),
            tokens: self.tokens(),
            reward: self.reward,
            advantage: self.advantage,
            train: self.trainer.clone(),
            seed: self.seed,
        }
    }

    pub fn corpus_path(&self) -> Option<PathBuf> {
        self.env.corpus.as_ref().map(|p| self.base_dir.join(p))
    }

    pub fn policy(&self, kind: PolicyKind) -> Box<dyn Policy> {
        match kind {
            PolicyKind::Oracle => Box::new(OraclePolicy),
            PolicyKind::NoisyOracle => Box::new(NoisyOracle { sigma: self.env.sigma }),
            PolicyKind::UniformRandom => Box::new(UniformRandom),
        }
    }
}

fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    // Bare words that are not TOML literals are taken as strings.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(assignment.into()))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
