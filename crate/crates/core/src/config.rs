//! Run configuration stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluation::ProtocolConfig;
use crate::experiment::TrainConfig;
use crate::scenario::GenerationConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Chain description file; the built-in planar arm when absent.
    pub chain: Option<PathBuf>,
    /// Dataset file, relative to the output directory.
    pub dataset: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub generation: GenerationConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub datascale: DatascaleSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub model: TrainConfig,
    pub delta: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Checkpoint file, relative to the output directory.
    pub checkpoint: PathBuf,
    /// Train on the first `episodes` episodes; all when absent.
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    #[serde(flatten)]
    pub protocol: ProtocolConfig,
    pub seed: u64,
    pub bootstrap_replicates: usize,
    /// Evaluate on the first `episodes` episodes; all when absent.
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateSection {
    pub deltas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatascaleSection {
    pub sizes: Vec<usize>,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            chain: None,
            dataset: PathBuf::from("dataset.jsonl"),
            count: 120,
            seed: 7,
            generation: GenerationConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
            datascale: DatascaleSection::default(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            model: TrainConfig::default(),
            delta: 0.10,
            lambda: 1.0,
            seed: 0,
            checkpoint: PathBuf::from("checkpoint.json"),
            episodes: None,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: ProtocolConfig::default(),
            seed: 100,
            bootstrap_replicates: 2000,
            episodes: None,
        }
    }
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            deltas: vec![0.05, 0.10, 0.15],
            lambdas: vec![1.0, 4.0],
            episodes: 40,
        }
    }
}

impl Default for DatascaleSection {
    fn default() -> Self {
        Self {
            sizes: vec![40, 80, 120],
            eval_episodes: 40,
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.count == 0 {
            return Err(invalid("count must be >= 1"));
        }
        let g = &self.generation;
        if !(g.epsilon > 0.0) || !(g.planner_margin >= 0.0) || !(g.start_clearance >= 0.0) {
            return Err(invalid("generation thresholds must be positive"));
        }
        if g.waypoints < 2 || g.rrt_max_nodes == 0 || !(g.rrt_step > 0.0) || !(g.edge_resolution > 0.0) {
            return Err(invalid("planner settings out of range"));
        }
        let [lo, hi] = g.half_extent_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(invalid("half-extent range must satisfy 0 < lo <= hi"));
        }
        self.train.model.validate().map_err(|e| invalid(e.to_string()))?;
        if !(self.train.lambda >= 0.0) {
            return Err(invalid("lambda must be >= 0"));
        }
        if !(self.train.delta > 0.0) {
            return Err(invalid("delta must be > 0"));
        }
        if self.eval.bootstrap_replicates == 0 {
            return Err(invalid("bootstrap replicates must be >= 1"));
        }
        let p = &self.eval.protocol;
        if p.chunks_per_episode == 0 || p.small_perturbations == 0 || p.small_rollouts == 0 || p.large_perturbations == 0 || p.large_rollouts == 0 {
            return Err(invalid("protocol counts must be >= 1"));
        }
        if self.ablate.deltas.iter().any(|d| !(*d > 0.0)) || self.ablate.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(invalid("ablation grid values out of range"));
        }
        if self.datascale.sizes.contains(&0) {
            return Err(invalid("subset sizes must be >= 1"));
        }
        Ok(())
    }

    /// Hash of the canonical serialized configuration.
    pub fn hash(&self) -> String {
        json_hash(self)
    }
}

pub fn json_hash<T: Serialize>(value: &T) -> String {
    hex(&Sha256::digest(serde_json::to_vec(value).expect("value serializes")))
}

/// Content hash of a blob with git-style `blob <len>\0` framing.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex(&h.finalize())
}

/// Hash over an ordered list of content hashes.
pub fn combined_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
