use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::kinematics::KinematicChain;

use super::network::{Layer, NetworkShape, PolicyNetwork};
use super::schedule::{DiffusionSchedule, ScheduleParams};
use super::PolicyError;

const FORMAT: &str = "feaslab-checkpoint";
const VERSION: u32 = 1;

/// Free-form description of how a checkpoint was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub objective: super::Objective,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub episodes: usize,
    pub action_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    fan_in: usize,
    fan_out: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// JSON container for a trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub shape: NetworkShape,
    layers: Vec<LayerRecord>,
    pub schedule: ScheduleParams,
    pub chain_hash: String,
    pub training: TrainingRecord,
}

impl Checkpoint {
    pub fn new(net: &PolicyNetwork, schedule: &DiffusionSchedule, chain: &KinematicChain, training: TrainingRecord) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| LayerRecord {
                fan_in: l.weight.shape()[0],
                fan_out: l.weight.shape()[1],
                weight: l.weight.data().to_vec(),
                bias: l.bias.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            shape: net.shape().clone(),
            layers,
            schedule: schedule.params(),
            chain_hash: chain.hash().to_string(),
            training,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec(self).expect("checkpoint serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let ckpt: Self = serde_json::from_slice(bytes).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        if ckpt.format != FORMAT || ckpt.version != VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported container {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the network and schedule, refusing a different chain.
    pub fn restore(&self, chain: &KinematicChain) -> Result<(PolicyNetwork, DiffusionSchedule), PolicyError> {
        if self.chain_hash != chain.hash() {
            return Err(PolicyError::ChainMismatch {
                expected: chain.hash().to_string(),
                found: self.chain_hash.clone(),
            });
        }
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(Layer {
                    weight: Tensor::matrix(l.fan_in, l.fan_out, l.weight.clone())?,
                    bias: Tensor::matrix(1, l.fan_out, l.bias.clone())?,
                })
            })
            .collect::<Result<Vec<_>, PolicyError>>()?;
        let net = PolicyNetwork::from_layers(self.shape.clone(), layers)?;
        Ok((net, DiffusionSchedule::from_params(self.schedule)?))
    }
}
