//! Denoising policy: noise schedule, network, losses, the combined training
//! step, inference sampling and checkpoints.

mod checkpoint;
pub mod loss;
pub mod network;
pub mod schedule;
pub mod train;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::geometry::{GeometryError, ObbObstacle};
use crate::kinematics::KinematicsError;

pub use checkpoint::{Checkpoint, TrainingRecord};
pub use loss::{geo_loss, hinge_average, mse_loss};
pub use network::{Adam, AdamConfig, NetworkShape, PolicyNetwork};
pub use schedule::{DiffusionSchedule, ScheduleParams};
pub use train::{sample_chunk, train_step, Objective, StepLosses, TrainingSample};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("diffusion step {k} outside 1..={steps}")]
    StepOutOfRange { k: usize, steps: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("empty training batch")]
    EmptyBatch,
    #[error("checkpoint chain hash {found} does not match chain {expected}")]
    ChainMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `horizon x dof` joint targets in radians, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    horizon: usize,
    dof: usize,
    values: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dof: usize, values: Vec<f64>) -> Result<Self, PolicyError> {
        if horizon == 0 || dof == 0 || values.len() != horizon * dof {
            return Err(PolicyError::Shape(format!(
                "{} values cannot form a {horizon}x{dof} chunk",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::Shape("chunk contains non-finite values".into()));
        }
        Ok(Self { horizon, dof, values })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn step(&self, tau: usize) -> &[f64] {
        &self.values[tau * self.dof..(tau + 1) * self.dof]
    }
}

/// Low-dimensional scene conditioning: current joints, target point and the
/// obstacle as centre, yaw and half extents.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    pub joints: Vec<f64>,
    pub target: [f64; 3],
    pub obstacle: [f64; 7],
}

impl ConditionVector {
    pub fn new(joints: &[f64], target: &nalgebra::Vector3<f64>, obstacle: &ObbObstacle) -> Self {
        let c = obstacle.center();
        let h = obstacle.half_extents();
        Self {
            joints: joints.to_vec(),
            target: [target.x, target.y, target.z],
            obstacle: [c.x, c.y, c.z, obstacle.yaw(), h.x, h.y, h.z],
        }
    }

    pub fn width_for(dof: usize) -> usize {
        dof + 3 + 7
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.joints.clone();
        v.extend(self.target);
        v.extend(self.obstacle);
        v
    }
}
