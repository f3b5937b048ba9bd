//! Training loop over generated episodes.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    train_step, Adam, AdamConfig, ConditionVector, DiffusionSchedule, NetworkShape, Objective, PolicyError,
    PolicyNetwork, ScheduleParams, StepLosses, TrainingSample,
};
use crate::kinematics::KinematicChain;
use crate::scenario::Episode;
use crate::seeds;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub horizon: usize,
    /// Waypoint spacing between consecutive chunk actions.
    pub action_stride: usize,
    pub hidden: Vec<usize>,
    pub embed_width: usize,
    pub schedule: ScheduleParams,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            horizon: 16,
            action_stride: 2,
            hidden: vec![256, 256, 256],
            embed_width: 16,
            schedule: ScheduleParams::default(),
            steps: 2000,
            batch_size: 64,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
        }
    }
}

impl TrainConfig {
    pub fn network_shape(&self, dof: usize) -> NetworkShape {
        NetworkShape {
            horizon: self.horizon,
            dof,
            condition_width: ConditionVector::width_for(dof),
            hidden: self.hidden.clone(),
            embed_width: self.embed_width,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidHyperparameter(m.to_string()));
        if self.horizon == 0 || self.action_stride == 0 {
            return bad("horizon and action stride must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment rates must lie in [0, 1)");
        }
        DiffusionSchedule::from_params(self.schedule).map(|_| ())
    }
}

pub struct Trained {
    pub net: PolicyNetwork,
    pub schedule: DiffusionSchedule,
    pub log: Vec<StepLosses>,
}

/// All training samples of `episodes`, in episode then waypoint order.
pub fn training_samples(episodes: &[Episode], cfg: &TrainConfig) -> Result<Vec<TrainingSample>, PolicyError> {
    let mut out = Vec::new();
    for ep in episodes {
        out.extend(ep.training_samples(cfg.horizon, cfg.action_stride)?);
    }
    Ok(out)
}

/// Trains a fresh network. Initialization, batch selection and diffusion
/// noise come from separate streams of `seed`, so both objectives see the
/// same batches and draws.
pub fn train_policy(
    chain: &KinematicChain,
    episodes: &[Episode],
    cfg: &TrainConfig,
    objective: Objective,
    seed: u64,
    mut on_step: impl FnMut(usize, &StepLosses),
) -> Result<Trained, PolicyError> {
    cfg.validate()?;
    objective.validate()?;
    let samples = training_samples(episodes, cfg)?;
    if samples.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let schedule = DiffusionSchedule::from_params(cfg.schedule)?;
    let mut net = PolicyNetwork::init(cfg.network_shape(chain.dof()), &mut seeds::rng(seed, &[0]));
    let mut adam = Adam::new(cfg.adam(), &net);
    let mut batch_rng = seeds::rng(seed, &[1]);
    let mut noise_rng = seeds::rng(seed, &[2]);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            batch.push(samples[batch_rng.gen_range(0..samples.len())].clone());
        }
        let losses = train_step(&mut net, &mut adam, &batch, &schedule, chain, objective, &mut noise_rng)?;
        on_step(step, &losses);
        log.push(losses);
    }
    Ok(Trained { net, schedule, log })
}
