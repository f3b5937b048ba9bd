//! The combined imitation + feasibility training step and inference sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::geometry::ObbObstacle;
use crate::kinematics::KinematicChain;

use super::loss::geo_loss_on_tape;
use super::network::{Adam, PolicyNetwork};
use super::schedule::{diffuse_with, DiffusionSchedule};
use super::{ActionChunk, ConditionVector, PolicyError};

/// One supervised example: condition, expert chunk and the scene obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub condition: ConditionVector,
    pub chunk: ActionChunk,
    pub obstacle: ObbObstacle,
}

/// Training objective. `Imitation` never touches the geometry modules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Imitation,
    Feasibility { delta: f64, lambda: f64 },
}

impl Objective {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if let Objective::Feasibility { delta, lambda } = *self {
            if !(lambda >= 0.0) {
                return Err(PolicyError::InvalidHyperparameter(format!("loss weight must be >= 0, got {lambda}")));
            }
            if !(delta > 0.0) {
                return Err(PolicyError::InvalidHyperparameter(format!("safety margin must be > 0, got {delta}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub mse: f64,
    pub geo: f64,
    pub total: f64,
}

/// Noise draws for one batch, in sample order.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    pub steps: Vec<usize>,
    pub noise: Vec<Vec<f64>>,
}

impl BatchNoise {
    pub fn draw<R: Rng>(rng: &mut R, batch: &[TrainingSample], schedule: &DiffusionSchedule) -> Self {
        let mut steps = Vec::with_capacity(batch.len());
        let mut noise = Vec::with_capacity(batch.len());
        for s in batch {
            steps.push(rng.gen_range(1..=schedule.steps()));
            noise.push(
                (0..s.chunk.values().len())
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
        }
        Self { steps, noise }
    }
}

/// Combined loss and gradients for one batch under fixed noise draws, without
/// updating anything. Returns the losses and, for each parameter tensor in
/// layer order, its gradient.
pub fn batch_loss_and_grads(
    net: &PolicyNetwork,
    batch: &[TrainingSample],
    noise: &BatchNoise,
    schedule: &DiffusionSchedule,
    chain: &KinematicChain,
    objective: Objective,
) -> Result<(StepLosses, Vec<Tensor>), PolicyError> {
    let (tape, params, total, losses) = record_batch(net, batch, noise, schedule, chain, objective)?;
    let grads = tape.backward(total)?;
    let tensors = net
        .layers()
        .iter()
        .flat_map(|l| [l.weight.shape().to_vec(), l.bias.shape().to_vec()])
        .zip(params.vars())
        .map(|(shape, v)| grads.get_or_zeros(v, &shape))
        .collect();
    Ok((losses, tensors))
}

type Recorded = (Tape, super::network::BoundParams, crate::autodiff::Var, StepLosses);

fn record_batch(
    net: &PolicyNetwork,
    batch: &[TrainingSample],
    noise: &BatchNoise,
    schedule: &DiffusionSchedule,
    chain: &KinematicChain,
    objective: Objective,
) -> Result<Recorded, PolicyError> {
    objective.validate()?;
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let shape = net.shape();
    let width = shape.input_width();
    let mut inputs = Vec::with_capacity(batch.len() * width);
    let mut targets = Vec::with_capacity(batch.len() * shape.action_width());
    for ((sample, &k), eps) in batch.iter().zip(&noise.steps).zip(&noise.noise) {
        if k == 0 || k > schedule.steps() {
            return Err(PolicyError::StepOutOfRange { k, steps: schedule.steps() });
        }
        let noisy = diffuse_with(&sample.chunk, schedule.alpha_bar(k), eps)?;
        inputs.extend(net.input_row(&noisy, &sample.condition, k)?);
        targets.extend_from_slice(sample.chunk.values());
    }

    let mut tape = Tape::new();
    let params = net.bind(&mut tape, true);
    let x = tape.constant(Tensor::matrix(batch.len(), width, inputs)?);
    let predicted = net.forward_on_tape(&mut tape, &params, x)?;
    let expert = tape.constant(Tensor::matrix(batch.len(), shape.action_width(), targets)?);
    let diff = tape.sub(predicted, expert)?;
    let sq = tape.square(diff);
    let mse = tape.mean(sq);
    let mse_value = tape.value(mse).item();

    let (total, geo_value) = match objective {
        Objective::Imitation => (mse, 0.0),
        Objective::Feasibility { delta, lambda } => {
            let obstacles: Vec<ObbObstacle> = batch.iter().map(|s| s.obstacle.clone()).collect();
            let geo = geo_loss_on_tape(&mut tape, predicted, shape.dof, chain, &obstacles, delta)?;
            let geo_value = tape.value(geo.loss).item();
            let weighted = tape.scale(geo.loss, lambda);
            (tape.add(mse, weighted)?, geo_value)
        }
    };
    let losses = StepLosses {
        mse: mse_value,
        geo: geo_value,
        total: tape.value(total).item(),
    };
    Ok((tape, params, total, losses))
}

/// One optimizer update on a batch: draws `k ~ U{1..K}` and Gaussian noise
/// per sample, denoises, and descends `L_MSE + lambda * L_geo`.
pub fn train_step<R: Rng>(
    net: &mut PolicyNetwork,
    optimizer: &mut Adam,
    batch: &[TrainingSample],
    schedule: &DiffusionSchedule,
    chain: &KinematicChain,
    objective: Objective,
    rng: &mut R,
) -> Result<StepLosses, PolicyError> {
    objective.validate()?;
    let noise = BatchNoise::draw(rng, batch, schedule);
    let (tape, params, total, losses) = record_batch(net, batch, &noise, schedule, chain, objective)?;
    let grads = tape.backward(total)?;
    optimizer.update(net, &params, &grads);
    Ok(losses)
}

/// Iterative denoising from `a^K ~ N(0, I)` with x0-posterior re-noising.
pub fn sample_chunk<R: Rng>(
    net: &PolicyNetwork,
    cond: &ConditionVector,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<ActionChunk, PolicyError> {
    let shape = net.shape();
    let n = shape.action_width();
    let draw = |rng: &mut R| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>();
    let mut current = ActionChunk::new(shape.horizon, shape.dof, draw(rng))?;
    for k in (1..=schedule.steps()).rev() {
        let clean = net.denoise_predict(&current, cond, k)?;
        if k == 1 {
            return Ok(clean);
        }
        let eps = draw(rng);
        current = diffuse_with(&clean, schedule.alpha_bar(k - 1), &eps)?;
    }
    unreachable!("schedule has at least one step")
}
