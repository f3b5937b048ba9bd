//! Imitation and geometric feasibility losses.

use crate::autodiff::{Tape, Tensor, Var};
use crate::geometry::{obb_sdf_on_tape, BoxLanes, ObbObstacle};
use crate::kinematics::KinematicChain;

use super::{ActionChunk, PolicyError};

/// Mean of squared elementwise differences.
pub fn mse_loss(expert: &ActionChunk, predicted: &ActionChunk) -> Result<f64, PolicyError> {
    if expert.values().len() != predicted.values().len() {
        return Err(PolicyError::Shape(format!(
            "mse between {}x{} and {}x{}",
            expert.horizon(),
            expert.dof(),
            predicted.horizon(),
            predicted.dof()
        )));
    }
    let n = expert.values().len() as f64;
    Ok(expert
        .values()
        .iter()
        .zip(predicted.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Average squared hinge `max(0, delta - d)^2` over the clearances below
/// `delta`; exactly zero when none are.
pub fn hinge_average(clearances: &[f64], delta: f64) -> Result<f64, PolicyError> {
    check_delta(delta)?;
    let active: Vec<f64> = clearances.iter().copied().filter(|&d| d < delta).collect();
    if active.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = active.iter().map(|d| (delta - d) * (delta - d)).sum();
    Ok(total / active.len() as f64)
}

fn check_delta(delta: f64) -> Result<(), PolicyError> {
    if !(delta > 0.0) {
        return Err(PolicyError::InvalidHyperparameter(format!("safety margin must be > 0, got {delta}")));
    }
    Ok(())
}

/// Feasibility loss of one predicted chunk against its obstacle.
pub fn geo_loss(chunk: &ActionChunk, chain: &KinematicChain, obstacle: &ObbObstacle, delta: f64) -> Result<f64, PolicyError> {
    let mut tape = Tape::new();
    let pred = tape.constant(Tensor::matrix(1, chunk.values().len(), chunk.values().to_vec())?);
    let out = geo_loss_on_tape(&mut tape, pred, chunk.dof(), chain, std::slice::from_ref(obstacle), delta)?;
    Ok(tape.value(out.loss).item())
}

/// Batched feasibility loss recorded on the tape.
#[derive(Debug, Clone)]
pub struct GeoTerm {
    /// Batch mean of the per-sample losses, `[1]`.
    pub loss: Var,
    /// Per-sample loss values.
    pub per_sample: Vec<f64>,
    /// Per-sample number of active violations.
    pub active: Vec<usize>,
    /// Every clearance, ordered sample, step, link.
    pub clearances: Vec<f64>,
}

/// Maps predicted chunks `[samples, horizon * dof]` through forward
/// kinematics and the box distance, and averages the squared hinge over each
/// sample's own active violations. `obstacles[s]` belongs to sample `s`.
///
/// The violation set is read from the forward values; samples with no
/// violation contribute an exact zero.
pub fn geo_loss_on_tape(
    tape: &mut Tape,
    predicted: Var,
    dof: usize,
    chain: &KinematicChain,
    obstacles: &[ObbObstacle],
    delta: f64,
) -> Result<GeoTerm, PolicyError> {
    check_delta(delta)?;
    let shape = tape.shape(predicted).to_vec();
    let samples = shape[0];
    if obstacles.len() != samples || shape.len() != 2 || shape[1] % dof != 0 {
        return Err(PolicyError::Shape(format!(
            "prediction {shape:?} with dof {dof} against {} obstacles",
            obstacles.len()
        )));
    }
    let horizon = shape[1] / dof;
    let rows = samples * horizon;
    let per_step = tape.reshape(predicted, &[rows, dof])?;
    let joints: Vec<Var> = (0..dof)
        .map(|j| tape.slice(per_step, 1, j, 1))
        .collect::<Result<_, _>>()?;
    let points = chain.forward_kinematics_on_tape(tape, &joints, rows)?;
    let row_boxes = obstacles.iter().flat_map(|o| std::iter::repeat(o).take(horizon));
    let boxes = BoxLanes::record(tape, row_boxes.collect::<Vec<_>>().into_iter());

    let links = chain.representative_count();
    let mut clearance_vars = Vec::with_capacity(links);
    let mut clearances = vec![0.0; rows * links];
    for (l, (point, &radius)) in points.representative.iter().zip(chain.radii()).enumerate() {
        let sdf = obb_sdf_on_tape(tape, *point, &boxes)?;
        let d = tape.add_scalar(sdf, -radius);
        for (r, &v) in tape.value(d).data().iter().enumerate() {
            clearances[r * links + l] = v;
        }
        clearance_vars.push(d);
    }

    let per_sample_len = horizon * links;
    let mut active = Vec::with_capacity(samples);
    let mut per_sample = Vec::with_capacity(samples);
    for s in 0..samples {
        let block = &clearances[s * per_sample_len..(s + 1) * per_sample_len];
        active.push(block.iter().filter(|&&d| d < delta).count());
        per_sample.push(hinge_average(block, delta)?);
    }
    // Row weight 1 / (samples * |V_s|) turns the weighted sum into the
    // batch mean of per-sample active-set averages.
    let weights: Vec<f64> = (0..rows)
        .map(|r| {
            let n = active[r / horizon];
            if n == 0 {
                0.0
            } else {
                1.0 / (samples as f64 * n as f64)
            }
        })
        .collect();
    let weights = tape.constant(Tensor::matrix(rows, 1, weights)?);
    let mut total = None;
    for d in clearance_vars {
        let gap = tape.neg(d);
        let gap = tape.add_scalar(gap, delta);
        let hinge = tape.relu(gap);
        let sq = tape.square(hinge);
        let weighted = tape.mul(sq, weights)?;
        let s = tape.sum(weighted);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    Ok(GeoTerm {
        loss: total.expect("non-empty representative set"),
        per_sample,
        active,
        clearances,
    })
}
