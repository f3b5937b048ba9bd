//! Gradient-check fixtures for the diffusion losses.

use feaslab::autodiff::Tensor;
use feaslab::diffusion::train::{batch_loss_and_grads, BatchNoise};
use feaslab::diffusion::{ActionChunk, ConditionVector, DiffusionSchedule, NetworkShape, Objective, PolicyNetwork, TrainingSample};
use feaslab::geometry::ObbObstacle;
use feaslab::kinematics::KinematicChain;
use feaslab::seeds;
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_shape() -> NetworkShape {
    NetworkShape {
        horizon: 2,
        dof: 3,
        condition_width: ConditionVector::width_for(3),
        hidden: vec![2],
        embed_width: 4,
    }
}

pub fn random_sample(rng: &mut ChaCha8Rng, horizon: usize) -> TrainingSample {
    let joints: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let obstacle = ObbObstacle::from_yaw(
        Vector3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), 0.0),
        rng.gen_range(-3.0..3.0),
        Vector3::new(0.05, 0.06, 0.07),
    )
    .unwrap();
    let target = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0);
    let chunk = ActionChunk::new(horizon, 3, (0..horizon * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    TrainingSample {
        condition: ConditionVector::new(&joints, &target, &obstacle),
        chunk,
        obstacle,
    }
}

/// Moves the sample's obstacle so the tool point of the predicted first
/// step sits `gap` metres in front of a box face.
pub fn place_box_near_prediction(
    net: &PolicyNetwork,
    chain: &KinematicChain,
    sample: &mut TrainingSample,
    noise: &BatchNoise,
    idx: usize,
    schedule: &DiffusionSchedule,
    gap: f64,
    yaw: f64,
) {
    let noisy = schedule.forward_diffuse(&sample.chunk, noise.steps[idx], &noise.noise[idx]).unwrap();
    let predicted = net.denoise_predict(&noisy, &sample.condition, noise.steps[idx]).unwrap();
    let tool = chain.end_effector(predicted.step(0)).unwrap();
    let half = Vector3::new(0.05, 0.06, 0.07);
    let normal = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let radius = *chain.radii().last().unwrap();
    let center = tool - normal * (half.x + radius + gap);
    sample.obstacle = ObbObstacle::from_yaw(center, yaw, half).unwrap();
}

pub fn flat_params(net: &PolicyNetwork) -> Vec<f64> {
    net.layers()
        .iter()
        .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied().collect::<Vec<_>>())
        .collect()
}

pub fn with_param(net: &PolicyNetwork, index: usize, delta: f64) -> PolicyNetwork {
    let mut out = net.clone();
    let mut rest = index;
    let mut slot = None;
    for (i, layer) in net.layers().iter().enumerate() {
        for (which, t) in [&layer.weight, &layer.bias].into_iter().enumerate() {
            if slot.is_none() {
                if rest < t.len() {
                    slot = Some((i, which, rest));
                } else {
                    rest -= t.len();
                }
            }
        }
    }
    let (i, which, offset) = slot.expect("parameter index in range");
    let layer = &mut out.layers_mut()[i];
    let t = if which == 0 { &mut layer.weight } else { &mut layer.bias };
    t.data_mut()[offset] += delta;
    out
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Worst max-normalised relative errors `(mse, geo, total)` of the analytic
/// parameter gradients against central differences, and the number of cases
/// whose violation set came out empty.
pub fn gradient_suite(cases: u64) -> ([f64; 3], usize) {
    let chain = KinematicChain::planar_default();
    let schedule = DiffusionSchedule::new(20, 1e-4, 0.2).unwrap();
    let delta = 0.10;
    let h = 1e-6;
    let mut worst = [0.0f64; 3];
    let mut empty = 0;
    for case in 0..cases {
        let mut rng = seeds::rng(11, &[case]);
        let net = PolicyNetwork::init(tiny_shape(), &mut rng);
        let mut batch: Vec<TrainingSample> = (0..2).map(|_| random_sample(&mut rng, 2)).collect();
        let noise = BatchNoise::draw(&mut rng, &batch, &schedule);
        for i in 0..batch.len() {
            let gap = rng.gen_range(-0.03..0.07);
            let yaw = rng.gen_range(-3.0..3.0);
            place_box_near_prediction(&net, &chain, &mut batch[i], &noise, i, &schedule, gap, yaw);
        }
        let feas = Objective::Feasibility { delta, lambda: 1.0 };
        let (losses, total_grads) = batch_loss_and_grads(&net, &batch, &noise, &schedule, &chain, feas).unwrap();
        if losses.geo <= 0.0 {
            empty += 1;
        }
        let (_, mse_grads) = batch_loss_and_grads(&net, &batch, &noise, &schedule, &chain, Objective::Imitation).unwrap();
        let flat = |g: &[Tensor]| g.iter().flat_map(|t| t.data().to_vec()).collect::<Vec<f64>>();
        let total_a = flat(&total_grads);
        let mse_a = flat(&mse_grads);
        let geo_a: Vec<f64> = total_a.iter().zip(&mse_a).map(|(t, m)| t - m).collect();

        let n = flat_params(&net).len();
        let mut total_n = vec![0.0; n];
        let mut mse_n = vec![0.0; n];
        let mut geo_n = vec![0.0; n];
        for p in 0..n {
            let eval = |d: f64| {
                batch_loss_and_grads(&with_param(&net, p, d), &batch, &noise, &schedule, &chain, feas)
                    .unwrap()
                    .0
            };
            let (plus, minus) = (eval(h), eval(-h));
            total_n[p] = (plus.total - minus.total) / (2.0 * h);
            mse_n[p] = (plus.mse - minus.mse) / (2.0 * h);
            geo_n[p] = (plus.geo - minus.geo) / (2.0 * h);
        }
        for (slot, err) in worst.iter_mut().zip([
            relative_error(&mse_a, &mse_n),
            relative_error(&geo_a, &geo_n),
            relative_error(&total_a, &total_n),
        ]) {
            *slot = slot.max(err);
        }
    }
    (worst, empty)
}
