//! Counterfactual episode generation.
//!
//! For each scene an obstacle-free reference plan is built first, an
//! obstacle is then placed so that it interferes with that plan, and a
//! collision-free plan to the same goal is produced with a joint-space RRT.
//! Only the collision-free plan is kept.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{ActionChunk, ConditionVector, PolicyError, TrainingSample};
use crate::geometry::{obb_sdf, GeometryError, ObbObstacle};
use crate::kinematics::{JointState, KinematicChain, KinematicsError};
use crate::seeds;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scene rejected: {0}")]
    Resample(String),
    #[error("episode {index}: no valid scene after {retries} attempts ({last})")]
    Exhausted { index: usize, retries: usize, last: String },
    #[error("dataset count must be >= 1")]
    EmptyDataset,
    #[error("dataset line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("dataset chain hash {found} does not match chain {expected}")]
    ChainMismatch { expected: String, found: String },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ScenarioError>;

fn resample(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Resample(msg.into())
}

/// Generation parameters. Distances in metres, angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Interference threshold: the reference plan must pass closer than this.
    pub epsilon: f64,
    /// Required clearance of the start configuration.
    pub start_clearance: f64,
    /// Required distance between the target point and the obstacle surface.
    pub target_margin: f64,
    /// Collision margin of the planner.
    pub planner_margin: f64,
    pub waypoints: usize,
    pub ik_tolerance: f64,
    pub ik_iterations: usize,
    pub placement_attempts: usize,
    pub placement_radius: f64,
    pub half_extent_range: [f64; 2],
    pub rrt_step: f64,
    pub rrt_goal_bias: f64,
    pub rrt_max_nodes: usize,
    pub edge_resolution: f64,
    pub shortcut_attempts: usize,
    pub scene_retries: usize,
    /// Obstacle placements tried per scene before it is resampled.
    pub placement_rounds: usize,
    /// Sampling box for start joints, applied symmetrically.
    pub start_joint_range: f64,
    pub target_radius: [f64; 2],
    /// Minimum distance between the start end-effector and the target.
    pub min_travel: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.10,
            start_clearance: 0.10,
            target_margin: 0.02,
            planner_margin: 0.01,
            waypoints: 80,
            ik_tolerance: 0.005,
            ik_iterations: 500,
            placement_attempts: 200,
            placement_radius: 0.15,
            half_extent_range: [0.03, 0.08],
            rrt_step: 0.1,
            rrt_goal_bias: 0.1,
            rrt_max_nodes: 5000,
            edge_resolution: 0.02,
            shortcut_attempts: 200,
            scene_retries: 50,
            placement_rounds: 5,
            start_joint_range: 2.0,
            target_radius: [0.3, 0.85],
            min_travel: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub start: Vec<f64>,
    pub target: Vector3<f64>,
    pub obstacle: ObbObstacle,
    pub seed: u64,
}

impl Scene {
    pub fn condition(&self, joints: &[f64]) -> ConditionVector {
        ConditionVector::new(joints, &self.target, &self.obstacle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub epsilon: f64,
    pub planner_seed: u64,
    pub reference_min_clearance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: usize,
    pub scene: Scene,
    /// `waypoints x dof` joint angles.
    pub trajectory: Vec<Vec<f64>>,
    pub instruction: String,
    /// Present for freshly generated episodes, absent when read from disk.
    pub provenance: Option<Provenance>,
}

impl Episode {
    /// One training sample per waypoint `t`: the chunk holds waypoints
    /// `t + stride * (j + 1)` for `j < horizon`, held at the final waypoint.
    pub fn training_samples(&self, horizon: usize, stride: usize) -> std::result::Result<Vec<TrainingSample>, PolicyError> {
        let n = self.trajectory.len();
        let dof = self.scene.start.len();
        (0..n)
            .map(|t| {
                let values = (0..horizon)
                    .flat_map(|j| self.trajectory[(t + stride * (j + 1)).min(n - 1)].iter().copied())
                    .collect();
                Ok(TrainingSample {
                    condition: self.scene.condition(&self.trajectory[t]),
                    chunk: ActionChunk::new(horizon, dof, values)?,
                    obstacle: self.scene.obstacle.clone(),
                })
            })
            .collect()
    }
}

/// Minimum surface clearance over every configuration and representative link.
pub fn min_clearance(chain: &KinematicChain, configs: &[Vec<f64>], obstacle: &ObbObstacle) -> Result<f64> {
    let mut best = f64::INFINITY;
    for q in configs {
        best = best.min(config_clearance(chain, q, obstacle)?);
    }
    Ok(best)
}

pub fn config_clearance(chain: &KinematicChain, q: &[f64], obstacle: &ObbObstacle) -> Result<f64> {
    let points = chain.points_at(q)?;
    Ok(points
        .iter()
        .zip(chain.radii())
        .map(|(p, r)| obb_sdf(p, obstacle) - r)
        .fold(f64::INFINITY, f64::min))
}

/// `n` waypoints on the straight joint-space segment from `start` to `goal`.
pub fn interpolate(start: &[f64], goal: &[f64], n: usize) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![goal.to_vec()];
    }
    (0..n)
        .map(|i| {
            let s = i as f64 / (n - 1) as f64;
            start.iter().zip(goal).map(|(a, b)| a + s * (b - a)).collect()
        })
        .collect()
}

/// Goal configuration for `target`, seeded from `start`.
pub fn solve_goal(chain: &KinematicChain, start: &[f64], target: &Vector3<f64>, cfg: &GenerationConfig) -> Result<Vec<f64>> {
    chain
        .solve_ik(target, &JointState(start.to_vec()), cfg.ik_tolerance, cfg.ik_iterations)
        .map(|q| q.0)
        .map_err(|e| resample(format!("goal: {e}")))
}

/// Obstacle-free reference plan: straight joint interpolation to the IK goal.
pub fn plan_reference(
    chain: &KinematicChain,
    start: &[f64],
    target: &Vector3<f64>,
    cfg: &GenerationConfig,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let goal = solve_goal(chain, start, target, cfg)?;
    let path = interpolate(start, &goal, cfg.waypoints);
    Ok((goal, path))
}

/// Checks the scene invariants that do not involve a plan.
pub fn scene_is_valid(
    chain: &KinematicChain,
    start: &[f64],
    target: &Vector3<f64>,
    obstacle: &ObbObstacle,
    cfg: &GenerationConfig,
) -> Result<bool> {
    if obb_sdf(target, obstacle) <= cfg.target_margin {
        return Ok(false);
    }
    Ok(config_clearance(chain, start, obstacle)? > cfg.start_clearance)
}

/// Samples boxes near the reference path until one brings the path closer
/// than `epsilon` while keeping the scene valid and satisfying `accept`.
pub fn place_obstacle_counterfactual(
    chain: &KinematicChain,
    reference: &[Vec<f64>],
    target: &Vector3<f64>,
    epsilon: f64,
    cfg: &GenerationConfig,
    rng: &mut ChaCha8Rng,
    accept: impl Fn(&ObbObstacle) -> bool,
) -> Result<ObbObstacle> {
    if !(epsilon > 0.0) {
        return Err(resample(format!("epsilon must be > 0, got {epsilon}")));
    }
    let start = &reference[0];
    for _ in 0..cfg.placement_attempts {
        let waypoint = &reference[rng.gen_range(0..reference.len())];
        let points = chain.points_at(waypoint)?;
        let anchor = points[rng.gen_range(0..points.len())];
        let radius = cfg.placement_radius * rng.gen::<f64>().sqrt();
        let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let center = anchor + Vector3::new(radius * angle.cos(), radius * angle.sin(), 0.0);
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let [lo, hi] = cfg.half_extent_range;
        let half = Vector3::new(rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        let obstacle = ObbObstacle::from_yaw(center, yaw, half)?;
        if !accept(&obstacle) || !scene_is_valid(chain, start, target, &obstacle, cfg)? {
            continue;
        }
        if min_clearance(chain, reference, &obstacle)? < epsilon {
            return Ok(obstacle);
        }
    }
    Err(resample("obstacle placement budget exhausted"))
}

struct Planner<'a> {
    chain: &'a KinematicChain,
    obstacle: &'a ObbObstacle,
    cfg: &'a GenerationConfig,
}

impl Planner<'_> {
    fn free(&self, q: &[f64]) -> Result<bool> {
        Ok(config_clearance(self.chain, q, self.obstacle)? >= self.cfg.planner_margin)
    }

    /// Checks the segment at no more than `edge_resolution` per joint.
    fn edge_free(&self, a: &[f64], b: &[f64]) -> Result<bool> {
        let span = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let steps = (span / self.cfg.edge_resolution).ceil().max(1.0) as usize;
        for i in 1..=steps {
            let s = i as f64 / steps as f64;
            let q: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect();
            if !self.free(&q)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn rrt(&self, start: &[f64], goal: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        if !self.free(start)? || !self.free(goal)? {
            return Err(resample("start or goal configuration in collision"));
        }
        if self.edge_free(start, goal)? {
            return Ok(vec![start.to_vec(), goal.to_vec()]);
        }
        let limits = self.chain.limits();
        let mut nodes: Vec<(Vec<f64>, usize)> = vec![(start.to_vec(), 0)];
        for _ in 0..self.cfg.rrt_max_nodes {
            let sample: Vec<f64> = if rng.gen::<f64>() < self.cfg.rrt_goal_bias {
                goal.to_vec()
            } else {
                limits.iter().map(|[lo, hi]| rng.gen_range(*lo..*hi)).collect()
            };
            let (nearest, _) = nodes
                .iter()
                .enumerate()
                .map(|(i, (q, _))| (i, dist(q, &sample)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
            let from = nodes[nearest].0.clone();
            let d = dist(&from, &sample);
            let new: Vec<f64> = if d <= self.cfg.rrt_step {
                sample
            } else {
                from.iter()
                    .zip(&sample)
                    .map(|(a, b)| a + (b - a) * self.cfg.rrt_step / d)
                    .collect()
            };
            if !self.edge_free(&from, &new)? {
                continue;
            }
            nodes.push((new.clone(), nearest));
            if dist(&new, goal) <= self.cfg.rrt_step && self.edge_free(&new, goal)? {
                let mut path = vec![goal.to_vec()];
                let mut idx = nodes.len() - 1;
                loop {
                    path.push(nodes[idx].0.clone());
                    if idx == 0 {
                        break;
                    }
                    idx = nodes[idx].1;
                }
                path.reverse();
                return Ok(path);
            }
        }
        Err(resample("planner exhausted its node budget"))
    }

    fn shortcut(&self, mut path: Vec<Vec<f64>>, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        for _ in 0..self.cfg.shortcut_attempts {
            if path.len() < 3 {
                break;
            }
            let i = rng.gen_range(0..path.len() - 2);
            let j = rng.gen_range(i + 2..path.len());
            if self.edge_free(&path[i], &path[j])? {
                path.drain(i + 1..j);
            }
        }
        Ok(path)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `n` points evenly spaced by arc length along a joint-space polyline.
pub fn resample_by_arc_length(path: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let mut cumulative = vec![0.0];
    for w in path.windows(2) {
        cumulative.push(cumulative.last().unwrap() + dist(&w[0], &w[1]));
    }
    let total = *cumulative.last().unwrap();
    if total == 0.0 || path.len() == 1 {
        return vec![path[0].clone(); n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        if i == n - 1 {
            out.push(path.last().unwrap().clone());
            break;
        }
        let s = total * i as f64 / (n - 1) as f64;
        while seg + 1 < path.len() - 1 && cumulative[seg + 1] < s {
            seg += 1;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let frac = if len > 0.0 { ((s - cumulative[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(path[seg].iter().zip(&path[seg + 1]).map(|(a, b)| a + frac * (b - a)).collect());
    }
    out
}

/// Collision-free plan from the scene start to `goal` avoiding the scene
/// obstacle, shortcut-smoothed and resampled to `cfg.waypoints`.
pub fn replan_with_obstacle(
    chain: &KinematicChain,
    scene: &Scene,
    goal: &[f64],
    cfg: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let planner = Planner {
        chain,
        obstacle: &scene.obstacle,
        cfg,
    };
    let raw = planner.rrt(&scene.start, goal, rng)?;
    let smooth = planner.shortcut(raw, rng)?;
    let path = resample_by_arc_length(&smooth, cfg.waypoints);
    if min_clearance(chain, &path, &scene.obstacle)? < cfg.planner_margin {
        return Err(resample("resampled plan violates the planner margin"));
    }
    Ok(path)
}

pub fn instruction_for(target: &Vector3<f64>) -> String {
    format!("Reach the target at ({:.3}, {:.3}), avoiding the obstacle", target.x, target.y)
}

/// Start joints and a target point at least `min_travel` from the start
/// end-effector.
fn sample_start_and_target(chain: &KinematicChain, cfg: &GenerationConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vector3<f64>)> {
    let range = cfg.start_joint_range;
    for _ in 0..100 {
        let start: Vec<f64> = chain
            .limits()
            .iter()
            .map(|[lo, hi]| rng.gen_range(lo.max(-range)..hi.min(range)))
            .collect();
        let r = rng.gen_range(cfg.target_radius[0]..cfg.target_radius[1]);
        let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let target = Vector3::new(r * angle.cos(), r * angle.sin(), 0.0);
        if (chain.end_effector(&start)? - target).norm() >= cfg.min_travel {
            return Ok((start, target));
        }
    }
    Err(resample("no target far enough from the start"))
}

/// One scene from a single seed: start and target are fixed, the obstacle
/// is re-placed up to `placement_rounds` times when no collision-free plan
/// is found.
pub fn generate_episode_attempt(chain: &KinematicChain, id: usize, seed: u64, cfg: &GenerationConfig) -> Result<Episode> {
    let mut rng = seeds::rng(seed, &[0]);
    let (start, target) = sample_start_and_target(chain, cfg, &mut rng)?;
    let (goal, reference) = plan_reference(chain, &start, &target, cfg)?;
    let goal_free = |o: &ObbObstacle| config_clearance(chain, &goal, o).map_or(false, |d| d >= cfg.planner_margin);
    let mut last = resample("no placement rounds");
    for round in 0..cfg.placement_rounds as u64 {
        let mut place_rng = seeds::rng(seed, &[1, round]);
        let obstacle = place_obstacle_counterfactual(chain, &reference, &target, cfg.epsilon, cfg, &mut place_rng, goal_free)?;
        let reference_min_clearance = min_clearance(chain, &reference, &obstacle)?;
        let scene = Scene {
            start: start.clone(),
            target,
            obstacle,
            seed,
        };
        let planner_seed = seeds::derive(seed, &[2, round]);
        let mut plan_rng = seeds::rng(planner_seed, &[]);
        match replan_with_obstacle(chain, &scene, &goal, cfg, &mut plan_rng) {
            Ok(trajectory) => {
                return Ok(Episode {
                    id,
                    instruction: instruction_for(&scene.target),
                    scene,
                    trajectory,
                    provenance: Some(Provenance {
                        epsilon: cfg.epsilon,
                        planner_seed,
                        reference_min_clearance,
                    }),
                })
            }
            Err(e @ ScenarioError::Resample(_)) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// Retries scene sampling until an episode is produced.
pub fn generate_episode(chain: &KinematicChain, id: usize, episode_seed: u64, cfg: &GenerationConfig) -> Result<Episode> {
    let mut last = String::new();
    for attempt in 0..cfg.scene_retries {
        let seed = seeds::derive(episode_seed, &[attempt as u64]);
        match generate_episode_attempt(chain, id, seed, cfg) {
            Ok(ep) => return Ok(ep),
            Err(ScenarioError::Resample(msg)) => last = msg,
            Err(e) => return Err(e),
        }
    }
    Err(ScenarioError::Exhausted {
        index: id,
        retries: cfg.scene_retries,
        last,
    })
}

/// Table-I style summary of a set of demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub d_min_mean: f64,
    pub d_min_std: f64,
    pub d_tgt_mean: f64,
    pub d_tgt_std: f64,
    pub p_dmin_lt_002: f64,
    pub p_dmin_lt_005: f64,
    pub p_dtgt_lt_010: f64,
    pub p_dtgt_lt_015: f64,
}

impl DatasetStats {
    pub fn compute(chain: &KinematicChain, episodes: &[Episode]) -> Result<Self> {
        let mut dmin = Vec::with_capacity(episodes.len());
        let mut dtgt = Vec::with_capacity(episodes.len());
        for ep in episodes {
            dmin.push(min_clearance(chain, &ep.trajectory, &ep.scene.obstacle)?);
            let last = ep.trajectory.last().expect("non-empty trajectory");
            dtgt.push((chain.end_effector(last)? - ep.scene.target).norm());
        }
        let frac = |v: &[f64], t: f64| v.iter().filter(|&&x| x < t).count() as f64 / v.len() as f64;
        let (dm, ds) = mean_std(&dmin);
        let (tm, ts) = mean_std(&dtgt);
        Ok(Self {
            episodes: episodes.len(),
            steps_per_episode: episodes.first().map_or(0, |e| e.trajectory.len()),
            d_min_mean: dm,
            d_min_std: ds,
            d_tgt_mean: tm,
            d_tgt_std: ts,
            p_dmin_lt_002: frac(&dmin, 0.02),
            p_dmin_lt_005: frac(&dmin, 0.05),
            p_dtgt_lt_010: frac(&dtgt, 0.10),
            p_dtgt_lt_015: frac(&dtgt, 0.15),
        })
    }

    pub fn render(&self) -> String {
        format!(
            "Total episodes          {}\n\
             Steps per episode       {}\n\
             d_min (m)               {:.4} +/- {:.4}\n\
             d_tgt (m)               {:.4} +/- {:.4}\n\
             Pr(d_min < 0.02)        {:.2}%\n\
             Pr(d_min < 0.05)        {:.2}%\n\
             Pr(d_tgt < 0.10)        {:.2}%\n\
             Pr(d_tgt < 0.15)        {:.2}%\n",
            self.episodes,
            self.steps_per_episode,
            self.d_min_mean,
            self.d_min_std,
            self.d_tgt_mean,
            self.d_tgt_std,
            100.0 * self.p_dmin_lt_002,
            100.0 * self.p_dmin_lt_005,
            100.0 * self.p_dtgt_lt_010,
            100.0 * self.p_dtgt_lt_015,
        )
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Generates `count` episodes in parallel, each from its own derived seed,
/// returned in index order.
pub fn generate_dataset(chain: &KinematicChain, count: usize, seed: u64, cfg: &GenerationConfig) -> Result<Vec<Episode>> {
    if count == 0 {
        return Err(ScenarioError::EmptyDataset);
    }
    (0..count)
        .into_par_iter()
        .map(|i| generate_episode(chain, i, seeds::derive(seed, &[i as u64]), cfg))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ObstacleRecord {
    center: [f64; 3],
    yaw: f64,
    half_extents: [f64; 3],
}

/// One line of the dataset file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    episode_id: usize,
    seed: u64,
    chain_hash: String,
    start_joints: Vec<f64>,
    target: [f64; 3],
    obstacle: ObstacleRecord,
    trajectory: Vec<Vec<f64>>,
    instruction: String,
}

pub fn write_jsonl<W: Write>(chain: &KinematicChain, episodes: &[Episode], mut out: W) -> Result<()> {
    for ep in episodes {
        let o = &ep.scene.obstacle;
        let record = EpisodeRecord {
            episode_id: ep.id,
            seed: ep.scene.seed,
            chain_hash: chain.hash().to_string(),
            start_joints: ep.scene.start.clone(),
            target: [ep.scene.target.x, ep.scene.target.y, ep.scene.target.z],
            obstacle: ObstacleRecord {
                center: [o.center().x, o.center().y, o.center().z],
                yaw: o.yaw(),
                half_extents: [o.half_extents().x, o.half_extents().y, o.half_extents().z],
            },
            trajectory: ep.trajectory.clone(),
            instruction: ep.instruction.clone(),
        };
        serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(chain: &KinematicChain, episodes: &[Episode], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(chain, episodes, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a dataset, checking every record against `chain`.
pub fn read_jsonl<R: BufRead>(chain: &KinematicChain, input: R) -> Result<Vec<Episode>> {
    let mut episodes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let format_err = |message: String| ScenarioError::Format { line: i + 1, message };
        let r: EpisodeRecord = serde_json::from_str(&line).map_err(|e| format_err(e.to_string()))?;
        if r.chain_hash != chain.hash() {
            return Err(ScenarioError::ChainMismatch {
                expected: chain.hash().to_string(),
                found: r.chain_hash,
            });
        }
        if r.start_joints.len() != chain.dof() || r.trajectory.iter().any(|q| q.len() != chain.dof()) || r.trajectory.is_empty() {
            return Err(format_err("joint vectors do not match the chain".into()));
        }
        let obstacle = ObbObstacle::from_yaw(
            Vector3::from(r.obstacle.center),
            r.obstacle.yaw,
            Vector3::from(r.obstacle.half_extents),
        )?;
        episodes.push(Episode {
            id: r.episode_id,
            scene: Scene {
                start: r.start_joints,
                target: Vector3::from(r.target),
                obstacle,
                seed: r.seed,
            },
            trajectory: r.trajectory,
            instruction: r.instruction,
            provenance: None,
        });
    }
    Ok(episodes)
}

pub fn load_dataset(chain: &KinematicChain, path: &Path) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path)?;
    read_jsonl(chain, std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_examples() {
        let path = interpolate(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 5);
        assert_eq!(path[1], vec![0.25, 0.0, 0.0]);
        assert_eq!(path[4], vec![1.0, 0.0, 0.0]);
        let same = interpolate(&[0.3, 0.1, -0.2], &[0.3, 0.1, -0.2], 6);
        assert!(same.iter().all(|q| q == &vec![0.3, 0.1, -0.2]));
    }

    #[test]
    fn reference_plan_reaches_target() {
        let chain = KinematicChain::planar_default();
        let cfg = GenerationConfig::default();
        let target = Vector3::new(0.1, 0.6, 0.0);
        let (_, path) = plan_reference(&chain, &[0.2, -0.4, 0.3], &target, &cfg).unwrap();
        assert_eq!(path.len(), 80);
        assert_eq!(path[0], vec![0.2, -0.4, 0.3]);
        assert!((chain.end_effector(path.last().unwrap()).unwrap() - target).norm() <= cfg.ik_tolerance);
    }

    #[test]
    fn far_obstacle_is_always_rejected() {
        let chain = KinematicChain::planar_default();
        let cfg = GenerationConfig::default();
        let reference = interpolate(&[0.0, 0.0, 0.0], &[1.0, 0.5, 0.0], 20);
        let far = ObbObstacle::from_yaw(Vector3::new(10.0, 0.0, 0.0), 0.0, Vector3::repeat(0.05)).unwrap();
        assert!(min_clearance(&chain, &reference, &far).unwrap() > 5.0);
        let mut rng = seeds::rng(1, &[]);
        let target = chain.end_effector(&[1.0, 0.5, 0.0]).unwrap();
        // An acceptance predicate that only admits far-away boxes never succeeds.
        let res = place_obstacle_counterfactual(&chain, &reference, &target, 0.10, &cfg, &mut rng, |o| o.center().norm() > 5.0);
        assert!(matches!(res, Err(ScenarioError::Resample(_))));
    }

    #[test]
    fn accepted_obstacle_interferes_and_spares_target() {
        let chain = KinematicChain::planar_default();
        let cfg = GenerationConfig::default();
        let start = [0.0, 0.3, 0.2];
        let target = Vector3::new(-0.2, 0.6, 0.0);
        let (_, reference) = plan_reference(&chain, &start, &target, &cfg).unwrap();
        let mut rng = seeds::rng(3, &[]);
        let obb = place_obstacle_counterfactual(&chain, &reference, &target, 0.10, &cfg, &mut rng, |_| true).unwrap();
        assert!(min_clearance(&chain, &reference, &obb).unwrap() < 0.10);
        assert!(!obb.contains(&target));
        assert!(obb_sdf(&target, &obb) > cfg.target_margin);
    }

    #[test]
    fn far_obstacle_replan_is_straight() {
        let chain = KinematicChain::planar_default();
        let cfg = GenerationConfig::default();
        let scene = Scene {
            start: vec![0.0, 0.2, 0.1],
            target: Vector3::zeros(),
            obstacle: ObbObstacle::from_yaw(Vector3::new(10.0, 0.0, 0.0), 0.0, Vector3::repeat(0.05)).unwrap(),
            seed: 0,
        };
        let goal = [1.0, -0.5, 0.4];
        let plan = replan_with_obstacle(&chain, &scene, &goal, &cfg, &mut seeds::rng(0, &[])).unwrap();
        let straight = interpolate(&scene.start, &goal, cfg.waypoints);
        for (a, b) in plan.iter().zip(&straight) {
            assert!(dist(a, b) < 1e-12);
        }
    }

    #[test]
    fn arc_length_resampling_is_uniform() {
        let path = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 3.0]];
        let r = resample_by_arc_length(&path, 5);
        assert_eq!(r.len(), 5);
        assert_eq!(r[0], vec![0.0, 0.0]);
        assert_eq!(r[4], vec![1.0, 3.0]);
        for w in r.windows(2) {
            assert!((dist(&w[0], &w[1]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn training_samples_hold_final_waypoint() {
        let chain = KinematicChain::planar_default();
        let traj = interpolate(&[0.0; 3], &[0.9, 0.0, 0.0], 10);
        let ep = Episode {
            id: 0,
            scene: Scene {
                start: vec![0.0; 3],
                target: chain.end_effector(&[0.9, 0.0, 0.0]).unwrap(),
                obstacle: ObbObstacle::from_yaw(Vector3::new(0.0, -0.5, 0.0), 0.1, Vector3::repeat(0.05)).unwrap(),
                seed: 0,
            },
            trajectory: traj.clone(),
            instruction: String::new(),
            provenance: None,
        };
        let samples = ep.training_samples(4, 2).unwrap();
        assert_eq!(samples.len(), 10);
        assert_eq!(samples[0].chunk.step(0), traj[2].as_slice());
        assert_eq!(samples[0].chunk.step(3), traj[8].as_slice());
        assert_eq!(samples[5].chunk.step(1), traj[9].as_slice());
        assert_eq!(samples[3].condition.joints, traj[3]);
    }
}
