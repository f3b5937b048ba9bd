//! Rollouts, safety metrics, perturbation protocols and bootstrap intervals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{sample_chunk, ActionChunk, ConditionVector, DiffusionSchedule, PolicyError, PolicyNetwork};
use crate::geometry::ObbObstacle;
use crate::kinematics::{KinematicChain, KinematicsError};
use crate::scenario::{self, Episode, GenerationConfig, Scene, ScenarioError};
use crate::seeds;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluation records")]
    NoRecords,
    #[error("bootstrap replicate count must be >= 1")]
    NoReplicates,
    #[error("perturbation of episode {episode} failed after {attempts} attempts")]
    Perturbation { episode: usize, attempts: usize },
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

type Result<T> = std::result::Result<T, EvalError>;

/// Outcome of one rollout, or of one averaged perturbation under the large protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub episode_id: usize,
    pub perturbation_id: usize,
    pub rollout_id: usize,
    pub d_min: f64,
    pub d_tgt: f64,
    pub executed_steps: usize,
    pub collided: bool,
}

impl EvalRecord {
    pub fn new(episode_id: usize, perturbation_id: usize, rollout_id: usize, d_min: f64, d_tgt: f64, executed_steps: usize) -> Self {
        Self {
            episode_id,
            perturbation_id,
            rollout_id,
            d_min,
            d_tgt,
            executed_steps,
            collided: d_min < 0.0,
        }
    }
}

/// Anything that proposes the next action chunk.
pub trait ChunkPolicy: Sync {
    fn horizon(&self) -> usize;

    /// Chunk number `call` of a rollout on `episode` from condition `cond`.
    fn propose(&self, episode: &Episode, call: usize, cond: &ConditionVector, rng: &mut ChaCha8Rng) -> Result<ActionChunk>;
}

/// Trained diffusion policy sampled with the reverse process.
pub struct DiffusionPolicy<'a> {
    pub net: &'a PolicyNetwork,
    pub schedule: &'a DiffusionSchedule,
}

impl ChunkPolicy for DiffusionPolicy<'_> {
    fn horizon(&self) -> usize {
        self.net.shape().horizon
    }

    fn propose(&self, _: &Episode, _: usize, cond: &ConditionVector, rng: &mut ChaCha8Rng) -> Result<ActionChunk> {
        Ok(sample_chunk(self.net, cond, self.schedule, rng)?)
    }
}

/// Replays the demonstration with the same indexing used to build
/// training chunks.
pub struct ReplayPolicy {
    pub horizon: usize,
    pub stride: usize,
}

impl ChunkPolicy for ReplayPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn propose(&self, episode: &Episode, call: usize, _: &ConditionVector, _: &mut ChaCha8Rng) -> Result<ActionChunk> {
        let traj = &episode.trajectory;
        let n = traj.len();
        let values = (0..self.horizon)
            .flat_map(|j| traj[(self.stride * (call * self.horizon + j + 1)).min(n - 1)].iter().copied())
            .collect();
        Ok(ActionChunk::new(self.horizon, episode.scene.start.len(), values)?)
    }
}

/// Executes `chunks` chunks open-loop within each chunk, reconditioning
/// between chunks. Returns `(d_min, d_tgt, executed_steps)`.
pub fn rollout(
    policy: &dyn ChunkPolicy,
    episode: &Episode,
    scene: &Scene,
    chain: &KinematicChain,
    chunks: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, usize)> {
    let mut joints = scene.start.clone();
    let mut d_min = f64::INFINITY;
    let mut steps = 0;
    for call in 0..chunks {
        let cond = scene.condition(&joints);
        let chunk = policy.propose(episode, call, &cond, rng)?;
        for tau in 0..chunk.horizon() {
            joints.copy_from_slice(chunk.step(tau));
            chain.clamp_to_limits(&mut joints);
            d_min = d_min.min(scenario::config_clearance(chain, &joints, &scene.obstacle)?);
            steps += 1;
        }
    }
    let d_tgt = (chain.end_effector(&joints)? - scene.target).norm();
    Ok((d_min, d_tgt, steps))
}

/// Safe success rate `Pr(d_min > alpha and d_tgt < beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsrPair {
    pub alpha: f64,
    pub beta: f64,
}

impl SsrPair {
    pub const SAFE_APPROACH: SsrPair = SsrPair { alpha: 0.05, beta: 0.15 };
    pub const PRECISE_REACH: SsrPair = SsrPair { alpha: 0.02, beta: 0.10 };

    pub fn passes(&self, r: &EvalRecord) -> bool {
        r.d_min > self.alpha && r.d_tgt < self.beta
    }

    pub fn label(&self) -> String {
        format!("ssr_{}_{}", self.alpha, self.beta)
    }
}

pub fn default_pairs() -> Vec<SsrPair> {
    vec![SsrPair::SAFE_APPROACH, SsrPair::PRECISE_REACH]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: usize,
    pub episodes: usize,
    pub pairs: Vec<SsrPair>,
    pub ssr: Vec<f64>,
    pub p_dmin_lt_002: f64,
    pub p_dmin_lt_005: f64,
    pub p_dtgt_lt_010: f64,
    pub p_dtgt_lt_015: f64,
    /// Bootstrap half-widths in percentage points, one per pair.
    pub ci_half_width: Option<Vec<f64>>,
    /// Set when the bootstrap ran over a single episode.
    pub degenerate_ci: bool,
}

fn fraction(records: &[EvalRecord], pred: impl Fn(&EvalRecord) -> bool) -> f64 {
    records.iter().filter(|r| pred(r)).count() as f64 / records.len() as f64
}

pub fn ssr(records: &[EvalRecord], pair: SsrPair) -> Result<f64> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    Ok(fraction(records, |r| pair.passes(r)))
}

pub fn compute_metrics(records: &[EvalRecord], pairs: &[SsrPair]) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let episodes = clusters(records).len();
    Ok(MetricReport {
        records: records.len(),
        episodes,
        pairs: pairs.to_vec(),
        ssr: pairs.iter().map(|&p| fraction(records, |r| p.passes(r))).collect(),
        p_dmin_lt_002: fraction(records, |r| r.d_min < 0.02),
        p_dmin_lt_005: fraction(records, |r| r.d_min < 0.05),
        p_dtgt_lt_010: fraction(records, |r| r.d_tgt < 0.10),
        p_dtgt_lt_015: fraction(records, |r| r.d_tgt < 0.15),
        ci_half_width: None,
        degenerate_ci: false,
    })
}

/// Metrics plus clustered bootstrap half-widths for every pair.
pub fn compute_metrics_with_ci(records: &[EvalRecord], pairs: &[SsrPair], replicates: usize, seed: u64) -> Result<MetricReport> {
    let mut report = compute_metrics(records, pairs)?;
    let widths = pairs
        .iter()
        .enumerate()
        .map(|(i, &p)| clustered_bootstrap_ci(records, p, replicates, seeds::derive(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    report.ci_half_width = Some(widths);
    report.degenerate_ci = report.episodes == 1;
    Ok(report)
}

/// Per-episode `(passes, count)` in ascending episode order.
fn clusters_for(records: &[EvalRecord], pair: SsrPair) -> Vec<(usize, usize)> {
    let mut map: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = map.entry(r.episode_id).or_default();
        e.0 += pair.passes(r) as usize;
        e.1 += 1;
    }
    map.into_values().collect()
}

fn clusters(records: &[EvalRecord]) -> Vec<usize> {
    let mut ids: Vec<usize> = records.iter().map(|r| r.episode_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// SSR replicate values from resampling episodes with replacement.
pub fn bootstrap_replicates(records: &[EvalRecord], pair: SsrPair, replicates: usize, seed: u64) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    if replicates == 0 {
        return Err(EvalError::NoReplicates);
    }
    let groups = clusters_for(records, pair);
    let n = groups.len();
    let mut rng = seeds::rng(seed, &[]);
    Ok((0..replicates)
        .map(|_| {
            let (mut pass, mut count) = (0usize, 0usize);
            for _ in 0..n {
                let (p, c) = groups[rng.gen_range(0..n)];
                pass += p;
                count += c;
            }
            pass as f64 / count as f64
        })
        .collect())
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Half of the central 95% replicate interval, in percentage points.
pub fn clustered_bootstrap_ci(records: &[EvalRecord], pair: SsrPair, replicates: usize, seed: u64) -> Result<f64> {
    let mut values = bootstrap_replicates(records, pair, replicates, seed)?;
    values.sort_by(f64::total_cmp);
    Ok(100.0 * (percentile(&values, 0.975) - percentile(&values, 0.025)) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Small,
    Large,
}

impl Level {
    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Small => "small",
            Level::Large => "large",
        }
    }
}

impl std::str::FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "small" => Ok(Level::Small),
            "large" => Ok(Level::Large),
            other => Err(format!("unknown level '{other}' (expected small or large)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub small_perturbations: usize,
    pub small_rollouts: usize,
    pub large_perturbations: usize,
    pub large_rollouts: usize,
    pub chunks_per_episode: usize,
    pub max_shift: f64,
    pub size_jitter: f64,
    pub min_relocation: f64,
    pub perturb_attempts: usize,
    /// Placement rounds for large perturbations.
    pub relocation_rounds: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            small_perturbations: 5,
            small_rollouts: 1,
            large_perturbations: 2,
            large_rollouts: 5,
            chunks_per_episode: 3,
            max_shift: 0.10,
            size_jitter: 0.10,
            min_relocation: 0.15,
            perturb_attempts: 100,
            relocation_rounds: 10,
        }
    }
}

impl ProtocolConfig {
    pub fn counts(&self, level: Level) -> (usize, usize) {
        match level {
            Level::Small => (self.small_perturbations, self.small_rollouts),
            Level::Large => (self.large_perturbations, self.large_rollouts),
        }
    }
}

/// Shifts the obstacle in the xy-plane by at most `max_shift` and scales
/// each half-extent by a factor in `1 +- size_jitter`.
pub fn perturb_small(
    scene: &Scene,
    chain: &KinematicChain,
    gen: &GenerationConfig,
    protocol: &ProtocolConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    let o = &scene.obstacle;
    for _ in 0..protocol.perturb_attempts {
        let magnitude = rng.gen_range(0.0..=protocol.max_shift);
        let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let shift = Vector3::new(magnitude * angle.cos(), magnitude * angle.sin(), 0.0);
        let j = protocol.size_jitter;
        let scale = Vector3::new(rng.gen_range(1.0 - j..=1.0 + j), rng.gen_range(1.0 - j..=1.0 + j), rng.gen_range(1.0 - j..=1.0 + j));
        let obstacle = o.with_center_and_extents(o.center() + shift, o.half_extents().component_mul(&scale))?;
        if scenario::scene_is_valid(chain, &scene.start, &scene.target, &obstacle, gen)? {
            return Ok(Scene {
                obstacle,
                ..scene.clone()
            });
        }
    }
    Err(EvalError::Perturbation {
        episode: scene.seed as usize,
        attempts: protocol.perturb_attempts,
    })
}

/// Relocates the obstacle at least `min_relocation` away while keeping it
/// interfering with the demonstration.
pub fn perturb_large(
    scene: &Scene,
    demo: &[Vec<f64>],
    chain: &KinematicChain,
    gen: &GenerationConfig,
    protocol: &ProtocolConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    let old = *scene.obstacle.center();
    let far = |o: &ObbObstacle| (o.center() - old).norm() >= protocol.min_relocation;
    for _ in 0..protocol.relocation_rounds {
        match scenario::place_obstacle_counterfactual(chain, demo, &scene.target, gen.epsilon, gen, rng, far) {
            Ok(obstacle) => {
                return Ok(Scene {
                    obstacle,
                    ..scene.clone()
                })
            }
            Err(ScenarioError::Resample(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(EvalError::Perturbation {
        episode: scene.seed as usize,
        attempts: protocol.relocation_rounds * gen.placement_attempts,
    })
}

/// Runs the perturbation protocol over `episodes`. Records are ordered by
/// episode, perturbation and rollout regardless of scheduling.
pub fn run_protocol(
    policy: &dyn ChunkPolicy,
    episodes: &[Episode],
    level: Level,
    chain: &KinematicChain,
    gen: &GenerationConfig,
    protocol: &ProtocolConfig,
    seed: u64,
) -> Result<Vec<EvalRecord>> {
    let (perturbations, rollouts) = protocol.counts(level);
    if perturbations == 0 || rollouts == 0 || protocol.chunks_per_episode == 0 {
        return Err(EvalError::Protocol("perturbation, rollout and chunk counts must be >= 1".into()));
    }
    let level_tag = level as u64;
    let jobs: Vec<(usize, usize)> = (0..episodes.len())
        .flat_map(|e| (0..perturbations).map(move |p| (e, p)))
        .collect();
    let per_job: Vec<Vec<EvalRecord>> = jobs
        .into_par_iter()
        .map(|(e, p)| {
            let ep = &episodes[e];
            let key = ep.id as u64;
            let mut prng = seeds::rng(seed, &[level_tag, key, p as u64]);
            let scene = match level {
                Level::Small => perturb_small(&ep.scene, chain, gen, protocol, &mut prng),
                Level::Large => perturb_large(&ep.scene, &ep.trajectory, chain, gen, protocol, &mut prng),
            }
            .map_err(|err| match err {
                EvalError::Perturbation { attempts, .. } => EvalError::Perturbation { episode: ep.id, attempts },
                other => other,
            })?;
            let mut out = Vec::with_capacity(rollouts);
            for r in 0..rollouts {
                let mut rrng = seeds::rng(seed, &[level_tag, key, p as u64, 1 + r as u64]);
                let (d_min, d_tgt, steps) = rollout(policy, ep, &scene, chain, protocol.chunks_per_episode, &mut rrng)?;
                out.push(EvalRecord::new(ep.id, p, r, d_min, d_tgt, steps));
            }
            Ok(match level {
                Level::Small => out,
                Level::Large => vec![average(&out)],
            })
        })
        .collect::<Result<_>>()?;
    Ok(per_job.into_iter().flatten().collect())
}

/// One record per perturbation: metrics averaged first, then thresholded.
fn average(records: &[EvalRecord]) -> EvalRecord {
    let n = records.len() as f64;
    let d_min = records.iter().map(|r| r.d_min).sum::<f64>() / n;
    let d_tgt = records.iter().map(|r| r.d_tgt).sum::<f64>() / n;
    let first = &records[0];
    EvalRecord::new(first.episode_id, first.perturbation_id, 0, d_min, d_tgt, first.executed_steps)
}

pub fn records_to_jsonl(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// One row of a Table-II/III/IV shaped report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub delta: Option<f64>,
    pub lambda: f64,
    pub data_size: usize,
    pub level: Level,
    pub metrics: MetricReport,
    pub config_hash: String,
    pub input_hash: String,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

fn ci_at(m: &MetricReport, i: usize) -> Option<f64> {
    m.ci_half_width.as_ref().and_then(|w| w.get(i).copied())
}

/// CSV with one row per method, data size and level; SSR columns follow the
/// row's own pair list.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("method,delta,lambda,data_size,level,episodes,records");
    if let Some(first) = rows.first() {
        for p in &first.metrics.pairs {
            let _ = write!(out, ",{0},{0}_ci_pp", p.label());
        }
    }
    out.push_str(",p_dmin_lt_0.02,p_dmin_lt_0.05,p_dtgt_lt_0.10,p_dtgt_lt_0.15,degenerate_ci,config_hash,input_hash\n");
    for row in rows {
        let m = &row.metrics;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            row.method,
            opt(row.delta),
            row.lambda,
            row.data_size,
            row.level.as_str(),
            m.episodes,
            m.records
        );
        for (i, v) in m.ssr.iter().enumerate() {
            let _ = write!(out, ",{},{}", v, opt(ci_at(m, i)));
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{},{}",
            m.p_dmin_lt_002, m.p_dmin_lt_005, m.p_dtgt_lt_010, m.p_dtgt_lt_015, m.degenerate_ci, row.config_hash, row.input_hash
        );
    }
    out
}

pub fn report_markdown(title: &str, rows: &[ReportRow]) -> String {
    let mut out = format!("# {title}\n\n| Method | delta | lambda | Episodes | Level |");
    let pairs = rows.first().map(|r| r.metrics.pairs.clone()).unwrap_or_default();
    for p in &pairs {
        let _ = write!(out, " SSR({},{}) % |", p.alpha, p.beta);
    }
    out.push_str(" Pr(d_min<0.02) % | Pr(d_min<0.05) % | Pr(d_tgt<0.10) % | Pr(d_tgt<0.15) % | config | inputs |\n|");
    for _ in 0..(11 + pairs.len()) {
        out.push_str("---|");
    }
    out.push('\n');
    for row in rows {
        let m = &row.metrics;
        let _ = write!(
            out,
            "| {} | {} | {} | {} | {} |",
            row.method,
            opt(row.delta),
            row.lambda,
            row.data_size,
            row.level.as_str()
        );
        for (i, v) in m.ssr.iter().enumerate() {
            match ci_at(m, i) {
                Some(w) => {
                    let _ = write!(out, " {:.2} ± {:.2} |", 100.0 * v, w);
                }
                None => {
                    let _ = write!(out, " {:.2} |", 100.0 * v);
                }
            }
        }
        let _ = writeln!(
            out,
            " {:.2} | {:.2} | {:.2} | {:.2} | {} | {} |",
            100.0 * m.p_dmin_lt_002,
            100.0 * m.p_dmin_lt_005,
            100.0 * m.p_dtgt_lt_010,
            100.0 * m.p_dtgt_lt_015,
            &row.config_hash[..12.min(row.config_hash.len())],
            &row.input_hash[..12.min(row.input_hash.len())]
        );
    }
    if rows.iter().any(|r| r.metrics.degenerate_ci) {
        out.push_str("\nIntervals computed over a single episode are degenerate.\n");
    }
    out
}
