//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod gradients;

use feaslab::evaluation::{EvalRecord, SsrPair};
use feaslab::geometry::ObbObstacle;
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Points on the box surface in world coordinates, about `target` in total,
/// laid out on a regular grid per face with counts proportional to area.
pub fn surface_samples(obb: &ObbObstacle, target: usize) -> Vec<Vector3<f64>> {
    let h = obb.half_extents();
    let area = 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z);
    let spacing = (area / target as f64).sqrt();
    let mut out = Vec::with_capacity(target + target / 10);
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let nu = ((2.0 * h[u] / spacing).ceil() as usize).max(1);
        let nv = ((2.0 * h[v] / spacing).ceil() as usize).max(1);
        for sign in [-1.0, 1.0] {
            for i in 0..=nu {
                for j in 0..=nv {
                    let mut q = Vector3::zeros();
                    q[axis] = sign * h[axis];
                    q[u] = -h[u] + 2.0 * h[u] * i as f64 / nu as f64;
                    q[v] = -h[v] + 2.0 * h[v] * j as f64 / nv as f64;
                    out.push(obb.center() + obb.rotation() * q);
                }
            }
        }
    }
    out
}

pub fn brute_distance(p: &Vector3<f64>, samples: &[Vector3<f64>]) -> f64 {
    samples.iter().map(|s| (p - s).norm_squared()).fold(f64::INFINITY, f64::min).sqrt()
}

/// Closed box membership in the box frame, written without the distance code.
pub fn inside_by_frame(p: &Vector3<f64>, obb: &ObbObstacle) -> bool {
    let q = obb.rotation().transpose() * (p - obb.center());
    (0..3).all(|i| q[i].abs() <= obb.half_extents()[i])
}

pub fn random_box(rng: &mut ChaCha8Rng) -> ObbObstacle {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
    let angle = rng.gen_range(-3.1..3.1);
    let rotation = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner();
    let center = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let half = Vector3::new(rng.gen_range(0.02..0.3), rng.gen_range(0.02..0.3), rng.gen_range(0.02..0.3));
    ObbObstacle::new(center, rotation, half).unwrap()
}

pub fn count_ssr(records: &[EvalRecord], alpha: f64, beta: f64) -> f64 {
    let mut hits = 0usize;
    for r in records {
        if r.d_min > alpha {
            if r.d_tgt < beta {
                hits += 1;
            }
        }
    }
    hits as f64 / records.len() as f64
}

pub fn count_below(values: impl Iterator<Item = f64>, t: f64) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().filter(|&&x| x < t).count() as f64 / v.len() as f64
}

/// `episodes` clusters of `per_episode` records with outcomes drawn around
/// per-episode skill levels.
pub fn synthetic_records(rng: &mut ChaCha8Rng, episodes: usize, per_episode: usize) -> Vec<EvalRecord> {
    let mut out = Vec::new();
    for e in 0..episodes {
        let safety: f64 = rng.gen_range(-0.05..0.15);
        let reach: f64 = rng.gen_range(0.0..0.25);
        for k in 0..per_episode {
            let d_min = safety + rng.gen_range(-0.05..0.05);
            let d_tgt = (reach + rng.gen_range(-0.08..0.08f64)).abs();
            out.push(EvalRecord::new(e, k, 0, d_min, d_tgt, 48));
        }
    }
    out
}

/// Exact distribution of the clustered bootstrap replicate when every
/// episode holds the same number of records: the total pass count is a sum
/// of `n` independent draws from the per-episode pass counts. Returns
/// `(support values, probabilities)`.
pub fn exact_bootstrap_distribution(records: &[EvalRecord], pair: SsrPair) -> (Vec<f64>, Vec<f64>) {
    let mut ids: Vec<usize> = records.iter().map(|r| r.episode_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let n = ids.len();
    let per: Vec<usize> = ids.iter().map(|id| records.iter().filter(|r| r.episode_id == *id).count()).collect();
    assert!(per.iter().all(|&m| m == per[0]), "oracle needs equal cluster sizes");
    let m = per[0];
    let mut single = vec![0.0; m + 1];
    for id in &ids {
        let c = records.iter().filter(|r| r.episode_id == *id && pair.passes(r)).count();
        single[c] += 1.0 / n as f64;
    }
    let mut dist = vec![1.0];
    for _ in 0..n {
        let mut next = vec![0.0; dist.len() + m];
        for (s, p) in dist.iter().enumerate() {
            for (c, q) in single.iter().enumerate() {
                next[s + c] += p * q;
            }
        }
        dist = next;
    }
    let total = (n * m) as f64;
    ((0..dist.len()).map(|s| s as f64 / total).collect(), dist)
}

/// Population quantile `inf { x : F(x) >= q }` and the distance of `q` from
/// the nearest jump of the CDF.
pub fn discrete_quantile(values: &[f64], probs: &[f64], q: f64) -> (f64, f64) {
    let mut cdf = 0.0;
    let mut margin = f64::INFINITY;
    let mut answer = None;
    for (v, p) in values.iter().zip(probs) {
        cdf += p;
        if *p > 0.0 {
            margin = margin.min((cdf - q).abs());
        }
        if answer.is_none() && cdf >= q {
            answer = Some(*v);
        }
    }
    (answer.unwrap_or(*values.last().unwrap()), margin)
}

/// Half-width in percentage points of the infinite-replicate bootstrap, and
/// the smaller of the two CDF margins.
pub fn exact_half_width(records: &[EvalRecord], pair: SsrPair) -> (f64, f64) {
    let (values, probs) = exact_bootstrap_distribution(records, pair);
    let (lo, m1) = discrete_quantile(&values, &probs, 0.025);
    let (hi, m2) = discrete_quantile(&values, &probs, 0.975);
    (100.0 * (hi - lo) / 2.0, m1.min(m2))
}

/// Range of half-widths reachable when each empirical percentile lands
/// anywhere within `sigmas` binomial standard errors of its level.
pub fn half_width_band(records: &[EvalRecord], pair: SsrPair, replicates: usize, sigmas: f64) -> (f64, f64) {
    let (values, probs) = exact_bootstrap_distribution(records, pair);
    let q = |level: f64| discrete_quantile(&values, &probs, level.clamp(1e-12, 1.0)).0;
    let se = |level: f64| sigmas * (level * (1.0 - level) / replicates as f64).sqrt();
    let (a, b) = (0.025, 0.975);
    let narrow = 100.0 * (q(b - se(b)) - q(a + se(a))) / 2.0;
    let wide = 100.0 * (q(b + se(b)) - q(a - se(a))) / 2.0;
    (narrow.max(0.0), wide)
}
