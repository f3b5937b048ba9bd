mod common;

use feaslab::evaluation::*;
use feaslab::geometry::ObbObstacle;
use feaslab::kinematics::KinematicChain;
use feaslab::scenario::{self, generate_dataset, Episode, GenerationConfig, Scene};
use feaslab::seeds;
use nalgebra::Vector3;
use proptest::prelude::*;
use std::sync::OnceLock;

fn dataset() -> &'static [Episode] {
    static DATA: OnceLock<Vec<Episode>> = OnceLock::new();
    DATA.get_or_init(|| generate_dataset(&KinematicChain::planar_default(), 40, 21, &GenerationConfig::default()).unwrap())
}

#[test]
fn replay_oracle_reproduces_demonstration_clearance() {
    let chain = KinematicChain::planar_default();
    let policy = ReplayPolicy { horizon: 16, stride: 1 };
    for ep in &dataset()[..10] {
        let mut rng = seeds::rng(0, &[]);
        let (d_min, d_tgt, steps) = rollout(&policy, ep, &ep.scene, &chain, 5, &mut rng).unwrap();
        assert_eq!(steps, 80);
        let expected = scenario::min_clearance(&chain, &ep.trajectory[1..], &ep.scene.obstacle).unwrap();
        assert!((d_min - expected).abs() <= 1e-9, "{d_min} vs {expected}");
        let last = ep.trajectory.last().unwrap();
        let err = (chain.end_effector(last).unwrap() - ep.scene.target).norm();
        assert!((d_tgt - err).abs() <= 1e-12);
    }
}

#[test]
fn rollout_contracts() {
    let chain = KinematicChain::planar_default();
    let ep = &dataset()[0];
    let far = Scene {
        obstacle: ObbObstacle::from_yaw(Vector3::new(10.0, 0.0, 0.0), 0.0, Vector3::repeat(0.05)).unwrap(),
        ..ep.scene.clone()
    };
    let policy = ReplayPolicy { horizon: 16, stride: 2 };
    let (d_min, _, steps) = rollout(&policy, ep, &far, &chain, 3, &mut seeds::rng(1, &[])).unwrap();
    assert!(d_min > 5.0);
    assert_eq!(steps, 48);
}

#[test]
fn protocol_record_counts_and_determinism() {
    let chain = KinematicChain::planar_default();
    let gen = GenerationConfig::default();
    let protocol = ProtocolConfig::default();
    let policy = ReplayPolicy { horizon: 16, stride: 2 };
    let small = run_protocol(&policy, dataset(), Level::Small, &chain, &gen, &protocol, 5).unwrap();
    assert_eq!(small.len(), 200);
    let large = run_protocol(&policy, dataset(), Level::Large, &chain, &gen, &protocol, 5).unwrap();
    assert_eq!(large.len(), 80);
    assert!(large.iter().all(|r| r.executed_steps == 48 && r.collided == (r.d_min < 0.0)));
    let again = run_protocol(&policy, dataset(), Level::Large, &chain, &gen, &protocol, 5).unwrap();
    assert_eq!(records_to_jsonl(&large), records_to_jsonl(&again));
    let order: Vec<(usize, usize)> = small.iter().map(|r| (r.episode_id, r.perturbation_id)).collect();
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(order, sorted);
}

#[test]
fn large_protocol_averages_before_thresholding() {
    let chain = KinematicChain::planar_default();
    let gen = GenerationConfig::default();
    let protocol = ProtocolConfig {
        large_perturbations: 1,
        large_rollouts: 5,
        ..ProtocolConfig::default()
    };
    let policy = ReplayPolicy { horizon: 16, stride: 2 };
    let eps = &dataset()[..3];
    let records = run_protocol(&policy, eps, Level::Large, &chain, &gen, &protocol, 9).unwrap();
    // A deterministic policy gives five equal rollouts, so the average equals each one.
    for (r, ep) in records.iter().zip(eps) {
        let mut prng = seeds::rng(9, &[Level::Large as u64, ep.id as u64, 0]);
        let scene = perturb_large(&ep.scene, &ep.trajectory, &chain, &gen, &protocol, &mut prng).unwrap();
        let (d_min, d_tgt, _) = rollout(&policy, ep, &scene, &chain, 3, &mut seeds::rng(0, &[])).unwrap();
        assert!((r.d_min - d_min).abs() < 1e-12 && (r.d_tgt - d_tgt).abs() < 1e-12);
    }
}

#[test]
fn small_perturbation_contract() {
    let chain = KinematicChain::planar_default();
    let gen = GenerationConfig::default();
    let protocol = ProtocolConfig::default();
    for ep in &dataset()[..20] {
        for i in 0..5 {
            let s = perturb_small(&ep.scene, &chain, &gen, &protocol, &mut seeds::rng(i, &[ep.id as u64])).unwrap();
            let shift = s.obstacle.center() - ep.scene.obstacle.center();
            assert!(shift.xy().norm() <= 0.10 + 1e-12);
            assert_eq!(shift.z, 0.0);
            assert_eq!(s.start, ep.scene.start);
            assert_eq!(s.target, ep.scene.target);
            for a in 0..3 {
                let ratio = s.obstacle.half_extents()[a] / ep.scene.obstacle.half_extents()[a];
                assert!((0.9 - 1e-12..=1.1 + 1e-12).contains(&ratio));
            }
            assert_eq!(s.obstacle.yaw(), ep.scene.obstacle.yaw());
        }
    }
    let still = ProtocolConfig {
        max_shift: 0.0,
        size_jitter: 0.0,
        ..ProtocolConfig::default()
    };
    let ep = &dataset()[0];
    let s = perturb_small(&ep.scene, &chain, &gen, &still, &mut seeds::rng(0, &[])).unwrap();
    assert_eq!(s.obstacle.center(), ep.scene.obstacle.center());
}

#[test]
fn large_perturbation_contract() {
    let chain = KinematicChain::planar_default();
    let gen = GenerationConfig::default();
    let protocol = ProtocolConfig::default();
    for ep in &dataset()[..20] {
        let s = perturb_large(&ep.scene, &ep.trajectory, &chain, &gen, &protocol, &mut seeds::rng(3, &[ep.id as u64])).unwrap();
        assert!((s.obstacle.center() - ep.scene.obstacle.center()).norm() >= 0.15);
        assert!(scenario::min_clearance(&chain, &ep.trajectory, &s.obstacle).unwrap() < gen.epsilon);
        assert_eq!((s.start.clone(), s.target), (ep.scene.start.clone(), ep.scene.target));
        let again = perturb_large(&ep.scene, &ep.trajectory, &chain, &gen, &protocol, &mut seeds::rng(3, &[ep.id as u64])).unwrap();
        assert_eq!(s, again);
    }
}

#[test]
fn ssr_matches_counting_oracle() {
    let mut rng = seeds::rng(12, &[]);
    let records = common::synthetic_records(&mut rng, 200, 5);
    assert_eq!(records.len(), 1000);
    let pairs = [SsrPair::SAFE_APPROACH, SsrPair::PRECISE_REACH, SsrPair { alpha: 0.0, beta: 0.3 }];
    let m = compute_metrics(&records, &pairs).unwrap();
    for (p, v) in pairs.iter().zip(&m.ssr) {
        assert_eq!(*v, common::count_ssr(&records, p.alpha, p.beta));
    }
    assert_eq!(m.p_dmin_lt_002, common::count_below(records.iter().map(|r| r.d_min), 0.02));
    assert_eq!(m.p_dmin_lt_005, common::count_below(records.iter().map(|r| r.d_min), 0.05));
    assert_eq!(m.p_dtgt_lt_010, common::count_below(records.iter().map(|r| r.d_tgt), 0.10));
    assert_eq!(m.p_dtgt_lt_015, common::count_below(records.iter().map(|r| r.d_tgt), 0.15));
}

#[test]
fn bootstrap_matches_exact_resampling_distribution() {
    let b = 2000;
    let mut checked = 0;
    for case in 0..400u64 {
        let mut rng = seeds::rng(30, &[case]);
        let episodes = [5, 10, 20, 40][case as usize % 4];
        let per = [1, 3, 5][case as usize % 3];
        let records = common::synthetic_records(&mut rng, episodes, per);
        for pair in default_pairs() {
            let got = clustered_bootstrap_ci(&records, pair, b, case).unwrap();
            let (lo, hi) = common::half_width_band(&records, pair, b, 4.0);
            assert!(lo - 1e-9 <= got && got <= hi + 1e-9, "case {case}: {got} outside [{lo}, {hi}]");
            let (exact, margin) = common::exact_half_width(&records, pair);
            // Well-conditioned when no CDF jump lies within ~3 standard errors of either level.
            if margin >= 0.01 {
                assert!((got - exact).abs() <= 0.5, "case {case}: {got} vs {exact}");
                checked += 1;
            }
        }
    }
    assert!(checked >= 60, "only {checked} well-conditioned cases");
}

#[test]
fn two_episode_bootstrap_closed_form() {
    let records = vec![EvalRecord::new(0, 0, 0, -0.1, 0.5, 48), EvalRecord::new(1, 0, 0, 0.5, 0.01, 48)];
    let pair = SsrPair::PRECISE_REACH;
    let (exact, _) = common::exact_half_width(&records, pair);
    assert_eq!(exact, 50.0);
    let got = clustered_bootstrap_ci(&records, pair, 20_000, 1).unwrap();
    assert!((got - 50.0).abs() < 1e-12);
    assert_eq!(got, clustered_bootstrap_ci(&records, pair, 20_000, 1).unwrap());
}

#[test]
fn bootstrap_mean_agrees_with_point_estimate() {
    let mut rng = seeds::rng(44, &[]);
    let records = common::synthetic_records(&mut rng, 40, 5);
    for pair in default_pairs() {
        let point = ssr(&records, pair).unwrap();
        let reps = bootstrap_replicates(&records, pair, 2000, 3).unwrap();
        let mean = reps.iter().sum::<f64>() / reps.len() as f64;
        assert!((100.0 * (mean - point)).abs() <= 2.0);
    }
}

#[test]
fn single_episode_interval_is_flagged() {
    let records = vec![EvalRecord::new(3, 0, 0, 0.1, 0.05, 48), EvalRecord::new(3, 1, 0, -0.1, 0.05, 48)];
    let m = compute_metrics_with_ci(&records, &default_pairs(), 100, 0).unwrap();
    assert!(m.degenerate_ci);
    assert_eq!(m.ci_half_width.unwrap(), vec![0.0, 0.0]);
    assert!(clustered_bootstrap_ci(&records, SsrPair::PRECISE_REACH, 0, 0).is_err());
}

fn arb_records() -> impl Strategy<Value = Vec<EvalRecord>> {
    prop::collection::vec((0usize..8, -0.2f64..0.3, 0.0f64..0.4), 1..60).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (e, d, t))| EvalRecord::new(e, i, 0, d, t, 48))
            .collect()
    })
}

proptest! {
    #[test]
    fn ssr_is_monotone_and_bounded(records in arb_records(), a1 in -0.1f64..0.2, a2 in -0.1f64..0.2, b1 in 0.0f64..0.4, b2 in 0.0f64..0.4) {
        let (alo, ahi) = (a1.min(a2), a1.max(a2));
        let (blo, bhi) = (b1.min(b2), b1.max(b2));
        let s = |a, b| ssr(&records, SsrPair { alpha: a, beta: b }).unwrap();
        prop_assert!(s(ahi, blo) <= s(alo, blo));
        prop_assert!(s(alo, blo) <= s(alo, bhi));
        let value = s(alo, blo);
        let at_most_alpha = records.iter().filter(|r| r.d_min <= alo).count() as f64 / records.len() as f64;
        let reached = records.iter().filter(|r| r.d_tgt < blo).count() as f64 / records.len() as f64;
        prop_assert!(value <= (1.0 - at_most_alpha).min(reached) + 1e-15);
        let m = compute_metrics(&records, &default_pairs()).unwrap();
        for p in [m.p_dmin_lt_002, m.p_dmin_lt_005, m.p_dtgt_lt_010, m.p_dtgt_lt_015] {
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn bootstrap_replicates_stay_in_unit_interval(records in arb_records(), seed in 0u64..1000) {
        let reps = bootstrap_replicates(&records, SsrPair::SAFE_APPROACH, 50, seed).unwrap();
        prop_assert!(reps.iter().all(|v| (0.0..=1.0).contains(v)));
        let w = clustered_bootstrap_ci(&records, SsrPair::SAFE_APPROACH, 50, seed).unwrap();
        prop_assert!((0.0..=50.0).contains(&w));
    }
}

#[test]
fn report_layout_carries_hashes() {
    let mut rng = seeds::rng(1, &[]);
    let records = common::synthetic_records(&mut rng, 4, 2);
    let metrics = compute_metrics_with_ci(&records, &default_pairs(), 100, 0).unwrap();
    let row = ReportRow {
        method: "MSE".into(),
        delta: None,
        lambda: 0.0,
        data_size: 4,
        level: Level::Small,
        metrics,
        config_hash: "c".repeat(64),
        input_hash: "d".repeat(64),
    };
    let csv = report_csv(&[row.clone(), row.clone()]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(header.last(), Some(&"input_hash"));
    assert!(lines[1].ends_with(&format!("{},{}", "c".repeat(64), "d".repeat(64))));
    let md = report_markdown("t", &[row]);
    assert!(md.contains("| MSE |"));
}
