use feaslab::autodiff::{gradient_check, Tape, Tensor};
use feaslab::kinematics::{JointState, KinematicChain};
use proptest::prelude::*;

proptest! {
    #[test]
    fn sum_of_squares_gradient_is_twice_input(x in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(x.clone()));
        let sq = tape.square(v);
        let y = tape.sum(sq);
        let g = tape.backward(y).unwrap();
        for (gi, xi) in g.get(v).unwrap().data().iter().zip(&x) {
            prop_assert!((gi - 2.0 * xi).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_is_linear_in_loss(x in prop::collection::vec(-2.0f64..2.0, 1..8), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grad = |w: f64, which: u8| {
            let mut tape = Tape::new();
            let v = tape.param(Tensor::vector(x.clone()));
            let f = if which == 0 { tape.sin(v) } else { tape.tanh(v) };
            let s = tape.sum(f);
            let y = tape.scale(s, w);
            tape.backward(y).unwrap().get(v).unwrap().data().to_vec()
        };
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(x.clone()));
        let s1 = tape.sin(v);
        let s1 = tape.sum(s1);
        let t1 = tape.tanh(v);
        let t1 = tape.sum(t1);
        let l1 = tape.scale(s1, a);
        let l2 = tape.scale(t1, b);
        let y = tape.add(l1, l2).unwrap();
        let g = tape.backward(y).unwrap().get(v).unwrap().data().to_vec();
        let (ga, gb) = (grad(a, 0), grad(b, 1));
        for i in 0..x.len() {
            prop_assert!((g[i] - ga[i] - gb[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn smooth_composites_pass_gradient_check(x in prop::collection::vec(-1.5f64..1.5, 4)) {
        let err = gradient_check(
            |t, v| {
                let m = t.reshape(v, &[2, 2])?;
                let p = t.matmul(m, m)?;
                let th = t.tanh(p);
                let c = t.cos(th);
                Ok(t.mean(c))
            },
            &Tensor::vector(x),
            1e-6,
        )
        .unwrap();
        prop_assert!(err <= 1e-6);
    }

    #[test]
    fn fk_preserves_link_lengths(q in prop::collection::vec(-3.0f64..3.0, 3)) {
        let chain = KinematicChain::planar_default();
        let zero = chain.forward_kinematics(&JointState(vec![0.0; 3])).unwrap();
        let poses = chain.forward_kinematics(&JointState(q)).unwrap();
        let origin = |m: &nalgebra::Matrix4<f64>| nalgebra::Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        for w in 0..poses.poses.len() - 1 {
            let a = (origin(&poses.poses[w + 1]) - origin(&poses.poses[w])).norm();
            let b = (origin(&zero.poses[w + 1]) - origin(&zero.poses[w])).norm();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn points_stay_within_reach(q in prop::collection::vec(-3.0f64..3.0, 3)) {
        let chain = KinematicChain::planar_default();
        let t = chain.forward_kinematics(&JointState(q.clone())).unwrap().poses[0];
        let base = nalgebra::Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)]);
        for p in chain.points_at(&q).unwrap() {
            prop_assert!((p - base).norm() <= chain.reach() + 1e-12);
        }
        prop_assert!((chain.end_effector(&q).unwrap() - base).norm() <= chain.reach() + 1e-12);
    }

    #[test]
    fn tape_fk_matches_plain_fk(q in prop::collection::vec(-3.0f64..3.0, 3)) {
        let chain = KinematicChain::planar_default();
        let mut tape = Tape::new();
        let joints: Vec<_> = q.iter().map(|&a| tape.constant(Tensor::matrix(1, 1, vec![a]).unwrap())).collect();
        let out = chain.forward_kinematics_on_tape(&mut tape, &joints, 1).unwrap();
        let ee = chain.end_effector(&q).unwrap();
        for k in 0..3 {
            prop_assert!((tape.value(out.tool[k]).item() - ee[k]).abs() <= 1e-12);
        }
    }
}

#[test]
fn ik_reaches_reachable_targets() {
    let chain = KinematicChain::planar_default();
    for q in [[0.3, -0.7, 1.1], [-1.2, 0.4, 0.9], [2.0, -1.5, -0.3]] {
        let target = chain.end_effector(&q).unwrap();
        let sol = chain.solve_ik(&target, &JointState(vec![0.0; 3]), 1e-6, 500).unwrap();
        assert!((chain.end_effector(sol.as_slice()).unwrap() - target).norm() <= 1e-6);
    }
}
