//! Serial revolute chains: forward kinematics (plain and on the tape),
//! representative clearance points, and numerical inverse kinematics.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Matrix4, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("joint state has {got} values, chain has {expected} joints")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid chain: {0}")]
    InvalidChain(String),
    #[error("target {target:?} unreachable (end-effector error {error:.4} m after {iters} iterations)")]
    Unreachable { target: [f64; 3], error: f64, iters: usize },
    #[error("failed to read chain file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse chain file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, KinematicsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    /// Name of the frame this joint moves.
    pub name: String,
    pub axis: [f64; 3],
    /// Translation from the parent frame to this joint, applied before rotation.
    pub origin_offset: [f64; 3],
    pub limits: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeLink {
    pub link: String,
    pub radius: f64,
}

/// Declarative chain description, the on-disk chain file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub joints: Vec<JointSpec>,
    pub tool: ToolSpec,
    pub representative: Vec<RepresentativeLink>,
}

impl ChainSpec {
    /// Planar 3R arm with links 0.4/0.3/0.2 m.
    pub fn planar_default() -> Self {
        let joint = |name: &str, x: f64| JointSpec {
            name: name.to_string(),
            axis: [0.0, 0.0, 1.0],
            origin_offset: [x, 0.0, 0.0],
            limits: [-3.0, 3.0],
        };
        let rep = |link: &str| RepresentativeLink {
            link: link.to_string(),
            radius: 0.03,
        };
        Self {
            joints: vec![joint("link1_base", 0.0), joint("link1_end", 0.4), joint("link2_end", 0.3)],
            tool: ToolSpec {
                name: "end_effector".into(),
                offset: [0.2, 0.0, 0.0],
            },
            representative: vec![rep("link1_end"), rep("link2_end"), rep("end_effector")],
        }
    }
}

#[derive(Debug, Clone)]
struct Joint {
    axis: Unit<Vector3<f64>>,
    offset: Vector3<f64>,
    limits: [f64; 2],
    /// Rodrigues split `R(q) = fixed + sin(q) * sin_coef + cos(q) * cos_coef`.
    fixed: Matrix3<f64>,
    sin_coef: Matrix3<f64>,
    cos_coef: Matrix3<f64>,
}

/// Immutable, validated serial chain.
#[derive(Debug, Clone)]
pub struct KinematicChain {
    spec: ChainSpec,
    joints: Vec<Joint>,
    tool_offset: Vector3<f64>,
    /// Frame index of each representative link (joints first, tool last).
    representative: Vec<usize>,
    radii: Vec<f64>,
    hash: String,
}

/// Joint angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState(pub Vec<f64>);

impl JointState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// World poses of every frame, joint frames first and the tool last.
#[derive(Debug, Clone)]
pub struct LinkPoses {
    pub poses: Vec<Matrix4<f64>>,
}

impl KinematicChain {
    pub fn new(spec: ChainSpec) -> Result<Self> {
        if spec.joints.is_empty() {
            return Err(KinematicsError::InvalidChain("chain has no joints".into()));
        }
        let mut joints = Vec::with_capacity(spec.joints.len());
        for j in &spec.joints {
            let axis = Vector3::from(j.axis);
            if (axis.norm() - 1.0).abs() > 1e-9 {
                return Err(KinematicsError::InvalidChain(format!("joint {} axis is not unit length", j.name)));
            }
            if !(j.limits[0] < j.limits[1]) {
                return Err(KinematicsError::InvalidChain(format!("joint {} limits {:?} are empty", j.name, j.limits)));
            }
            let axis = Unit::new_unchecked(axis);
            let k = axis.cross_matrix();
            let k2 = k * k;
            joints.push(Joint {
                axis,
                offset: Vector3::from(j.origin_offset),
                limits: j.limits,
                fixed: Matrix3::identity() + k2,
                sin_coef: k,
                cos_coef: -k2,
            });
        }
        let names: Vec<&str> = spec
            .joints
            .iter()
            .map(|j| j.name.as_str())
            .chain(std::iter::once(spec.tool.name.as_str()))
            .collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(KinematicsError::InvalidChain(format!("duplicate frame name {n}")));
            }
        }
        if spec.representative.is_empty() {
            return Err(KinematicsError::InvalidChain("representative set is empty".into()));
        }
        let mut representative = Vec::new();
        let mut radii = Vec::new();
        for r in &spec.representative {
            let idx = names
                .iter()
                .position(|n| *n == r.link)
                .ok_or_else(|| KinematicsError::InvalidChain(format!("unknown representative link {}", r.link)))?;
            if !(r.radius > 0.0) {
                return Err(KinematicsError::InvalidChain(format!("link {} radius must be > 0", r.link)));
            }
            representative.push(idx);
            radii.push(r.radius);
        }
        let canonical = serde_json::to_vec(&spec).expect("chain spec serializes");
        let hash = hex_digest(&canonical);
        Ok(Self {
            tool_offset: Vector3::from(spec.tool.offset),
            spec,
            joints,
            representative,
            radii,
            hash,
        })
    }

    pub fn planar_default() -> Self {
        Self::new(ChainSpec::planar_default()).expect("default chain is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: ChainSpec = toml::from_str(&text)?;
        Self::new(spec)
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn limits(&self) -> Vec<[f64; 2]> {
        self.joints.iter().map(|j| j.limits).collect()
    }

    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.limits[0], j.limits[1]);
        }
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn representative_count(&self) -> usize {
        self.representative.len()
    }

    /// Hex SHA-256 of the canonical chain description.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Upper bound on end-effector distance from the base.
    pub fn reach(&self) -> f64 {
        self.joints.iter().skip(1).map(|j| j.offset.norm()).sum::<f64>() + self.tool_offset.norm()
    }

    fn check_len<T>(&self, q: &[T]) -> Result<()> {
        if q.len() != self.dof() {
            return Err(KinematicsError::LengthMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    pub fn forward_kinematics(&self, q: &JointState) -> Result<LinkPoses> {
        self.check_len(&q.0)?;
        let mut rot = Matrix3::identity();
        let mut pos = Vector3::zeros();
        let mut poses = Vec::with_capacity(self.dof() + 1);
        for (joint, &angle) in self.joints.iter().zip(&q.0) {
            pos += rot * joint.offset;
            rot *= Rotation3::from_axis_angle(&joint.axis, angle).matrix();
            poses.push(homogeneous(&rot, &pos));
        }
        pos += rot * self.tool_offset;
        poses.push(homogeneous(&rot, &pos));
        Ok(LinkPoses { poses })
    }

    /// Frame origins of the representative set, in set order.
    pub fn representative_points(&self, poses: &LinkPoses) -> Vec<(String, Vector3<f64>)> {
        self.spec
            .representative
            .iter()
            .zip(&self.representative)
            .map(|(r, &idx)| {
                let t = &poses.poses[idx];
                (r.link.clone(), Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)]))
            })
            .collect()
    }

    pub fn points_at(&self, q: &[f64]) -> Result<Vec<Vector3<f64>>> {
        let poses = self.forward_kinematics(&JointState(q.to_vec()))?;
        Ok(self.representative_points(&poses).into_iter().map(|(_, p)| p).collect())
    }

    pub fn end_effector(&self, q: &[f64]) -> Result<Vector3<f64>> {
        let poses = self.forward_kinematics(&JointState(q.to_vec()))?;
        let t = poses.poses.last().expect("tool frame");
        Ok(Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)]))
    }

    /// Forward kinematics on the tape for `rows` configurations at once.
    ///
    /// `joints[i]` holds angle `i` of every configuration as a `[rows, 1]`
    /// node. Returns the representative points (set order) and the tool
    /// point, each as three `[rows, 1]` nodes.
    pub fn forward_kinematics_on_tape(&self, tape: &mut Tape, joints: &[Var], rows: usize) -> Result<TapePoints> {
        self.check_len(joints)?;
        let mut rot = [[Lane::Const(0.0); 3]; 3];
        for (i, row) in rot.iter_mut().enumerate() {
            row[i] = Lane::Const(1.0);
        }
        let mut pos = [Lane::Const(0.0); 3];
        let mut frames: Vec<[Lane; 3]> = Vec::with_capacity(self.dof() + 1);

        for (joint, &angle) in self.joints.iter().zip(joints) {
            pos = translate(tape, &rot, &pos, &joint.offset)?;
            let s = Lane::Var(tape.sin(angle));
            let c = Lane::Var(tape.cos(angle));
            let mut local = [[Lane::Const(0.0); 3]; 3];
            for r in 0..3 {
                for k in 0..3 {
                    let a = Lane::Const(joint.fixed[(r, k)]);
                    let b = Lane::mul(tape, Lane::Const(joint.sin_coef[(r, k)]), s)?;
                    let d = Lane::mul(tape, Lane::Const(joint.cos_coef[(r, k)]), c)?;
                    let ab = Lane::add(tape, a, b)?;
                    local[r][k] = Lane::add(tape, ab, d)?;
                }
            }
            let mut next = [[Lane::Const(0.0); 3]; 3];
            for r in 0..3 {
                for k in 0..3 {
                    let mut acc = Lane::Const(0.0);
                    for m in 0..3 {
                        let term = Lane::mul(tape, rot[r][m], local[m][k])?;
                        acc = Lane::add(tape, acc, term)?;
                    }
                    next[r][k] = acc;
                }
            }
            rot = next;
            frames.push(pos);
        }
        frames.push(translate(tape, &rot, &pos, &self.tool_offset)?);

        let mut materialize = |lanes: [Lane; 3]| lanes.map(|l| l.into_var(tape, rows));
        let representative = self.representative.iter().map(|&i| materialize(frames[i])).collect();
        let tool = materialize(*frames.last().expect("tool frame"));
        Ok(TapePoints { representative, tool })
    }

    /// Damped least-squares descent on the squared end-effector error,
    /// clamped to joint limits. The damping adapts: it shrinks after an
    /// accepted step and grows after a rejected one. Fails with
    /// [`KinematicsError::Unreachable`] when the target lies beyond the
    /// chain's reach or the error stays above `tol` for `max_iters` steps.
    pub fn solve_ik(&self, target: &Vector3<f64>, q0: &JointState, tol: f64, max_iters: usize) -> Result<JointState> {
        self.check_len(&q0.0)?;
        let unreachable = |error: f64, iters: usize| KinematicsError::Unreachable {
            target: [target.x, target.y, target.z],
            error,
            iters,
        };
        if target.norm() > self.reach() + 1e-9 {
            return Err(unreachable(f64::INFINITY, 0));
        }
        // Restarts from deterministic random configurations when the step
        // stalls in a joint-limit local minimum; all attempts share the
        // `max_iters` budget.
        let mut restarts = ChaCha8Rng::seed_from_u64(target.iter().fold(0u64, |h, v| h.rotate_left(17) ^ v.to_bits()));
        let mut q = q0.0.clone();
        self.clamp_to_limits(&mut q);
        let (mut err, mut jac) = self.ik_residual(&q, target)?;
        let mut best = (err.norm(), q.clone());
        let mut damping = 1e-2;
        let mut checkpoint = (err.norm(), 0usize);
        for iter in 0..max_iters {
            if err.norm() <= tol {
                return Ok(JointState(q));
            }
            // dq = J^T (J J^T + damping I)^-1 e
            let jjt = &jac * jac.transpose() + Matrix3::identity() * damping;
            let solve = jjt.cholesky().map(|c| c.solve(&err));
            let mut candidate = q.clone();
            if let Some(y) = solve {
                let dq = jac.transpose() * y;
                for (v, d) in candidate.iter_mut().zip(dq.iter()) {
                    *v -= d;
                }
            }
            self.clamp_to_limits(&mut candidate);
            let (c_err, c_jac) = self.ik_residual(&candidate, target)?;
            if c_err.norm() < err.norm() {
                q = candidate;
                err = c_err;
                jac = c_jac;
                damping = (damping * 0.3).max(1e-9);
                if err.norm() < best.0 {
                    best = (err.norm(), q.clone());
                }
            } else {
                damping *= 4.0;
            }
            if err.norm() < 0.99 * checkpoint.0 {
                checkpoint = (err.norm(), iter);
            } else if iter - checkpoint.1 >= 25 {
                q = self.joints.iter().map(|j| restarts.gen_range(j.limits[0]..j.limits[1])).collect();
                (err, jac) = self.ik_residual(&q, target)?;
                damping = 1e-2;
                checkpoint = (err.norm(), iter);
            }
        }
        if best.0 <= tol {
            Ok(JointState(best.1))
        } else {
            Err(unreachable(best.0, max_iters))
        }
    }

    /// End-effector residual `fk(q) - target` and its Jacobian, both from the tape.
    fn ik_residual(&self, q: &[f64], target: &Vector3<f64>) -> Result<(Vector3<f64>, DMatrix<f64>)> {
        let mut tape = Tape::new();
        let joints: Vec<Var> = q
            .iter()
            .map(|&v| tape.param(Tensor::matrix(1, 1, vec![v]).expect("1x1")))
            .collect();
        let pts = self.forward_kinematics_on_tape(&mut tape, &joints, 1)?;
        let mut err = Vector3::zeros();
        let mut jac = DMatrix::zeros(3, q.len());
        for (axis, &lane) in pts.tool.iter().enumerate() {
            err[axis] = tape.value(lane).item() - target[axis];
            if !tape.requires_grad(lane) {
                continue;
            }
            let root = tape.sum(lane);
            let grads = tape.backward(root)?;
            for (j, &v) in joints.iter().enumerate() {
                jac[(axis, j)] = grads.get(v).map_or(0.0, |t| t.item());
            }
        }
        Ok((err, jac))
    }
}

/// Output of [`KinematicChain::forward_kinematics_on_tape`].
#[derive(Debug, Clone)]
pub struct TapePoints {
    pub representative: Vec<[Var; 3]>,
    pub tool: [Var; 3],
}

/// A per-row quantity that is either a recorded node or a known constant,
/// letting zero and unit rotation entries fold away.
#[derive(Debug, Clone, Copy)]
enum Lane {
    Const(f64),
    Var(Var),
}

impl Lane {
    fn mul(tape: &mut Tape, a: Lane, b: Lane) -> Result<Lane> {
        Ok(match (a, b) {
            (Lane::Const(x), Lane::Const(y)) => Lane::Const(x * y),
            (Lane::Const(c), Lane::Var(v)) | (Lane::Var(v), Lane::Const(c)) => {
                if c == 0.0 {
                    Lane::Const(0.0)
                } else if c == 1.0 {
                    Lane::Var(v)
                } else {
                    Lane::Var(tape.scale(v, c))
                }
            }
            (Lane::Var(x), Lane::Var(y)) => Lane::Var(tape.mul(x, y)?),
        })
    }

    fn add(tape: &mut Tape, a: Lane, b: Lane) -> Result<Lane> {
        Ok(match (a, b) {
            (Lane::Const(x), Lane::Const(y)) => Lane::Const(x + y),
            (Lane::Const(c), Lane::Var(v)) | (Lane::Var(v), Lane::Const(c)) => {
                if c == 0.0 {
                    Lane::Var(v)
                } else {
                    Lane::Var(tape.add_scalar(v, c))
                }
            }
            (Lane::Var(x), Lane::Var(y)) => Lane::Var(tape.add(x, y)?),
        })
    }

    fn into_var(self, tape: &mut Tape, rows: usize) -> Var {
        match self {
            Lane::Var(v) => v,
            Lane::Const(c) => tape.constant(Tensor::filled(&[rows, 1], c)),
        }
    }
}

fn translate(tape: &mut Tape, rot: &[[Lane; 3]; 3], pos: &[Lane; 3], offset: &Vector3<f64>) -> Result<[Lane; 3]> {
    let mut out = *pos;
    for (r, slot) in out.iter_mut().enumerate() {
        for m in 0..3 {
            let term = Lane::mul(tape, rot[r][m], Lane::Const(offset[m]))?;
            *slot = Lane::add(tape, *slot, term)?;
        }
    }
    Ok(out)
}

fn homogeneous(rot: &Matrix3<f64>, pos: &Vector3<f64>) -> Matrix4<f64> {
    let mut t = Matrix4::identity();
    t.fixed_view_mut::<3, 3>(0, 0).copy_from(rot);
    t.fixed_view_mut::<3, 1>(0, 3).copy_from(pos);
    t
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
