//! Oriented bounding boxes and their exact signed distance.

use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with determinant +1 (residual {0:e})")]
    NotARotation(f64),
    #[error("half extents must be strictly positive, got {0:?}")]
    NonPositiveExtent([f64; 3]),
    #[error("link radius must be non-negative, got {0}")]
    NegativeRadius(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// A box obstacle: `world = rotation * box + center`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObbObstacle {
    center: Vector3<f64>,
    rotation: Matrix3<f64>,
    half_extents: Vector3<f64>,
    /// Set when built from a yaw angle, so the angle round-trips exactly.
    yaw: Option<f64>,
}

impl ObbObstacle {
    pub fn new(center: Vector3<f64>, rotation: Matrix3<f64>, half_extents: Vector3<f64>) -> Result<Self, GeometryError> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if residual > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotARotation(residual));
        }
        if half_extents.iter().any(|&h| !(h > 0.0)) {
            return Err(GeometryError::NonPositiveExtent([half_extents.x, half_extents.y, half_extents.z]));
        }
        Ok(Self {
            center,
            rotation,
            half_extents,
            yaw: None,
        })
    }

    pub fn axis_aligned(center: Vector3<f64>, half_extents: Vector3<f64>) -> Result<Self, GeometryError> {
        Self::new(center, Matrix3::identity(), half_extents)
    }

    /// Box rotated about world z by `yaw` radians.
    pub fn from_yaw(center: Vector3<f64>, yaw: f64, half_extents: Vector3<f64>) -> Result<Self, GeometryError> {
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
        let mut obb = Self::new(center, *rot.matrix(), half_extents)?;
        obb.yaw = Some(yaw);
        Ok(obb)
    }

    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn half_extents(&self) -> &Vector3<f64> {
        &self.half_extents
    }

    /// Rotation about z: the construction angle when built from one,
    /// otherwise recovered from the first column.
    pub fn yaw(&self) -> f64 {
        self.yaw.unwrap_or_else(|| self.rotation[(1, 0)].atan2(self.rotation[(0, 0)]))
    }

    /// Same box with its centre and half extents replaced.
    pub fn with_center_and_extents(&self, center: Vector3<f64>, half_extents: Vector3<f64>) -> Result<Self, GeometryError> {
        let mut obb = Self::new(center, self.rotation, half_extents)?;
        obb.yaw = self.yaw;
        Ok(obb)
    }

    /// Applies the rigid transform `p -> r p + t` to the box.
    pub fn transformed(&self, r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        Self {
            center: r * self.center + t,
            rotation: r * self.rotation,
            half_extents: self.half_extents,
            yaw: None,
        }
    }

    fn local(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (point - self.center)
    }

    /// Box-frame membership test, closed box.
    pub fn contains(&self, point: &Vector3<f64>) -> bool {
        let q = self.local(point);
        (0..3).all(|i| q[i].abs() <= self.half_extents[i])
    }
}

/// Signed distance from `point` to the box surface: negative inside.
pub fn obb_sdf(point: &Vector3<f64>, obb: &ObbObstacle) -> f64 {
    let q = obb.local(point);
    let a = q.abs() - obb.half_extents;
    let outside = a.map(|v| v.max(0.0)).norm();
    let inside = a.max().min(0.0);
    outside + inside
}

/// Signed distance of a sphere of `radius` centred at `point`.
pub fn surface_clearance(point: &Vector3<f64>, radius: f64, obb: &ObbObstacle) -> Result<f64, GeometryError> {
    if radius < 0.0 {
        return Err(GeometryError::NegativeRadius(radius));
    }
    Ok(obb_sdf(point, obb) - radius)
}

/// Gradient of [`obb_sdf`] with respect to `point`.
///
/// Outside it is the unit vector from the closest surface point. Inside it
/// is the outward normal of the nearest face, the lowest axis winning ties.
/// On a zero box coordinate the sign subgradient is zero, matching the
/// autodiff `abs` convention.
pub fn obb_sdf_grad(point: &Vector3<f64>, obb: &ObbObstacle) -> Vector3<f64> {
    let q = obb.local(point);
    let a = q.abs() - obb.half_extents;
    let sign = q.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    });
    let clamped = a.map(|v| v.max(0.0));
    let norm = clamped.norm();
    let mut local_grad = Vector3::zeros();
    if norm > 0.0 {
        for i in 0..3 {
            local_grad[i] = clamped[i] / norm * sign[i];
        }
    } else {
        let mut best = 0;
        for i in 1..3 {
            if a[i] > a[best] {
                best = i;
            }
        }
        // max(a) == 0 on the surface: the inside branch is clamped inactive.
        if a[best] < 0.0 {
            local_grad[best] = sign[best];
        }
    }
    obb.rotation * local_grad
}

/// Per-row box parameters recorded as constants, each `[rows, 1]`.
#[derive(Debug, Clone)]
pub struct BoxLanes {
    center: [Var; 3],
    rotation: [[Var; 3]; 3],
    half_extents: [Var; 3],
}

impl BoxLanes {
    /// Records one box per row (`boxes[i]` applies to row `i`).
    pub fn record<'a>(tape: &mut Tape, boxes: impl ExactSizeIterator<Item = &'a ObbObstacle> + Clone) -> Self {
        let rows = boxes.len();
        let mut column = |f: &dyn Fn(&ObbObstacle) -> f64| {
            let data = boxes.clone().map(f).collect::<Vec<_>>();
            tape.constant(Tensor::matrix(rows, 1, data).expect("row count"))
        };
        let center = [
            column(&|b| b.center[0]),
            column(&|b| b.center[1]),
            column(&|b| b.center[2]),
        ];
        let mut rotation = [[center[0]; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            for (c, slot) in row.iter_mut().enumerate() {
                *slot = column(&|b| b.rotation[(r, c)]);
            }
        }
        let half_extents = [
            column(&|b| b.half_extents[0]),
            column(&|b| b.half_extents[1]),
            column(&|b| b.half_extents[2]),
        ];
        Self {
            center,
            rotation,
            half_extents,
        }
    }
}

/// Signed distance on the tape for points given as three `[rows, 1]` lanes.
///
/// Same formula as [`obb_sdf`]; returns a `[rows, 1]` node.
pub fn obb_sdf_on_tape(tape: &mut Tape, point: [Var; 3], boxes: &BoxLanes) -> Result<Var, GeometryError> {
    let rel = [
        tape.sub(point[0], boxes.center[0])?,
        tape.sub(point[1], boxes.center[1])?,
        tape.sub(point[2], boxes.center[2])?,
    ];
    let mut excess = Vec::with_capacity(3);
    let mut outside_sq = None;
    for axis in 0..3 {
        // q_axis = sum_j R[j][axis] * rel_j  (R transposed)
        let mut q = tape.mul(boxes.rotation[0][axis], rel[0])?;
        for (j, r) in rel.iter().enumerate().skip(1) {
            let term = tape.mul(boxes.rotation[j][axis], *r)?;
            q = tape.add(q, term)?;
        }
        let qa = tape.abs(q);
        let a = tape.sub(qa, boxes.half_extents[axis])?;
        let pos = tape.relu(a);
        let sq = tape.square(pos);
        outside_sq = Some(match outside_sq {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
        excess.push(a);
    }
    let outside = tape.sqrt(outside_sq.expect("three axes"))?;
    let stacked = tape.concat(&excess, 1)?;
    let max_excess = tape.max_over_axis(stacked, 1)?;
    // min(m, 0) = -relu(-m)
    let neg = tape.neg(max_excess);
    let neg_relu = tape.relu(neg);
    let inside = tape.neg(neg_relu);
    Ok(tape.add(outside, inside)?)
}
