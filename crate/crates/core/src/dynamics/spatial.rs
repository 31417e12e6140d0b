//! Spatial vector algebra.
//!
//! Six-dimensional motion and force vectors are stored as `[linear; angular]`,
//! matching the `[f; μ]` wrench layout used throughout the crate. All
//! quantities are expressed in the frame they are attached to unless a
//! function says otherwise.

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
pub fn linear(v: &Vec6) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

#[inline]
pub fn angular(v: &Vec6) -> Vec3 {
    Vec3::new(v[3], v[4], v[5])
}

#[inline]
pub fn stack(lin: &Vec3, ang: &Vec3) -> Vec6 {
    Vec6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
}

/// Motion cross product `v ×ₘ u`.
pub fn cross_motion(v: &Vec6, u: &Vec6) -> Vec6 {
    let (vl, va) = (linear(v), angular(v));
    let (ul, ua) = (linear(u), angular(u));
    stack(&(va.cross(&ul) + vl.cross(&ua)), &va.cross(&ua))
}

/// Force cross product `v ×_f f`.
pub fn cross_force(v: &Vec6, f: &Vec6) -> Vec6 {
    let (vl, va) = (linear(v), angular(v));
    let (fl, fa) = (linear(f), angular(f));
    stack(&va.cross(&fl), &(va.cross(&fa) + vl.cross(&fl)))
}

/// Spatial inertia about the link origin for a body of mass `mass` whose
/// centre of mass sits at `com` with rotational inertia `inertia_com` about it.
pub fn spatial_inertia(mass: f64, com: &Vec3, inertia_com: &Mat3) -> Mat6 {
    let c = skew(com);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Mat3::identity() * mass));
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-mass * c));
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(mass * c));
    out.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(inertia_com - mass * c * c));
    out
}

/// Rotation vector (axis times angle) of a rotation matrix.
pub fn rotation_log(r: &Mat3) -> Vec3 {
    let w = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = w.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    let angle = sin.atan2(cos);
    if sin < 1e-12 {
        if cos > 0.0 {
            return w;
        }
        // half-turn: R + I = 2 n nᵀ
        let b = (r + Mat3::identity()) * 0.5;
        let k = (0..3).max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)])).unwrap_or(0);
        let n = b.column(k) / b[(k, k)].sqrt();
        return n * std::f64::consts::PI;
    }
    if cos < -0.9 {
        // near a half-turn the skew part loses the axis; rebuild it from the
        // symmetric part and take the sign from the skew part
        let b = ((r + r.transpose()) * 0.5 - Mat3::identity() * cos) / (1.0 - cos);
        let k = (0..3).max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)])).unwrap_or(0);
        let mut n: Vec3 = b.column(k) / b[(k, k)].sqrt();
        if n.dot(&w) < 0.0 {
            n = -n;
        }
        return n * angle;
    }
    w * (angle / sin)
}

/// Rotation matrix from a rotation vector.
pub fn rotation_exp(w: &Vec3) -> Mat3 {
    *Rotation3::new(*w).matrix()
}

/// Rigid transform. When used as a frame placement, `rotation` and
/// `translation` give the child frame's orientation and origin in parent
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Mat3::identity(), translation)
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::new(rotation_exp(&(axis.normalize() * angle)), Vec3::zeros())
    }

    /// `self * other`: placement of `other`'s child frame in `self`'s parent frame.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let gram = (r.transpose() * r - Mat3::identity()).abs().max();
        gram.max((r.determinant() - 1.0).abs())
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|x| x.is_finite())
    }

    /// Re-expresses a motion vector given in the parent frame in the child frame.
    pub fn motion_to_child(&self, v: &Vec6) -> Vec6 {
        let rt = self.rotation.transpose();
        let (vl, va) = (linear(v), angular(v));
        stack(&(rt * (vl - self.translation.cross(&va))), &(rt * va))
    }

    /// Re-expresses a motion vector given in the child frame in the parent frame.
    pub fn motion_to_parent(&self, v: &Vec6) -> Vec6 {
        let va = self.rotation * angular(v);
        let vl = self.rotation * linear(v) + self.translation.cross(&va);
        stack(&vl, &va)
    }

    /// Re-expresses a wrench given in the child frame in the parent frame.
    pub fn force_to_parent(&self, f: &Vec6) -> Vec6 {
        let fl = self.rotation * linear(f);
        let fa = self.rotation * angular(f) + self.translation.cross(&fl);
        stack(&fl, &fa)
    }

    /// Re-expresses a wrench given in the parent frame in the child frame.
    pub fn force_to_child(&self, f: &Vec6) -> Vec6 {
        let rt = self.rotation.transpose();
        let (fl, fa) = (linear(f), angular(f));
        stack(&(rt * fl), &(rt * (fa - self.translation.cross(&fl))))
    }

    /// Matrix form of [`RigidTransform::motion_to_child`]. Its transpose is the
    /// matrix form of [`RigidTransform::force_to_parent`].
    pub fn motion_matrix(&self) -> Mat6 {
        let rt = self.rotation.transpose();
        let mut out = Mat6::zeros();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        out.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-rt * skew(&self.translation)));
        out.fixed_view_mut::<3, 3>(3, 3).copy_from(&rt);
        out
    }
}

/// Twist of a frame, expressed in that frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpatialVelocity {
    pub linear: Vec3,
    pub angular: Vec3,
}

impl SpatialVelocity {
    pub fn to_vector(&self) -> Vec6 {
        stack(&self.linear, &self.angular)
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            linear: linear(v),
            angular: angular(v),
        }
    }
}

/// Force and torque acting at the origin of a frame, expressed in that frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vec3,
    pub torque: Vec3,
}

impl Wrench {
    pub fn new(force: Vec3, torque: Vec3) -> Self {
        Self { force, torque }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vec6 {
        stack(&self.force, &self.torque)
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            force: linear(v),
            torque: angular(v),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|x| x.is_finite())
    }
}
