//! Two-level torque control.
//!
//! The high level solves an equality-constrained least-squares problem over
//! `[ν̇, τ, f_base, f_contacts]` whose equality rows are the equations of
//! motion; it returns the desired joint torques. The low level turns a
//! desired torque and a torque estimate into a motor current with PI feedback
//! and friction compensation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::spatial::{angular, linear, rotation_log, stack, Mat3, Vec3, Vec6};
use crate::dynamics::{
    bias_forces, frame_jacobian, frame_pose, frame_velocity, jdot_nu, mass_matrix, rnea, DynamicsError, RigidBodyTree,
    RobotState,
};
use crate::friction::FrictionParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("{what}: expected length {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("no task given")]
    NoTask,
    #[error("constraints are infeasible (residual {residual:e})")]
    Infeasible { residual: f64 },
    #[error("cost is unbounded along a direction of norm {direction_norm:e} with curvature {curvature:e}")]
    Unbounded { direction_norm: f64, curvature: f64 },
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), ControlError> {
    if expected == actual {
        Ok(())
    } else {
        Err(ControlError::Dimension { what, expected, actual })
    }
}

/// Pose target for one frame, tracked with PD on the position error and on
/// the rotation-logarithm of the orientation error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartesianTask {
    pub frame: String,
    pub position: Vec3,
    #[serde(default = "Mat3::identity")]
    pub rotation: Mat3,
    #[serde(default)]
    pub linear_velocity: Vec3,
    #[serde(default)]
    pub angular_velocity: Vec3,
    #[serde(default)]
    pub linear_acceleration: Vec3,
    #[serde(default)]
    pub angular_acceleration: Vec3,
    pub kp_linear: f64,
    pub kd_linear: f64,
    pub kp_angular: f64,
    pub kd_angular: f64,
    pub weight: f64,
    /// Per-direction weights on `[linear; angular]` (world axes).
    #[serde(default = "unit_weights")]
    pub axis_weights: [f64; 6],
}

fn unit_weights() -> [f64; 6] {
    [1.0; 6]
}

impl CartesianTask {
    fn validate(&self) -> Result<(), ControlError> {
        let gains = [self.kp_linear, self.kd_linear, self.kp_angular, self.kd_angular, self.weight];
        if gains.iter().chain(self.axis_weights.iter()).any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(ControlError::InvalidTask(format!("{}: gains and weights must be finite and non-negative", self.frame)));
        }
        if (self.rotation.transpose() * self.rotation - Mat3::identity()).amax() > 1e-6 {
            return Err(ControlError::InvalidTask(format!("{}: target rotation is not orthonormal", self.frame)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointRegularizationTask {
    pub s_des: DVector<f64>,
    pub s_dot_des: DVector<f64>,
    pub s_ddot_des: DVector<f64>,
    pub kp: DVector<f64>,
    pub kd: DVector<f64>,
    pub weight: f64,
}

impl JointRegularizationTask {
    /// Holds `s_des` at rest with uniform gains.
    pub fn hold(s_des: DVector<f64>, kp: f64, kd: f64, weight: f64) -> Self {
        let n = s_des.len();
        Self {
            s_des,
            s_dot_des: DVector::zeros(n),
            s_ddot_des: DVector::zeros(n),
            kp: DVector::from_element(n, kp),
            kd: DVector::from_element(n, kd),
            weight,
        }
    }

    fn validate(&self, n: usize) -> Result<(), ControlError> {
        for (what, v) in [
            ("s_des", &self.s_des),
            ("s_dot_des", &self.s_dot_des),
            ("s_ddot_des", &self.s_ddot_des),
            ("kp", &self.kp),
            ("kd", &self.kd),
        ] {
            check_len(what, n, v.len())?;
        }
        if self.kp.iter().chain(self.kd.iter()).any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(ControlError::InvalidTask("joint gains must be positive".into()));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(ControlError::InvalidTask("joint task weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Residual affine in the generalized acceleration:
/// `residual(ν̇) = offset − matrix·ν̇`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskResidual {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl TaskResidual {
    pub fn evaluate(&self, nu_dot: &DVector<f64>) -> DVector<f64> {
        &self.offset - &self.matrix * nu_dot
    }
}

/// Desired `[v̇*; ω̇*]` of the task frame origin, world axes.
pub fn cartesian_targets(tree: &RigidBodyTree, state: &RobotState, task: &CartesianTask) -> Result<Vec6, ControlError> {
    let id = tree.frame_id(&task.frame)?;
    let pose = frame_pose(tree, state, id)?;
    let twist = frame_velocity(tree, state, id)?;
    let r = pose.rotation;
    let p_dot = r * linear(&twist);
    let omega = r * angular(&twist);
    let lin = task.linear_acceleration
        + task.kd_linear * (task.linear_velocity - p_dot)
        + task.kp_linear * (task.position - pose.translation);
    let rot_err = rotation_log(&(task.rotation * r.transpose()));
    let ang = task.angular_acceleration + task.kd_angular * (task.angular_velocity - omega) + task.kp_angular * rot_err;
    Ok(stack(&lin, &ang))
}

/// `[v̇*; ω̇*] − J ν̇ − J̇ν` with the frame acceleration expressed at the
/// frame origin in world axes.
pub fn cartesian_residual(tree: &RigidBodyTree, state: &RobotState, task: &CartesianTask) -> Result<TaskResidual, ControlError> {
    task.validate()?;
    let id = tree.frame_id(&task.frame)?;
    let pose = frame_pose(tree, state, id)?;
    let twist = frame_velocity(tree, state, id)?;
    let jac = frame_jacobian(tree, state, id)?;
    let bias = jdot_nu(tree, state, id)?;
    let r = pose.rotation;
    let nv = tree.nv();
    let mut matrix = DMatrix::zeros(6, nv);
    for c in 0..nv {
        let col: Vec6 = jac.column(c).into_owned();
        let w = stack(&(r * linear(&col)), &(r * angular(&col)));
        matrix.column_mut(c).copy_from(&w);
    }
    let drift_lin = r * (linear(&bias) + angular(&twist).cross(&linear(&twist)));
    let drift_ang = r * angular(&bias);
    let target = cartesian_targets(tree, state, task)?;
    let offset = target - stack(&drift_lin, &drift_ang);
    Ok(TaskResidual {
        matrix,
        offset: DVector::from_column_slice(offset.as_slice()),
    })
}

/// `s̈* = s̈_des + k_d(ṡ_des − ṡ) + k_p(s_des − s)`
pub fn joint_acceleration_target(state: &RobotState, task: &JointRegularizationTask) -> Result<DVector<f64>, ControlError> {
    task.validate(state.s.len())?;
    Ok(&task.s_ddot_des + task.kd.component_mul(&(&task.s_dot_des - &state.s_dot)) + task.kp.component_mul(&(&task.s_des - &state.s)))
}

/// `s̈* − s̈`, acting on the joint rows of `ν̇`.
pub fn joint_regularization_residual(state: &RobotState, task: &JointRegularizationTask) -> Result<TaskResidual, ControlError> {
    let target = joint_acceleration_target(state, task)?;
    let n = target.len();
    let mut matrix = DMatrix::zeros(n, 6 + n);
    matrix.view_mut((0, 6), (n, n)).fill_with_identity();
    Ok(TaskResidual { matrix, offset: target })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HlcTasks {
    pub cartesian: Vec<CartesianTask>,
    pub joint: Option<JointRegularizationTask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HlcOptions {
    /// Tikhonov term relative to the mean diagonal of the cost Hessian.
    pub regularization: f64,
    /// Frames held at zero acceleration by a contact wrench variable each.
    pub rigid_contacts: Vec<String>,
}

impl Default for HlcOptions {
    fn default() -> Self {
        Self {
            regularization: 1e-12,
            rigid_contacts: Vec::new(),
        }
    }
}

/// `min ½ zᵀ H z + gᵀ z` subject to `A z = b`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
}

impl QpProblem {
    /// Drops linearly dependent equality rows, then solves the KKT system.
    pub fn solve(&self) -> Result<DVector<f64>, ControlError> {
        let nz = self.hessian.nrows();
        let (a, b) = self.independent_constraints()?;
        let ne = a.nrows();
        let mut kkt = DMatrix::zeros(nz + ne, nz + ne);
        kkt.view_mut((0, 0), (nz, nz)).copy_from(&self.hessian);
        kkt.view_mut((0, nz), (nz, ne)).copy_from(&a.transpose());
        kkt.view_mut((nz, 0), (ne, nz)).copy_from(&a);
        let mut rhs = DVector::zeros(nz + ne);
        rhs.rows_mut(0, nz).copy_from(&(-&self.gradient));
        rhs.rows_mut(nz, ne).copy_from(&b);
        let sol = kkt.lu().solve(&rhs).filter(|s| s.iter().all(|v| v.is_finite()));
        let Some(sol) = sol else {
            return Err(self.unbounded());
        };
        let z = sol.rows(0, nz).into_owned();
        let residual = (&self.eq_matrix * &z - &self.eq_rhs).amax();
        if residual > 1e-8 * self.eq_rhs.amax().max(1.0) {
            return Err(ControlError::Infeasible { residual });
        }
        Ok(z)
    }

    /// Row space of the equality constraints, rejecting inconsistent ones.
    fn independent_constraints(&self) -> Result<(DMatrix<f64>, DVector<f64>), ControlError> {
        let nz = self.eq_matrix.ncols();
        if self.eq_matrix.nrows() == 0 {
            return Ok((DMatrix::zeros(0, nz), DVector::zeros(0)));
        }
        let svd = self.eq_matrix.clone().svd(true, false);
        let u = svd.u.as_ref().expect("left singular vectors");
        let sigma = &svd.singular_values;
        let tol = 1e-10 * sigma.amax().max(1.0);
        let keep: Vec<usize> = (0..sigma.len()).filter(|&k| sigma[k] > tol).collect();
        let basis = DMatrix::from_fn(u.nrows(), keep.len(), |r, c| u[(r, keep[c])]);
        let projected = &basis * (basis.transpose() * &self.eq_rhs);
        let residual = (&projected - &self.eq_rhs).amax();
        if residual > 1e-9 * self.eq_rhs.amax().max(1.0) {
            return Err(ControlError::Infeasible { residual });
        }
        Ok((basis.transpose() * &self.eq_matrix, basis.transpose() * &self.eq_rhs))
    }

    fn unbounded(&self) -> ControlError {
        let eig = self.hessian.clone().symmetric_eigen();
        let (k, curvature) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k, *v))
            .unwrap_or((0, 0.0));
        ControlError::Unbounded {
            direction_norm: eig.eigenvectors.column(k).norm(),
            curvature,
        }
    }
}

/// Assembles the high-level problem. Variables are
/// `[ν̇ (6+n), τ (n), f_base (6), f_contact (6 per rigid contact)]`.
pub fn build_hlc(tree: &RigidBodyTree, state: &RobotState, tasks: &HlcTasks, options: &HlcOptions) -> Result<QpProblem, ControlError> {
    if tasks.cartesian.is_empty() && tasks.joint.is_none() {
        return Err(ControlError::NoTask);
    }
    let n = tree.dofs();
    let nv = tree.nv();
    let nc = options.rigid_contacts.len();
    let nz = nv + n + 6 + 6 * nc;
    let mut h = DMatrix::zeros(nz, nz);
    let mut g = DVector::zeros(nz);
    let mut add = |res: &TaskResidual, weights: &[f64]| {
        for (row, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let a = res.matrix.row(row);
            let mut hv = h.view_mut((0, 0), (nv, nv));
            hv.ger(w, &a.transpose(), &a.transpose(), 1.0);
            let mut gv = g.rows_mut(0, nv);
            gv.axpy(-w * res.offset[row], &a.transpose(), 1.0);
        }
    };
    for task in &tasks.cartesian {
        let res = cartesian_residual(tree, state, task)?;
        let weights: Vec<f64> = task.axis_weights.iter().map(|a| a * task.weight).collect();
        add(&res, &weights);
    }
    if let Some(task) = &tasks.joint {
        let res = joint_regularization_residual(state, task)?;
        add(&res, &vec![task.weight; n]);
    }
    let mean_diag = h.trace() / nz as f64;
    let eps = options.regularization * if mean_diag > 0.0 { mean_diag } else { 1.0 };
    for i in 0..nz {
        h[(i, i)] += eps;
    }

    let m = mass_matrix(tree, state)?;
    let bias = bias_forces(tree, state)?;
    let ne = nv + 6 + 6 * nc;
    let mut a = DMatrix::zeros(ne, nz);
    let mut b = DVector::zeros(ne);
    a.view_mut((0, 0), (nv, nv)).copy_from(&m);
    for i in 0..n {
        a[(6 + i, nv + i)] = -1.0;
    }
    for i in 0..6 {
        a[(i, nv + n + i)] = -1.0;
    }
    b.rows_mut(0, nv).copy_from(&(-&bias));
    for i in 0..6 {
        a[(nv + i, i)] = 1.0;
        b[nv + i] = state.base_acceleration[i];
    }
    for (k, name) in options.rigid_contacts.iter().enumerate() {
        let id = tree.frame_id(name)?;
        let jac = frame_jacobian(tree, state, id)?;
        let col = nv + n + 6 + 6 * k;
        let row = nv + 6 + 6 * k;
        for r in 0..6 {
            for c in 0..nv {
                a[(c, col + r)] = -jac[(r, c)];
                a[(row + r, c)] = jac[(r, c)];
            }
        }
        let drift = jdot_nu(tree, state, id)?;
        for r in 0..6 {
            b[row + r] = -drift[r];
        }
    }
    Ok(QpProblem {
        hessian: h * 2.0,
        gradient: g * 2.0,
        eq_matrix: a,
        eq_rhs: b,
    })
}

/// Desired joint torques from the high-level problem.
pub fn solve_hlc(tree: &RigidBodyTree, state: &RobotState, tasks: &HlcTasks, options: &HlcOptions) -> Result<DVector<f64>, ControlError> {
    let qp = build_hlc(tree, state, tasks, options)?;
    let z = qp.solve()?;
    Ok(z.rows(tree.nv(), tree.dofs()).into_owned())
}

/// Gravity (and base-motion) compensation: joint torques holding the current
/// configuration at rest.
pub fn gravity_compensation(tree: &RigidBodyTree, state: &RobotState) -> Result<DVector<f64>, ControlError> {
    let rest = RobotState {
        s_dot: DVector::zeros(state.s.len()),
        ..state.clone()
    };
    let mut nu_dot = DVector::zeros(tree.nv());
    nu_dot.fixed_rows_mut::<6>(0).copy_from(&state.base_acceleration);
    Ok(rnea(tree, &rest, &nu_dot, &[])?.joint)
}

/// `τ = G(s) + k_p(s_ref − s) + k_d(ṡ_ref − ṡ)`
pub fn pd_gravity(
    tree: &RigidBodyTree,
    state: &RobotState,
    s_ref: &DVector<f64>,
    s_dot_ref: &DVector<f64>,
    kp: &DVector<f64>,
    kd: &DVector<f64>,
) -> Result<DVector<f64>, ControlError> {
    let n = tree.dofs();
    for (what, v) in [("s_ref", s_ref), ("s_dot_ref", s_dot_ref), ("kp", kp), ("kd", kd)] {
        check_len(what, n, v.len())?;
    }
    let g = gravity_compensation(tree, state)?;
    Ok(g + kp.component_mul(&(s_ref - &state.s)) + kd.component_mul(&(s_dot_ref - &state.s_dot)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowLevelGains {
    pub kp: DVector<f64>,
    pub ki: DVector<f64>,
    /// Bound on `|∫e dt|`, Nm·s.
    pub integral_limit: f64,
    /// Bound on `|i|`, A.
    pub current_limit: f64,
}

impl LowLevelGains {
    pub fn uniform(n: usize, kp: f64, ki: f64, integral_limit: f64, current_limit: f64) -> Self {
        Self {
            kp: DVector::from_element(n, kp),
            ki: DVector::from_element(n, ki),
            integral_limit,
            current_limit,
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), ControlError> {
        check_len("kp", n, self.kp.len())?;
        check_len("ki", n, self.ki.len())?;
        let ok = self.kp.iter().chain(self.ki.iter()).all(|g| *g >= 0.0 && g.is_finite())
            && self.integral_limit > 0.0
            && self.current_limit > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ControlError::InvalidTask("low-level gains must be non-negative and limits positive".into()))
        }
    }
}

/// Motor parameters the low level needs per joint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointDrive {
    pub gear_ratio: f64,
    pub torque_constant: f64,
    pub friction: FrictionParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowLevelOutput {
    /// Current reference, A.
    pub current: DVector<f64>,
    pub clamped: Vec<bool>,
    /// Integral of the torque error after this step.
    pub integral: DVector<f64>,
}

/// `i = [τ_des + k_p e + k_i ∫e + τ_F(ṡ)] / (r k_τ)` with `e = τ_des − τ̂`.
/// The integral is clamped to the integral limit and frozen on joints whose
/// output saturates.
#[allow(clippy::too_many_arguments)]
pub fn low_level_step(
    tau_des: &DVector<f64>,
    tau_hat: &DVector<f64>,
    s_dot: &DVector<f64>,
    drives: &[JointDrive],
    gains: &LowLevelGains,
    dt: f64,
    integral: &DVector<f64>,
) -> Result<LowLevelOutput, ControlError> {
    let n = drives.len();
    for (what, len) in [("tau_des", tau_des.len()), ("tau_hat", tau_hat.len()), ("s_dot", s_dot.len()), ("integral", integral.len())] {
        check_len(what, n, len)?;
    }
    gains.validate(n)?;
    if !(dt > 0.0) {
        return Err(ControlError::InvalidTask(format!("time step {dt} must be positive")));
    }
    let mut current = DVector::zeros(n);
    let mut next = integral.clone();
    let mut clamped = vec![false; n];
    for i in 0..n {
        let d = &drives[i];
        let e = tau_des[i] - tau_hat[i];
        let candidate = (integral[i] + e * dt).clamp(-gains.integral_limit, gains.integral_limit);
        let scale = d.gear_ratio * d.torque_constant;
        let comp = d.friction.torque(s_dot[i]);
        let raw = (tau_des[i] + gains.kp[i] * e + gains.ki[i] * candidate + comp) / scale;
        if raw.abs() > gains.current_limit {
            clamped[i] = true;
            current[i] = raw.clamp(-gains.current_limit, gains.current_limit);
        } else {
            current[i] = raw;
            next[i] = candidate;
        }
    }
    Ok(LowLevelOutput {
        current,
        clamped,
        integral: next,
    })
}

#[cfg(test)]
mod tests;
