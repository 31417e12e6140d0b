//! Rigid-body dynamics on a [`RigidBodyTree`].
//!
//! The generalized velocity is `ν = [base twist (6); joint rates (n)]`, where
//! the base twist is expressed in the base frame. External wrenches are given
//! in the coordinates of the frame they act at.

mod configured;
pub mod spatial;
mod tree;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix6xX, SymmetricEigen};
use thiserror::Error;

use spatial::{angular, cross_force, cross_motion, linear, stack, RigidTransform, SpatialVelocity, Vec3, Vec6, Wrench};
pub use configured::ConfiguredTree;
pub use tree::{Body, Frame, FrameId, RigidBodyTree, TreeJoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("{what}: expected length {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("unknown frame '{0}'")]
    UnknownFrame(String),
    #[error("mass matrix is not positive definite (condition estimate {condition_estimate:e})")]
    SingularMassMatrix { condition_estimate: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotState {
    /// Base frame placement in the world.
    pub base_pose: RigidTransform,
    /// Base twist in base coordinates.
    pub base_velocity: SpatialVelocity,
    /// Base twist derivative in base coordinates.
    pub base_acceleration: Vec6,
    pub s: DVector<f64>,
    pub s_dot: DVector<f64>,
}

impl RobotState {
    /// Fixed base at the world origin, all joints at zero.
    pub fn at_rest(n: usize) -> Self {
        Self {
            base_pose: RigidTransform::identity(),
            base_velocity: SpatialVelocity::default(),
            base_acceleration: Vec6::zeros(),
            s: DVector::zeros(n),
            s_dot: DVector::zeros(n),
        }
    }

    /// Generalized velocity `[v_B; ṡ]`.
    pub fn nu(&self) -> DVector<f64> {
        let n = self.s_dot.len();
        let mut nu = DVector::zeros(6 + n);
        nu.fixed_rows_mut::<6>(0).copy_from(&self.base_velocity.to_vector());
        nu.rows_mut(6, n).copy_from(&self.s_dot);
        nu
    }

    fn check(&self, tree: &RigidBodyTree) -> Result<(), DynamicsError> {
        check_len("joint positions", tree.dofs(), self.s.len())?;
        check_len("joint velocities", tree.dofs(), self.s_dot.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralizedForces {
    pub base: Vec6,
    pub joint: DVector<f64>,
}

impl GeneralizedForces {
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.joint.len();
        let mut out = DVector::zeros(6 + n);
        out.fixed_rows_mut::<6>(0).copy_from(&self.base);
        out.rows_mut(6, n).copy_from(&self.joint);
        out
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            base: v.fixed_rows::<6>(0).into_owned(),
            joint: v.rows(6, v.len() - 6).into_owned(),
        }
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), DynamicsError> {
    if expected == actual {
        Ok(())
    } else {
        Err(DynamicsError::DimensionMismatch { what, expected, actual })
    }
}

/// Positions and velocities of every body for one state.
#[derive(Clone, Debug)]
pub struct Kinematics {
    /// Body placement in its parent.
    pub local: Vec<RigidTransform>,
    /// Body placement in the world.
    pub world: Vec<RigidTransform>,
    /// Body twist in body coordinates.
    pub velocity: Vec<Vec6>,
}

pub fn kinematics(tree: &RigidBodyTree, state: &RobotState) -> Result<Kinematics, DynamicsError> {
    state.check(tree)?;
    let nb = tree.bodies.len();
    let mut local = Vec::with_capacity(nb);
    let mut world = Vec::with_capacity(nb);
    let mut velocity = Vec::with_capacity(nb);
    local.push(RigidTransform::identity());
    world.push(state.base_pose);
    velocity.push(state.base_velocity.to_vector());
    for body in &tree.bodies[1..] {
        let joint = body.joint.as_ref().expect("non-base body has a joint");
        let parent = body.parent.expect("non-base body has a parent");
        let x = joint.transform(state.s[joint.dof]);
        let v = x.motion_to_child(&velocity[parent]) + joint.subspace() * state.s_dot[joint.dof];
        world.push(world[parent].compose(&x));
        local.push(x);
        velocity.push(v);
    }
    Ok(Kinematics { local, world, velocity })
}

/// Body accelerations for base acceleration `a0` and joint accelerations
/// `s_ddot`, including velocity-product terms.
fn body_accelerations(tree: &RigidBodyTree, state: &RobotState, kin: &Kinematics, a0: Vec6, s_ddot: Option<&DVector<f64>>) -> Vec<Vec6> {
    let mut acc = Vec::with_capacity(tree.bodies.len());
    acc.push(a0);
    for (i, body) in tree.bodies.iter().enumerate().skip(1) {
        let joint = body.joint.as_ref().expect("joint");
        let parent = body.parent.expect("parent");
        let sv = joint.subspace();
        let mut a = kin.local[i].motion_to_child(&acc[parent]) + cross_motion(&kin.velocity[i], &(sv * state.s_dot[joint.dof]));
        if let Some(sdd) = s_ddot {
            a += sv * sdd[joint.dof];
        }
        acc.push(a);
    }
    acc
}

fn gravity_offset(tree: &RigidBodyTree, state: &RobotState) -> Vec6 {
    let g = state.base_pose.rotation.transpose() * tree.gravity;
    stack(&(-g), &Vec3::zeros())
}

fn resolve_wrenches(tree: &RigidBodyTree, wrenches: &[(FrameId, Wrench)]) -> Result<Vec<Vec6>, DynamicsError> {
    let mut out = vec![Vec6::zeros(); tree.bodies.len()];
    for (id, w) in wrenches {
        let frame = tree.frame(*id)?;
        out[frame.body] += frame.placement.force_to_parent(&w.to_vector());
    }
    Ok(out)
}

/// Body wrenches transmitted across each joint (from parent into child, in
/// child coordinates) plus the generalized forces.
fn rnea_full(
    tree: &RigidBodyTree,
    state: &RobotState,
    kin: &Kinematics,
    accel: &DVector<f64>,
    wrenches: &[(FrameId, Wrench)],
    with_gravity: bool,
) -> Result<(Vec<Vec6>, GeneralizedForces), DynamicsError> {
    check_len("generalized acceleration", tree.nv(), accel.len())?;
    let mut a0: Vec6 = accel.fixed_rows::<6>(0).into_owned();
    if with_gravity {
        a0 += gravity_offset(tree, state);
    }
    let sdd = accel.rows(6, tree.dofs()).into_owned();
    let acc = body_accelerations(tree, state, kin, a0, Some(&sdd));
    let fext = resolve_wrenches(tree, wrenches)?;
    let mut f: Vec<Vec6> = tree
        .bodies
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let v = kin.velocity[i];
            b.inertia * acc[i] + cross_force(&v, &(b.inertia * v)) - fext[i]
        })
        .collect();
    let mut tau = DVector::zeros(tree.dofs());
    for i in (1..tree.bodies.len()).rev() {
        let body = &tree.bodies[i];
        let joint = body.joint.as_ref().expect("joint");
        tau[joint.dof] = joint.subspace().dot(&f[i]) + joint.motor_inertia * sdd[joint.dof];
        let fp = kin.local[i].force_to_parent(&f[i]);
        f[body.parent.expect("parent")] += fp;
    }
    let base = f[0];
    Ok((f, GeneralizedForces { base, joint: tau }))
}

/// Inverse dynamics: `M ν̇ + h − Σ Jᵀ f_ext`.
pub fn rnea(
    tree: &RigidBodyTree,
    state: &RobotState,
    accel: &DVector<f64>,
    wrenches: &[(FrameId, Wrench)],
) -> Result<GeneralizedForces, DynamicsError> {
    let kin = kinematics(tree, state)?;
    Ok(rnea_full(tree, state, &kin, accel, wrenches, true)?.1)
}

/// Like [`rnea`], also returning the wrench each body receives from its
/// parent, in body coordinates (the base entry is the base generalized force).
pub fn rnea_with_joint_wrenches(
    tree: &RigidBodyTree,
    state: &RobotState,
    accel: &DVector<f64>,
    wrenches: &[(FrameId, Wrench)],
) -> Result<(Vec<Vec6>, GeneralizedForces), DynamicsError> {
    let kin = kinematics(tree, state)?;
    rnea_full(tree, state, &kin, accel, wrenches, true)
}

/// World placement, twist and acceleration of every body (twist and
/// acceleration in body coordinates, gravity excluded) for generalized
/// acceleration `nu_dot`.
pub fn body_motion(
    tree: &RigidBodyTree,
    state: &RobotState,
    nu_dot: &DVector<f64>,
) -> Result<Vec<(RigidTransform, Vec6, Vec6)>, DynamicsError> {
    check_len("generalized acceleration", tree.nv(), nu_dot.len())?;
    let kin = kinematics(tree, state)?;
    let sdd = nu_dot.rows(6, tree.dofs()).into_owned();
    let acc = body_accelerations(tree, state, &kin, nu_dot.fixed_rows::<6>(0).into_owned(), Some(&sdd));
    Ok((0..tree.bodies.len()).map(|i| (kin.world[i], kin.velocity[i], acc[i])).collect())
}

/// Composite-rigid-body mass matrix, `(6+n)×(6+n)`.
pub fn mass_matrix(tree: &RigidBodyTree, state: &RobotState) -> Result<DMatrix<f64>, DynamicsError> {
    let kin = kinematics(tree, state)?;
    Ok(mass_matrix_from(tree, &kin))
}

fn mass_matrix_from(tree: &RigidBodyTree, kin: &Kinematics) -> DMatrix<f64> {
    let nb = tree.bodies.len();
    let nv = tree.nv();
    let mut ic: Vec<_> = tree.bodies.iter().map(|b| b.inertia).collect();
    for i in (1..nb).rev() {
        let x = kin.local[i].motion_matrix();
        let p = tree.bodies[i].parent.expect("parent");
        let contrib = x.transpose() * ic[i] * x;
        ic[p] += contrib;
    }
    let mut m = DMatrix::zeros(nv, nv);
    m.fixed_view_mut::<6, 6>(0, 0).copy_from(&ic[0]);
    for i in 1..nb {
        let joint = tree.bodies[i].joint.as_ref().expect("joint");
        let si = joint.subspace();
        let ci = 6 + joint.dof;
        let mut f = ic[i] * si;
        m[(ci, ci)] = si.dot(&f) + joint.motor_inertia;
        let mut j = i;
        while let Some(p) = tree.bodies[j].parent {
            f = kin.local[j].force_to_parent(&f);
            j = p;
            match tree.bodies[j].joint.as_ref() {
                Some(pj) => {
                    let cj = 6 + pj.dof;
                    let v = pj.subspace().dot(&f);
                    m[(ci, cj)] = v;
                    m[(cj, ci)] = v;
                }
                None => {
                    for r in 0..6 {
                        m[(r, ci)] = f[r];
                        m[(ci, r)] = f[r];
                    }
                }
            }
        }
    }
    m
}

/// Coriolis, centrifugal and gravity terms `h(q, ν)`.
pub fn bias_forces(tree: &RigidBodyTree, state: &RobotState) -> Result<DVector<f64>, DynamicsError> {
    let zero = DVector::zeros(tree.nv());
    Ok(rnea(tree, state, &zero, &[])?.to_vector())
}

/// World placement of a frame.
pub fn frame_pose(tree: &RigidBodyTree, state: &RobotState, frame: FrameId) -> Result<RigidTransform, DynamicsError> {
    let f = tree.frame(frame)?;
    let kin = kinematics(tree, state)?;
    Ok(kin.world[f.body].compose(&f.placement))
}

/// Twist of a frame, in frame coordinates.
pub fn frame_velocity(tree: &RigidBodyTree, state: &RobotState, frame: FrameId) -> Result<Vec6, DynamicsError> {
    let f = tree.frame(frame)?;
    let kin = kinematics(tree, state)?;
    Ok(f.placement.motion_to_child(&kin.velocity[f.body]))
}

/// Jacobian mapping `ν` to the frame twist in frame coordinates.
pub fn frame_jacobian(tree: &RigidBodyTree, state: &RobotState, frame: FrameId) -> Result<Matrix6xX<f64>, DynamicsError> {
    let f = tree.frame(frame)?;
    let kin = kinematics(tree, state)?;
    Ok(jacobian_from(tree, &kin, f))
}

fn jacobian_from(tree: &RigidBodyTree, kin: &Kinematics, f: &Frame) -> Matrix6xX<f64> {
    let mut jac = Matrix6xX::zeros_generic(nalgebra::U6, Dyn(tree.nv()));
    let frame_world = kin.world[f.body].compose(&f.placement);
    let base_to_frame = kin.world[0].inverse().compose(&frame_world);
    jac.fixed_view_mut::<6, 6>(0, 0).copy_from(&base_to_frame.motion_matrix());
    for k in tree.ancestry(f.body) {
        let joint = tree.bodies[k].joint.as_ref().expect("joint");
        let rel = kin.world[k].inverse().compose(&frame_world);
        jac.column_mut(6 + joint.dof).copy_from(&rel.motion_to_child(&joint.subspace()));
    }
    jac
}

/// `J̇ ν` for a frame, in frame coordinates.
pub fn jdot_nu(tree: &RigidBodyTree, state: &RobotState, frame: FrameId) -> Result<Vec6, DynamicsError> {
    let f = tree.frame(frame)?;
    let kin = kinematics(tree, state)?;
    let acc = body_accelerations(tree, state, &kin, Vec6::zeros(), None);
    Ok(f.placement.motion_to_child(&acc[f.body]))
}

/// Accelerometer reading at `frame` for generalized acceleration `nu_dot`:
/// the frame origin's acceleration minus gravity, in frame coordinates.
pub fn sensor_proper_acceleration(
    tree: &RigidBodyTree,
    state: &RobotState,
    nu_dot: &DVector<f64>,
    frame: FrameId,
) -> Result<Vec3, DynamicsError> {
    check_len("generalized acceleration", tree.nv(), nu_dot.len())?;
    let f = tree.frame(frame)?;
    let kin = kinematics(tree, state)?;
    let a0 = nu_dot.fixed_rows::<6>(0).into_owned() + gravity_offset(tree, state);
    let sdd = nu_dot.rows(6, tree.dofs()).into_owned();
    let acc = body_accelerations(tree, state, &kin, a0, Some(&sdd));
    let a = f.placement.motion_to_child(&acc[f.body]);
    let v = f.placement.motion_to_child(&kin.velocity[f.body]);
    Ok(linear(&a) + angular(&v).cross(&linear(&v)))
}

fn factorize(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, DynamicsError> {
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => Err(DynamicsError::SingularMassMatrix {
            condition_estimate: condition_estimate(&m),
        }),
    }
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Floating-base forward dynamics: solves `M ν̇ = τ − h + Σ Jᵀ f_ext`.
pub fn forward_dynamics(
    tree: &RigidBodyTree,
    state: &RobotState,
    forces: &DVector<f64>,
    wrenches: &[(FrameId, Wrench)],
) -> Result<DVector<f64>, DynamicsError> {
    check_len("generalized forces", tree.nv(), forces.len())?;
    let kin = kinematics(tree, state)?;
    let zero = DVector::zeros(tree.nv());
    let c = rnea_full(tree, state, &kin, &zero, wrenches, true)?.1.to_vector();
    let chol = factorize(mass_matrix_from(tree, &kin))?;
    Ok(chol.solve(&(forces - c)))
}

/// Forward dynamics with the base acceleration prescribed by
/// `state.base_acceleration`. Returns the full `ν̇`.
pub fn joint_forward_dynamics(
    tree: &RigidBodyTree,
    state: &RobotState,
    joint_torques: &DVector<f64>,
    wrenches: &[(FrameId, Wrench)],
) -> Result<DVector<f64>, DynamicsError> {
    check_len("joint torques", tree.dofs(), joint_torques.len())?;
    let kin = kinematics(tree, state)?;
    let n = tree.dofs();
    let mut nu_dot = DVector::zeros(tree.nv());
    nu_dot.fixed_rows_mut::<6>(0).copy_from(&state.base_acceleration);
    if n == 0 {
        return Ok(nu_dot);
    }
    let c = rnea_full(tree, state, &kin, &nu_dot, wrenches, true)?.1.joint;
    let m = mass_matrix_from(tree, &kin);
    let chol = factorize(m.view((6, 6), (n, n)).into_owned())?;
    nu_dot.rows_mut(6, n).copy_from(&chol.solve(&(joint_torques - c)));
    Ok(nu_dot)
}

/// Submodel forward dynamics with motor torque `tau_m`, friction `tau_f`,
/// signed boundary FT wrenches and contact wrenches. The base acceleration
/// is the prescribed input `state.base_acceleration`.
pub fn submodel_forward_dynamics(
    tree: &RigidBodyTree,
    state: &RobotState,
    tau_m: &DVector<f64>,
    tau_f: &DVector<f64>,
    boundary: &[(FrameId, f64, Wrench)],
    contacts: &[(FrameId, Wrench)],
) -> Result<DVector<f64>, DynamicsError> {
    check_len("motor torques", tree.dofs(), tau_m.len())?;
    check_len("friction torques", tree.dofs(), tau_f.len())?;
    let tau = DVector::from_fn(tree.dofs(), |i, _| tree.joint(i).gear_ratio * tau_m[i] - tau_f[i]);
    let mut wrenches: Vec<(FrameId, Wrench)> = boundary
        .iter()
        .map(|(id, sign, w)| (*id, Wrench::from_vector(&(w.to_vector() * *sign))))
        .collect();
    wrenches.extend_from_slice(contacts);
    joint_forward_dynamics(tree, state, &tau, &wrenches)
}

/// Total kinetic plus gravitational potential energy.
pub fn total_energy(tree: &RigidBodyTree, state: &RobotState) -> Result<f64, DynamicsError> {
    let kin = kinematics(tree, state)?;
    let nu = state.nu();
    let kinetic = 0.5 * nu.dot(&(mass_matrix_from(tree, &kin) * &nu));
    let potential: f64 = tree
        .bodies
        .iter()
        .enumerate()
        .map(|(i, b)| {
            if b.mass == 0.0 {
                return 0.0;
            }
            let c = com_of(b);
            -b.mass * tree.gravity.dot(&kin.world[i].transform_point(&c))
        })
        .sum();
    Ok(kinetic + potential)
}

fn com_of(b: &Body) -> Vec3 {
    // lower-left block of the spatial inertia is m·[c]×
    let mc = b.inertia.fixed_view::<3, 3>(3, 0);
    Vec3::new(mc[(2, 1)], mc[(0, 2)], mc[(1, 0)]) / b.mass
}
