use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::spatial::{angular, cross_force, cross_motion, linear, RigidTransform, Vec3, Vec6};
use super::{factorize, gravity_offset, jacobian_from, kinematics, mass_matrix_from, DynamicsError, FrameId, RigidBodyTree, RobotState};

/// Joint-space dynamics at a fixed configuration and base motion.
///
/// Positions, the joint mass matrix factorization and frame placements are
/// computed once; joint velocities and torques vary per call. The estimator
/// evaluates one of these per tick for all of its sigma points.
pub struct ConfiguredTree<'a> {
    tree: &'a RigidBodyTree,
    base_velocity: Vec6,
    /// Base acceleration with gravity folded in.
    a0: Vec6,
    local: Vec<RigidTransform>,
    world: Vec<RigidTransform>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl<'a> ConfiguredTree<'a> {
    pub fn new(tree: &'a RigidBodyTree, state: &RobotState) -> Result<Self, DynamicsError> {
        let kin = kinematics(tree, state)?;
        let n = tree.dofs();
        let chol = if n > 0 {
            let m = mass_matrix_from(tree, &kin);
            Some(factorize(m.view((6, 6), (n, n)).into_owned())?)
        } else {
            None
        };
        Ok(Self {
            tree,
            base_velocity: state.base_velocity.to_vector(),
            a0: state.base_acceleration + gravity_offset(tree, state),
            local: kin.local,
            world: kin.world,
            chol,
        })
    }

    pub fn tree(&self) -> &RigidBodyTree {
        self.tree
    }

    fn velocities(&self, s_dot: &DVector<f64>) -> Vec<Vec6> {
        let mut v = Vec::with_capacity(self.tree.bodies.len());
        v.push(self.base_velocity);
        for (i, body) in self.tree.bodies.iter().enumerate().skip(1) {
            let j = body.joint.as_ref().expect("joint");
            let p = body.parent.expect("parent");
            let vi = self.local[i].motion_to_child(&v[p]) + j.subspace() * s_dot[j.dof];
            v.push(vi);
        }
        v
    }

    fn accelerations(&self, s_dot: &DVector<f64>, s_ddot: Option<&DVector<f64>>, v: &[Vec6]) -> Vec<Vec6> {
        let mut a = Vec::with_capacity(v.len());
        a.push(self.a0);
        for (i, body) in self.tree.bodies.iter().enumerate().skip(1) {
            let j = body.joint.as_ref().expect("joint");
            let p = body.parent.expect("parent");
            let sv = j.subspace();
            let mut ai = self.local[i].motion_to_child(&a[p]) + cross_motion(&v[i], &(sv * s_dot[j.dof]));
            if let Some(sdd) = s_ddot {
                ai += sv * sdd[j.dof];
            }
            a.push(ai);
        }
        a
    }

    /// Joint torques needed for zero joint acceleration at velocity `s_dot`
    /// under gravity and the configured base motion.
    pub fn joint_bias(&self, s_dot: &DVector<f64>) -> DVector<f64> {
        let v = self.velocities(s_dot);
        let a = self.accelerations(s_dot, None, &v);
        let mut f: Vec<Vec6> = self
            .tree
            .bodies
            .iter()
            .enumerate()
            .map(|(i, b)| b.inertia * a[i] + cross_force(&v[i], &(b.inertia * v[i])))
            .collect();
        let mut tau = DVector::zeros(self.tree.dofs());
        for i in (1..self.tree.bodies.len()).rev() {
            let body = &self.tree.bodies[i];
            let j = body.joint.as_ref().expect("joint");
            tau[j.dof] = j.subspace().dot(&f[i]);
            let fp = self.local[i].force_to_parent(&f[i]);
            f[body.parent.expect("parent")] += fp;
        }
        tau
    }

    /// Transposed joint columns of the frame Jacobian (`n×6`): maps a wrench
    /// in frame coordinates to joint torques.
    pub fn wrench_map(&self, frame: FrameId) -> Result<DMatrix<f64>, DynamicsError> {
        let f = self.tree.frame(frame)?;
        let kin = super::Kinematics {
            local: self.local.clone(),
            world: self.world.clone(),
            velocity: Vec::new(),
        };
        let jac = jacobian_from(self.tree, &kin, f);
        Ok(DMatrix::from_fn(self.tree.dofs(), 6, |r, c| jac[(c, 6 + r)]))
    }

    /// Solves `M_ss s̈ = tau − bias(s_dot)`, where `tau` already includes any
    /// external wrench contributions.
    pub fn joint_accelerations(&self, s_dot: &DVector<f64>, tau: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            Some(chol) => chol.solve(&(tau - self.joint_bias(s_dot))),
            None => DVector::zeros(0),
        }
    }

    /// Accelerometer reading at `frame` for joint velocity `s_dot` and joint
    /// acceleration `s_ddot`.
    pub fn proper_acceleration(&self, s_dot: &DVector<f64>, s_ddot: &DVector<f64>, frame: FrameId) -> Result<Vec3, DynamicsError> {
        let f = self.tree.frame(frame)?;
        let v = self.velocities(s_dot);
        let a = self.accelerations(s_dot, Some(s_ddot), &v);
        let af = f.placement.motion_to_child(&a[f.body]);
        let vf = f.placement.motion_to_child(&v[f.body]);
        Ok(linear(&af) + angular(&vf).cross(&linear(&vf)))
    }

    /// Twist of `frame` in frame coordinates.
    pub fn frame_velocity(&self, s_dot: &DVector<f64>, frame: FrameId) -> Result<Vec6, DynamicsError> {
        let f = self.tree.frame(frame)?;
        let v = self.velocities(s_dot);
        Ok(f.placement.motion_to_child(&v[f.body]))
    }
}
