use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::spatial::{SpatialVelocity, Wrench};
use crate::dynamics::{body_motion, rnea_with_joint_wrenches, FrameId, RigidBodyTree, RobotState};
use crate::model::{split_at_ft_sensors, KinematicModel};

use super::{EstimatorError, InputVector, MeasurementVector, SensorSet};

struct Part {
    tree: RigidBodyTree,
    joints: Vec<usize>,
    base_body: usize,
    /// Signed FT wrenches on the boundary: (frame, sign, slot in `SensorSet::ft`).
    boundary: Vec<(FrameId, f64, usize)>,
    /// The cut this part hangs from, for child-side parts.
    entry: Option<(FrameId, usize)>,
}

/// Inverse dynamics with the measured FT wrenches as the only external
/// wrenches.
///
/// The piece holding the robot root is solved leaf to root. Every piece
/// hanging from a cut starts from the measured wrench at the cut and carries
/// it down as long as each body has a single child; below a branch it falls
/// back to the leaf-to-root pass.
pub struct RneaBaseline {
    tree: RigidBodyTree,
    sensors: SensorSet,
    parts: Vec<Part>,
}

impl RneaBaseline {
    pub fn new(model: &KinematicModel) -> Result<Self, EstimatorError> {
        let tree = RigidBodyTree::from_model(model)?;
        let sensors = SensorSet::of(model);
        let slot = |sensor: usize| sensors.ft.iter().position(|&s| s == sensor).expect("cut sensor is an FT sensor");
        let mut parts = Vec::new();
        for sub in split_at_ft_sensors(model)? {
            let sub_tree = RigidBodyTree::from_submodel(model, &sub)?;
            let base_body = tree
                .body_index(&model.links[sub.base_link].name)
                .expect("base link is in the full tree");
            let mut boundary = Vec::new();
            let mut entry = None;
            for b in &sub.boundary_ft_sensors {
                let frame = sub_tree.frame_id(&model.sensors[b.sensor].name)?;
                if b.side.sign() > 0.0 {
                    entry = Some((frame, slot(b.sensor)));
                }
                boundary.push((frame, b.side.sign(), slot(b.sensor)));
            }
            parts.push(Part {
                tree: sub_tree,
                joints: sub.joints.clone(),
                base_body,
                boundary,
                entry,
            });
        }
        Ok(Self { tree, sensors, parts })
    }

    pub fn sensors(&self) -> &SensorSet {
        &self.sensors
    }

    /// Joint torques for full-robot `state`, generalized acceleration
    /// `nu_dot` and FT readings in model sensor order.
    pub fn estimate(&self, state: &RobotState, nu_dot: &DVector<f64>, ft: &[Wrench]) -> Result<DVector<f64>, EstimatorError> {
        if ft.len() != self.sensors.ft.len() {
            return Err(EstimatorError::Dimension {
                what: "FT readings",
                expected: self.sensors.ft.len(),
                actual: ft.len(),
            });
        }
        let motion = body_motion(&self.tree, state, nu_dot)?;
        let mut tau = DVector::zeros(self.tree.dofs());
        for part in &self.parts {
            let n = part.joints.len();
            let (pose, vel, acc) = motion[part.base_body];
            let sub_state = RobotState {
                base_pose: pose,
                base_velocity: SpatialVelocity::from_vector(&vel),
                base_acceleration: acc,
                s: DVector::from_fn(n, |i, _| state.s[part.joints[i]]),
                s_dot: DVector::from_fn(n, |i, _| state.s_dot[part.joints[i]]),
            };
            let mut sub_nu_dot = DVector::zeros(6 + n);
            sub_nu_dot.fixed_rows_mut::<6>(0).copy_from(&acc);
            for (i, &j) in part.joints.iter().enumerate() {
                sub_nu_dot[6 + i] = nu_dot[6 + j];
            }
            let wrenches: Vec<(FrameId, Wrench)> = part
                .boundary
                .iter()
                .map(|&(frame, sign, slot)| (frame, Wrench::from_vector(&(ft[slot].to_vector() * sign))))
                .collect();
            let (joint_wrenches, forces) = rnea_with_joint_wrenches(&part.tree, &sub_state, &sub_nu_dot, &wrenches)?;
            let mut local = forces.joint;
            if let Some((frame, slot)) = part.entry {
                forward_correct(&part.tree, &sub_state, frame, &ft[slot], &joint_wrenches, &mut local)?;
            }
            for (i, &j) in part.joints.iter().enumerate() {
                tau[j] = local[i];
            }
        }
        Ok(tau)
    }
}

/// Replaces the leaf-to-root torques along the single-child chain below the
/// entry cut with those implied by the measured cut wrench.
fn forward_correct(
    tree: &RigidBodyTree,
    state: &RobotState,
    frame: FrameId,
    measured: &Wrench,
    joint_wrenches: &[nalgebra::Vector6<f64>],
    tau: &mut DVector<f64>,
) -> Result<(), EstimatorError> {
    let kin = crate::dynamics::kinematics(tree, state)?;
    let f = tree.frame(frame)?;
    let bodies = tree.bodies();
    let measured_base = f.placement.force_to_parent(&measured.to_vector());
    let children = |b: usize| -> Vec<usize> { (1..bodies.len()).filter(|&c| bodies[c].parent == Some(b)).collect() };
    let mut next = children(0);
    if next.len() != 1 {
        return Ok(());
    }
    let first = next[0];
    let mut delta = kin.local[first].force_to_child(&measured_base) - joint_wrenches[first];
    let mut body = first;
    loop {
        let joint = bodies[body].joint.as_ref().expect("joint");
        tau[joint.dof] += joint.subspace().dot(&delta);
        next = children(body);
        if next.len() != 1 {
            return Ok(());
        }
        delta = kin.local[next[0]].force_to_child(&delta);
        body = next[0];
    }
}

/// In-loop baseline: differentiates the encoder velocities through a
/// first-order low-pass filter to obtain `s̈`.
pub struct RneaEstimator {
    baseline: RneaBaseline,
    cutoff_hz: f64,
    prev_s_dot: Option<DVector<f64>>,
    s_ddot: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DifferentiatorConfig {
    pub cutoff_hz: f64,
}

impl Default for DifferentiatorConfig {
    fn default() -> Self {
        Self { cutoff_hz: 50.0 }
    }
}

impl RneaEstimator {
    pub fn new(model: &KinematicModel, cutoff_hz: f64) -> Result<Self, EstimatorError> {
        if !(cutoff_hz > 0.0 && cutoff_hz.is_finite()) {
            return Err(EstimatorError::Config(format!("cutoff {cutoff_hz} Hz must be positive")));
        }
        Ok(Self {
            s_ddot: DVector::zeros(model.dofs()),
            baseline: RneaBaseline::new(model)?,
            cutoff_hz,
            prev_s_dot: None,
        })
    }

    pub fn s_ddot(&self) -> &DVector<f64> {
        &self.s_ddot
    }

    pub fn step(&mut self, u: &InputVector, y: &MeasurementVector, dt: f64) -> Result<DVector<f64>, EstimatorError> {
        y.check(u.s.len(), &self.baseline.sensors)?;
        if let Some(prev) = &self.prev_s_dot {
            if dt > 0.0 {
                let raw = (&y.s_dot - prev) / dt;
                let alpha = dt / (dt + 1.0 / (2.0 * std::f64::consts::PI * self.cutoff_hz));
                self.s_ddot += (raw - &self.s_ddot) * alpha;
            }
        }
        self.prev_s_dot = Some(y.s_dot.clone());
        let state = u.robot_state(&y.s_dot);
        let n = u.s.len();
        let mut nu_dot = DVector::zeros(6 + n);
        nu_dot.fixed_rows_mut::<6>(0).copy_from(&u.base_acceleration);
        nu_dot.rows_mut(6, n).copy_from(&self.s_ddot);
        self.baseline.estimate(&state, &nu_dot, &y.ft)
    }
}
