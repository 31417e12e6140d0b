//! Closed-loop simulation: a full-model plant integrated with RK4, sensor
//! synthesis with seeded noise, scripted and random contact wrenches, and
//! per-run logs with RMSE summaries.

mod log;
mod run;
mod scenario;

use std::path::PathBuf;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::control::ControlError;
use crate::dynamics::spatial::{angular, linear, stack, RigidTransform, Vec3, Wrench};
use crate::dynamics::{
    frame_pose, frame_velocity, joint_forward_dynamics, kinematics, rnea_with_joint_wrenches, sensor_proper_acceleration,
    DynamicsError, FrameId, RigidBodyTree, RobotState,
};
use crate::estimator::{EstimatorError, InputVector, MeasurementMask, MeasurementVector, SensorSet};
use crate::friction::FrictionParams;
use crate::model::{KinematicModel, ModelError};

pub use log::{compute_rmse, rmse, Abort, JointSummary, LogRow, RunLog, RunSummary, Signal, Window};
pub use run::{run_scenario, run_with_model, Experiment};
pub use scenario::{
    is_measured, CartesianGains, ContactEvent, ControlLaw, ControllerSpec, EstimatorChoice, EstimatorKind, InitialState,
    LowLevelSpec, Profile, RandomPushes, Rates, Reference, Scenario, SensorBias, SensorNoiseSpec, Sinusoid, Waypoint,
};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("plant diverged at t = {time} s")]
    Diverged { time: f64 },
    #[error("series lengths differ: {left} vs {right}")]
    Length { left: usize, right: usize },
}

/// Ground-truth robot: the full model driven by motor currents through the
/// gearbox, minus joint friction, plus contact wrenches.
pub struct Plant {
    tree: RigidBodyTree,
    base_pose: RigidTransform,
    scale: Vec<f64>,
    friction: Vec<FrictionParams>,
    contacts: Vec<(FrameId, ContactEvent)>,
}

impl Plant {
    pub fn new(
        model: &KinematicModel,
        base_pose: RigidTransform,
        friction: Vec<FrictionParams>,
        contacts: &[ContactEvent],
    ) -> Result<Self, SimulationError> {
        let tree = RigidBodyTree::from_model(model)?;
        if friction.len() != tree.dofs() {
            return Err(SimulationError::Config(format!(
                "{} friction models for {} joints",
                friction.len(),
                tree.dofs()
            )));
        }
        let contacts = contacts
            .iter()
            .map(|c| Ok((tree.frame_id(&c.frame)?, c.clone())))
            .collect::<Result<Vec<_>, SimulationError>>()?;
        Ok(Self {
            scale: model.joints.iter().map(|j| j.gear_ratio * j.motor_torque_constant).collect(),
            tree,
            base_pose,
            friction,
            contacts,
        })
    }

    pub fn tree(&self) -> &RigidBodyTree {
        &self.tree
    }

    pub fn contacts(&self) -> &[(FrameId, ContactEvent)] {
        &self.contacts
    }

    /// Fixed-base state at the plant's base pose.
    pub fn state(&self, s: DVector<f64>, s_dot: DVector<f64>) -> RobotState {
        RobotState {
            base_pose: self.base_pose,
            s,
            s_dot,
            ..RobotState::at_rest(0)
        }
    }

    /// `r·k_τ·i − τ_F(ṡ)`
    pub fn joint_torque(&self, current: &DVector<f64>, s_dot: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(current.len(), |i, _| self.scale[i] * current[i] - self.friction[i].torque(s_dot[i]))
    }

    /// Active contact wrenches at `t`, in frame coordinates. With
    /// `unmeasured_only` the contacts an FT sensor sees are skipped.
    pub fn contact_wrenches(&self, state: &RobotState, t: f64, unmeasured_only: bool) -> Result<Vec<(FrameId, Wrench)>, SimulationError> {
        let mut out = Vec::new();
        for (id, c) in &self.contacts {
            let k = c.scale(t);
            if k == 0.0 || (unmeasured_only && c.measured_by_ft) {
                continue;
            }
            let r = frame_pose(&self.tree, state, *id)?.rotation.transpose();
            let f = Vec3::new(c.wrench[0], c.wrench[1], c.wrench[2]) * k;
            let n = Vec3::new(c.wrench[3], c.wrench[4], c.wrench[5]) * k;
            out.push((*id, Wrench::new(r * f, r * n)));
        }
        Ok(out)
    }

    /// True generalized acceleration for motor currents `current` at `t`.
    pub fn acceleration(&self, state: &RobotState, current: &DVector<f64>, t: f64) -> Result<DVector<f64>, SimulationError> {
        let wrenches = self.contact_wrenches(state, t, false)?;
        Ok(joint_forward_dynamics(&self.tree, state, &self.joint_torque(current, &state.s_dot), &wrenches)?)
    }

    /// One RK4 step of length `h` with the currents held.
    pub fn step(&self, state: &RobotState, current: &DVector<f64>, t: f64, h: f64) -> Result<RobotState, SimulationError> {
        if !(h > 0.0) {
            return Err(SimulationError::Config(format!("plant step {h} must be positive")));
        }
        let n = self.tree.dofs();
        let deriv = |s: &DVector<f64>, sd: &DVector<f64>, tt: f64| -> Result<DVector<f64>, SimulationError> {
            let st = self.state(s.clone(), sd.clone());
            Ok(self.acceleration(&st, current, tt)?.rows(6, n).into_owned())
        };
        let (s, sd) = (&state.s, &state.s_dot);
        let a1 = deriv(s, sd, t)?;
        let (s2, sd2) = (s + sd * (0.5 * h), sd + &a1 * (0.5 * h));
        let a2 = deriv(&s2, &sd2, t + 0.5 * h)?;
        let (s3, sd3) = (s + &sd2 * (0.5 * h), sd + &a2 * (0.5 * h));
        let a3 = deriv(&s3, &sd3, t + 0.5 * h)?;
        let (s4, sd4) = (s + &sd3 * h, sd + &a3 * h);
        let a4 = deriv(&s4, &sd4, t + h)?;
        let s_next = s + (sd + &sd2 * 2.0 + &sd3 * 2.0 + &sd4) * (h / 6.0);
        let sd_next = sd + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
        if !(s_next.iter().chain(sd_next.iter()).all(|v| v.is_finite())) {
            return Err(SimulationError::Diverged { time: t + h });
        }
        Ok(RobotState {
            s: s_next,
            s_dot: sd_next,
            ..state.clone()
        })
    }
}

/// Exact sensor models of the full robot.
pub struct SensorSynth {
    tree: RigidBodyTree,
    sensors: SensorSet,
    /// Sensor frame and the body on the far side of the cut.
    ft: Vec<(FrameId, usize)>,
    accelerometers: Vec<FrameId>,
    gyroscopes: Vec<FrameId>,
}

impl SensorSynth {
    pub fn new(model: &KinematicModel) -> Result<Self, SimulationError> {
        let tree = RigidBodyTree::from_model(model)?;
        let sensors = SensorSet::of(model);
        let frame = |i: usize| tree.frame_id(&model.sensors[i].name);
        let mut ft = Vec::new();
        for &i in &sensors.ft {
            let spec = &model.sensors[i];
            let joint = model
                .cut_joint_of(spec)
                .ok_or_else(|| SimulationError::Config(format!("FT sensor '{}' must cut the model", spec.name)))?;
            let body = tree.body_index(&model.joints[joint].child).expect("cut child is a body");
            ft.push((frame(i)?, body));
        }
        let accelerometers = sensors.accelerometers.iter().map(|&i| frame(i)).collect::<Result<_, _>>()?;
        let gyroscopes = sensors.gyroscopes.iter().map(|&i| frame(i)).collect::<Result<_, _>>()?;
        Ok(Self {
            tree,
            sensors,
            ft,
            accelerometers,
            gyroscopes,
        })
    }

    pub fn sensors(&self) -> &SensorSet {
        &self.sensors
    }

    /// Wrench each cut sensor's parent side exerts on its child side, in
    /// sensor coordinates.
    pub fn ft_wrenches(&self, state: &RobotState, nu_dot: &DVector<f64>, contacts: &[(FrameId, Wrench)]) -> Result<Vec<Wrench>, SimulationError> {
        if self.ft.is_empty() {
            return Ok(Vec::new());
        }
        let (joint_wrenches, _) = rnea_with_joint_wrenches(&self.tree, state, nu_dot, contacts)?;
        let kin = kinematics(&self.tree, state)?;
        self.ft
            .iter()
            .map(|&(id, body)| {
                let in_parent = kin.local[body].force_to_parent(&joint_wrenches[body]);
                let f = self.tree.frame(id)?;
                Ok(Wrench::from_vector(&f.placement.force_to_child(&in_parent)))
            })
            .collect()
    }
}

/// Sensor readings for the true state, ν̇, motor currents and contact
/// wrenches, with Gaussian noise drawn from stream `tick` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_measurements(
    synth: &SensorSynth,
    state: &RobotState,
    nu_dot: &DVector<f64>,
    current: &DVector<f64>,
    contacts: &[(FrameId, Wrench)],
    noise: &SensorNoiseSpec,
    seed: u64,
    tick: u64,
) -> Result<(InputVector, MeasurementVector), SimulationError> {
    let tree = &synth.tree;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tick);
    let bias = noise.bias.unwrap_or_default();
    let mut draw = |sd: f64, b: f64| {
        let z: f64 = rng.sample(StandardNormal);
        sd * z + b
    };
    let s_dot = state.s_dot.map(|v| v + draw(noise.encoder, bias.encoder));
    let current = current.map(|v| v + draw(noise.current, bias.current));
    let mut ft = synth.ft_wrenches(state, nu_dot, contacts)?;
    for w in &mut ft {
        let v = w.to_vector();
        let f = linear(&v).map(|x| x + draw(noise.ft_force, bias.ft_force));
        let n = angular(&v).map(|x| x + draw(noise.ft_torque, bias.ft_torque));
        *w = Wrench::from_vector(&stack(&f, &n));
    }
    let mut accelerometer = Vec::with_capacity(synth.accelerometers.len());
    for &id in &synth.accelerometers {
        let a = sensor_proper_acceleration(tree, state, nu_dot, id)?;
        accelerometer.push(a.map(|x| x + draw(noise.accelerometer, bias.accelerometer)));
    }
    let mut gyroscope = Vec::with_capacity(synth.gyroscopes.len());
    for &id in &synth.gyroscopes {
        let w = angular(&frame_velocity(tree, state, id)?);
        gyroscope.push(w.map(|x| x + draw(noise.gyroscope, bias.gyroscope)));
    }
    let input = InputVector {
        base_pose: state.base_pose,
        base_velocity: state.base_velocity,
        base_acceleration: state.base_acceleration,
        s: state.s.clone(),
    };
    let y = MeasurementVector {
        s_dot,
        current,
        ft,
        accelerometer,
        gyroscope,
        mask: MeasurementMask::default(),
    };
    Ok((input, y))
}

#[cfg(test)]
mod tests;
