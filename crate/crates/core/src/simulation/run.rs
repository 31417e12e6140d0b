use nalgebra::DVector;

use crate::control::{
    gravity_compensation, low_level_step, pd_gravity, solve_hlc, CartesianTask, HlcOptions, HlcTasks, JointDrive,
    JointRegularizationTask, LowLevelGains,
};
use crate::dynamics::spatial::{Mat3, Vec3};
use crate::dynamics::{frame_jacobian, frame_pose, FrameId, RigidBodyTree, RobotState};
use crate::estimator::{Dataset, EstimatorConfig, EstimatorError, InputVector, MeasurementVector, RneaEstimator, TorqueEstimator};
use crate::model::{load_model, KinematicModel};

use super::log::{Abort, LogRow, RunLog};
use super::scenario::{ControlLaw, EstimatorKind, Reference, Scenario, Waypoint};
use super::{synthesize_measurements, Plant, SensorSynth, SimulationError};

/// Loads the scenario's model and runs it once per selected estimator.
pub fn run_scenario(scenario: &Scenario) -> Result<Vec<RunLog>, SimulationError> {
    let model = load_model(&scenario.model)?;
    run_with_model(scenario, &model)
}

pub fn run_with_model(scenario: &Scenario, model: &KinematicModel) -> Result<Vec<RunLog>, SimulationError> {
    let exp = Experiment::new(scenario, model)?;
    scenario.estimator_choice.kinds().iter().map(|&k| exp.run(k)).collect()
}

enum JointRef {
    Hold(f64),
    Sine { center: f64, amplitude: f64, omega: f64, phase: f64 },
}

impl JointRef {
    fn at(&self, t: f64) -> (f64, f64, f64) {
        match *self {
            Self::Hold(v) => (v, 0.0, 0.0),
            Self::Sine {
                center,
                amplitude,
                omega,
                phase,
            } => {
                let a = omega * t + phase;
                (
                    center + amplitude * a.sin(),
                    amplitude * omega * a.cos(),
                    -amplitude * omega * omega * a.sin(),
                )
            }
        }
    }
}

struct CartesianRef {
    frame: String,
    id: FrameId,
    origin: Vec3,
    rotation: Mat3,
    waypoints: Vec<Waypoint>,
}

impl CartesianRef {
    /// Position, velocity and acceleration of the target.
    fn at(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let (mut t0, mut o0) = (0.0, Vec3::zeros());
        for w in &self.waypoints {
            if t < w.time {
                let span = w.time - t0;
                let x = (t - t0) / span;
                let d = w.offset - o0;
                let p = 10.0 * x.powi(3) - 15.0 * x.powi(4) + 6.0 * x.powi(5);
                let v = (30.0 * x.powi(2) - 60.0 * x.powi(3) + 30.0 * x.powi(4)) / span;
                let a = (60.0 * x - 180.0 * x.powi(2) + 120.0 * x.powi(3)) / (span * span);
                return (self.origin + o0 + d * p, d * v, d * a);
            }
            t0 = w.time;
            o0 = w.offset;
        }
        (self.origin + o0, Vec3::zeros(), Vec3::zeros())
    }
}

enum Estimator {
    Ukf(Box<TorqueEstimator>),
    Rnea(Box<RneaEstimator>),
}

impl Estimator {
    fn step(&mut self, u: &InputVector, y: &MeasurementVector, dt: f64) -> Result<(DVector<f64>, [f64; 5]), EstimatorError> {
        Ok(match self {
            Self::Ukf(e) => {
                let out = e.step(u, y, dt)?;
                (out.tau_j_hat, out.innovation_norms)
            }
            Self::Rnea(e) => (e.step(u, y, dt)?, [0.0; 5]),
        })
    }
}

/// A validated scenario bound to its model, ready to run.
pub struct Experiment<'a> {
    scenario: &'a Scenario,
    model: &'a KinematicModel,
    tree: RigidBodyTree,
    plant: Plant,
    synth: SensorSynth,
    drives: Vec<JointDrive>,
    joint_refs: Vec<JointRef>,
    cartesian: Option<CartesianRef>,
    zero_torque: Vec<usize>,
    estimator_config: EstimatorConfig,
    s0: DVector<f64>,
    s_dot0: DVector<f64>,
}

impl<'a> Experiment<'a> {
    pub fn new(scenario: &'a Scenario, model: &'a KinematicModel) -> Result<Self, SimulationError> {
        scenario.validate(model)?;
        let friction = scenario.friction_vector(model);
        let events = scenario.contact_events(model)?;
        let plant = Plant::new(model, scenario.base_pose, friction.clone(), &events)?;
        let tree = RigidBodyTree::from_model(model)?;
        let s0 = scenario.initial_positions(model);
        let s_dot0 = scenario.initial_velocities(model);
        let drives = model
            .joints
            .iter()
            .zip(&friction)
            .map(|(j, f)| JointDrive {
                gear_ratio: j.gear_ratio,
                torque_constant: j.motor_torque_constant,
                friction: *f,
            })
            .collect();
        let name_of = |i: usize| model.joints[i].name.as_str();
        let mut joint_refs: Vec<JointRef> = (0..model.dofs()).map(|i| JointRef::Hold(s0[i])).collect();
        let mut cartesian = None;
        match &scenario.reference {
            Reference::Hold { positions } => {
                for (i, r) in joint_refs.iter_mut().enumerate() {
                    if let Some(&v) = positions.get(name_of(i)) {
                        *r = JointRef::Hold(v);
                    }
                }
            }
            Reference::JointSinusoid { joints } => {
                for (i, r) in joint_refs.iter_mut().enumerate() {
                    if let Some(s) = joints.get(name_of(i)) {
                        *r = JointRef::Sine {
                            center: s.center.unwrap_or(s0[i]),
                            amplitude: s.amplitude,
                            omega: 2.0 * std::f64::consts::PI * s.frequency_hz,
                            phase: s.phase,
                        };
                    }
                }
            }
            Reference::CartesianSpline { frame, waypoints } => {
                let id = tree.frame_id(frame)?;
                let pose = frame_pose(&tree, &plant.state(s0.clone(), s_dot0.clone()), id)?;
                cartesian = Some(CartesianRef {
                    frame: frame.clone(),
                    id,
                    origin: pose.translation,
                    rotation: pose.rotation,
                    waypoints: waypoints.clone(),
                });
            }
        }
        let zero_torque = scenario
            .controller
            .zero_torque
            .iter()
            .map(|n| model.joint_index(n).expect("validated"))
            .collect();
        let mut estimator_config = scenario.estimator.clone();
        if estimator_config.friction.is_empty() {
            estimator_config.friction = friction;
        }
        Ok(Self {
            synth: SensorSynth::new(model)?,
            scenario,
            model,
            tree,
            plant,
            drives,
            joint_refs,
            cartesian,
            zero_torque,
            estimator_config,
            s0,
            s_dot0,
        })
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    fn desired_torque(&self, t: f64, state: &RobotState) -> Result<DVector<f64>, SimulationError> {
        let n = self.tree.dofs();
        let refs: Vec<_> = self.joint_refs.iter().map(|r| r.at(t)).collect();
        let s_ref = DVector::from_fn(n, |i, _| refs[i].0);
        let sd_ref = DVector::from_fn(n, |i, _| refs[i].1);
        let sdd_ref = DVector::from_fn(n, |i, _| refs[i].2);
        let mut tau = match &self.scenario.controller.law {
            ControlLaw::PdGravity { kp, kd } => pd_gravity(
                &self.tree,
                state,
                &s_ref,
                &sd_ref,
                &DVector::from_element(n, *kp),
                &DVector::from_element(n, *kd),
            )?,
            ControlLaw::Qp {
                posture_kp,
                posture_kd,
                posture_weight,
                cartesian,
                regularization,
            } => {
                let mut tasks = HlcTasks {
                    cartesian: Vec::new(),
                    joint: Some(JointRegularizationTask {
                        s_des: s_ref,
                        s_dot_des: sd_ref,
                        s_ddot_des: sdd_ref,
                        kp: DVector::from_element(n, *posture_kp),
                        kd: DVector::from_element(n, *posture_kd),
                        weight: *posture_weight,
                    }),
                };
                if let (Some(gains), Some(c)) = (cartesian, &self.cartesian) {
                    let (p, v, a) = c.at(t);
                    tasks.cartesian.push(CartesianTask {
                        frame: c.frame.clone(),
                        position: p,
                        rotation: c.rotation,
                        linear_velocity: v,
                        angular_velocity: Vec3::zeros(),
                        linear_acceleration: a,
                        angular_acceleration: Vec3::zeros(),
                        kp_linear: gains.kp_linear,
                        kd_linear: gains.kd_linear,
                        kp_angular: gains.kp_angular,
                        kd_angular: gains.kd_angular,
                        weight: gains.weight,
                        axis_weights: gains.axis_weights,
                    });
                }
                let options = HlcOptions {
                    regularization: *regularization,
                    ..HlcOptions::default()
                };
                solve_hlc(&self.tree, state, &tasks, &options)?
            }
        };
        for &j in &self.zero_torque {
            tau[j] = 0.0;
        }
        Ok(tau)
    }

    fn task_error(&self, state: &RobotState, t: f64) -> Result<Option<f64>, SimulationError> {
        let Some(c) = &self.cartesian else {
            return Ok(None);
        };
        let p = frame_pose(&self.tree, state, c.id)?.translation;
        Ok(Some((c.at(t).0 - p).norm()))
    }

    fn projected_contacts(&self, state: &RobotState, t: f64) -> Result<DVector<f64>, SimulationError> {
        let n = self.tree.dofs();
        let mut tau = DVector::zeros(n);
        for (id, w) in self.plant.contact_wrenches(state, t, true)? {
            let jac = frame_jacobian(&self.tree, state, id)?;
            tau += jac.columns(6, n).transpose() * w.to_vector();
        }
        Ok(tau)
    }

    /// Closed-loop run with `kind` supplying the torque estimate. Plant,
    /// estimator and controller failures end the run early and are recorded
    /// in [`RunLog::abort`].
    pub fn run(&self, kind: EstimatorKind) -> Result<RunLog, SimulationError> {
        Ok(self.simulate(kind, false)?.0)
    }

    /// Runs like [`Experiment::run`] and also returns the estimator inputs,
    /// measurements and true torques of every tick.
    pub fn record(&self, kind: EstimatorKind) -> Result<(RunLog, Dataset), SimulationError> {
        let (log, data) = self.simulate(kind, true)?;
        Ok((log, data.expect("recording requested")))
    }

    pub fn estimator_config(&self) -> &EstimatorConfig {
        &self.estimator_config
    }

    fn simulate(&self, kind: EstimatorKind, record: bool) -> Result<(RunLog, Option<Dataset>), SimulationError> {
        let sc = self.scenario;
        let n = self.tree.dofs();
        let dt = 1.0 / sc.rates.estimator_hz;
        let substeps = (dt / sc.rates.plant_dt).round() as usize;
        let h = dt / substeps as f64;
        let hlc_every = (sc.rates.estimator_hz / sc.rates.hlc_hz).round() as usize;
        let mut estimator = match kind {
            EstimatorKind::Ukf => Estimator::Ukf(Box::new(TorqueEstimator::new(self.model, self.estimator_config.clone())?)),
            EstimatorKind::Rnea => Estimator::Rnea(Box::new(RneaEstimator::new(self.model, sc.differentiator.cutoff_hz)?)),
        };
        let gains = LowLevelGains::uniform(
            n,
            sc.controller.low_level.kp,
            sc.controller.low_level.ki,
            sc.controller.low_level.integral_limit,
            sc.controller.low_level.current_limit,
        );
        let mut state = self.plant.state(self.s0.clone(), self.s_dot0.clone());
        let g = gravity_compensation(&self.tree, &state)?;
        let mut current_prev = DVector::from_fn(n, |i, _| g[i] / (self.drives[i].gear_ratio * self.drives[i].torque_constant));
        let mut integral = DVector::zeros(n);
        let mut tau_des = g;
        let mut log = RunLog {
            scenario: sc.name.clone(),
            estimator: kind,
            joints: self.model.joints.iter().map(|j| j.name.clone()).collect(),
            dt,
            rows: Vec::with_capacity(sc.ticks()),
            contact_windows: self.plant.contacts().iter().map(|(_, c)| (c.start, c.end)).collect(),
            abort: None,
        };
        let mut data = record.then(|| Dataset {
            name: sc.name.clone(),
            model: self.model.clone(),
            config: self.estimator_config.clone(),
            dt,
            inputs: Vec::new(),
            measurements: Vec::new(),
            truth: Vec::new(),
        });
        for k in 0..sc.ticks() {
            let t = k as f64 * dt;
            let contacts = self.plant.contact_wrenches(&state, t, false)?;
            let nu_dot = self.plant.acceleration(&state, &current_prev, t)?;
            let (u, mut y) = synthesize_measurements(&self.synth, &state, &nu_dot, &current_prev, &contacts, &sc.noise, sc.seed, k as u64)?;
            y.mask = sc.mask;
            let tau_true = self.plant.joint_torque(&current_prev, &state.s_dot);
            if let Some(d) = data.as_mut() {
                d.inputs.push(u.clone());
                d.measurements.push(y.clone());
                d.truth.push(tau_true.clone());
            }
            let (tau_hat, innovation) = match estimator.step(&u, &y, dt) {
                Ok(v) => v,
                Err(e) => {
                    log.abort = Some(Abort {
                        time: t,
                        reason: format!("estimator failed: {e}"),
                    });
                    break;
                }
            };
            if k % hlc_every == 0 {
                match self.desired_torque(t, &u.robot_state(&y.s_dot)) {
                    Ok(v) => tau_des = v,
                    Err(e) => {
                        log.abort = Some(Abort {
                            time: t,
                            reason: format!("controller failed: {e}"),
                        });
                        break;
                    }
                }
            }
            let out = low_level_step(&tau_des, &tau_hat, &y.s_dot, &self.drives, &gains, dt, &integral)?;
            integral = out.integral;
            log.rows.push(LogRow {
                t,
                s: state.s.clone(),
                s_dot: state.s_dot.clone(),
                s_dot_meas: y.s_dot.clone(),
                current_meas: y.current.clone(),
                tau_true,
                tau_applied: self.plant.joint_torque(&out.current, &state.s_dot),
                tau_hat,
                tau_des: tau_des.clone(),
                tau_ext: self.projected_contacts(&state, t)?,
                current: out.current.clone(),
                clamped: out.clamped,
                contact: self.plant.contacts().iter().any(|(_, c)| c.is_active(t)),
                task_error: self.task_error(&state, t)?,
                innovation,
            });
            let mut diverged = None;
            for j in 0..substeps {
                let tj = t + j as f64 * h;
                match self.plant.step(&state, &out.current, tj, h) {
                    Ok(next) if next.s_dot.amax() <= sc.max_joint_velocity => state = next,
                    Ok(next) => {
                        diverged = Some(Abort {
                            time: tj + h,
                            reason: format!("joint velocity {:.3} rad/s exceeds the limit", next.s_dot.amax()),
                        });
                        break;
                    }
                    Err(SimulationError::Diverged { time }) => {
                        diverged = Some(Abort {
                            time,
                            reason: "plant state is not finite".into(),
                        });
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if diverged.is_some() {
                log.abort = diverged;
                break;
            }
            current_prev = out.current;
        }
        if let Some(d) = data.as_mut() {
            let len = log.rows.len();
            d.inputs.truncate(len);
            d.measurements.truncate(len);
            d.truth.truncate(len);
        }
        Ok((log, data))
    }
}
