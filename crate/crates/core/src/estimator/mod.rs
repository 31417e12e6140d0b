//! Joint-torque estimation.
//!
//! [`TorqueEstimator`] runs one unscented filter per submodel (the pieces
//! between cut FT sensors), stepped root first so that each child submodel
//! gets its base motion from the estimates of its ancestors. The filter state
//! of a submodel is `[ṡ, τ_m, τ_F, f_FT, f_ext]`; the joint torque estimate is
//! `r∘τ_m − τ_F`.
//!
//! [`RneaBaseline`] is the deterministic comparison estimator that treats
//! the FT readings as the only external wrenches.

mod baseline;
mod layout;
mod tune;

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::spatial::{angular, RigidTransform, SpatialVelocity, Vec3, Vec6, Wrench};
use crate::dynamics::{body_motion, ConfiguredTree, DynamicsError, FrameId, RigidBodyTree, RobotState};
use crate::friction::FrictionParams;
use crate::model::{split_at_ft_sensors, KinematicModel, ModelError, SensorKind};
use crate::ukf::{self, GaussianBelief, UkfConfig, UkfError};

pub use baseline::{DifferentiatorConfig, RneaBaseline, RneaEstimator};
pub use layout::{EstimatorState, StateBlock, StateLayout};
pub use tune::{tune_covariances, Dataset, GridAxis, NoiseParam, RandomAxis, SearchSpec, TuneError, TuneReport, TuneTrial};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Ukf(#[from] UkfError),
    #[error("{what}: expected length {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in the {0} measurement block")]
    NonFiniteMeasurement(MeasurementBlock),
    #[error("non-finite estimator input")]
    NonFiniteInput,
    #[error("invalid estimator configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementBlock {
    Encoder,
    Current,
    Ft,
    Accelerometer,
    Gyroscope,
}

impl MeasurementBlock {
    pub const ALL: [MeasurementBlock; 5] = [Self::Encoder, Self::Current, Self::Ft, Self::Accelerometer, Self::Gyroscope];

    pub fn name(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Current => "current",
            Self::Ft => "ft",
            Self::Accelerometer => "accelerometer",
            Self::Gyroscope => "gyroscope",
        }
    }
}

impl fmt::Display for MeasurementBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which measurement blocks take part in the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementMask {
    pub encoder: bool,
    pub current: bool,
    pub ft: bool,
    pub accelerometer: bool,
    pub gyroscope: bool,
}

impl Default for MeasurementMask {
    fn default() -> Self {
        Self {
            encoder: true,
            current: true,
            ft: true,
            accelerometer: true,
            gyroscope: true,
        }
    }
}

impl MeasurementMask {
    pub fn none() -> Self {
        Self {
            encoder: false,
            current: false,
            ft: false,
            accelerometer: false,
            gyroscope: false,
        }
    }

    pub fn get(&self, block: MeasurementBlock) -> bool {
        match block {
            MeasurementBlock::Encoder => self.encoder,
            MeasurementBlock::Current => self.current,
            MeasurementBlock::Ft => self.ft,
            MeasurementBlock::Accelerometer => self.accelerometer,
            MeasurementBlock::Gyroscope => self.gyroscope,
        }
    }

    pub fn set(&mut self, block: MeasurementBlock, on: bool) {
        match block {
            MeasurementBlock::Encoder => self.encoder = on,
            MeasurementBlock::Current => self.current = on,
            MeasurementBlock::Ft => self.ft = on,
            MeasurementBlock::Accelerometer => self.accelerometer = on,
            MeasurementBlock::Gyroscope => self.gyroscope = on,
        }
    }
}

/// Known inputs: base motion (the robot is on a pole) and joint positions.
#[derive(Clone, Debug, PartialEq)]
pub struct InputVector {
    pub base_pose: RigidTransform,
    /// Base twist in base coordinates.
    pub base_velocity: SpatialVelocity,
    pub base_acceleration: Vec6,
    pub s: DVector<f64>,
}

impl InputVector {
    /// Base fixed at `base_pose`.
    pub fn fixed_base(base_pose: RigidTransform, s: DVector<f64>) -> Self {
        Self {
            base_pose,
            base_velocity: SpatialVelocity::default(),
            base_acceleration: Vec6::zeros(),
            s,
        }
    }

    /// Full-robot state with joint velocities `s_dot`.
    pub fn robot_state(&self, s_dot: &DVector<f64>) -> RobotState {
        RobotState {
            base_pose: self.base_pose,
            base_velocity: self.base_velocity,
            base_acceleration: self.base_acceleration,
            s: self.s.clone(),
            s_dot: s_dot.clone(),
        }
    }

    fn is_finite(&self) -> bool {
        self.base_pose.is_finite()
            && self.base_velocity.to_vector().iter().all(|v| v.is_finite())
            && self.base_acceleration.iter().all(|v| v.is_finite())
            && self.s.iter().all(|v| v.is_finite())
    }
}

/// Sensor readings for one tick. FT, accelerometer and gyroscope entries
/// follow the order of those sensors in the model.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementVector {
    pub s_dot: DVector<f64>,
    /// Motor currents, A.
    pub current: DVector<f64>,
    pub ft: Vec<Wrench>,
    pub accelerometer: Vec<Vec3>,
    pub gyroscope: Vec<Vec3>,
    pub mask: MeasurementMask,
}

impl MeasurementVector {
    fn check(&self, n: usize, sensors: &SensorSet) -> Result<(), EstimatorError> {
        let dims = [
            ("encoder readings", n, self.s_dot.len()),
            ("current readings", n, self.current.len()),
            ("FT readings", sensors.ft.len(), self.ft.len()),
            ("accelerometer readings", sensors.accelerometers.len(), self.accelerometer.len()),
            ("gyroscope readings", sensors.gyroscopes.len(), self.gyroscope.len()),
        ];
        for (what, expected, actual) in dims {
            if expected != actual {
                return Err(EstimatorError::Dimension { what, expected, actual });
            }
        }
        let finite = |block| match block {
            MeasurementBlock::Encoder => self.s_dot.iter().all(|v| v.is_finite()),
            MeasurementBlock::Current => self.current.iter().all(|v| v.is_finite()),
            MeasurementBlock::Ft => self.ft.iter().all(|w| w.is_finite()),
            MeasurementBlock::Accelerometer => self.accelerometer.iter().all(|a| a.iter().all(|v| v.is_finite())),
            MeasurementBlock::Gyroscope => self.gyroscope.iter().all(|a| a.iter().all(|v| v.is_finite())),
        };
        for block in MeasurementBlock::ALL {
            if self.mask.get(block) && !finite(block) {
                return Err(EstimatorError::NonFiniteMeasurement(block));
            }
        }
        Ok(())
    }
}

/// Indices into `KinematicModel::sensors` of the sensors that appear in a
/// [`MeasurementVector`], by kind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SensorSet {
    pub ft: Vec<usize>,
    pub accelerometers: Vec<usize>,
    pub gyroscopes: Vec<usize>,
}

impl SensorSet {
    pub fn of(model: &KinematicModel) -> Self {
        let pick = |kind| model.sensors_of_kind(kind).map(|(i, _)| i).collect();
        Self {
            ft: pick(SensorKind::Ft),
            accelerometers: pick(SensorKind::Accelerometer),
            gyroscopes: pick(SensorKind::Gyroscope),
        }
    }
}

/// Standard deviations of the filter noise. Process entries are per filter
/// step; `tau_m` is on the motor side of the gearbox.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorNoise {
    pub process_s_dot: f64,
    pub process_tau_m: f64,
    pub process_tau_f: f64,
    pub process_ft_force: f64,
    pub process_ft_torque: f64,
    pub process_ext_force: f64,
    pub process_ext_torque: f64,
    pub encoder: f64,
    pub current: f64,
    pub ft_force: f64,
    pub ft_torque: f64,
    pub accelerometer: f64,
    pub gyroscope: f64,
}

impl Default for EstimatorNoise {
    fn default() -> Self {
        Self {
            process_s_dot: 1e-5,
            process_tau_m: 0.02,
            process_tau_f: 1e-3,
            process_ft_force: 1.0,
            process_ft_torque: 0.1,
            process_ext_force: 0.5,
            process_ext_torque: 0.05,
            encoder: 2e-3,
            current: 0.02,
            ft_force: 0.5,
            ft_torque: 0.05,
            accelerometer: 0.05,
            gyroscope: 5e-3,
        }
    }
}

/// Standard deviations of the initial belief.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialUncertainty {
    pub s_dot: f64,
    pub tau_m: f64,
    pub tau_f: f64,
    pub ft_force: f64,
    pub ft_torque: f64,
    pub ext_force: f64,
    pub ext_torque: f64,
}

impl Default for InitialUncertainty {
    fn default() -> Self {
        Self {
            s_dot: 0.01,
            tau_m: 0.01,
            tau_f: 0.5,
            ft_force: 1.0,
            ft_torque: 0.1,
            ext_force: 2.0,
            ext_torque: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub ukf: UkfConfig,
    pub noise: EstimatorNoise,
    pub initial: InitialUncertainty,
    /// Candidate contact frames whose wrenches are estimated.
    pub contact_frames: Vec<String>,
    /// Friction model per joint in model order; empty means frictionless.
    pub friction: Vec<FrictionParams>,
}

/// Result of one estimator tick.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorOutput {
    /// `r∘τ̂_m − τ̂_F` for every joint, model order.
    pub tau_j_hat: DVector<f64>,
    /// Estimated joint velocities, model order.
    pub s_dot_hat: DVector<f64>,
    /// Posterior state of every submodel filter.
    pub states: Vec<EstimatorState>,
    /// Innovation norm per block, in [`MeasurementBlock::ALL`] order; zero
    /// for blocks that were masked or absent.
    pub innovation_norms: [f64; 5],
}

struct BoundaryTerm {
    frame: FrameId,
    sign: f64,
    /// Position in `SensorSet::ft`.
    slot: usize,
}

struct SubmodelFilter {
    tree: RigidBodyTree,
    /// Model joint index per local DoF.
    joints: Vec<usize>,
    /// Body index of the submodel base in the full tree.
    base_body: usize,
    is_root: bool,
    layout: StateLayout,
    boundary: Vec<BoundaryTerm>,
    contacts: Vec<FrameId>,
    accelerometers: Vec<(FrameId, usize)>,
    gyroscopes: Vec<(FrameId, usize)>,
    friction: Vec<FrictionParams>,
    gear: DVector<f64>,
    k_tau: DVector<f64>,
    q: DMatrix<f64>,
    belief: GaussianBelief,
    prev_input: Option<RobotState>,
}

/// Configuration-dependent maps used while propagating sigma points.
struct Evaluator<'a> {
    cfg: ConfiguredTree<'a>,
    boundary: Vec<(DMatrix<f64>, f64)>,
    contacts: Vec<DMatrix<f64>>,
}

impl<'a> Evaluator<'a> {
    fn new(filter: &'a SubmodelFilter, input: &RobotState) -> Result<Self, DynamicsError> {
        let cfg = ConfiguredTree::new(&filter.tree, input)?;
        let boundary = filter
            .boundary
            .iter()
            .map(|b| Ok((cfg.wrench_map(b.frame)?, b.sign)))
            .collect::<Result<_, DynamicsError>>()?;
        let contacts = filter
            .contacts
            .iter()
            .map(|&c| cfg.wrench_map(c))
            .collect::<Result<_, _>>()?;
        Ok(Self { cfg, boundary, contacts })
    }

    /// Joint accelerations implied by a state vector.
    fn s_ddot(&self, f: &SubmodelFilter, x: &DVector<f64>) -> DVector<f64> {
        let n = f.layout.joints;
        let l = &f.layout;
        let s_dot = x.rows(0, n).into_owned();
        let tau_m = x.rows(n, n);
        let tau_f = x.rows(2 * n, n);
        let mut tau = f.gear.component_mul(&tau_m) - tau_f;
        for (k, (map, sign)) in self.boundary.iter().enumerate() {
            let r = l.ft(k);
            tau += map * x.rows(r.start, 6) * *sign;
        }
        for (k, map) in self.contacts.iter().enumerate() {
            let r = l.contact(k);
            tau += map * x.rows(r.start, 6);
        }
        self.cfg.joint_accelerations(&s_dot, &tau)
    }
}

impl SubmodelFilter {
    fn process(&self, eval: &Evaluator, x: &DVector<f64>, dt: f64) -> Result<DVector<f64>, String> {
        let n = self.layout.joints;
        let sdd = eval.s_ddot(self, x);
        if !sdd.iter().all(|v| v.is_finite()) {
            return Err("non-finite joint acceleration".into());
        }
        let mut out = x.clone();
        for i in 0..n {
            let s_dot = x[i];
            out[i] = s_dot + sdd[i] * dt;
            out[2 * n + i] += self.friction[i].rate(s_dot, sdd[i]) * dt;
        }
        Ok(out)
    }

    fn active_blocks(&self, mask: &MeasurementMask) -> Vec<MeasurementBlock> {
        MeasurementBlock::ALL
            .into_iter()
            .filter(|&b| mask.get(b) && self.block_rows(b) > 0)
            .collect()
    }

    fn block_rows(&self, block: MeasurementBlock) -> usize {
        match block {
            MeasurementBlock::Encoder | MeasurementBlock::Current => self.layout.joints,
            MeasurementBlock::Ft => 6 * self.boundary.len(),
            MeasurementBlock::Accelerometer => 3 * self.accelerometers.len(),
            MeasurementBlock::Gyroscope => 3 * self.gyroscopes.len(),
        }
    }

    fn measure(&self, eval: &Evaluator, x: &DVector<f64>, blocks: &[MeasurementBlock]) -> Result<DVector<f64>, String> {
        let n = self.layout.joints;
        let s_dot = x.rows(0, n).into_owned();
        let mut out = Vec::new();
        for &block in blocks {
            match block {
                MeasurementBlock::Encoder => out.extend(s_dot.iter()),
                MeasurementBlock::Current => out.extend((0..n).map(|i| x[n + i] / self.k_tau[i])),
                MeasurementBlock::Ft => {
                    let r = self.layout.range(StateBlock::FFt);
                    out.extend(x.rows(r.start, r.len()).iter());
                }
                MeasurementBlock::Accelerometer => {
                    let sdd = eval.s_ddot(self, x);
                    for &(frame, _) in &self.accelerometers {
                        let a = eval.cfg.proper_acceleration(&s_dot, &sdd, frame).map_err(|e| e.to_string())?;
                        out.extend(a.iter());
                    }
                }
                MeasurementBlock::Gyroscope => {
                    for &(frame, _) in &self.gyroscopes {
                        let v = eval.cfg.frame_velocity(&s_dot, frame).map_err(|e| e.to_string())?;
                        out.extend(angular(&v).iter());
                    }
                }
            }
        }
        Ok(DVector::from_vec(out))
    }

    /// Observed values and noise variances for `blocks`.
    fn observed(&self, y: &MeasurementVector, noise: &EstimatorNoise, blocks: &[MeasurementBlock]) -> (DVector<f64>, DVector<f64>) {
        let mut obs = Vec::new();
        let mut var = Vec::new();
        for &block in blocks {
            match block {
                MeasurementBlock::Encoder => {
                    obs.extend(self.joints.iter().map(|&j| y.s_dot[j]));
                    var.extend(std::iter::repeat_n(noise.encoder.powi(2), self.joints.len()));
                }
                MeasurementBlock::Current => {
                    obs.extend(self.joints.iter().map(|&j| y.current[j]));
                    var.extend(std::iter::repeat_n(noise.current.powi(2), self.joints.len()));
                }
                MeasurementBlock::Ft => {
                    for b in &self.boundary {
                        obs.extend(y.ft[b.slot].to_vector().iter());
                        var.extend(wrench_variances(noise.ft_force, noise.ft_torque));
                    }
                }
                MeasurementBlock::Accelerometer => {
                    for &(_, slot) in &self.accelerometers {
                        obs.extend(y.accelerometer[slot].iter());
                        var.extend([noise.accelerometer.powi(2); 3]);
                    }
                }
                MeasurementBlock::Gyroscope => {
                    for &(_, slot) in &self.gyroscopes {
                        obs.extend(y.gyroscope[slot].iter());
                        var.extend([noise.gyroscope.powi(2); 3]);
                    }
                }
            }
        }
        (DVector::from_vec(obs), DVector::from_vec(var))
    }

    fn torque(&self) -> DVector<f64> {
        let n = self.layout.joints;
        let x = &self.belief.mean;
        DVector::from_fn(n, |i, _| self.gear[i] * x[n + i] - x[2 * n + i])
    }
}

fn wrench_variances(force: f64, torque: f64) -> [f64; 6] {
    let (f, t) = (force * force, torque * torque);
    [f, f, f, t, t, t]
}

/// Diagonal covariance from per-block standard deviations.
fn diag_for(layout: &StateLayout, std: [f64; 7]) -> DMatrix<f64> {
    let [s_dot, tau_m, tau_f, ft_force, ft_torque, ext_force, ext_torque] = std;
    let mut d = DVector::zeros(layout.dim());
    let n = layout.joints;
    for i in 0..n {
        d[i] = s_dot * s_dot;
        d[n + i] = tau_m * tau_m;
        d[2 * n + i] = tau_f * tau_f;
    }
    for k in 0..layout.ft_sensors {
        d.rows_mut(layout.ft(k).start, 6).copy_from_slice(&wrench_variances(ft_force, ft_torque));
    }
    for k in 0..layout.contacts {
        d.rows_mut(layout.contact(k).start, 6).copy_from_slice(&wrench_variances(ext_force, ext_torque));
    }
    DMatrix::from_diagonal(&d)
}

/// Joint-torque estimator over all submodels of a robot.
pub struct TorqueEstimator {
    tree: RigidBodyTree,
    sensors: SensorSet,
    filters: Vec<SubmodelFilter>,
    config: EstimatorConfig,
    s_dot_hat: DVector<f64>,
    s_ddot_hat: DVector<f64>,
    initialized: bool,
}

impl TorqueEstimator {
    pub fn new(model: &KinematicModel, config: EstimatorConfig) -> Result<Self, EstimatorError> {
        let tree = RigidBodyTree::from_model(model)?;
        let n = model.dofs();
        let friction = if config.friction.is_empty() {
            vec![FrictionParams::default(); n]
        } else if config.friction.len() == n {
            config.friction.clone()
        } else {
            return Err(EstimatorError::Dimension {
                what: "friction parameters",
                expected: n,
                actual: config.friction.len(),
            });
        };
        for p in &friction {
            p.validate().map_err(|e| EstimatorError::Config(e.to_string()))?;
        }
        for name in &config.contact_frames {
            if model.contact_frame_index(name).is_none() {
                return Err(EstimatorError::Config(format!("unknown contact frame '{name}'")));
            }
        }
        let sensors = SensorSet::of(model);
        let noise = config.noise;
        let mut filters = Vec::new();
        for sub in split_at_ft_sensors(model)? {
            let sub_tree = RigidBodyTree::from_submodel(model, &sub)?;
            let base_name = &model.links[sub.base_link].name;
            let base_body = tree.body_index(base_name).expect("base link is in the full tree");
            let boundary = sub
                .boundary_ft_sensors
                .iter()
                .map(|b| {
                    Ok(BoundaryTerm {
                        frame: sub_tree.frame_id(&model.sensors[b.sensor].name)?,
                        sign: b.side.sign(),
                        slot: sensors.ft.iter().position(|&s| s == b.sensor).expect("cut sensor is an FT sensor"),
                    })
                })
                .collect::<Result<Vec<_>, DynamicsError>>()?;
            let contacts = sub
                .candidate_contact_frames
                .iter()
                .map(|&c| &model.contact_frames[c].name)
                .filter(|name| config.contact_frames.contains(name))
                .map(|name| sub_tree.frame_id(name))
                .collect::<Result<Vec<_>, _>>()?;
            let imu = |kind, list: &[usize]| -> Result<Vec<(FrameId, usize)>, DynamicsError> {
                sub.sensors_of_kind(model, kind)
                    .into_iter()
                    .map(|s| {
                        let slot = list.iter().position(|&x| x == s).expect("sensor listed");
                        Ok((sub_tree.frame_id(&model.sensors[s].name)?, slot))
                    })
                    .collect()
            };
            let accelerometers = imu(SensorKind::Accelerometer, &sensors.accelerometers)?;
            let gyroscopes = imu(SensorKind::Gyroscope, &sensors.gyroscopes)?;
            let layout = StateLayout::new(sub.dofs(), boundary.len(), contacts.len());
            config.ukf.validate(layout.dim())?;
            let q = diag_for(
                &layout,
                [
                    noise.process_s_dot,
                    noise.process_tau_m,
                    noise.process_tau_f,
                    noise.process_ft_force,
                    noise.process_ft_torque,
                    noise.process_ext_force,
                    noise.process_ext_torque,
                ],
            );
            let joints = sub.joints.clone();
            let gear = DVector::from_fn(joints.len(), |i, _| model.joints[joints[i]].gear_ratio);
            let k_tau = DVector::from_fn(joints.len(), |i, _| model.joints[joints[i]].motor_torque_constant);
            let belief = GaussianBelief::new(DVector::zeros(layout.dim()), DMatrix::identity(layout.dim(), layout.dim()))?;
            filters.push(SubmodelFilter {
                tree: sub_tree,
                friction: joints.iter().map(|&j| friction[j]).collect(),
                joints,
                base_body,
                is_root: sub.parent.is_none(),
                layout,
                boundary,
                contacts,
                accelerometers,
                gyroscopes,
                gear,
                k_tau,
                q,
                belief,
                prev_input: None,
            });
        }
        Ok(Self {
            tree,
            sensors,
            filters,
            config,
            s_dot_hat: DVector::zeros(n),
            s_ddot_hat: DVector::zeros(n),
            initialized: false,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn sensors(&self) -> &SensorSet {
        &self.sensors
    }

    pub fn submodel_count(&self) -> usize {
        self.filters.len()
    }

    pub fn layout(&self, submodel: usize) -> StateLayout {
        self.filters[submodel].layout
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Current belief of one submodel filter.
    pub fn belief(&self, submodel: usize) -> &GaussianBelief {
        &self.filters[submodel].belief
    }

    /// Replaces the belief of one submodel filter and marks the estimator
    /// initialized.
    pub fn set_belief(&mut self, submodel: usize, belief: GaussianBelief) -> Result<(), EstimatorError> {
        let f = &mut self.filters[submodel];
        if belief.dim() != f.layout.dim() {
            return Err(EstimatorError::Dimension {
                what: "belief",
                expected: f.layout.dim(),
                actual: belief.dim(),
            });
        }
        for (k, &j) in f.joints.iter().enumerate() {
            self.s_dot_hat[j] = belief.mean[k];
        }
        f.belief = belief;
        self.initialized = true;
        Ok(())
    }

    fn check_input(&self, u: &InputVector) -> Result<(), EstimatorError> {
        if u.s.len() != self.tree.dofs() {
            return Err(EstimatorError::Dimension {
                what: "joint positions",
                expected: self.tree.dofs(),
                actual: u.s.len(),
            });
        }
        if !u.is_finite() {
            return Err(EstimatorError::NonFiniteInput);
        }
        Ok(())
    }

    /// State of submodel `k` built from the input and the current estimates
    /// of its ancestors (joint velocities are left at zero).
    fn submodel_input(&self, k: usize, u: &InputVector) -> Result<RobotState, EstimatorError> {
        let f = &self.filters[k];
        let s = DVector::from_fn(f.joints.len(), |i, _| u.s[f.joints[i]]);
        let s_dot = DVector::zeros(f.joints.len());
        if f.is_root {
            return Ok(RobotState {
                base_pose: u.base_pose,
                base_velocity: u.base_velocity,
                base_acceleration: u.base_acceleration,
                s,
                s_dot,
            });
        }
        let state = u.robot_state(&self.s_dot_hat);
        let mut nu_dot = DVector::zeros(self.tree.nv());
        nu_dot.fixed_rows_mut::<6>(0).copy_from(&u.base_acceleration);
        nu_dot.rows_mut(6, self.tree.dofs()).copy_from(&self.s_ddot_hat);
        let (pose, vel, acc) = body_motion(&self.tree, &state, &nu_dot)?[f.base_body];
        Ok(RobotState {
            base_pose: pose,
            base_velocity: SpatialVelocity::from_vector(&vel),
            base_acceleration: acc,
            s,
            s_dot,
        })
    }

    /// Propagates a submodel state through the process model for one step,
    /// using the base motion implied by `u` and the current estimates.
    pub fn process_model(&self, submodel: usize, x: &EstimatorState, u: &InputVector, dt: f64) -> Result<EstimatorState, EstimatorError> {
        self.check_input(u)?;
        let f = &self.filters[submodel];
        check_layout(f, x)?;
        let input = self.submodel_input(submodel, u)?;
        let eval = Evaluator::new(f, &input)?;
        let out = f
            .process(&eval, &x.x, dt)
            .map_err(|reason| UkfError::Propagation { point: 0, reason })?;
        Ok(EstimatorState { layout: x.layout, x: out })
    }

    /// Predicted measurement of a submodel state, with every block present
    /// in the submodel in [`MeasurementBlock::ALL`] order.
    pub fn measurement_model(&self, submodel: usize, x: &EstimatorState, u: &InputVector) -> Result<DVector<f64>, EstimatorError> {
        self.check_input(u)?;
        let f = &self.filters[submodel];
        check_layout(f, x)?;
        let input = self.submodel_input(submodel, u)?;
        let eval = Evaluator::new(f, &input)?;
        let blocks = f.active_blocks(&MeasurementMask::default());
        f.measure(&eval, &x.x, &blocks)
            .map_err(|reason| EstimatorError::Ukf(UkfError::Propagation { point: 0, reason }))
    }

    fn initialize(&mut self, u: &InputVector, y: &MeasurementVector) -> Result<(), EstimatorError> {
        let init = self.config.initial;
        for k in 0..self.filters.len() {
            let input = self.submodel_input(k, u)?;
            let f = &mut self.filters[k];
            let n = f.layout.joints;
            let mut st = EstimatorState::zeros(f.layout);
            let mut s_dot = DVector::zeros(n);
            if y.mask.encoder {
                s_dot = DVector::from_fn(n, |i, _| y.s_dot[f.joints[i]]);
            }
            st.set_block(StateBlock::SDot, &s_dot);
            if y.mask.current {
                st.set_block(StateBlock::TauM, &DVector::from_fn(n, |i, _| y.current[f.joints[i]] * f.k_tau[i]));
            }
            st.set_block(StateBlock::TauF, &DVector::from_fn(n, |i, _| f.friction[i].torque(s_dot[i])));
            if y.mask.ft {
                for (k, b) in f.boundary.iter().enumerate() {
                    let r = f.layout.ft(k);
                    st.x.rows_mut(r.start, 6).copy_from(&y.ft[b.slot].to_vector());
                }
            }
            let p0 = diag_for(
                &f.layout,
                [init.s_dot, init.tau_m, init.tau_f, init.ft_force, init.ft_torque, init.ext_force, init.ext_torque],
            );
            f.belief = GaussianBelief::new(st.x, p0)?;
            self.finish_submodel(k, &input)?;
        }
        self.initialized = true;
        Ok(())
    }

    /// Records the posterior velocity and acceleration of submodel `k` for
    /// use by its descendants.
    fn finish_submodel(&mut self, k: usize, input: &RobotState) -> Result<(), EstimatorError> {
        let f = &self.filters[k];
        let eval = Evaluator::new(f, input)?;
        let sdd = eval.s_ddot(f, &f.belief.mean);
        for (i, &j) in f.joints.iter().enumerate() {
            self.s_dot_hat[j] = f.belief.mean[i];
            self.s_ddot_hat[j] = sdd[i];
        }
        self.filters[k].prev_input = Some(input.clone());
        Ok(())
    }

    /// One predict/update cycle over all submodels. The first call
    /// initializes the filters from `y` instead.
    pub fn step(&mut self, u: &InputVector, y: &MeasurementVector, dt: f64) -> Result<EstimatorOutput, EstimatorError> {
        self.check_input(u)?;
        y.check(self.tree.dofs(), &self.sensors)?;
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(EstimatorError::Config(format!("time step {dt} must be non-negative")));
        }
        let mut norms = [0.0; 5];
        if !self.initialized {
            self.initialize(u, y)?;
            return Ok(self.output(norms));
        }
        for k in 0..self.filters.len() {
            let input = self.submodel_input(k, u)?;
            let f = &self.filters[k];
            let prior = match (&f.prev_input, dt > 0.0) {
                (Some(prev), true) => {
                    let eval = Evaluator::new(f, prev)?;
                    ukf::predict(&f.belief, &self.config.ukf, &f.q, |x| f.process(&eval, x, dt))?
                }
                _ => f.belief.clone(),
            };
            let blocks = f.active_blocks(&y.mask);
            let posterior = if blocks.is_empty() {
                prior
            } else {
                let eval = Evaluator::new(f, &input)?;
                let (obs, var) = f.observed(y, &self.config.noise, &blocks);
                let r = DMatrix::from_diagonal(&var);
                let outcome = ukf::update(&prior, &self.config.ukf, &r, &obs, |x| f.measure(&eval, x, &blocks))?;
                let mut row = 0;
                for &b in &blocks {
                    let rows = f.block_rows(b);
                    let idx = MeasurementBlock::ALL.iter().position(|&x| x == b).expect("block");
                    norms[idx] += outcome.innovation.rows(row, rows).norm_squared();
                    row += rows;
                }
                outcome.belief
            };
            self.filters[k].belief = posterior;
            self.finish_submodel(k, &input)?;
        }
        Ok(self.output(norms.map(f64::sqrt)))
    }

    fn output(&self, innovation_norms: [f64; 5]) -> EstimatorOutput {
        let n = self.tree.dofs();
        let mut tau = DVector::zeros(n);
        let mut states = Vec::with_capacity(self.filters.len());
        for f in &self.filters {
            let t = f.torque();
            for (i, &j) in f.joints.iter().enumerate() {
                tau[j] = t[i];
            }
            states.push(EstimatorState {
                layout: f.layout,
                x: f.belief.mean.clone(),
            });
        }
        EstimatorOutput {
            tau_j_hat: tau,
            s_dot_hat: self.s_dot_hat.clone(),
            states,
            innovation_norms,
        }
    }
}

fn check_layout(f: &SubmodelFilter, x: &EstimatorState) -> Result<(), EstimatorError> {
    if x.layout != f.layout || x.x.len() != f.layout.dim() {
        return Err(EstimatorError::Dimension {
            what: "estimator state",
            expected: f.layout.dim(),
            actual: x.x.len(),
        });
    }
    Ok(())
}
