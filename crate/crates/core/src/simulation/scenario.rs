use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::ControlError;
use crate::dynamics::spatial::{RigidTransform, Vec3};
use crate::estimator::{DifferentiatorConfig, EstimatorConfig, MeasurementMask};
use crate::friction::FrictionParams;
use crate::model::{serde_helpers, split_at_ft_sensors, KinematicModel};

use super::SimulationError;

/// One closed-loop experiment. Paths are relative to the scenario file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub model: PathBuf,
    #[serde(default, with = "serde_helpers::transform")]
    pub base_pose: RigidTransform,
    /// Seconds.
    pub duration: f64,
    pub seed: u64,
    #[serde(default)]
    pub rates: Rates,
    #[serde(default)]
    pub initial: InitialState,
    pub reference: Reference,
    pub controller: ControllerSpec,
    #[serde(default)]
    pub contacts: Vec<ContactEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_pushes: Option<RandomPushes>,
    #[serde(default)]
    pub noise: SensorNoiseSpec,
    /// Joint friction shared by the plant and the controllers, by joint
    /// name. Joints not listed are frictionless.
    #[serde(default)]
    pub friction: BTreeMap<String, FrictionParams>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub estimator_choice: EstimatorChoice,
    #[serde(default)]
    pub differentiator: DifferentiatorConfig,
    /// Measurement blocks passed to the estimators.
    #[serde(default)]
    pub mask: MeasurementMask,
    /// The run aborts once any joint moves faster than this, rad/s.
    #[serde(default = "default_max_velocity")]
    pub max_joint_velocity: f64,
}

fn default_max_velocity() -> f64 {
    50.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Rates {
    /// Integration step of the plant, s.
    pub plant_dt: f64,
    /// Estimator and low-level controller rate, Hz.
    pub estimator_hz: f64,
    /// High-level controller rate, Hz.
    pub hlc_hz: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            plant_dt: 1e-4,
            estimator_hz: 1000.0,
            hlc_hz: 250.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialState {
    pub positions: BTreeMap<String, f64>,
    pub velocities: BTreeMap<String, f64>,
}

/// Desired motion. Joints a reference does not name hold their initial
/// position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reference {
    Hold {
        #[serde(default)]
        positions: BTreeMap<String, f64>,
    },
    /// `s = center + amplitude·sin(2π f t + phase)` per joint.
    JointSinusoid { joints: BTreeMap<String, Sinusoid> },
    /// Minimum-jerk segments through `waypoints`, given as displacements of
    /// `frame` from its initial position. The frame keeps its initial
    /// orientation and the joints are regularized towards their initial
    /// positions.
    CartesianSpline { frame: String, waypoints: Vec<Waypoint> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    #[serde(default)]
    pub center: Option<f64>,
    pub amplitude: f64,
    pub frequency_hz: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub time: f64,
    pub offset: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub law: ControlLaw,
    /// Joints commanded to zero torque regardless of the law.
    #[serde(default)]
    pub zero_torque: Vec<String>,
    pub low_level: LowLevelSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlLaw {
    /// Joint PD plus gravity compensation; gains in Nm/rad and Nm·s/rad.
    PdGravity { kp: f64, kd: f64 },
    /// High-level QP; posture gains in 1/s² and 1/s.
    Qp {
        posture_kp: f64,
        posture_kd: f64,
        posture_weight: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cartesian: Option<CartesianGains>,
        #[serde(default = "default_regularization")]
        regularization: f64,
    },
}

fn default_regularization() -> f64 {
    1e-12
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartesianGains {
    pub kp_linear: f64,
    pub kd_linear: f64,
    pub kp_angular: f64,
    pub kd_angular: f64,
    pub weight: f64,
    #[serde(default = "unit_axes")]
    pub axis_weights: [f64; 6],
}

fn unit_axes() -> [f64; 6] {
    [1.0; 6]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowLevelSpec {
    pub kp: f64,
    pub ki: f64,
    pub integral_limit: f64,
    pub current_limit: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    #[default]
    Ukf,
    #[serde(alias = "rnea_baseline")]
    Rnea,
    Both,
}

impl EstimatorChoice {
    pub fn kinds(self) -> &'static [EstimatorKind] {
        match self {
            Self::Ukf => &[EstimatorKind::Ukf],
            Self::Rnea => &[EstimatorKind::Rnea],
            Self::Both => &[EstimatorKind::Ukf, EstimatorKind::Rnea],
        }
    }
}

impl std::str::FromStr for EstimatorChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ukf" => Ok(Self::Ukf),
            "rnea" | "rnea_baseline" => Ok(Self::Rnea),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown estimator '{other}' (expected ukf, rnea or both)")),
        }
    }
}

/// Estimator closing the torque loop in one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ukf,
    Rnea,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ukf => "ukf",
            Self::Rnea => "rnea",
        }
    }
}

/// Time shape of a contact wrench.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Constant,
    /// Linear rise over `rise` seconds, plateau, linear fall over `rise`.
    Ramp { rise: f64 },
    HalfSine,
}

/// Wrench applied at a contact frame over `[start, end)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactEvent {
    pub frame: String,
    pub start: f64,
    pub end: f64,
    pub profile: Profile,
    /// Peak `[force; torque]` at the frame origin, world axes.
    pub wrench: [f64; 6],
    /// Whether an FT sensor lies between the contact and the robot root.
    /// Checked against the model.
    pub measured_by_ft: bool,
}

impl ContactEvent {
    /// Profile scale in `[0, 1]` at time `t`.
    pub fn scale(&self, t: f64) -> f64 {
        if t < self.start || t >= self.end {
            return 0.0;
        }
        let span = self.end - self.start;
        let tau = t - self.start;
        match self.profile {
            Profile::Constant => 1.0,
            Profile::Ramp { rise } => {
                let rise = rise.min(0.5 * span);
                if rise <= 0.0 {
                    1.0
                } else {
                    (tau / rise).min((span - tau) / rise).min(1.0)
                }
            }
            Profile::HalfSine => (std::f64::consts::PI * tau / span).sin(),
        }
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

/// Randomly timed half-sine pushes, one per equal slot of `[start, end)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPushes {
    pub frames: Vec<String>,
    pub count: usize,
    pub start: f64,
    pub end: f64,
    pub min_duration: f64,
    pub max_duration: f64,
    pub min_force: f64,
    pub max_force: f64,
    /// Force direction components that may be non-zero, world axes.
    #[serde(default = "all_axes")]
    pub axes: [bool; 3],
}

fn all_axes() -> [bool; 3] {
    [true; 3]
}

/// Gaussian sensor noise standard deviations and constant biases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorNoiseSpec {
    /// rad/s
    pub encoder: f64,
    /// A
    pub current: f64,
    /// N
    pub ft_force: f64,
    /// Nm
    pub ft_torque: f64,
    /// m/s²
    pub accelerometer: f64,
    /// rad/s
    pub gyroscope: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<SensorBias>,
}

impl Default for SensorNoiseSpec {
    fn default() -> Self {
        Self {
            encoder: 1e-3,
            current: 0.01,
            ft_force: 0.3,
            ft_torque: 0.03,
            accelerometer: 0.03,
            gyroscope: 2e-3,
            bias: None,
        }
    }
}

impl SensorNoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            encoder: 0.0,
            current: 0.0,
            ft_force: 0.0,
            ft_torque: 0.0,
            accelerometer: 0.0,
            gyroscope: 0.0,
            bias: None,
        }
    }

    fn validate(&self) -> Result<(), SimulationError> {
        let sds = [self.encoder, self.current, self.ft_force, self.ft_torque, self.accelerometer, self.gyroscope];
        if sds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(SimulationError::Config("noise standard deviations must be finite and non-negative".into()));
        }
        if let Some(b) = self.bias {
            let all = [b.encoder, b.current, b.ft_force, b.ft_torque, b.accelerometer, b.gyroscope];
            if all.iter().any(|v| !v.is_finite()) {
                return Err(SimulationError::Config("sensor biases must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Offsets added to every component of a reading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorBias {
    pub encoder: f64,
    pub current: f64,
    pub ft_force: f64,
    pub ft_torque: f64,
    pub accelerometer: f64,
    pub gyroscope: f64,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimulationError> {
        serde_json::from_str(text).map_err(|e| SimulationError::Config(format!("scenario: {e}")))
    }

    /// Reads a scenario file and resolves its model path against the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimulationError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimulationError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut scenario = Self::from_json(&text)?;
        if scenario.model.is_relative() {
            if let Some(dir) = path.parent() {
                scenario.model = dir.join(&scenario.model);
            }
        }
        if scenario.name.is_empty() {
            scenario.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Ticks of the estimator clock; at least one.
    pub fn ticks(&self) -> usize {
        ((self.duration * self.rates.estimator_hz).round() as usize).max(1)
    }

    pub(crate) fn validate(&self, model: &KinematicModel) -> Result<(), SimulationError> {
        let cfg = |m: String| Err(SimulationError::Config(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return cfg(format!("duration {} must be positive", self.duration));
        }
        let r = &self.rates;
        if !(r.plant_dt > 0.0 && r.estimator_hz > 0.0 && r.hlc_hz > 0.0) {
            return cfg("rates must be positive".into());
        }
        let dt = 1.0 / r.estimator_hz;
        let sub = dt / r.plant_dt;
        if (sub - sub.round()).abs() > 1e-9 || sub.round() < 1.0 {
            return cfg(format!("estimator period {dt} is not a multiple of the plant step {}", r.plant_dt));
        }
        let ratio = r.estimator_hz / r.hlc_hz;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return cfg(format!("high-level rate {} Hz must divide {} Hz", r.hlc_hz, r.estimator_hz));
        }
        if !(self.max_joint_velocity > 0.0) {
            return cfg("max_joint_velocity must be positive".into());
        }
        let joint = |name: &str| {
            model
                .joint_index(name)
                .ok_or_else(|| SimulationError::Config(format!("unknown joint '{name}'")))
        };
        for name in self.initial.positions.keys().chain(self.initial.velocities.keys()) {
            joint(name)?;
        }
        for name in self.friction.keys().chain(self.controller.zero_torque.iter()) {
            joint(name)?;
        }
        for (name, p) in &self.friction {
            p.validate().map_err(|e| SimulationError::Config(format!("friction of '{name}': {e}")))?;
        }
        match &self.reference {
            Reference::Hold { positions } => {
                for name in positions.keys() {
                    joint(name)?;
                }
            }
            Reference::JointSinusoid { joints } => {
                for (name, s) in joints {
                    joint(name)?;
                    if !(s.frequency_hz >= 0.0 && s.amplitude.is_finite() && s.phase.is_finite()) {
                        return cfg(format!("sinusoid of '{name}' is not finite"));
                    }
                }
            }
            Reference::CartesianSpline { frame, waypoints } => {
                if model.contact_frame_index(frame).is_none() && model.link_index(frame).is_none() && model.sensor_index(frame).is_none() {
                    return cfg(format!("unknown frame '{frame}'"));
                }
                let mut last = 0.0;
                for w in waypoints {
                    if !(w.time > last) || !w.offset.iter().all(|v| v.is_finite()) {
                        return cfg("waypoint times must be positive and increasing".into());
                    }
                    last = w.time;
                }
                match &self.controller.law {
                    ControlLaw::Qp { cartesian: Some(_), .. } => {}
                    _ => return cfg("a cartesian reference needs the qp law with cartesian gains".into()),
                }
            }
        }
        let ll = &self.controller.low_level;
        if !(ll.kp >= 0.0 && ll.ki >= 0.0 && ll.integral_limit > 0.0 && ll.current_limit > 0.0) {
            return cfg("low-level gains must be non-negative and limits positive".into());
        }
        match &self.controller.law {
            ControlLaw::PdGravity { kp, kd } => {
                if !(*kp >= 0.0 && *kd >= 0.0) {
                    return cfg("PD gains must be non-negative".into());
                }
            }
            ControlLaw::Qp {
                posture_kp,
                posture_kd,
                posture_weight,
                cartesian,
                regularization,
            } => {
                if !(*posture_kp > 0.0 && *posture_kd > 0.0 && *posture_weight >= 0.0 && *regularization >= 0.0) {
                    return cfg("posture gains must be positive".into());
                }
                if let Some(c) = cartesian {
                    let all = [c.kp_linear, c.kd_linear, c.kp_angular, c.kd_angular, c.weight];
                    if all.iter().chain(c.axis_weights.iter()).any(|g| !(*g >= 0.0)) {
                        return Err(ControlError::InvalidTask("cartesian gains must be non-negative".into()).into());
                    }
                }
            }
        }
        self.noise.validate()?;
        for c in &self.contacts {
            check_contact(model, c, self.duration)?;
        }
        if let Some(p) = &self.random_pushes {
            let ok = p.count > 0
                && p.start >= 0.0
                && p.end > p.start
                && p.end <= self.duration
                && p.min_duration > 0.0
                && p.max_duration >= p.min_duration
                && p.max_duration <= (p.end - p.start) / p.count as f64
                && p.min_force >= 0.0
                && p.max_force >= p.min_force
                && p.axes.iter().any(|&a| a)
                && !p.frames.is_empty();
            if !ok {
                return cfg("random pushes must fit their slots and have positive ranges".into());
            }
            for f in &p.frames {
                frame_link(model, f)?;
            }
        }
        Ok(())
    }

    /// Scripted contacts followed by the generated pushes, sorted by start.
    pub fn contact_events(&self, model: &KinematicModel) -> Result<Vec<ContactEvent>, SimulationError> {
        let mut events = self.contacts.clone();
        if let Some(p) = &self.random_pushes {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(u64::MAX);
            let slot = (p.end - p.start) / p.count as f64;
            for k in 0..p.count {
                let frame = p.frames[rng.random_range(0..p.frames.len())].clone();
                let duration = p.min_duration + rng.random::<f64>() * (p.max_duration - p.min_duration);
                let start = p.start + k as f64 * slot + rng.random::<f64>() * (slot - duration);
                let magnitude = p.min_force + rng.random::<f64>() * (p.max_force - p.min_force);
                let mut dir = Vec3::zeros();
                while dir.norm() < 1e-3 {
                    for (i, &on) in p.axes.iter().enumerate() {
                        let v: f64 = rng.random_range(-1.0..1.0);
                        dir[i] = if on { v } else { 0.0 };
                    }
                }
                let force = dir.normalize() * magnitude;
                let measured_by_ft = is_measured(model, &frame)?;
                events.push(ContactEvent {
                    frame,
                    start,
                    end: start + duration,
                    profile: Profile::HalfSine,
                    wrench: [force.x, force.y, force.z, 0.0, 0.0, 0.0],
                    measured_by_ft,
                });
            }
        }
        events.sort_by(|a, b| a.start.total_cmp(&b.start));
        Ok(events)
    }

    /// Per-joint friction in model order.
    pub fn friction_vector(&self, model: &KinematicModel) -> Vec<FrictionParams> {
        model
            .joints
            .iter()
            .map(|j| self.friction.get(&j.name).copied().unwrap_or_default())
            .collect()
    }

    pub fn initial_positions(&self, model: &KinematicModel) -> DVector<f64> {
        DVector::from_fn(model.dofs(), |i, _| self.initial.positions.get(&model.joints[i].name).copied().unwrap_or(0.0))
    }

    pub fn initial_velocities(&self, model: &KinematicModel) -> DVector<f64> {
        DVector::from_fn(model.dofs(), |i, _| self.initial.velocities.get(&model.joints[i].name).copied().unwrap_or(0.0))
    }
}

fn frame_link<'m>(model: &'m KinematicModel, frame: &str) -> Result<&'m str, SimulationError> {
    model
        .contact_frames
        .iter()
        .find(|c| c.name == frame)
        .map(|c| c.link.as_str())
        .ok_or_else(|| SimulationError::Config(format!("unknown contact frame '{frame}'")))
}

/// True when the contact's link lies on the far side of a cut FT sensor.
pub fn is_measured(model: &KinematicModel, frame: &str) -> Result<bool, SimulationError> {
    let link = frame_link(model, frame)?;
    let idx = model.link_index(link).expect("validated model");
    let subs = split_at_ft_sensors(model)?;
    Ok(subs.iter().any(|s| !s.owns_base && s.links.contains(&idx)))
}

fn check_contact(model: &KinematicModel, c: &ContactEvent, duration: f64) -> Result<(), SimulationError> {
    let bad = |m: String| Err(SimulationError::Config(format!("contact at '{}': {m}", c.frame)));
    if !(c.start >= 0.0 && c.end > c.start && c.end <= duration) {
        return bad(format!("interval [{}, {}) must lie within the run", c.start, c.end));
    }
    if !c.wrench.iter().all(|v| v.is_finite()) {
        return bad("wrench is not finite".into());
    }
    if let Profile::Ramp { rise } = c.profile {
        if !(rise >= 0.0 && rise.is_finite()) {
            return bad("ramp rise must be non-negative".into());
        }
    }
    let measured = is_measured(model, &c.frame)?;
    if measured != c.measured_by_ft {
        return bad(format!("measured_by_ft is {} but the model says {measured}", c.measured_by_ft));
    }
    Ok(())
}
