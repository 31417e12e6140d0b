use std::collections::{HashMap, HashSet};
use std::fmt;

use nalgebra::SymmetricEigen;
use serde::Serialize;

use super::{KinematicModel, SensorKind};
use crate::dynamics::spatial::{Mat3, RigidTransform};

const AXIS_TOL: f64 = 1e-9;
const ROTATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DuplicateName,
    NonFinite,
    NonPositiveMass,
    InertiaNotSymmetric,
    InertiaNotPositiveDefinite,
    InertiaTriangleInequality,
    AxisNotUnit,
    NonPositiveGearRatio,
    NonPositiveTorqueConstant,
    NegativeMotorInertia,
    InvalidLimits,
    InvalidTransform,
    UnknownLink,
    UnknownJoint,
    MultipleParents,
    RootHasParent,
    Cycle,
    Disconnected,
    OrphanSensor,
    InvalidCut,
}

/// One violated invariant, naming the offending element.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub element: String,
    pub rule: Rule,
    pub message: String,
}

impl Diagnostic {
    pub fn new(element: impl Into<String>, rule: Rule, message: impl Into<String>) -> Self {
        Self {
            element: element.into(),
            rule,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}: {}", self.element, self.rule, self.message)
    }
}

/// Checks every structural and physical invariant of `model`. The result is
/// empty iff the model is valid.
pub fn validate_model(model: &KinematicModel) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    check_names(model, &mut out);
    check_links(model, &mut out);
    check_joints(model, &mut out);
    check_topology(model, &mut out);
    check_sensors(model, &mut out);
    check_contact_frames(model, &mut out);
    if !model.gravity.iter().all(|g| g.is_finite()) {
        out.push(Diagnostic::new("gravity", Rule::NonFinite, "gravity must be finite"));
    }
    out
}

fn check_names(model: &KinematicModel, out: &mut Vec<Diagnostic>) {
    // links, sensors and contact frames share the frame namespace
    let mut frames = HashSet::new();
    let frame_names = model
        .links
        .iter()
        .map(|l| &l.name)
        .chain(model.sensors.iter().map(|s| &s.name))
        .chain(model.contact_frames.iter().map(|c| &c.name));
    for name in frame_names {
        if !frames.insert(name) {
            out.push(Diagnostic::new(name, Rule::DuplicateName, "frame name used more than once"));
        }
    }
    let mut joints = HashSet::new();
    for j in &model.joints {
        if !joints.insert(&j.name) {
            out.push(Diagnostic::new(&j.name, Rule::DuplicateName, "joint name used more than once"));
        }
    }
}

fn check_links(model: &KinematicModel, out: &mut Vec<Diagnostic>) {
    for link in &model.links {
        let finite = link.mass.is_finite()
            && link.com.iter().all(|x| x.is_finite())
            && link.inertia.iter().all(|x| x.is_finite());
        if !finite {
            out.push(Diagnostic::new(&link.name, Rule::NonFinite, "mass properties must be finite"));
            continue;
        }
        if link.mass <= 0.0 {
            out.push(Diagnostic::new(
                &link.name,
                Rule::NonPositiveMass,
                format!("mass {} must be positive", link.mass),
            ));
        }
        if let Some(d) = inertia_diagnostic(&link.name, &link.inertia) {
            out.push(d);
        }
    }
}

fn inertia_diagnostic(name: &str, inertia: &Mat3) -> Option<Diagnostic> {
    let scale = inertia.abs().max().max(1e-300);
    if (inertia - inertia.transpose()).abs().max() > 1e-9 * scale {
        return Some(Diagnostic::new(name, Rule::InertiaNotSymmetric, "inertia is not symmetric"));
    }
    let mut eig: Vec<f64> = SymmetricEigen::new(*inertia).eigenvalues.iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    if eig[0] <= 0.0 {
        return Some(Diagnostic::new(
            name,
            Rule::InertiaNotPositiveDefinite,
            format!("inertia is not positive definite (smallest eigenvalue {:e})", eig[0]),
        ));
    }
    if eig[2] > eig[0] + eig[1] + 1e-9 * scale {
        return Some(Diagnostic::new(
            name,
            Rule::InertiaTriangleInequality,
            format!("principal moments {eig:?} violate the triangle inequality"),
        ));
    }
    None
}

fn transform_diagnostic(element: &str, what: &str, t: &RigidTransform) -> Option<Diagnostic> {
    if !t.is_finite() {
        return Some(Diagnostic::new(element, Rule::NonFinite, format!("{what} must be finite")));
    }
    let err = t.orthonormality_error();
    (err > ROTATION_TOL).then(|| {
        Diagnostic::new(
            element,
            Rule::InvalidTransform,
            format!("{what} rotation is not orthonormal with det +1 (error {err:e})"),
        )
    })
}

fn check_joints(model: &KinematicModel, out: &mut Vec<Diagnostic>) {
    for joint in &model.joints {
        let name = &joint.name;
        for (what, link) in [("parent", &joint.parent), ("child", &joint.child)] {
            if model.link_index(link).is_none() {
                out.push(Diagnostic::new(name, Rule::UnknownLink, format!("{what} link '{link}' does not exist")));
            }
        }
        let norm = joint.axis.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > AXIS_TOL {
            out.push(Diagnostic::new(name, Rule::AxisNotUnit, format!("axis norm {norm} is not 1")));
        }
        if !(joint.gear_ratio > 0.0 && joint.gear_ratio.is_finite()) {
            out.push(Diagnostic::new(name, Rule::NonPositiveGearRatio, "gear ratio must be positive"));
        }
        if !(joint.motor_torque_constant > 0.0 && joint.motor_torque_constant.is_finite()) {
            out.push(Diagnostic::new(
                name,
                Rule::NonPositiveTorqueConstant,
                "motor torque constant must be positive",
            ));
        }
        if !(joint.motor_inertia >= 0.0 && joint.motor_inertia.is_finite()) {
            out.push(Diagnostic::new(name, Rule::NegativeMotorInertia, "motor inertia must be non-negative"));
        }
        if let Some([lo, hi]) = joint.position_limits {
            if !(lo <= hi) {
                out.push(Diagnostic::new(name, Rule::InvalidLimits, format!("limits [{lo}, {hi}] are inverted")));
            }
        }
        if let Some(d) = transform_diagnostic(name, "origin", &joint.origin) {
            out.push(d);
        }
    }
}

fn check_topology(model: &KinematicModel, out: &mut Vec<Diagnostic>) {
    let Some(root) = model.link_index(&model.root_link) else {
        out.push(Diagnostic::new(
            &model.root_link,
            Rule::UnknownLink,
            "root link does not exist",
        ));
        return;
    };
    let mut parent_of: HashMap<&str, &str> = HashMap::new();
    for joint in &model.joints {
        if joint.child == model.root_link {
            out.push(Diagnostic::new(&joint.name, Rule::RootHasParent, "the root link cannot be a joint child"));
        }
        if parent_of.insert(joint.child.as_str(), joint.parent.as_str()).is_some() {
            out.push(Diagnostic::new(
                &joint.child,
                Rule::MultipleParents,
                "link is the child of more than one joint",
            ));
        }
    }
    // a joint closes a cycle when its child is one of its own ancestors
    let mut in_cycle = HashSet::new();
    for joint in &model.joints {
        let mut cursor = joint.parent.as_str();
        for _ in 0..=model.links.len() {
            if cursor == joint.child {
                out.push(Diagnostic::new(
                    &joint.name,
                    Rule::Cycle,
                    format!("child link '{}' is its own ancestor", joint.child),
                ));
                in_cycle.insert(joint.child.as_str());
                break;
            }
            match parent_of.get(cursor) {
                Some(p) => cursor = p,
                None => break,
            }
        }
    }
    let reachable: HashSet<usize> = model.breadth_first_links().into_iter().collect();
    for (i, link) in model.links.iter().enumerate() {
        if i != root && !reachable.contains(&i) && !in_cycle.contains(link.name.as_str()) {
            out.push(Diagnostic::new(&link.name, Rule::Disconnected, "link is not reachable from the root"));
        }
    }
}

fn check_sensors(model: &KinematicModel, out: &mut Vec<Diagnostic>) {
    for sensor in &model.sensors {
        let name = &sensor.name;
        if model.link_index(&sensor.link).is_none() {
            out.push(Diagnostic::new(
                name,
                Rule::OrphanSensor,
                format!("attached link '{}' does not exist", sensor.link),
            ));
            continue;
        }
        if let Some(d) = transform_diagnostic(name, "mounting", &sensor.mounting) {
            out.push(d);
        }
        if matches!(sensor.kind, SensorKind::Encoder | SensorKind::Current) && model.parent_joint_of(&sensor.link).is_none() {
            out.push(Diagnostic::new(
                name,
                Rule::OrphanSensor,
                format!("link '{}' has no parent joint to measure", sensor.link),
            ));
        }
        if sensor.kind != SensorKind::Ft && (sensor.cut || sensor.cut_joint.is_some()) {
            out.push(Diagnostic::new(name, Rule::InvalidCut, "only FT sensors can cut the model"));
            continue;
        }
        if sensor.kind == SensorKind::Ft && sensor.cut {
            match (&sensor.cut_joint, model.cut_joint_of(sensor)) {
                (Some(j), None) => out.push(Diagnostic::new(
                    name,
                    Rule::UnknownJoint,
                    format!("cut joint '{j}' does not exist"),
                )),
                (None, None) => out.push(Diagnostic::new(
                    name,
                    Rule::InvalidCut,
                    format!("link '{}' does not have exactly one child joint; set cut_joint", sensor.link),
                )),
                (_, Some(j)) => {
                    if model.joints[j].parent != sensor.link {
                        out.push(Diagnostic::new(
                            name,
                            Rule::InvalidCut,
                            format!("cut joint '{}' is not a child of link '{}'", model.joints[j].name, sensor.link),
                        ));
                    }
                }
            }
        }
    }
}

fn check_contact_frames(model: &KinematicModel, out: &mut Vec<Diagnostic>) {
    for frame in &model.contact_frames {
        if model.link_index(&frame.link).is_none() {
            out.push(Diagnostic::new(
                &frame.name,
                Rule::UnknownLink,
                format!("link '{}' does not exist", frame.link),
            ));
        }
        if let Some(d) = transform_diagnostic(&frame.name, "transform", &frame.transform) {
            out.push(d);
        }
    }
}
