//! Robot description: links, 1-DoF joints, mounted sensors and candidate
//! contact frames, plus the JSON model file format.
//!
//! The in-memory [`KinematicModel`] mirrors the file one-to-one and refers to
//! other elements by name. Structural checks live in [`validate_model`]; the
//! compiled, index-based view used by the dynamics algorithms is
//! [`crate::dynamics::RigidBodyTree`].

pub(crate) mod serde_helpers;
mod split;
mod validate;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::spatial::{Mat3, RigidTransform, Vec3};

pub use split::{split_at_ft_sensors, BoundarySensor, BoundarySide, SubModel};
pub use validate::{validate_model, Diagnostic, Rule};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid model: {}", format_diagnostics(.0))]
    Semantic(Vec<Diagnostic>),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("cannot read model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    #[default]
    Revolute,
    Prismatic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Encoder,
    Current,
    Ft,
    Accelerometer,
    Gyroscope,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub name: String,
    /// kg
    pub mass: f64,
    /// Centre of mass in the link frame, m.
    pub com: Vec3,
    /// Rotational inertia about the centre of mass, link frame, kg·m².
    #[serde(with = "serde_helpers::mat3_rows")]
    pub inertia: Mat3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Joint {
    pub name: String,
    #[serde(default)]
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    /// Unit axis in the joint frame (which coincides with the child link frame).
    pub axis: Vec3,
    /// Placement of the joint frame in the parent link frame at zero position.
    #[serde(default, with = "serde_helpers::transform")]
    pub origin: RigidTransform,
    pub gear_ratio: f64,
    /// Nm/A
    pub motor_torque_constant: f64,
    /// Reflected rotor inertia at the joint side, kg·m².
    #[serde(default)]
    pub motor_inertia: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_limits: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub kind: SensorKind,
    pub name: String,
    /// Link the sensor is rigidly fixed to. Encoders and current sensors
    /// refer to the joint whose child is this link.
    pub link: String,
    #[serde(default, with = "serde_helpers::transform")]
    pub mounting: RigidTransform,
    /// FT sensors only: split the model at this sensor.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub cut: bool,
    /// FT sensors only: the child joint of `link` whose subtree lies on the
    /// far side of the sensor. May be omitted when `link` has a single child joint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cut_joint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactFrame {
    pub name: String,
    pub link: String,
    #[serde(default, with = "serde_helpers::transform")]
    pub transform: RigidTransform,
}

/// Tree of links joined by 1-DoF joints, with sensors and contact frames.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KinematicModel {
    pub root_link: String,
    /// World-frame gravity, m/s².
    pub gravity: Vec3,
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    pub sensors: Vec<SensorSpec>,
    pub contact_frames: Vec<ContactFrame>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    #[serde(default)]
    root_link: Option<String>,
    gravity: Vec3,
    links: Vec<Link>,
    joints: Vec<Joint>,
    #[serde(default)]
    sensors: Vec<SensorSpec>,
    #[serde(default)]
    contact_frames: Vec<ContactFrame>,
}

/// Parses and validates a model document.
pub fn parse_model(text: &str) -> Result<KinematicModel, ModelError> {
    let doc: ModelDocument = serde_json::from_str(text).map_err(|e| ModelError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let root_link = match doc.root_link {
        Some(root) => root,
        None => infer_root(&doc.links, &doc.joints)?,
    };
    let model = KinematicModel {
        root_link,
        gravity: doc.gravity,
        links: doc.links,
        joints: doc.joints,
        sensors: doc.sensors,
        contact_frames: doc.contact_frames,
    };
    let diagnostics = validate_model(&model);
    if diagnostics.is_empty() {
        Ok(model)
    } else {
        Err(ModelError::Semantic(diagnostics))
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<KinematicModel, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_model(&text)
}

/// Canonical JSON encoding of a model; [`parse_model`] reads it back unchanged.
pub fn serialize_model(model: &KinematicModel) -> String {
    serde_json::to_string_pretty(model).expect("model serialization is infallible")
}

fn infer_root(links: &[Link], joints: &[Joint]) -> Result<String, ModelError> {
    let roots: Vec<&str> = links
        .iter()
        .map(|l| l.name.as_str())
        .filter(|name| !joints.iter().any(|j| j.child == *name))
        .collect();
    match roots.as_slice() {
        [root] => Ok(root.to_string()),
        [] => Err(ModelError::Semantic(vec![Diagnostic::new(
            "root_link",
            Rule::Cycle,
            "every link is the child of some joint",
        )])),
        many => Err(ModelError::Semantic(vec![Diagnostic::new(
            "root_link",
            Rule::Disconnected,
            format!("several candidate roots: {}", many.join(", ")),
        )])),
    }
}

impl KinematicModel {
    pub fn dofs(&self) -> usize {
        self.joints.len()
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn sensor_index(&self, name: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s.name == name)
    }

    pub fn contact_frame_index(&self, name: &str) -> Option<usize> {
        self.contact_frames.iter().position(|c| c.name == name)
    }

    /// Joint whose child is `link`, if any.
    pub fn parent_joint_of(&self, link: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.child == link)
    }

    pub fn child_joints_of(&self, link: &str) -> Vec<usize> {
        self.joints
            .iter()
            .enumerate()
            .filter(|(_, j)| j.parent == link)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sensors_of_kind(&self, kind: SensorKind) -> impl Iterator<Item = (usize, &SensorSpec)> {
        self.sensors
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.kind == kind)
    }

    /// Joint on the far side of a cut FT sensor. `None` for sensors that do
    /// not cut or whose cut edge cannot be resolved.
    pub fn cut_joint_of(&self, sensor: &SensorSpec) -> Option<usize> {
        if sensor.kind != SensorKind::Ft || !sensor.cut {
            return None;
        }
        match &sensor.cut_joint {
            Some(name) => self.joint_index(name),
            None => match self.child_joints_of(&sensor.link).as_slice() {
                [only] => Some(*only),
                _ => None,
            },
        }
    }

    /// Links in breadth-first order from the root. Only meaningful for a
    /// valid tree.
    pub fn breadth_first_links(&self) -> Vec<usize> {
        let children: HashMap<&str, Vec<usize>> =
            self.joints
                .iter()
                .enumerate()
                .fold(HashMap::new(), |mut acc, (i, j)| {
                    acc.entry(j.parent.as_str()).or_default().push(i);
                    acc
                });
        let mut order = Vec::with_capacity(self.links.len());
        let mut queue = std::collections::VecDeque::new();
        if let Some(root) = self.link_index(&self.root_link) {
            queue.push_back(root);
        }
        while let Some(link) = queue.pop_front() {
            if order.contains(&link) {
                continue;
            }
            order.push(link);
            if let Some(js) = children.get(self.links[link].name.as_str()) {
                for &j in js {
                    if let Some(c) = self.link_index(&self.joints[j].child) {
                        queue.push_back(c);
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PENDULUM: &str = r#"{
        "root_link": "base",
        "gravity": [0, 0, -9.81],
        "links": [
            {"name": "base", "mass": 1.0, "com": [0,0,0], "inertia": [[0.01,0,0],[0,0.01,0],[0,0,0.01]]},
            {"name": "rod", "mass": 1.0, "com": [1,0,0], "inertia": [[1e-6,0,0],[0,1e-6,0],[0,0,1e-6]]}
        ],
        "joints": [
            {"name": "hinge", "parent": "base", "child": "rod", "axis": [0,-1,0],
             "gear_ratio": 100, "motor_torque_constant": 0.05}
        ],
        "sensors": [{"kind": "encoder", "name": "hinge_enc", "link": "rod"}]
    }"#;

    #[test]
    fn parses_single_pendulum() {
        let model = parse_model(PENDULUM).unwrap();
        assert_eq!(model.dofs(), 1);
        assert_eq!(model.sensors.len(), 1);
        assert_eq!(model.joints[0].kind, JointKind::Revolute);
        assert!(validate_model(&model).is_empty());
    }

    #[test]
    fn root_is_inferred_when_omitted() {
        let text = PENDULUM.replace(r#""root_link": "base","#, "");
        let model = parse_model(&text).unwrap();
        assert_eq!(model.root_link, "base");
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_model("{\n  \"links\": [,]\n}").unwrap_err();
        match err {
            ModelError::Syntax { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("expected syntax error, got {other}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = PENDULUM.replace(r#""gear_ratio": 100"#, r#""gear_ratio": 100, "stiffness": 3"#);
        assert!(matches!(parse_model(&text), Err(ModelError::Syntax { .. })));
    }

    #[test]
    fn cycle_is_reported() {
        let text = r#"{
            "root_link": "a",
            "gravity": [0, 0, -9.81],
            "links": [
                {"name": "a", "mass": 1, "com": [0,0,0], "inertia": [[1,0,0],[0,1,0],[0,0,1]]},
                {"name": "b", "mass": 1, "com": [0,0,0], "inertia": [[1,0,0],[0,1,0],[0,0,1]]},
                {"name": "c", "mass": 1, "com": [0,0,0], "inertia": [[1,0,0],[0,1,0],[0,0,1]]}
            ],
            "joints": [
                {"name": "ab", "parent": "a", "child": "b", "axis": [0,0,1], "gear_ratio": 1, "motor_torque_constant": 1},
                {"name": "bc", "parent": "b", "child": "c", "axis": [0,0,1], "gear_ratio": 1, "motor_torque_constant": 1},
                {"name": "cb", "parent": "c", "child": "b", "axis": [0,0,1], "gear_ratio": 1, "motor_torque_constant": 1}
            ]
        }"#;
        match parse_model(text) {
            Err(ModelError::Semantic(d)) => assert!(d.iter().any(|d| d.rule == Rule::Cycle), "{d:?}"),
            other => panic!("expected cycle error, got {other:?}"),
        }
    }

    #[test]
    fn serialization_round_trips() {
        let model = parse_model(PENDULUM).unwrap();
        let again = parse_model(&serialize_model(&model)).unwrap();
        assert_eq!(model, again);
    }
}
