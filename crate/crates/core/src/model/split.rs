use std::collections::HashMap;

use serde::Serialize;

use super::{validate_model, KinematicModel, ModelError, SensorKind};

/// Which side of a cut FT sensor a submodel lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundarySide {
    /// Receives `-f_FT` at the sensor frame.
    Parent,
    /// Receives `+f_FT`: the sensor reports the wrench the parent side exerts
    /// on this side.
    Child,
}

impl BoundarySide {
    pub fn sign(self) -> f64 {
        match self {
            BoundarySide::Parent => -1.0,
            BoundarySide::Child => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BoundarySensor {
    /// Index into `KinematicModel::sensors`.
    pub sensor: usize,
    pub side: BoundarySide,
}

/// Connected piece of the model between cut FT sensors.
///
/// A child-side submodel starts at the cut joint; its base frame is the
/// parent-side link the sensor is fixed to, whose motion is an input.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubModel {
    /// Link whose frame acts as the submodel base.
    pub base_link: usize,
    /// Whether `base_link` belongs to this submodel (true only for the
    /// submodel holding the robot root).
    pub owns_base: bool,
    /// Owned links, breadth-first. Excludes a borrowed base.
    pub links: Vec<usize>,
    /// Owned joints in ascending model order; this is the local DoF order.
    pub joints: Vec<usize>,
    pub boundary_ft_sensors: Vec<BoundarySensor>,
    /// Indices into `KinematicModel::contact_frames`.
    pub candidate_contact_frames: Vec<usize>,
    /// Submodel on the parent side of this one's entry cut.
    pub parent: Option<usize>,
}

impl SubModel {
    pub fn dofs(&self) -> usize {
        self.joints.len()
    }

    /// Sensors of `kind` fixed to links this submodel owns.
    pub fn sensors_of_kind(&self, model: &KinematicModel, kind: SensorKind) -> Vec<usize> {
        model
            .sensors_of_kind(kind)
            .filter(|(_, s)| {
                model
                    .link_index(&s.link)
                    .is_some_and(|l| self.links.contains(&l))
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Splits the model at every cut FT sensor. The result is ordered so that a
/// submodel always follows its parent; index 0 holds the robot root.
pub fn split_at_ft_sensors(model: &KinematicModel) -> Result<Vec<SubModel>, ModelError> {
    let diagnostics = validate_model(model);
    if !diagnostics.is_empty() {
        return Err(ModelError::Semantic(diagnostics));
    }

    let mut cut_sensor_of_joint: HashMap<usize, usize> = HashMap::new();
    for (i, sensor) in model.sensors_of_kind(SensorKind::Ft) {
        let Some(joint) = model.cut_joint_of(sensor) else {
            continue;
        };
        if let Some(other) = cut_sensor_of_joint.insert(joint, i) {
            return Err(ModelError::Configuration(format!(
                "FT sensors '{}' and '{}' both cut joint '{}'",
                model.sensors[other].name, sensor.name, model.joints[joint].name
            )));
        }
    }

    let root = model
        .link_index(&model.root_link)
        .expect("validated model has a root");
    let mut component = vec![usize::MAX; model.links.len()];
    component[root] = 0;
    let mut subs = vec![SubModel {
        base_link: root,
        owns_base: true,
        links: Vec::new(),
        joints: Vec::new(),
        boundary_ft_sensors: Vec::new(),
        candidate_contact_frames: Vec::new(),
        parent: None,
    }];

    for link in model.breadth_first_links() {
        let comp = component[link];
        subs[comp].links.push(link);
        for j in model.child_joints_of(&model.links[link].name) {
            let child = model
                .link_index(&model.joints[j].child)
                .expect("validated joint child");
            let child_comp = match cut_sensor_of_joint.get(&j) {
                Some(&sensor) => {
                    let id = subs.len();
                    subs.push(SubModel {
                        base_link: link,
                        owns_base: false,
                        links: Vec::new(),
                        joints: Vec::new(),
                        boundary_ft_sensors: vec![BoundarySensor {
                            sensor,
                            side: BoundarySide::Child,
                        }],
                        candidate_contact_frames: Vec::new(),
                        parent: Some(comp),
                    });
                    subs[comp].boundary_ft_sensors.push(BoundarySensor {
                        sensor,
                        side: BoundarySide::Parent,
                    });
                    id
                }
                None => comp,
            };
            component[child] = child_comp;
            subs[child_comp].joints.push(j);
        }
    }
    for sub in &mut subs {
        sub.joints.sort_unstable();
    }
    for (i, frame) in model.contact_frames.iter().enumerate() {
        let link = model.link_index(&frame.link).expect("validated contact link");
        subs[component[link]].candidate_contact_frames.push(i);
    }
    Ok(subs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;

    fn chain(cuts: &[(&str, &str)]) -> KinematicModel {
        let inertia = r#"[[0.1,0,0],[0,0.1,0],[0,0,0.1]]"#;
        let links: Vec<String> = ["l0", "l1", "l2", "l3"]
            .iter()
            .map(|n| format!(r#"{{"name":"{n}","mass":1,"com":[0,0,0],"inertia":{inertia}}}"#))
            .collect();
        let joints: Vec<String> = (0..3)
            .map(|i| {
                format!(
                    r#"{{"name":"j{}","parent":"l{}","child":"l{}","axis":[0,1,0],"gear_ratio":100,"motor_torque_constant":0.1}}"#,
                    i + 1,
                    i,
                    i + 1
                )
            })
            .collect();
        let sensors: Vec<String> = cuts
            .iter()
            .map(|(name, link)| format!(r#"{{"kind":"ft","name":"{name}","link":"{link}","cut":true}}"#))
            .collect();
        let text = format!(
            r#"{{"root_link":"l0","gravity":[0,0,-9.81],"links":[{}],"joints":[{}],"sensors":[{}],
                "contact_frames":[{{"name":"c2","link":"l2"}}]}}"#,
            links.join(","),
            joints.join(","),
            sensors.join(",")
        );
        parse_model(&text).unwrap()
    }

    #[test]
    fn no_cuts_gives_whole_model() {
        let model = chain(&[]);
        let subs = split_at_ft_sensors(&model).unwrap();
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].joints, vec![0, 1, 2]);
        assert_eq!(subs[0].links.len(), 4);
        assert_eq!(subs[0].candidate_contact_frames, vec![0]);
    }

    #[test]
    fn single_cut_partitions_joints() {
        let model = chain(&[("ft", "l1")]);
        let subs = split_at_ft_sensors(&model).unwrap();
        assert_eq!(subs.len(), 2);
        assert_eq!(subs[0].joints, vec![0]);
        assert_eq!(subs[1].joints, vec![1, 2]);
        assert_eq!(subs[1].base_link, 1);
        assert!(!subs[1].owns_base);
        assert_eq!(subs[1].parent, Some(0));
        assert_eq!(subs[0].boundary_ft_sensors[0].side.sign(), -1.0);
        assert_eq!(subs[1].boundary_ft_sensors[0].side.sign(), 1.0);
        // contact frame on l2 lives beyond the cut
        assert_eq!(subs[1].candidate_contact_frames, vec![0]);
        assert!(subs[0].candidate_contact_frames.is_empty());
    }

    #[test]
    fn two_sensors_on_one_edge_is_a_configuration_error() {
        let model = chain(&[("ft_a", "l1"), ("ft_b", "l1")]);
        assert!(matches!(
            split_at_ft_sensors(&model),
            Err(ModelError::Configuration(_))
        ));
    }
}
