use serde::Serialize;

use super::spatial::{spatial_inertia, Mat6, RigidTransform, Vec3, Vec6};
use super::DynamicsError;
use crate::model::{validate_model, JointKind, KinematicModel, ModelError, SubModel};

/// Handle to a frame of a specific [`RigidBodyTree`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct FrameId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct TreeJoint {
    pub name: String,
    pub kind: JointKind,
    pub axis: Vec3,
    pub origin: RigidTransform,
    pub motor_inertia: f64,
    pub gear_ratio: f64,
    pub torque_constant: f64,
    /// Position of this joint in the tree's joint vectors.
    pub dof: usize,
}

impl TreeJoint {
    /// Placement of the child frame in the parent frame at position `q`.
    pub fn transform(&self, q: f64) -> RigidTransform {
        let motion = match self.kind {
            JointKind::Revolute => RigidTransform::from_axis_angle(&self.axis, q),
            JointKind::Prismatic => RigidTransform::from_translation(self.axis * q),
        };
        self.origin.compose(&motion)
    }

    /// Motion subspace in the child frame.
    pub fn subspace(&self) -> Vec6 {
        let a = self.axis;
        match self.kind {
            JointKind::Revolute => Vec6::new(0.0, 0.0, 0.0, a.x, a.y, a.z),
            JointKind::Prismatic => Vec6::new(a.x, a.y, a.z, 0.0, 0.0, 0.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Body {
    pub name: String,
    /// `None` only for the base body at index 0.
    pub parent: Option<usize>,
    pub joint: Option<TreeJoint>,
    pub inertia: Mat6,
    pub mass: f64,
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub name: String,
    pub body: usize,
    pub placement: RigidTransform,
}

/// Index-based view of a model (or submodel) used by the dynamics routines.
/// Bodies are stored parent-first with the base at index 0.
#[derive(Clone, Debug)]
pub struct RigidBodyTree {
    pub(crate) bodies: Vec<Body>,
    pub(crate) frames: Vec<Frame>,
    pub(crate) gravity: Vec3,
    /// Model joint index of each tree DoF.
    pub(crate) model_joints: Vec<usize>,
}

impl RigidBodyTree {
    pub fn from_model(model: &KinematicModel) -> Result<Self, ModelError> {
        let diags = validate_model(model);
        if !diags.is_empty() {
            return Err(ModelError::Semantic(diags));
        }
        let root = model.link_index(&model.root_link).expect("valid root");
        let links = model.breadth_first_links();
        let joints: Vec<usize> = (0..model.joints.len()).collect();
        Ok(Self::build(model, root, true, &links, &joints))
    }

    pub fn from_submodel(model: &KinematicModel, sub: &SubModel) -> Result<Self, ModelError> {
        let diags = validate_model(model);
        if !diags.is_empty() {
            return Err(ModelError::Semantic(diags));
        }
        let links: Vec<usize> = sub.links.iter().copied().filter(|&l| l != sub.base_link).collect();
        let mut ordered = vec![sub.base_link];
        ordered.extend(links);
        Ok(Self::build(model, sub.base_link, sub.owns_base, &ordered, &sub.joints))
    }

    fn build(
        model: &KinematicModel,
        base: usize,
        base_has_mass: bool,
        links: &[usize],
        joints: &[usize],
    ) -> Self {
        let mut bodies: Vec<Body> = Vec::with_capacity(links.len().max(1));
        let mut body_of_link = std::collections::HashMap::new();
        for &link_idx in links.iter() {
            let link = &model.links[link_idx];
            let is_base = link_idx == base;
            let (inertia, mass) = if is_base && !base_has_mass {
                (Mat6::zeros(), 0.0)
            } else {
                (spatial_inertia(link.mass, &link.com, &link.inertia), link.mass)
            };
            let (parent, joint) = if is_base {
                (None, None)
            } else {
                let j = model.parent_joint_of(&link.name).expect("non-root link has a parent joint");
                let spec = &model.joints[j];
                let parent_link = model.link_index(&spec.parent).expect("valid parent");
                let dof = joints
                    .iter()
                    .position(|&x| x == j)
                    .expect("joint belongs to the tree");
                (
                    Some(body_of_link[&parent_link]),
                    Some(TreeJoint {
                        name: spec.name.clone(),
                        kind: spec.kind,
                        axis: spec.axis,
                        origin: spec.origin,
                        motor_inertia: spec.motor_inertia,
                        gear_ratio: spec.gear_ratio,
                        torque_constant: spec.motor_torque_constant,
                        dof,
                    }),
                )
            };
            body_of_link.insert(link_idx, bodies.len());
            bodies.push(Body {
                name: link.name.clone(),
                parent,
                joint,
                inertia,
                mass,
            });
        }

        let mut frames = Vec::new();
        for (i, body) in bodies.iter().enumerate() {
            frames.push(Frame {
                name: body.name.clone(),
                body: i,
                placement: RigidTransform::identity(),
            });
        }
        for sensor in &model.sensors {
            if let Some(&body) = model.link_index(&sensor.link).and_then(|l| body_of_link.get(&l)) {
                frames.push(Frame {
                    name: sensor.name.clone(),
                    body,
                    placement: sensor.mounting,
                });
            }
        }
        for contact in &model.contact_frames {
            if let Some(&body) = model.link_index(&contact.link).and_then(|l| body_of_link.get(&l)) {
                frames.push(Frame {
                    name: contact.name.clone(),
                    body,
                    placement: contact.transform,
                });
            }
        }

        Self {
            bodies,
            frames,
            gravity: model.gravity,
            model_joints: joints.to_vec(),
        }
    }

    pub fn dofs(&self) -> usize {
        self.model_joints.len()
    }

    /// Size of the generalized velocity: six base coordinates plus the joints.
    pub fn nv(&self) -> usize {
        6 + self.dofs()
    }

    pub fn gravity(&self) -> Vec3 {
        self.gravity
    }

    pub fn bodies(&self) -> &[Body] {
        &self.bodies
    }

    pub fn model_joints(&self) -> &[usize] {
        &self.model_joints
    }

    /// Joint attached to each DoF, in DoF order.
    pub fn joint(&self, dof: usize) -> &TreeJoint {
        self.bodies
            .iter()
            .filter_map(|b| b.joint.as_ref())
            .find(|j| j.dof == dof)
            .expect("dof in range")
    }

    pub fn body_index(&self, name: &str) -> Option<usize> {
        self.bodies.iter().position(|b| b.name == name)
    }

    pub fn frame_id(&self, name: &str) -> Result<FrameId, DynamicsError> {
        self.frames
            .iter()
            .position(|f| f.name == name)
            .map(FrameId)
            .ok_or_else(|| DynamicsError::UnknownFrame(name.to_string()))
    }

    pub fn frame(&self, id: FrameId) -> Result<&Frame, DynamicsError> {
        self.frames
            .get(id.0)
            .ok_or_else(|| DynamicsError::UnknownFrame(format!("#{}", id.0)))
    }

    pub fn frame_names(&self) -> impl Iterator<Item = &str> {
        self.frames.iter().map(|f| f.name.as_str())
    }

    /// Indices of the bodies on the path from `body` up to (excluding) the base.
    pub(crate) fn ancestry(&self, mut body: usize) -> Vec<usize> {
        let mut out = Vec::new();
        while let Some(parent) = self.bodies[body].parent {
            out.push(body);
            body = parent;
        }
        out
    }

    /// Total mass of all bodies.
    pub fn total_mass(&self) -> f64 {
        self.bodies.iter().map(|b| b.mass).sum()
    }
}
