//! The artificial world: a tree of subscenes with shape leaves, joint frames and the
//! physical relations (attachment, support, articulation) between them.

use crate::geometry::{wrap_angle, Aabb, Pose, Shape, Vec3};
use crate::sdf::{validate, JointKind, JointLimits, ModelSpec, SemanticTag, WorldSpec};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

pub type NodeId = usize;
pub type JointId = usize;

pub const ROOT: NodeId = 0;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("unknown node name '{0}'")]
    UnknownName(String),
    #[error("unknown joint '{0}'")]
    UnknownJoint(String),
    #[error("attaching node {child} under {parent} would create a cycle")]
    WouldCreateCycle { child: NodeId, parent: NodeId },
    #[error("node {0} cannot be re-parented")]
    NotReparentable(NodeId),
    #[error("joint name '{0}' is used by more than one model")]
    DuplicateJoint(String),
    #[error("model name '{0}' already exists")]
    DuplicateModel(String),
    #[error("world failed validation: {}", .0.join("; "))]
    Validation(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    Group,
    Shape(Shape),
    JointFrame(JointId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// Only the root carries this.
    None,
    RigidChild,
    Attachment,
    Support,
    Articulation(JointId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneNode {
    pub id: NodeId,
    pub name: String,
    /// Name of the model this node was built from, if any.
    pub model: Option<String>,
    pub local_pose: Pose,
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub relation: Relation,
    /// False for nodes of static models.
    pub movable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneJoint {
    pub name: String,
    pub model: String,
    pub kind: JointKind,
    pub axis: Vec3,
    pub limits: JointLimits,
    pub position: f64,
    pub velocity: f64,
    /// The joint-frame node driven by this joint.
    pub node: NodeId,
}

impl SceneJoint {
    /// Clamps (or wraps, for continuous joints) a requested position into the valid range.
    pub fn admissible(&self, q: f64) -> f64 {
        match self.kind {
            JointKind::Continuous => wrap_angle(q),
            JointKind::Fixed => 0.0,
            _ => q.clamp(self.limits.lower, self.limits.upper),
        }
    }

    /// Transform introduced by the joint at position `q`.
    pub fn motion(&self, q: f64) -> Pose {
        match self.kind {
            JointKind::Revolute | JointKind::Continuous => Pose::from_axis_angle(self.axis, q),
            JointKind::Prismatic => {
                let d = self.axis * q;
                Pose::from_translation(d.x, d.y, d.z)
            }
            JointKind::Fixed => Pose::identity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supporter {
    Ground,
    Node(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointValue {
    pub position: f64,
    pub velocity: f64,
}

/// Joint positions and velocities in joint-declaration order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct JointState {
    pub names: Vec<String>,
    pub values: Vec<JointValue>,
}

impl JointState {
    pub fn get(&self, name: &str) -> Option<JointValue> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeInstance {
    pub node: NodeId,
    /// Top-level subtree (direct child of the root) that owns the shape.
    pub body: NodeId,
    pub shape: Shape,
    pub pose: Pose,
    pub aabb: Aabb,
}

/// Immutable read-side view of the scene at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSnapshot {
    pub sim_time: f64,
    pub names: Vec<String>,
    pub parents: Vec<Option<NodeId>>,
    pub bodies: Vec<NodeId>,
    pub world_poses: Vec<Pose>,
    pub joint_state: JointState,
    pub shapes: Vec<ShapeInstance>,
    /// (child, parent) pairs held by an attachment relation.
    pub attachments: Vec<(NodeId, NodeId)>,
    pub supports: Vec<(NodeId, Supporter)>,
    /// Model root nodes, in id order.
    pub models: Vec<NodeId>,
}

impl SceneSnapshot {
    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.names.iter().position(|n| n == name)
    }

    /// Union of the AABBs of every shape in the subtree of `node`.
    pub fn subtree_aabb(&self, node: NodeId) -> Option<Aabb> {
        self.shapes
            .iter()
            .filter(|s| self.is_ancestor_or_self(node, s.node))
            .map(|s| s.aabb)
            .reduce(|a, b| a.union(&b))
    }

    pub fn is_ancestor_or_self(&self, ancestor: NodeId, mut node: NodeId) -> bool {
        loop {
            if node == ancestor {
                return true;
            }
            match self.parents.get(node).copied().flatten() {
                Some(p) => node = p,
                None => return false,
            }
        }
    }
}

/// One container and the joints that open it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainerInfo {
    pub node: NodeId,
    pub name: String,
    pub articulations: Vec<ArticulationInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArticulationInfo {
    pub joint: String,
    pub kind: JointKind,
    pub axis: [f64; 3],
    pub limits: JointLimits,
    pub position: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    nodes: Vec<SceneNode>,
    joints: Vec<SceneJoint>,
    joint_index: HashMap<String, JointId>,
    tags: Vec<(NodeId, SemanticTag)>,
    supports: BTreeMap<NodeId, Supporter>,
    models: BTreeMap<String, NodeId>,
    pub gravity: Vec3,
}

impl Default for SceneGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl SceneGraph {
    /// A graph holding only the world root.
    pub fn new() -> Self {
        Self {
            nodes: vec![SceneNode {
                id: ROOT,
                name: "world".into(),
                model: None,
                local_pose: Pose::identity(),
                kind: NodeKind::Group,
                parent: None,
                children: Vec::new(),
                relation: Relation::None,
                movable: false,
            }],
            joints: Vec::new(),
            joint_index: HashMap::new(),
            tags: Vec::new(),
            supports: BTreeMap::new(),
            models: BTreeMap::new(),
            gravity: Vec3::new(0.0, 0.0, -9.81),
        }
    }

    pub fn nodes(&self) -> &[SceneNode] {
        &self.nodes
    }

    pub fn joints(&self) -> &[SceneJoint] {
        &self.joints
    }

    pub fn node(&self, id: NodeId) -> Result<&SceneNode, SceneError> {
        self.nodes.get(id).ok_or(SceneError::UnknownNode(id))
    }

    pub fn joint(&self, name: &str) -> Result<&SceneJoint, SceneError> {
        self.joint_index
            .get(name)
            .map(|&j| &self.joints[j])
            .ok_or_else(|| SceneError::UnknownJoint(name.to_string()))
    }

    pub fn joint_id(&self, name: &str) -> Result<JointId, SceneError> {
        self.joint_index
            .get(name)
            .copied()
            .ok_or_else(|| SceneError::UnknownJoint(name.to_string()))
    }

    pub fn joint_by_id(&self, id: JointId) -> &SceneJoint {
        &self.joints[id]
    }

    /// Resolves `model`, `model::link`, or a bare node name (first match in id order).
    pub fn find(&self, name: &str) -> Option<NodeId> {
        if let Some(id) = self.model_node(name) {
            return Some(id);
        }
        if let Some((model, link)) = name.split_once("::") {
            let model_node = self.model_node(model)?;
            return self.nodes.iter().enumerate().position(|(id, n)| {
                id != model_node
                    && n.model.as_deref() == Some(model)
                    && n.name == link
                    && matches!(n.kind, NodeKind::Group)
            });
        }
        self.nodes.iter().position(|n| n.name == name)
    }

    /// `model::link` for nodes inside a model, the bare name otherwise. Inverse of
    /// [`find`](Self::find) for link nodes.
    pub fn qualified_name(&self, node: NodeId) -> String {
        let n = &self.nodes[node];
        match &n.model {
            Some(m) if self.model_node(m) != Some(node) => format!("{m}::{}", n.name),
            _ => n.name.clone(),
        }
    }

    pub fn find_required(&self, name: &str) -> Result<NodeId, SceneError> {
        self.find(name)
            .ok_or_else(|| SceneError::UnknownName(name.to_string()))
    }

    /// Node representing the whole model `name`.
    pub fn model_node(&self, name: &str) -> Option<NodeId> {
        self.models.get(name).copied()
    }

    pub fn model_names(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.models.iter().map(|(k, v)| (k.as_str(), *v))
    }

    #[allow(clippy::too_many_arguments)]
    fn push_node(
        &mut self,
        parent: NodeId,
        name: String,
        model: Option<String>,
        local_pose: Pose,
        kind: NodeKind,
        relation: Relation,
        movable: bool,
    ) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(SceneNode {
            id,
            name,
            model,
            local_pose,
            kind,
            parent: Some(parent),
            children: Vec::new(),
            relation,
            movable,
        });
        self.nodes[parent].children.push(id);
        id
    }

    /// Adds one model as a new subtree under the root and returns its model node.
    pub fn add_model(&mut self, model: &ModelSpec) -> Result<NodeId, SceneError> {
        if self.model_node(&model.name).is_some() {
            return Err(SceneError::DuplicateModel(model.name.clone()));
        }
        for j in model.joints.iter().filter(|j| j.kind.is_movable()) {
            if self.joint_index.contains_key(&j.name) {
                return Err(SceneError::DuplicateJoint(j.name.clone()));
            }
        }
        let movable = !model.is_static;
        let mname = Some(model.name.clone());
        let model_node = self.push_node(
            ROOT,
            model.name.clone(),
            mname.clone(),
            model.root_pose.to_pose(),
            NodeKind::Group,
            Relation::RigidChild,
            movable,
        );
        self.models.insert(model.name.clone(), model_node);

        let link_pose: HashMap<&str, Pose> = model
            .links
            .iter()
            .map(|l| (l.name.as_str(), l.pose.to_pose()))
            .collect();
        let mut link_node: HashMap<&str, NodeId> = HashMap::new();

        let add_link = |g: &mut SceneGraph, parent: NodeId, local: Pose, name: &str| -> NodeId {
            let link = model.links.iter().find(|l| l.name == name).expect("link exists");
            let id = g.push_node(
                parent,
                link.name.clone(),
                mname.clone(),
                local,
                NodeKind::Group,
                Relation::RigidChild,
                movable,
            );
            for c in &link.collisions {
                g.push_node(
                    id,
                    format!("{}/{}", link.name, c.name),
                    mname.clone(),
                    c.pose.to_pose(),
                    NodeKind::Shape(c.shape),
                    Relation::RigidChild,
                    movable,
                );
            }
            id
        };

        // Roots first (normally exactly one), then joints breadth-first.
        let children: std::collections::HashSet<&str> =
            model.joints.iter().map(|j| j.child.as_str()).collect();
        for l in model.links.iter().filter(|l| !children.contains(l.name.as_str())) {
            let id = add_link(self, model_node, link_pose[l.name.as_str()], &l.name);
            link_node.insert(&l.name, id);
        }
        let mut pending: Vec<_> = model.joints.iter().collect();
        while !pending.is_empty() {
            let before = pending.len();
            let mut rest = Vec::new();
            for j in pending {
                let Some(&parent_node) = link_node.get(j.parent.as_str()) else {
                    rest.push(j);
                    continue;
                };
                let lp = link_pose[j.parent.as_str()];
                let lc = link_pose[j.child.as_str()];
                let origin = j.origin.to_pose();
                let joint_frame = lp.inverse().compose(&lc.compose(&origin));
                let child_node = if j.kind.is_movable() {
                    let jid = self.joints.len();
                    let frame = self.push_node(
                        parent_node,
                        j.name.clone(),
                        mname.clone(),
                        joint_frame,
                        NodeKind::JointFrame(jid),
                        Relation::Articulation(jid),
                        movable,
                    );
                    let axis = Vec3::new(j.axis[0], j.axis[1], j.axis[2]);
                    let mut joint = SceneJoint {
                        name: j.name.clone(),
                        model: model.name.clone(),
                        kind: j.kind,
                        axis: if axis.norm() > 0.0 { axis.normalize() } else { Vec3::z() },
                        limits: j.limits,
                        position: 0.0,
                        velocity: 0.0,
                        node: frame,
                    };
                    joint.position = joint.admissible(0.0);
                    self.joint_index.insert(j.name.clone(), jid);
                    self.joints.push(joint);
                    add_link(self, frame, origin.inverse(), &j.child)
                } else {
                    add_link(self, parent_node, lp.inverse().compose(&lc), &j.child)
                };
                link_node.insert(&j.child, child_node);
            }
            // Parse-time checks guarantee a tree; this only guards hand-built specs.
            if rest.len() == before {
                break;
            }
            pending = rest;
        }
        Ok(model_node)
    }

    /// Attaches semantic tags, resolving names to nodes.
    pub fn set_semantics(&mut self, tags: &[SemanticTag]) -> Result<(), SceneError> {
        let mut resolved = Vec::with_capacity(tags.len());
        for t in tags {
            let id = self.find_required(&t.name)?;
            resolved.push((id, t.clone()));
        }
        resolved.sort_by_key(|(id, _)| *id);
        self.tags = resolved;
        Ok(())
    }

    pub fn add_tag(&mut self, node: NodeId, tag: SemanticTag) {
        self.tags.push((node, tag));
        self.tags.sort_by_key(|(id, _)| *id);
    }

    pub fn tags(&self) -> &[(NodeId, SemanticTag)] {
        &self.tags
    }

    pub fn has_class(&self, node: NodeId, class: &str) -> bool {
        self.tags
            .iter()
            .any(|(id, t)| *id == node && t.classes.contains(class))
    }

    /// Nodes tagged with `class`, in id order.
    pub fn nodes_with_class(&self, class: &str) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .tags
            .iter()
            .filter(|(_, t)| t.classes.contains(class))
            .map(|(id, _)| *id)
            .collect();
        out.dedup();
        out
    }

    /// World pose of a node: local poses composed from the root, with joint motion applied
    /// at every joint frame.
    pub fn world_pose(&self, id: NodeId) -> Result<Pose, SceneError> {
        self.node(id)?;
        let mut chain = Vec::new();
        let mut cur = Some(id);
        while let Some(n) = cur {
            chain.push(n);
            cur = self.nodes[n].parent;
        }
        Ok(chain
            .iter()
            .rev()
            .fold(Pose::identity(), |acc, &n| acc.compose(&self.node_transform(n))))
    }

    /// Transform from parent frame to this node's frame, joint motion included.
    fn node_transform(&self, id: NodeId) -> Pose {
        let n = &self.nodes[id];
        match n.kind {
            NodeKind::JointFrame(j) => {
                let joint = &self.joints[j];
                n.local_pose.compose(&joint.motion(joint.position))
            }
            _ => n.local_pose,
        }
    }

    /// All world poses in one top-down pass, indexed by node id.
    pub fn world_poses(&self) -> Vec<Pose> {
        let mut out = vec![Pose::identity(); self.nodes.len()];
        let mut stack = vec![ROOT];
        while let Some(n) = stack.pop() {
            let base = match self.nodes[n].parent {
                Some(p) => out[p],
                None => Pose::identity(),
            };
            out[n] = base.compose(&self.node_transform(n));
            stack.extend(self.nodes[n].children.iter().copied());
        }
        out
    }

    pub fn is_ancestor_or_self(&self, ancestor: NodeId, mut node: NodeId) -> bool {
        loop {
            if node == ancestor {
                return true;
            }
            match self.nodes.get(node).and_then(|n| n.parent) {
                Some(p) => node = p,
                None => return false,
            }
        }
    }

    /// The direct child of the root whose subtree holds `node`.
    pub fn body_of(&self, mut node: NodeId) -> NodeId {
        while let Some(p) = self.nodes[node].parent {
            if p == ROOT {
                return node;
            }
            node = p;
        }
        node
    }

    pub fn subtree(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.nodes[n].children.iter().rev().copied());
        }
        out
    }

    /// Re-parents `child` under `new_parent` keeping its world pose fixed.
    pub fn attach(
        &mut self,
        child: NodeId,
        new_parent: NodeId,
        relation: Relation,
    ) -> Result<(), SceneError> {
        self.node(child)?;
        self.node(new_parent)?;
        if child == ROOT || matches!(self.nodes[child].kind, NodeKind::JointFrame(_)) {
            return Err(SceneError::NotReparentable(child));
        }
        if matches!(self.nodes[new_parent].kind, NodeKind::Shape(_)) {
            return Err(SceneError::NotReparentable(new_parent));
        }
        if self.is_ancestor_or_self(child, new_parent) {
            return Err(SceneError::WouldCreateCycle {
                child,
                parent: new_parent,
            });
        }
        let world = self.world_pose(child)?;
        let parent_world = self.world_pose(new_parent)?;
        let old_parent = self.nodes[child].parent.expect("non-root has a parent");
        self.nodes[old_parent].children.retain(|&c| c != child);
        self.nodes[new_parent].children.push(child);
        let n = &mut self.nodes[child];
        n.parent = Some(new_parent);
        n.local_pose = parent_world.inverse().compose(&world);
        n.relation = relation;
        if relation == Relation::Attachment {
            self.supports.remove(&child);
        }
        Ok(())
    }

    /// Moves `node` back under the root as a free rigid child, world pose unchanged.
    pub fn detach(&mut self, node: NodeId) -> Result<(), SceneError> {
        self.attach(node, ROOT, Relation::RigidChild)
    }

    /// Sets the world pose of a node by rewriting its local pose.
    pub fn set_world_pose(&mut self, node: NodeId, pose: Pose) -> Result<(), SceneError> {
        self.node(node)?;
        if node == ROOT || matches!(self.nodes[node].kind, NodeKind::JointFrame(_)) {
            return Err(SceneError::NotReparentable(node));
        }
        let parent = self.nodes[node].parent.expect("non-root");
        let pw = self.world_pose(parent)?;
        self.nodes[node].local_pose = pw.inverse().compose(&pose);
        Ok(())
    }

    pub fn set_local_pose(&mut self, node: NodeId, pose: Pose) -> Result<(), SceneError> {
        self.node(node)?;
        self.nodes[node].local_pose = pose;
        Ok(())
    }

    /// Stores `q` clamped to the joint limits (wrapped for continuous joints) and returns
    /// the stored value.
    pub fn set_joint_position(&mut self, joint: &str, q: f64) -> Result<f64, SceneError> {
        let id = self.joint_id(joint)?;
        Ok(self.set_joint_position_by_id(id, q))
    }

    pub fn set_joint_position_by_id(&mut self, id: JointId, q: f64) -> f64 {
        let j = &mut self.joints[id];
        let q = if q.is_finite() { j.admissible(q) } else { j.position };
        j.position = q;
        q
    }

    pub fn set_joint_velocity_by_id(&mut self, id: JointId, v: f64) {
        self.joints[id].velocity = v;
    }

    pub fn set_support(&mut self, node: NodeId, supporter: Supporter) {
        self.supports.insert(node, supporter);
    }

    pub fn clear_support(&mut self, node: NodeId) {
        self.supports.remove(&node);
    }

    pub fn support_of(&self, node: NodeId) -> Option<Supporter> {
        self.supports.get(&node).copied()
    }

    pub fn joint_state(&self) -> JointState {
        JointState {
            names: self.joints.iter().map(|j| j.name.clone()).collect(),
            values: self
                .joints
                .iter()
                .map(|j| JointValue {
                    position: j.position,
                    velocity: j.velocity,
                })
                .collect(),
        }
    }

    pub fn attachments(&self) -> Vec<(NodeId, NodeId)> {
        self.nodes
            .iter()
            .filter(|n| n.relation == Relation::Attachment)
            .map(|n| (n.id, n.parent.expect("attached nodes have parents")))
            .collect()
    }

    /// Shapes in world frame, in node-id order.
    pub fn shape_instances(&self, poses: &[Pose]) -> Vec<ShapeInstance> {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Shape(shape) => Some(ShapeInstance {
                    node: n.id,
                    body: self.body_of(n.id),
                    shape,
                    pose: poses[n.id],
                    aabb: shape.world_aabb(&poses[n.id]),
                }),
                _ => None,
            })
            .collect()
    }

    pub fn snapshot(&self, sim_time: f64) -> SceneSnapshot {
        let poses = self.world_poses();
        SceneSnapshot {
            sim_time,
            names: self.nodes.iter().map(|n| n.name.clone()).collect(),
            parents: self.nodes.iter().map(|n| n.parent).collect(),
            bodies: (0..self.nodes.len()).map(|i| self.body_of(i)).collect(),
            shapes: self.shape_instances(&poses),
            world_poses: poses,
            joint_state: self.joint_state(),
            attachments: self.attachments(),
            supports: self.supports.iter().map(|(k, v)| (*k, *v)).collect(),
            models: {
                let mut m: Vec<NodeId> = self.models.values().copied().collect();
                m.sort_unstable();
                m
            },
        }
    }

    /// Union AABB of every shape below `node`.
    pub fn subtree_aabb(&self, node: NodeId) -> Option<Aabb> {
        let poses = self.world_poses();
        self.subtree(node)
            .into_iter()
            .filter_map(|n| match self.nodes[n].kind {
                NodeKind::Shape(s) => Some(s.world_aabb(&poses[n])),
                _ => None,
            })
            .reduce(|a, b| a.union(&b))
    }

    /// Every container-tagged node with the movable joints that open it.
    pub fn query_containers(&self) -> Vec<ContainerInfo> {
        self.nodes_with_class("container")
            .into_iter()
            .map(|node| {
                let sub = self.subtree(node);
                let articulations = self
                    .joints
                    .iter()
                    .filter(|j| sub.contains(&j.node))
                    .map(|j| ArticulationInfo {
                        joint: j.name.clone(),
                        kind: j.kind,
                        axis: [j.axis.x, j.axis.y, j.axis.z],
                        limits: j.limits,
                        position: j.position,
                    })
                    .collect();
                ContainerInfo {
                    node,
                    name: self.nodes[node].name.clone(),
                    articulations,
                }
            })
            .collect()
    }

    /// Nodes that are a storage place for `class`, in id order.
    pub fn query_storage_location(&self, class: &str) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .tags
            .iter()
            .filter(|(_, t)| t.stores.contains(class))
            .map(|(id, _)| *id)
            .collect();
        out.dedup();
        out
    }

    /// Verifies the tree property and joint limits. Used by tests after every mutation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![ROOT];
        while let Some(n) = stack.pop() {
            if seen[n] {
                return Err(format!("node {n} reachable twice"));
            }
            seen[n] = true;
            for &c in &self.nodes[n].children {
                if self.nodes[c].parent != Some(n) {
                    return Err(format!("node {c} parent link broken"));
                }
                stack.push(c);
            }
            if matches!(self.nodes[n].kind, NodeKind::Shape(_)) && !self.nodes[n].children.is_empty()
            {
                return Err(format!("shape node {n} has children"));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(format!("node {i} unreachable from root"));
        }
        for j in &self.joints {
            let ok = match j.kind {
                JointKind::Continuous => j.position > -std::f64::consts::PI - 1e-12
                    && j.position <= std::f64::consts::PI + 1e-12,
                JointKind::Fixed => true,
                _ => j.position >= j.limits.lower && j.position <= j.limits.upper,
            };
            if !ok {
                return Err(format!("joint {} at {} outside limits", j.name, j.position));
            }
        }
        Ok(())
    }
}

/// Builds the scene: one subtree per model under the world root.
pub fn build_scene(world: &WorldSpec) -> Result<SceneGraph, SceneError> {
    let warnings = validate(world);
    if !warnings.is_empty() {
        return Err(SceneError::Validation(warnings));
    }
    let mut g = SceneGraph::new();
    g.gravity = Vec3::new(world.gravity[0], world.gravity[1], world.gravity[2]);
    for m in &world.models {
        g.add_model(m)?;
    }
    g.set_semantics(&world.semantics)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::parse_sdf;
    use std::f64::consts::FRAC_PI_2;

    fn hinge_world() -> WorldSpec {
        parse_sdf(
            r#"<sdf version="1.7"><model name="arm">
              <link name="base"/>
              <link name="tip"><pose>1 0 0 0 0 0</pose>
                <collision name="c"><geometry><box><size>0.1 0.1 0.1</size></box></geometry></collision></link>
              <joint name="hinge" type="revolute"><parent>base</parent><child>tip</child><pose>-1 0 0 0 0 0</pose>
                <axis><xyz>0 0 1</xyz></axis></joint>
            </model></sdf>"#,
        )
        .unwrap()
        .world
    }

    #[test]
    fn empty_world_is_root_only() {
        let g = build_scene(&WorldSpec::default()).unwrap();
        assert_eq!(g.nodes().len(), 1);
        g.check_invariants().unwrap();
    }

    #[test]
    fn revolute_quarter_turn() {
        let mut g = build_scene(&hinge_world()).unwrap();
        let tip = g.find_required("arm::tip").unwrap();
        assert!((g.world_pose(tip).unwrap().position - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        g.set_joint_position("hinge", FRAC_PI_2).unwrap();
        let p = g.world_pose(tip).unwrap().position;
        assert!((p - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-9, "{p:?}");
        g.check_invariants().unwrap();
    }

    #[test]
    fn clamp_and_unknown_joint() {
        let mut g = build_scene(&hinge_world()).unwrap();
        assert_eq!(g.set_joint_position("hinge", 10.0).unwrap(), std::f64::consts::PI);
        assert_eq!(
            g.set_joint_position("nope", 0.0),
            Err(SceneError::UnknownJoint("nope".into()))
        );
    }

    #[test]
    fn attach_preserves_world_pose_and_rejects_cycles() {
        let mut g = build_scene(&hinge_world()).unwrap();
        let model = g.model_node("arm").unwrap();
        let tip = g.find_required("arm::tip").unwrap();
        assert!(matches!(g.attach(model, tip, Relation::Attachment), Err(SceneError::WouldCreateCycle { .. })));
        assert!(matches!(g.attach(model, model, Relation::Attachment), Err(SceneError::WouldCreateCycle { .. })));
    }

    #[test]
    fn world_poses_matches_world_pose() {
        let mut g = build_scene(&hinge_world()).unwrap();
        g.set_joint_position("hinge", 0.7).unwrap();
        let all = g.world_poses();
        for (id, pose) in all.iter().enumerate() {
            assert!(pose.approx_eq(&g.world_pose(id).unwrap(), 1e-12));
        }
    }
}
