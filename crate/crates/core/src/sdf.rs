//! SDF world/robot description subset and the semantic-tag sidecar.
//!
//! Supported elements: `sdf`, `world`, `gravity`, `model`, `static`, `pose`, `link`,
//! `inertial/mass`, `collision`, `visual`, `geometry` (`box`, `cylinder`, `sphere`, and `mesh`
//! with a `bounding_box/size` annotation), `joint`, `parent`, `child`, `axis/xyz` and
//! `axis/limit`. Anything else is skipped and reported as a warning.
//!
//! Poses are kept in their textual `x y z roll pitch yaw` form so a parsed world can be
//! written back and reparsed without loss.

use crate::geometry::{Pose, Shape, Vec3};
use roxmltree::{Document, Node};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SdfError {
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("{path}: unsupported joint type '{kind}'")]
    UnsupportedJointType { path: String, kind: String },
    #[error("{path}: link '{link}' does not exist")]
    DanglingLinkReference { path: String, link: String },
    #[error("{path}: joint graph is not a tree")]
    CyclicJointGraph { path: String },
    #[error("{path}: mesh geometry needs a bounding_box/size annotation")]
    MissingMeshBounds { path: String },
    #[error("{path}: {message}")]
    InvalidValue { path: String, message: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum SemanticsError {
    #[error("semantics document is not valid: {0}")]
    Malformed(String),
    #[error("semantic tag refers to unknown name '{0}'")]
    UnknownName(String),
}

/// `x y z roll pitch yaw` as written in the document.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SdfPose {
    pub xyz: [f64; 3],
    pub rpy: [f64; 3],
}

impl SdfPose {
    pub fn new(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self { xyz, rpy }
    }

    pub fn to_pose(&self) -> Pose {
        Pose::from_xyz_rpy(
            self.xyz[0],
            self.xyz[1],
            self.xyz[2],
            self.rpy[0],
            self.rpy[1],
            self.rpy[2],
        )
    }

    fn is_identity(&self) -> bool {
        self.xyz == [0.0; 3] && self.rpy == [0.0; 3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionSpec {
    pub name: String,
    /// Offset in the link frame.
    pub pose: SdfPose,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub name: String,
    /// Link frame in the model frame.
    pub pose: SdfPose,
    /// Collision geometry; falls back to the visual geometry when no collision is declared.
    pub collisions: Vec<CollisionSpec>,
    pub mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
    Continuous,
    Fixed,
}

impl JointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            JointKind::Revolute => "revolute",
            JointKind::Prismatic => "prismatic",
            JointKind::Continuous => "continuous",
            JointKind::Fixed => "fixed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "revolute" => Some(JointKind::Revolute),
            "prismatic" => Some(JointKind::Prismatic),
            "continuous" => Some(JointKind::Continuous),
            "fixed" => Some(JointKind::Fixed),
            _ => None,
        }
    }

    pub fn is_movable(&self) -> bool {
        !matches!(self, JointKind::Fixed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub lower: f64,
    pub upper: f64,
    pub max_velocity: f64,
}

pub const DEFAULT_MAX_VELOCITY: f64 = 1.0;

impl JointLimits {
    pub fn default_for(kind: JointKind) -> Self {
        let (lower, upper) = match kind {
            JointKind::Prismatic => (0.0, 1.0),
            _ => (-PI, PI),
        };
        Self {
            lower,
            upper,
            max_velocity: DEFAULT_MAX_VELOCITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    /// Unit axis in the joint frame.
    pub axis: [f64; 3],
    pub limits: JointLimits,
    /// Joint frame relative to the child link frame.
    pub origin: SdfPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub links: Vec<LinkSpec>,
    pub joints: Vec<JointSpec>,
    pub root_pose: SdfPose,
    pub is_static: bool,
}

impl ModelSpec {
    /// The root link: the first link that is never a joint child.
    pub fn root_link(&self) -> Option<&LinkSpec> {
        let children: HashSet<&str> = self.joints.iter().map(|j| j.child.as_str()).collect();
        self.links.iter().find(|l| !children.contains(l.name.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticTag {
    /// A model name, a `model::link` path or a bare link name.
    pub name: String,
    pub classes: BTreeSet<String>,
    pub stores: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub name: String,
    pub models: Vec<ModelSpec>,
    pub gravity: [f64; 3],
    pub semantics: Vec<SemanticTag>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            name: "default".into(),
            models: Vec::new(),
            gravity: [0.0, 0.0, -9.81],
            semantics: Vec::new(),
        }
    }
}

impl WorldSpec {
    pub fn model(&self, name: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.name == name)
    }

    /// True when `name` resolves to a model, a `model::link` path or a link of any model.
    pub fn has_name(&self, name: &str) -> bool {
        if self.model(name).is_some() {
            return true;
        }
        if let Some((m, l)) = name.split_once("::") {
            return self
                .model(m)
                .is_some_and(|m| m.links.iter().any(|link| link.name == l));
        }
        self.models
            .iter()
            .any(|m| m.links.iter().any(|l| l.name == name))
    }

    pub fn link_count(&self) -> usize {
        self.models.iter().map(|m| m.links.len()).sum()
    }

    pub fn joint_count(&self) -> usize {
        self.models.iter().map(|m| m.joints.len()).sum()
    }
}

/// Parse result: the world plus the warnings collected for skipped elements.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedWorld {
    pub world: WorldSpec,
    pub warnings: Vec<String>,
}

pub fn parse_sdf(text: &str) -> Result<ParsedWorld, SdfError> {
    let doc = Document::parse(text).map_err(|e| SdfError::MalformedXml(e.to_string()))?;
    let root = doc.root_element();
    let mut parser = Parser::default();
    let mut world = WorldSpec::default();

    if root.tag_name().name() != "sdf" {
        return Err(SdfError::MalformedXml(format!(
            "root element is <{}>, expected <sdf>",
            root.tag_name().name()
        )));
    }
    let base = "/sdf".to_string();
    for child in root.children().filter(Node::is_element) {
        match child.tag_name().name() {
            "world" => {
                let path = format!("{base}/world[{}]", child.attribute("name").unwrap_or(""));
                world.name = child.attribute("name").unwrap_or("default").to_string();
                parser.world(child, &path, &mut world)?;
            }
            "model" => {
                let model = parser.model(child, &base)?;
                world.models.push(model);
            }
            other => parser.warn(format!("{base}/{other}")),
        }
    }
    let mut seen = HashSet::new();
    for m in &world.models {
        if !seen.insert(m.name.clone()) {
            return Err(SdfError::InvalidValue {
                path: format!("{base}/model[{}]", m.name),
                message: "duplicate model name".into(),
            });
        }
    }
    Ok(ParsedWorld {
        world,
        warnings: parser.warnings,
    })
}

#[derive(Default)]
struct Parser {
    warnings: Vec<String>,
}

impl Parser {
    fn warn(&mut self, path: String) {
        self.warnings.push(format!("ignored element {path}"));
    }

    fn world(&mut self, node: Node, path: &str, world: &mut WorldSpec) -> Result<(), SdfError> {
        for child in node.children().filter(Node::is_element) {
            match child.tag_name().name() {
                "gravity" => {
                    world.gravity = parse_vec3(child, &format!("{path}/gravity"))?;
                }
                "model" => {
                    let model = self.model(child, path)?;
                    world.models.push(model);
                }
                other => self.warn(format!("{path}/{other}")),
            }
        }
        Ok(())
    }

    fn model(&mut self, node: Node, parent_path: &str) -> Result<ModelSpec, SdfError> {
        let name = node.attribute("name").unwrap_or("").to_string();
        let path = format!("{parent_path}/model[{name}]");
        let mut model = ModelSpec {
            name,
            links: Vec::new(),
            joints: Vec::new(),
            root_pose: SdfPose::default(),
            is_static: false,
        };
        let mut joint_nodes = Vec::new();
        for child in node.children().filter(Node::is_element) {
            match child.tag_name().name() {
                "static" => model.is_static = parse_bool(child, &format!("{path}/static"))?,
                "pose" => model.root_pose = parse_pose(child, &format!("{path}/pose"))?,
                "link" => model.links.push(self.link(child, &path)?),
                "joint" => joint_nodes.push(child),
                other => self.warn(format!("{path}/{other}")),
            }
        }
        for jn in joint_nodes {
            model.joints.push(self.joint(jn, &path)?);
        }
        check_joint_tree(&model, &path)?;
        Ok(model)
    }

    fn link(&mut self, node: Node, model_path: &str) -> Result<LinkSpec, SdfError> {
        let name = node.attribute("name").unwrap_or("").to_string();
        let path = format!("{model_path}/link[{name}]");
        let mut link = LinkSpec {
            name,
            pose: SdfPose::default(),
            collisions: Vec::new(),
            mass: 1.0,
        };
        let mut visuals = Vec::new();
        for child in node.children().filter(Node::is_element) {
            match child.tag_name().name() {
                "pose" => link.pose = parse_pose(child, &format!("{path}/pose"))?,
                "inertial" => {
                    for ic in child.children().filter(Node::is_element) {
                        match ic.tag_name().name() {
                            "mass" => {
                                link.mass = parse_f64(ic, &format!("{path}/inertial/mass"))?
                            }
                            other => self.warn(format!("{path}/inertial/{other}")),
                        }
                    }
                }
                "collision" => {
                    if let Some(c) = self.geometry_holder(child, &path, "collision")? {
                        link.collisions.push(c);
                    }
                }
                "visual" => {
                    if let Some(c) = self.geometry_holder(child, &path, "visual")? {
                        visuals.push(c);
                    }
                }
                other => self.warn(format!("{path}/{other}")),
            }
        }
        if link.collisions.is_empty() {
            link.collisions = visuals;
        }
        Ok(link)
    }

    fn geometry_holder(
        &mut self,
        node: Node,
        link_path: &str,
        tag: &str,
    ) -> Result<Option<CollisionSpec>, SdfError> {
        let name = node.attribute("name").unwrap_or("").to_string();
        let path = format!("{link_path}/{tag}[{name}]");
        let mut pose = SdfPose::default();
        let mut shape = None;
        for child in node.children().filter(Node::is_element) {
            match child.tag_name().name() {
                "pose" => pose = parse_pose(child, &format!("{path}/pose"))?,
                "geometry" => shape = self.geometry(child, &format!("{path}/geometry"))?,
                // Visual-only decoration.
                "material" | "transparency" | "cast_shadows" if tag == "visual" => {}
                other => self.warn(format!("{path}/{other}")),
            }
        }
        Ok(shape.map(|shape| CollisionSpec { name, pose, shape }))
    }

    fn geometry(&mut self, node: Node, path: &str) -> Result<Option<Shape>, SdfError> {
        let mut shape = None;
        for g in node.children().filter(Node::is_element) {
            let gp = format!("{path}/{}", g.tag_name().name());
            match g.tag_name().name() {
                "box" => {
                    let size = child_required(g, "size", &gp)?;
                    let v = parse_vec3(size, &format!("{gp}/size"))?;
                    shape = Some(Shape::Box { size: v });
                }
                "cylinder" => {
                    let radius = parse_f64(child_required(g, "radius", &gp)?, &gp)?;
                    let length = parse_f64(child_required(g, "length", &gp)?, &gp)?;
                    shape = Some(Shape::Cylinder { radius, length });
                }
                "sphere" => {
                    let radius = parse_f64(child_required(g, "radius", &gp)?, &gp)?;
                    shape = Some(Shape::Sphere { radius });
                }
                "mesh" => {
                    let size = g
                        .children()
                        .find(|c| c.has_tag_name("bounding_box"))
                        .and_then(|bb| bb.children().find(|c| c.has_tag_name("size")))
                        .ok_or_else(|| SdfError::MissingMeshBounds { path: gp.clone() })?;
                    let v = parse_vec3(size, &format!("{gp}/bounding_box/size"))?;
                    shape = Some(Shape::Box { size: v });
                }
                other => self.warn(format!("{path}/{other}")),
            }
        }
        Ok(shape)
    }

    fn joint(&mut self, node: Node, model_path: &str) -> Result<JointSpec, SdfError> {
        let name = node.attribute("name").unwrap_or("").to_string();
        let path = format!("{model_path}/joint[{name}]");
        let type_str = node.attribute("type").unwrap_or("");
        let kind = JointKind::parse(type_str).ok_or_else(|| SdfError::UnsupportedJointType {
            path: path.clone(),
            kind: type_str.to_string(),
        })?;
        let mut joint = JointSpec {
            name,
            kind,
            parent: String::new(),
            child: String::new(),
            axis: [0.0, 0.0, 1.0],
            limits: JointLimits::default_for(kind),
            origin: SdfPose::default(),
        };
        for child in node.children().filter(Node::is_element) {
            match child.tag_name().name() {
                "parent" => joint.parent = text(child).to_string(),
                "child" => joint.child = text(child).to_string(),
                "pose" => joint.origin = parse_pose(child, &format!("{path}/pose"))?,
                "axis" => self.axis(child, &format!("{path}/axis"), &mut joint)?,
                other => self.warn(format!("{path}/{other}")),
            }
        }
        Ok(joint)
    }

    fn axis(&mut self, node: Node, path: &str, joint: &mut JointSpec) -> Result<(), SdfError> {
        for child in node.children().filter(Node::is_element) {
            match child.tag_name().name() {
                "xyz" => {
                    let v = parse_vec3(child, &format!("{path}/xyz"))?;
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    joint.axis = if n > 0.0 && (n - 1.0).abs() > 1e-12 {
                        [v[0] / n, v[1] / n, v[2] / n]
                    } else {
                        v
                    };
                }
                "limit" => {
                    for lc in child.children().filter(Node::is_element) {
                        let lp = format!("{path}/limit/{}", lc.tag_name().name());
                        match lc.tag_name().name() {
                            "lower" => joint.limits.lower = parse_f64(lc, &lp)?,
                            "upper" => joint.limits.upper = parse_f64(lc, &lp)?,
                            "velocity" => joint.limits.max_velocity = parse_f64(lc, &lp)?,
                            "effort" => {}
                            _ => self.warn(lp),
                        }
                    }
                }
                "dynamics" | "use_parent_model_frame" => {}
                other => self.warn(format!("{path}/{other}")),
            }
        }
        Ok(())
    }
}

fn check_joint_tree(model: &ModelSpec, path: &str) -> Result<(), SdfError> {
    let links: HashSet<&str> = model.links.iter().map(|l| l.name.as_str()).collect();
    let mut parent_of: HashMap<&str, &str> = HashMap::new();
    for j in &model.joints {
        let jpath = format!("{path}/joint[{}]", j.name);
        for (tag, link) in [("parent", &j.parent), ("child", &j.child)] {
            if !links.contains(link.as_str()) {
                return Err(SdfError::DanglingLinkReference {
                    path: format!("{jpath}/{tag}"),
                    link: link.clone(),
                });
            }
        }
        if j.parent == j.child || parent_of.insert(&j.child, &j.parent).is_some() {
            return Err(SdfError::CyclicJointGraph { path: jpath });
        }
        // Walk up from the new child; reaching it again means this joint closed a cycle.
        let mut cur = j.parent.as_str();
        let mut steps = 0;
        while let Some(&p) = parent_of.get(cur) {
            if cur == j.child || steps > model.joints.len() {
                return Err(SdfError::CyclicJointGraph { path: jpath });
            }
            cur = p;
            steps += 1;
        }
        if cur == j.child {
            return Err(SdfError::CyclicJointGraph { path: jpath });
        }
    }
    Ok(())
}

fn text<'a>(node: Node<'a, '_>) -> &'a str {
    node.text().unwrap_or("").trim()
}

fn child_required<'a, 'i>(node: Node<'a, 'i>, tag: &str, path: &str) -> Result<Node<'a, 'i>, SdfError> {
    node.children()
        .find(|c| c.has_tag_name(tag))
        .ok_or_else(|| SdfError::InvalidValue {
            path: path.to_string(),
            message: format!("missing <{tag}>"),
        })
}

fn parse_numbers(node: Node, path: &str) -> Result<Vec<f64>, SdfError> {
    text(node)
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| SdfError::InvalidValue {
                path: path.to_string(),
                message: format!("'{t}' is not a number"),
            })
        })
        .collect()
}

fn parse_f64(node: Node, path: &str) -> Result<f64, SdfError> {
    match parse_numbers(node, path)?.as_slice() {
        [v] => Ok(*v),
        other => Err(SdfError::InvalidValue {
            path: path.to_string(),
            message: format!("expected 1 number, found {}", other.len()),
        }),
    }
}

fn parse_vec3(node: Node, path: &str) -> Result<[f64; 3], SdfError> {
    match parse_numbers(node, path)?.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        other => Err(SdfError::InvalidValue {
            path: path.to_string(),
            message: format!("expected 3 numbers, found {}", other.len()),
        }),
    }
}

fn parse_pose(node: Node, path: &str) -> Result<SdfPose, SdfError> {
    match parse_numbers(node, path)?.as_slice() {
        [x, y, z] => Ok(SdfPose::new([*x, *y, *z], [0.0; 3])),
        [x, y, z, r, p, yaw] => Ok(SdfPose::new([*x, *y, *z], [*r, *p, *yaw])),
        other => Err(SdfError::InvalidValue {
            path: path.to_string(),
            message: format!("expected 6 numbers, found {}", other.len()),
        }),
    }
}

fn parse_bool(node: Node, path: &str) -> Result<bool, SdfError> {
    match text(node) {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(SdfError::InvalidValue {
            path: path.to_string(),
            message: format!("'{other}' is not a boolean"),
        }),
    }
}

/// Writes a world back out as SDF 1.7. Reparsing the output yields an equal `WorldSpec`
/// apart from semantics, which live in the sidecar.
pub fn write_sdf(world: &WorldSpec) -> String {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\"?>\n<sdf version=\"1.7\">\n");
    let _ = writeln!(out, "  <world name=\"{}\">", xml_escape(&world.name));
    let _ = writeln!(out, "    <gravity>{}</gravity>", nums(&world.gravity));
    for m in &world.models {
        let _ = writeln!(out, "    <model name=\"{}\">", xml_escape(&m.name));
        let _ = writeln!(out, "      <static>{}</static>", m.is_static);
        let _ = writeln!(out, "      <pose>{}</pose>", pose_text(&m.root_pose));
        for l in &m.links {
            let _ = writeln!(out, "      <link name=\"{}\">", xml_escape(&l.name));
            let _ = writeln!(out, "        <pose>{}</pose>", pose_text(&l.pose));
            let _ = writeln!(out, "        <inertial><mass>{}</mass></inertial>", l.mass);
            for c in &l.collisions {
                let _ = writeln!(out, "        <collision name=\"{}\">", xml_escape(&c.name));
                if !c.pose.is_identity() {
                    let _ = writeln!(out, "          <pose>{}</pose>", pose_text(&c.pose));
                }
                let _ = writeln!(out, "          <geometry>{}</geometry>", shape_text(&c.shape));
                out.push_str("        </collision>\n");
            }
            out.push_str("      </link>\n");
        }
        for j in &m.joints {
            let _ = writeln!(
                out,
                "      <joint name=\"{}\" type=\"{}\">",
                xml_escape(&j.name),
                j.kind.as_str()
            );
            let _ = writeln!(out, "        <parent>{}</parent>", xml_escape(&j.parent));
            let _ = writeln!(out, "        <child>{}</child>", xml_escape(&j.child));
            let _ = writeln!(out, "        <pose>{}</pose>", pose_text(&j.origin));
            let _ = writeln!(
                out,
                "        <axis><xyz>{}</xyz><limit><lower>{}</lower><upper>{}</upper><velocity>{}</velocity></limit></axis>",
                nums(&j.axis),
                j.limits.lower,
                j.limits.upper,
                j.limits.max_velocity
            );
            out.push_str("      </joint>\n");
        }
        out.push_str("    </model>\n");
    }
    out.push_str("  </world>\n</sdf>\n");
    out
}

fn nums(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn pose_text(p: &SdfPose) -> String {
    format!("{} {}", nums(&p.xyz), nums(&p.rpy))
}

fn shape_text(s: &Shape) -> String {
    match *s {
        Shape::Box { size } => format!("<box><size>{}</size></box>", nums(&size)),
        Shape::Cylinder { radius, length } => format!(
            "<cylinder><radius>{radius}</radius><length>{length}</length></cylinder>"
        ),
        Shape::Sphere { radius } => format!("<sphere><radius>{radius}</radius></sphere>"),
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TagEntry {
    #[serde(default)]
    classes: BTreeSet<String>,
    #[serde(default)]
    stores: BTreeSet<String>,
}

/// Parses the JSON sidecar `{ "<name>": { "classes": [...], "stores": [...] } }` and
/// resolves each name against `world`.
pub fn parse_semantics(text: &str, world: &WorldSpec) -> Result<Vec<SemanticTag>, SemanticsError> {
    let entries: BTreeMap<String, TagEntry> =
        serde_json::from_str(text).map_err(|e| SemanticsError::Malformed(e.to_string()))?;
    let mut tags = Vec::with_capacity(entries.len());
    for (name, entry) in entries {
        if !world.has_name(&name) {
            return Err(SemanticsError::UnknownName(name));
        }
        tags.push(SemanticTag {
            name,
            classes: entry.classes,
            stores: entry.stores,
        });
    }
    Ok(tags)
}

/// Checks the model invariants. Returns one message per violation and never mutates.
pub fn validate(world: &WorldSpec) -> Vec<String> {
    let mut warnings = Vec::new();
    let mut model_names = HashSet::new();
    for m in &world.models {
        if !model_names.insert(&m.name) {
            warnings.push(format!("model '{}': duplicate model name", m.name));
        }
        let mut link_names = HashSet::new();
        for l in &m.links {
            if !link_names.insert(&l.name) {
                warnings.push(format!("model '{}': duplicate link '{}'", m.name, l.name));
            }
            for c in &l.collisions {
                if !c.shape.dimensions_positive() {
                    warnings.push(format!(
                        "model '{}' link '{}': shape '{}' has a non-positive dimension",
                        m.name, l.name, c.name
                    ));
                }
            }
        }
        for j in &m.joints {
            if j.parent == j.child {
                warnings.push(format!("joint '{}': parent equals child", j.name));
            }
            let n = (j.axis[0].powi(2) + j.axis[1].powi(2) + j.axis[2].powi(2)).sqrt();
            if j.kind.is_movable() && (n - 1.0).abs() > 1e-9 {
                warnings.push(format!("joint '{}': axis is not a unit vector", j.name));
            }
            if matches!(j.kind, JointKind::Revolute | JointKind::Prismatic)
                && j.limits.lower > j.limits.upper
            {
                warnings.push(format!(
                    "joint '{}': lower limit {} exceeds upper limit {}",
                    j.name, j.limits.lower, j.limits.upper
                ));
            }
            if j.kind.is_movable() && (j.limits.max_velocity.is_nan() || j.limits.max_velocity <= 0.0) {
                warnings.push(format!("joint '{}': max velocity must be positive", j.name));
            }
        }
        let children: HashSet<&str> = m.joints.iter().map(|j| j.child.as_str()).collect();
        let roots = m
            .links
            .iter()
            .filter(|l| !children.contains(l.name.as_str()))
            .count();
        if !m.links.is_empty() && roots != 1 {
            warnings.push(format!(
                "model '{}': joint graph has {roots} root links, expected 1",
                m.name
            ));
        }
    }
    for t in &world.semantics {
        if !world.has_name(&t.name) {
            warnings.push(format!("semantic tag '{}' names nothing in the world", t.name));
        }
    }
    warnings
}

/// Joint axis as a vector.
pub fn axis_vec(j: &JointSpec) -> Vec3 {
    Vec3::new(j.axis[0], j.axis[1], j.axis[2])
}
