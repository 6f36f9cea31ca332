//! Fixed-step simulation loop. Each tick drains the command queue, advances the base,
//! joint and gripper controllers, checks contacts, and records what happened.

use crate::controllers::{
    goal_twist, point_head, step_base, step_trajectory, track, BaseCommand, ControlError,
    ControllerMode, GripperState, JointMode, JointTrajectory, Twist2d, HEAD_PAN_LIMITS,
    HEAD_TILT_LIMITS,
};
use crate::geometry::{Aabb, Pose, Pose2d, Shape, Vec3};
use crate::sdf::{CollisionSpec, LinkSpec, ModelSpec, SdfPose, SemanticTag};
use crate::neem::{EpisodeHeader, EventDraft, EventKind, NeemError, NeemEvent, Outcome, Recorder, TransformSample};
use crate::physics::{check_collisions, grasp, grasp_check, release, PhysicsError};
use crate::scene::{JointId, NodeId, SceneError, SceneGraph, SceneSnapshot};
use crate::sensors::{head_base_pose, CameraConfig, LaserConfig, ViewRig};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Neem(#[from] NeemError),
    #[error("no model has class '{0}'")]
    UnknownClass(String),
    #[error("no robot is configured")]
    NoRobot,
    #[error("invalid tick configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickConfig {
    pub dt: f64,
    pub base_max_linear: f64,
    pub base_max_angular: f64,
    /// Gripper finger separation speed in m/s.
    pub gripper_velocity: f64,
}

impl Default for TickConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            base_max_linear: 1.0,
            base_max_angular: 2.0,
            gripper_velocity: 0.1,
        }
    }
}

/// Names of the robot parts the controllers drive, plus sensor intrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub model: String,
    pub pan_joint: String,
    pub tilt_joint: String,
    pub camera_link: String,
    pub laser_link: String,
    pub gripper_joint: String,
    /// Link whose origin is the grasp point.
    pub tool_link: String,
    /// Prismatic joints positioning the tool; see [`Robot::arm_solution`].
    pub arm_joints: Vec<String>,
    /// Half extents of the base footprint in x and y.
    pub footprint_half: [f64; 2],
    pub footprint_height: f64,
    pub hfov: f64,
    pub vfov: f64,
    pub near: f64,
    pub far: f64,
    pub laser_angle_min: f64,
    pub laser_angle_max: f64,
    pub laser_angle_increment: f64,
    pub laser_range_min: f64,
    pub laser_range_max: f64,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            model: "robot".into(),
            pan_joint: "head_pan".into(),
            tilt_joint: "head_tilt".into(),
            camera_link: "camera_link".into(),
            laser_link: "laser_link".into(),
            gripper_joint: "gripper_joint".into(),
            tool_link: "tool_link".into(),
            arm_joints: vec!["arm_x".into(), "arm_y".into(), "arm_z".into()],
            footprint_half: [0.3, 0.3],
            footprint_height: 0.3,
            hfov: 1.0,
            vfov: 0.8,
            near: 0.05,
            far: 5.0,
            laser_angle_min: -2.0,
            laser_angle_max: 2.0,
            laser_angle_increment: 0.01,
            laser_range_min: 0.05,
            laser_range_max: 10.0,
        }
    }
}

/// A [`RobotConfig`] resolved against a scene graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Robot {
    pub config: RobotConfig,
    pub model: NodeId,
    pub pan: JointId,
    pub tilt: JointId,
    pub gripper: JointId,
    pub arm: Vec<JointId>,
    pub tool: NodeId,
    pub camera: CameraConfig,
    pub laser: LaserConfig,
    pub footprint: Aabb,
}

impl Robot {
    pub fn resolve(g: &SceneGraph, config: RobotConfig) -> Result<Self, SceneError> {
        let model = g
            .model_node(&config.model)
            .ok_or_else(|| SceneError::UnknownName(config.model.clone()))?;
        let scoped = |link: &str| g.find_required(&format!("{}::{link}", config.model));
        let camera = CameraConfig {
            frame: scoped(&config.camera_link)?,
            hfov: config.hfov,
            vfov: config.vfov,
            near: config.near,
            far: config.far,
        };
        let laser = LaserConfig {
            frame: scoped(&config.laser_link)?,
            angle_min: config.laser_angle_min,
            angle_max: config.laser_angle_max,
            angle_increment: config.laser_angle_increment,
            range_min: config.laser_range_min,
            range_max: config.laser_range_max,
            rate: 10.0,
        };
        let [hx, hy] = config.footprint_half;
        Ok(Self {
            model,
            pan: g.joint_id(&config.pan_joint)?,
            tilt: g.joint_id(&config.tilt_joint)?,
            gripper: g.joint_id(&config.gripper_joint)?,
            arm: config
                .arm_joints
                .iter()
                .map(|j| g.joint_id(j))
                .collect::<Result<_, _>>()?,
            tool: scoped(&config.tool_link)?,
            camera,
            laser,
            footprint: Aabb::new(
                Vec3::new(-hx, -hy, 0.0),
                Vec3::new(hx, hy, config.footprint_height),
            ),
            config,
        })
    }

    pub fn view_rig(&self) -> ViewRig {
        ViewRig {
            base: self.model,
            pan_joint: self.config.pan_joint.clone(),
            tilt_joint: self.config.tilt_joint.clone(),
            camera: self.camera,
            footprint: self.footprint,
        }
    }

    pub fn base_pose(&self, g: &SceneGraph) -> Pose2d {
        let p = g.nodes()[self.model].local_pose;
        Pose2d::new(p.position.x, p.position.y, p.yaw())
    }

    /// Arm joint positions that put the tool origin at `target` with the base where it is
    /// now, or `None` if that needs a joint beyond its limits. The arm joints must be
    /// prismatic, which makes the tool position affine in them.
    pub fn arm_solution(&self, g: &SceneGraph, target: &Vec3) -> Option<Vec<f64>> {
        if self.arm.len() != 3 {
            return None;
        }
        let mut probe = g.clone();
        for &j in &self.arm {
            probe.set_joint_position_by_id(j, 0.0);
        }
        let tool_at = |p: &SceneGraph| p.world_pose(self.tool).ok().map(|t| t.position);
        let origin = tool_at(&probe)?;
        let mut jac = nalgebra::Matrix3::zeros();
        for (col, &j) in self.arm.iter().enumerate() {
            let lim = g.joint_by_id(j).limits;
            // Probe with an in-limit step so clamping cannot distort the column.
            let step = if lim.upper > 0.0 { lim.upper.min(1.0) } else { lim.lower.max(-1.0) };
            probe.set_joint_position_by_id(j, step);
            let moved = tool_at(&probe)?;
            probe.set_joint_position_by_id(j, 0.0);
            jac.set_column(col, &((moved - origin) / step));
        }
        let q = jac.lu().solve(&(target - origin))?;
        let tol = 1e-9;
        let mut out = Vec::with_capacity(3);
        for (&j, &qi) in self.arm.iter().zip(q.iter()) {
            let lim = g.joint_by_id(j).limits;
            if !qi.is_finite() || qi < lim.lower - tol || qi > lim.upper + tol {
                return None;
            }
            out.push(qi.clamp(lim.lower, lim.upper));
        }
        Some(out)
    }
}

/// Commands accepted by the simulation, from plans or from the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SimCommand {
    /// Base-frame velocity, valid for [`crate::controllers::BASE_COMMAND_TIMEOUT`].
    BaseVelocity { vx: f64, vy: f64, wz: f64 },
    /// Drive straight to a world-frame base pose at the configured speed limits.
    BaseGoal { x: f64, y: f64, theta: f64 },
    JointTargets { names: Vec<String>, positions: Vec<f64> },
    JointMode { joint: String, mode: JointMode },
    Trajectory { trajectory: JointTrajectory },
    PointHead { target: [f64; 3] },
    Gripper { width: f64 },
    /// Overwrite joint positions directly (belief mode).
    SetJointPositions { names: Vec<String>, positions: Vec<f64> },
    /// Move a model to an observed world pose, spawning it from another model of the
    /// same class if it does not exist yet (belief mode).
    ObjectDetected {
        name: String,
        #[serde(default)]
        class: Option<String>,
        pose: Pose,
    },
    /// Attach a model to the tool (belief mode).
    Grasped { object: String },
    /// Add a free single-link model built from boxes, cylinders and spheres.
    SpawnModel {
        name: String,
        pose: Pose,
        shapes: Vec<SpawnShape>,
        #[serde(default)]
        classes: Vec<String>,
    },
    /// Detach a held model and settle it (belief mode).
    Released { object: String },
}

/// One collision shape of a spawned model, posed in the model frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnShape {
    pub pose: Pose,
    pub shape: Shape,
}

/// Thread-safe FIFO drained at the start of every tick.
#[derive(Debug, Clone, Default)]
pub struct CommandQueue(Arc<Mutex<VecDeque<SimCommand>>>);

impl CommandQueue {
    pub fn push(&self, cmd: SimCommand) {
        self.0.lock().expect("command queue poisoned").push_back(cmd);
    }

    pub fn drain(&self) -> Vec<SimCommand> {
        self.0.lock().expect("command queue poisoned").drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("command queue poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Simulation {
    graph: SceneGraph,
    config: TickConfig,
    ticks: u64,
    robot: Option<Robot>,
    base_cmd: Option<BaseCommand>,
    base_goal: Option<Pose2d>,
    /// Twist applied on the last tick.
    base_twist: Twist2d,
    modes: ControllerMode,
    targets: BTreeMap<JointId, f64>,
    trajectory: Option<(JointTrajectory, f64)>,
    gripper: Option<GripperState>,
    held: Option<NodeId>,
    queue: CommandQueue,
    recorder: Recorder,
    contacts: BTreeSet<(NodeId, NodeId)>,
    sample_every: u64,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("ticks", &self.ticks)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Simulation {
    pub fn new(
        graph: SceneGraph,
        config: TickConfig,
        robot: Option<RobotConfig>,
        recorder: Recorder,
    ) -> Result<Self, SimError> {
        if !(config.dt > 0.0 && config.dt.is_finite()) {
            return Err(SimError::InvalidConfig(format!("dt must be positive, got {}", config.dt)));
        }
        let robot = robot.map(|r| Robot::resolve(&graph, r)).transpose()?;
        let gripper = robot.as_ref().map(|r| {
            let j = graph.joint_by_id(r.gripper);
            GripperState::new(j.position, j.limits.upper, config.gripper_velocity)
        });
        let sample_every = ((crate::neem::TRANSFORM_PERIOD / config.dt).round() as u64).max(1);
        Ok(Self {
            graph,
            config,
            ticks: 0,
            robot,
            base_cmd: None,
            base_goal: None,
            base_twist: Twist2d::default(),
            modes: ControllerMode::default(),
            targets: BTreeMap::new(),
            trajectory: None,
            gripper,
            held: None,
            queue: CommandQueue::default(),
            recorder,
            contacts: BTreeSet::new(),
            sample_every,
        })
    }

    /// Simulation recording into memory under a throwaway header.
    pub fn in_memory(graph: SceneGraph, robot: Option<RobotConfig>) -> Result<Self, SimError> {
        let config = TickConfig::default();
        let header = EpisodeHeader {
            format: crate::neem::FORMAT.into(),
            episode_id: "live".into(),
            world_hash: String::new(),
            seed: 0,
            dt: config.dt,
        };
        Self::new(graph, config, robot, Recorder::in_memory(header))
    }

    pub fn graph(&self) -> &SceneGraph {
        &self.graph
    }

    /// Direct scene access for setup code; controller state is not updated.
    pub fn graph_mut(&mut self) -> &mut SceneGraph {
        &mut self.graph
    }

    pub fn config(&self) -> &TickConfig {
        &self.config
    }

    pub fn robot(&self) -> Option<&Robot> {
        self.robot.as_ref()
    }

    pub fn robot_required(&self) -> Result<&Robot, SimError> {
        self.robot.as_ref().ok_or(SimError::NoRobot)
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn sim_time(&self) -> f64 {
        self.ticks as f64 * self.config.dt
    }

    pub fn queue(&self) -> CommandQueue {
        self.queue.clone()
    }

    pub fn push(&self, cmd: SimCommand) {
        self.queue.push(cmd);
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    pub fn recorder_mut(&mut self) -> &mut Recorder {
        &mut self.recorder
    }

    pub fn record(&mut self, draft: EventDraft) -> Result<&NeemEvent, SimError> {
        let t = self.sim_time();
        Ok(self.recorder.record(draft, t)?)
    }

    pub fn held(&self) -> Option<NodeId> {
        self.held
    }

    pub fn gripper(&self) -> Option<&GripperState> {
        self.gripper.as_ref()
    }

    pub fn base_pose(&self) -> Option<Pose2d> {
        self.robot.as_ref().map(|r| r.base_pose(&self.graph))
    }

    /// Teleports the base; clears any base command or goal.
    pub fn set_base_pose(&mut self, p: Pose2d) -> Result<(), SimError> {
        let model = self.robot_required()?.model;
        self.graph.set_local_pose(model, Pose::from_pose2d(p))?;
        self.base_cmd = None;
        self.base_goal = None;
        Ok(())
    }

    /// Body-frame twist the base moved with on the last tick.
    pub fn base_twist(&self) -> Twist2d {
        self.base_twist
    }

    pub fn base_idle(&self) -> bool {
        self.base_goal.is_none()
    }

    /// True when every joint target and trajectory has been reached and the gripper is
    /// not moving.
    pub fn joints_idle(&self) -> bool {
        self.trajectory.is_none()
            && self
                .targets
                .iter()
                .all(|(&j, &t)| self.graph.joint_by_id(j).position == t)
            && self.gripper.is_none_or(|g| g.is_idle())
    }

    pub fn snapshot(&self) -> SceneSnapshot {
        self.graph.snapshot(self.sim_time())
    }

    /// Advances one tick and returns the resulting snapshot.
    pub fn tick(&mut self) -> Result<SceneSnapshot, SimError> {
        self.step()?;
        Ok(self.snapshot())
    }

    /// Advances one tick.
    pub fn step(&mut self) -> Result<(), SimError> {
        self.ticks += 1;
        for cmd in self.queue.drain() {
            self.apply_now(cmd)?;
        }
        self.step_base_controller()?;
        self.step_joints();
        self.step_gripper()?;
        self.update_contacts()?;
        if self.ticks.is_multiple_of(self.sample_every) {
            self.sample_transforms()?;
        }
        Ok(())
    }

    /// Steps until `done` holds or `max_ticks` elapse; returns whether `done` held.
    pub fn run_until(
        &mut self,
        max_ticks: u64,
        mut done: impl FnMut(&Simulation) -> bool,
    ) -> Result<bool, SimError> {
        for _ in 0..max_ticks {
            if done(self) {
                return Ok(true);
            }
            self.step()?;
        }
        Ok(done(self))
    }

    /// Applies `cmd` immediately instead of at the next tick and records it. Rejections
    /// come back as a failure outcome; only recording errors are errors.
    pub fn apply_now(&mut self, cmd: SimCommand) -> Result<Outcome, SimError> {
        let payload = json!({ "tick": self.ticks, "command": &cmd });
        let outcome = match self.apply_inner(cmd) {
            Ok(()) => Outcome::Success,
            Err(SimError::Neem(e)) => return Err(SimError::Neem(e)),
            Err(e) => {
                tracing::warn!(error = %e, "command rejected");
                Outcome::Failure(e.to_string())
            }
        };
        self.record(
            EventDraft::new(EventKind::CommandIssued, "controller")
                .outcome(outcome.clone())
                .payload(payload),
        )?;
        Ok(outcome)
    }

    fn apply_inner(&mut self, cmd: SimCommand) -> Result<(), SimError> {
        let now = self.sim_time();
        match cmd {
            SimCommand::BaseVelocity { vx, vy, wz } => {
                self.robot_required()?;
                check_finite(&[vx, vy, wz])?;
                self.base_goal = None;
                self.base_cmd = Some(BaseCommand::issued_at(Twist2d { vx, vy, wz }, now));
            }
            SimCommand::BaseGoal { x, y, theta } => {
                self.robot_required()?;
                check_finite(&[x, y, theta])?;
                self.base_cmd = None;
                self.base_goal = Some(Pose2d::new(x, y, crate::geometry::wrap_angle(theta)));
            }
            SimCommand::JointTargets { names, positions } => {
                let ids = self.joint_ids(&names, &positions)?;
                self.trajectory = None;
                for (id, q) in ids.into_iter().zip(positions) {
                    let j = self.graph.joint_by_id(id);
                    self.targets.insert(id, j.admissible(q));
                }
            }
            SimCommand::JointMode { joint, mode } => {
                self.graph.joint_id(&joint)?;
                self.modes.set(joint, mode);
            }
            SimCommand::Trajectory { trajectory } => {
                trajectory.validate()?;
                for n in &trajectory.joint_names {
                    let id = self.graph.joint_id(n)?;
                    self.targets.remove(&id);
                }
                self.trajectory = Some((trajectory, now));
            }
            SimCommand::PointHead { target } => {
                check_finite(&target)?;
                let robot = self.robot_required()?;
                let (pan, tilt) = (robot.pan, robot.tilt);
                let base = head_base_pose(&self.graph, &robot.config.pan_joint)?;
                let aim = point_head(&base, &Vec3::from(target))?;
                let pan_q = aim.pan.clamp(HEAD_PAN_LIMITS.0, HEAD_PAN_LIMITS.1);
                let tilt_q = aim.tilt.clamp(HEAD_TILT_LIMITS.0, HEAD_TILT_LIMITS.1);
                let pan_q = self.graph.joint_by_id(pan).admissible(pan_q);
                let tilt_q = self.graph.joint_by_id(tilt).admissible(tilt_q);
                self.targets.insert(pan, pan_q);
                self.targets.insert(tilt, tilt_q);
            }
            SimCommand::Gripper { width } => {
                check_finite(&[width])?;
                self.gripper.as_mut().ok_or(SimError::NoRobot)?.command(width);
            }
            SimCommand::SetJointPositions { names, positions } => {
                let ids = self.joint_ids(&names, &positions)?;
                for (id, q) in ids.into_iter().zip(positions) {
                    let stored = self.graph.set_joint_position_by_id(id, q);
                    self.graph.set_joint_velocity_by_id(id, 0.0);
                    self.targets.remove(&id);
                    if Some(id) == self.robot.as_ref().map(|r| r.gripper) {
                        if let Some(g) = &mut self.gripper {
                            g.width = stored;
                            g.target = stored;
                        }
                    }
                }
            }
            SimCommand::ObjectDetected { name, class, pose } => {
                if !pose.is_finite() {
                    return Err(SimError::InvalidConfig("non-finite pose".into()));
                }
                match self.graph.model_node(&name) {
                    Some(node) => self.graph.set_world_pose(node, pose)?,
                    None => {
                        let class = class.ok_or_else(|| SceneError::UnknownName(name.clone()))?;
                        let shapes = self.class_template(&class)?;
                        self.spawn(name, pose, &shapes, vec![class])?;
                    }
                }
            }
            SimCommand::SpawnModel {
                name,
                pose,
                shapes,
                classes,
            } => {
                if !pose.is_finite() || shapes.iter().any(|s| !s.pose.is_finite()) {
                    return Err(SimError::InvalidConfig("non-finite pose".into()));
                }
                self.spawn(name, pose, &shapes, classes)?;
            }
            SimCommand::Grasped { object } => {
                let node = self
                    .graph
                    .model_node(&object)
                    .ok_or(SceneError::UnknownName(object))?;
                let tool = self.robot_required()?.tool;
                self.attach_held(node, tool)?;
            }
            SimCommand::Released { object } => {
                let node = self
                    .graph
                    .model_node(&object)
                    .ok_or(SceneError::UnknownName(object))?;
                self.release_held(node)?;
            }
        }
        Ok(())
    }

    /// Shapes of the first model tagged with `class`, relative to its model frame.
    pub fn class_template(&self, class: &str) -> Result<Vec<SpawnShape>, SimError> {
        let model = self
            .graph
            .nodes_with_class(class)
            .into_iter()
            .find(|&n| self.graph.model_node(&self.graph.nodes()[n].name) == Some(n))
            .ok_or_else(|| SimError::UnknownClass(class.to_string()))?;
        let inv = self.graph.world_pose(model)?.inverse();
        let poses = self.graph.world_poses();
        let sub = self.graph.subtree(model);
        Ok(self
            .graph
            .shape_instances(&poses)
            .into_iter()
            .filter(|s| sub.contains(&s.node))
            .map(|s| SpawnShape {
                pose: inv.compose(&s.pose),
                shape: s.shape,
            })
            .collect())
    }

    fn spawn(
        &mut self,
        name: String,
        pose: Pose,
        shapes: &[SpawnShape],
        classes: Vec<String>,
    ) -> Result<NodeId, SimError> {
        if shapes.is_empty() {
            return Err(SimError::InvalidConfig("a spawned model needs at least one shape".into()));
        }
        if let Some(bad) = shapes.iter().find(|s| !s.shape.dimensions_positive()) {
            return Err(SimError::InvalidConfig(format!("non-positive dimension in {:?}", bad.shape)));
        }
        let sdf_pose = |p: &Pose| {
            let (r, pi, y) = p.rpy();
            SdfPose::new(p.xyz(), [r, pi, y])
        };
        let spec = ModelSpec {
            name: name.clone(),
            links: vec![LinkSpec {
                name: "link".into(),
                pose: SdfPose::default(),
                collisions: shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| CollisionSpec {
                        name: format!("shape{i}"),
                        pose: sdf_pose(&s.pose),
                        shape: s.shape,
                    })
                    .collect(),
                mass: 1.0,
            }],
            joints: Vec::new(),
            root_pose: sdf_pose(&pose),
            is_static: false,
        };
        let node = self.graph.add_model(&spec)?;
        if !classes.is_empty() {
            self.graph.add_tag(
                node,
                SemanticTag {
                    name,
                    classes: classes.into_iter().collect(),
                    stores: Default::default(),
                },
            );
        }
        Ok(node)
    }

    fn joint_ids(&self, names: &[String], positions: &[f64]) -> Result<Vec<JointId>, SimError> {
        if names.len() != positions.len() {
            return Err(ControlError::InvalidTrajectory(format!(
                "{} names but {} positions",
                names.len(),
                positions.len()
            ))
            .into());
        }
        check_finite(positions)?;
        Ok(names
            .iter()
            .map(|n| self.graph.joint_id(n))
            .collect::<Result<_, _>>()?)
    }

    fn step_base_controller(&mut self) -> Result<(), SimError> {
        let Some(robot) = &self.robot else {
            return Ok(());
        };
        let model = robot.model;
        let now = self.sim_time();
        let dt = self.config.dt;
        let pose = robot.base_pose(&self.graph);
        self.base_twist = Twist2d::default();
        if let Some(goal) = self.base_goal {
            let close = (goal.x - pose.x).hypot(goal.y - pose.y) < 1e-9
                && crate::geometry::wrap_angle(goal.theta - pose.theta).abs() < 1e-9;
            if close {
                // Snap away rounding residue and stop.
                let z = self.graph.nodes()[model].local_pose.position.z;
                let mut at = Pose::from_pose2d(goal);
                at.position.z = z;
                self.graph.set_local_pose(model, at)?;
                self.base_goal = None;
                return Ok(());
            }
        }
        let twist = if let Some(goal) = self.base_goal {
            goal_twist(pose, goal, self.config.base_max_linear, self.config.base_max_angular, dt)
        } else if let Some(cmd) = self.base_cmd {
            cmd.twist_at(now)
        } else {
            Twist2d::default()
        };
        if twist == Twist2d::default() {
            return Ok(());
        }
        self.base_twist = twist;
        let z = self.graph.nodes()[model].local_pose.position.z;
        let mut next = Pose::from_pose2d(step_base(pose, twist, dt));
        next.position.z = z;
        self.graph.set_local_pose(model, next)?;
        Ok(())
    }

    fn step_joints(&mut self) {
        let dt = self.config.dt;
        let mut setpoints: Vec<(JointId, f64)> = self.targets.iter().map(|(&j, &q)| (j, q)).collect();
        if let Some((traj, start)) = &self.trajectory {
            // Validated on arrival, so sampling cannot fail.
            if let Ok(sample) = step_trajectory(traj, self.sim_time() - start) {
                for (name, q) in traj.joint_names.iter().zip(&sample.positions) {
                    if let Ok(id) = self.graph.joint_id(name) {
                        setpoints.push((id, *q));
                    }
                }
                if sample.done {
                    for (name, q) in traj.joint_names.iter().zip(sample.positions) {
                        if let Ok(id) = self.graph.joint_id(name) {
                            let q = self.graph.joint_by_id(id).admissible(q);
                            self.targets.insert(id, q);
                        }
                    }
                    self.trajectory = None;
                }
            }
        }
        for (id, target) in setpoints {
            let j = self.graph.joint_by_id(id);
            let (q, goal) = (j.position, j.admissible(target));
            let next = track(q, goal, j.limits.max_velocity, dt, self.modes.mode(&j.name));
            let stored = self.graph.set_joint_position_by_id(id, next);
            self.graph.set_joint_velocity_by_id(id, (stored - q) / dt);
        }
    }

    fn step_gripper(&mut self) -> Result<(), SimError> {
        let (Some(robot), Some(gripper)) = (&self.robot, &mut self.gripper) else {
            return Ok(());
        };
        let (joint, tool) = (robot.gripper, robot.tool);
        let closing = gripper.is_closing();
        if closing && self.held.is_none() && gripper.blocked_at.is_none() {
            let tool_pose = self.graph.world_pose(tool)?;
            if let Some(obj) = grasp_check(&self.graph, &tool_pose, true) {
                let ext = self.graph.subtree_aabb(obj).map(|b| b.extents()).unwrap_or_default();
                let width = ext.x.min(ext.y).min(gripper.width);
                if width > gripper.target {
                    gripper.blocked_at = Some(width);
                }
            }
        }
        let opening = gripper.target > gripper.width;
        gripper.step(self.config.dt);
        let reached_block = gripper.blocked_at.is_some_and(|b| gripper.width <= b);
        let width = gripper.width;
        self.graph.set_joint_position_by_id(joint, width);
        if reached_block && self.held.is_none() {
            let tool_pose = self.graph.world_pose(tool)?;
            if let Some(obj) = grasp_check(&self.graph, &tool_pose, true) {
                self.attach_held(obj, tool)?;
            }
        }
        if opening {
            if let Some(obj) = self.held {
                self.release_held(obj)?;
            }
        }
        Ok(())
    }

    fn attach_held(&mut self, obj: NodeId, tool: NodeId) -> Result<(), SimError> {
        grasp(&mut self.graph, obj, tool)?;
        self.held = Some(obj);
        let name = self.graph.nodes()[obj].name.clone();
        let tool_name = self.graph.nodes()[tool].name.clone();
        self.record(
            EventDraft::new(EventKind::Grasp, "gripper")
                .participants([name, tool_name])
                .outcome(Outcome::Success),
        )?;
        Ok(())
    }

    fn release_held(&mut self, obj: NodeId) -> Result<(), SimError> {
        let settled = release(&mut self.graph, obj)?;
        if self.held == Some(obj) {
            self.held = None;
        }
        if let Some(g) = &mut self.gripper {
            g.blocked_at = None;
        }
        let name = self.graph.nodes()[obj].name.clone();
        self.record(
            EventDraft::new(EventKind::Release, "gripper")
                .participants([name.clone()])
                .outcome(Outcome::Success),
        )?;
        let supporter = match settled.supporter {
            crate::scene::Supporter::Ground => "ground".to_string(),
            crate::scene::Supporter::Node(n) => self.graph.nodes()[n].name.clone(),
        };
        self.record(
            EventDraft::new(EventKind::Settle, "physics")
                .participants([name, supporter])
                .outcome(Outcome::Success)
                .payload(json!({ "pose": settled.final_pose, "drop": settled.drop })),
        )?;
        Ok(())
    }

    fn update_contacts(&mut self) -> Result<(), SimError> {
        let report = check_collisions(&self.graph.snapshot(self.sim_time()));
        let now: BTreeSet<(NodeId, NodeId)> = report.pairs.iter().map(|p| (p.a, p.b)).collect();
        for p in &report.pairs {
            if self.contacts.contains(&(p.a, p.b)) {
                continue;
            }
            let (a, b) = (self.graph.nodes()[p.a].name.clone(), self.graph.nodes()[p.b].name.clone());
            self.record(
                EventDraft::new(EventKind::Collision, "physics")
                    .participants([a, b])
                    .payload(json!({ "depth": p.depth })),
            )?;
        }
        self.contacts = now;
        Ok(())
    }

    fn sample_transforms(&mut self) -> Result<(), SimError> {
        let t = self.sim_time();
        let mut nodes: Vec<NodeId> = self.graph.model_names().map(|(_, n)| n).collect();
        nodes.sort_unstable();
        if let Some(r) = &self.robot {
            nodes.push(r.tool);
        }
        for n in nodes {
            let pose = self.graph.world_pose(n)?;
            let node = self.graph.nodes()[n].name.clone();
            self.recorder.sample(TransformSample {
                sim_time: t,
                node,
                world_pose: pose,
            })?;
        }
        Ok(())
    }
}

fn check_finite(values: &[f64]) -> Result<(), SimError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SimError::InvalidConfig("non-finite command value".into()))
    }
}
