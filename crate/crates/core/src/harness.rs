//! Plan execution in the simulated world, the fetch-with-retries routine, and the
//! retry experiment built on top of it.

use crate::controllers::JointTrajectory;
use crate::geometry::{wrap_angle, Pose2d, Vec3};
use crate::learning::{train_from_neems, Gaussian, LearnError, ModelFile};
use crate::neem::{
    reasons, Episode, EpisodeHeader, EventDraft, EventKind, NeemError, Outcome, Recorder, FORMAT,
};
use crate::physics::{footprint_collides, push_articulation, settle, PhysicsError};
use crate::scene::{build_scene, NodeId, Relation, SceneError, SceneGraph, Supporter};
use crate::sdf::{parse_sdf, parse_semantics, SdfError, SemanticTag, SemanticsError, WorldSpec};
use crate::sensors::{footprint_at, trigger_camera};
use crate::sim::{RobotConfig, SimCommand, SimError, Simulation, TickConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAX_RETRIES: u32 = 25;
/// Upper bound on ticks spent waiting for any single motion to finish.
pub const MOTION_TIMEOUT_TICKS: u64 = 6000;
/// Clearance between a released object and the surface below it.
const PLACE_CLEARANCE: f64 = 0.02;
const ACTOR: &str = "robot";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Sdf(#[from] SdfError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Neem(#[from] NeemError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("invalid plan: {0}")]
    PlanValidation(String),
    #[error("baseline mean is zero")]
    ZeroBaseline,
    #[error("experiment needs at least one episode")]
    NoEpisodes,
    #[error("only {got} of {wanted} episodes succeeded after {tried} attempts")]
    InsufficientSuccesses { wanted: usize, got: usize, tried: usize },
}

/// A parsed world description plus its semantic tags.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// SHA-256 over the SDF text and the semantics text.
    pub hash: String,
}

impl World {
    pub fn from_text(sdf: &str, semantics: Option<&str>) -> Result<Self, HarnessError> {
        let mut spec = parse_sdf(sdf)?.world;
        if let Some(text) = semantics {
            spec.semantics = parse_semantics(text, &spec)?;
        }
        let mut h = Sha256::new();
        h.update(sdf.as_bytes());
        h.update([0u8]);
        h.update(semantics.unwrap_or_default().as_bytes());
        let hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { spec, hash })
    }

    /// Reads an SDF file and, if present, the `<stem>.semantics.json` sidecar next to it.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::load_with(path, None)
    }

    pub fn load_with(path: &Path, semantics: Option<&Path>) -> Result<Self, HarnessError> {
        let sdf = std::fs::read_to_string(path)?;
        let sidecar = match semantics {
            Some(p) => Some(p.to_path_buf()),
            None => Some(sidecar_path(path)).filter(|p| p.exists()),
        };
        let sem = sidecar.map(std::fs::read_to_string).transpose()?;
        Self::from_text(&sdf, sem.as_deref())
    }

    /// The bundled kitchen with fridge, milk, counter and robot.
    pub fn kitchen() -> Self {
        Self::from_text(crate::fixtures::KITCHEN_SDF, Some(crate::fixtures::KITCHEN_SEMANTICS))
            .expect("bundled kitchen parses")
    }

    pub fn semantics(&self) -> &[SemanticTag] {
        &self.spec.semantics
    }

    pub fn build(&self) -> Result<SceneGraph, HarnessError> {
        Ok(build_scene(&self.spec)?)
    }

    /// A fresh simulation of this world with loose objects resting on their supports and
    /// the robot, if the world has one, under control.
    pub fn simulation(&self, seed: u64, episode_id: &str, sink: &NeemSink) -> Result<Simulation, HarnessError> {
        let config = TickConfig::default();
        let header = EpisodeHeader {
            format: FORMAT.into(),
            episode_id: episode_id.into(),
            world_hash: self.hash.clone(),
            seed,
            dt: config.dt,
        };
        let recorder = match sink {
            NeemSink::Memory => Recorder::in_memory(header),
            NeemSink::Dir(dir) => Recorder::to_dir(header, dir, wall_clock_now())?,
        };
        let mut g = self.build()?;
        rest_objects_on_supports(&mut g)?;
        let robot = g.model_node(&RobotConfig::default().model).map(|_| RobotConfig::default());
        Ok(Simulation::new(g, config, robot, recorder)?)
    }
}

pub fn sidecar_path(world: &Path) -> PathBuf {
    let stem = world.file_stem().and_then(|s| s.to_str()).unwrap_or("world");
    world.with_file_name(format!("{stem}.semantics.json"))
}

/// Where base poses for a fetch attempt come from.
#[derive(Debug, Clone, PartialEq)]
pub enum BasePoseSampler {
    /// Uniform angle and uniform radius in `[r_min, r_max]` around the object.
    UniformAnnulus { r_min: f64, r_max: f64 },
    /// Learned distribution over the base x/y.
    Gaussian(Gaussian),
    Fixed(Pose2d),
}

pub const ANNULUS_R_MIN: f64 = 0.4;
pub const ANNULUS_R_MAX: f64 = 1.2;

impl BasePoseSampler {
    pub fn uniform() -> Self {
        Self::UniformAnnulus {
            r_min: ANNULUS_R_MIN,
            r_max: ANNULUS_R_MAX,
        }
    }

    /// Draws a base pose; positional samplers face the base toward `target`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, target: (f64, f64)) -> Pose2d {
        let (x, y) = match self {
            Self::Fixed(p) => return *p,
            Self::UniformAnnulus { r_min, r_max } => {
                let r = rng.random_range(*r_min..=*r_max);
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                (target.0 + r * a.cos(), target.1 + r * a.sin())
            }
            Self::Gaussian(g) => {
                let v = g.sample(rng);
                (v[0], v[1])
            }
        };
        Pose2d::new(x, y, (target.1 - y).atan2(target.0 - x))
    }

    pub fn label(&self) -> String {
        match self {
            Self::UniformAnnulus { .. } => "uniform".into(),
            Self::Gaussian(_) => "model".into(),
            Self::Fixed(_) => "fixed".into(),
        }
    }
}

/// Sampler as written in plan files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerSpec {
    Uniform {
        #[serde(default = "default_r_min")]
        r_min: f64,
        #[serde(default = "default_r_max")]
        r_max: f64,
    },
    /// A model file written by `learn`; relative paths resolve against the plan file.
    Model { path: PathBuf },
    Fixed { x: f64, y: f64, theta: f64 },
}

fn default_r_min() -> f64 {
    ANNULUS_R_MIN
}

fn default_r_max() -> f64 {
    ANNULUS_R_MAX
}

impl SamplerSpec {
    pub fn resolve(&self, base_dir: &Path) -> Result<BasePoseSampler, HarnessError> {
        Ok(match self {
            Self::Uniform { r_min, r_max } => {
                if !(r_min.is_finite() && r_max.is_finite() && 0.0 <= *r_min && r_min <= r_max) {
                    return Err(HarnessError::PlanValidation(format!(
                        "bad annulus [{r_min}, {r_max}]"
                    )));
                }
                BasePoseSampler::UniformAnnulus {
                    r_min: *r_min,
                    r_max: *r_max,
                }
            }
            Self::Model { path } => {
                let g = ModelFile::load(&base_dir.join(path))?.gaussian()?;
                if g.dim() != 2 {
                    return Err(HarnessError::PlanValidation(format!(
                        "base pose model must be 2-dimensional, got {}",
                        g.dim()
                    )));
                }
                BasePoseSampler::Gaussian(g)
            }
            Self::Fixed { x, y, theta } => BasePoseSampler::Fixed(Pose2d::new(*x, *y, *theta)),
        })
    }
}

/// One entry of a plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PlanStep {
    MoveBaseTo {
        x: f64,
        y: f64,
        theta: f64,
    },
    MoveJoints {
        #[serde(default)]
        targets: BTreeMap<String, f64>,
        #[serde(default)]
        trajectory: Option<JointTrajectory>,
    },
    PointHead {
        target: [f64; 3],
    },
    OpenContainer {
        joint: String,
        q: f64,
    },
    Perceive {
        object: String,
    },
    Grasp {
        object: String,
    },
    Release,
    SampleBasePose {
        object: String,
        sampler: SamplerSpec,
    },
    Deliver {
        target: [f64; 3],
    },
    /// The full fetch loop: sample, navigate, perceive, grasp, with retries.
    Fetch {
        object: String,
        sampler: SamplerSpec,
        #[serde(default = "default_max_retries")]
        max_retries: u32,
    },
}

fn default_max_retries() -> u32 {
    MAX_RETRIES
}

impl PlanStep {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MoveBaseTo { .. } => "move_base_to",
            Self::MoveJoints { .. } => "move_joints",
            Self::PointHead { .. } => "point_head",
            Self::OpenContainer { .. } => "open_container",
            Self::Perceive { .. } => "perceive",
            Self::Grasp { .. } => "grasp",
            Self::Release => "release",
            Self::SampleBasePose { .. } => "sample_base_pose",
            Self::Deliver { .. } => "deliver",
            Self::Fetch { .. } => "fetch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<PlanStep>,
}

impl Plan {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::PlanValidation(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks that every name in the plan exists in `g` and every number is finite.
    pub fn validate(&self, g: &SceneGraph) -> Result<(), HarnessError> {
        let bad = |i: usize, msg: String| HarnessError::PlanValidation(format!("step {i}: {msg}"));
        let model = |i: usize, name: &str| {
            g.model_node(name)
                .map(|_| ())
                .ok_or_else(|| bad(i, format!("unknown object '{name}'")))
        };
        let finite = |i: usize, v: &[f64]| {
            if v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(bad(i, "non-finite number".into()))
            }
        };
        for (i, step) in self.steps.iter().enumerate() {
            match step {
                PlanStep::MoveBaseTo { x, y, theta } => finite(i, &[*x, *y, *theta])?,
                PlanStep::MoveJoints { targets, trajectory } => {
                    if targets.is_empty() == trajectory.is_none() {
                        return Err(bad(i, "move_joints needs exactly one of targets or trajectory".into()));
                    }
                    for (name, q) in targets {
                        g.joint_id(name).map_err(|e| bad(i, e.to_string()))?;
                        finite(i, &[*q])?;
                    }
                    if let Some(t) = trajectory {
                        t.validate().map_err(|e| bad(i, e.to_string()))?;
                        for name in &t.joint_names {
                            g.joint_id(name).map_err(|e| bad(i, e.to_string()))?;
                        }
                    }
                }
                PlanStep::PointHead { target } | PlanStep::Deliver { target } => finite(i, target)?,
                PlanStep::OpenContainer { joint, q } => {
                    g.joint_id(joint).map_err(|e| bad(i, e.to_string()))?;
                    finite(i, &[*q])?;
                }
                PlanStep::Perceive { object } | PlanStep::Grasp { object } => model(i, object)?,
                PlanStep::Release => {}
                PlanStep::SampleBasePose { object, .. } | PlanStep::Fetch { object, .. } => {
                    model(i, object)?
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: String,
    pub outcome: Outcome,
    pub retries: u32,
    pub sim_duration: f64,
}

/// Result of one fetch loop.
#[derive(Debug, Clone, PartialEq)]
pub struct FetchResult {
    pub outcome: Outcome,
    pub retries: u32,
    /// Base pose of the successful attempt.
    pub base_pose: Option<Pose2d>,
}

/// Where an episode's NEEM goes.
#[derive(Debug, Clone, PartialEq)]
pub enum NeemSink {
    Memory,
    Dir(PathBuf),
}

/// Executes plan steps against a simulation and records every step as an action.
pub struct Runner {
    sim: Simulation,
    rng: ChaCha8Rng,
    next_token: u64,
    /// Object seen by the latest successful perception, cleared by anything that could
    /// invalidate it.
    perceived: Option<String>,
    retries: u32,
    base_dir: PathBuf,
}

impl Runner {
    pub fn new(world: &World, seed: u64, episode_id: &str, sink: &NeemSink) -> Result<Self, HarnessError> {
        let sim = world.simulation(seed, episode_id, sink)?;
        Ok(Self {
            sim,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_token: 1,
            perceived: None,
            retries: 0,
            base_dir: PathBuf::from("."),
        })
    }

    /// Directory that relative model paths in plans resolve against.
    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulation {
        &mut self.sim
    }

    pub fn retries(&self) -> u32 {
        self.retries
    }

    fn begin(&mut self, name: &str, participants: &[&str], payload: Value) -> Result<u64, HarnessError> {
        let token = self.next_token;
        self.next_token += 1;
        self.sim.record(
            EventDraft::new(EventKind::ActionStart, ACTOR)
                .participants(participants.iter().copied())
                .action(name, token)
                .payload(payload),
        )?;
        Ok(token)
    }

    fn end(
        &mut self,
        name: &str,
        token: u64,
        participants: &[&str],
        outcome: Outcome,
        payload: Value,
    ) -> Result<Outcome, HarnessError> {
        self.sim.record(
            EventDraft::new(EventKind::ActionEnd, ACTOR)
                .participants(participants.iter().copied())
                .action(name, token)
                .outcome(outcome.clone())
                .payload(payload),
        )?;
        Ok(outcome)
    }

    /// Wraps `body` in an ActionStart/ActionEnd pair.
    fn action(
        &mut self,
        name: &str,
        participants: &[&str],
        payload: Value,
        body: impl FnOnce(&mut Self) -> Result<Outcome, HarnessError>,
    ) -> Result<Outcome, HarnessError> {
        let token = self.begin(name, participants, payload.clone())?;
        let outcome = body(self)?;
        self.end(name, token, participants, outcome, payload)
    }

    fn wait(&mut self, idle: impl Fn(&Simulation) -> bool) -> Result<bool, HarnessError> {
        Ok(self.sim.run_until(MOTION_TIMEOUT_TICKS, idle)?)
    }

    fn object_center(&self, object: &str) -> Result<Vec3, HarnessError> {
        let node = self.model(object)?;
        self.sim
            .graph()
            .subtree_aabb(node)
            .map(|b| b.center())
            .ok_or(HarnessError::Physics(PhysicsError::NoGeometry(node)))
    }

    fn model(&self, name: &str) -> Result<NodeId, HarnessError> {
        self.sim
            .graph()
            .model_node(name)
            .ok_or_else(|| SceneError::UnknownName(name.to_string()).into())
    }

    fn drive(&mut self, goal: Pose2d) -> Result<Outcome, HarnessError> {
        self.perceived = None;
        self.sim.push(SimCommand::BaseGoal {
            x: goal.x,
            y: goal.y,
            theta: goal.theta,
        });
        self.sim.step()?;
        Ok(if self.wait(Simulation::base_idle)? {
            Outcome::Success
        } else {
            Outcome::Failure(reasons::NAVIGATION_TIMEOUT.into())
        })
    }

    pub fn move_base_to(&mut self, goal: Pose2d) -> Result<Outcome, HarnessError> {
        let payload = json!({ "base_pose": goal });
        self.action("move_base_to", &[], payload, |r| r.drive(goal))
    }

    fn joints_to(&mut self, names: Vec<String>, positions: Vec<f64>) -> Result<bool, HarnessError> {
        self.sim.push(SimCommand::JointTargets { names, positions });
        self.sim.step()?;
        self.wait(Simulation::joints_idle)
    }

    pub fn move_joints(
        &mut self,
        targets: &BTreeMap<String, f64>,
        trajectory: Option<&JointTrajectory>,
    ) -> Result<Outcome, HarnessError> {
        let payload = json!({ "targets": targets, "trajectory": trajectory });
        self.action("move_joints", &[], payload, |r| {
            r.perceived = None;
            let done = match trajectory {
                Some(t) => {
                    r.sim.push(SimCommand::Trajectory { trajectory: t.clone() });
                    r.sim.step()?;
                    r.wait(Simulation::joints_idle)?
                }
                None => r.joints_to(targets.keys().cloned().collect(), targets.values().copied().collect())?,
            };
            Ok(if done {
                Outcome::Success
            } else {
                Outcome::Failure(reasons::NAVIGATION_TIMEOUT.into())
            })
        })
    }

    fn aim(&mut self, target: Vec3) -> Result<Outcome, HarnessError> {
        self.sim.push(SimCommand::PointHead {
            target: [target.x, target.y, target.z],
        });
        self.sim.step()?;
        let rejected = self
            .sim
            .recorder()
            .events()
            .last()
            .and_then(|e| e.outcome.clone())
            .filter(|o| !o.is_success());
        if let Some(o) = rejected {
            return Ok(o);
        }
        Ok(if self.wait(Simulation::joints_idle)? {
            Outcome::Success
        } else {
            Outcome::Failure(reasons::NAVIGATION_TIMEOUT.into())
        })
    }

    pub fn point_head(&mut self, target: [f64; 3]) -> Result<Outcome, HarnessError> {
        let payload = json!({ "target": target });
        self.action("point_head", &[], payload, |r| r.aim(Vec3::from(target)))
    }

    /// Drives a container joint toward `q`, stopping at the first contact.
    pub fn open_container(&mut self, joint: &str, q: f64) -> Result<Outcome, HarnessError> {
        let container = self.sim.graph().joint(joint)?.model.clone();
        let payload = json!({ "joint": joint, "q": q });
        self.action("open_container", &[container.as_str()], payload, |r| {
            let dt = r.sim.config().dt;
            let pushed = push_articulation(r.sim.graph_mut(), joint, q, dt)?;
            for _ in 0..pushed.steps {
                r.sim.step()?;
            }
            match pushed.blocked_by {
                None => Ok(Outcome::Success),
                Some(hit) => {
                    let names = [hit.a, hit.b].map(|n| r.sim.graph().nodes()[n].name.clone());
                    r.sim.record(
                        EventDraft::new(EventKind::Collision, "physics")
                            .participants(names)
                            .payload(json!({ "depth": hit.depth, "joint": joint })),
                    )?;
                    Ok(Outcome::Failure(format!("blocked at {}", pushed.achieved)))
                }
            }
        })
    }

    fn look(&mut self, object: &str) -> Result<Outcome, HarnessError> {
        self.perceived = None;
        let center = self.object_center(object)?;
        let aimed = self.aim(center)?;
        if !aimed.is_success() {
            return Ok(aimed);
        }
        self.sim.record(
            EventDraft::new(EventKind::PerceiveRequest, ACTOR).participants([object]),
        )?;
        let camera = self.sim.robot_required()?.camera;
        let seen = trigger_camera(&self.sim.snapshot(), &camera);
        let node = self.model(object)?;
        let found = seen.contains(node);
        let outcome = if found {
            self.perceived = Some(object.to_string());
            Outcome::Success
        } else {
            Outcome::Failure(reasons::OBJECT_NOT_FOUND.into())
        };
        let payload = json!({
            "target": object,
            "objects": seen.objects.iter().map(|o| json!({ "name": o.name, "pose": o.pose, "fraction": o.fraction })).collect::<Vec<_>>(),
        });
        self.sim.record(
            EventDraft::new(EventKind::PerceiveResult, "camera")
                .participants(seen.objects.iter().map(|o| o.name.clone()))
                .outcome(outcome.clone())
                .payload(payload),
        )?;
        Ok(outcome)
    }

    /// Points the head at `object` and runs the camera.
    pub fn perceive(&mut self, object: &str) -> Result<Outcome, HarnessError> {
        let payload = json!({ "object": object });
        self.action("perceive", &[object], payload, |r| r.look(object))
    }

    fn arm_home(&mut self) -> Result<(), HarnessError> {
        let robot = self.sim.robot_required()?;
        let names = robot.config.arm_joints.clone();
        let n = names.len();
        self.joints_to(names, vec![0.0; n])?;
        Ok(())
    }

    fn gripper_to(&mut self, width: f64) -> Result<(), HarnessError> {
        self.sim.push(SimCommand::Gripper { width });
        self.sim.step()?;
        self.wait(Simulation::joints_idle)?;
        Ok(())
    }

    fn pick(&mut self, object: &str) -> Result<Outcome, HarnessError> {
        // Grasping is only allowed right after the object itself was seen.
        if self.perceived.as_deref() != Some(object) {
            return Ok(Outcome::Failure(reasons::OBJECT_NOT_FOUND.into()));
        }
        self.perceived = None;
        let center = self.object_center(object)?;
        let robot = self.sim.robot_required()?.clone();
        let Some(q) = robot.arm_solution(self.sim.graph(), &center) else {
            return Ok(Outcome::Failure(reasons::UNREACHABLE.into()));
        };
        let max_width = self.sim.graph().joint_by_id(robot.gripper).limits.upper;
        self.gripper_to(max_width)?;
        self.joints_to(robot.config.arm_joints.clone(), q)?;
        self.gripper_to(0.0)?;
        let node = self.model(object)?;
        if self.sim.held() == Some(node) {
            self.arm_home()?;
            Ok(Outcome::Success)
        } else {
            self.gripper_to(max_width)?;
            self.arm_home()?;
            Ok(Outcome::Failure(reasons::GRASP_FAILED.into()))
        }
    }

    /// Reaches for `object` and closes the gripper on it. Refuses unless the last
    /// perception saw this object.
    pub fn grasp(&mut self, object: &str) -> Result<Outcome, HarnessError> {
        let payload = json!({ "object": object });
        self.action("grasp", &[object], payload, |r| r.pick(object))
    }

    fn drop_held(&mut self) -> Result<Outcome, HarnessError> {
        if self.sim.held().is_none() {
            return Ok(Outcome::Failure(reasons::NOT_HOLDING.into()));
        }
        let max_width = {
            let robot = self.sim.robot_required()?;
            self.sim.graph().joint_by_id(robot.gripper).limits.upper
        };
        self.gripper_to(max_width)?;
        Ok(Outcome::Success)
    }

    pub fn release(&mut self) -> Result<Outcome, HarnessError> {
        let held = self
            .sim
            .held()
            .map(|n| self.sim.graph().nodes()[n].name.clone());
        let participants: Vec<&str> = held.as_deref().into_iter().collect();
        self.action("release", &participants, Value::Null, |r| r.drop_held())
    }

    fn base_pose_free(&self, pose: Pose2d) -> Result<bool, HarnessError> {
        let robot = self.sim.robot_required()?;
        let snap = self.sim.snapshot();
        let body = self.sim.graph().body_of(robot.model);
        Ok(!footprint_collides(&snap, &footprint_at(&robot.footprint, pose), body))
    }

    /// Draws one base pose for `object` and drives there unless it is in collision.
    pub fn sample_base_pose(
        &mut self,
        object: &str,
        sampler: &BasePoseSampler,
    ) -> Result<(Outcome, Pose2d), HarnessError> {
        let center = self.object_center(object)?;
        let pose = sampler.sample(&mut self.rng, (center.x, center.y));
        let payload = json!({ "base_pose": pose, "sampler": sampler.label() });
        let outcome = self.action("sample_base_pose", &[object], payload, |r| {
            if r.base_pose_free(pose)? {
                r.drive(pose)
            } else {
                Ok(Outcome::Failure(reasons::BASE_COLLISION.into()))
            }
        })?;
        Ok((outcome, pose))
    }

    /// Sample, navigate, perceive, grasp; every abandoned attempt is one retry.
    pub fn fetch_with_retries(
        &mut self,
        sampler: &BasePoseSampler,
        object: &str,
        max_retries: u32,
    ) -> Result<FetchResult, HarnessError> {
        let token = self.begin("fetch", &[object], json!({ "object": object, "max_retries": max_retries }))?;
        let mut retries = 0u32;
        loop {
            let (moved, pose) = self.sample_base_pose(object, sampler)?;
            let succeeded = moved.is_success()
                && self.perceive(object)?.is_success()
                && self.grasp(object)?.is_success();
            if succeeded {
                self.retries += retries;
                let payload = json!({ "object": object, "base_pose": pose, "retries": retries });
                self.end("fetch", token, &[object], Outcome::Success, payload)?;
                return Ok(FetchResult {
                    outcome: Outcome::Success,
                    retries,
                    base_pose: Some(pose),
                });
            }
            retries += 1;
            if retries >= max_retries {
                self.retries += retries;
                let outcome = Outcome::Failure(reasons::RETRIES_EXHAUSTED.into());
                let payload = json!({ "object": object, "retries": retries });
                self.end("fetch", token, &[object], outcome.clone(), payload)?;
                return Ok(FetchResult {
                    outcome,
                    retries,
                    base_pose: None,
                });
            }
        }
    }

    /// Carries the held object to `target` (a point on a surface) and lets go.
    pub fn deliver(&mut self, target: [f64; 3]) -> Result<Outcome, HarnessError> {
        let held_name = self
            .sim
            .held()
            .map(|n| self.sim.graph().nodes()[n].name.clone());
        let participants: Vec<&str> = held_name.as_deref().into_iter().collect();
        let payload = json!({ "target": target });
        self.action("deliver", &participants, payload, |r| r.carry_to(Vec3::from(target)))
    }

    fn carry_to(&mut self, target: Vec3) -> Result<Outcome, HarnessError> {
        let Some(held) = self.sim.held() else {
            return Ok(Outcome::Failure(reasons::NOT_HOLDING.into()));
        };
        let half_height = self
            .sim
            .graph()
            .subtree_aabb(held)
            .map(|b| b.extents().z * 0.5)
            .unwrap_or(0.0);
        let place = Vec3::new(target.x, target.y, target.z + half_height + PLACE_CLEARANCE);
        let here = self.sim.base_pose().ok_or(SimError::NoRobot)?;
        let toward = (here.y - target.y).atan2(here.x - target.x);
        let robot = self.sim.robot_required()?.clone();
        for radius in [0.55, 0.65, 0.75] {
            for k in 0..16 {
                let a = toward + std::f64::consts::TAU * k as f64 / 16.0;
                let base = Pose2d::new(
                    target.x + radius * a.cos(),
                    target.y + radius * a.sin(),
                    wrap_angle(a + std::f64::consts::PI),
                );
                if !self.base_pose_free(base)? {
                    continue;
                }
                let mut probe = self.sim.graph().clone();
                probe.set_local_pose(robot.model, crate::geometry::Pose::from_pose2d(base))?;
                let Some(q) = robot.arm_solution(&probe, &place) else {
                    continue;
                };
                let moved = self.drive(base)?;
                if !moved.is_success() {
                    return Ok(moved);
                }
                self.joints_to(robot.config.arm_joints.clone(), q)?;
                let released = self.drop_held()?;
                self.arm_home()?;
                return Ok(released);
            }
        }
        Ok(Outcome::Failure(reasons::UNREACHABLE.into()))
    }

    pub fn execute(&mut self, step: &PlanStep) -> Result<Outcome, HarnessError> {
        match step {
            PlanStep::MoveBaseTo { x, y, theta } => self.move_base_to(Pose2d::new(*x, *y, *theta)),
            PlanStep::MoveJoints { targets, trajectory } => self.move_joints(targets, trajectory.as_ref()),
            PlanStep::PointHead { target } => self.point_head(*target),
            PlanStep::OpenContainer { joint, q } => self.open_container(joint, *q),
            PlanStep::Perceive { object } => self.perceive(object),
            PlanStep::Grasp { object } => self.grasp(object),
            PlanStep::Release => self.release(),
            PlanStep::SampleBasePose { object, sampler } => {
                let sampler = sampler.resolve(&self.base_dir)?;
                Ok(self.sample_base_pose(object, &sampler)?.0)
            }
            PlanStep::Deliver { target } => self.deliver(*target),
            PlanStep::Fetch {
                object,
                sampler,
                max_retries,
            } => {
                let sampler = sampler.resolve(&self.base_dir)?;
                Ok(self.fetch_with_retries(&sampler, object, *max_retries)?.outcome)
            }
        }
    }

    /// Runs steps in order, stopping at the first failure.
    pub fn run_steps(&mut self, steps: &[PlanStep]) -> Result<Outcome, HarnessError> {
        for step in steps {
            let outcome = self.execute(step)?;
            if !outcome.is_success() {
                return Ok(outcome);
            }
        }
        Ok(Outcome::Success)
    }

    pub fn finish(mut self, outcome: Outcome) -> Result<(EpisodeResult, Episode), HarnessError> {
        let result = EpisodeResult {
            episode_id: self.sim.recorder().episode_id().to_string(),
            outcome,
            retries: self.retries,
            sim_duration: self.sim.sim_time(),
        };
        let episode = self.sim.recorder_mut().close()?;
        Ok((result, episode))
    }
}

/// Seconds since the Unix epoch; only ever written to episode meta files.
fn wall_clock_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Every graspable object resting on a movable part (a door shelf, say) is attached to
/// that part so it follows when the part moves.
pub fn rest_objects_on_supports(g: &mut SceneGraph) -> Result<(), HarnessError> {
    for obj in g.nodes_with_class("graspable") {
        if g.node(obj)?.parent != Some(crate::scene::ROOT) {
            continue;
        }
        let settled = settle(g, obj)?;
        if let Supporter::Node(link) = settled.supporter {
            if g.body_of(link) != g.body_of(obj) {
                g.attach(obj, link, Relation::Support)?;
                g.set_support(obj, settled.supporter);
            }
        }
    }
    Ok(())
}

/// Runs a whole plan as one episode.
pub fn run_plan(
    world: &World,
    plan: &Plan,
    seed: u64,
    episode_id: &str,
    sink: &NeemSink,
    base_dir: &Path,
) -> Result<(EpisodeResult, Episode), HarnessError> {
    plan.validate(&world.build()?)?;
    let mut runner = Runner::new(world, seed, episode_id, sink)?;
    runner.set_base_dir(base_dir);
    let outcome = runner.run_steps(&plan.steps)?;
    runner.finish(outcome)
}

/// Per-episode seed: the first 8 bytes of SHA-256 over `seed` and `i`.
pub fn derive_seed(seed: u64, i: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(i.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 when `n == 1`.
    pub sd: f64,
    /// False when `n == 1` and `sd` carries no information.
    pub sd_defined: bool,
}

impl RetryStats {
    pub fn from_retries(retries: &[u32]) -> Result<Self, HarnessError> {
        let n = retries.len();
        if n == 0 {
            return Err(HarnessError::NoEpisodes);
        }
        let mean = retries.iter().map(|&r| r as f64).sum::<f64>() / n as f64;
        let sd = if n > 1 {
            let ss: f64 = retries.iter().map(|&r| (r as f64 - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            n,
            mean,
            sd,
            sd_defined: n > 1,
        })
    }
}

/// Percent reduction of mean retries from `baseline` to `learned`.
pub fn improvement(baseline: &RetryStats, learned: &RetryStats) -> Result<f64, HarnessError> {
    improvement_of_means(baseline.mean, learned.mean)
}

pub fn improvement_of_means(baseline: f64, learned: f64) -> Result<f64, HarnessError> {
    if baseline <= 0.0 {
        return Err(HarnessError::ZeroBaseline);
    }
    Ok(100.0 * (baseline - learned) / baseline)
}

/// The fetch-and-deliver task the experiment repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct FetchTask {
    pub object: String,
    /// Container joint opened before fetching, with its target position.
    pub open: Option<(String, f64)>,
    pub deliver_to: [f64; 3],
    pub max_retries: u32,
}

impl FetchTask {
    /// Milk from the fridge door to the counter in the bundled kitchen.
    pub fn kitchen_milk() -> Self {
        Self {
            object: "milk".into(),
            open: Some(("fridge_door".into(), std::f64::consts::FRAC_PI_2)),
            deliver_to: [-1.5, -0.3, 0.9],
            max_retries: MAX_RETRIES,
        }
    }
}

pub fn run_fetch_episode(
    world: &World,
    task: &FetchTask,
    sampler: &BasePoseSampler,
    seed: u64,
    episode_id: &str,
    sink: &NeemSink,
) -> Result<(EpisodeResult, Episode), HarnessError> {
    let mut r = Runner::new(world, seed, episode_id, sink)?;
    if let Some((joint, q)) = &task.open {
        let opened = r.open_container(joint, *q)?;
        if !opened.is_success() {
            return r.finish(opened);
        }
    }
    let fetched = r.fetch_with_retries(sampler, &task.object, task.max_retries)?;
    if !fetched.outcome.is_success() {
        return r.finish(fetched.outcome);
    }
    let delivered = r.deliver(task.deliver_to)?;
    r.finish(delivered)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub stats: RetryStats,
    pub results: Vec<EpisodeResult>,
    pub episodes: Vec<Episode>,
}

/// `n` independent fetch episodes. Episode `i` uses seed `derive_seed(seed, i)` and id
/// `<prefix>-<i>`; episodes run on all available cores and are merged by index.
pub fn run_experiment(
    world: &World,
    task: &FetchTask,
    sampler: &BasePoseSampler,
    n: usize,
    seed: u64,
    prefix: &str,
    out_dir: Option<&Path>,
) -> Result<ExperimentResult, HarnessError> {
    if n == 0 {
        return Err(HarnessError::NoEpisodes);
    }
    let (results, episodes) = run_range(world, task, sampler, 0..n, seed, prefix, out_dir)?;
    let retries: Vec<u32> = results.iter().map(|r| r.retries).collect();
    Ok(ExperimentResult {
        stats: RetryStats::from_retries(&retries)?,
        results,
        episodes,
    })
}

/// Episodes `range` of an experiment, in index order.
fn run_range(
    world: &World,
    task: &FetchTask,
    sampler: &BasePoseSampler,
    range: std::ops::Range<usize>,
    seed: u64,
    prefix: &str,
    out_dir: Option<&Path>,
) -> Result<(Vec<EpisodeResult>, Vec<Episode>), HarnessError> {
    let n = range.len();
    let first = range.start;
    let sink = out_dir.map_or(NeemSink::Memory, |d| NeemSink::Dir(d.to_path_buf()));
    let threads = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    let run_one = |i: usize| {
        run_fetch_episode(
            world,
            task,
            sampler,
            derive_seed(seed, i as u64),
            &format!("{prefix}-{i:04}"),
            &sink,
        )
    };
    let mut slots: Vec<Option<Result<(EpisodeResult, Episode), HarnessError>>> =
        (0..n).map(|_| None).collect();
    if threads <= 1 {
        for (k, slot) in slots.iter_mut().enumerate() {
            *slot = Some(run_one(first + k));
        }
    } else {
        let chunk = n.div_ceil(threads);
        std::thread::scope(|s| {
            for (c, part) in slots.chunks_mut(chunk).enumerate() {
                let run_one = &run_one;
                s.spawn(move || {
                    for (k, slot) in part.iter_mut().enumerate() {
                        *slot = Some(run_one(first + c * chunk + k));
                    }
                });
            }
        });
    }
    let mut results = Vec::with_capacity(n);
    let mut episodes = Vec::with_capacity(n);
    for slot in slots {
        let (r, e) = slot.expect("every slot filled")?;
        results.push(r);
        episodes.push(e);
    }
    Ok((results, episodes))
}

/// Runs `sampler` episodes in index order until `successes` of them succeed and returns
/// those. Gives up after `max_episodes`.
#[allow(clippy::too_many_arguments)]
pub fn collect_training_episodes(
    world: &World,
    task: &FetchTask,
    sampler: &BasePoseSampler,
    successes: usize,
    max_episodes: usize,
    seed: u64,
    prefix: &str,
    out_dir: Option<&Path>,
) -> Result<Vec<Episode>, HarnessError> {
    if successes == 0 {
        return Err(HarnessError::NoEpisodes);
    }
    let mut kept = Vec::with_capacity(successes);
    let mut next = 0;
    while kept.len() < successes && next < max_episodes {
        let batch = (successes - kept.len()).max(8).min(max_episodes - next);
        let (results, episodes) = run_range(world, task, sampler, next..next + batch, seed, prefix, None)?;
        next += batch;
        for (r, e) in results.into_iter().zip(episodes) {
            if r.outcome.is_success() && kept.len() < successes {
                if let Some(dir) = out_dir {
                    e.store(dir, wall_clock_now())?;
                }
                kept.push(e);
            }
        }
    }
    if kept.len() < successes {
        return Err(HarnessError::InsufficientSuccesses {
            wanted: successes,
            got: kept.len(),
            tried: next,
        });
    }
    Ok(kept)
}

/// Stream index that separates training seeds from evaluation seeds.
pub const TRAINING_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone)]
pub struct SamplerComparison {
    pub model: ModelFile,
    pub baseline: RetryStats,
    pub learned: RetryStats,
    /// Percent reduction in mean retries.
    pub improvement: f64,
}

/// Trains a base-pose Gaussian on `n_train` successful uniform-sampler episodes, then
/// runs `n_eval` episodes per sampler. Both arms see the same episode seeds.
pub fn compare_samplers(
    world: &World,
    task: &FetchTask,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<SamplerComparison, HarnessError> {
    let uniform = BasePoseSampler::uniform();
    let training = collect_training_episodes(
        world,
        task,
        &uniform,
        n_train,
        n_train * 20,
        derive_seed(seed, TRAINING_STREAM),
        "train",
        None,
    )?;
    let model = train_from_neems(&training, "fetch", "base_pose.xy")?;
    let learned_sampler = BasePoseSampler::Gaussian(model.gaussian()?);
    let baseline = run_experiment(world, task, &uniform, n_eval, seed, "uniform", None)?.stats;
    let learned = run_experiment(world, task, &learned_sampler, n_eval, seed, "model", None)?.stats;
    Ok(SamplerComparison {
        improvement: improvement(&baseline, &learned)?,
        model,
        baseline,
        learned,
    })
}
