//! Lightweight robot simulation for rehearsing manipulation plans: SDF worlds, a scene
//! graph with kinematics, simple physics and sensors, episodic memories of what
//! happened, and a sampler learned from successful episodes.

pub mod controllers;
pub mod fixtures;
pub mod geometry;
pub mod harness;
pub mod learning;
pub mod neem;
pub mod physics;
pub mod scene;
pub mod sdf;
pub mod sensors;
pub mod sim;
pub mod wire;

pub use geometry::{Aabb, Pose, Pose2d, Shape, Vec3};
pub use harness::{BasePoseSampler, EpisodeResult, Plan, PlanStep, RetryStats, World};
pub use learning::{Gaussian, ModelFile};
pub use neem::{Episode, EventKind, NeemEvent, Outcome};
pub use scene::{NodeId, SceneGraph, SceneSnapshot};
pub use sdf::{parse_sdf, WorldSpec};
pub use sim::{SimCommand, Simulation};
