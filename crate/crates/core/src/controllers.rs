//! Base, joint, trajectory, head and gripper controllers as pure step functions. The
//! fixed-tick loop that drives them lives in [`crate::sim`].

use crate::geometry::{wrap_angle, Pose, Pose2d, Vec3};
use crate::scene::{JointId, SceneError, SceneGraph};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Velocity commands are dropped this long after they were issued unless refreshed.
pub const BASE_COMMAND_TIMEOUT: f64 = 0.5;
pub const HEAD_PAN_LIMITS: (f64, f64) = (-std::f64::consts::PI, std::f64::consts::PI);
pub const HEAD_TILT_LIMITS: (f64, f64) = (-0.5, 1.4);

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("trajectory has no waypoints")]
    EmptyTrajectory,
    #[error("trajectory is invalid: {0}")]
    InvalidTrajectory(String),
    #[error("head target is too close to the head origin")]
    DegenerateTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist2d {
    pub vx: f64,
    pub vy: f64,
    pub wz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseCommand {
    pub vx: f64,
    pub vy: f64,
    pub wz: f64,
    /// Sim time after which the command reads as zero.
    pub expiry: f64,
}

impl BaseCommand {
    pub fn issued_at(twist: Twist2d, now: f64) -> Self {
        Self {
            vx: twist.vx,
            vy: twist.vy,
            wz: twist.wz,
            expiry: now + BASE_COMMAND_TIMEOUT,
        }
    }

    pub fn twist_at(&self, now: f64) -> Twist2d {
        if now <= self.expiry + 1e-12 {
            Twist2d {
                vx: self.vx,
                vy: self.vy,
                wz: self.wz,
            }
        } else {
            Twist2d::default()
        }
    }
}

/// One explicit Euler step of a holonomic base: the base-frame linear velocity is rotated
/// by the heading at the start of the step, and the heading integrates independently.
pub fn step_base(p: Pose2d, cmd: Twist2d, dt: f64) -> Pose2d {
    let (s, c) = p.theta.sin_cos();
    Pose2d {
        x: p.x + dt * (cmd.vx * c - cmd.vy * s),
        y: p.y + dt * (cmd.vx * s + cmd.vy * c),
        theta: wrap_angle(p.theta + dt * cmd.wz),
    }
}

/// Base-frame twist that moves from `from` toward `goal` in one step without overshooting,
/// with linear speed capped at `v_max` and turn rate at `w_max`.
pub fn goal_twist(from: Pose2d, goal: Pose2d, v_max: f64, w_max: f64, dt: f64) -> Twist2d {
    let dx = goal.x - from.x;
    let dy = goal.y - from.y;
    let dist = dx.hypot(dy);
    let speed = v_max.min(dist / dt);
    let (wx, wy) = if dist > 0.0 {
        (dx / dist * speed, dy / dist * speed)
    } else {
        (0.0, 0.0)
    };
    let (s, c) = from.theta.sin_cos();
    let dtheta = wrap_angle(goal.theta - from.theta);
    let wz = dtheta.signum() * w_max.min(dtheta.abs() / dt);
    Twist2d {
        vx: c * wx + s * wy,
        vy: -s * wx + c * wy,
        wz,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMode {
    /// Jump to the (clamped) target within one tick.
    Kinematic,
    /// Move toward the target at no more than the joint's velocity limit.
    #[default]
    Dynamic,
}

/// Per-joint mode; joints not listed are dynamic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ControllerMode {
    pub modes: BTreeMap<String, JointMode>,
}

impl ControllerMode {
    pub fn mode(&self, joint: &str) -> JointMode {
        self.modes.get(joint).copied().unwrap_or_default()
    }

    pub fn set(&mut self, joint: impl Into<String>, mode: JointMode) {
        self.modes.insert(joint.into(), mode);
    }
}

/// New position after one tick of tracking `target` from `q`. `target` must already be
/// within limits.
pub fn track(q: f64, target: f64, max_velocity: f64, dt: f64, mode: JointMode) -> f64 {
    match mode {
        JointMode::Kinematic => target,
        JointMode::Dynamic => {
            let max_step = max_velocity * dt;
            let remaining = target - q;
            // Relative slack so that n·step accumulating to the target snaps on step n.
            if remaining.abs() <= max_step * (1.0 + 1e-9) {
                target
            } else {
                q + max_step * remaining.signum()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointStep {
    pub joint: JointId,
    pub from: f64,
    pub to: f64,
}

/// One tick of direct position control for each `(joint, target)` pair. Targets are
/// clamped to limits; nothing is written to the graph.
pub fn step_joint_direct(
    g: &SceneGraph,
    targets: &[(String, f64)],
    mode: &ControllerMode,
    dt: f64,
) -> Result<Vec<JointStep>, ControlError> {
    targets
        .iter()
        .map(|(name, target)| {
            let id = g.joint_id(name)?;
            let j = g.joint_by_id(id);
            let goal = j.admissible(*target);
            let to = j.admissible(track(
                j.position,
                goal,
                j.limits.max_velocity,
                dt,
                mode.mode(name),
            ));
            Ok(JointStep {
                joint: id,
                from: j.position,
                to,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub time_from_start: f64,
    pub positions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrajectory {
    pub joint_names: Vec<String>,
    pub waypoints: Vec<Waypoint>,
}

impl JointTrajectory {
    pub fn validate(&self) -> Result<(), ControlError> {
        if self.waypoints.is_empty() {
            return Err(ControlError::EmptyTrajectory);
        }
        for w in &self.waypoints {
            if w.positions.len() != self.joint_names.len() {
                return Err(ControlError::InvalidTrajectory(format!(
                    "waypoint at {} has {} positions for {} joints",
                    w.time_from_start,
                    w.positions.len(),
                    self.joint_names.len()
                )));
            }
        }
        if self
            .waypoints
            .windows(2)
            .any(|w| w[1].time_from_start <= w[0].time_from_start)
        {
            return Err(ControlError::InvalidTrajectory(
                "time_from_start must strictly increase".into(),
            ));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.last().map_or(0.0, |w| w.time_from_start)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub positions: Vec<f64>,
    pub done: bool,
}

/// Piecewise-linear setpoints at `t` seconds after the trajectory started.
pub fn step_trajectory(traj: &JointTrajectory, t: f64) -> Result<TrajectorySample, ControlError> {
    traj.validate()?;
    let w = &traj.waypoints;
    let first = &w[0];
    let last = &w[w.len() - 1];
    if t <= first.time_from_start {
        return Ok(TrajectorySample {
            positions: first.positions.clone(),
            done: w.len() == 1 && t >= first.time_from_start,
        });
    }
    if t >= last.time_from_start {
        return Ok(TrajectorySample {
            positions: last.positions.clone(),
            done: true,
        });
    }
    let i = w.partition_point(|p| p.time_from_start <= t);
    let (a, b) = (&w[i - 1], &w[i]);
    let s = (t - a.time_from_start) / (b.time_from_start - a.time_from_start);
    Ok(TrajectorySample {
        positions: a
            .positions
            .iter()
            .zip(&b.positions)
            .map(|(pa, pb)| pa + (pb - pa) * s)
            .collect(),
        done: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadAim {
    pub pan: f64,
    /// Positive tilt looks down.
    pub tilt: f64,
}

/// Pan/tilt that make the camera x axis pass through `target`.
///
/// `head_base` is the pan joint frame at zero pan; the tilt axis is its y axis through the
/// same origin.
pub fn point_head(head_base: &Pose, target: &Vec3) -> Result<HeadAim, ControlError> {
    let d = head_base.inverse().transform_point(target);
    if d.norm() < 1e-6 {
        return Err(ControlError::DegenerateTarget);
    }
    Ok(HeadAim {
        pan: d.y.atan2(d.x),
        tilt: (-d.z).atan2(d.x.hypot(d.y)),
    })
}

/// Finger separation state of a parallel gripper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub width: f64,
    pub target: f64,
    pub max_width: f64,
    /// Finger separation speed in m/s.
    pub max_velocity: f64,
    /// Width at which closing stops because an object is between the fingers.
    pub blocked_at: Option<f64>,
}

impl GripperState {
    pub fn new(width: f64, max_width: f64, max_velocity: f64) -> Self {
        Self {
            width,
            target: width,
            max_width,
            max_velocity,
            blocked_at: None,
        }
    }

    /// Sets a new width target, clamped to `[0, max_width]`.
    pub fn command(&mut self, width_target: f64) {
        self.target = width_target.clamp(0.0, self.max_width);
        if self.target > self.width {
            self.blocked_at = None;
        }
    }

    pub fn is_closing(&self) -> bool {
        self.target < self.width
    }

    pub fn is_idle(&self) -> bool {
        self.width == self.target || self.blocked_at.is_some_and(|b| self.width <= b)
    }

    /// Advances one tick. Closing never goes below `blocked_at`.
    pub fn step(&mut self, dt: f64) {
        let goal = match self.blocked_at {
            Some(b) if self.target < b => b,
            _ => self.target,
        };
        self.width = track(self.width, goal, self.max_velocity, dt, JointMode::Dynamic);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn base_forward_and_rotated() {
        let p = step_base(Pose2d::default(), Twist2d { vx: 1.0, ..Default::default() }, 1.0);
        assert_eq!(p, Pose2d::new(1.0, 0.0, 0.0));
        let p = step_base(Pose2d::new(0.0, 0.0, FRAC_PI_2), Twist2d { vx: 1.0, ..Default::default() }, 1.0);
        assert!(p.x.abs() < 1e-12 && (p.y - 1.0).abs() < 1e-12 && (p.theta - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn command_expiry() {
        let c = BaseCommand::issued_at(Twist2d { vx: 1.0, vy: 0.0, wz: 0.0 }, 2.0);
        assert_eq!(c.twist_at(2.5).vx, 1.0);
        assert_eq!(c.twist_at(2.51).vx, 0.0);
    }

    #[test]
    fn kinematic_and_dynamic_tracking() {
        assert_eq!(track(0.0, 1.0, 0.5, 0.01, JointMode::Kinematic), 1.0);
        assert!((track(0.0, 1.0, 0.5, 0.01, JointMode::Dynamic) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn trajectory_interpolation() {
        let t = JointTrajectory {
            joint_names: vec!["j".into()],
            waypoints: vec![
                Waypoint { time_from_start: 0.0, positions: vec![0.0] },
                Waypoint { time_from_start: 2.0, positions: vec![1.0] },
            ],
        };
        assert_eq!(step_trajectory(&t, 1.0).unwrap().positions, vec![0.5]);
        let end = step_trajectory(&t, 5.0).unwrap();
        assert_eq!(end.positions, vec![1.0]);
        assert!(end.done);
        let empty = JointTrajectory { joint_names: vec![], waypoints: vec![] };
        assert_eq!(step_trajectory(&empty, 0.0), Err(ControlError::EmptyTrajectory));
    }

    #[test]
    fn head_pointing_cases() {
        let id = Pose::identity();
        let a = point_head(&id, &Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!((a.pan, a.tilt), (0.0, 0.0));
        let a = point_head(&id, &Vec3::new(0.0, 1.0, 0.0)).unwrap();
        assert!((a.pan - FRAC_PI_2).abs() < 1e-12 && a.tilt.abs() < 1e-12);
        let a = point_head(&id, &Vec3::new(1.0, 0.0, -1.0)).unwrap();
        assert!(a.pan.abs() < 1e-12 && (a.tilt - FRAC_PI_4).abs() < 1e-12);
        assert_eq!(point_head(&id, &Vec3::zeros()), Err(ControlError::DegenerateTarget));
    }

    #[test]
    fn gripper_clamps_and_closes() {
        let mut g = GripperState::new(0.08, 0.09, 0.1);
        g.command(0.5);
        assert_eq!(g.target, 0.09);
        g.command(0.0);
        for _ in 0..100 {
            g.step(0.01);
        }
        assert_eq!(g.width, 0.0);
        assert!(g.is_idle());
    }
}
