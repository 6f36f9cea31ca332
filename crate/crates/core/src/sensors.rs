//! Geometric stand-ins for exteroception: a planar laser scanner, a camera visibility
//! oracle and a search for base poses from which an object can be seen.

use crate::controllers::point_head;
use crate::geometry::{ray_cast_aabb, wrap_angle, Aabb, Pose, Pose2d, Ray, Vec3};
use crate::physics::footprint_collides;
use crate::scene::{NodeId, SceneError, SceneGraph, SceneSnapshot};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const VISIBILITY_THRESHOLD: f64 = 0.5;
/// Radii and heading count of the candidate rings searched by [`find_view_pose`].
pub const VIEW_RADII: [f64; 3] = [0.6, 0.9, 1.2];
pub const VIEW_HEADINGS: usize = 16;

/// Occluders must be hit this much closer than the sample to count.
const OCCLUSION_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserConfig {
    pub frame: NodeId,
    pub angle_min: f64,
    pub angle_max: f64,
    pub angle_increment: f64,
    pub range_min: f64,
    pub range_max: f64,
    /// Publication rate in Hz.
    pub rate: f64,
}

impl LaserConfig {
    pub fn is_valid(&self) -> bool {
        self.angle_min < self.angle_max
            && self.angle_increment > 0.0
            && self.range_min < self.range_max
            && self.range_min >= 0.0
    }

    pub fn beam_count(&self) -> usize {
        ((self.angle_max - self.angle_min) / self.angle_increment).floor() as usize + 1
    }

    /// Distance reported for beams that hit nothing within `range_max`.
    pub fn no_return(&self) -> f64 {
        self.range_max + 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub frame: NodeId,
    pub hfov: f64,
    pub vfov: f64,
    pub near: f64,
    pub far: f64,
}

impl CameraConfig {
    pub fn is_valid(&self) -> bool {
        self.hfov > 0.0
            && self.hfov < PI
            && self.vfov > 0.0
            && self.vfov < PI
            && self.near > 0.0
            && self.near < self.far
    }

    /// Frustum test for a point given in the camera frame (x forward, z up).
    pub fn in_frustum(&self, p: &Vec3) -> bool {
        p.x >= self.near
            && p.x <= self.far
            && p.y.atan2(p.x).abs() <= self.hfov * 0.5
            && p.z.atan2(p.x).abs() <= self.vfov * 0.5
    }
}

/// Ranges for one sweep. Beams lie in the sensor's x-y plane, starting at `angle_min`.
pub fn scan(snap: &SceneSnapshot, cfg: &LaserConfig) -> Vec<f64> {
    let pose = snap.world_poses[cfg.frame];
    let own_body = snap.bodies[cfg.frame];
    let targets: Vec<&Aabb> = snap
        .shapes
        .iter()
        .filter(|s| s.body != own_body)
        .map(|s| &s.aabb)
        .collect();
    (0..cfg.beam_count())
        .map(|i| {
            let a = cfg.angle_min + i as f64 * cfg.angle_increment;
            let dir = pose.transform_vector(&Vec3::new(a.cos(), a.sin(), 0.0));
            let ray = Ray::new(pose.position, dir).expect("unit beam direction");
            let nearest = targets
                .iter()
                .filter_map(|bb| ray_cast_aabb(&ray, bb))
                .fold(f64::INFINITY, f64::min);
            if nearest > cfg.range_max {
                cfg.no_return()
            } else {
                nearest.max(cfg.range_min)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisibilityReport {
    pub target: NodeId,
    pub fraction: f64,
    pub visible: bool,
    /// Top-level bodies that were hit first by some sample ray, in id order.
    pub blocked_by: Vec<NodeId>,
}

pub fn visibility(
    snap: &SceneSnapshot,
    cam: &CameraConfig,
    target: NodeId,
) -> Result<VisibilityReport, SceneError> {
    visibility_with(snap, cam, target, VISIBILITY_THRESHOLD)
}

/// Samples the target's box corners and center; a sample counts when it is inside the
/// frustum and the straight line from the camera reaches it unobstructed.
pub fn visibility_with(
    snap: &SceneSnapshot,
    cam: &CameraConfig,
    target: NodeId,
    threshold: f64,
) -> Result<VisibilityReport, SceneError> {
    if target >= snap.names.len() {
        return Err(SceneError::UnknownNode(target));
    }
    let Some(bb) = snap.subtree_aabb(target) else {
        return Ok(VisibilityReport {
            target,
            fraction: 0.0,
            visible: false,
            blocked_by: Vec::new(),
        });
    };
    let cam_pose = snap.world_poses[cam.frame];
    let cam_inv = cam_pose.inverse();
    let cam_body = snap.bodies[cam.frame];
    let occluders: Vec<_> = snap
        .shapes
        .iter()
        .filter(|s| s.body != cam_body && !snap.is_ancestor_or_self(target, s.node))
        .collect();

    let mut samples: Vec<Vec3> = bb.corners().to_vec();
    samples.push(bb.center());
    let mut seen = 0usize;
    let mut blocked_by = Vec::new();
    for p in &samples {
        if !cam.in_frustum(&cam_inv.transform_point(p)) {
            continue;
        }
        let delta = p - cam_pose.position;
        let dist = delta.norm();
        let Some(ray) = Ray::new(cam_pose.position, delta) else {
            continue;
        };
        let first = occluders
            .iter()
            .filter_map(|s| ray_cast_aabb(&ray, &s.aabb).map(|t| (t, s.body)))
            .filter(|(t, _)| *t < dist - OCCLUSION_EPS)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        match first {
            None => seen += 1,
            Some((_, body)) => blocked_by.push(body),
        }
    }
    blocked_by.sort_unstable();
    blocked_by.dedup();
    let fraction = seen as f64 / samples.len() as f64;
    Ok(VisibilityReport {
        target,
        fraction,
        visible: fraction >= threshold,
        blocked_by,
    })
}

/// Robot parts needed to aim the camera from a hypothetical base pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRig {
    /// Model node of the robot; its local pose is the base pose.
    pub base: NodeId,
    pub pan_joint: String,
    pub tilt_joint: String,
    pub camera: CameraConfig,
    /// Base footprint in the base frame.
    pub footprint: Aabb,
}

/// Places the robot base at `base`, aims the head at `target_point`, and returns the
/// snapshot. The input graph is not modified.
pub fn pose_robot(
    g: &SceneGraph,
    rig: &ViewRig,
    base: Pose2d,
    target_point: &Vec3,
) -> Result<SceneSnapshot, SceneError> {
    let mut g = g.clone();
    g.set_local_pose(rig.base, Pose::from_pose2d(base))?;
    aim_head(&mut g, rig, target_point)?;
    Ok(g.snapshot(0.0))
}

/// Sets pan and tilt so the camera looks at `target_point`; degenerate targets leave the
/// head where it is.
pub fn aim_head(g: &mut SceneGraph, rig: &ViewRig, target_point: &Vec3) -> Result<(), SceneError> {
    let head_base = head_base_pose(g, &rig.pan_joint)?;
    if let Ok(aim) = point_head(&head_base, target_point) {
        g.set_joint_position(&rig.pan_joint, aim.pan)?;
        g.set_joint_position(&rig.tilt_joint, aim.tilt)?;
    }
    Ok(())
}

/// World pose of the pan joint frame with the joint at zero.
pub fn head_base_pose(g: &SceneGraph, pan_joint: &str) -> Result<Pose, SceneError> {
    let frame = g.joint(pan_joint)?.node;
    let node = g.node(frame)?;
    let parent = node.parent.ok_or(SceneError::UnknownNode(frame))?;
    Ok(g.world_pose(parent)?.compose(&node.local_pose))
}

/// World footprint of the base at `base`.
pub fn footprint_at(footprint: &Aabb, base: Pose2d) -> Aabb {
    footprint.transformed(&Pose::from_pose2d(base))
}

/// Candidate base poses in search order: radius ascending, then angle ascending from 0,
/// each heading toward the target.
pub fn view_candidates(center: (f64, f64)) -> Vec<Pose2d> {
    let mut out = Vec::with_capacity(VIEW_RADII.len() * VIEW_HEADINGS);
    for r in VIEW_RADII {
        for k in 0..VIEW_HEADINGS {
            let a = 2.0 * PI * k as f64 / VIEW_HEADINGS as f64;
            out.push(Pose2d::new(
                center.0 + r * a.cos(),
                center.1 + r * a.sin(),
                wrap_angle(a + PI),
            ));
        }
    }
    out
}

/// First candidate base pose whose footprint is free and from which the aimed camera sees
/// `target`.
pub fn find_view_pose(
    g: &SceneGraph,
    rig: &ViewRig,
    target: NodeId,
) -> Result<Option<Pose2d>, SceneError> {
    let Some(bb) = g.subtree_aabb(target) else {
        return Ok(None);
    };
    let center = bb.center();
    let base_snap = g.snapshot(0.0);
    let robot_body = g.body_of(rig.base);
    for cand in view_candidates((center.x, center.y)) {
        if footprint_collides(&base_snap, &footprint_at(&rig.footprint, cand), robot_body) {
            continue;
        }
        let snap = pose_robot(g, rig, cand, &center)?;
        if visibility(&snap, &rig.camera, target)?.visible {
            return Ok(Some(cand));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeenObject {
    pub node: NodeId,
    pub name: String,
    pub pose: Pose,
    pub fraction: f64,
}

/// Geometric counterpart of a segmented image: every model visible from the camera.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerceiveResult {
    pub objects: Vec<SeenObject>,
}

impl PerceiveResult {
    pub fn contains(&self, node: NodeId) -> bool {
        self.objects.iter().any(|o| o.node == node)
    }
}

pub fn trigger_camera(snap: &SceneSnapshot, cam: &CameraConfig) -> PerceiveResult {
    trigger_camera_with(snap, cam, VISIBILITY_THRESHOLD)
}

pub fn trigger_camera_with(snap: &SceneSnapshot, cam: &CameraConfig, threshold: f64) -> PerceiveResult {
    let objects = snap
        .models
        .iter()
        .filter(|&&m| !snap.is_ancestor_or_self(m, cam.frame))
        .filter_map(|&m| {
            let r = visibility_with(snap, cam, m, threshold).ok()?;
            r.visible.then(|| SeenObject {
                node: m,
                name: snap.names[m].clone(),
                pose: snap.world_poses[m],
                fraction: r.fraction,
            })
        })
        .collect();
    PerceiveResult { objects }
}
