//! Simplified physical effects: AABB contacts, vertical settling after a release, grasp
//! attachment and joint motion that stops on contact.

use crate::geometry::{Aabb, Pose, Vec3};
use crate::scene::{NodeId, NodeKind, Relation, SceneError, SceneGraph, SceneSnapshot, Supporter, ROOT};
use serde::Serialize;
use thiserror::Error;

/// Overlaps up to this depth count as resting contact, not collision.
pub const CONTACT_EPS: f64 = 1e-9;
pub const GRASP_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum PhysicsError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("node {0} is not held by a gripper")]
    NotGrasped(NodeId),
    #[error("node {0} must be detached before settling")]
    NotDetached(NodeId),
    #[error("node {0} has no collision geometry")]
    NoGeometry(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollisionPair {
    pub a: NodeId,
    pub b: NodeId,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollisionReport {
    /// Body-level pairs with `a < b`, sorted.
    pub pairs: Vec<CollisionPair>,
    pub time: f64,
}

/// Overlapping bodies. Shapes that share a top-level subtree (linked by joints or by an
/// attachment) never collide with each other.
pub fn check_collisions(snap: &SceneSnapshot) -> CollisionReport {
    let mut pairs: Vec<CollisionPair> = Vec::new();
    for (i, sa) in snap.shapes.iter().enumerate() {
        for sb in &snap.shapes[i + 1..] {
            if sa.body == sb.body {
                continue;
            }
            let Some(depth) = sa.aabb.penetration(&sb.aabb) else {
                continue;
            };
            if depth <= CONTACT_EPS {
                continue;
            }
            let (a, b) = if sa.body < sb.body {
                (sa.body, sb.body)
            } else {
                (sb.body, sa.body)
            };
            match pairs.iter_mut().find(|p| p.a == a && p.b == b) {
                Some(p) => p.depth = p.depth.max(depth),
                None => pairs.push(CollisionPair { a, b, depth }),
            }
        }
    }
    pairs.sort_by_key(|p| (p.a, p.b));
    CollisionReport {
        pairs,
        time: snap.sim_time,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettleResult {
    pub node: NodeId,
    pub final_pose: Pose,
    /// Link (or ground) the node came to rest on.
    pub supporter: Supporter,
    pub drop: f64,
}

/// Drops a free body straight down onto the highest surface below its footprint, or onto
/// the ground plane `z = 0`. Only z changes.
pub fn settle(g: &mut SceneGraph, node: NodeId) -> Result<SettleResult, PhysicsError> {
    let n = g.node(node)?;
    if n.parent != Some(ROOT) || matches!(n.relation, Relation::Attachment) {
        return Err(PhysicsError::NotDetached(node));
    }
    let poses = g.world_poses();
    let subtree = g.subtree(node);
    let shapes = g.shape_instances(&poses);
    let own: Option<Aabb> = shapes
        .iter()
        .filter(|s| subtree.contains(&s.node))
        .map(|s| s.aabb)
        .reduce(|a, b| a.union(&b));
    let own = own.ok_or(PhysicsError::NoGeometry(node))?;
    let bottom = own.min.z;

    let mut best: Option<(f64, Supporter)> = if bottom >= -CONTACT_EPS {
        Some((0.0, Supporter::Ground))
    } else {
        None
    };
    for s in shapes.iter().filter(|s| !subtree.contains(&s.node)) {
        let overlaps_xy = (0..2).all(|i| {
            own.max[i].min(s.aabb.max[i]) - own.min[i].max(s.aabb.min[i]) > CONTACT_EPS
        });
        let top = s.aabb.max.z;
        if !overlaps_xy || top > bottom + CONTACT_EPS {
            continue;
        }
        if best.is_none_or(|(z, _)| top > z) {
            let link = g.node(s.node)?.parent.unwrap_or(s.node);
            best = Some((top, Supporter::Node(link)));
        }
    }

    let current = poses[node];
    let Some((target, supporter)) = best else {
        // Already below the ground plane with nothing underneath: leave it.
        return Ok(SettleResult {
            node,
            final_pose: current,
            supporter: Supporter::Ground,
            drop: 0.0,
        });
    };
    // Never lift: a contact within CONTACT_EPS above counts as resting already.
    let dz = (target - bottom).min(0.0);
    let mut final_pose = current;
    final_pose.position += Vec3::new(0.0, 0.0, dz);
    g.set_world_pose(node, final_pose)?;
    g.set_support(node, supporter);
    Ok(SettleResult {
        node,
        final_pose,
        supporter,
        drop: -dz,
    })
}

/// Nearest graspable node whose geometric center lies within [`GRASP_TOLERANCE`] of the
/// tool frame. Ties go to the lower node id.
pub fn grasp_check(g: &SceneGraph, tool: &Pose, closing: bool) -> Option<NodeId> {
    grasp_check_with(g, tool, closing, GRASP_TOLERANCE)
}

pub fn grasp_check_with(g: &SceneGraph, tool: &Pose, closing: bool, tolerance: f64) -> Option<NodeId> {
    if !closing {
        return None;
    }
    let mut best: Option<(f64, NodeId)> = None;
    for node in g.nodes_with_class("graspable") {
        if g.node(node).map(|n| n.relation == Relation::Attachment).unwrap_or(true) {
            continue;
        }
        let Some(bb) = g.subtree_aabb(node) else {
            continue;
        };
        let d = (bb.center() - tool.position).norm();
        if d > tolerance {
            continue;
        }
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && node < bid),
        };
        if better {
            best = Some((d, node));
        }
    }
    best.map(|(_, n)| n)
}

/// Attaches `object` to the gripper link.
pub fn grasp(g: &mut SceneGraph, object: NodeId, gripper: NodeId) -> Result<(), PhysicsError> {
    g.attach(object, gripper, Relation::Attachment)?;
    g.clear_support(object);
    Ok(())
}

/// Detaches a held object and lets it settle; the result is where to look for it.
pub fn release(g: &mut SceneGraph, node: NodeId) -> Result<SettleResult, PhysicsError> {
    if g.node(node)?.relation != Relation::Attachment {
        return Err(PhysicsError::NotGrasped(node));
    }
    g.detach(node)?;
    settle(g, node)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PushResult {
    pub achieved: f64,
    pub steps: usize,
    /// Body the moving part ran into, if the motion stopped early.
    pub blocked_by: Option<CollisionPair>,
}

/// Drives a joint toward `target` at its velocity limit, one `dt` step at a time, and
/// stops at the last contact-free position.
pub fn push_articulation(
    g: &mut SceneGraph,
    joint: &str,
    target: f64,
    dt: f64,
) -> Result<PushResult, PhysicsError> {
    let jid = g.joint_id(joint)?;
    let (goal, max_step, frame) = {
        let j = g.joint_by_id(jid);
        (j.admissible(target), j.limits.max_velocity * dt, j.node)
    };
    let body = g.body_of(frame);
    let moving = g.subtree(frame);
    let mut steps = 0;
    loop {
        let q = g.joint_by_id(jid).position;
        let remaining = goal - q;
        if remaining.abs() <= 1e-12 {
            g.set_joint_velocity_by_id(jid, 0.0);
            return Ok(PushResult {
                achieved: q,
                steps,
                blocked_by: None,
            });
        }
        let next = if remaining.abs() <= max_step * (1.0 + 1e-9) {
            goal
        } else {
            q + max_step * remaining.signum()
        };
        g.set_joint_position_by_id(jid, next);
        steps += 1;
        if let Some(hit) = moving_contact(g, &moving, body) {
            g.set_joint_position_by_id(jid, q);
            g.set_joint_velocity_by_id(jid, 0.0);
            return Ok(PushResult {
                achieved: q,
                steps,
                blocked_by: Some(hit),
            });
        }
    }
}

/// Deepest contact between shapes in `moving` and shapes of other bodies.
fn moving_contact(g: &SceneGraph, moving: &[NodeId], body: NodeId) -> Option<CollisionPair> {
    let poses = g.world_poses();
    let shapes = g.shape_instances(&poses);
    let mut worst: Option<CollisionPair> = None;
    for m in shapes.iter().filter(|s| moving.contains(&s.node)) {
        for o in shapes.iter().filter(|s| s.body != body) {
            if let Some(depth) = m.aabb.penetration(&o.aabb) {
                if depth > CONTACT_EPS && worst.is_none_or(|w| depth > w.depth) {
                    worst = Some(CollisionPair {
                        a: body.min(o.body),
                        b: body.max(o.body),
                        depth,
                    });
                }
            }
        }
    }
    worst
}

/// True if `footprint` (world frame) overlaps any shape not owned by `ignore_body`.
pub fn footprint_collides(snap: &SceneSnapshot, footprint: &Aabb, ignore_body: NodeId) -> bool {
    snap.shapes.iter().any(|s| {
        s.body != ignore_body
            && footprint
                .penetration(&s.aabb)
                .is_some_and(|d| d > CONTACT_EPS)
    })
}

/// Whether `node` is a shape leaf.
pub fn is_shape(g: &SceneGraph, node: NodeId) -> bool {
    g.node(node)
        .map(|n| matches!(n.kind, NodeKind::Shape(_)))
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::build_scene;
    use crate::sdf::parse_sdf;

    fn boxes(defs: &[(&str, [f64; 3], [f64; 3], bool)]) -> SceneGraph {
        let mut xml = String::from(r#"<sdf version="1.7"><world name="t">"#);
        for (name, pos, size, stat) in defs {
            xml.push_str(&format!(
                r#"<model name="{name}"><static>{stat}</static><pose>{} {} {} 0 0 0</pose><link name="{name}_link"><collision name="c"><geometry><box><size>{} {} {}</size></box></geometry></collision></link></model>"#,
                pos[0], pos[1], pos[2], size[0], size[1], size[2]
            ));
        }
        xml.push_str("</world></sdf>");
        build_scene(&parse_sdf(&xml).unwrap().world).unwrap()
    }

    #[test]
    fn separated_boxes_do_not_collide() {
        let g = boxes(&[("a", [0.0; 3], [1.0; 3], false), ("b", [3.0, 0.0, 0.0], [1.0; 3], false)]);
        assert!(check_collisions(&g.snapshot(0.0)).pairs.is_empty());
    }

    #[test]
    fn overlap_depth() {
        let g = boxes(&[("a", [0.0; 3], [1.0; 3], false), ("b", [0.8, 0.0, 0.0], [1.0; 3], false)]);
        let r = check_collisions(&g.snapshot(0.0));
        assert_eq!(r.pairs.len(), 1);
        assert!((r.pairs[0].depth - 0.2).abs() < 1e-12);
    }

    #[test]
    fn attached_pair_excluded() {
        let mut g = boxes(&[("hand", [0.0; 3], [1.0; 3], false), ("milk", [0.5, 0.0, 0.0], [1.0; 3], false)]);
        assert_eq!(check_collisions(&g.snapshot(0.0)).pairs.len(), 1);
        let hand = g.find_required("hand::hand_link").unwrap();
        let milk = g.model_node("milk").unwrap();
        grasp(&mut g, milk, hand).unwrap();
        assert!(check_collisions(&g.snapshot(0.0)).pairs.is_empty());
    }

    #[test]
    fn settle_on_table_top() {
        let mut g = boxes(&[
            ("table", [0.0, 0.0, 0.725], [1.0, 1.0, 0.05], true),
            ("box", [0.1, 0.0, 1.5], [0.1, 0.1, 0.2], false),
        ]);
        let b = g.model_node("box").unwrap();
        let r = settle(&mut g, b).unwrap();
        assert!((r.final_pose.position.z - 0.85).abs() < 1e-9);
        let table_link = g.find_required("table::table_link").unwrap();
        assert_eq!(r.supporter, Supporter::Node(table_link));
        assert_eq!(r.final_pose.position.x, 0.1);
    }

    #[test]
    fn settle_on_floor() {
        let mut g = boxes(&[("box", [5.0, 5.0, 2.0], [0.2, 0.2, 0.2], false)]);
        let b = g.model_node("box").unwrap();
        let r = settle(&mut g, b).unwrap();
        assert!((r.final_pose.position.z - 0.1).abs() < 1e-12);
        assert_eq!(r.supporter, Supporter::Ground);
    }

    #[test]
    fn release_requires_grasp() {
        let mut g = boxes(&[("box", [0.0, 0.0, 1.0], [0.2; 3], false)]);
        let b = g.model_node("box").unwrap();
        assert_eq!(release(&mut g, b), Err(PhysicsError::NotGrasped(b)));
    }
}
