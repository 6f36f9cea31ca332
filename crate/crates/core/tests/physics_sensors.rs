mod common;

use common::*;
use mentalsim_core::fixtures::{APARTMENT_SDF, FRIDGE_SDF};
use mentalsim_core::geometry::Pose;
use mentalsim_core::physics::{check_collisions, grasp_check, push_articulation, release, settle, PhysicsError};
use mentalsim_core::scene::{Relation, Supporter};
use mentalsim_core::sensors::{scan, trigger_camera, visibility, CameraConfig, LaserConfig};
use proptest::prelude::*;
use std::f64::consts::PI;

/// A 6 m square room with the walls' inner faces at +-3.
fn room() -> Vec<String> {
    vec![
        box_model("wall_e", [3.05, 0.0, 0.5], [0.1, 6.2, 1.0], true),
        box_model("wall_w", [-3.05, 0.0, 0.5], [0.1, 6.2, 1.0], true),
        box_model("wall_n", [0.0, 3.05, 0.5], [6.2, 0.1, 1.0], true),
        box_model("wall_s", [0.0, -3.05, 0.5], [6.2, 0.1, 1.0], true),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Ranges inside the room match the distance to the nearest inner wall plane.
    #[test]
    fn laser_matches_room_oracle(x in -2.5..2.5f64, y in -2.5..2.5f64, yaw in -PI..PI, inc in 0.05..0.5f64) {
        let mut models = room();
        models.push(mount_model("scanner", "laser", [x, y, 0.4], yaw));
        let g = scene(&world_sdf(&models));
        let cfg = LaserConfig {
            frame: g.find("scanner::laser").unwrap(),
            angle_min: -PI / 2.0,
            angle_max: PI / 2.0,
            angle_increment: inc,
            range_min: 0.05,
            range_max: 20.0,
            rate: 10.0,
        };
        let ranges = scan(&g.snapshot(0.0), &cfg);
        prop_assert_eq!(ranges.len(), ((PI / inc).floor() as usize) + 1);
        for (i, r) in ranges.iter().enumerate() {
            let a = yaw + cfg.angle_min + i as f64 * inc;
            let (c, s) = (a.cos(), a.sin());
            let tx = if c > 0.0 { (3.0 - x) / c } else if c < 0.0 { (-3.0 - x) / c } else { f64::INFINITY };
            let ty = if s > 0.0 { (3.0 - y) / s } else if s < 0.0 { (-3.0 - y) / s } else { f64::INFINITY };
            let want = tx.min(ty);
            prop_assert!((r - want).abs() < 1e-9, "beam {i}: {r} vs {want}");
        }
    }

    /// Dropped boxes land on the highest platform under their footprint, or the floor.
    #[test]
    fn settle_lands_on_highest_overlap(
        platforms in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, 0.1..1.0f64, 0.1..1.0f64, 0.05..1.2f64), 0..5),
        bx in -1.0..1.0f64, by in -1.0..1.0f64, size in prop::array::uniform3(0.02..0.4f64),
    ) {
        let mut models: Vec<String> = platforms.iter().enumerate()
            .map(|(k, &(x, y, w, d, h))| box_model(&format!("p{k}"), [x, y, h / 2.0], [w, d, h], true))
            .collect();
        models.push(box_model("drop", [bx, by, 2.0], size, false));
        let mut g = scene(&world_sdf(&models));
        let node = g.find("drop").unwrap();
        let r = settle(&mut g, node).unwrap();
        // Oracle: highest platform whose footprint overlaps the box footprint.
        let overlap = |c: f64, w: f64, bc: f64, bw: f64| (c + w / 2.0).min(bc + bw / 2.0) - (c - w / 2.0).max(bc - bw / 2.0) > 1e-9;
        let top = platforms.iter().enumerate()
            .filter(|(_, &(x, y, w, d, _))| overlap(x, w, bx, size[0]) && overlap(y, d, by, size[1]))
            .map(|(k, &(_, _, _, _, h))| (h, k))
            .fold(None, |best: Option<(f64, usize)>, c| if best.is_none_or(|b| c.0 > b.0) { Some(c) } else { best });
        let z = g.world_pose(node).unwrap().position.z;
        let want = top.map_or(0.0, |t| t.0) + size[2] / 2.0;
        prop_assert!((z - want).abs() < 1e-9, "z {z} vs {want}");
        match (top, r.supporter) {
            (None, Supporter::Ground) => {}
            (Some((h, _)), Supporter::Node(s)) => {
                // Ties between equal heights may pick either platform.
                let name = g.qualified_name(s);
                let k: usize = name.trim_start_matches('p').trim_end_matches("::body").parse().unwrap();
                prop_assert!((platforms[k].4 - h).abs() < 1e-12, "supported by {name}");
            }
            (t, s) => prop_assert!(false, "{t:?} vs {s:?}"),
        }
        let worst = check_collisions(&g.snapshot(0.0)).pairs.iter()
            .filter(|p| p.a == node || p.b == node).map(|p| p.depth).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-6);
        prop_assert!((r.drop - (2.0 - want)).abs() < 1e-9);
    }

    /// A blocked articulation stops at the last free position and never passes the obstacle.
    #[test]
    fn drawer_push_stops_before_obstacle(gap in 0.05..0.35f64) {
        // Obstacle in front of the cabinet drawer front, `gap` beyond its closed position.
        let stop = box_model("stop", [drawer_front_x() + gap + 0.05, 2.0, 0.3], [0.1, 0.3, 0.2], true);
        let body = APARTMENT_SDF.find("<model").unwrap();
        let sdf = format!("{}{}\n{}", &APARTMENT_SDF[..body], stop, &APARTMENT_SDF[body..]);
        let mut g = scene(&sdf);
        let r = push_articulation(&mut g, "drawer_slide", 0.4, 0.01).unwrap();
        prop_assert!(r.blocked_by.is_some());
        prop_assert!(r.achieved <= gap + 1e-9 && r.achieved >= gap - 0.2 * 0.01 - 1e-9, "achieved {} gap {gap}", r.achieved);
        prop_assert_eq!(g.joint("drawer_slide").unwrap().position, r.achieved);
        let cab = g.find("cabinet").unwrap();
        let stop = g.find("stop").unwrap();
        prop_assert!(!check_collisions(&g.snapshot(0.0)).pairs.iter().any(|p| (p.a, p.b) == (cab.min(stop), cab.max(stop))));
    }
}

/// World x of the outer face of the closed cabinet drawer.
fn drawer_front_x() -> f64 {
    let g = scene(APARTMENT_SDF);
    let drawer = g.find("cabinet::drawer").unwrap();
    let snap = g.snapshot(0.0);
    snap.shapes.iter()
        .filter(|s| snap.is_ancestor_or_self(drawer, s.node))
        .map(|s| s.aabb.max.x)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn unobstructed_drawer_and_door_reach_their_targets() {
    let mut g = scene(APARTMENT_SDF);
    let r = push_articulation(&mut g, "drawer_slide", 0.4, 0.01).unwrap();
    assert_eq!((r.achieved, r.blocked_by), (0.4, None));
    assert_eq!(r.steps, 200);
    let mut g = scene(FRIDGE_SDF);
    let r = push_articulation(&mut g, "door_hinge", PI / 2.0, 0.01).unwrap();
    assert_eq!(r.blocked_by, None);
    assert!((r.achieved - PI / 2.0).abs() < 1e-12);
    // Handle end of the open door, from the fixture geometry.
    let handle = g.find("fridge::door").unwrap();
    let snap = g.snapshot(0.0);
    let h = snap.shapes.iter().find(|s| snap.names[s.node] == "door/handle").unwrap();
    assert!(close3([h.aabb.center().x, h.aabb.center().y, h.aabb.center().z], [0.37, -0.85, 1.0], 1e-9));
    assert!(snap.is_ancestor_or_self(handle, h.node));
}

#[test]
fn settle_requires_a_free_body() {
    let mut g = scene(&world_sdf(&[
        box_model("table", [0.0, 0.0, 0.5], [1.0, 1.0, 1.0], true),
        box_model("cup", [0.0, 0.0, 1.5], [0.1, 0.1, 0.1], false),
    ]));
    let cup = g.find("cup").unwrap();
    let table = g.find("table::body").unwrap();
    g.attach(cup, table, Relation::Attachment).unwrap();
    assert!(matches!(settle(&mut g, cup), Err(PhysicsError::NotDetached(_))));
    let r = release(&mut g, cup).unwrap();
    assert!((r.final_pose.position.z - 1.05).abs() < 1e-12);
    assert!(matches!(release(&mut g, cup), Err(PhysicsError::NotGrasped(_))));
}

#[test]
fn grasp_check_picks_graspable_within_tolerance() {
    let world = mentalsim_core::harness::World::from_text(
        &world_sdf(&[box_model("cup", [1.0, 0.0, 0.05], [0.06, 0.06, 0.1], false)]),
        Some(r#"{"cup": {"classes": ["graspable"]}}"#),
    )
    .unwrap();
    let g = world.build().unwrap();
    let cup = g.find("cup").unwrap();
    assert_eq!(grasp_check(&g, &Pose::from_translation(1.0, 0.0, 0.05), true), Some(cup));
    assert_eq!(grasp_check(&g, &Pose::from_translation(1.0, 0.0, 0.05), false), None);
    assert_eq!(grasp_check(&g, &Pose::from_translation(1.5, 0.0, 0.05), true), None);
}

fn camera(g: &mentalsim_core::SceneGraph) -> CameraConfig {
    CameraConfig {
        frame: g.find("cam::lens").unwrap(),
        hfov: 1.0,
        vfov: 0.8,
        near: 0.05,
        far: 10.0,
    }
}

#[test]
fn camera_sees_what_is_in_front_only() {
    let g = scene(&world_sdf(&[
        mount_model("cam", "lens", [0.0, 0.0, 1.0], 0.0),
        box_model("ahead", [3.0, 0.0, 1.0], [0.2, 0.2, 0.2], true),
        box_model("behind", [-3.0, 0.0, 1.0], [0.2, 0.2, 0.2], true),
        box_model("far", [12.0, 0.0, 1.0], [0.2, 0.2, 0.2], true),
    ]));
    let snap = g.snapshot(0.0);
    let cam = camera(&g);
    let frac = |n: &str| visibility(&snap, &cam, g.find(n).unwrap()).unwrap().fraction;
    assert_eq!(frac("ahead"), 1.0);
    assert_eq!(frac("behind"), 0.0);
    assert_eq!(frac("far"), 0.0);
    let seen = trigger_camera(&snap, &cam);
    let names: Vec<&str> = seen.objects.iter().map(|o| o.name.as_str()).collect();
    assert_eq!(names, vec!["ahead"]);
}

#[test]
fn occluder_is_reported() {
    let g = scene(&world_sdf(&[
        mount_model("cam", "lens", [0.0, 0.0, 1.0], 0.0),
        box_model("target", [3.0, 0.0, 1.0], [0.2, 0.2, 0.2], true),
        box_model("wall", [1.5, 0.0, 1.0], [0.05, 2.0, 2.0], true),
    ]));
    let r = visibility(&g.snapshot(0.0), &camera(&g), g.find("target").unwrap()).unwrap();
    assert_eq!(r.fraction, 0.0);
    assert!(!r.visible);
    assert_eq!(r.blocked_by, vec![g.find("wall").unwrap()]);
}
