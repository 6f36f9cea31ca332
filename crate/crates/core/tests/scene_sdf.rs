mod common;

use common::*;
use mentalsim_core::fixtures::{APARTMENT_SDF, APARTMENT_SEMANTICS, FRIDGE_SDF, KITCHEN_SDF, KITCHEN_SEMANTICS};
use mentalsim_core::geometry::{Pose, Shape};
use mentalsim_core::harness::World;
use mentalsim_core::physics::settle;
use mentalsim_core::scene::{build_scene, Relation, SceneError, Supporter, ROOT};
use mentalsim_core::sdf::{
    parse_sdf, parse_semantics, validate, write_sdf, CollisionSpec, JointKind, JointLimits, JointSpec, LinkSpec,
    ModelSpec, SdfPose, SemanticsError, WorldSpec,
};
use proptest::prelude::*;
use std::f64::consts::PI;

fn arb_name() -> impl Strategy<Value = String> {
    // Includes characters that need escaping in XML attributes.
    "[a-z][a-z0-9_&<>\"' ]{0,8}"
}

fn arb_pose() -> impl Strategy<Value = SdfPose> {
    (prop::array::uniform3(-10.0..10.0f64), prop::array::uniform3(-PI..PI)).prop_map(|(xyz, rpy)| SdfPose::new(xyz, rpy))
}

fn arb_shape() -> impl Strategy<Value = Shape> {
    prop_oneof![
        prop::array::uniform3(0.001..5.0f64).prop_map(|size| Shape::Box { size }),
        (0.001..2.0f64, 0.001..3.0f64).prop_map(|(radius, length)| Shape::Cylinder { radius, length }),
        (0.001..2.0f64).prop_map(|radius| Shape::Sphere { radius }),
    ]
}

fn arb_model(index: usize) -> impl Strategy<Value = ModelSpec> {
    let links = prop::collection::vec((arb_pose(), prop::collection::vec((arb_pose(), arb_shape()), 0..3), 0.0..50.0f64), 1..5);
    (arb_name(), links, arb_pose(), any::<bool>(), prop::collection::vec((0usize..100, 0usize..4, arb_pose(), -3.0..0.0f64, 0.0..3.0f64, 0.01..5.0f64), 4))
        .prop_map(move |(name, links, root_pose, is_static, joint_seeds)| {
            let links: Vec<LinkSpec> = links
                .into_iter()
                .enumerate()
                .map(|(i, (pose, cols, mass))| LinkSpec {
                    name: format!("l{i}"),
                    pose,
                    collisions: cols
                        .into_iter()
                        .enumerate()
                        .map(|(k, (pose, shape))| CollisionSpec { name: format!("c{k}"), pose, shape })
                        .collect(),
                    mass,
                })
                .collect();
            // Link i > 0 hangs off a random earlier link, so the joints always form a tree.
            let kinds = [JointKind::Revolute, JointKind::Prismatic, JointKind::Continuous, JointKind::Fixed];
            let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.6, 0.0, 0.8]];
            let joints = (1..links.len())
                .map(|i| {
                    let (p, k, origin, lower, upper, vel) = joint_seeds[i - 1];
                    JointSpec {
                        name: format!("m{index}_j{i}"),
                        kind: kinds[k],
                        parent: format!("l{}", p % i),
                        child: format!("l{i}"),
                        axis: axes[p % 4],
                        limits: JointLimits { lower, upper, max_velocity: vel },
                        origin,
                    }
                })
                .collect();
            ModelSpec {
                name: format!("{name}{index}"),
                links,
                joints,
                root_pose,
                is_static,
            }
        })
}

fn arb_world() -> impl Strategy<Value = WorldSpec> {
    (arb_name(), arb_model(0), arb_model(1), arb_model(2), 1usize..4, prop::array::uniform3(-20.0..20.0f64)).prop_map(
        |(name, a, b, c, n, gravity)| WorldSpec {
            name,
            models: [a, b, c].into_iter().take(n).collect(),
            gravity,
            semantics: Vec::new(),
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn write_then_parse_is_identity(world in arb_world()) {
        let text = write_sdf(&world);
        let back = parse_sdf(&text).unwrap();
        prop_assert!(back.warnings.is_empty(), "{:?}", back.warnings);
        prop_assert_eq!(&back.world, &world);
        prop_assert_eq!(write_sdf(&back.world), text);
    }

    #[test]
    fn built_scene_matches_spec(world in arb_world()) {
        let g = build_scene(&world).unwrap();
        g.check_invariants().unwrap();
        let movable = world.models.iter().flat_map(|m| &m.joints).filter(|j| j.kind.is_movable()).count();
        prop_assert_eq!(g.joints().len(), movable);
        for m in &world.models {
            let node = g.find(&m.name).unwrap();
            prop_assert_eq!(g.nodes()[node].parent, Some(ROOT));
            for l in &m.links {
                let id = g.find(&format!("{}::{}", m.name, l.name)).unwrap();
                prop_assert_eq!(g.qualified_name(id), format!("{}::{}", m.name, l.name));
                // With every joint at its rest position each link sits at its declared pose.
                let rest = m.joints.iter().all(|j| j.kind == JointKind::Fixed
                    || (j.kind != JointKind::Continuous && j.limits.lower <= 0.0 && j.limits.upper >= 0.0)
                    || j.kind == JointKind::Continuous);
                if rest {
                    let want = m.root_pose.to_pose().compose(&l.pose.to_pose());
                    prop_assert!(g.world_pose(id).unwrap().approx_eq(&want, 1e-9));
                }
            }
        }
    }

    /// Random re-parenting keeps world poses and the tree property; cycles are refused.
    #[test]
    fn attach_detach_keeps_world_poses(ops in prop::collection::vec((0usize..64, 0usize..64), 1..40)) {
        let mut g = build_scene(&parse_sdf(KITCHEN_SDF).unwrap().world).unwrap();
        let n = g.nodes().len();
        for (a, b) in ops {
            let (child, parent) = (a % n, b % n);
            let before = g.world_poses();
            match g.attach(child, parent, Relation::Attachment) {
                Ok(()) => {
                    let after = g.world_poses();
                    for i in 0..n {
                        prop_assert!(after[i].approx_eq(&before[i], 1e-9), "node {i} moved");
                    }
                }
                Err(SceneError::WouldCreateCycle { .. }) => prop_assert!(g.is_ancestor_or_self(child, parent)),
                Err(SceneError::NotReparentable(_)) => {}
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
            g.check_invariants().unwrap();
        }
    }
}

#[test]
fn names_resolve_three_ways() {
    let g = build_scene(&parse_sdf(FRIDGE_SDF).unwrap().world).unwrap();
    let door = g.find("fridge::door").unwrap();
    assert_eq!(g.find("door"), Some(door));
    assert_eq!(g.qualified_name(door), "fridge::door");
    let model = g.find("fridge").unwrap();
    assert_eq!(g.nodes()[model].parent, Some(ROOT));
    assert!(g.find("fridge::nope").is_none());
    assert_eq!(g.body_of(door), model);
}

#[test]
fn containers_list_movable_joints_only() {
    let world = World::from_text(APARTMENT_SDF, Some(APARTMENT_SEMANTICS)).unwrap();
    let g = world.build().unwrap();
    let mut found: Vec<(String, Vec<String>)> = g
        .query_containers()
        .into_iter()
        .map(|c| (c.name, c.articulations.into_iter().map(|a| a.joint).collect()))
        .collect();
    found.sort();
    assert_eq!(
        found,
        vec![
            ("cabinet".to_string(), vec!["drawer_slide".to_string()]),
            ("fridge".to_string(), vec!["door_hinge".to_string()]),
        ]
    );
    let waste: Vec<String> = g.query_storage_location("Waste").into_iter().map(|n| g.qualified_name(n)).collect();
    assert_eq!(waste, vec!["cabinet::bin"]);
    let perishable: Vec<String> = g.query_storage_location("perishable").into_iter().map(|n| g.qualified_name(n)).collect();
    assert_eq!(perishable, vec!["fridge"]);
}

#[test]
fn release_into_open_drawer_bin() {
    let world = World::from_text(APARTMENT_SDF, Some(APARTMENT_SEMANTICS)).unwrap();
    let mut g = build_scene(&world.spec).unwrap();
    g.set_joint_position("drawer_slide", 0.3).unwrap();
    let milk = g.find("milk").unwrap();
    // Bin floor center: cabinet (0, 2) + drawer 0.5 + slide 0.3 - 0.4.
    g.set_world_pose(milk, Pose::from_translation(0.4, 2.0, 0.65)).unwrap();
    let r = settle(&mut g, milk).unwrap();
    let z = g.world_pose(milk).unwrap().position.z;
    assert!((z - 0.43).abs() < 1e-9, "milk center at {z}");
    let Supporter::Node(s) = r.supporter else { panic!("landed on the ground") };
    assert_eq!(g.qualified_name(s), "cabinet::bin");
}

#[test]
fn semantics_sidecar_resolves_names() {
    let world = parse_sdf(KITCHEN_SDF).unwrap().world;
    let tags = parse_semantics(KITCHEN_SEMANTICS, &world).unwrap();
    assert!(!tags.is_empty());
    assert!(matches!(
        parse_semantics(r#"{"unicorn": {"classes": ["Horse"]}}"#, &world),
        Err(SemanticsError::UnknownName(n)) if n == "unicorn"
    ));
    assert!(matches!(parse_semantics("[1, 2]", &world), Err(SemanticsError::Malformed(_))));
    assert!(matches!(
        parse_semantics(r#"{"milk": {"colour": "white"}}"#, &world),
        Err(SemanticsError::Malformed(_))
    ));
}

#[test]
fn fixtures_validate_cleanly() {
    for text in [KITCHEN_SDF, FRIDGE_SDF, APARTMENT_SDF] {
        let p = parse_sdf(text).unwrap();
        assert!(p.warnings.is_empty(), "{:?}", p.warnings);
        assert!(validate(&p.world).is_empty(), "{:?}", validate(&p.world));
    }
}

#[test]
fn unknown_elements_warn_but_parse() {
    let text = world_sdf(&[r#"<model name="m"><link name="a"><sensor name="s"/><visual name="v">
        <geometry><box><size>1 1 1</size></box></geometry></visual></link><plugin name="p"/></model>"#.to_string()]);
    let p = parse_sdf(&text).unwrap();
    assert_eq!(p.world.link_count(), 1);
    assert!(p.warnings.iter().any(|w| w.contains("sensor")), "{:?}", p.warnings);
    // The visual box stands in for the missing collision.
    assert_eq!(p.world.models[0].links[0].collisions.len(), 1);
}
