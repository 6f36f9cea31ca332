#![allow(dead_code)]

use mentalsim_core::harness::{NeemSink, World};
use mentalsim_core::neem::{EventKind, NeemEvent, Outcome};
use mentalsim_core::scene::{build_scene, SceneGraph};
use mentalsim_core::sdf::parse_sdf;
use mentalsim_core::wire::{Hub, Mode};
use std::collections::BTreeMap;

pub const PROTOCOL_DOC: &str = include_str!("../../../../docs/protocol.md");

/// ```transcript blocks of the protocol document, in order.
pub fn transcripts(doc: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Option<Vec<&str>> = None;
    for line in doc.lines() {
        match (&mut cur, line.trim_end()) {
            (None, "```transcript") => cur = Some(Vec::new()),
            (Some(lines), "```") => {
                out.push(lines.join("\n"));
                cur = None;
            }
            (Some(lines), l) => lines.push(l),
            _ => {}
        }
    }
    out
}

/// Drives a fresh kitchen hub with the client side of `transcript` and rebuilds the
/// transcript from what the hub actually sent.
pub fn replay(transcript: &str) -> String {
    let mode = if transcript.lines().any(|l| l.trim() == "mode: belief") {
        Mode::Belief
    } else {
        Mode::Sim
    };
    let sim = World::kitchen()
        .simulation(0, "serve", &NeemSink::Memory)
        .expect("kitchen simulation");
    let mut hub = Hub::new(sim, mode);
    let conn = hub.connect();
    let mut out = Vec::new();
    for line in transcript.lines() {
        if let Some(frame) = line.strip_prefix("> ") {
            out.push(line.to_string());
            out.extend(hub.handle_text(conn, frame).into_iter().map(|r| format!("< {r}")));
        } else if let Some(n) = line.strip_prefix("tick") {
            out.push(line.to_string());
            let n: usize = if n.trim().is_empty() { 1 } else { n.trim().parse().expect("tick count") };
            for _ in 0..n {
                for (c, r) in hub.tick() {
                    assert_eq!(c, conn);
                    out.push(format!("< {r}"));
                }
            }
        } else if !line.starts_with("< ") {
            out.push(line.to_string());
        }
    }
    out.join("\n")
}

/// First differing line of two transcripts, if any.
pub fn first_difference(expected: &str, actual: &str) -> Option<(usize, String, String)> {
    let e: Vec<&str> = expected.lines().collect();
    let a: Vec<&str> = actual.lines().collect();
    for i in 0..e.len().max(a.len()) {
        let (x, y) = (e.get(i).copied().unwrap_or("<eof>"), a.get(i).copied().unwrap_or("<eof>"));
        if x != y {
            return Some((i + 1, x.to_string(), y.to_string()));
        }
    }
    None
}

// Homogeneous 4x4 transforms, kept apart from the engine's quaternion code.

pub type M4 = [[f64; 4]; 4];

pub fn translation(x: f64, y: f64, z: f64) -> M4 {
    [[1.0, 0.0, 0.0, x], [0.0, 1.0, 0.0, y], [0.0, 0.0, 1.0, z], [0.0, 0.0, 0.0, 1.0]]
}

/// Rodrigues rotation about a unit axis.
pub fn rotation(axis: [f64; 3], angle: f64) -> M4 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|v| v / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y, 0.0],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x, 0.0],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub fn mul(a: &M4, b: &M4) -> M4 {
    let mut r = [[0.0; 4]; 4];
    for (i, row) in r.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    r
}

pub fn origin(m: &M4) -> [f64; 3] {
    [m[0][3], m[1][3], m[2][3]]
}

pub fn close3(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

// Small SDF builders for synthetic worlds.

pub fn box_model(name: &str, at: [f64; 3], size: [f64; 3], is_static: bool) -> String {
    format!(
        r#"<model name="{name}"><static>{is_static}</static><pose>{} {} {} 0 0 0</pose>
<link name="body"><collision name="shell"><geometry><box><size>{} {} {}</size></box></geometry></collision></link>
</model>"#,
        at[0], at[1], at[2], size[0], size[1], size[2]
    )
}

/// A model with one empty link, used as a sensor mount.
pub fn mount_model(name: &str, link: &str, at: [f64; 3], yaw: f64) -> String {
    format!(
        r#"<model name="{name}"><static>true</static><pose>{} {} {} 0 0 {yaw}</pose><link name="{link}"/></model>"#,
        at[0], at[1], at[2]
    )
}

pub fn world_sdf(models: &[String]) -> String {
    format!(
        "<?xml version=\"1.0\"?>\n<sdf version=\"1.7\"><world name=\"synthetic\">\n{}\n</world></sdf>\n",
        models.join("\n")
    )
}

pub fn scene(sdf: &str) -> SceneGraph {
    let parsed = parse_sdf(sdf).expect("synthetic world parses");
    build_scene(&parsed.world).expect("synthetic world builds")
}

// Invariant oracles over event lists, written against the raw event fields.

/// Every Grasp is preceded, among perception results, by a successful PerceiveResult
/// that targeted and saw the grasped object.
pub fn grasp_safety_violations(events: &[NeemEvent]) -> Vec<u64> {
    let mut bad = Vec::new();
    let mut last: Option<&NeemEvent> = None;
    for e in events {
        match e.kind {
            EventKind::PerceiveResult => last = Some(e),
            EventKind::Grasp => {
                let object = e.participants.first();
                let ok = match (last, object) {
                    (Some(p), Some(o)) => {
                        p.outcome == Some(Outcome::Success)
                            && p.participants.contains(o)
                            && p.payload.get("target").and_then(|t| t.as_str()) == Some(o.as_str())
                    }
                    _ => false,
                };
                if !ok {
                    bad.push(e.event_id);
                }
            }
            _ => {}
        }
    }
    bad
}

/// ActionStart/ActionEnd pairing: every start has exactly one later end with the same
/// token and name, every end has an open start, and tokens are never reused.
pub fn pairing_violations(events: &[NeemEvent]) -> Vec<String> {
    let mut open: BTreeMap<u64, &str> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut bad = Vec::new();
    for e in events {
        let Some(a) = &e.action else {
            if matches!(e.kind, EventKind::ActionStart | EventKind::ActionEnd) {
                bad.push(format!("event {} has no action reference", e.event_id));
            }
            continue;
        };
        match e.kind {
            EventKind::ActionStart => {
                if !seen.insert(a.token) {
                    bad.push(format!("token {} reused", a.token));
                }
                open.insert(a.token, &a.name);
            }
            EventKind::ActionEnd => match open.remove(&a.token) {
                Some(name) if name == a.name => {
                    if e.outcome.is_none() {
                        bad.push(format!("end of token {} has no outcome", a.token));
                    }
                }
                Some(name) => bad.push(format!("token {} started as {name}, ended as {}", a.token, a.name)),
                None => bad.push(format!("end of token {} without start", a.token)),
            },
            _ => {}
        }
    }
    bad.extend(open.keys().map(|t| format!("token {t} never ended")));
    bad
}
