//! Websocket boundary speaking a subset of the rosbridge v2 protocol.
//!
//! [`Hub`] is the synchronous core: it keeps per-connection state, turns inbound frames
//! into simulation commands or pending service calls, and produces outbound frames when
//! the simulation ticks. [`serve`] runs a hub behind a websocket listener.

use crate::geometry::{Pose, Vec3};
use crate::neem::{EventFilter, EventKind};
use crate::physics::settle;
use crate::scene::Supporter;
use crate::sensors::{find_view_pose, scan, trigger_camera, visibility};
use crate::sim::{SimCommand, Simulation, SpawnShape};
use crate::controllers::{JointTrajectory, Waypoint};
use futures_util::{SinkExt, StreamExt};
use nalgebra::{Quaternion, UnitQuaternion};
use serde_json::{json, Map, Number, Value};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio_tungstenite::tungstenite::Message;

pub type ConnId = u64;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: String,
        source: std::io::Error,
    },
}

/// Serializes `v` canonically: object keys sorted, no whitespace, integers as integers,
/// other numbers with 9 significant digits, non-finite numbers as `null`.
pub fn canonical(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&canonical_number(n)),
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
    }
}

fn canonical_number(n: &Number) -> String {
    if n.is_i64() || n.is_u64() {
        return n.to_string();
    }
    n.as_f64().map_or_else(|| "null".into(), format_float)
}

/// `f` rounded to 9 significant digits. Plain notation for exponents in `[-5, 9)`,
/// scientific otherwise; trailing zeros are trimmed but one fractional digit is kept.
pub fn format_float(f: f64) -> String {
    if !f.is_finite() {
        return "null".into();
    }
    if f == 0.0 {
        return "0.0".into();
    }
    let sci = format!("{f:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let rounded: f64 = sci.parse().expect("valid float");
        let mut s = format!("{rounded:.decimals$}");
        if s.contains('.') {
            let trimmed = s.trim_end_matches('0');
            s = if trimmed.ends_with('.') {
                format!("{trimmed}0")
            } else {
                trimmed.to_string()
            };
        } else {
            s.push_str(".0");
        }
        s
    } else {
        let m = mantissa.trim_end_matches('0');
        let m = if m.ends_with('.') { format!("{m}0") } else { m.to_string() };
        format!("{m}e{exp}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// The simulation is driven by command topics.
    Sim,
    /// The simulation mirrors an external robot through the belief topics.
    Belief,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Direction {
    /// Published by the simulation at this rate in Hz; `None` means on every event.
    Published(Option<f64>),
    Consumed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicSchema {
    pub name: &'static str,
    pub direction: Direction,
    /// Message type name reported to clients.
    pub schema: &'static str,
}

pub const JOINT_STATE_RATE: f64 = 50.0;
pub const ODOM_RATE: f64 = 50.0;
pub const SCAN_RATE: f64 = 10.0;
pub const CAMERA_RATE: f64 = 10.0;

/// Topics available in `mode`, fixed for the lifetime of a hub.
pub fn topic_table(mode: Mode) -> Vec<TopicSchema> {
    use Direction::*;
    let mut t = vec![
        TopicSchema { name: "/joint_states", direction: Published(Some(JOINT_STATE_RATE)), schema: "sensor_msgs/JointState" },
        TopicSchema { name: "/odom", direction: Published(Some(ODOM_RATE)), schema: "nav_msgs/Odometry" },
        TopicSchema { name: "/scan", direction: Published(Some(SCAN_RATE)), schema: "sensor_msgs/LaserScan" },
        TopicSchema { name: "/camera/visible_objects", direction: Published(Some(CAMERA_RATE)), schema: "mentalsim/VisibleObjects" },
        TopicSchema { name: "/neem/events", direction: Published(None), schema: "mentalsim/NeemEvent" },
    ];
    match mode {
        Mode::Sim => t.extend([
            TopicSchema { name: "/base_controller/command", direction: Consumed, schema: "mentalsim/BaseCommand" },
            TopicSchema { name: "/joint_command", direction: Consumed, schema: "mentalsim/JointCommand" },
            TopicSchema { name: "/joint_trajectory", direction: Consumed, schema: "trajectory_msgs/JointTrajectory" },
            TopicSchema { name: "/head/point", direction: Consumed, schema: "mentalsim/PointHead" },
            TopicSchema { name: "/gripper/command", direction: Consumed, schema: "mentalsim/GripperCommand" },
        ]),
        Mode::Belief => t.extend([
            TopicSchema { name: "/belief/joint_states", direction: Consumed, schema: "sensor_msgs/JointState" },
            TopicSchema { name: "/belief/object_detected", direction: Consumed, schema: "mentalsim/ObjectDetected" },
            TopicSchema { name: "/belief/grasped", direction: Consumed, schema: "mentalsim/Grasped" },
            TopicSchema { name: "/belief/released", direction: Consumed, schema: "mentalsim/Released" },
        ]),
    }
    t
}

pub const SERVICES: [&str; 8] = [
    "/sim/spawn_model",
    "/sim/get_object_pose",
    "/sim/settle",
    "/sim/visibility",
    "/sim/find_view_pose",
    "/sim/query_containers",
    "/sim/query_storage",
    "/sim/neem/query",
];

#[derive(Debug, Default, Clone, PartialEq)]
struct ConnState {
    advertised: BTreeSet<String>,
    subscribed: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct PendingCall {
    conn: ConnId,
    id: Option<Value>,
    service: String,
    args: Value,
}

/// Frames addressed to one connection.
pub type Outbound = Vec<(ConnId, String)>;

pub struct Hub {
    sim: Simulation,
    mode: Mode,
    topics: Vec<TopicSchema>,
    conns: BTreeMap<ConnId, ConnState>,
    next_conn: ConnId,
    pending: VecDeque<PendingCall>,
    /// Classes known at startup; object_detected may only name these.
    classes: BTreeSet<String>,
    events_published: usize,
    /// Messages serialized per topic; topics nobody subscribes to stay at zero.
    counters: BTreeMap<String, u64>,
}

impl Hub {
    pub fn new(sim: Simulation, mode: Mode) -> Self {
        let classes = sim
            .graph()
            .tags()
            .iter()
            .flat_map(|(_, t)| t.classes.iter().cloned())
            .collect();
        let events_published = sim.recorder().events().len();
        Self {
            sim,
            mode,
            topics: topic_table(mode),
            conns: BTreeMap::new(),
            next_conn: 1,
            pending: VecDeque::new(),
            classes,
            events_published,
            counters: BTreeMap::new(),
        }
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn counters(&self) -> &BTreeMap<String, u64> {
        &self.counters
    }

    pub fn connect(&mut self) -> ConnId {
        let id = self.next_conn;
        self.next_conn += 1;
        self.conns.insert(id, ConnState::default());
        id
    }

    pub fn disconnect(&mut self, conn: ConnId) {
        self.conns.remove(&conn);
        self.pending.retain(|p| p.conn != conn);
    }

    fn topic(&self, name: &str) -> Option<&TopicSchema> {
        self.topics.iter().find(|t| t.name == name)
    }

    /// Processes one inbound text frame and returns the immediate replies.
    pub fn handle_text(&mut self, conn: ConnId, raw: &str) -> Vec<String> {
        let frame: Value = match serde_json::from_str(raw) {
            Ok(v) => v,
            Err(e) => return vec![status_error(None, &format!("malformed frame: {e}"))],
        };
        self.handle(conn, &frame)
    }

    pub fn handle(&mut self, conn: ConnId, frame: &Value) -> Vec<String> {
        if !self.conns.contains_key(&conn) {
            return vec![status_error(None, "unknown connection")];
        }
        let id = frame.get("id").cloned();
        let Some(obj) = frame.as_object() else {
            return vec![status_error(id.as_ref(), "frame must be an object")];
        };
        let Some(op) = obj.get("op").and_then(Value::as_str) else {
            return vec![status_error(id.as_ref(), "missing op")];
        };
        let topic = obj.get("topic").and_then(Value::as_str);
        match op {
            "advertise" | "unadvertise" | "subscribe" | "unsubscribe" | "publish" => {
                let Some(topic) = topic else {
                    return vec![status_error(id.as_ref(), &format!("{op} needs a topic"))];
                };
                self.handle_topic_op(conn, op, topic, obj, id.as_ref())
            }
            "call_service" => self.handle_call(conn, obj, id),
            "service_response" | "status" => {
                vec![status_error(id.as_ref(), &format!("op '{op}' is server-to-client only"))]
            }
            other => vec![status_error(id.as_ref(), &format!("unknown op '{other}'"))],
        }
    }

    fn handle_topic_op(
        &mut self,
        conn: ConnId,
        op: &str,
        topic: &str,
        obj: &Map<String, Value>,
        id: Option<&Value>,
    ) -> Vec<String> {
        let Some(schema) = self.topic(topic).cloned() else {
            return vec![status_error(id, &format!("unknown topic '{topic}'"))];
        };
        let state = self.conns.get_mut(&conn).expect("checked by caller");
        match (op, schema.direction) {
            ("subscribe", Direction::Published(_)) => {
                state.subscribed.insert(topic.to_string());
                vec![]
            }
            ("unsubscribe", Direction::Published(_)) => {
                state.subscribed.remove(topic);
                vec![]
            }
            ("advertise", Direction::Consumed) => {
                state.advertised.insert(topic.to_string());
                vec![]
            }
            ("unadvertise", Direction::Consumed) => {
                state.advertised.remove(topic);
                vec![]
            }
            ("publish", Direction::Consumed) => {
                if !state.advertised.contains(topic) {
                    return vec![status_error(id, &format!("publish on '{topic}' before advertise"))];
                }
                let Some(msg) = obj.get("msg") else {
                    return vec![status_error(id, &format!("publish on '{topic}' needs msg"))];
                };
                match self.command_for(topic, msg) {
                    Ok(cmd) => {
                        self.sim.push(cmd);
                        vec![]
                    }
                    Err(e) => vec![status_error(id, &format!("{topic}: {e}"))],
                }
            }
            (_, Direction::Consumed) => {
                vec![status_error(id, &format!("topic '{topic}' is consumed by the simulation; {op} is not allowed"))]
            }
            (_, Direction::Published(_)) => {
                vec![status_error(id, &format!("topic '{topic}' is published by the simulation; {op} is not allowed"))]
            }
        }
    }

    fn handle_call(&mut self, conn: ConnId, obj: &Map<String, Value>, id: Option<Value>) -> Vec<String> {
        let Some(service) = obj.get("service").and_then(Value::as_str) else {
            let msg = "call_service needs a service";
            return vec![
                status_error(id.as_ref(), msg),
                service_response("", id.as_ref(), failure(msg)),
            ];
        };
        if !SERVICES.contains(&service) {
            let msg = format!("unknown service '{service}'");
            return vec![
                status_error(id.as_ref(), &msg),
                service_response(service, id.as_ref(), failure(&msg)),
            ];
        }
        let args = obj.get("args").cloned().unwrap_or_else(|| json!({}));
        if !args.is_object() {
            let msg = "args must be an object";
            return vec![
                status_error(id.as_ref(), msg),
                service_response(service, id.as_ref(), failure(msg)),
            ];
        }
        self.pending.push_back(PendingCall {
            conn,
            id,
            service: service.to_string(),
            args,
        });
        vec![]
    }

    /// Maps a message on a consumed topic to a simulation command.
    fn command_for(&self, topic: &str, msg: &Value) -> Result<SimCommand, String> {
        let num = |key: &str, default: Option<f64>| -> Result<f64, String> {
            match msg.get(key) {
                None | Some(Value::Null) => default.ok_or_else(|| format!("missing field '{key}'")),
                Some(v) => v
                    .as_f64()
                    .filter(|f| f.is_finite())
                    .ok_or_else(|| format!("field '{key}' must be a finite number")),
            }
        };
        let string = |key: &str| -> Result<String, String> {
            msg.get(key)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| format!("missing string field '{key}'"))
        };
        Ok(match topic {
            "/base_controller/command" => SimCommand::BaseVelocity {
                vx: num("vx", Some(0.0))?,
                vy: num("vy", Some(0.0))?,
                wz: num("wz", Some(0.0))?,
            },
            "/joint_command" => {
                let (names, positions) = names_positions(msg)?;
                SimCommand::JointTargets { names, positions }
            }
            "/joint_trajectory" => SimCommand::Trajectory {
                trajectory: trajectory_from_msg(msg)?,
            },
            "/head/point" => SimCommand::PointHead {
                target: [num("x", None)?, num("y", None)?, num("z", None)?],
            },
            "/gripper/command" => SimCommand::Gripper {
                width: num("width", None)?,
            },
            "/belief/joint_states" => {
                let (names, positions) = names_positions(msg)?;
                SimCommand::SetJointPositions { names, positions }
            }
            "/belief/object_detected" => {
                let class = msg.get("class").and_then(Value::as_str).map(str::to_string);
                if let Some(c) = &class {
                    if !self.classes.contains(c) {
                        return Err(format!("unknown object class '{c}'"));
                    }
                }
                let pose = msg
                    .get("pose")
                    .and_then(pose_from_msg)
                    .ok_or("missing or invalid pose")?;
                SimCommand::ObjectDetected {
                    name: string("name")?,
                    class,
                    pose,
                }
            }
            "/belief/grasped" => {
                if let Some(gripper) = msg.get("gripper").and_then(Value::as_str) {
                    let known = self.sim.robot().is_some_and(|r| {
                        gripper == "gripper" || gripper == r.config.tool_link || gripper == r.config.gripper_joint
                    });
                    if !known {
                        return Err(format!("unknown gripper '{gripper}'"));
                    }
                }
                SimCommand::Grasped { object: string("object")? }
            }
            "/belief/released" => SimCommand::Released { object: string("object")? },
            other => return Err(format!("no command mapping for '{other}'")),
        })
    }

    /// Advances the simulation one tick, answers pending service calls, and publishes
    /// whatever is due.
    pub fn tick(&mut self) -> Outbound {
        let mut out = Outbound::new();
        if let Err(e) = self.sim.step() {
            tracing::error!(error = %e, "tick failed");
            for &conn in self.conns.keys() {
                out.push((conn, status_error(None, &format!("tick failed: {e}"))));
            }
        }
        while let Some(call) = self.pending.pop_front() {
            let values = self.call_service(&call.service, &call.args);
            out.push((call.conn, service_response(&call.service, call.id.as_ref(), values)));
        }
        self.publish_cycle(&mut out);
        out
    }

    fn due(&self, rate: f64) -> bool {
        let period = (1.0 / (rate * self.sim.config().dt)).round().max(1.0) as u64;
        self.sim.ticks().is_multiple_of(period)
    }

    fn subscribers(&self, topic: &str) -> Vec<ConnId> {
        self.conns
            .iter()
            .filter(|(_, s)| s.subscribed.contains(topic))
            .map(|(&c, _)| c)
            .collect()
    }

    fn fan_out(&mut self, out: &mut Outbound, topic: &str, build: impl FnOnce(&Simulation) -> Option<Value>) {
        let subs = self.subscribers(topic);
        if subs.is_empty() {
            return;
        }
        let Some(msg) = build(&self.sim) else {
            return;
        };
        let frame = canonical(&json!({ "op": "publish", "topic": topic, "msg": msg }));
        *self.counters.entry(topic.to_string()).or_default() += 1;
        for c in subs {
            out.push((c, frame.clone()));
        }
    }

    fn publish_cycle(&mut self, out: &mut Outbound) {
        if self.due(JOINT_STATE_RATE) {
            self.fan_out(out, "/joint_states", |s| Some(joint_states_msg(s)));
        }
        if self.due(ODOM_RATE) {
            self.fan_out(out, "/odom", odom_msg);
        }
        if self.due(SCAN_RATE) {
            self.fan_out(out, "/scan", scan_msg);
        }
        if self.due(CAMERA_RATE) {
            self.fan_out(out, "/camera/visible_objects", camera_msg);
        }
        let events = self.sim.recorder().events();
        let fresh: Vec<Value> = events[self.events_published.min(events.len())..]
            .iter()
            .map(|e| serde_json::to_value(e).unwrap_or(Value::Null))
            .collect();
        self.events_published = events.len();
        for e in fresh {
            self.fan_out(out, "/neem/events", |_| Some(e));
        }
    }

    fn call_service(&mut self, service: &str, args: &Value) -> Value {
        match self.try_service(service, args) {
            Ok(Value::Object(mut m)) => {
                m.insert("success".into(), Value::Bool(true));
                m.entry("message").or_insert_with(|| Value::String(String::new()));
                Value::Object(m)
            }
            Ok(other) => json!({ "success": true, "message": "", "result": other }),
            Err(msg) => failure(&msg),
        }
    }

    fn model_arg(&self, args: &Value, key: &str) -> Result<crate::scene::NodeId, String> {
        let name = args
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| format!("missing string argument '{key}'"))?;
        self.sim
            .graph()
            .find(name)
            .ok_or_else(|| format!("unknown object '{name}'"))
    }

    fn try_service(&mut self, service: &str, args: &Value) -> Result<Value, String> {
        match service {
            "/sim/spawn_model" => {
                let name = args
                    .get("name")
                    .and_then(Value::as_str)
                    .ok_or("missing string argument 'name'")?
                    .to_string();
                let pose = args.get("pose").and_then(pose_from_msg).ok_or("missing or invalid pose")?;
                let shapes: Vec<SpawnShape> = match args.get("shapes") {
                    Some(v) => v
                        .as_array()
                        .ok_or("shapes must be a list")?
                        .iter()
                        .map(|s| {
                            let shape = serde_json::from_value(s.get("shape").cloned().unwrap_or(Value::Null))
                                .map_err(|e| format!("bad shape: {e}"))?;
                            let pose = match s.get("pose") {
                                None => Pose::identity(),
                                Some(p) => pose_from_msg(p).ok_or("invalid shape pose")?,
                            };
                            Ok::<_, String>(SpawnShape { pose, shape })
                        })
                        .collect::<Result<_, _>>()?,
                    None => vec![SpawnShape {
                        pose: Pose::identity(),
                        shape: serde_json::from_value(args.get("shape").cloned().unwrap_or(Value::Null))
                            .map_err(|e| format!("bad shape: {e}"))?,
                    }],
                };
                let classes: Vec<String> = args
                    .get("classes")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
                    .unwrap_or_default();
                if self.sim.graph().model_node(&name).is_some() {
                    return Err(format!("model '{name}' already exists"));
                }
                let outcome = self
                    .sim
                    .apply_now(SimCommand::SpawnModel {
                        name: name.clone(),
                        pose,
                        shapes,
                        classes: classes.clone(),
                    })
                    .map_err(|e| e.to_string())?;
                if let crate::neem::Outcome::Failure(reason) = outcome {
                    return Err(reason);
                }
                self.classes.extend(classes);
                let node = self
                    .sim
                    .graph()
                    .model_node(&name)
                    .ok_or_else(|| format!("spawning '{name}' failed"))?;
                Ok(json!({ "name": name, "node": node }))
            }
            "/sim/get_object_pose" => {
                let node = self.model_arg(args, "name")?;
                let g = self.sim.graph();
                let pose = g.world_pose(node).map_err(|e| e.to_string())?;
                Ok(json!({
                    "pose": pose_msg(&pose),
                    "supporter": supporter_name(self.sim.graph(), g.support_of(node)),
                    "held": self.sim.held() == Some(node),
                }))
            }
            "/sim/settle" => {
                let node = self.model_arg(args, "node")?;
                let g = self.sim.graph_mut();
                let result = settle(g, node).map_err(|e| e.to_string())?;
                g.set_support(node, result.supporter);
                Ok(json!({
                    "pose": pose_msg(&result.final_pose),
                    "supporter": supporter_name(self.sim.graph(), Some(result.supporter)),
                    "drop": result.drop,
                }))
            }
            "/sim/visibility" => {
                let node = self.model_arg(args, "object")?;
                let camera = self.sim.robot().ok_or("no robot")?.camera;
                let report = visibility(&self.sim.snapshot(), &camera, node).map_err(|e| e.to_string())?;
                let names: Vec<String> = report
                    .blocked_by
                    .iter()
                    .map(|&b| self.sim.graph().qualified_name(b))
                    .collect();
                Ok(json!({ "fraction": report.fraction, "visible": report.visible, "blocked_by": names }))
            }
            "/sim/find_view_pose" => {
                let node = self.model_arg(args, "object")?;
                let rig = self.sim.robot().ok_or("no robot")?.view_rig();
                let found = find_view_pose(self.sim.graph(), &rig, node).map_err(|e| e.to_string())?;
                Ok(match found {
                    Some(p) => json!({ "found": true, "pose": { "x": p.x, "y": p.y, "theta": p.theta } }),
                    None => json!({ "found": false }),
                })
            }
            "/sim/query_containers" => {
                let g = self.sim.graph();
                let containers: Vec<Value> = g
                    .query_containers()
                    .into_iter()
                    .map(|c| {
                        json!({
                            "name": c.name,
                            "articulations": c.articulations.iter().map(|a| json!({
                                "joint": a.joint,
                                "position": a.position,
                                "lower": a.limits.lower,
                                "upper": a.limits.upper,
                            })).collect::<Vec<_>>(),
                        })
                    })
                    .collect();
                Ok(json!({ "containers": containers }))
            }
            "/sim/query_storage" => {
                let class = args
                    .get("class")
                    .and_then(Value::as_str)
                    .ok_or("missing string argument 'class'")?;
                let g = self.sim.graph();
                let names: Vec<String> = g
                    .query_storage_location(class)
                    .into_iter()
                    .map(|n| g.qualified_name(n))
                    .collect();
                Ok(json!({ "locations": names }))
            }
            "/sim/neem/query" => {
                let kind = match args.get("kind").and_then(Value::as_str) {
                    Some(k) => Some(EventKind::parse(k).ok_or_else(|| format!("unknown event kind '{k}'"))?),
                    None => None,
                };
                let filter = EventFilter {
                    kind,
                    participant: args.get("participant").and_then(Value::as_str).map(str::to_string),
                    success: args.get("success").and_then(Value::as_bool),
                    time_range: match (args.get("t_min").and_then(Value::as_f64), args.get("t_max").and_then(Value::as_f64)) {
                        (None, None) => None,
                        (lo, hi) => Some((lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY))),
                    },
                };
                let events: Vec<Value> = self
                    .sim
                    .recorder()
                    .events()
                    .iter()
                    .filter(|e| filter.matches(e))
                    .map(|e| serde_json::to_value(e).unwrap_or(Value::Null))
                    .collect();
                Ok(json!({ "events": events }))
            }
            other => Err(format!("unknown service '{other}'")),
        }
    }
}

fn supporter_name(g: &crate::scene::SceneGraph, s: Option<Supporter>) -> Value {
    match s {
        None => Value::Null,
        Some(Supporter::Ground) => json!("ground"),
        Some(Supporter::Node(n)) => json!(g.qualified_name(n)),
    }
}

fn failure(message: &str) -> Value {
    json!({ "success": false, "message": message })
}

pub fn status_error(id: Option<&Value>, msg: &str) -> String {
    let mut m = json!({ "op": "status", "level": "error", "msg": msg });
    if let Some(id) = id {
        m["id"] = id.clone();
    }
    canonical(&m)
}

fn service_response(service: &str, id: Option<&Value>, values: Value) -> String {
    let ok = values.get("success").and_then(Value::as_bool).unwrap_or(false);
    let mut m = json!({ "op": "service_response", "service": service, "values": values, "result": ok });
    if let Some(id) = id {
        m["id"] = id.clone();
    }
    canonical(&m)
}

fn names_positions(msg: &Value) -> Result<(Vec<String>, Vec<f64>), String> {
    let names: Vec<String> = msg
        .get("name")
        .and_then(Value::as_array)
        .ok_or("missing list field 'name'")?
        .iter()
        .map(|v| v.as_str().map(str::to_string).ok_or("names must be strings"))
        .collect::<Result<_, _>>()?;
    let positions: Vec<f64> = msg
        .get("position")
        .and_then(Value::as_array)
        .ok_or("missing list field 'position'")?
        .iter()
        .map(|v| v.as_f64().filter(|f| f.is_finite()).ok_or("positions must be finite numbers"))
        .collect::<Result<_, _>>()?;
    if names.len() != positions.len() {
        return Err(format!("{} names but {} positions", names.len(), positions.len()));
    }
    Ok((names, positions))
}

fn trajectory_from_msg(msg: &Value) -> Result<JointTrajectory, String> {
    let joint_names: Vec<String> = msg
        .get("joint_names")
        .and_then(Value::as_array)
        .ok_or("missing list field 'joint_names'")?
        .iter()
        .map(|v| v.as_str().map(str::to_string).ok_or("joint names must be strings"))
        .collect::<Result<_, _>>()?;
    let waypoints = msg
        .get("points")
        .and_then(Value::as_array)
        .ok_or("missing list field 'points'")?
        .iter()
        .map(|p| {
            let positions = p
                .get("positions")
                .and_then(Value::as_array)
                .ok_or("point needs positions")?
                .iter()
                .map(|v| v.as_f64().filter(|f| f.is_finite()).ok_or("positions must be finite numbers"))
                .collect::<Result<Vec<f64>, _>>()?;
            let time_from_start = p
                .get("time_from_start")
                .and_then(Value::as_f64)
                .filter(|f| f.is_finite())
                .ok_or("point needs a finite time_from_start")?;
            Ok::<_, String>(Waypoint { time_from_start, positions })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let t = JointTrajectory { joint_names, waypoints };
    t.validate().map_err(|e| e.to_string())?;
    Ok(t)
}

/// Pose in geometry_msgs layout.
pub fn pose_msg(p: &Pose) -> Value {
    let q = p.orientation.quaternion();
    json!({
        "position": { "x": p.position.x, "y": p.position.y, "z": p.position.z },
        "orientation": { "x": q.i, "y": q.j, "z": q.k, "w": q.w },
    })
}

/// Parses a geometry_msgs pose; orientation defaults to identity and is normalized.
pub fn pose_from_msg(v: &Value) -> Option<Pose> {
    let f = |o: &Value, k: &str| o.get(k).and_then(Value::as_f64).filter(|x| x.is_finite());
    let pos = v.get("position")?;
    let position = Vec3::new(f(pos, "x")?, f(pos, "y")?, f(pos, "z")?);
    let orientation = match v.get("orientation") {
        None => UnitQuaternion::identity(),
        Some(o) => {
            let q = Quaternion::new(f(o, "w")?, f(o, "x")?, f(o, "y")?, f(o, "z")?);
            if q.norm() < 1e-12 {
                return None;
            }
            UnitQuaternion::from_quaternion(q)
        }
    };
    Some(Pose::new(position, orientation))
}

fn header(sim: &Simulation, frame_id: &str) -> Value {
    let t = sim.sim_time();
    let sec = t.floor();
    json!({
        "stamp": { "sec": sec as i64, "nanosec": ((t - sec) * 1e9).round() as i64 },
        "frame_id": frame_id,
    })
}

pub fn joint_states_msg(sim: &Simulation) -> Value {
    let js = sim.graph().joint_state();
    json!({
        "header": header(sim, ""),
        "name": js.names,
        "position": js.values.iter().map(|v| v.position).collect::<Vec<_>>(),
        "velocity": js.values.iter().map(|v| v.velocity).collect::<Vec<_>>(),
        "effort": Vec::<f64>::new(),
    })
}

pub fn odom_msg(sim: &Simulation) -> Option<Value> {
    let robot = sim.robot()?;
    let pose = sim.graph().nodes()[robot.model].local_pose;
    let twist = sim.base_twist();
    Some(json!({
        "header": header(sim, "odom"),
        "child_frame_id": "base_link",
        "pose": { "pose": pose_msg(&pose) },
        "twist": { "twist": {
            "linear": { "x": twist.vx, "y": twist.vy, "z": 0.0 },
            "angular": { "x": 0.0, "y": 0.0, "z": twist.wz },
        } },
    }))
}

pub fn scan_msg(sim: &Simulation) -> Option<Value> {
    let cfg = sim.robot()?.laser;
    let ranges = scan(&sim.snapshot(), &cfg);
    Some(json!({
        "header": header(sim, &sim.graph().nodes()[cfg.frame].name),
        "angle_min": cfg.angle_min,
        "angle_max": cfg.angle_max,
        "angle_increment": cfg.angle_increment,
        "time_increment": 0.0,
        "scan_time": 1.0 / cfg.rate,
        "range_min": cfg.range_min,
        "range_max": cfg.range_max,
        "ranges": ranges,
        "intensities": Vec::<f64>::new(),
    }))
}

pub fn camera_msg(sim: &Simulation) -> Option<Value> {
    let cam = sim.robot()?.camera;
    let seen = trigger_camera(&sim.snapshot(), &cam);
    Some(json!({
        "header": header(sim, &sim.graph().nodes()[cam.frame].name),
        "objects": seen.objects.iter().map(|o| json!({
            "name": o.name,
            "pose": pose_msg(&o.pose),
            "fraction": o.fraction,
        })).collect::<Vec<_>>(),
    }))
}

/// Handle to a running server.
pub struct ServerHandle {
    pub local_addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<()>,
}

impl ServerHandle {
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = self.task.await;
    }
}

type Senders = Arc<Mutex<BTreeMap<ConnId, mpsc::UnboundedSender<String>>>>;

/// Binds `addr` and serves `hub`. The tick loop runs at `realtime_factor` times wall
/// clock speed whether or not anyone is connected.
pub async fn serve(hub: Hub, addr: &str, realtime_factor: f64) -> Result<ServerHandle, WireError> {
    let listener = TcpListener::bind(addr).await.map_err(|source| WireError::BindFailure {
        addr: addr.to_string(),
        source,
    })?;
    let local_addr = listener.local_addr().map_err(|source| WireError::BindFailure {
        addr: addr.to_string(),
        source,
    })?;
    let period = std::time::Duration::from_secs_f64(hub.sim().config().dt / realtime_factor.max(1e-6));
    let hub = Arc::new(Mutex::new(hub));
    let senders: Senders = Arc::default();
    let (tx, mut rx) = oneshot::channel::<()>();

    let task = tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = &mut rx => break,
                _ = interval.tick() => {
                    let frames = hub.lock().expect("hub poisoned").tick();
                    let senders = senders.lock().expect("senders poisoned");
                    for (conn, frame) in frames {
                        if let Some(s) = senders.get(&conn) {
                            let _ = s.send(frame);
                        }
                    }
                }
                accepted = listener.accept() => {
                    let Ok((stream, peer)) = accepted else { continue };
                    tokio::spawn(connection(stream, peer, hub.clone(), senders.clone()));
                }
            }
        }
    });
    Ok(ServerHandle {
        local_addr,
        shutdown: Some(tx),
        task,
    })
}

async fn connection(
    stream: tokio::net::TcpStream,
    peer: SocketAddr,
    hub: Arc<Mutex<Hub>>,
    senders: Senders,
) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            tracing::debug!(%peer, error = %e, "websocket handshake failed");
            return;
        }
    };
    let (mut sink, mut source) = ws.split();
    let conn = hub.lock().expect("hub poisoned").connect();
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    senders.lock().expect("senders poisoned").insert(conn, tx.clone());
    tracing::info!(%peer, conn, "client connected");

    let writer = tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            if sink.send(Message::text(frame)).await.is_err() {
                break;
            }
        }
    });
    while let Some(msg) = source.next().await {
        let replies = match msg {
            Ok(Message::Text(text)) => hub.lock().expect("hub poisoned").handle_text(conn, text.as_str()),
            Ok(Message::Binary(_)) => vec![status_error(None, "binary frames are not supported")],
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        for r in replies {
            let _ = tx.send(r);
        }
    }
    hub.lock().expect("hub poisoned").disconnect(conn);
    senders.lock().expect("senders poisoned").remove(&conn);
    drop(tx);
    writer.abort();
    tracing::info!(%peer, conn, "client disconnected");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting() {
        assert_eq!(format_float(0.0), "0.0");
        assert_eq!(format_float(1.0), "1.0");
        assert_eq!(format_float(0.1), "0.1");
        assert_eq!(format_float(1.0 / 3.0), "0.333333333");
        assert_eq!(format_float(-2.5), "-2.5");
        assert_eq!(format_float(123456789.0), "123456789.0");
        assert_eq!(format_float(1.5e10), "1.5e10");
        assert_eq!(format_float(2.5e-7), "2.5e-7");
        assert_eq!(format_float(std::f64::consts::PI), "3.14159265");
        assert_eq!(format_float(f64::NAN), "null");
    }

    #[test]
    fn canonical_sorts_keys() {
        let v = json!({ "b": 1, "a": [0.5, true, null], "c": { "z": "x", "y": 2.0 } });
        assert_eq!(canonical(&v), r#"{"a":[0.5,true,null],"b":1,"c":{"y":2.0,"z":"x"}}"#);
    }
}
