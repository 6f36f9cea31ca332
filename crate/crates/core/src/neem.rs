//! Episodic memories: events and sampled transforms recorded during a simulated episode,
//! stored as newline-delimited JSON and queried afterwards.
//!
//! An episode `<id>` on disk is three files:
//!
//! * `<id>.events.jsonl`: a header line followed by one [`NeemEvent`] per line,
//! * `<id>.transforms.jsonl`: one [`TransformSample`] per line,
//! * `<id>.meta.json`: wall-clock information, kept apart so the other two files are
//!   byte-identical across replays.

use crate::geometry::Pose;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FORMAT: &str = "mentalsim-neem/1";
/// Transform sampling period in seconds of sim time.
pub const TRANSFORM_PERIOD: f64 = 0.1;

/// Failure reasons used by the bundled controllers and plans.
pub mod reasons {
    pub const OBJECT_NOT_FOUND: &str = "perception-object-not-found";
    pub const BASE_COLLISION: &str = "base-pose-in-collision";
    pub const UNREACHABLE: &str = "object-unreachable";
    pub const GRASP_FAILED: &str = "grasp-failed";
    pub const RETRIES_EXHAUSTED: &str = "retries-exhausted";
    pub const NOT_HOLDING: &str = "nothing-grasped";
    pub const NAVIGATION_TIMEOUT: &str = "navigation-timeout";
    pub const INVALID_STEP: &str = "invalid-step";
}

#[derive(Debug, Error)]
pub enum NeemError {
    #[error("episode '{0}' is closed")]
    EpisodeClosed(String),
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
    #[error("ActionEnd for '{0}' has no open ActionStart")]
    UnpairedActionEnd(String),
    #[error("malformed episode file {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("no transforms recorded for node '{0}'")]
    UnknownNode(String),
    #[error("time {t} is outside the recorded span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("parameter path '{0}' does not resolve to numbers")]
    UnknownPath(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    ActionStart,
    ActionEnd,
    Grasp,
    Release,
    Collision,
    Settle,
    PerceiveRequest,
    PerceiveResult,
    CommandIssued,
}

impl EventKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ActionStart" => Self::ActionStart,
            "ActionEnd" => Self::ActionEnd,
            "Grasp" => Self::Grasp,
            "Release" => Self::Release,
            "Collision" => Self::Collision,
            "Settle" => Self::Settle,
            "PerceiveRequest" => Self::PerceiveRequest,
            "PerceiveResult" => Self::PerceiveResult,
            "CommandIssued" => Self::CommandIssued,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure(String),
}

impl Outcome {
    pub fn is_success(&self) -> bool {
        matches!(self, Outcome::Success)
    }
}

/// Action name plus a token unique within the episode; pairs ActionStart with ActionEnd.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRef {
    pub name: String,
    pub token: u64,
}

/// An event before the recorder assigns episode, id and time.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDraft {
    pub kind: EventKind,
    pub actor: String,
    pub participants: Vec<String>,
    pub outcome: Option<Outcome>,
    pub action: Option<ActionRef>,
    pub payload: Value,
}

impl EventDraft {
    pub fn new(kind: EventKind, actor: impl Into<String>) -> Self {
        Self {
            kind,
            actor: actor.into(),
            participants: Vec::new(),
            outcome: None,
            action: None,
            payload: Value::Null,
        }
    }

    pub fn participants<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.participants = names.into_iter().map(Into::into).collect();
        self
    }

    pub fn outcome(mut self, outcome: Outcome) -> Self {
        self.outcome = Some(outcome);
        self
    }

    pub fn action(mut self, name: impl Into<String>, token: u64) -> Self {
        self.action = Some(ActionRef {
            name: name.into(),
            token,
        });
        self
    }

    pub fn payload(mut self, payload: Value) -> Self {
        self.payload = payload;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeemEvent {
    pub episode_id: String,
    pub event_id: u64,
    pub sim_time: f64,
    pub kind: EventKind,
    pub actor: String,
    pub participants: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionRef>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSample {
    pub sim_time: f64,
    pub node: String,
    pub world_pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub format: String,
    pub episode_id: String,
    /// SHA-256 of the world description the episode ran in.
    pub world_hash: String,
    pub seed: u64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub episode_id: String,
    /// Seconds since the Unix epoch when recording started.
    pub wall_clock_start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub header: EpisodeHeader,
    pub events: Vec<NeemEvent>,
    pub transforms: Vec<TransformSample>,
}

struct EpisodeFiles {
    events: BufWriter<File>,
    transforms: BufWriter<File>,
}

/// Append-only sink for one episode. Keeps an in-memory copy and optionally mirrors
/// every record to disk.
pub struct Recorder {
    header: EpisodeHeader,
    events: Vec<NeemEvent>,
    transforms: Vec<TransformSample>,
    open_actions: BTreeMap<u64, String>,
    files: Option<EpisodeFiles>,
    closed: bool,
}

impl std::fmt::Debug for Recorder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Recorder")
            .field("episode_id", &self.header.episode_id)
            .field("events", &self.events.len())
            .field("closed", &self.closed)
            .finish()
    }
}

pub fn episode_paths(dir: &Path, episode_id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{episode_id}.events.jsonl")),
        dir.join(format!("{episode_id}.transforms.jsonl")),
        dir.join(format!("{episode_id}.meta.json")),
    )
}

impl Recorder {
    /// In-memory recorder.
    pub fn in_memory(header: EpisodeHeader) -> Self {
        Self {
            header,
            events: Vec::new(),
            transforms: Vec::new(),
            open_actions: BTreeMap::new(),
            files: None,
            closed: false,
        }
    }

    /// Recorder that also writes the episode files into `dir`.
    pub fn to_dir(header: EpisodeHeader, dir: &Path, wall_clock_start: f64) -> Result<Self, NeemError> {
        fs::create_dir_all(dir)?;
        let (ev, tf, meta) = episode_paths(dir, &header.episode_id);
        let mut events = BufWriter::new(File::create(ev)?);
        serde_json::to_writer(&mut events, &header).map_err(std::io::Error::from)?;
        events.write_all(b"\n")?;
        let transforms = BufWriter::new(File::create(tf)?);
        let meta_doc = EpisodeMeta {
            episode_id: header.episode_id.clone(),
            wall_clock_start,
        };
        fs::write(meta, serde_json::to_vec(&meta_doc).map_err(std::io::Error::from)?)?;
        let mut r = Self::in_memory(header);
        r.files = Some(EpisodeFiles { events, transforms });
        Ok(r)
    }

    pub fn episode_id(&self) -> &str {
        &self.header.episode_id
    }

    pub fn header(&self) -> &EpisodeHeader {
        &self.header
    }

    pub fn events(&self) -> &[NeemEvent] {
        &self.events
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn ensure_open(&self) -> Result<(), NeemError> {
        if self.closed {
            Err(NeemError::EpisodeClosed(self.header.episode_id.clone()))
        } else {
            Ok(())
        }
    }

    /// Appends an event with the next id. Time is clamped to stay non-decreasing.
    pub fn record(&mut self, draft: EventDraft, sim_time: f64) -> Result<&NeemEvent, NeemError> {
        self.ensure_open()?;
        match (draft.kind, &draft.action) {
            (EventKind::ActionStart, Some(a)) => {
                self.open_actions.insert(a.token, a.name.clone());
            }
            (EventKind::ActionEnd, Some(a)) => {
                if self.open_actions.get(&a.token) != Some(&a.name) {
                    return Err(NeemError::UnpairedActionEnd(format!("{}#{}", a.name, a.token)));
                }
                self.open_actions.remove(&a.token);
            }
            (EventKind::ActionEnd, None) => {
                return Err(NeemError::UnpairedActionEnd("<none>".into()));
            }
            _ => {}
        }
        let last_time = self.events.last().map(|e| e.sim_time).unwrap_or(f64::NEG_INFINITY);
        let event = NeemEvent {
            episode_id: self.header.episode_id.clone(),
            event_id: self.events.len() as u64 + 1,
            sim_time: sim_time.max(last_time),
            kind: draft.kind,
            actor: draft.actor,
            participants: draft.participants,
            outcome: draft.outcome,
            action: draft.action,
            payload: draft.payload,
        };
        if let Some(files) = &mut self.files {
            serde_json::to_writer(&mut files.events, &event).map_err(std::io::Error::from)?;
            files.events.write_all(b"\n")?;
            if event.kind == EventKind::ActionEnd {
                files.events.flush()?;
            }
        }
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }

    pub fn sample(&mut self, sample: TransformSample) -> Result<(), NeemError> {
        self.ensure_open()?;
        if let Some(files) = &mut self.files {
            serde_json::to_writer(&mut files.transforms, &sample).map_err(std::io::Error::from)?;
            files.transforms.write_all(b"\n")?;
        }
        self.transforms.push(sample);
        Ok(())
    }

    /// Flushes and seals the episode; further records fail with `EpisodeClosed`.
    pub fn close(&mut self) -> Result<Episode, NeemError> {
        self.ensure_open()?;
        if let Some(files) = &mut self.files {
            files.events.flush()?;
            files.transforms.flush()?;
        }
        self.files = None;
        self.closed = true;
        Ok(Episode {
            header: self.header.clone(),
            events: self.events.clone(),
            transforms: self.transforms.clone(),
        })
    }
}

impl Episode {
    /// Writes all three episode files into `dir`.
    pub fn store(&self, dir: &Path, wall_clock_start: f64) -> Result<(), NeemError> {
        let mut r = Recorder::to_dir(self.header.clone(), dir, wall_clock_start)?;
        let files = r.files.as_mut().expect("dir recorder");
        for e in &self.events {
            serde_json::to_writer(&mut files.events, e).map_err(std::io::Error::from)?;
            files.events.write_all(b"\n")?;
        }
        for s in &self.transforms {
            serde_json::to_writer(&mut files.transforms, s).map_err(std::io::Error::from)?;
            files.transforms.write_all(b"\n")?;
        }
        r.close()?;
        Ok(())
    }

    /// Loads an episode from its events file; the transforms file next to it is optional.
    pub fn load(events_path: &Path) -> Result<Episode, NeemError> {
        let malformed = |message: String| NeemError::Malformed {
            path: events_path.display().to_string(),
            message,
        };
        let reader = BufReader::new(File::open(events_path)?);
        let mut lines = reader.lines();
        let header_line = lines.next().ok_or_else(|| malformed("empty file".into()))??;
        let header: EpisodeHeader =
            serde_json::from_str(&header_line).map_err(|e| malformed(format!("header: {e}")))?;
        let mut events = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(
                serde_json::from_str(&line).map_err(|e| malformed(format!("line {}: {e}", i + 2)))?,
            );
        }
        let tf_path = transforms_path_for(events_path);
        let mut transforms = Vec::new();
        if tf_path.exists() {
            for (i, line) in BufReader::new(File::open(&tf_path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                transforms.push(serde_json::from_str(&line).map_err(|e| NeemError::Malformed {
                    path: tf_path.display().to_string(),
                    message: format!("line {}: {e}", i + 1),
                })?);
            }
        }
        Ok(Episode {
            header,
            events,
            transforms,
        })
    }

    /// Loads every `*.events.jsonl` in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Vec<Episode>, NeemError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.ends_with(".events.jsonl"))
            })
            .collect();
        paths.sort();
        paths.iter().map(|p| Episode::load(p)).collect()
    }

    /// Every event matching all set filter fields, in recorded order.
    pub fn query_events(&self, filter: &EventFilter) -> Vec<&NeemEvent> {
        self.events.iter().filter(|e| filter.matches(e)).collect()
    }

    /// Interpolated world pose of `node` at time `t`.
    pub fn pose_at(&self, node: &str, t: f64) -> Result<Pose, NeemError> {
        let samples: Vec<&TransformSample> =
            self.transforms.iter().filter(|s| s.node == node).collect();
        let (first, last) = match (samples.first(), samples.last()) {
            (Some(f), Some(l)) => (f.sim_time, l.sim_time),
            _ => return Err(NeemError::UnknownNode(node.to_string())),
        };
        if !(t >= first && t <= last) {
            return Err(NeemError::OutOfRange {
                t,
                start: first,
                end: last,
            });
        }
        let i = samples.partition_point(|s| s.sim_time <= t);
        // i ≥ 1 because t ≥ first.
        let a = samples[i - 1];
        if a.sim_time == t || i == samples.len() {
            return Ok(a.world_pose);
        }
        let b = samples[i];
        let s = (t - a.sim_time) / (b.sim_time - a.sim_time);
        Ok(a.world_pose.interpolate(&b.world_pose, s))
    }
}

fn transforms_path_for(events_path: &Path) -> PathBuf {
    let name = events_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let stem = name.strip_suffix(".events.jsonl").unwrap_or(name);
    events_path.with_file_name(format!("{stem}.transforms.jsonl"))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventFilter {
    pub kind: Option<EventKind>,
    pub participant: Option<String>,
    /// `Some(true)` keeps successes, `Some(false)` keeps failures.
    pub success: Option<bool>,
    pub time_range: Option<(f64, f64)>,
}

impl EventFilter {
    pub fn matches(&self, e: &NeemEvent) -> bool {
        if self.kind.is_some_and(|k| k != e.kind) {
            return false;
        }
        if let Some(p) = &self.participant {
            if !e.participants.iter().any(|x| x == p) {
                return false;
            }
        }
        if let Some(want) = self.success {
            match &e.outcome {
                Some(o) if o.is_success() == want => {}
                _ => return false,
            }
        }
        if let Some((lo, hi)) = self.time_range {
            if e.sim_time < lo || e.sim_time > hi {
                return false;
            }
        }
        true
    }
}

/// For every successful action named `action`, the numbers at `path` in its ActionEnd
/// payload (falling back to the matching ActionStart payload). Episode order, then event
/// order.
///
/// Path segments are object keys. A final segment that is not a key but is made of
/// single-letter keys (`xy`, `xyz`) selects those fields in order.
pub fn successful_action_params(
    episodes: &[Episode],
    action: &str,
    path: &str,
) -> Result<Vec<Vec<f64>>, NeemError> {
    let mut out = Vec::new();
    for ep in episodes {
        let mut starts: BTreeMap<u64, &NeemEvent> = BTreeMap::new();
        for e in &ep.events {
            let Some(a) = e.action.as_ref().filter(|a| a.name == action) else {
                continue;
            };
            match e.kind {
                EventKind::ActionStart => {
                    starts.insert(a.token, e);
                }
                EventKind::ActionEnd if e.outcome.as_ref().is_some_and(Outcome::is_success) => {
                    let v = resolve_path(&e.payload, path).or_else(|| {
                        starts
                            .get(&a.token)
                            .and_then(|s| resolve_path(&s.payload, path))
                    });
                    out.push(v.ok_or_else(|| NeemError::UnknownPath(path.to_string()))?);
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

pub fn resolve_path(value: &Value, path: &str) -> Option<Vec<f64>> {
    let mut cur = value;
    let segments: Vec<&str> = path.split('.').filter(|s| !s.is_empty()).collect();
    for (i, seg) in segments.iter().enumerate() {
        match cur.get(*seg) {
            Some(v) => cur = v,
            None if i + 1 == segments.len() => {
                let obj = cur.as_object()?;
                return seg
                    .chars()
                    .map(|c| obj.get(&c.to_string()).and_then(Value::as_f64))
                    .collect();
            }
            None => return None,
        }
    }
    match cur {
        Value::Number(n) => n.as_f64().map(|v| vec![v]),
        Value::Array(items) => items.iter().map(Value::as_f64).collect(),
        _ => None,
    }
}

/// Checks the ActionStart/ActionEnd pairing and id/time monotonicity of an event list.
pub fn check_event_invariants(events: &[NeemEvent]) -> Result<(), String> {
    let mut open: BTreeMap<u64, &str> = BTreeMap::new();
    let mut last: Option<&NeemEvent> = None;
    for e in events {
        if let Some(prev) = last {
            if e.event_id <= prev.event_id {
                return Err(format!("event id {} not increasing", e.event_id));
            }
            if e.sim_time < prev.sim_time {
                return Err(format!("event {} goes back in time", e.event_id));
            }
        }
        match (e.kind, &e.action) {
            (EventKind::ActionStart, Some(a)) => {
                open.insert(a.token, &a.name);
            }
            (EventKind::ActionEnd, Some(a)) => {
                if open.remove(&a.token) != Some(a.name.as_str()) {
                    return Err(format!("event {} ends an action that never started", e.event_id));
                }
            }
            (EventKind::ActionEnd, None) => {
                return Err(format!("event {} is an ActionEnd without action", e.event_id))
            }
            _ => {}
        }
        last = Some(e);
    }
    Ok(())
}

/// Every Grasp must come after a PerceiveResult, and the most recent one must be a
/// success that lists the grasped object and, if it names a target, targeted it. Returns the id of the first offending Grasp.
pub fn check_grasp_after_perception(events: &[NeemEvent]) -> Result<(), u64> {
    let mut last_perception: Option<&NeemEvent> = None;
    for e in events {
        match e.kind {
            EventKind::PerceiveResult => last_perception = Some(e),
            EventKind::Grasp => {
                let object = e.participants.first();
                let ok = last_perception.is_some_and(|p| {
                    let target = p.payload.get("target").and_then(Value::as_str);
                    p.outcome.as_ref().is_some_and(Outcome::is_success)
                        && object.is_some_and(|o| p.participants.contains(o) && target.is_none_or(|t| t == o))
                });
                if !ok {
                    return Err(e.event_id);
                }
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn header() -> EpisodeHeader {
        EpisodeHeader {
            format: FORMAT.into(),
            episode_id: "ep-test".into(),
            world_hash: "abc".into(),
            seed: 1,
            dt: 0.01,
        }
    }

    #[test]
    fn ids_follow_previous() {
        let mut r = Recorder::in_memory(header());
        r.record(EventDraft::new(EventKind::CommandIssued, "test"), 0.0).unwrap();
        let e = r
            .record(EventDraft::new(EventKind::Grasp, "gripper").participants(["milk"]), 3.2)
            .unwrap();
        assert_eq!(e.event_id, 2);
        assert_eq!(e.sim_time, 3.2);
    }

    #[test]
    fn closed_episode_rejects_records() {
        let mut r = Recorder::in_memory(header());
        r.close().unwrap();
        assert!(matches!(
            r.record(EventDraft::new(EventKind::Grasp, "g"), 0.0),
            Err(NeemError::EpisodeClosed(_))
        ));
    }

    #[test]
    fn unpaired_end_rejected() {
        let mut r = Recorder::in_memory(header());
        let end = EventDraft::new(EventKind::ActionEnd, "plan").action("fetch", 1);
        assert!(matches!(r.record(end, 0.0), Err(NeemError::UnpairedActionEnd(_))));
    }

    #[test]
    fn path_resolution() {
        let v = json!({"base_pose": {"x": 1.5, "y": -2.0, "theta": 0.1}, "q": [1, 2]});
        assert_eq!(resolve_path(&v, "base_pose.xy"), Some(vec![1.5, -2.0]));
        assert_eq!(resolve_path(&v, "base_pose.theta"), Some(vec![0.1]));
        assert_eq!(resolve_path(&v, "q"), Some(vec![1.0, 2.0]));
        assert_eq!(resolve_path(&v, "base_pose.xq"), None);
        assert_eq!(resolve_path(&v, "nothing.x"), None);
    }

    #[test]
    fn pose_interpolation_and_range() {
        let mut r = Recorder::in_memory(header());
        r.sample(TransformSample { sim_time: 0.0, node: "m".into(), world_pose: Pose::identity() }).unwrap();
        r.sample(TransformSample {
            sim_time: 1.0,
            node: "m".into(),
            world_pose: Pose::from_translation(1.0, 0.0, 0.0),
        })
        .unwrap();
        let ep = r.close().unwrap();
        assert_eq!(ep.pose_at("m", 1.0).unwrap(), Pose::from_translation(1.0, 0.0, 0.0));
        assert!((ep.pose_at("m", 0.5).unwrap().position.x - 0.5).abs() < 1e-12);
        assert!(matches!(ep.pose_at("m", 1.5), Err(NeemError::OutOfRange { .. })));
        assert!(matches!(ep.pose_at("x", 0.5), Err(NeemError::UnknownNode(_))));
    }
}
