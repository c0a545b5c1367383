//! Clip extraction, counterfactual corruption, loss weights, heterogeneous
//! mixing and the JSON-lines log format.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec2};
use crate::map::MapGraph;
use crate::rectifier::{env_for, EnvGrid};
use crate::scenario_gen::PerturbationSpec;
use crate::scene::{AgentInfo, LogFrame, LogTag, Provenance, SceneLog, SCHEMA_VERSION};
use crate::world_sim::{AgentKind, EventRecord, EventType, Pose6DoF};

pub const CLIP_LEN: usize = 36;
/// Clip-relative frame at which an extracted event is placed.
pub const EVENT_OFFSET: usize = 12;
pub const NOMINAL_STRIDE: usize = 18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory2D {
    pub agent_id: u32,
    pub points: Vec<Vec2>,
}

impl Trajectory2D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory6DoF {
    pub agent_id: u32,
    pub poses: Vec<Pose6DoF>,
}

impl Trajectory6DoF {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn to_2d(&self) -> Trajectory2D {
        Trajectory2D {
            agent_id: self.agent_id,
            points: self.poses.iter().map(|p| p.position()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipSource {
    Nominal,
    PhysicsRich,
}

/// A fixed-length window of a scene log.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub source: ClipSource,
    /// Log frame index of the first clip frame.
    pub start_frame: usize,
    pub frames: Vec<LogFrame>,
    /// Events with `t_event` relative to the clip start.
    pub events: Vec<EventRecord>,
    pub involved_ids: BTreeSet<u32>,
    /// Perturbed vehicle, or the ego for unperturbed logs.
    pub subject_id: u32,
    pub ego_id: u32,
    /// Dynamic agents in trajectory order.
    pub agents: Vec<AgentInfo>,
    pub map: Arc<MapGraph>,
    pub dt: f64,
    pub seed: u64,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn agent_index(&self, id: u32) -> Option<usize> {
        self.agents.iter().position(|a| a.agent_id == id)
    }

    pub fn ground_truth(&self) -> Vec<Trajectory6DoF> {
        self.agents
            .iter()
            .map(|a| Trajectory6DoF {
                agent_id: a.agent_id,
                poses: self
                    .frames
                    .iter()
                    .map(|f| f.agent(a.agent_id).expect("agent present in every frame").pose)
                    .collect(),
            })
            .collect()
    }

    pub fn ground_truth_2d(&self) -> Vec<Trajectory2D> {
        self.ground_truth().iter().map(Trajectory6DoF::to_2d).collect()
    }

    /// Earliest clip-relative event frame usable for corruption (`>= 2`).
    pub fn corruption_frame(&self) -> Option<usize> {
        self.events.iter().map(|e| e.t_event).filter(|&t| t >= 2).min()
    }
}

/// Cuts a log into clips: one physics-rich clip per event, placed at
/// relative frame 12 when the log bounds allow, or sliding nominal windows
/// with stride 18 for event-free logs.
pub fn extract_clips(log: &SceneLog) -> Vec<Clip> {
    let n = log.len();
    if n < CLIP_LEN {
        return Vec::new();
    }
    let agents: Vec<AgentInfo> = log
        .agents
        .iter()
        .filter(|a| a.kind != AgentKind::StaticObstacle)
        .copied()
        .collect();
    let make = |start: usize, source: ClipSource| {
        let end = start + CLIP_LEN;
        let events: Vec<EventRecord> = log
            .events
            .iter()
            .filter(|e| (start..end).contains(&e.t_event))
            .map(|e| EventRecord {
                t_event: e.t_event - start,
                ..*e
            })
            .collect();
        let mut clip = Clip {
            source,
            start_frame: start,
            frames: log.frames[start..end].to_vec(),
            events,
            involved_ids: BTreeSet::new(),
            subject_id: log.subject_id(),
            ego_id: log.ego_id,
            agents: agents.clone(),
            map: Arc::clone(&log.map),
            dt: log.dt(),
            seed: log.seed,
        };
        clip.involved_ids = select_involved(&clip);
        clip
    };
    if log.events.is_empty() {
        (0..=n - CLIP_LEN)
            .step_by(NOMINAL_STRIDE)
            .map(|s| make(s, ClipSource::Nominal))
            .collect()
    } else {
        log.events
            .iter()
            .map(|e| {
                let start = e.t_event.saturating_sub(EVENT_OFFSET).min(n - CLIP_LEN);
                make(start, ClipSource::PhysicsRich)
            })
            .collect()
    }
}

/// Counterfactual inputs: ground truth before the first usable event frame
/// `t_c`, then constant-velocity extrapolation of the last pre-event step.
pub fn corrupt_counterfactual(clip: &Clip) -> Result<Vec<Trajectory2D>> {
    if clip.source != ClipSource::PhysicsRich {
        return Err(Error::CorruptionSkip("clip is not physics-rich".into()));
    }
    let t_c = clip
        .corruption_frame()
        .ok_or_else(|| Error::CorruptionSkip("no event at clip frame >= 2".into()))?;
    Ok(clip
        .ground_truth_2d()
        .into_iter()
        .map(|gt| Trajectory2D {
            agent_id: gt.agent_id,
            points: extrapolate_from(&gt.points, t_c),
        })
        .collect())
}

/// Keeps `pts[..t_c]` and continues with the displacement `pts[t_c-1] - pts[t_c-2]`.
pub fn extrapolate_from(pts: &[Vec2], t_c: usize) -> Vec<Vec2> {
    assert!(t_c >= 2 && t_c <= pts.len());
    let last = pts[t_c - 1];
    let step = last - pts[t_c - 2];
    let mut out = pts[..t_c].to_vec();
    out.extend((1..=pts.len() - t_c).map(|k| last + step * k as f64));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightSpec {
    pub lambda_event: f64,
    pub lambda_agent: f64,
    pub window_pre: usize,
    pub window_post: usize,
}

impl Default for WeightSpec {
    fn default() -> Self {
        Self {
            lambda_event: 10.0,
            lambda_agent: 5.0,
            window_pre: 1,
            window_post: 10,
        }
    }
}

impl WeightSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_event >= 1.0 && self.lambda_event.is_finite()) {
            return Err(Error::Config(format!("lambda_event {} must be >= 1", self.lambda_event)));
        }
        if !(self.lambda_agent >= 1.0 && self.lambda_agent.is_finite()) {
            return Err(Error::Config(format!("lambda_agent {} must be >= 1", self.lambda_agent)));
        }
        Ok(())
    }

    /// Event window `[s_e, e_e]` clamped to `[0, t_len - 1]`.
    pub fn window(&self, t_event: usize, t_len: usize) -> (usize, usize) {
        (
            t_event.saturating_sub(self.window_pre),
            (t_event + self.window_post).min(t_len - 1),
        )
    }
}

/// Weight of a single event at time `t`: decays exponentially from
/// `lambda_event` at the window start to exactly 1 at the window end.
pub fn event_weight(t: usize, window: (usize, usize), lambda_event: f64) -> f64 {
    let (s, e) = window;
    if t < s || t > e {
        return 1.0;
    }
    if lambda_event == 1.0 {
        return 1.0;
    }
    if e == s {
        return lambda_event;
    }
    if t == e {
        return 1.0;
    }
    let rate = (1.0 / lambda_event).ln() / (e - s) as f64;
    lambda_event * (rate * (t - s) as f64).exp()
}

/// Per-frame temporal weights: pointwise maximum over event schedules, 1
/// outside every window.
pub fn temporal_weights(event_frames: &[usize], t_len: usize, spec: &WeightSpec) -> Vec<f64> {
    (0..t_len)
        .map(|t| {
            event_frames
                .iter()
                .map(|&te| event_weight(t, spec.window(te, t_len), spec.lambda_event))
                .fold(1.0, f64::max)
        })
        .collect()
}

/// N x T weight matrix: temporal weights, multiplied by `lambda_agent` on
/// involved agents' rows.
pub fn compute_weights(clip: &Clip, spec: &WeightSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let frames: Vec<usize> = clip.events.iter().map(|e| e.t_event).collect();
    let tw = temporal_weights(&frames, clip.len(), spec);
    Ok(Array2::from_shape_fn((clip.agents.len(), clip.len()), |(i, t)| {
        if clip.involved_ids.contains(&clip.agents[i].agent_id) {
            tw[t] * spec.lambda_agent
        } else {
            tw[t]
        }
    }))
}

/// Subjects of every event, plus for dynamic collisions the dynamic agent
/// nearest the subject at the event frame (ties to the lower id).
pub fn select_involved(clip: &Clip) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for e in &clip.events {
        out.insert(e.subject_id);
        if e.event_type != EventType::CollisionDynamic {
            continue;
        }
        let frame = &clip.frames[e.t_event];
        let Some(subject) = frame.agent(e.subject_id) else { continue };
        let mut best: Option<(f64, u32)> = None;
        for a in &frame.agents {
            if a.agent_id == e.subject_id || clip.agent_index(a.agent_id).is_none() {
                continue;
            }
            let d = a.pose.position().distance(subject.pose.position());
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd - 1e-9 || ((d - bd).abs() <= 1e-9 && a.agent_id < bid),
            };
            if better {
                best = Some((d, a.agent_id));
            }
        }
        if let Some((_, id)) = best {
            out.insert(id);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Nominal,
    Rich,
}

/// Infinite seeded sampler: picks a pool with probability 1/2, then a clip
/// uniformly within it.
#[derive(Debug, Clone)]
pub struct HeteroSampler<'a, T> {
    nominal: &'a [T],
    rich: &'a [T],
    rng: ChaCha8Rng,
}

pub fn mix_heterogeneous<'a, T>(nominal: &'a [T], rich: &'a [T], seed: u64) -> Result<HeteroSampler<'a, T>> {
    if nominal.is_empty() || rich.is_empty() {
        return Err(Error::Config(format!(
            "heterogeneous mixing needs two non-empty pools (nominal {}, rich {})",
            nominal.len(),
            rich.len()
        )));
    }
    Ok(HeteroSampler {
        nominal,
        rich,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl<'a, T> Iterator for HeteroSampler<'a, T> {
    type Item = (Pool, usize, &'a T);

    fn next(&mut self) -> Option<Self::Item> {
        let (pool, items) = if self.rng.random_bool(0.5) {
            (Pool::Rich, self.rich)
        } else {
            (Pool::Nominal, self.nominal)
        };
        let i = self.rng.random_range(0..items.len());
        Some((pool, i, &items[i]))
    }
}

/// Supervised example: (possibly corrupted) 2D inputs, 6-DoF targets and
/// per-agent, per-frame loss weights.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub inputs: Vec<Trajectory2D>,
    pub targets: Vec<Trajectory6DoF>,
    pub weights: Array2<f64>,
    pub map: Arc<MapGraph>,
    pub env: Arc<EnvGrid>,
    pub agents: Vec<AgentInfo>,
    pub involved_ids: BTreeSet<u32>,
    pub subject_id: u32,
    pub events: Vec<EventRecord>,
    pub source: ClipSource,
    /// Corruption frame for physics-rich pairs.
    pub t_c: Option<usize>,
}

impl TrainingPair {
    pub fn n_agents(&self) -> usize {
        self.inputs.len()
    }

    pub fn horizon(&self) -> usize {
        self.inputs.first().map_or(0, Trajectory2D::len)
    }

    pub fn involved_indices(&self) -> Vec<usize> {
        self.agents
            .iter()
            .enumerate()
            .filter(|(_, a)| self.involved_ids.contains(&a.agent_id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.len();
        let t = self.horizon();
        if n == 0 || self.targets.len() != n || self.agents.len() != n {
            return Err(Error::Input("pair inputs, targets and agents disagree on N".into()));
        }
        if self.weights.dim() != (n, t) {
            return Err(Error::Input(format!("weights {:?} do not match {n} x {t}", self.weights.dim())));
        }
        for (i, (a, b)) in self.inputs.iter().zip(&self.targets).enumerate() {
            if a.len() != t || b.len() != t {
                return Err(Error::Input(format!("agent {i} trajectory length differs from {t}")));
            }
        }
        Ok(())
    }
}

/// Builds a training pair from a clip. Physics-rich clips get counterfactual
/// inputs; nominal clips use the ground truth itself.
pub fn build_pair(clip: &Clip, spec: &WeightSpec, env_resolution: f64) -> Result<TrainingPair> {
    let targets = clip.ground_truth();
    let (inputs, t_c) = match clip.source {
        ClipSource::PhysicsRich => (corrupt_counterfactual(clip)?, clip.corruption_frame()),
        ClipSource::Nominal => (clip.ground_truth_2d(), None),
    };
    let env = env_for(&clip.map, &inputs, env_resolution)?;
    let pair = TrainingPair {
        weights: compute_weights(clip, spec)?,
        inputs,
        targets,
        map: Arc::clone(&clip.map),
        env: Arc::new(env),
        agents: clip.agents.clone(),
        involved_ids: clip.involved_ids.clone(),
        subject_id: clip.subject_id,
        events: clip.events.clone(),
        source: clip.source,
        t_c,
    };
    pair.validate()?;
    Ok(pair)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema_version: String,
    n_frames: usize,
    rate_hz: u32,
    dt: f64,
    seed: u64,
    provenance: Provenance,
    tag: LogTag,
    ego_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    perturbed_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    perturbation: Option<PerturbationSpec>,
    map: MapGraph,
    agents: Vec<AgentInfo>,
    events: Vec<EventRecord>,
}

fn check_frame_finite(f: &LogFrame) -> Result<()> {
    for a in &f.agents {
        let fields = a.pose.to_array();
        let names = ["x", "y", "z", "roll", "pitch", "yaw"];
        for (v, n) in fields.iter().zip(names) {
            if !v.is_finite() {
                return Err(Error::parse(
                    format!("frame {} agent {} field pose.{n}", f.frame_index, a.agent_id),
                    "non-finite value",
                ));
            }
        }
        for (v, n) in [(a.velocity.x, "velocity.x"), (a.velocity.y, "velocity.y"), (a.yaw_rate, "yaw_rate")] {
            if !v.is_finite() {
                return Err(Error::parse(
                    format!("frame {} agent {} field {n}", f.frame_index, a.agent_id),
                    "non-finite value",
                ));
            }
        }
        if !(-std::f64::consts::PI < a.pose.yaw && a.pose.yaw <= std::f64::consts::PI)
            || wrap_angle(a.pose.roll) != a.pose.roll
            || wrap_angle(a.pose.pitch) != a.pose.pitch
        {
            return Err(Error::parse(
                format!("frame {} agent {}", f.frame_index, a.agent_id),
                "angle outside (-pi, pi]",
            ));
        }
    }
    Ok(())
}

/// Writes a log as JSON lines: one header line (declaring the frame count),
/// then one line per frame.
pub fn serialize<W: Write>(log: &SceneLog, mut out: W) -> Result<()> {
    let io = |e: std::io::Error| Error::Input(format!("write failed: {e}"));
    for f in &log.frames {
        check_frame_finite(f).map_err(|e| Error::Input(e.to_string()))?;
    }
    let header = Header {
        schema_version: log.schema_version.clone(),
        n_frames: log.frames.len(),
        rate_hz: log.rate_hz,
        dt: log.dt(),
        seed: log.seed,
        provenance: log.provenance,
        tag: log.tag,
        ego_id: log.ego_id,
        perturbed_id: log.perturbed_id,
        perturbation: log.perturbation,
        map: (*log.map).clone(),
        agents: log.agents.clone(),
        events: log.events.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::Input(e.to_string()))?;
    out.write_all(b"\n").map_err(io)?;
    for f in &log.frames {
        serde_json::to_writer(&mut out, f).map_err(|e| Error::Input(e.to_string()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

pub fn to_bytes(log: &SceneLog) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    serialize(log, &mut buf)?;
    Ok(buf)
}

pub fn deserialize<R: BufRead>(input: R) -> Result<SceneLog> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::parse("header", "empty stream"))?
        .map_err(|e| Error::parse("header", e.to_string()))?;
    let version: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| Error::parse("header", e.to_string()))?;
    match version.get("schema_version").and_then(|v| v.as_str()) {
        Some(SCHEMA_VERSION) => {}
        Some(other) => {
            return Err(Error::parse(
                "header.schema_version",
                format!("unsupported schema_version \"{other}\" (expected \"{SCHEMA_VERSION}\")"),
            ))
        }
        None => return Err(Error::parse("header.schema_version", "missing schema_version")),
    }
    let header: Header = serde_json::from_value(version).map_err(|e| Error::parse("header", e.to_string()))?;
    let map = MapGraph::new(header.map.lanes, header.map.static_obstacles)
        .map_err(|e| Error::parse("header.map", e.to_string()))?;
    let mut frames = Vec::with_capacity(header.n_frames);
    for k in 0..header.n_frames {
        let line = match lines.next() {
            Some(Ok(l)) => l,
            Some(Err(e)) => return Err(Error::parse(format!("frame {k}"), e.to_string())),
            None => {
                return Err(Error::parse(
                    format!("frame {k}"),
                    format!("truncated stream: header declares {} frames, found {k}", header.n_frames),
                ))
            }
        };
        let frame: LogFrame = serde_json::from_str(&line).map_err(|e| {
            let msg = if e.is_eof() {
                format!("truncated stream: {e}")
            } else {
                e.to_string()
            };
            Error::parse(format!("frame {k}"), msg)
        })?;
        if frame.frame_index != k {
            return Err(Error::parse(
                format!("frame {k}"),
                format!("frame_index {} out of order", frame.frame_index),
            ));
        }
        check_frame_finite(&frame)?;
        frames.push(frame);
    }
    if let Some(Ok(extra)) = lines.next() {
        if !extra.trim().is_empty() {
            return Err(Error::parse(
                format!("frame {}", header.n_frames),
                "data after the declared frame count",
            ));
        }
    }
    Ok(SceneLog {
        schema_version: header.schema_version,
        rate_hz: header.rate_hz,
        seed: header.seed,
        provenance: header.provenance,
        tag: header.tag,
        ego_id: header.ego_id,
        perturbed_id: header.perturbed_id,
        perturbation: header.perturbation,
        map: Arc::new(map),
        agents: header.agents,
        frames,
        events: header.events,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<SceneLog> {
    deserialize(bytes)
}

pub fn write_log(log: &SceneLog, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    serialize(log, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &std::path::Path) -> Result<SceneLog> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    deserialize(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })
}
