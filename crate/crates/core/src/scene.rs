//! Recorded simulation output: the [`SceneLog`] and its per-frame records.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::map::{Lane, MapGraph, Obstacle};
use crate::scenario_gen::PerturbationSpec;
use crate::world_sim::{AgentKind, AgentState, EventRecord, Extent, Pose6DoF, WorldState};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Unperturbed autopilot driving.
    Nominal,
    /// The ego vehicle itself is perturbed.
    EgoPerturbed,
    /// A spawned nearby adversary is perturbed.
    AdvPerturbed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogTag {
    EventFree,
    EventTagged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub agent_id: u32,
    pub kind: AgentKind,
    pub extent: Extent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentFrame {
    pub agent_id: u32,
    pub pose: Pose6DoF,
    pub velocity: Vec2,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFrame {
    pub frame_index: usize,
    pub agents: Vec<AgentFrame>,
}

impl LogFrame {
    pub fn agent(&self, id: u32) -> Option<&AgentFrame> {
        self.agents.iter().find(|a| a.agent_id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneLog {
    pub schema_version: String,
    pub rate_hz: u32,
    pub seed: u64,
    pub provenance: Provenance,
    pub tag: LogTag,
    pub ego_id: u32,
    pub perturbed_id: Option<u32>,
    pub perturbation: Option<PerturbationSpec>,
    pub map: Arc<MapGraph>,
    pub agents: Vec<AgentInfo>,
    pub frames: Vec<LogFrame>,
    pub events: Vec<EventRecord>,
}

impl SceneLog {
    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz as f64
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The agent whose behaviour drives the scenario (perturbed vehicle, or the
    /// ego for unperturbed logs).
    pub fn subject_id(&self) -> u32 {
        self.perturbed_id.unwrap_or(self.ego_id)
    }

    pub fn agent_info(&self, id: u32) -> Option<&AgentInfo> {
        self.agents.iter().find(|a| a.agent_id == id)
    }
}

/// Rounds to 9 significant decimal digits; idempotent, so quantized values
/// survive a text round trip bit-exactly.
pub fn q9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { 0.0 } else { v };
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

pub fn q9_vec(v: Vec2) -> Vec2 {
    Vec2::new(q9(v.x), q9(v.y))
}

pub fn q9_pose(p: &Pose6DoF) -> Pose6DoF {
    Pose6DoF::from_array(p.to_array().map(q9))
}

pub fn q9_extent(e: &Extent) -> Extent {
    Extent {
        length: q9(e.length),
        width: q9(e.width),
        height: q9(e.height),
    }
}

/// Quantizes every coordinate of a map (see [`q9`]).
pub fn quantize_map(map: &MapGraph) -> MapGraph {
    let lanes = map
        .lanes
        .iter()
        .map(|l| {
            let mut pts: Vec<Vec2> = l.centerline.iter().map(|p| q9_vec(*p)).collect();
            pts.dedup();
            Lane {
                centerline: pts,
                width: q9(l.width),
                lane_type: l.lane_type,
            }
        })
        .collect();
    let obstacles = map
        .static_obstacles
        .iter()
        .map(|o| Obstacle {
            center: q9_vec(o.center),
            yaw: q9(o.yaw),
            length: q9(o.length),
            width: q9(o.width),
        })
        .collect();
    MapGraph::new(lanes, obstacles).expect("quantization preserves map validity")
}

pub fn record_frame(world: &WorldState) -> LogFrame {
    LogFrame {
        frame_index: world.frame_index,
        agents: world
            .agents
            .iter()
            .map(|a: &AgentState| AgentFrame {
                agent_id: a.agent_id,
                pose: q9_pose(&a.pose),
                velocity: q9_vec(a.velocity),
                yaw_rate: q9(a.yaw_rate),
            })
            .collect(),
    }
}
