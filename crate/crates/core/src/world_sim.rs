//! Deterministic 2.5-D multi-agent simulator: kinematic-bicycle free motion,
//! perfectly inelastic contact resolution and collision / off-road sensing.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bounding_radius, oriented_rect, sat_overlap, wrap_angle, Vec2};
use crate::map::MapGraph;

pub const RATE_HZ: u32 = 12;
pub const DT: f64 = 1.0 / RATE_HZ as f64;
pub const ACCEL_LIMIT: f64 = 10.0;
pub const STEER_LIMIT: f64 = 0.6;
/// Pitch/roll impulse per m/s of speed lost on contact.
pub const IMPULSE_GAIN: f64 = 0.01;
pub const IMPULSE_CAP: f64 = 0.15;
/// Half-life, in frames, of the pitch/roll impulse response.
pub const IMPULSE_HALF_LIFE: f64 = 4.0;
/// Footprint fraction outside the drivable region that counts as off-road.
pub const OFFROAD_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose6DoF {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose6DoF {
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
            ..Self::default()
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Components in `[x, y, z, roll, pitch, yaw]` order.
    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.roll, self.pitch, self.yaw]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            z: a[2],
            roll: a[3],
            pitch: a[4],
            yaw: a[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    StaticObstacle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl Extent {
    pub const CAR: Extent = Extent {
        length: 4.5,
        width: 1.9,
        height: 1.5,
    };

    pub fn is_valid(&self) -> bool {
        [self.length, self.width, self.height]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub agent_id: u32,
    pub kind: AgentKind,
    pub pose: Pose6DoF,
    pub velocity: Vec2,
    pub yaw_rate: f64,
    pub extent: Extent,
}

impl AgentState {
    pub fn vehicle(agent_id: u32, x: f64, y: f64, yaw: f64, speed: f64) -> Self {
        Self {
            agent_id,
            kind: AgentKind::Vehicle,
            pose: Pose6DoF::planar(x, y, yaw),
            velocity: Vec2::from_angle(yaw) * speed,
            yaw_rate: 0.0,
            extent: Extent::CAR,
        }
    }

    pub fn is_static(&self) -> bool {
        self.kind == AgentKind::StaticObstacle
    }

    pub fn heading(&self) -> Vec2 {
        Vec2::from_angle(self.pose.yaw)
    }

    /// Forward speed along the heading, clamped at zero (no reversing).
    pub fn speed(&self) -> f64 {
        self.velocity.dot(self.heading()).max(0.0)
    }

    pub fn mass(&self) -> f64 {
        match self.kind {
            AgentKind::Vehicle => 180.0 * self.extent.length * self.extent.width,
            AgentKind::Pedestrian => 80.0,
            AgentKind::StaticObstacle => f64::INFINITY,
        }
    }

    pub fn wheelbase(&self) -> f64 {
        0.6 * self.extent.length
    }
}

/// Oriented ground-plane rectangle of an agent: length along the yaw axis,
/// width perpendicular, centred at the agent position.
pub fn footprint(agent: &AgentState) -> [Vec2; 4] {
    oriented_rect(
        agent.pose.position(),
        agent.pose.yaw,
        agent.extent.length,
        agent.extent.width,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    CollisionStatic,
    CollisionDynamic,
    Offroad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_type: EventType,
    pub t_event: usize,
    pub subject_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner_id: Option<u32>,
}

impl EventRecord {
    pub fn is_collision(&self) -> bool {
        self.event_type != EventType::Offroad
    }
}

/// Contact pair key. Agent pairs are stored with the lower id first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContactPair {
    Agents(u32, u32),
    Obstacle(u32, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Control {
    pub accel: f64,
    pub steer: f64,
}

impl Control {
    pub const IDLE: Control = Control {
        accel: 0.0,
        steer: 0.0,
    };
    pub const BRAKE: Control = Control {
        accel: -ACCEL_LIMIT,
        steer: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub frame_index: usize,
    pub dt: f64,
    pub agents: Vec<AgentState>,
    pub map: Arc<MapGraph>,
    /// Agent whose behaviour is perturbed; preferred as event subject.
    pub perturbed_id: Option<u32>,
    /// Pairs found overlapping during the step that produced this state.
    pub contacts: BTreeSet<ContactPair>,
    /// Vehicles that were off-road in this frame.
    pub offroad: BTreeSet<u32>,
    /// Agents that have been in a collision; they brake to a standstill.
    pub crashed: BTreeSet<u32>,
    /// Events raised by the step that produced this state.
    pub events: Vec<EventRecord>,
}

impl WorldState {
    pub fn new(agents: Vec<AgentState>, map: Arc<MapGraph>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for a in &agents {
            if !ids.insert(a.agent_id) {
                return Err(Error::Config(format!("duplicate agent id {}", a.agent_id)));
            }
            if !a.extent.is_valid() {
                return Err(Error::Input(format!("agent {} has invalid extent", a.agent_id)));
            }
            if !a.pose.is_finite() || !a.velocity.is_finite() {
                return Err(Error::Input(format!("agent {} has non-finite state", a.agent_id)));
            }
        }
        let mut agents = agents;
        for a in agents.iter_mut().filter(|a| a.is_static()) {
            a.velocity = Vec2::ZERO;
            a.yaw_rate = 0.0;
        }
        let offroad = agents
            .iter()
            .filter(|a| a.kind == AgentKind::Vehicle && is_offroad(a, &map))
            .map(|a| a.agent_id)
            .collect();
        Ok(Self {
            frame_index: 0,
            dt: DT,
            agents,
            map,
            perturbed_id: None,
            contacts: BTreeSet::new(),
            offroad,
            crashed: BTreeSet::new(),
            events: Vec::new(),
        })
    }

    pub fn agent(&self, id: u32) -> Option<&AgentState> {
        self.agents.iter().find(|a| a.agent_id == id)
    }
}

fn is_offroad(agent: &AgentState, map: &MapGraph) -> bool {
    map.outside_fraction(
        agent.pose.position(),
        agent.pose.yaw,
        agent.extent.length,
        agent.extent.width,
    ) > OFFROAD_THRESHOLD
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Partner {
    Agent(usize),
    Obstacle(usize),
}

#[derive(Debug, Clone, Copy)]
struct Overlap {
    /// Index of a non-static agent.
    a: usize,
    partner: Partner,
}

fn find_overlaps(agents: &[AgentState], map: &MapGraph) -> Vec<Overlap> {
    let prints: Vec<[Vec2; 4]> = agents.iter().map(footprint).collect();
    let radii: Vec<f64> = agents
        .iter()
        .map(|a| bounding_radius(a.extent.length, a.extent.width))
        .collect();
    let mut out = Vec::new();
    for i in 0..agents.len() {
        if agents[i].is_static() {
            continue;
        }
        let ci = agents[i].pose.position();
        for j in 0..agents.len() {
            if j == i || (j < i && !agents[j].is_static()) {
                continue;
            }
            if ci.distance(agents[j].pose.position()) > radii[i] + radii[j] {
                continue;
            }
            if sat_overlap(&prints[i], &prints[j]) {
                out.push(Overlap {
                    a: i,
                    partner: Partner::Agent(j),
                });
            }
        }
        for (k, ob) in map.static_obstacles.iter().enumerate() {
            if ci.distance(ob.center) > radii[i] + bounding_radius(ob.length, ob.width) {
                continue;
            }
            if sat_overlap(&prints[i], &ob.corners()) {
                out.push(Overlap {
                    a: i,
                    partner: Partner::Obstacle(k),
                });
            }
        }
    }
    out
}

fn pair_key(agents: &[AgentState], o: &Overlap) -> ContactPair {
    let ida = agents[o.a].agent_id;
    match o.partner {
        Partner::Agent(j) => {
            let idb = agents[j].agent_id;
            ContactPair::Agents(ida.min(idb), ida.max(idb))
        }
        Partner::Obstacle(k) => ContactPair::Obstacle(ida, k),
    }
}

fn partner_center(agents: &[AgentState], map: &MapGraph, p: Partner) -> Vec2 {
    match p {
        Partner::Agent(j) => agents[j].pose.position(),
        Partner::Obstacle(k) => map.static_obstacles[k].center,
    }
}

/// Turns new overlaps into event records. Every agent picks its nearest new
/// partner (centre distance, then lowest agent id, agents before obstacles);
/// the resulting undirected pairs are de-duplicated.
fn events_from_overlaps(
    agents: &[AgentState],
    map: &MapGraph,
    overlaps: &[Overlap],
    perturbed: Option<u32>,
    frame: usize,
) -> Vec<EventRecord> {
    // Adjacency from each agent index to its overlapping partners.
    let mut adj: BTreeMap<usize, Vec<Partner>> = BTreeMap::new();
    for o in overlaps {
        adj.entry(o.a).or_default().push(o.partner);
        if let Partner::Agent(j) = o.partner {
            if !agents[j].is_static() {
                adj.entry(j).or_default().push(Partner::Agent(o.a));
            }
        }
    }
    let rank = |p: &Partner| match *p {
        Partner::Agent(j) => (0u8, agents[j].agent_id as u64),
        Partner::Obstacle(k) => (1u8, k as u64),
    };
    let mut chosen: BTreeSet<ContactPair> = BTreeSet::new();
    for (&i, partners) in &adj {
        let ci = agents[i].pose.position();
        let best = partners
            .iter()
            .min_by(|p, q| {
                let dp = ci.distance(partner_center(agents, map, **p));
                let dq = ci.distance(partner_center(agents, map, **q));
                dp.total_cmp(&dq).then_with(|| rank(p).cmp(&rank(q)))
            })
            .copied()
            .expect("non-empty partner list");
        chosen.insert(pair_key(agents, &Overlap { a: i, partner: best }));
    }
    let by_id: BTreeMap<u32, &AgentState> = agents.iter().map(|a| (a.agent_id, a)).collect();
    let mut events: Vec<EventRecord> = chosen
        .into_iter()
        .map(|pair| match pair {
            ContactPair::Obstacle(id, _) => EventRecord {
                event_type: EventType::CollisionStatic,
                t_event: frame,
                subject_id: id,
                partner_id: None,
            },
            ContactPair::Agents(lo, hi) => {
                let lo_static = by_id[&lo].is_static();
                let hi_static = by_id[&hi].is_static();
                if lo_static || hi_static {
                    EventRecord {
                        event_type: EventType::CollisionStatic,
                        t_event: frame,
                        subject_id: if lo_static { hi } else { lo },
                        partner_id: None,
                    }
                } else {
                    let subject = if perturbed == Some(hi) { hi } else { lo };
                    EventRecord {
                        event_type: EventType::CollisionDynamic,
                        t_event: frame,
                        subject_id: subject,
                        partner_id: Some(if subject == lo { hi } else { lo }),
                    }
                }
            }
        })
        .collect();
    events.sort();
    events.dedup();
    events
}

/// Collision events for footprints overlapping in `world` that were not
/// already in contact during the previous step.
pub fn detect_collisions(world: &WorldState) -> Vec<EventRecord> {
    let overlaps: Vec<Overlap> = find_overlaps(&world.agents, &world.map)
        .into_iter()
        .filter(|o| !world.contacts.contains(&pair_key(&world.agents, o)))
        .collect();
    events_from_overlaps(
        &world.agents,
        &world.map,
        &overlaps,
        world.perturbed_id,
        world.frame_index,
    )
}

/// Rising-edge off-road events: vehicles with more than half their footprint
/// outside the drivable region that were not off-road in the previous frame
/// (as recorded in `world.offroad`).
pub fn detect_offroad(world: &WorldState, map: &MapGraph) -> Vec<EventRecord> {
    world
        .agents
        .iter()
        .filter(|a| a.kind == AgentKind::Vehicle)
        .filter(|a| !world.offroad.contains(&a.agent_id) && is_offroad(a, map))
        .map(|a| EventRecord {
            event_type: EventType::Offroad,
            t_event: world.frame_index,
            subject_id: a.agent_id,
            partner_id: None,
        })
        .collect()
}

/// Perfectly inelastic contact along `normal`: both bodies leave with the
/// momentum-weighted common normal velocity; tangential components are kept.
pub fn inelastic_contact(m1: f64, v1: Vec2, m2: f64, v2: Vec2, normal: Vec2) -> (Vec2, Vec2) {
    let n = normal.normalized();
    let v1n = v1.dot(n);
    let v2n = v2.dot(n);
    let common = if m1.is_infinite() && m2.is_infinite() {
        0.0
    } else if m1.is_infinite() {
        v1n
    } else if m2.is_infinite() {
        v2n
    } else {
        (m1 * v1n + m2 * v2n) / (m1 + m2)
    };
    (v1 + n * (common - v1n), v2 + n * (common - v2n))
}

fn integrate(agent: &mut AgentState, control: Control, h: f64) {
    let speed = (agent.speed() + control.accel * h).max(0.0);
    let yaw = agent.pose.yaw + speed / agent.wheelbase() * control.steer.tan() * h;
    let heading = Vec2::from_angle(yaw);
    agent.pose.x += speed * heading.x * h;
    agent.pose.y += speed * heading.y * h;
    agent.pose.yaw = wrap_angle(yaw);
    agent.velocity = heading * speed;
}

fn checked_controls(world: &WorldState, controls: &BTreeMap<u32, Control>) -> Result<Vec<Control>> {
    world
        .agents
        .iter()
        .map(|a| {
            if a.is_static() {
                return Ok(Control::IDLE);
            }
            let c = controls.get(&a.agent_id).ok_or_else(|| {
                Error::Config(format!("missing control for dynamic agent {}", a.agent_id))
            })?;
            if !c.accel.is_finite() || !c.steer.is_finite() {
                return Err(Error::Input(format!(
                    "non-finite control for agent {}",
                    a.agent_id
                )));
            }
            if world.crashed.contains(&a.agent_id) {
                return Ok(Control::BRAKE);
            }
            Ok(Control {
                accel: c.accel.clamp(-ACCEL_LIMIT, ACCEL_LIMIT),
                steer: c.steer.clamp(-STEER_LIMIT, STEER_LIMIT),
            })
        })
        .collect()
}

/// Advances the world by one tick of `dt`, integrated as two half-steps with
/// contact detection and resolution after each.
pub fn step(world: &WorldState, controls: &BTreeMap<u32, Control>) -> Result<WorldState> {
    let mut ctrl = checked_controls(world, controls)?;
    let mut next = world.clone();
    next.frame_index += 1;
    next.events.clear();
    let h = 0.5 * world.dt;
    let n = next.agents.len();

    let mut step_contacts: BTreeSet<ContactPair> = BTreeSet::new();
    let mut collision_events: Vec<EventRecord> = Vec::new();
    // Velocity change from contacts, per agent, accumulated over the tick.
    let mut impulse: Vec<Option<Vec2>> = vec![None; n];

    for _ in 0..2 {
        let start = next.agents.clone();
        for (agent, c) in next.agents.iter_mut().zip(&ctrl) {
            if !agent.is_static() {
                integrate(agent, *c, h);
            }
        }
        let mut reverted = vec![false; n];
        for _ in 0..=n {
            let overlaps = find_overlaps(&next.agents, &next.map);
            if overlaps.is_empty() {
                break;
            }
            let fresh: Vec<Overlap> = overlaps
                .iter()
                .copied()
                .filter(|o| {
                    let k = pair_key(&next.agents, o);
                    !world.contacts.contains(&k) && !step_contacts.contains(&k)
                })
                .collect();
            collision_events.extend(events_from_overlaps(
                &next.agents,
                &next.map,
                &fresh,
                next.perturbed_id,
                next.frame_index,
            ));
            for o in &overlaps {
                step_contacts.insert(pair_key(&next.agents, o));
            }
            for o in &overlaps {
                resolve(&mut next.agents, &start, o, &mut reverted, &mut impulse);
            }
        }
        for (i, a) in next.agents.iter().enumerate() {
            if reverted[i] {
                next.crashed.insert(a.agent_id);
                ctrl[i] = Control::BRAKE;
            }
        }
    }

    let decay = 0.5f64.powf(1.0 / IMPULSE_HALF_LIFE);
    for (i, agent) in next.agents.iter_mut().enumerate() {
        let prev = &world.agents[i];
        agent.pose.pitch = flush(prev.pose.pitch * decay);
        agent.pose.roll = flush(prev.pose.roll * decay);
        if let Some(dv) = impulse[i] {
            let lost_long = -dv.dot(agent.heading());
            let lost_lat = -dv.dot(agent.heading().perp());
            agent.pose.pitch = (agent.pose.pitch
                - (IMPULSE_GAIN * lost_long).clamp(-IMPULSE_CAP, IMPULSE_CAP))
            .clamp(-IMPULSE_CAP, IMPULSE_CAP);
            agent.pose.roll = (agent.pose.roll
                - (IMPULSE_GAIN * lost_lat).clamp(-IMPULSE_CAP, IMPULSE_CAP))
            .clamp(-IMPULSE_CAP, IMPULSE_CAP);
        }
        agent.pose.z = 0.0;
        agent.pose.yaw = wrap_angle(agent.pose.yaw);
        agent.yaw_rate = if agent.is_static() {
            0.0
        } else {
            wrap_angle(agent.pose.yaw - prev.pose.yaw) / world.dt
        };
    }

    collision_events.sort();
    collision_events.dedup();
    let mut events = collision_events;
    let map = Arc::clone(&next.map);
    events.extend(detect_offroad(&next, &map));
    next.offroad = next
        .agents
        .iter()
        .filter(|a| a.kind == AgentKind::Vehicle && is_offroad(a, &map))
        .map(|a| a.agent_id)
        .collect();
    next.contacts = step_contacts;
    next.events = events;
    Ok(next)
}

fn flush(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

/// Resolves one overlap: velocities are merged inelastically (static partners
/// absorb all normal velocity, i.e. the agent stops) and every dynamic agent
/// involved is moved back to its pose at the start of the half-step.
fn resolve(
    agents: &mut [AgentState],
    start: &[AgentState],
    o: &Overlap,
    reverted: &mut [bool],
    impulse: &mut [Option<Vec2>],
) {
    let i = o.a;
    let mut record = |idx: usize, before: Vec2, after: Vec2| {
        let acc = impulse[idx].unwrap_or(Vec2::ZERO);
        impulse[idx] = Some(acc + (after - before));
    };
    match o.partner {
        Partner::Obstacle(_) => {
            let before = agents[i].velocity;
            agents[i].velocity = Vec2::ZERO;
            record(i, before, Vec2::ZERO);
        }
        Partner::Agent(j) if agents[j].is_static() => {
            let before = agents[i].velocity;
            agents[i].velocity = Vec2::ZERO;
            record(i, before, Vec2::ZERO);
        }
        Partner::Agent(j) => {
            let normal = agents[j].pose.position() - agents[i].pose.position();
            let normal = if normal.norm() > 0.0 {
                normal
            } else {
                agents[i].heading()
            };
            let (vi, vj) = (agents[i].velocity, agents[j].velocity);
            let (ni, nj) = inelastic_contact(agents[i].mass(), vi, agents[j].mass(), vj, normal);
            agents[i].velocity = ni;
            agents[j].velocity = nj;
            record(i, vi, ni);
            record(j, vj, nj);
            agents[j].pose = start[j].pose;
            reverted[j] = true;
        }
    }
    agents[i].pose = start[i].pose;
    reverted[i] = true;
}
