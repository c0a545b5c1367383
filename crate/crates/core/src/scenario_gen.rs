//! Physically challenging scenario construction: perturbation sampling,
//! cosine-smoothed route offsets, adversary spawning and event-triggered
//! rollouts on procedurally generated roads.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bounding_radius, sat_overlap, Vec2};
use crate::map::{generate_map, polyline, GeneratedMap, MapGenConfig};
use crate::scene::{q9, quantize_map, record_frame, AgentInfo, LogTag, Provenance, SceneLog, SCHEMA_VERSION};
use crate::world_sim::{self, footprint, AgentState, Control, WorldState, ACCEL_LIMIT, STEER_LIMIT};

pub const SPEED_ANCHORS: [f64; 7] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];
pub const SPEED_JITTER: f64 = 2.5;
pub const OFFSET_ANCHORS: [f64; 8] = [-200.0, -100.0, -50.0, -10.0, 10.0, 50.0, 100.0, 200.0];
pub const OFFSET_JITTER: f64 = 5.0;
/// Target speed used when only the route offset is perturbed.
pub const OFFSET_ONLY_SPEED: f64 = 10.0;
pub const MAX_TARGET_SPEED: f64 = 30.0;
pub const MAX_OFFSET: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    SpeedOnly,
    OffsetOnly,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbTarget {
    Ego,
    Adv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub mode: PerturbMode,
    pub target_speed: f64,
    pub lateral_offset: f64,
    pub perturb_target: PerturbTarget,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_TARGET_SPEED).contains(&self.target_speed) {
            return Err(Error::Input(format!("target speed {} outside [0, 30]", self.target_speed)));
        }
        if !(-MAX_OFFSET..=MAX_OFFSET).contains(&self.lateral_offset) {
            return Err(Error::Input(format!(
                "lateral offset {} outside [-200, 200]",
                self.lateral_offset
            )));
        }
        if self.mode == PerturbMode::OffsetOnly && self.target_speed != OFFSET_ONLY_SPEED {
            return Err(Error::Input("offset-only perturbation must use 10 m/s".into()));
        }
        if self.mode == PerturbMode::SpeedOnly && self.lateral_offset != 0.0 {
            return Err(Error::Input("speed-only perturbation must use zero offset".into()));
        }
        Ok(())
    }
}

fn jittered<R: Rng>(rng: &mut R, anchors: &[f64], jitter: f64, limit: (f64, f64)) -> f64 {
    let anchor = *anchors.choose(rng).expect("non-empty anchor set");
    q9((anchor + rng.random_range(-jitter..=jitter)).clamp(limit.0, limit.1))
}

/// Draws one of the three perturbation modes uniformly, then the speed and/or
/// lateral offset from jittered anchor values.
pub fn sample_perturbation<R: Rng>(rng: &mut R, perturb_target: PerturbTarget) -> PerturbationSpec {
    let mode = match rng.random_range(0..3) {
        0 => PerturbMode::SpeedOnly,
        1 => PerturbMode::OffsetOnly,
        _ => PerturbMode::Both,
    };
    let speed = |rng: &mut R| jittered(rng, &SPEED_ANCHORS, SPEED_JITTER, (0.0, MAX_TARGET_SPEED));
    let offset = |rng: &mut R| jittered(rng, &OFFSET_ANCHORS, OFFSET_JITTER, (-MAX_OFFSET, MAX_OFFSET));
    let (target_speed, lateral_offset) = match mode {
        PerturbMode::SpeedOnly => (speed(rng), 0.0),
        PerturbMode::OffsetOnly => (OFFSET_ONLY_SPEED, offset(rng)),
        PerturbMode::Both => {
            let s = speed(rng);
            (s, offset(rng))
        }
    };
    PerturbationSpec {
        mode,
        target_speed,
        lateral_offset,
        perturb_target,
    }
}

/// Lateral displacement profile `offset * (1 - cos(pi * min(s, L) / L)) / 2`,
/// zero for `s < 0`.
pub fn cosine_displacement(s: f64, offset: f64, transition_len: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let u = s.min(transition_len) / transition_len;
    offset * (1.0 - (std::f64::consts::PI * u).cos()) / 2.0
}

/// Displaces a route along its local left normal with a cosine-smoothed ramp
/// starting at the first route point and reaching `offset` after
/// `transition_len` meters of arc length.
pub fn cosine_offset_route(route: &[Vec2], offset: f64, transition_len: f64) -> Result<Vec<Vec2>> {
    if route.len() < 2 {
        return Err(Error::Input("route needs at least 2 points".into()));
    }
    if !(transition_len > 0.0) {
        return Err(Error::Input(format!("transition length {transition_len} must be positive")));
    }
    let cum = polyline::cumulative_lengths(route);
    let total = *cum.last().expect("non-empty");
    if total <= transition_len {
        return Err(Error::Input(format!(
            "route length {total:.2} m is not longer than the transition ({transition_len} m)"
        )));
    }
    if offset == 0.0 {
        return Ok(route.to_vec());
    }
    let n = route.len();
    Ok((0..n)
        .map(|i| {
            let a = route[i.saturating_sub(1)];
            let b = route[(i + 1).min(n - 1)];
            let normal = (b - a).normalized().perp();
            route[i] + normal * cosine_displacement(cum[i], offset, transition_len)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub warmup_steps: usize,
    pub post_event_frames: usize,
    pub timeout_steps: usize,
    pub rate_hz: u32,
    pub spawn_radius: f64,
    pub seed: u64,
    pub transition_len: f64,
    pub lookahead: f64,
    pub speed_gain: f64,
    pub n_background: usize,
    pub map: MapGenConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 24,
            post_event_frames: 48,
            timeout_steps: 120,
            rate_hz: world_sim::RATE_HZ,
            spawn_radius: 15.0,
            seed: 0,
            transition_len: 40.0,
            lookahead: 6.0,
            speed_gain: 2.0,
            n_background: 4,
            map: MapGenConfig::default(),
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.post_event_frames == 0 || self.timeout_steps == 0 {
            return Err(Error::Config("rollout step counts must be positive".into()));
        }
        if self.rate_hz != world_sim::RATE_HZ {
            return Err(Error::Config(format!("rate_hz must be 12, got {}", self.rate_hz)));
        }
        for (name, v) in [
            ("spawn_radius", self.spawn_radius),
            ("transition_len", self.transition_len),
            ("lookahead", self.lookahead),
            ("speed_gain", self.speed_gain),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Frames in a log without any event.
    pub fn event_free_len(&self) -> usize {
        self.warmup_steps + self.timeout_steps
    }
}

/// Route follower with a moving projection cursor.
#[derive(Debug, Clone)]
struct Route {
    pts: Vec<Vec2>,
    cum: Vec<f64>,
    cursor: usize,
}

impl Route {
    fn new(pts: Vec<Vec2>) -> Self {
        let cum = polyline::cumulative_lengths(&pts);
        Self { pts, cum, cursor: 0 }
    }

    fn project(&mut self, p: Vec2) -> f64 {
        let lo = self.cursor.saturating_sub(8);
        let hi = (self.cursor + 80).min(self.pts.len() - 1);
        let mut best = (f64::INFINITY, 0.0, self.cursor);
        for i in lo..hi {
            let a = self.pts[i];
            let ab = self.pts[i + 1] - a;
            let t = ((p - a).dot(ab) / ab.norm_sq()).clamp(0.0, 1.0);
            let d = p.distance(a + ab * t);
            if d < best.0 {
                best = (d, self.cum[i] + t * (self.cum[i + 1] - self.cum[i]), i);
            }
        }
        self.cursor = best.2;
        best.1
    }

    fn point_at(&self, s: f64) -> Vec2 {
        polyline::sample(&self.pts, &self.cum, s).0
    }
}

#[derive(Debug, Clone)]
struct Driver {
    route: Route,
    desired_speed: f64,
    gap_keeping: bool,
}

const COMFORT_DECEL: f64 = 5.0;
const STANDSTILL_GAP: f64 = 3.0;

impl Driver {
    fn control(&mut self, agent: &AgentState, world: &WorldState, cfg: &RolloutConfig) -> Control {
        let pos = agent.pose.position();
        let s = self.route.project(pos);
        let target = self.route.point_at(s + cfg.lookahead);
        let local = (target - pos).rotate(-agent.pose.yaw);
        let ld = local.norm().max(1e-3);
        let alpha = local.y.atan2(local.x);
        let steer = (2.0 * agent.wheelbase() * alpha.sin() / ld)
            .atan()
            .clamp(-STEER_LIMIT, STEER_LIMIT);

        let mut target_speed = self.desired_speed;
        if self.gap_keeping {
            for other in world.agents.iter().filter(|o| o.agent_id != agent.agent_id) {
                let rel = (other.pose.position() - pos).rotate(-agent.pose.yaw);
                if rel.x > 0.0 && rel.y.abs() < 2.2 {
                    let gap = rel.x - 0.5 * (agent.extent.length + other.extent.length);
                    let safe = (2.0 * COMFORT_DECEL * (gap - STANDSTILL_GAP).max(0.0)).sqrt();
                    target_speed = target_speed.min(safe);
                }
            }
        }
        let accel = (cfg.speed_gain * (target_speed - agent.speed())).clamp(-ACCEL_LIMIT, ACCEL_LIMIT);
        Control { accel, steer }
    }
}

/// Candidate spacing for adversary placement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpawnParams {
    pub radius: f64,
    pub lateral_spacing: f64,
    pub longitudinal_step: f64,
    pub clearance: f64,
}

impl Default for SpawnParams {
    fn default() -> Self {
        Self {
            radius: 15.0,
            lateral_spacing: 3.5,
            longitudinal_step: 2.5,
            clearance: 0.5,
        }
    }
}

/// Places an adversary vehicle on a waypoint near the ego: forward, backward
/// and adjacent-lane candidates along `ego_route` within `params.radius` of
/// the ego, on drivable ground and clear of every existing footprint.
pub fn spawn_adversary<R: Rng>(
    world: &WorldState,
    ego_id: u32,
    ego_route: &[Vec2],
    new_id: u32,
    params: &SpawnParams,
    rng: &mut R,
) -> Result<AgentState> {
    let ego = world
        .agent(ego_id)
        .ok_or_else(|| Error::Config(format!("ego {ego_id} not in world")))?;
    let cum = polyline::cumulative_lengths(ego_route);
    let (s_ego, _, _) = polyline::project(ego_route, &cum, ego.pose.position());
    let n_long = (params.radius / params.longitudinal_step).floor() as i64;
    let mut candidates = Vec::new();
    for k in -n_long..=n_long {
        let s = s_ego + k as f64 * params.longitudinal_step;
        if s < 0.0 || s > *cum.last().expect("non-empty") {
            continue;
        }
        let (p, t) = polyline::sample(ego_route, &cum, s);
        for lat in [-params.lateral_spacing, 0.0, params.lateral_spacing] {
            let c = p + t.perp() * lat;
            if c.distance(ego.pose.position()) > params.radius || !world.map.is_drivable(c) {
                continue;
            }
            let mut cand = AgentState::vehicle(new_id, c.x, c.y, t.angle(), ego.speed());
            if is_clear(world, &cand, params.clearance) {
                cand.pose.x = q9(cand.pose.x);
                cand.pose.y = q9(cand.pose.y);
                candidates.push(cand);
            }
        }
    }
    candidates
        .choose(rng)
        .cloned()
        .ok_or_else(|| Error::ScenarioSkip("no clear adversary waypoint near the ego".into()))
}

fn is_clear(world: &WorldState, cand: &AgentState, clearance: f64) -> bool {
    let mut inflated = cand.clone();
    inflated.extent.length += 2.0 * clearance;
    inflated.extent.width += 2.0 * clearance;
    let fp = footprint(&inflated);
    let r = bounding_radius(inflated.extent.length, inflated.extent.width);
    let c = cand.pose.position();
    let agents_clear = world.agents.iter().all(|o| {
        c.distance(o.pose.position()) > r + bounding_radius(o.extent.length, o.extent.width)
            || !sat_overlap(&fp, &footprint(o))
    });
    let obstacles_clear = world.map.static_obstacles.iter().all(|o| {
        c.distance(o.center) > r + bounding_radius(o.length, o.width) || !sat_overlap(&fp, &o.corners())
    });
    agents_clear && obstacles_clear
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const MAP_STREAM: u64 = 0;
const PERTURB_STREAM: u64 = 1;
const SETUP_STREAM: u64 = 2;

/// Which vehicle, if any, is perturbed in a generated scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Nominal,
    Ego,
    Adv,
}

impl SceneKind {
    pub fn target(self) -> Option<PerturbTarget> {
        match self {
            SceneKind::Nominal => None,
            SceneKind::Ego => Some(PerturbTarget::Ego),
            SceneKind::Adv => Some(PerturbTarget::Adv),
        }
    }
}

/// Generates the (quantized) road map for a seed.
pub fn scene_map(config: &RolloutConfig, seed: u64) -> GeneratedMap {
    let gm = generate_map(&config.map, &mut stream_rng(seed, MAP_STREAM));
    GeneratedMap {
        map: quantize_map(&gm.map),
        travel_lanes: gm.travel_lanes,
    }
}

/// Map generation, perturbation sampling and rollout for one seed.
pub fn simulate_scene(config: &RolloutConfig, kind: SceneKind, seed: u64) -> Result<SceneLog> {
    let map = scene_map(config, seed);
    let perturbation = kind
        .target()
        .map(|t| sample_perturbation(&mut stream_rng(seed, PERTURB_STREAM), t));
    run_rollout(config, &map, kind, perturbation.as_ref(), seed)
}

/// Runs one rollout. Frames `0..warmup_steps` use the autopilot for every
/// vehicle; afterwards the perturbed vehicle (if a perturbation is given)
/// tracks the cosine-offset route at the sampled target speed. The log closes
/// `post_event_frames` after the first event involving the monitored vehicle,
/// or after `warmup_steps + timeout_steps` frames without one.
pub fn run_rollout(
    config: &RolloutConfig,
    map: &GeneratedMap,
    kind: SceneKind,
    perturbation: Option<&PerturbationSpec>,
    seed: u64,
) -> Result<SceneLog> {
    config.validate()?;
    if let Some(p) = perturbation {
        p.validate()?;
        if Some(p.perturb_target) != kind.target() {
            return Err(Error::Config("perturbation target does not match scene kind".into()));
        }
    }
    let mut rng = stream_rng(seed, SETUP_STREAM);
    let map_arc = Arc::new(map.map.clone());
    let lanes = &map.travel_lanes;
    if lanes.is_empty() {
        return Err(Error::Config("map has no travel lanes".into()));
    }
    let lane_route = |k: usize| -> Vec<Vec2> {
        let pts = &map.map.lanes[lanes[k]].centerline;
        let n = polyline::length(pts).floor() as usize + 1;
        polyline::resample(pts, n)
    };
    let routes: Vec<Vec<Vec2>> = (0..lanes.len()).map(lane_route).collect();
    let place = |route: &[Vec2], s: f64, id: u32, speed: f64| {
        let cum = polyline::cumulative_lengths(route);
        let (p, t) = polyline::sample(route, &cum, s);
        let mut a = AgentState::vehicle(id, q9(p.x), q9(p.y), q9(t.angle()), 0.0);
        a.velocity = crate::scene::q9_vec(Vec2::from_angle(a.pose.yaw) * speed);
        a
    };

    let ego_lane = rng.random_range(0..lanes.len());
    let ego_s = rng.random_range(60.0..120.0);
    let ego_speed = q9(rng.random_range(8.0..12.0));
    let ego_id = 0u32;
    let mut agents = vec![place(&routes[ego_lane], ego_s, ego_id, ego_speed)];
    let mut drivers: BTreeMap<u32, Driver> = BTreeMap::new();
    drivers.insert(
        ego_id,
        Driver {
            route: Route::new(routes[ego_lane].clone()),
            desired_speed: ego_speed,
            gap_keeping: true,
        },
    );
    let mut next_id = 1u32;
    for _ in 0..config.n_background {
        for _attempt in 0..50 {
            let lane = rng.random_range(0..lanes.len());
            let s = ego_s + rng.random_range(-40.0..90.0);
            let speed = q9(rng.random_range(7.0..13.0));
            let cand = place(&routes[lane], s.max(5.0), next_id, speed);
            let clear = agents
                .iter()
                .all(|a| a.pose.position().distance(cand.pose.position()) > 10.0);
            if clear {
                agents.push(cand);
                drivers.insert(
                    next_id,
                    Driver {
                        route: Route::new(routes[lane].clone()),
                        desired_speed: speed,
                        gap_keeping: true,
                    },
                );
                next_id += 1;
                break;
            }
        }
    }
    let mut world = WorldState::new(agents, Arc::clone(&map_arc))?;

    let perturbed_id = match kind {
        SceneKind::Nominal => None,
        SceneKind::Ego => Some(ego_id),
        SceneKind::Adv => {
            let params = SpawnParams {
                radius: config.spawn_radius,
                lateral_spacing: config.map.lane_width,
                ..SpawnParams::default()
            };
            let adv = spawn_adversary(&world, ego_id, &routes[ego_lane], next_id, &params, &mut rng)?;
            let cum = polyline::cumulative_lengths(&routes[ego_lane]);
            let (_, lateral, _) = polyline::project(&routes[ego_lane], &cum, adv.pose.position());
            let adv_route = cosine_offset_route(&routes[ego_lane], lateral, 1e-3)?;
            drivers.insert(
                adv.agent_id,
                Driver {
                    route: Route::new(adv_route),
                    desired_speed: adv.speed(),
                    gap_keeping: true,
                },
            );
            world.agents.push(adv);
            world = WorldState::new(world.agents, Arc::clone(&map_arc))?;
            Some(next_id)
        }
    };
    world.perturbed_id = perturbed_id;
    let monitored = perturbed_id.unwrap_or(ego_id);

    let infos: Vec<AgentInfo> = world
        .agents
        .iter()
        .map(|a| AgentInfo {
            agent_id: a.agent_id,
            kind: a.kind,
            extent: a.extent,
        })
        .collect();
    let mut frames = vec![record_frame(&world)];
    let mut events = Vec::new();
    let mut trigger: Option<usize> = None;
    loop {
        let f = world.frame_index;
        match trigger {
            Some(t) if f >= t + config.post_event_frames => break,
            None if f + 1 >= config.event_free_len() => break,
            _ => {}
        }
        if f == config.warmup_steps {
            if let (Some(p), Some(pid)) = (perturbation, perturbed_id) {
                let agent = world.agent(pid).expect("perturbed agent present");
                let driver = drivers.get_mut(&pid).expect("driver for perturbed agent");
                let s = driver.route.project(agent.pose.position());
                let cum = &driver.route.cum;
                let total = *cum.last().expect("non-empty");
                let remaining = polyline::slice(&driver.route.pts, cum, s, total);
                let rem_len = polyline::length(&remaining);
                let n = rem_len.floor().max(1.0) as usize + 1;
                let smooth = polyline::resample(&remaining, n);
                let offset_route = if rem_len > config.transition_len {
                    cosine_offset_route(&smooth, p.lateral_offset, config.transition_len)?
                } else {
                    smooth
                };
                *driver = Driver {
                    route: Route::new(offset_route),
                    desired_speed: p.target_speed,
                    gap_keeping: false,
                };
            }
        }
        let controls: BTreeMap<u32, Control> = world
            .agents
            .iter()
            .filter(|a| !a.is_static())
            .map(|a| {
                let d = drivers.get_mut(&a.agent_id).expect("driver per dynamic agent");
                (a.agent_id, d.control(a, &world, config))
            })
            .collect();
        world = world_sim::step(&world, &controls)?;
        frames.push(record_frame(&world));
        if world.frame_index >= config.warmup_steps {
            let mine: Vec<_> = world
                .events
                .iter()
                .filter(|e| e.subject_id == monitored || e.partner_id == Some(monitored))
                .copied()
                .collect();
            if trigger.is_none() && !mine.is_empty() {
                trigger = Some(world.frame_index);
            }
            events.extend(mine);
        }
    }

    Ok(SceneLog {
        schema_version: SCHEMA_VERSION.to_string(),
        rate_hz: config.rate_hz,
        seed,
        provenance: match kind {
            SceneKind::Nominal => Provenance::Nominal,
            SceneKind::Ego => Provenance::EgoPerturbed,
            SceneKind::Adv => Provenance::AdvPerturbed,
        },
        tag: if trigger.is_some() {
            LogTag::EventTagged
        } else {
            LogTag::EventFree
        },
        ego_id,
        perturbed_id,
        perturbation: perturbation.copied(),
        map: map_arc,
        agents: infos,
        frames,
        events,
    })
}
