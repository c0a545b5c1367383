//! Road map: lane polylines, static obstacles, drivable-area queries and a
//! seeded procedural road generator.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{oriented_rect, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneType {
    Drivable,
    Sidewalk,
    Shoulder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub centerline: Vec<Vec2>,
    pub width: f64,
    pub lane_type: LaneType,
}

/// Oriented box on the ground plane (poles, barriers, building walls).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec2,
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
}

impl Obstacle {
    pub fn corners(&self) -> [Vec2; 4] {
        oriented_rect(self.center, self.yaw, self.length, self.width)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MapGraph {
    pub lanes: Vec<Lane>,
    pub static_obstacles: Vec<Obstacle>,
    #[serde(skip)]
    drivable_index: OnceLock<SegmentIndex>,
}

impl PartialEq for MapGraph {
    fn eq(&self, other: &Self) -> bool {
        self.lanes == other.lanes && self.static_obstacles == other.static_obstacles
    }
}

impl MapGraph {
    pub fn new(lanes: Vec<Lane>, static_obstacles: Vec<Obstacle>) -> Result<Self> {
        let map = Self {
            lanes,
            static_obstacles,
            drivable_index: OnceLock::new(),
        };
        map.validate()?;
        Ok(map)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, lane) in self.lanes.iter().enumerate() {
            if !(lane.width > 0.0 && lane.width.is_finite()) {
                return Err(Error::Input(format!("lane {i} has non-positive width {}", lane.width)));
            }
            if lane.centerline.len() < 2 {
                return Err(Error::Input(format!("lane {i} centerline has fewer than 2 points")));
            }
            for (k, w) in lane.centerline.windows(2).enumerate() {
                if !w[0].is_finite() || !w[1].is_finite() {
                    return Err(Error::Input(format!("lane {i} point {k} is not finite")));
                }
                if w[0] == w[1] {
                    return Err(Error::Input(format!("lane {i} repeats point {k}")));
                }
            }
        }
        for (i, o) in self.static_obstacles.iter().enumerate() {
            if !(o.length > 0.0 && o.width > 0.0) {
                return Err(Error::Input(format!("obstacle {i} has non-positive extent")));
            }
        }
        Ok(())
    }

    pub fn drivable_lanes(&self) -> impl Iterator<Item = &Lane> {
        self.lanes.iter().filter(|l| l.lane_type == LaneType::Drivable)
    }

    fn index(&self) -> &SegmentIndex {
        self.drivable_index.get_or_init(|| SegmentIndex::build(self))
    }

    /// True when `p` lies inside the union of drivable lane corridors
    /// (centerline buffered by half the lane width).
    pub fn is_drivable(&self, p: Vec2) -> bool {
        self.index().contains(p)
    }

    /// Unit travel direction of the nearest drivable lane segment covering `p`.
    pub fn drivable_direction(&self, p: Vec2) -> Option<Vec2> {
        self.index().nearest(p).map(|(a, b)| (b - a).normalized())
    }

    /// Fraction of a rectangle's area outside the drivable region, estimated by
    /// midpoint quadrature on a 16 x 8 grid aligned with the rectangle.
    pub fn outside_fraction(&self, center: Vec2, yaw: f64, length: f64, width: f64) -> f64 {
        const NX: usize = 16;
        const NY: usize = 8;
        let (s, c) = yaw.sin_cos();
        let mut outside = 0usize;
        for i in 0..NX {
            let lx = ((i as f64 + 0.5) / NX as f64 - 0.5) * length;
            for j in 0..NY {
                let ly = ((j as f64 + 0.5) / NY as f64 - 0.5) * width;
                let p = Vec2::new(center.x + c * lx - s * ly, center.y + s * lx + c * ly);
                if !self.is_drivable(p) {
                    outside += 1;
                }
            }
        }
        outside as f64 / (NX * NY) as f64
    }

    /// Axis-aligned bounds of all lanes and obstacles, `(min, max)`.
    pub fn bounds(&self) -> Option<(Vec2, Vec2)> {
        let pts = self
            .lanes
            .iter()
            .flat_map(|l| l.centerline.iter().copied())
            .chain(self.static_obstacles.iter().map(|o| o.center));
        let mut it = pts.peekable();
        it.peek()?;
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in it {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        Some((lo, hi))
    }
}

const INDEX_CELL: f64 = 8.0;

/// Spatial hash over drivable lane segments.
#[derive(Debug, Clone, Default)]
struct SegmentIndex {
    segments: Vec<(Vec2, Vec2, f64)>,
    cells: HashMap<(i64, i64), Vec<u32>>,
}

impl SegmentIndex {
    fn build(map: &MapGraph) -> Self {
        let mut idx = SegmentIndex::default();
        for lane in map.drivable_lanes() {
            let r = 0.5 * lane.width;
            for w in lane.centerline.windows(2) {
                let id = idx.segments.len() as u32;
                idx.segments.push((w[0], w[1], r));
                let lo_x = ((w[0].x.min(w[1].x) - r) / INDEX_CELL).floor() as i64;
                let hi_x = ((w[0].x.max(w[1].x) + r) / INDEX_CELL).floor() as i64;
                let lo_y = ((w[0].y.min(w[1].y) - r) / INDEX_CELL).floor() as i64;
                let hi_y = ((w[0].y.max(w[1].y) + r) / INDEX_CELL).floor() as i64;
                for cx in lo_x..=hi_x {
                    for cy in lo_y..=hi_y {
                        idx.cells.entry((cx, cy)).or_default().push(id);
                    }
                }
            }
        }
        idx
    }

    fn contains(&self, p: Vec2) -> bool {
        let key = (
            (p.x / INDEX_CELL).floor() as i64,
            (p.y / INDEX_CELL).floor() as i64,
        );
        self.cells.get(&key).is_some_and(|ids| {
            ids.iter().any(|&id| {
                let (a, b, r) = self.segments[id as usize];
                point_segment_distance(p, a, b) <= r
            })
        })
    }
}

impl SegmentIndex {
    fn nearest(&self, p: Vec2) -> Option<(Vec2, Vec2)> {
        let key = (
            (p.x / INDEX_CELL).floor() as i64,
            (p.y / INDEX_CELL).floor() as i64,
        );
        let ids = self.cells.get(&key)?;
        let mut best: Option<(f64, u32)> = None;
        for &id in ids {
            let (a, b, r) = self.segments[id as usize];
            let d = point_segment_distance(p, a, b);
            if d <= r && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, id));
            }
        }
        best.map(|(_, id)| {
            let (a, b, _) = self.segments[id as usize];
            (a, b)
        })
    }
}

pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    let t = if len_sq > 0.0 {
        ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.distance(a + ab * t)
}

/// Arc-length utilities over an open polyline.
pub mod polyline {
    use super::*;

    pub fn cumulative_lengths(pts: &[Vec2]) -> Vec<f64> {
        let mut out = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in pts.windows(2) {
            acc += w[0].distance(w[1]);
            out.push(acc);
        }
        out
    }

    pub fn length(pts: &[Vec2]) -> f64 {
        pts.windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    /// Position and unit tangent at arc length `s` (clamped to the polyline;
    /// beyond the ends the first/last segment is extended linearly).
    pub fn sample(pts: &[Vec2], cum: &[f64], s: f64) -> (Vec2, Vec2) {
        let n = pts.len();
        let seg = match cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let a = pts[seg];
        let b = pts[seg + 1];
        let len = cum[seg + 1] - cum[seg];
        let tangent = (b - a).normalized();
        let t = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        (a + (b - a) * t, tangent)
    }

    /// Uniformly resamples the polyline to `n` points by arc length.
    pub fn resample(pts: &[Vec2], n: usize) -> Vec<Vec2> {
        let cum = cumulative_lengths(pts);
        let total = *cum.last().unwrap_or(&0.0);
        (0..n)
            .map(|i| {
                let s = if n > 1 { total * i as f64 / (n - 1) as f64 } else { 0.0 };
                sample(pts, &cum, s).0
            })
            .collect()
    }

    /// Closest-point projection: `(arc_length, signed_lateral, segment)`, with the
    /// lateral offset positive to the left of the direction of travel.
    pub fn project(pts: &[Vec2], cum: &[f64], p: Vec2) -> (f64, f64, usize) {
        let mut best = (f64::INFINITY, 0.0, 0.0, 0usize);
        for (i, w) in pts.windows(2).enumerate() {
            let ab = w[1] - w[0];
            let len_sq = ab.norm_sq();
            let t = if len_sq > 0.0 {
                ((p - w[0]).dot(ab) / len_sq).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = w[0] + ab * t;
            let d = p.distance(q);
            if d < best.0 {
                let lateral = ab.normalized().cross(p - w[0]);
                best = (d, cum[i] + t * len_sq.sqrt(), lateral, i);
            }
        }
        (best.1, best.2, best.3)
    }

    /// Restricts a polyline to the arc-length window `[s0, s1]`.
    pub fn slice(pts: &[Vec2], cum: &[f64], s0: f64, s1: f64) -> Vec<Vec2> {
        let mut out = vec![sample(pts, cum, s0).0];
        for (p, &c) in pts.iter().zip(cum) {
            if c > s0 && c < s1 && out.last() != Some(p) {
                out.push(*p);
            }
        }
        let end = sample(pts, cum, s1).0;
        if out.last() != Some(&end) {
            out.push(end);
        }
        out
    }
}

/// Parameters of the procedural road generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapGenConfig {
    pub road_length: f64,
    pub num_lanes: usize,
    pub lane_width: f64,
    pub sidewalk_width: f64,
    pub max_curve_amplitude: f64,
    pub with_intersection: bool,
    pub pole_spacing: (f64, f64),
}

impl Default for MapGenConfig {
    fn default() -> Self {
        Self {
            road_length: 700.0,
            num_lanes: 3,
            lane_width: 3.5,
            sidewalk_width: 3.0,
            max_curve_amplitude: 12.0,
            with_intersection: true,
            pole_spacing: (12.0, 25.0),
        }
    }
}

/// A generated map plus the lane centerlines vehicles can follow.
#[derive(Debug, Clone)]
pub struct GeneratedMap {
    pub map: MapGraph,
    /// Indices into `map.lanes` of the main-road travel lanes, right to left.
    pub travel_lanes: Vec<usize>,
}

fn offset_curve(reference: &[Vec2], offset: f64) -> Vec<Vec2> {
    let n = reference.len();
    (0..n)
        .map(|i| {
            let a = reference[i.saturating_sub(1)];
            let b = reference[(i + 1).min(n - 1)];
            reference[i] + (b - a).normalized().perp() * offset
        })
        .collect()
}

/// Builds a one-way multi-lane road (optionally curved) with sidewalks,
/// curbside poles, boundary walls and an optional perpendicular crossing.
pub fn generate_map<R: Rng>(cfg: &MapGenConfig, rng: &mut R) -> GeneratedMap {
    let step = 2.0;
    let n_pts = (cfg.road_length / step).round() as usize + 1;
    let amplitude = rng.random_range(0.0..=cfg.max_curve_amplitude);
    let period = rng.random_range(350.0..700.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let reference: Vec<Vec2> = (0..n_pts)
        .map(|i| {
            let x = i as f64 * step;
            Vec2::new(x, amplitude * ((2.0 * PI * x / period) + phase).sin() - amplitude * phase.sin())
        })
        .collect();
    let ref_cum = polyline::cumulative_lengths(&reference);
    let road_half = 0.5 * cfg.num_lanes as f64 * cfg.lane_width;

    let mut lanes = Vec::new();
    let mut travel_lanes = Vec::new();
    for k in 0..cfg.num_lanes {
        let off = (k as f64 - (cfg.num_lanes as f64 - 1.0) / 2.0) * cfg.lane_width;
        travel_lanes.push(lanes.len());
        lanes.push(Lane {
            centerline: offset_curve(&reference, off),
            width: cfg.lane_width,
            lane_type: LaneType::Drivable,
        });
    }
    for side in [-1.0, 1.0] {
        lanes.push(Lane {
            centerline: offset_curve(&reference, side * (road_half + 0.5 * cfg.sidewalk_width)),
            width: cfg.sidewalk_width,
            lane_type: LaneType::Sidewalk,
        });
    }

    let mut gap: Option<(f64, f64)> = None;
    if cfg.with_intersection {
        let s_c = rng.random_range(0.45..0.65) * cfg.road_length;
        let (c, t) = polyline::sample(&reference, &ref_cum, s_c);
        let n = t.perp();
        let half_span = 70.0;
        for side in [-0.5, 0.5] {
            let base = c + t * (side * cfg.lane_width);
            let dir = if side < 0.0 { n } else { -n };
            let start = base - dir * half_span;
            let pts: Vec<Vec2> = (0..=((2.0 * half_span / step) as usize))
                .map(|i| start + dir * (i as f64 * step))
                .collect();
            lanes.push(Lane {
                centerline: pts,
                width: cfg.lane_width,
                lane_type: LaneType::Drivable,
            });
        }
        gap = Some((s_c - cfg.lane_width - 2.0, s_c + cfg.lane_width + 2.0));
    }
    let in_gap = |s: f64| gap.is_some_and(|(a, b)| s > a && s < b);

    let mut obstacles = Vec::new();
    let wall_len = 8.0;
    let wall_off = road_half + cfg.sidewalk_width + 0.5;
    let mut s = 0.5 * wall_len;
    while s < cfg.road_length {
        if !in_gap(s - 0.5 * wall_len) && !in_gap(s + 0.5 * wall_len) && !in_gap(s) {
            let (c, t) = polyline::sample(&reference, &ref_cum, s);
            for side in [-1.0, 1.0] {
                obstacles.push(Obstacle {
                    center: c + t.perp() * (side * wall_off),
                    yaw: t.angle(),
                    length: wall_len,
                    width: 1.0,
                });
            }
        }
        s += wall_len;
    }
    for side in [-1.0, 1.0] {
        let mut s = rng.random_range(cfg.pole_spacing.0..cfg.pole_spacing.1);
        while s < cfg.road_length {
            if !in_gap(s) {
                let (c, t) = polyline::sample(&reference, &ref_cum, s);
                obstacles.push(Obstacle {
                    center: c + t.perp() * (side * (road_half + 0.7)),
                    yaw: t.angle(),
                    length: 0.4,
                    width: 0.4,
                });
            }
            s += rng.random_range(cfg.pole_spacing.0..cfg.pole_spacing.1);
        }
    }

    let map = MapGraph {
        lanes,
        static_obstacles: obstacles,
        drivable_index: OnceLock::new(),
    };
    GeneratedMap { map, travel_lanes }
}
