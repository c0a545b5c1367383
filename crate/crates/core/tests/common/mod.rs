//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use phygen::autodiff::ParamStore;
use phygen::geometry::Vec2;

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p.x >= a.x.min(b.x) - 1e-12 && p.x <= a.x.max(b.x) + 1e-12 && p.y >= a.y.min(b.y) - 1e-12 && p.y <= a.y.max(b.y) + 1e-12
}

/// Closed-segment intersection by orientation tests.
pub fn segments_intersect(p1: Vec2, p2: Vec2, q1: Vec2, q2: Vec2) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Point inside or on a convex polygon, by winding of edge cross products.
pub fn point_in_polygon(poly: &[Vec2], p: Vec2) -> bool {
    let mut pos = false;
    let mut neg = false;
    for i in 0..poly.len() {
        let o = orient(poly[i], poly[(i + 1) % poly.len()], p);
        pos |= o > 0.0;
        neg |= o < 0.0;
    }
    !(pos && neg)
}

/// Brute-force intersection of two convex polygons: some pair of edges
/// crosses, or one polygon contains a vertex of the other.
pub fn polygons_intersect(a: &[Vec2], b: &[Vec2]) -> bool {
    for i in 0..a.len() {
        for j in 0..b.len() {
            if segments_intersect(a[i], a[(i + 1) % a.len()], b[j], b[(j + 1) % b.len()]) {
                return true;
            }
        }
    }
    point_in_polygon(b, a[0]) || point_in_polygon(a, b[0])
}

pub fn polygon_area(poly: &[Vec2]) -> f64 {
    let mut s = 0.0;
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        s += p.x * q.y - q.x * p.y;
    }
    0.5 * s.abs()
}

/// Sutherland-Hodgman clip of `subject` by a counter-clockwise convex `clip`.
pub fn clip_polygon(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        if input.is_empty() {
            break;
        }
        let inside = |p: Vec2| orient(a, b, p) >= 0.0;
        let cross = |p: Vec2, q: Vec2| {
            let (dp, dq) = (orient(a, b, p), orient(a, b, q));
            let t = dp / (dp - dq);
            Vec2::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
        };
        for k in 0..input.len() {
            let (cur, prev) = (input[k], input[(k + input.len() - 1) % input.len()]);
            if inside(cur) {
                if !inside(prev) {
                    out.push(cross(prev, cur));
                }
                out.push(cur);
            } else if inside(prev) {
                out.push(cross(prev, cur));
            }
        }
    }
    out
}

/// Counter-clockwise ordering of a convex polygon's vertices.
pub fn ccw(mut poly: Vec<Vec2>) -> Vec<Vec2> {
    let s: f64 = (0..poly.len())
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
            p.x * q.y - q.x * p.y
        })
        .sum();
    if s < 0.0 {
        poly.reverse();
    }
    poly
}

/// Fraction of `poly` lying outside the convex `region`.
pub fn outside_fraction_convex(poly: &[Vec2], region: &[Vec2]) -> f64 {
    let inside = polygon_area(&clip_polygon(poly, &ccw(region.to_vec())));
    1.0 - inside / polygon_area(poly)
}

/// Norm-wise relative error between analytic gradients and central finite
/// differences of `f`, worst parameter group first.
pub fn gradient_check(store: &ParamStore, analytic: &[Array2<f64>], h: f64, f: impl Fn(&ParamStore) -> f64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut work = store.clone();
    for (k, a) in analytic.iter().enumerate() {
        let mut num = Array2::<f64>::zeros(a.raw_dim());
        for idx in 0..a.len() {
            let (r, c) = (idx / a.ncols(), idx % a.ncols());
            let orig = work.values[k][[r, c]];
            work.values[k][[r, c]] = orig + h;
            let fp = f(&work);
            work.values[k][[r, c]] = orig - h;
            let fm = f(&work);
            work.values[k][[r, c]] = orig;
            num[[r, c]] = (fp - fm) / (2.0 * h);
        }
        let diff = (a - &num).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt() + num.mapv(|v| v * v).sum().sqrt();
        let rel = diff / scale.max(1e-8);
        out.push((store.names[k].clone(), rel));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

use phygen::map::{Lane, LaneType, MapGraph};
use phygen::scene::{AgentFrame, AgentInfo, LogFrame, LogTag, Provenance, SceneLog, SCHEMA_VERSION};
use phygen::world_sim::{AgentKind, AgentState, EventRecord, Pose6DoF};
use std::sync::Arc;

/// One straight drivable lane along +x, centered on y = 0.
pub fn straight_road(width: f64) -> Arc<MapGraph> {
    Arc::new(
        MapGraph::new(
            vec![Lane {
                centerline: vec![Vec2::new(-1000.0, 0.0), Vec2::new(1000.0, 0.0)],
                width,
                lane_type: LaneType::Drivable,
            }],
            vec![],
        )
        .unwrap(),
    )
}

/// Hand-built log: agent `ids[i]` sits at `path(i, t)` with yaw 0 on frame `t`.
pub fn synthetic_log(
    n_frames: usize,
    ids: &[u32],
    path: impl Fn(usize, usize) -> (f64, f64),
    events: Vec<EventRecord>,
    perturbed_id: Option<u32>,
) -> SceneLog {
    let extent = AgentState::vehicle(0, 0.0, 0.0, 0.0, 0.0).extent;
    let frames = (0..n_frames)
        .map(|t| LogFrame {
            frame_index: t,
            agents: ids
                .iter()
                .enumerate()
                .map(|(i, &id)| {
                    let (x, y) = path(i, t);
                    AgentFrame {
                        agent_id: id,
                        pose: Pose6DoF::planar(x, y, 0.0),
                        velocity: Vec2::ZERO,
                        yaw_rate: 0.0,
                    }
                })
                .collect(),
        })
        .collect();
    SceneLog {
        schema_version: SCHEMA_VERSION.to_string(),
        rate_hz: 12,
        seed: 0,
        provenance: if perturbed_id.is_some() {
            Provenance::EgoPerturbed
        } else {
            Provenance::Nominal
        },
        tag: if events.is_empty() {
            LogTag::EventFree
        } else {
            LogTag::EventTagged
        },
        ego_id: ids[0],
        perturbed_id,
        perturbation: None,
        map: straight_road(40.0),
        agents: ids
            .iter()
            .map(|&id| AgentInfo {
                agent_id: id,
                kind: AgentKind::Vehicle,
                extent,
            })
            .collect(),
        frames,
        events,
    }
}
