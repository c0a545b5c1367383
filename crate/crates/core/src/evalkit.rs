//! Trajectory metrics and report/figure emission.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::{Clip, Trajectory6DoF};
use crate::error::{Error, Result};
use crate::geometry::{angle_diff, bounding_radius, oriented_rect, sat_overlap, Vec2};
use crate::map::MapGraph;
use crate::world_sim::{Extent, OFFROAD_THRESHOLD};

pub const REPORT_SCHEMA_VERSION: &str = "1";

fn pose_diff(a: &crate::world_sim::Pose6DoF, b: &crate::world_sim::Pose6DoF) -> [f64; 6] {
    let (a, b) = (a.to_array(), b.to_array());
    let mut d = [0.0; 6];
    for c in 0..6 {
        d[c] = if c >= 3 { angle_diff(a[c], b[c]) } else { a[c] - b[c] };
    }
    d
}

/// Mean over involved agents and frames of the Euclidean norm of the 6-D
/// pose difference (angles as wrapped radians).
pub fn l2_6dof(pred: &[Trajectory6DoF], gt: &[Trajectory6DoF], involved: &BTreeSet<u32>) -> Result<f64> {
    if involved.is_empty() {
        return Err(Error::Input("l2_6dof needs at least one involved agent".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for id in involved {
        let p = pred
            .iter()
            .find(|t| t.agent_id == *id)
            .ok_or_else(|| Error::Input(format!("agent {id} missing from prediction")))?;
        let g = gt
            .iter()
            .find(|t| t.agent_id == *id)
            .ok_or_else(|| Error::Input(format!("agent {id} missing from ground truth")))?;
        if p.poses.len() != g.poses.len() {
            return Err(Error::Input(format!("agent {id} length mismatch")));
        }
        for (a, b) in p.poses.iter().zip(&g.poses) {
            total += pose_diff(a, b).iter().map(|v| v * v).sum::<f64>().sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Input("empty trajectories".into()));
    }
    Ok(total / count as f64)
}

/// `(TransErr, RotErr)`: mean xyz distance in meters and mean absolute
/// wrapped yaw difference in radians.
pub fn ctrl_components(pred: &Trajectory6DoF, gt: &Trajectory6DoF) -> Result<(f64, f64)> {
    if pred.poses.len() != gt.poses.len() {
        return Err(Error::Input(format!(
            "ctrl_err length mismatch: {} vs {}",
            pred.poses.len(),
            gt.poses.len()
        )));
    }
    if pred.poses.is_empty() {
        return Err(Error::Input("ctrl_err needs non-empty trajectories".into()));
    }
    let n = pred.poses.len() as f64;
    let mut trans = 0.0;
    let mut rot = 0.0;
    for (a, b) in pred.poses.iter().zip(&gt.poses) {
        trans += ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
        rot += angle_diff(a.yaw, b.yaw).abs();
    }
    Ok((trans / n, rot / n))
}

/// Geometric mean of translation and rotation error.
pub fn ctrl_err(pred: &Trajectory6DoF, gt: &Trajectory6DoF) -> Result<f64> {
    let (t, r) = ctrl_components(pred, gt)?;
    Ok((t * r).sqrt())
}

/// Speeds from backward differences; the first frame copies the second.
pub fn speed_profile(points: &[Vec2], dt: f64) -> Vec<f64> {
    let n = points.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut v: Vec<f64> = (1..n).map(|t| points[t].distance(points[t - 1]) / dt).collect();
    v.insert(0, v[0]);
    v
}

/// Largest magnitude of the finite-difference acceleration along a path.
pub fn max_accel_of(points: &[Vec2], dt: f64) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::Input(format!("max_accel needs >= 3 frames, got {}", points.len())));
    }
    let vel: Vec<Vec2> = points.windows(2).map(|w| (w[1] - w[0]) * (1.0 / dt)).collect();
    Ok(vel
        .windows(2)
        .map(|w| (w[1] - w[0]).norm() / dt)
        .fold(0.0, f64::max))
}

/// Maximum acceleration of the clip's subject vehicle.
pub fn max_accel(clip: &Clip) -> Result<f64> {
    let pts: Vec<Vec2> = clip
        .frames
        .iter()
        .map(|f| {
            f.agent(clip.subject_id)
                .map(|a| a.pose.position())
                .ok_or_else(|| Error::Input(format!("subject {} missing from clip", clip.subject_id)))
        })
        .collect::<Result<_>>()?;
    max_accel_of(&pts, clip.dt)
}

fn footprints_at(trajs: &[Trajectory6DoF], extents: &[Extent], t: usize) -> Vec<([Vec2; 4], Vec2, f64)> {
    trajs
        .iter()
        .zip(extents)
        .map(|(tr, e)| {
            let p = &tr.poses[t];
            (
                oriented_rect(p.position(), p.yaw, e.length, e.width),
                p.position(),
                bounding_radius(e.length, e.width),
            )
        })
        .collect()
}

fn check_shapes(trajs: &[Trajectory6DoF], extents: &[Extent]) -> Result<usize> {
    if trajs.len() != extents.len() {
        return Err(Error::Input("one extent per trajectory required".into()));
    }
    let t = trajs.first().map_or(0, |x| x.poses.len());
    if trajs.iter().any(|x| x.poses.len() != t) {
        return Err(Error::Input("trajectories differ in length".into()));
    }
    Ok(t)
}

/// Fraction of (frame, agent) cells whose footprint overlaps another agent
/// or a static obstacle.
pub fn penetration_rate(trajs: &[Trajectory6DoF], extents: &[Extent], map: &MapGraph) -> Result<f64> {
    let t_len = check_shapes(trajs, extents)?;
    if t_len == 0 || trajs.is_empty() {
        return Ok(0.0);
    }
    let obstacles: Vec<([Vec2; 4], Vec2, f64)> = map
        .static_obstacles
        .iter()
        .map(|o| (o.corners(), o.center, bounding_radius(o.length, o.width)))
        .collect();
    let mut hits = 0usize;
    for t in 0..t_len {
        let fps = footprints_at(trajs, extents, t);
        for (i, (fa, ca, ra)) in fps.iter().enumerate() {
            let near = |(fb, cb, rb): &([Vec2; 4], Vec2, f64)| ca.distance(*cb) <= ra + rb && sat_overlap(fa, fb);
            let agent_hit = fps.iter().enumerate().any(|(j, b)| j != i && near(b));
            if agent_hit || obstacles.iter().any(near) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (t_len * trajs.len()) as f64)
}

/// Fraction of (frame, agent) cells with more than half the footprint
/// outside the drivable area.
pub fn offroad_rate(trajs: &[Trajectory6DoF], extents: &[Extent], map: &MapGraph) -> Result<f64> {
    let t_len = check_shapes(trajs, extents)?;
    if t_len == 0 || trajs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (tr, e) in trajs.iter().zip(extents) {
        for p in &tr.poses {
            if map.outside_fraction(p.position(), p.yaw, e.length, e.width) > OFFROAD_THRESHOLD {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (t_len * trajs.len()) as f64)
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Relative speed drop `(v[t-1] - v[t+2]) / v[t-1]` around frame `t`;
/// `None` when the window leaves the trace or the subject was at rest.
pub fn collision_drop(speeds: &[f64], t: usize) -> Option<f64> {
    if t == 0 || t + 2 >= speeds.len() {
        return None;
    }
    let before = speeds[t - 1];
    (before > 1e-6).then(|| (before - speeds[t + 2]) / before)
}

pub fn median_of(values: &[f64]) -> f64 {
    median(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolAccel {
    pub pool: String,
    pub clip_count: usize,
    pub median_max_accel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelStats {
    pub pools: Vec<PoolAccel>,
    pub bin_edges: Vec<f64>,
    /// One count vector per pool, in `pools` order.
    pub counts: Vec<Vec<usize>>,
}

impl AccelStats {
    /// Histogram of per-clip maximum accelerations with `bins` equal bins
    /// over `[0, max_value]`; values above the range go to the last bin.
    pub fn from_pools(pools: &[(&str, Vec<f64>)], bins: usize, max_value: f64) -> Self {
        let bins = bins.max(1);
        let width = max_value / bins as f64;
        let bin_edges = (0..=bins).map(|i| i as f64 * width).collect();
        let counts = pools
            .iter()
            .map(|(_, vals)| {
                let mut c = vec![0usize; bins];
                for v in vals {
                    let k = ((v / width).floor().max(0.0) as usize).min(bins - 1);
                    c[k] += 1;
                }
                c
            })
            .collect();
        Self {
            pools: pools
                .iter()
                .map(|(name, vals)| PoolAccel {
                    pool: name.to_string(),
                    clip_count: vals.len(),
                    median_max_accel: median(vals),
                })
                .collect(),
            bin_edges,
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: String,
    /// Angles enter the norm in radians.
    pub l2_6dof: f64,
    pub l2_6dof_baseline: f64,
    /// sqrt(m * rad).
    pub ctrl_err: f64,
    pub penetration_rate: f64,
    pub penetration_rate_input: f64,
    pub offroad_rate: f64,
    pub accel_stats: AccelStats,
    pub by_pool: Vec<PoolL2>,
    pub clip_count: usize,
    pub units: Units,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolL2 {
    pub pool: String,
    pub clip_count: usize,
    pub l2_6dof: f64,
    pub l2_6dof_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub l2_6dof: String,
    pub ctrl_err: String,
    pub accel: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            l2_6dof: "m and rad in one Euclidean norm".into(),
            ctrl_err: "sqrt(m*rad)".into(),
            accel: "m/s^2".into(),
        }
    }
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for (n, r) in [
            ("penetration_rate", self.penetration_rate),
            ("penetration_rate_input", self.penetration_rate_input),
            ("offroad_rate", self.offroad_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Numeric(format!("{n} {r} outside [0, 1]")));
            }
        }
        if self.clip_count == 0 {
            return Err(Error::Input("report needs at least one clip".into()));
        }
        Ok(())
    }
}

/// Speed traces of one clip's subject for the velocity-profile figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityProfile {
    pub name: String,
    pub t_event: Option<usize>,
    pub gt: Vec<f64>,
    pub corrupted: Vec<f64>,
    pub rectified: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub report: MetricReport,
    pub profiles: Vec<VelocityProfile>,
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

pub fn accel_hist_csv(stats: &AccelStats) -> String {
    let mut s = String::from("bin_left,bin_right");
    for p in &stats.pools {
        s.push(',');
        s.push_str(&p.pool);
    }
    s.push('\n');
    for b in 0..stats.bin_edges.len().saturating_sub(1) {
        let _ = write!(s, "{},{}", fmt_f(stats.bin_edges[b]), fmt_f(stats.bin_edges[b + 1]));
        for c in &stats.counts {
            let _ = write!(s, ",{}", c[b]);
        }
        s.push('\n');
    }
    s
}

pub fn velocity_profile_csv(p: &VelocityProfile) -> String {
    let mut s = String::from("frame,gt,corrupted,rectified\n");
    for t in 0..p.gt.len() {
        let get = |v: &Vec<f64>| v.get(t).map_or(String::new(), |x| fmt_f(*x));
        let _ = writeln!(s, "{t},{},{},{}", get(&p.gt), get(&p.corrupted), get(&p.rectified));
    }
    s
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 360.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        SVG_H - PAD,
        SVG_W - PAD,
        SVG_H - PAD,
        SVG_H - PAD
    )
}

fn legend(s: &mut String, names: &[&str]) {
    for (k, n) in names.iter().enumerate() {
        let y = PAD + 14.0 * k as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{n}</text>",
            SVG_W - 150.0,
            COLORS[k % COLORS.len()]
        );
    }
}

pub fn accel_hist_svg(stats: &AccelStats) -> String {
    let mut s = svg_open("max acceleration per clip (m/s^2)");
    let bins = stats.bin_edges.len().saturating_sub(1).max(1);
    let ymax = stats.counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let pw = (SVG_W - 2.0 * PAD) / bins as f64;
    let groups = stats.counts.len().max(1) as f64;
    for (k, c) in stats.counts.iter().enumerate() {
        for (b, &n) in c.iter().enumerate() {
            let h = (SVG_H - 2.0 * PAD) * n as f64 / ymax;
            let x = PAD + b as f64 * pw + k as f64 * pw / groups;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\" fill-opacity=\"0.7\"/>",
                SVG_H - PAD - h,
                pw / groups,
                COLORS[k % COLORS.len()]
            );
        }
    }
    let names: Vec<&str> = stats.pools.iter().map(|p| p.pool.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

pub fn velocity_profile_svg(p: &VelocityProfile) -> String {
    let mut s = svg_open(&format!("subject speed (m/s): {}", p.name));
    let series = [("gt", &p.gt), ("corrupted", &p.corrupted), ("rectified", &p.rectified)];
    let n = p.gt.len().max(2);
    let ymax = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(1.0, f64::max);
    let x_of = |t: usize| PAD + (SVG_W - 2.0 * PAD) * t as f64 / (n - 1) as f64;
    let y_of = |v: f64| SVG_H - PAD - (SVG_H - 2.0 * PAD) * v / ymax;
    if let Some(te) = p.t_event {
        let _ = writeln!(
            s,
            "<line x1=\"{x:.2}\" y1=\"{PAD}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>",
            SVG_H - PAD,
            x = x_of(te)
        );
    }
    for (k, (_, v)) in series.iter().enumerate() {
        if v.is_empty() {
            continue;
        }
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .map(|(t, &y)| format!("{:.2},{:.2}", x_of(t), y_of(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            COLORS[k],
            pts.join(" ")
        );
    }
    legend(&mut s, &["gt", "corrupted", "rectified"]);
    s.push_str("</svg>\n");
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes report.json, accel_hist.csv/.svg and one velocity_profile CSV/SVG
/// pair per profile into `out_dir`.
pub fn emit_report(results: &EvalResults, out_dir: &Path) -> Result<()> {
    results.report.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = serde_json::to_string_pretty(&results.report).map_err(|e| Error::Input(e.to_string()))?;
    write_file(&out_dir.join("report.json"), &(json + "\n"))?;
    write_file(&out_dir.join("accel_hist.csv"), &accel_hist_csv(&results.report.accel_stats))?;
    write_file(&out_dir.join("accel_hist.svg"), &accel_hist_svg(&results.report.accel_stats))?;
    for (k, p) in results.profiles.iter().enumerate() {
        write_file(&out_dir.join(format!("velocity_profile_{k:03}.csv")), &velocity_profile_csv(p))?;
        write_file(&out_dir.join(format!("velocity_profile_{k:03}.svg")), &velocity_profile_svg(p))?;
    }
    Ok(())
}
