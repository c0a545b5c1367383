//! Physical condition generator: turns (possibly physics-violating) 2D
//! trajectories into plausible 6-DoF trajectories.
//!
//! Pipeline per scene: positional encoding and MLP into agent tokens, then
//! `num_blocks` rounds of spatial cross-attention over an [`EnvGrid`],
//! agent self-attention, map cross-attention and a feed-forward layer, then
//! the time-wise output head.

mod env;
mod train;

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{linear, Graph, ParamId, ParamStore, Var};
use crate::datapipe::{Trajectory2D, Trajectory6DoF, WeightSpec};
use crate::error::{Error, Result};
use crate::geometry::{angle_diff, obb_overlap, oriented_rect, wrap_angle, Vec2};
use crate::map::{polyline, LaneType, MapGraph};
use crate::world_sim::{Extent, Pose6DoF};

pub use env::*;
pub use train::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Broadcast token + learned time embedding + TCN + MLP.
    TimeWise,
    /// Plain MLP from the token to all `T x 6` outputs.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RectifierConfig {
    pub token_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub deformable_samples: usize,
    pub num_anchors: usize,
    pub tcn_layers: usize,
    pub tcn_kernel: usize,
    pub time_dim: usize,
    pub head_hidden: usize,
    pub horizon: usize,
    pub pe_bands: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub env_resolution: f64,
    pub map_piece_len: f64,
    pub map_points: usize,
    pub head: HeadKind,
    pub weights: WeightSpec,
    pub seed: u64,
}

impl Default for RectifierConfig {
    fn default() -> Self {
        Self {
            token_dim: 128,
            num_blocks: 3,
            num_heads: 4,
            deformable_samples: 4,
            num_anchors: 6,
            tcn_layers: 2,
            tcn_kernel: 3,
            time_dim: 16,
            head_hidden: 64,
            horizon: 36,
            pe_bands: 8,
            learning_rate: 9e-4,
            batch_size: 64,
            steps: 2000,
            grad_clip: 5.0,
            eval_every: 100,
            env_resolution: 0.5,
            map_piece_len: 30.0,
            map_points: 10,
            head: HeadKind::TimeWise,
            weights: WeightSpec::default(),
            seed: 0,
        }
    }
}

impl RectifierConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("token_dim", self.token_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("deformable_samples", self.deformable_samples),
            ("num_anchors", self.num_anchors),
            ("tcn_kernel", self.tcn_kernel),
            ("time_dim", self.time_dim),
            ("head_hidden", self.head_hidden),
            ("pe_bands", self.pe_bands),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("map_points", self.map_points),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.horizon < 2 {
            return Err(Error::Config("horizon must be at least 2".into()));
        }
        if self.token_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} not divisible by num_heads {}",
                self.token_dim, self.num_heads
            )));
        }
        if self.tcn_kernel % 2 == 0 {
            return Err(Error::Config("tcn_kernel must be odd".into()));
        }
        if self.num_anchors > self.horizon {
            return Err(Error::Config("num_anchors exceeds horizon".into()));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("grad_clip", self.grad_clip),
            ("env_resolution", self.env_resolution),
            ("map_piece_len", self.map_piece_len),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        self.weights.validate()
    }
}

/// Longest positional-encoding wavelength in meters; band `k` uses
/// `PE_MAX_WAVELENGTH / 2^k`.
pub const PE_MAX_WAVELENGTH: f64 = 512.0;
const COORD_SCALE: f64 = 50.0;
const SPEED_SCALE: f64 = 10.0;
/// Per-step features fed to the time-wise head: input velocity, the
/// environment channels at the input position, obstacle coverage just ahead,
/// the nearest other agent in the heading frame, a contact flag and running
/// maxima of contact and of leaving the drivable area, and the input
/// velocity gated by the contact maximum.
const STEP_FEATURES: usize = 2 + ENV_CHANNELS + 1 + 3 + 3 + 2;
/// Half extents of the box used for the contact flag.
const CONTACT_HALF_LENGTH: f64 = 4.5;
const CONTACT_HALF_WIDTH: f64 = 2.0;
/// Inflation of the car footprint tested against static obstacles.
const CONTACT_MARGIN: f64 = 0.6;
/// Probe distance ahead of the agent center for the obstacle feature.
const LOOKAHEAD: f64 = 2.0;
const NEIGHBOR_SCALE: f64 = 10.0;
const NEIGHBOR_SIGMA: f64 = 3.0;
const MAP_FEATURES_PER_POINT: usize = 2;

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    off_w: ParamId,
    off_b: ParamId,
    att_w: ParamId,
    att_b: ParamId,
    sca_out_w: ParamId,
    sca_out_b: ParamId,
    heads: Vec<[ParamId; 3]>,
    sa_out: ParamId,
    ma_q: ParamId,
    ma_k: ParamId,
    ma_v: ParamId,
    ma_out: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
enum HeadIds {
    TimeWise {
        e_time: ParamId,
        proj_w: ParamId,
        proj_b: ParamId,
        tcn: Vec<(ParamId, ParamId)>,
        mlp_w1: ParamId,
        mlp_b1: ParamId,
        mlp_w2: ParamId,
        mlp_b2: ParamId,
    },
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Ids {
    enc_w1: ParamId,
    enc_b1: ParamId,
    enc_w2: ParamId,
    enc_b2: ParamId,
    map_w1: ParamId,
    map_b1: ParamId,
    map_w2: ParamId,
    map_b2: ParamId,
    blocks: Vec<BlockIds>,
    head: HeadIds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifierModel {
    pub config: RectifierConfig,
    pub params: ParamStore,
    ids: Ids,
}

/// One scene as seen by the model.
#[derive(Debug, Clone, Copy)]
pub struct SceneInput<'a> {
    pub trajs: &'a [Trajectory2D],
    pub map: &'a MapGraph,
    pub env: &'a EnvGrid,
    /// Agents flagged `true` are padding: they neither attend nor get
    /// attended to.
    pub padding: Option<&'a [bool]>,
}

impl<'a> SceneInput<'a> {
    pub fn new(trajs: &'a [Trajectory2D], map: &'a MapGraph, env: &'a EnvGrid) -> Self {
        Self {
            trajs,
            map,
            env,
            padding: None,
        }
    }
}

/// Tape handles from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `(N*T) x 6` predictions, angles not yet wrapped.
    pub pred: Var,
    pub tokens: Var,
    pub n_agents: usize,
    pub horizon: usize,
}

fn pe_features(p: Vec2, bands: usize, out: &mut Vec<f64>) {
    for c in [p.x, p.y] {
        for k in 0..bands {
            let w = 2.0 * PI * (1u64 << k) as f64 / PE_MAX_WAVELENGTH;
            out.push((w * c).sin());
            out.push((w * c).cos());
        }
    }
}

/// Forward-difference velocities, last step repeated.
fn step_velocities(points: &[Vec2], dt: f64) -> Vec<Vec2> {
    let t = points.len();
    (0..t)
        .map(|i| {
            let j = if i + 1 < t { i } else { i - 1 };
            (points[j + 1] - points[j]) * (1.0 / dt)
        })
        .collect()
}

const DT: f64 = 1.0 / crate::world_sim::RATE_HZ as f64;

/// Stationary threshold for yaw estimation.
pub const STATIONARY_EPS: f64 = 1e-6;

/// Raises 2D trajectories to 6-DoF: z, roll and pitch zero, yaw from forward
/// differences (last frame repeats the previous yaw, near-zero steps carry
/// the previous yaw, starting from 0).
pub fn lift_baseline(trajs: &[Trajectory2D]) -> Result<Vec<Trajectory6DoF>> {
    trajs
        .iter()
        .map(|tr| {
            let t = tr.points.len();
            if t < 2 {
                return Err(Error::Input(format!("agent {} trajectory has fewer than 2 frames", tr.agent_id)));
            }
            let mut yaws = vec![0.0; t];
            let mut prev = 0.0;
            for i in 0..t - 1 {
                let d = tr.points[i + 1] - tr.points[i];
                if d.norm() >= STATIONARY_EPS {
                    prev = wrap_angle(d.y.atan2(d.x));
                }
                yaws[i] = prev;
            }
            yaws[t - 1] = yaws[t - 2];
            Ok(Trajectory6DoF {
                agent_id: tr.agent_id,
                poses: tr
                    .points
                    .iter()
                    .zip(&yaws)
                    .map(|(p, &yaw)| Pose6DoF::planar(p.x, p.y, yaw))
                    .collect(),
            })
        })
        .collect()
}

/// Stacks trajectories into an `(N*T) x 6` array.
pub fn stack_poses(trajs: &[Trajectory6DoF]) -> Array2<f64> {
    let t = trajs.first().map_or(0, |x| x.poses.len());
    Array2::from_shape_fn((trajs.len() * t, 6), |(r, c)| trajs[r / t].poses[r % t].to_array()[c])
}

/// Weighted L1 loss `(1/(N*T)) sum W[i,t] |pred - gt|_1` with wrapped angle
/// differences.
pub fn loss(pred: &[Trajectory6DoF], gt: &[Trajectory6DoF], w: &Array2<f64>) -> Result<f64> {
    let n = pred.len();
    if gt.len() != n || w.nrows() != n {
        return Err(Error::Input("loss inputs disagree on N".into()));
    }
    let t = w.ncols();
    let mut total = 0.0;
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.poses.len() != t || g.poses.len() != t {
            return Err(Error::Input(format!("agent {i} length differs from {t}")));
        }
        for (k, (a, b)) in p.poses.iter().zip(&g.poses).enumerate() {
            let (a, b) = (a.to_array(), b.to_array());
            if !a.iter().chain(&b).all(|v| v.is_finite()) || !w[[i, k]].is_finite() {
                return Err(Error::Numeric(format!("non-finite value at agent {i} frame {k}")));
            }
            let mut s = 0.0;
            for c in 0..6 {
                s += if c >= 3 { angle_diff(a[c], b[c]).abs() } else { (a[c] - b[c]).abs() };
            }
            total += w[[i, k]] * s;
        }
    }
    Ok(total / (n * t) as f64)
}

/// A lane cut into pieces of roughly `piece_len` meters, each resampled to
/// `n_points`; only pieces with a point inside the grid are kept.
pub fn map_pieces(map: &MapGraph, env: &EnvGrid, piece_len: f64, n_points: usize) -> Vec<(Vec<Vec2>, LaneType, f64)> {
    let lo = env.origin;
    let hi = env.origin
        + Vec2::new(
            env.width() as f64 * env.resolution,
            env.height() as f64 * env.resolution,
        );
    let inside = |p: &Vec2| p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y;
    let mut out = Vec::new();
    for lane in &map.lanes {
        let cum = polyline::cumulative_lengths(&lane.centerline);
        let len = *cum.last().expect("lanes have >= 2 points");
        let pieces = (len / piece_len).ceil().max(1.0) as usize;
        let step = len / pieces as f64;
        for k in 0..pieces {
            let seg = polyline::slice(&lane.centerline, &cum, k as f64 * step, (k + 1) as f64 * step);
            if seg.len() < 2 {
                continue;
            }
            let pts = polyline::resample(&seg, n_points);
            if pts.iter().any(inside) {
                out.push((pts, lane.lane_type, lane.width));
            }
        }
    }
    out
}

impl RectifierModel {
    pub fn new(config: RectifierConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let c = &config;
        let d = c.token_dim;
        let enc_in = Self::encoder_width(c);
        let enc_w1 = ps.add_linear("enc.w1", enc_in, d, &mut rng);
        let enc_b1 = ps.add_zeros("enc.b1", 1, d);
        let enc_w2 = ps.add_linear("enc.w2", d, d, &mut rng);
        let enc_b2 = ps.add_zeros("enc.b2", 1, d);
        let map_in = c.map_points * MAP_FEATURES_PER_POINT + 4;
        let map_w1 = ps.add_linear("map.w1", map_in, d, &mut rng);
        let map_b1 = ps.add_zeros("map.b1", 1, d);
        let map_w2 = ps.add_linear("map.w2", d, d, &mut rng);
        let map_b2 = ps.add_zeros("map.b2", 1, d);
        let ak = c.num_anchors * c.deformable_samples;
        let dh = d / c.num_heads;
        let blocks = (0..c.num_blocks)
            .map(|b| {
                let p = |s: &str| format!("block{b}.{s}");
                let off_w = ps.add_linear(&p("sca.off_w"), d, 2 * ak, &mut rng);
                ps.get_mut(off_w).mapv_inplace(|v| 0.5 * v);
                BlockIds {
                    off_w,
                    off_b: ps.add_zeros(&p("sca.off_b"), 1, 2 * ak),
                    att_w: ps.add_linear(&p("sca.att_w"), d, ak, &mut rng),
                    att_b: ps.add_zeros(&p("sca.att_b"), 1, ak),
                    sca_out_w: ps.add_linear(&p("sca.out_w"), c.num_anchors * ENV_CHANNELS, d, &mut rng),
                    sca_out_b: ps.add_zeros(&p("sca.out_b"), 1, d),
                    heads: (0..c.num_heads)
                        .map(|h| {
                            [
                                ps.add_linear(&p(&format!("sa.h{h}.q")), d, dh, &mut rng),
                                ps.add_linear(&p(&format!("sa.h{h}.k")), d, dh, &mut rng),
                                ps.add_linear(&p(&format!("sa.h{h}.v")), d, dh, &mut rng),
                            ]
                        })
                        .collect(),
                    sa_out: ps.add_linear(&p("sa.out"), d, d, &mut rng),
                    ma_q: ps.add_linear(&p("ma.q"), d, d, &mut rng),
                    ma_k: ps.add_linear(&p("ma.k"), d, d, &mut rng),
                    ma_v: ps.add_linear(&p("ma.v"), d, d, &mut rng),
                    ma_out: ps.add_linear(&p("ma.out"), d, d, &mut rng),
                    ffn_w1: ps.add_linear(&p("ffn.w1"), d, 2 * d, &mut rng),
                    ffn_b1: ps.add_zeros(&p("ffn.b1"), 1, 2 * d),
                    ffn_w2: ps.add_linear(&p("ffn.w2"), 2 * d, d, &mut rng),
                    ffn_b2: ps.add_zeros(&p("ffn.b2"), 1, d),
                }
            })
            .collect();
        let hh = c.head_hidden;
        let head = match c.head {
            HeadKind::TimeWise => {
                let e_time = ps.add_linear("head.e_time", c.time_dim, c.horizon, &mut rng);
                let e = ps.get(e_time).t().to_owned();
                *ps.get_mut(e_time) = e;
                HeadIds::TimeWise {
                    e_time,
                    proj_w: ps.add_linear("head.proj_w", d + c.time_dim + STEP_FEATURES, hh, &mut rng),
                    proj_b: ps.add_zeros("head.proj_b", 1, hh),
                    tcn: (0..c.tcn_layers)
                        .map(|l| {
                            (
                                ps.add_linear(&format!("head.tcn{l}.w"), c.tcn_kernel * hh, hh, &mut rng),
                                ps.add_zeros(&format!("head.tcn{l}.b"), 1, hh),
                            )
                        })
                        .collect(),
                    mlp_w1: ps.add_linear("head.mlp_w1", hh, hh, &mut rng),
                    mlp_b1: ps.add_zeros("head.mlp_b1", 1, hh),
                    mlp_w2: ps.add_zeros("head.mlp_w2", hh, 6),
                    mlp_b2: ps.add_zeros("head.mlp_b2", 1, 6),
                }
            }
            HeadKind::Mlp => HeadIds::Mlp {
                w1: ps.add_linear("head.w1", d, hh, &mut rng),
                b1: ps.add_zeros("head.b1", 1, hh),
                w2: ps.add_zeros("head.w2", hh, c.horizon * 6),
                b2: ps.add_zeros("head.b2", 1, c.horizon * 6),
            },
        };
        Ok(Self {
            config,
            params: ps,
            ids: Ids {
                enc_w1,
                enc_b1,
                enc_w2,
                enc_b2,
                map_w1,
                map_b1,
                map_w2,
                map_b2,
                blocks,
                head,
            },
        })
    }

    fn encoder_width(c: &RectifierConfig) -> usize {
        c.horizon * (4 * c.pe_bands + 4)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Handle of the FFN output layer of block `b` (for inspection).
    pub fn ffn_output_weight(&self, b: usize) -> Option<ParamId> {
        self.ids.blocks.get(b).map(|x| x.ffn_w2)
    }

    fn check_input(&self, inp: &SceneInput) -> Result<(usize, usize)> {
        let n = inp.trajs.len();
        if n == 0 {
            return Err(Error::Input("scene has no agents".into()));
        }
        let t = self.config.horizon;
        for tr in inp.trajs {
            if tr.points.len() != t {
                return Err(Error::Input(format!(
                    "agent {} has {} frames, model horizon is {t}",
                    tr.agent_id,
                    tr.points.len()
                )));
            }
            if !tr.points.iter().all(|p| p.is_finite()) {
                return Err(Error::Input(format!("agent {} has non-finite points", tr.agent_id)));
            }
        }
        if let Some(p) = inp.padding {
            if p.len() != n {
                return Err(Error::Input("padding mask length differs from agent count".into()));
            }
        }
        Ok((n, t))
    }

    /// Encoder features: PE bands and scaled coordinates relative to the
    /// grid center, plus per-step velocities.
    fn encoder_input(&self, inp: &SceneInput) -> Array2<f64> {
        let c = &self.config;
        let center = inp.env.center();
        let width = Self::encoder_width(c);
        let mut data = Vec::with_capacity(inp.trajs.len() * width);
        for tr in inp.trajs {
            let vel = step_velocities(&tr.points, DT);
            for (p, v) in tr.points.iter().zip(&vel) {
                let rel = *p - center;
                pe_features(rel, c.pe_bands, &mut data);
                data.extend([rel.x / COORD_SCALE, rel.y / COORD_SCALE, v.x / SPEED_SCALE, v.y / SPEED_SCALE]);
            }
        }
        Array2::from_shape_vec((inp.trajs.len(), width), data).expect("encoder width")
    }

    /// Tokens `N x D` from the agent encoder alone.
    pub fn encode_agents(&self, g: &mut Graph, inp: &SceneInput) -> Result<Var> {
        self.check_input(inp)?;
        let x = g.constant(self.encoder_input(inp));
        let h = linear(g, &self.params, x, self.ids.enc_w1, Some(self.ids.enc_b1));
        let h = g.silu(h);
        Ok(linear(g, &self.params, h, self.ids.enc_w2, Some(self.ids.enc_b2)))
    }

    fn anchor_frames(&self) -> Vec<usize> {
        let a = self.config.num_anchors;
        let t = self.config.horizon;
        if a == 1 {
            return vec![t - 1];
        }
        (0..a).map(|k| ((k * (t - 1)) as f64 / (a - 1) as f64).round() as usize).collect()
    }

    /// Deformable sampling of the environment around anchor points of each
    /// trajectory, added residually to `q`.
    pub fn spatial_cross_attn(&self, g: &mut Graph, q: Var, inp: &SceneInput, block: usize) -> Var {
        let b = &self.ids.blocks[block];
        let ps = &self.params;
        let n = inp.trajs.len();
        let a = self.config.num_anchors;
        let k = self.config.deformable_samples;
        let anchors = self.anchor_frames();
        let mut refs = Array2::zeros((n * a * k, 2));
        for (i, tr) in inp.trajs.iter().enumerate() {
            for (ai, &t) in anchors.iter().enumerate() {
                let (u, v) = inp.env.to_grid(tr.points[t]);
                for s in 0..k {
                    let r = (i * a + ai) * k + s;
                    refs[[r, 0]] = u;
                    refs[[r, 1]] = v;
                }
            }
        }
        let h = g.layer_norm(q);
        let off = linear(g, ps, h, b.off_w, Some(b.off_b));
        let off = g.reshape(off, n * a * k, 2);
        let off = g.scale(off, 1.0 / inp.env.resolution);
        let refs = g.constant(refs);
        let pos = g.add(refs, off);
        let feats = g.bilinear(pos, Arc::clone(&inp.env.raster));
        let logits = linear(g, ps, h, b.att_w, Some(b.att_b));
        let logits = g.reshape(logits, n * a, k);
        let w = g.masked_softmax(logits, Arc::new(Array2::from_elem((n * a, k), true)));
        let w = g.reshape(w, n * a * k, 1);
        let weighted = g.mul_col(feats, w);
        let per_anchor = g.sum_groups(weighted, k);
        let flat = g.reshape(per_anchor, n, a * ENV_CHANNELS);
        let upd = linear(g, ps, flat, b.sca_out_w, Some(b.sca_out_b));
        g.add(q, upd)
    }

    fn agent_mask(n: usize, padding: Option<&[bool]>) -> Arc<Array2<bool>> {
        Arc::new(Array2::from_shape_fn((n, n), |(i, j)| match padding {
            Some(p) => !p[i] && !p[j],
            None => true,
        }))
    }

    /// Multi-head self-attention across agents with residual connection.
    pub fn agent_self_attn(&self, g: &mut Graph, q: Var, padding: Option<&[bool]>, block: usize) -> Var {
        let b = &self.ids.blocks[block];
        let ps = &self.params;
        let n = g.value(q).nrows();
        let dh = self.config.token_dim / self.config.num_heads;
        let mask = Self::agent_mask(n, padding);
        let h = g.layer_norm(q);
        let mut outs = Vec::with_capacity(b.heads.len());
        for [wq, wk, wv] in &b.heads {
            let qh = linear(g, ps, h, *wq, None);
            let kh = linear(g, ps, h, *wk, None);
            let vh = linear(g, ps, h, *wv, None);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let att = g.masked_softmax(s, Arc::clone(&mask));
            outs.push(g.matmul(att, vh));
        }
        let cat = g.concat_cols(&outs);
        let upd = linear(g, ps, cat, b.sa_out, None);
        g.add(q, upd)
    }

    fn map_token_input(&self, inp: &SceneInput) -> Option<Array2<f64>> {
        let c = &self.config;
        let pieces = map_pieces(inp.map, inp.env, c.map_piece_len, c.map_points);
        if pieces.is_empty() {
            return None;
        }
        let center = inp.env.center();
        let width = c.map_points * MAP_FEATURES_PER_POINT + 4;
        let mut data = Vec::with_capacity(pieces.len() * width);
        for (pts, kind, w) in &pieces {
            for p in pts {
                let rel = *p - center;
                data.extend([rel.x / COORD_SCALE, rel.y / COORD_SCALE]);
            }
            data.extend([
                (*kind == LaneType::Drivable) as u8 as f64,
                (*kind == LaneType::Sidewalk) as u8 as f64,
                (*kind == LaneType::Shoulder) as u8 as f64,
                w / 4.0,
            ]);
        }
        Some(Array2::from_shape_vec((pieces.len(), width), data).expect("map width"))
    }

    /// Map tokens `M x D`, or `None` when no lane falls inside the grid.
    pub fn map_tokens(&self, g: &mut Graph, inp: &SceneInput) -> Option<Var> {
        let x = g.constant(self.map_token_input(inp)?);
        let ps = &self.params;
        let h = linear(g, ps, x, self.ids.map_w1, Some(self.ids.map_b1));
        let h = g.silu(h);
        Some(linear(g, ps, h, self.ids.map_w2, Some(self.ids.map_b2)))
    }

    /// Cross-attention from agents to map tokens; identity without tokens.
    pub fn map_cross_attn(&self, g: &mut Graph, q: Var, map_tokens: Option<Var>, block: usize) -> Var {
        let Some(e) = map_tokens else { return q };
        let b = &self.ids.blocks[block];
        let ps = &self.params;
        let n = g.value(q).nrows();
        let m = g.value(e).nrows();
        let h = g.layer_norm(q);
        let qq = linear(g, ps, h, b.ma_q, None);
        let kk = linear(g, ps, e, b.ma_k, None);
        let vv = linear(g, ps, e, b.ma_v, None);
        let s = g.matmul_t(qq, kk);
        let s = g.scale(s, 1.0 / (self.config.token_dim as f64).sqrt());
        let att = g.masked_softmax(s, Arc::new(Array2::from_elem((n, m), true)));
        let ctx = g.matmul(att, vv);
        let upd = linear(g, ps, ctx, b.ma_out, None);
        g.add(q, upd)
    }

    /// Position-wise two-layer MLP with residual connection.
    pub fn ffn(&self, g: &mut Graph, q: Var, block: usize) -> Var {
        let b = &self.ids.blocks[block];
        let ps = &self.params;
        let h = g.layer_norm(q);
        let h = linear(g, ps, h, b.ffn_w1, Some(b.ffn_b1));
        let h = g.silu(h);
        let upd = linear(g, ps, h, b.ffn_w2, Some(b.ffn_b2));
        g.add(q, upd)
    }

    fn step_features(&self, inp: &SceneInput) -> Array2<f64> {
        let t = self.config.horizon;
        let n = inp.trajs.len();
        let mut out = Array2::zeros((n * t, STEP_FEATURES));
        let real = |j: usize| inp.padding.is_none_or(|p| !p[j]);
        let car_diag = (Extent::CAR.length + CONTACT_MARGIN).hypot(Extent::CAR.width + CONTACT_MARGIN);
        for (i, tr) in inp.trajs.iter().enumerate() {
            let vel = step_velocities(&tr.points, DT);
            let mut heading = Vec2::new(1.0, 0.0);
            let (mut contact_seen, mut off_seen) = (0.0f64, 0.0f64);
            for k in 0..t {
                let r = i * t + k;
                let p = tr.points[k];
                out[[r, 0]] = vel[k].x / SPEED_SCALE;
                out[[r, 1]] = vel[k].y / SPEED_SCALE;
                for (c, v) in inp.env.sample(p).into_iter().enumerate() {
                    out[[r, 2 + c]] = v;
                }
                if vel[k].norm() > 0.5 {
                    heading = vel[k].normalized();
                }
                let c = 2 + ENV_CHANNELS;
                let ahead = inp.env.sample(p + heading * LOOKAHEAD)[CH_OBSTACLE];
                out[[r, c]] = ahead;
                let frame = |d: Vec2| (d.x * heading.x + d.y * heading.y, -d.x * heading.y + d.y * heading.x);
                let others = || (0..n).filter(|&j| j != i && real(j)).map(|j| inp.trajs[j].points[k] - p);
                if let Some(d) = others().min_by(|a, b| a.norm().total_cmp(&b.norm())) {
                    let (long, lat) = frame(d);
                    out[[r, c + 1]] = (long / NEIGHBOR_SCALE).clamp(-3.0, 3.0);
                    out[[r, c + 2]] = (lat / NEIGHBOR_SCALE).clamp(-3.0, 3.0);
                    out[[r, c + 3]] = (-d.norm().powi(2) / (2.0 * NEIGHBOR_SIGMA * NEIGHBOR_SIGMA)).exp();
                }
                let touching = others().any(|d| {
                    let (long, lat) = frame(d);
                    long.abs() < CONTACT_HALF_LENGTH && lat.abs() < CONTACT_HALF_WIDTH
                });
                let footprint = oriented_rect(p, heading.y.atan2(heading.x), Extent::CAR.length + CONTACT_MARGIN, Extent::CAR.width + CONTACT_MARGIN);
                let blocked = inp.map.static_obstacles.iter().any(|o| {
                    let reach = 0.5 * (o.length.hypot(o.width) + car_diag);
                    o.center.distance(p) < reach && obb_overlap(&footprint, &o.corners()).unwrap_or(false)
                });
                let contact = if touching || blocked || ahead > 0.0 || out[[r, 2 + CH_OBSTACLE]] > 0.0 { 1.0 } else { 0.0 };
                contact_seen = contact_seen.max(contact);
                off_seen = off_seen.max(1.0 - out[[r, 2 + CH_DRIVABLE]]);
                out[[r, c + 4]] = contact;
                out[[r, c + 5]] = contact_seen;
                out[[r, c + 6]] = off_seen;
                out[[r, c + 7]] = contact_seen * out[[r, 0]];
                out[[r, c + 8]] = contact_seen * out[[r, 1]];
            }
        }
        out
    }

    /// Output head producing the `(N*T) x 6` residual over the baseline.
    /// Position residuals are running sums of per-step outputs; the other
    /// four components are per-step outputs directly.
    pub fn head_residual(&self, g: &mut Graph, q: Var, inp: &SceneInput) -> Var {
        let ps = &self.params;
        let n = inp.trajs.len();
        let t = self.config.horizon;
        let raw = match &self.ids.head {
            HeadIds::TimeWise {
                e_time,
                proj_w,
                proj_b,
                tcn,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            } => {
                let agent_idx: Vec<Option<usize>> = (0..n * t).map(|r| Some(r / t)).collect();
                let time_idx: Vec<Option<usize>> = (0..n * t).map(|r| Some(r % t)).collect();
                let qb = g.gather_rows(q, Arc::new(agent_idx));
                let et = g.param(ps, *e_time);
                let eb = g.gather_rows(et, Arc::new(time_idx));
                let sf = g.constant(self.step_features(inp));
                let x = g.concat_cols(&[qb, eb, sf]);
                let x = linear(g, ps, x, *proj_w, Some(*proj_b));
                let mut x = g.silu(x);
                let half = (self.config.tcn_kernel / 2) as i64;
                let shifts: Vec<Arc<Vec<Option<usize>>>> = (-half..=half)
                    .map(|o| {
                        Arc::new(
                            (0..n * t)
                                .map(|r| {
                                    let k = (r % t) as i64 + o;
                                    (k >= 0 && k < t as i64).then(|| r - (r % t) + k as usize)
                                })
                                .collect(),
                        )
                    })
                    .collect();
                for (w, b) in tcn {
                    let taps: Vec<Var> = shifts.iter().map(|s| g.gather_rows(x, Arc::clone(s))).collect();
                    let cat = g.concat_cols(&taps);
                    let y = linear(g, ps, cat, *w, Some(*b));
                    let y = g.silu(y);
                    x = g.add(x, y);
                }
                let h = linear(g, ps, x, *mlp_w1, Some(*mlp_b1));
                let h = g.silu(h);
                linear(g, ps, h, *mlp_w2, Some(*mlp_b2))
            }
            HeadIds::Mlp { w1, b1, w2, b2 } => {
                let h = linear(g, ps, q, *w1, Some(*b1));
                let h = g.silu(h);
                let o = linear(g, ps, h, *w2, Some(*b2));
                g.reshape(o, n * t, 6)
            }
        };
        let mut cum = Array2::zeros((n * t, n * t));
        for i in 0..n {
            for a in 0..t {
                for b in 0..=a {
                    cum[[i * t + a, i * t + b]] = 1.0;
                }
            }
        }
        let cum = g.constant(cum);
        let summed = g.matmul(cum, raw);
        let pos_mask = g.constant(Array2::from_shape_fn((n * t, 6), |(_, c)| (c < 2) as u8 as f64));
        let rest_mask = g.constant(Array2::from_shape_fn((n * t, 6), |(_, c)| (c >= 2) as u8 as f64));
        let a = g.mul(summed, pos_mask);
        let b = g.mul(raw, rest_mask);
        g.add(a, b)
    }

    /// Full forward pass on the tape.
    pub fn forward(&self, g: &mut Graph, inp: &SceneInput) -> Result<ForwardOut> {
        let (n, t) = self.check_input(inp)?;
        let mut q = self.encode_agents(g, inp)?;
        let map_tokens = self.map_tokens(g, inp);
        for b in 0..self.config.num_blocks {
            q = self.spatial_cross_attn(g, q, inp, b);
            q = self.agent_self_attn(g, q, inp.padding, b);
            q = self.map_cross_attn(g, q, map_tokens, b);
            q = self.ffn(g, q, b);
        }
        let residual = self.head_residual(g, q, inp);
        let baseline = g.constant(stack_poses(&lift_baseline(inp.trajs)?));
        let pred = g.add(baseline, residual);
        Ok(ForwardOut {
            pred,
            tokens: q,
            n_agents: n,
            horizon: t,
        })
    }

    /// Weighted loss node for a prediction against ground truth.
    pub fn loss_node(g: &mut Graph, pred: Var, gt: &[Trajectory6DoF], w: &Array2<f64>) -> Var {
        let (n, t) = w.dim();
        let row_w: Array1<f64> = w.iter().copied().collect();
        g.weighted_l1(
            pred,
            Arc::new(stack_poses(gt)),
            Arc::new(row_w),
            vec![false, false, false, true, true, true],
            (n * t) as f64,
        )
    }

    /// Predicted 6-DoF trajectories with angles wrapped to (-pi, pi].
    pub fn rectify(&self, inp: &SceneInput) -> Result<Vec<Trajectory6DoF>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, inp)?;
        let v = g.value(out.pred);
        let t = out.horizon;
        let res: Vec<Trajectory6DoF> = inp
            .trajs
            .iter()
            .enumerate()
            .map(|(i, tr)| Trajectory6DoF {
                agent_id: tr.agent_id,
                poses: (0..t)
                    .map(|k| {
                        let r = v.row(i * t + k);
                        Pose6DoF {
                            x: r[0],
                            y: r[1],
                            z: r[2],
                            roll: wrap_angle(r[3]),
                            pitch: wrap_angle(r[4]),
                            yaw: wrap_angle(r[5]),
                        }
                    })
                    .collect(),
            })
            .collect();
        if res.iter().flat_map(|r| &r.poses).any(|p| !p.is_finite()) {
            return Err(Error::Numeric("rectifier produced non-finite output".into()));
        }
        Ok(res)
    }
}

/// Convenience: rectify with the model's own grid construction.
pub fn rectify(model: &RectifierModel, trajs: &[Trajectory2D], map: &MapGraph, env: &EnvGrid) -> Result<Vec<Trajectory6DoF>> {
    model.rectify(&SceneInput::new(trajs, map, env))
}

/// Builds the environment grid a model expects for a set of input
/// trajectories.
pub fn env_for(map: &MapGraph, trajs: &[Trajectory2D], resolution: f64) -> Result<EnvGrid> {
    EnvGrid::around(map, trajs.iter().flat_map(|t| t.points.iter().copied()), resolution)
}
