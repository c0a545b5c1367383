//! Conditional rectified flow on small bird's-eye occupancy sequences.
//!
//! The velocity field is a two-layer 3x3 conv net over per-pixel features:
//! the noisy latent frames, the layout frames, the initial frame, a one-hot
//! tag and a few time features, all concatenated along channels.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grads, linear, Adam, Graph, ParamId, ParamStore, Var};
use crate::checkpoint;
use crate::datapipe::{ClipSource, TrainingPair, Trajectory6DoF};
use crate::error::{Error, Result};
use crate::geometry::{oriented_rect, point_in_convex, Vec2};
use crate::rectifier::lift_baseline;
use crate::world_sim::{EventRecord, EventType};

const TIME_FEATURES: usize = 3;

/// Occupancy sequence `frames x height x width`, frame-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self::filled(frames, height, width, 0.0)
    }

    pub fn filled(frames: usize, height: usize, width: usize, v: f64) -> Self {
        Self {
            frames,
            height,
            width,
            values: vec![v; frames * height * width],
        }
    }

    pub fn from_vec(frames: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * height * width {
            return Err(Error::Input(format!(
                "grid {frames}x{height}x{width} needs {} values, got {}",
                frames * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("grid values must be finite".into()));
        }
        Ok(Self {
            frames,
            height,
            width,
            values,
        })
    }

    /// Unit Gaussian noise.
    pub fn noise<R: Rng>(frames: usize, height: usize, width: usize, rng: &mut R) -> Self {
        let values = (0..frames * height * width)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self {
            frames,
            height,
            width,
            values,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, f: usize, r: usize, c: usize) -> f64 {
        self.values[(f * self.height + r) * self.width + c]
    }

    pub fn set(&mut self, f: usize, r: usize, c: usize, v: f64) {
        self.values[(f * self.height + r) * self.width + c] = v;
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.pixels();
        &self.values[f * n..(f + 1) * n]
    }

    fn check_same(&self, other: &LatentGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Input(format!(
                "grid shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.check_same(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(self.with_values(values))
    }

    fn with_values(&self, values: Vec<f64>) -> LatentGrid {
        LatentGrid {
            frames: self.frames,
            height: self.height,
            width: self.width,
            values,
        }
    }

    /// Pixel-major layout `[pixels, frames]`, the network's row order.
    fn to_pixel_major(&self) -> Array2<f64> {
        let n = self.pixels();
        Array2::from_shape_fn((n, self.frames), |(p, f)| self.values[f * n + p])
    }

    fn from_pixel_major(frames: usize, height: usize, width: usize, a: ndarray::ArrayView2<f64>) -> Self {
        let n = height * width;
        let mut values = vec![0.0; frames * n];
        for p in 0..n {
            for f in 0..frames {
                values[f * n + p] = a[[p, f]];
            }
        }
        Self {
            frames,
            height,
            width,
            values,
        }
    }

    /// One line per `(frame, row)`: `frame,row,v0,...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,row");
        for c in 0..self.width {
            s.push_str(&format!(",c{c}"));
        }
        s.push('\n');
        for f in 0..self.frames {
            for r in 0..self.height {
                s.push_str(&format!("{f},{r}"));
                for c in 0..self.width {
                    s.push_str(&format!(",{:.6}", self.get(f, r, c)));
                }
                s.push('\n');
            }
        }
        s
    }

    /// Plain-text graymap with frames stacked vertically; [-1, 1] maps to
    /// [0, 255] after clamping.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.width, self.height * self.frames);
        for f in 0..self.frames {
            for r in 0..self.height {
                let row: Vec<String> = (0..self.width)
                    .map(|c| {
                        let v = self.get(f, r, c).clamp(-1.0, 1.0);
                        (((v + 1.0) * 127.5).round() as u8).to_string()
                    })
                    .collect();
                s.push_str(&row.join(" "));
                s.push('\n');
            }
        }
        s
    }
}

/// `t z1 + (1 - t) z0`.
pub fn interpolate(z0: &LatentGrid, z1: &LatentGrid, t: f64) -> Result<LatentGrid> {
    z0.check_same(z1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("t = {t} outside [0, 1]")));
    }
    let values = z0
        .values
        .iter()
        .zip(&z1.values)
        .map(|(a, b)| t * b + (1.0 - t) * a)
        .collect();
    Ok(z0.with_values(values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCondition {
    pub layout: LatentGrid,
    /// `height x width`, row-major.
    pub init_frame: Vec<f64>,
    pub tag: usize,
}

impl FlowCondition {
    pub fn validate(&self, frames: usize, height: usize, width: usize, n_tags: usize) -> Result<()> {
        if self.layout.shape() != (frames, height, width) {
            return Err(Error::Input(format!(
                "layout shape {:?} does not match {:?}",
                self.layout.shape(),
                (frames, height, width)
            )));
        }
        if self.init_frame.len() != height * width {
            return Err(Error::Input("init frame size mismatch".into()));
        }
        if self.tag >= n_tags {
            return Err(Error::Input(format!("tag {} out of range 0..{n_tags}", self.tag)));
        }
        Ok(())
    }
}

/// Anything that predicts a velocity for `(z_t, t, cond)`.
pub trait VelocityField {
    fn velocity(&self, z_t: &LatentGrid, t: f64, cond: &FlowCondition) -> Result<LatentGrid>;
}

/// Returns `z1 - z0` for the pair it was built from.
#[derive(Debug, Clone)]
pub struct ExactOracle {
    pub z0: LatentGrid,
    pub z1: LatentGrid,
}

impl VelocityField for ExactOracle {
    fn velocity(&self, _z_t: &LatentGrid, _t: f64, _cond: &FlowCondition) -> Result<LatentGrid> {
        self.z1.sub(&self.z0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl VelocityField for ZeroField {
    fn velocity(&self, z_t: &LatentGrid, _t: f64, _cond: &FlowCondition) -> Result<LatentGrid> {
        Ok(LatentGrid::zeros(z_t.frames, z_t.height, z_t.width))
    }
}

/// Mean squared difference between the predicted velocity at `z_t` and
/// `z1 - z0`.
pub fn fm_loss(net: &dyn VelocityField, z0: &LatentGrid, z1: &LatentGrid, t: f64, cond: &FlowCondition) -> Result<f64> {
    let zt = interpolate(z0, z1, t)?;
    let v = net.velocity(&zt, t, cond)?;
    zt.check_same(&v)?;
    if v.values.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite velocity".into()));
    }
    let n = v.values.len() as f64;
    Ok(v
        .values
        .iter()
        .zip(z1.values.iter().zip(&z0.values))
        .map(|(p, (a, b))| (p - (a - b)).powi(2))
        .sum::<f64>()
        / n)
}

/// `sigmoid(m + s n)` with `n` standard normal.
pub fn sample_logit_normal<R: Rng>(rng: &mut R, mean: f64, std: f64) -> f64 {
    let n: f64 = StandardNormal.sample(rng);
    let t = 1.0 / (1.0 + (-(mean + std * n)).exp());
    // keep strictly inside (0, 1) even when the logit saturates
    t.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Forward Euler from `z0` over `n_steps` uniform steps.
pub fn sample_from(net: &dyn VelocityField, z0: LatentGrid, cond: &FlowCondition, n_steps: usize) -> Result<LatentGrid> {
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    let h = 1.0 / n_steps as f64;
    let mut z = z0;
    for k in 0..n_steps {
        let v = net.velocity(&z, k as f64 * h, cond)?;
        z.check_same(&v)?;
        z.values.iter_mut().zip(&v.values).for_each(|(a, b)| *a += h * b);
    }
    Ok(z)
}

/// Forward Euler from unit Gaussian noise drawn from `seed`.
pub fn sample(net: &dyn VelocityField, cond: &FlowCondition, n_steps: usize, seed: u64) -> Result<LatentGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, h, w) = cond.layout.shape();
    sample_from(net, LatentGrid::noise(f, h, w, &mut rng), cond, n_steps)
}

/// Mean of `grid` inside and outside the cells the layout marks occupied
/// (`> 0`), pooled over frames. `None` when either region is empty.
pub fn region_contrast(grid: &LatentGrid, layout: &LatentGrid) -> Option<(f64, f64)> {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (v, l) in grid.values.iter().zip(&layout.values) {
        if *l > 0.0 {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    (ni > 0 && no > 0).then(|| (si / ni as f64, so / no as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_tags: usize,
    pub hidden: usize,
    /// Meters per grid cell when rasterizing clips.
    pub cell_size: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub sample_steps: usize,
    pub logit_mean: f64,
    pub logit_std: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            height: 16,
            width: 16,
            n_tags: 4,
            hidden: 32,
            cell_size: 2.0,
            learning_rate: 2e-3,
            batch_size: 8,
            steps: 600,
            grad_clip: 5.0,
            eval_every: 100,
            sample_steps: 20,
            logit_mean: 0.0,
            logit_std: 1.0,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("n_tags", self.n_tags),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("sample_steps", self.sample_steps),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::Config(format!("flow.{name} must be positive")));
            }
        }
        let finite_pos = [
            ("cell_size", self.cell_size),
            ("learning_rate", self.learning_rate),
            ("grad_clip", self.grad_clip),
            ("logit_std", self.logit_std),
        ];
        for (name, v) in finite_pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("flow.{name} must be positive and finite")));
            }
        }
        if !self.logit_mean.is_finite() {
            return Err(Error::Config("flow.logit_mean must be finite".into()));
        }
        Ok(())
    }

    fn in_channels(&self) -> usize {
        2 * self.frames + 1 + self.n_tags + TIME_FEATURES
    }
}

#[derive(Debug, Clone, PartialEq)]
struct FlowIds {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    skip_w: ParamId,
}

/// Trainable conv velocity field.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub params: ParamStore,
    ids: FlowIds,
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub target: LatentGrid,
    pub cond: FlowCondition,
}

/// Row indices of a 3x3 neighborhood gather for a batch of `b` grids.
fn conv_indices(b: usize, h: usize, w: usize) -> Vec<Arc<Vec<Option<usize>>>> {
    let mut out = Vec::with_capacity(9);
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            let mut idx = Vec::with_capacity(b * h * w);
            for s in 0..b {
                for r in 0..h as i64 {
                    for c in 0..w as i64 {
                        let (rr, cc) = (r + dr, c + dc);
                        idx.push(
                            (rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64)
                                .then(|| s * h * w + rr as usize * w + cc as usize),
                        );
                    }
                }
            }
            out.push(Arc::new(idx));
        }
    }
    out
}

fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let a = std::f64::consts::PI * t;
    [t, a.sin(), a.cos()]
}

impl FlowModel {
    pub fn new(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let (cin, hd, f) = (config.in_channels(), config.hidden, config.frames);
        let conv1_w = p.add_linear("conv1.w", 9 * cin, hd, &mut rng);
        let conv1_b = p.add_zeros("conv1.b", 1, hd);
        let conv2_w = p.add_linear("conv2.w", 9 * hd, hd, &mut rng);
        let conv2_b = p.add_zeros("conv2.b", 1, hd);
        let out_w = p.add_linear("out.w", hd, f, &mut rng);
        p.get_mut(out_w).mapv_inplace(|v| 0.1 * v);
        let out_b = p.add_zeros("out.b", 1, f);
        let skip_w = p.add_linear("skip.w", cin, f, &mut rng);
        p.get_mut(skip_w).mapv_inplace(|v| 0.1 * v);
        Ok(Self {
            config,
            params: p,
            ids: FlowIds {
                conv1_w,
                conv1_b,
                conv2_w,
                conv2_b,
                out_w,
                out_b,
                skip_w,
            },
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_input(&self, z: &LatentGrid, cond: &FlowCondition) -> Result<()> {
        let c = &self.config;
        if z.shape() != (c.frames, c.height, c.width) {
            return Err(Error::Input(format!(
                "latent shape {:?} does not match the model {:?}",
                z.shape(),
                (c.frames, c.height, c.width)
            )));
        }
        cond.validate(c.frames, c.height, c.width, c.n_tags)
    }

    fn features(&self, items: &[(&LatentGrid, f64, &FlowCondition)]) -> Array2<f64> {
        let c = &self.config;
        let n = c.height * c.width;
        let mut x = Array2::zeros((items.len() * n, c.in_channels()));
        for (s, (z, t, cond)) in items.iter().enumerate() {
            let tf = time_features(*t);
            for p in 0..n {
                let mut row = x.row_mut(s * n + p);
                let mut k = 0;
                for f in 0..c.frames {
                    row[k] = z.values[f * n + p];
                    k += 1;
                }
                for f in 0..c.frames {
                    row[k] = cond.layout.values[f * n + p];
                    k += 1;
                }
                row[k] = cond.init_frame[p];
                k += 1;
                row[k + cond.tag] = 1.0;
                k += c.n_tags;
                for v in tf {
                    row[k] = v;
                    k += 1;
                }
            }
        }
        x
    }

    fn conv3(&self, g: &mut Graph, x: Var, idx: &[Arc<Vec<Option<usize>>>], w: ParamId, b: ParamId) -> Var {
        let cols: Vec<Var> = idx.iter().map(|i| g.gather_rows(x, i.clone())).collect();
        let im = g.concat_cols(&cols);
        linear(g, &self.params, im, w, Some(b))
    }

    /// Velocity predictions for a batch, pixel-major `[batch * pixels, frames]`.
    pub fn forward(&self, g: &mut Graph, items: &[(&LatentGrid, f64, &FlowCondition)]) -> Result<Var> {
        for (z, _, cond) in items {
            self.check_input(z, cond)?;
        }
        let c = &self.config;
        let idx = conv_indices(items.len(), c.height, c.width);
        let x = g.constant(self.features(items));
        let h1 = self.conv3(g, x, &idx, self.ids.conv1_w, self.ids.conv1_b);
        let h1 = g.silu(h1);
        let h2 = self.conv3(g, h1, &idx, self.ids.conv2_w, self.ids.conv2_b);
        let h2 = g.silu(h2);
        let h = g.add(h1, h2);
        let out = linear(g, &self.params, h, self.ids.out_w, Some(self.ids.out_b));
        let skip = linear(g, &self.params, x, self.ids.skip_w, None);
        Ok(g.add(out, skip))
    }

    /// Flow-matching loss node for `(z0, z1, t, cond)` tuples.
    fn loss_node(&self, g: &mut Graph, batch: &[(LatentGrid, &LatentGrid, f64, &FlowCondition)]) -> Result<Var> {
        let zts: Vec<LatentGrid> = batch
            .iter()
            .map(|(z0, z1, t, _)| interpolate(z0, z1, *t))
            .collect::<Result<_>>()?;
        let items: Vec<(&LatentGrid, f64, &FlowCondition)> =
            batch.iter().zip(&zts).map(|((_, _, t, c), zt)| (zt, *t, *c)).collect();
        let pred = self.forward(g, &items)?;
        let n = self.config.height * self.config.width;
        let mut target = Array2::zeros((batch.len() * n, self.config.frames));
        for (s, (z0, z1, _, _)) in batch.iter().enumerate() {
            let v = z1.sub(z0)?.to_pixel_major();
            target.slice_mut(ndarray::s![s * n..(s + 1) * n, ..]).assign(&v);
        }
        Ok(g.mse(pred, Arc::new(target)))
    }

    /// Batch loss and parameter gradients.
    pub fn loss_grad(&self, batch: &[(LatentGrid, &LatentGrid, f64, &FlowCondition)]) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut g = Graph::new();
        let l = self.loss_node(&mut g, batch)?;
        let grads = g.backward(l, &self.params)?;
        Ok((g.scalar(l), grads))
    }

    pub fn batch_loss(&self, batch: &[(LatentGrid, &LatentGrid, f64, &FlowCondition)]) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.loss_node(&mut g, batch)?;
        let v = g.scalar(l);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite flow loss {v}")));
        }
        Ok(v)
    }
}

impl VelocityField for FlowModel {
    fn velocity(&self, z_t: &LatentGrid, t: f64, cond: &FlowCondition) -> Result<LatentGrid> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, &[(z_t, t, cond)])?;
        let out = g.value(v);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite velocity".into()));
        }
        let c = &self.config;
        Ok(LatentGrid::from_pixel_major(c.frames, c.height, c.width, out.view()))
    }
}

/// Fixed noise and times for repeatable validation losses.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalDraws {
    pub z0: Vec<LatentGrid>,
    pub t: Vec<f64>,
}

impl EvalDraws {
    pub fn new(samples: &[FlowSample], config: &FlowConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z0 = Vec::with_capacity(samples.len());
        let mut t = Vec::with_capacity(samples.len());
        for s in samples {
            let (f, h, w) = s.target.shape();
            z0.push(LatentGrid::noise(f, h, w, &mut rng));
            t.push(sample_logit_normal(&mut rng, config.logit_mean, config.logit_std));
        }
        Self { z0, t }
    }
}

/// Mean per-sample flow-matching loss of `net` with fixed draws. `conds` overrides
/// the samples' own conditions when given.
pub fn eval_loss(
    net: &dyn VelocityField,
    samples: &[FlowSample],
    draws: &EvalDraws,
    conds: Option<&[FlowCondition]>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let mut s = 0.0;
    for (i, smp) in samples.iter().enumerate() {
        let cond = conds.map_or(&smp.cond, |c| &c[i]);
        s += fm_loss(net, &draws.z0[i], &smp.target, draws.t[i], cond)?;
    }
    Ok(s / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Adam on the flow-matching loss with logit-normal `t`. Deterministic under the config seed.
pub fn train_toy(config: &FlowConfig, train: &[FlowSample], val: &[FlowSample]) -> Result<(FlowModel, Vec<FlowLogRow>)> {
    let mut model = FlowModel::new(config.clone())?;
    if train.is_empty() {
        return Err(Error::Config("no flow training samples".into()));
    }
    for s in train.iter().chain(val) {
        model.check_input(&s.target, &s.cond)?;
    }
    let draws = EvalDraws::new(val, config, config.seed ^ 0xe7a1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut opt = Adam::new(&model.params, config.learning_rate);
    let mut log = Vec::with_capacity(config.steps);
    let (f, h, w) = (config.frames, config.height, config.width);
    for step in 0..config.steps {
        let batch: Vec<(LatentGrid, &LatentGrid, f64, &FlowCondition)> = (0..config.batch_size)
            .map(|_| {
                let s = &train[rng.random_range(0..train.len())];
                let z0 = LatentGrid::noise(f, h, w, &mut rng);
                let t = sample_logit_normal(&mut rng, config.logit_mean, config.logit_std);
                (z0, &s.target, t, &s.cond)
            })
            .collect();
        let (l, mut grads) = match model.loss_grad(&batch) {
            Ok(x) => x,
            Err(Error::Numeric(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !l.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { step, loss: l });
        }
        clip_grads(&mut grads, config.grad_clip);
        opt.update(&mut model.params, &grads);
        let last = step + 1 == config.steps;
        let val_loss = if !val.is_empty() && ((step + 1) % config.eval_every == 0 || last) {
            Some(eval_loss(&model, val, &draws, None)?)
        } else {
            None
        };
        log.push(FlowLogRow {
            step,
            train_loss: l,
            val_loss,
        });
    }
    Ok((model, log))
}

/// Event class: 0 nominal, then static collision, dynamic collision,
/// off-road (earliest event wins).
pub fn event_tag(source: ClipSource, events: &[EventRecord]) -> usize {
    if source == ClipSource::Nominal {
        return 0;
    }
    match events.iter().min_by_key(|e| e.t_event).map(|e| e.event_type) {
        None => 0,
        Some(EventType::CollisionStatic) => 1,
        Some(EventType::CollisionDynamic) => 2,
        Some(EventType::Offroad) => 3,
    }
}

/// Clip frames sampled evenly for each latent frame.
fn frame_indices(len: usize, frames: usize) -> Vec<usize> {
    if frames == 1 {
        return vec![0];
    }
    (0..frames).map(|i| i * (len - 1) / (frames - 1)).collect()
}

/// Rasterizes oriented boxes into one frame with 2x2 supersampling;
/// coverage maps to `2 * frac - 1`.
fn raster_boxes(boxes: &[[Vec2; 4]], origin: Vec2, cfg: &FlowConfig, out: &mut [f64]) {
    const SUB: [f64; 2] = [0.25, 0.75];
    for r in 0..cfg.height {
        for c in 0..cfg.width {
            let mut hits = 0;
            for sy in SUB {
                for sx in SUB {
                    let p = Vec2::new(
                        origin.x + (c as f64 + sx) * cfg.cell_size,
                        origin.y + (r as f64 + sy) * cfg.cell_size,
                    );
                    if boxes.iter().any(|b| point_in_convex(b, p)) {
                        hits += 1;
                    }
                }
            }
            out[r * cfg.width + c] = 2.0 * hits as f64 / 4.0 - 1.0;
        }
    }
}

/// Builds a toy sample from a training pair: the target is ground-truth
/// occupancy, the layout rasterizes the pair's inputs with headings lifted
/// from the paths. The window is centered on the subject's mean input
/// position over the sampled frames.
pub fn sample_from_pair(pair: &TrainingPair, cfg: &FlowConfig) -> Result<FlowSample> {
    cfg.validate()?;
    pair.validate()?;
    let len = pair.horizon();
    if len < 2 {
        return Err(Error::Input("pair too short to rasterize".into()));
    }
    let idx = frame_indices(len, cfg.frames);
    let subject = pair
        .agents
        .iter()
        .position(|a| a.agent_id == pair.subject_id)
        .ok_or_else(|| Error::Input("subject missing from pair".into()))?;
    let mut center = Vec2::ZERO;
    for &i in &idx {
        center = center + pair.inputs[subject].points[i];
    }
    center = center * (1.0 / idx.len() as f64);
    let origin = center
        - Vec2::new(
            0.5 * cfg.width as f64 * cfg.cell_size,
            0.5 * cfg.height as f64 * cfg.cell_size,
        );
    let lifted = lift_baseline(&pair.inputs)?;
    let n = cfg.height * cfg.width;
    let mut target = LatentGrid::zeros(cfg.frames, cfg.height, cfg.width);
    let mut layout = LatentGrid::zeros(cfg.frames, cfg.height, cfg.width);
    for (k, &i) in idx.iter().enumerate() {
        let boxes = |trajs: &[Trajectory6DoF]| -> Vec<[Vec2; 4]> {
            trajs
                .iter()
                .zip(&pair.agents)
                .map(|(tr, a)| {
                    let p = tr.poses[i];
                    oriented_rect(p.position(), p.yaw, a.extent.length, a.extent.width)
                })
                .collect()
        };
        raster_boxes(&boxes(&pair.targets), origin, cfg, &mut target.values[k * n..(k + 1) * n]);
        raster_boxes(&boxes(&lifted), origin, cfg, &mut layout.values[k * n..(k + 1) * n]);
    }
    let init_frame = target.frame(0).to_vec();
    Ok(FlowSample {
        target,
        cond: FlowCondition {
            layout,
            init_frame,
            tag: event_tag(pair.source, &pair.events).min(cfg.n_tags - 1),
        },
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PHYGFLOW";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: FlowConfig,
    params: Vec<(String, [usize; 2])>,
}

pub fn checkpoint_bytes(model: &FlowModel) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        params: checkpoint::shapes(&model.params),
    };
    checkpoint::encode(CHECKPOINT_MAGIC, &header, &model.params)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<FlowModel> {
    let (header, payload): (CheckpointHeader, _) = checkpoint::decode(CHECKPOINT_MAGIC, bytes)?;
    let mut model = FlowModel::new(header.config)?;
    if checkpoint::shapes(&model.params) != header.params {
        return Err(Error::parse("checkpoint", "parameter layout does not match the configuration"));
    }
    checkpoint::fill_params(&mut model.params, payload)?;
    Ok(model)
}

pub fn save_checkpoint(model: &FlowModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FlowModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(f: usize, h: usize, w: usize) -> FlowCondition {
        FlowCondition {
            layout: LatentGrid::filled(f, h, w, -1.0),
            init_frame: vec![0.0; h * w],
            tag: 0,
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let z0 = LatentGrid::zeros(1, 2, 2);
        let z1 = LatentGrid::filled(1, 2, 2, 2.0);
        assert_eq!(interpolate(&z0, &z1, 0.0).unwrap(), z0);
        assert_eq!(interpolate(&z0, &z1, 1.0).unwrap(), z1);
        assert!(interpolate(&z0, &z1, 0.5).unwrap().values.iter().all(|&v| v == 1.0));
        assert!(interpolate(&z0, &LatentGrid::zeros(2, 2, 2), 0.5).is_err());
    }

    #[test]
    fn oracle_one_step_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = LatentGrid::noise(2, 3, 3, &mut rng);
        let z1 = LatentGrid::noise(2, 3, 3, &mut rng);
        let oracle = ExactOracle {
            z0: z0.clone(),
            z1: z1.clone(),
        };
        let c = cond(2, 3, 3);
        assert_eq!(fm_loss(&oracle, &z0, &z1, 0.3, &c).unwrap(), 0.0);
        let out = sample_from(&oracle, z0, &c, 1).unwrap();
        for (a, b) in out.values.iter().zip(&z1.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pgm_header() {
        let g = LatentGrid::filled(2, 3, 4, 1.0);
        let pgm = g.to_pgm();
        assert!(pgm.starts_with("P2\n4 6\n255\n"));
        assert_eq!(pgm.lines().count(), 3 + 6);
    }
}
