//! Small reverse-mode automatic differentiation over row-major 2-D arrays,
//! with just the operations the rectifier and the flow toy need.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Named trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Array2<f64>>,
}

/// Index into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`.
    pub fn add_linear<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(rng));
        self.add(name, w)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }
}

/// Multi-channel raster sampled bilinearly at continuous cell coordinates
/// `(u, v)` = (column, row), with cell centers at integer coordinates.
/// Samples that fall outside the raster read zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major `height x width x channels`.
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn cell(&self, row: i64, col: i64) -> Option<&[f64]> {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            return None;
        }
        let o = (row as usize * self.width + col as usize) * self.channels;
        Some(&self.data[o..o + self.channels])
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = (row * self.width + col) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Adds the bilinear sample at `(u, v)` into `out` and, when requested,
    /// its partial derivatives with respect to `u` and `v`.
    pub fn sample_into(&self, u: f64, v: f64, out: &mut [f64], mut du: Option<&mut [f64]>, mut dv: Option<&mut [f64]>) {
        let c0 = u.floor();
        let r0 = v.floor();
        let fu = u - c0;
        let fv = v - r0;
        let (c0, r0) = (c0 as i64, r0 as i64);
        let corners = [
            (r0, c0, (1.0 - fu) * (1.0 - fv), -(1.0 - fv), -(1.0 - fu)),
            (r0, c0 + 1, fu * (1.0 - fv), 1.0 - fv, -fu),
            (r0 + 1, c0, (1.0 - fu) * fv, -fv, 1.0 - fu),
            (r0 + 1, c0 + 1, fu * fv, fv, fu),
        ];
        for (r, c, w, wu, wv) in corners {
            if let Some(vals) = self.cell(r, c) {
                for k in 0..self.channels {
                    out[k] += w * vals[k];
                    if let Some(d) = du.as_deref_mut() {
                        d[k] += wu * vals[k];
                    }
                    if let Some(d) = dv.as_deref_mut() {
                        d[k] += wv * vals[k];
                    }
                }
            }
        }
    }

    pub fn sample(&self, u: f64, v: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(u, v, &mut out, None, None);
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    LayerNorm(Var),
    MaskedSoftmax(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<Vec<Option<usize>>>),
    Reshape(Var),
    SumGroups(Var, usize),
    Bilinear(Var, Arc<Raster>),
    WeightedL1 {
        pred: Var,
        target: Arc<Array2<f64>>,
        row_weight: Arc<Array1<f64>>,
        wrap_cols: Vec<bool>,
        norm: f64,
    },
    Mse(Var, Arc<Array2<f64>>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Tape of operations recorded during one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Scales each row of `a` by the matching entry of the `n x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu);
        self.push(v, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.mean().unwrap_or(0.0);
            let var = row.mapv(|e| (e - m) * (e - m)).mean().unwrap_or(0.0);
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|e| (e - m) * inv);
        }
        self.push(v, Op::LayerNorm(a))
    }

    /// Row-wise softmax over entries where `mask` is true; masked entries
    /// and fully masked rows come out as 0.
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<Array2<bool>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), mask.dim(), "softmax mask shape");
        let mut v = Array2::zeros(x.raw_dim());
        for ((xr, mr), mut vr) in x.rows().into_iter().zip(mask.rows()).zip(v.rows_mut()) {
            let mx = xr
                .iter()
                .zip(mr.iter())
                .filter(|(_, &m)| m)
                .map(|(&e, _)| e)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for ((o, &e), &m) in vr.iter_mut().zip(xr.iter()).zip(mr.iter()) {
                if m {
                    *o = (e - mx).exp();
                    z += *o;
                }
            }
            vr.mapv_inplace(|e| e / z);
        }
        self.push(v, Op::MaskedSoftmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat rows agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Output row `r` is `a[idx[r]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<Option<usize>>>) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((idx.len(), x.ncols()));
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                v.row_mut(r).assign(&x.row(i));
            }
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        let flat: Vec<f64> = x.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape preserves size");
        self.push(v, Op::Reshape(a))
    }

    /// Sums consecutive groups of `g` rows.
    pub fn sum_groups(&mut self, a: Var, g: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows() % g, 0, "rows divisible by group size");
        let mut v = Array2::zeros((x.nrows() / g, x.ncols()));
        for (r, row) in x.rows().into_iter().enumerate() {
            let mut o = v.row_mut(r / g);
            o += &row;
        }
        self.push(v, Op::SumGroups(a, g))
    }

    /// Samples `raster` at the `(u, v)` coordinates in each row of `pos`.
    pub fn bilinear(&mut self, pos: Var, raster: Arc<Raster>) -> Var {
        let p = self.value(pos);
        let mut v = Array2::zeros((p.nrows(), raster.channels));
        for (r, row) in p.rows().into_iter().enumerate() {
            raster.sample_into(row[0], row[1], v.row_mut(r).as_slice_mut().expect("contiguous"), None, None);
        }
        self.push(v, Op::Bilinear(pos, raster))
    }

    /// `sum_r row_weight[r] * sum_c |d_rc| / norm`, where `d = pred - target`
    /// and columns flagged in `wrap_cols` use the wrapped angular difference.
    pub fn weighted_l1(
        &mut self,
        pred: Var,
        target: Arc<Array2<f64>>,
        row_weight: Arc<Array1<f64>>,
        wrap_cols: Vec<bool>,
        norm: f64,
    ) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim());
        assert_eq!(p.nrows(), row_weight.len());
        assert_eq!(p.ncols(), wrap_cols.len());
        let mut total = 0.0;
        for ((pr, tr), &w) in p.rows().into_iter().zip(target.rows()).zip(row_weight.iter()) {
            let mut s = 0.0;
            for (c, (&a, &b)) in pr.iter().zip(tr.iter()).enumerate() {
                let d = if wrap_cols[c] { wrap_angle(a - b) } else { a - b };
                s += d.abs();
            }
            total += w * s;
        }
        let v = Array2::from_elem((1, 1), total / norm);
        self.push(
            v,
            Op::WeightedL1 {
                pred,
                target,
                row_weight,
                wrap_cols,
                norm,
            },
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: Arc<Array2<f64>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), target.dim());
        let v = Zip::from(x).and(&*target).fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t)) / x.len() as f64;
        self.push(Array2::from_elem((1, 1), v), Op::Mse(a, target))
    }

    /// Gradients of the scalar `loss` with respect to every parameter in the
    /// store (zeros for parameters not on the tape).
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Vec<Array2<f64>>> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Numeric("backward needs a scalar loss".into()));
        }
        if !lv[[0, 0]].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv[[0, 0]])));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = store.zeros_like();

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out[id.0] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulCol(a, col) => {
                    let ga = &g * self.value(*col);
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *col, gc);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Silu(a) => {
                    let ga = &g * &self.value(*a).mapv(silu_grad);
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = &g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let n = x.ncols() as f64;
                    let mut ga = Array2::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        let xr = x.row(r);
                        let m = xr.mean().unwrap_or(0.0);
                        let var = xr.mapv(|e| (e - m) * (e - m)).mean().unwrap_or(0.0);
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mg = gr.sum() / n;
                        let mgy = gr.dot(&yr) / n;
                        let mut o = ga.row_mut(r);
                        for k in 0..x.ncols() {
                            o[k] = inv * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., c0..c0 + w]).to_owned());
                        c0 += w;
                    }
                }
                Op::GatherRows(a, index) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (r, i) in index.iter().enumerate() {
                        if let Some(i) = *i {
                            let mut row = ga.row_mut(i);
                            row += &g.row(r);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).raw_dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *a, Array2::from_shape_vec(shape, flat).expect("same size"));
                }
                Op::SumGroups(a, gsize) => {
                    let x = self.value(*a);
                    let ga = Array2::from_shape_fn(x.raw_dim(), |(r, c)| g[[r / gsize, c]]);
                    acc(&mut grads, *a, ga);
                }
                Op::Bilinear(pos, raster) => {
                    let p = self.value(*pos);
                    let mut gp = Array2::zeros(p.raw_dim());
                    let ch = raster.channels;
                    let mut val = vec![0.0; ch];
                    let mut du = vec![0.0; ch];
                    let mut dv = vec![0.0; ch];
                    for r in 0..p.nrows() {
                        val.iter_mut().for_each(|e| *e = 0.0);
                        du.iter_mut().for_each(|e| *e = 0.0);
                        dv.iter_mut().for_each(|e| *e = 0.0);
                        raster.sample_into(p[[r, 0]], p[[r, 1]], &mut val, Some(&mut du), Some(&mut dv));
                        let gr = g.row(r);
                        gp[[r, 0]] = gr.iter().zip(&du).map(|(a, b)| a * b).sum();
                        gp[[r, 1]] = gr.iter().zip(&dv).map(|(a, b)| a * b).sum();
                    }
                    acc(&mut grads, *pos, gp);
                }
                Op::WeightedL1 {
                    pred,
                    target,
                    row_weight,
                    wrap_cols,
                    norm,
                } => {
                    let p = self.value(*pred);
                    let scale = g[[0, 0]] / norm;
                    let gp = Array2::from_shape_fn(p.raw_dim(), |(r, c)| {
                        let d = p[[r, c]] - target[[r, c]];
                        let d = if wrap_cols[c] { wrap_angle(d) } else { d };
                        let sign = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        scale * row_weight[r] * sign
                    });
                    acc(&mut grads, *pred, gp);
                }
                Op::Mse(a, target) => {
                    let x = self.value(*a);
                    let c = 2.0 * g[[0, 0]] / x.len() as f64;
                    let ga = (x - &**target) * c;
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(out)
    }
}

/// Affine layer `x W + b`.
pub fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
    let wv = g.param(store, w);
    let y = g.matmul(x, wv);
    match b {
        Some(b) => {
            let bv = g.param(store, b);
            g.add_row(y, bv)
        }
        None => y,
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) {
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in store
            .values
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / b1c) / ((*v / b2c).sqrt() + eps);
            });
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &[Array2<f64>]) -> f64 {
    grads.iter().map(|g| g.iter().map(|e| e * e).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grads(grads: &mut [Array2<f64>], max_norm: f64) {
    let n = grad_norm(grads);
    if n > max_norm {
        let c = max_norm / n;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|e| e * c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bilinear_hand_value() {
        let mut r = Raster::new(2, 2, 1);
        r.data = vec![0.0, 1.0, 2.0, 3.0];
        assert!((r.sample(0.25, 0.75)[0] - 1.75).abs() < 1e-12);
        assert_eq!(r.sample(-5.0, 0.0)[0], 0.0);
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let mask = Arc::new(array![[true, true], [false, false]]);
        let y = g.masked_softmax(x, mask);
        let v = g.value(y);
        assert!((v[[0, 0]] + v[[0, 1]] - 1.0).abs() < 1e-12);
        assert_eq!(v.row(1).sum(), 0.0);
    }

    #[test]
    fn matmul_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.0, 2.0], [3.0, 4.0]]);
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, -1.0]]);
        let wv = g.param(&store, w);
        let y = g.matmul(x, wv);
        let loss = g.mse(y, Arc::new(array![[0.0, 0.0]]));
        let grads = g.backward(loss, &store).unwrap();
        // y = [-2, -2], dL/dy = y, dL/dW = x^T y
        assert_eq!(grads[0], array![[-2.0, -2.0], [2.0, 2.0]]);
    }
}
