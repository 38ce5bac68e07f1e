use alloc::vec;
use alloc::vec::Vec;

use super::gemm::gemm;
use super::tensor::{check_finite, Tensor};
use crate::error::{domain_err, shape_err};
use crate::Result;

/// Handle to a node of a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinds of recorded operations. Every kind has a hand-written backward rule.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Linear,
    Conv2d,
    Add,
    Sub,
    Mul,
    Scale,
    Concat,
    SliceCols,
    Reshape,
    Relu,
    Tanh,
    Clamp,
    L1Loss,
    Mean,
    Gather2x2,
    CellOffsets,
    AreaWeights,
    TemporalSlots,
    TemporalWeights,
    WeightedSum,
    Correlate,
    PixelNormalize,
    SoftmaxXent,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Clamp { x: Var, lo: Vec<f32>, hi: Vec<f32> },
    L1Loss(Var, Var),
    Mean(Var),
    Gather2x2 { vol: Var, rows: Vec<[u32; 4]> },
    CellOffsets { coords: Var, live: [bool; 2] },
    AreaWeights { coords: Var, frac: Vec<[f32; 2]>, live: [bool; 2] },
    TemporalSlots { colors: Var, tau: Var, frames: Vec<u32>, slots: usize },
    TemporalWeights { tau: Var, dense: bool, frames: usize },
    WeightedSum { x: Var, w: Var },
    Correlate { search: Var, template: Var },
    PixelNormalize { x: Var, inv_norm: Vec<f32> },
    SoftmaxXent { logits: Var, target: usize, probs: Vec<f32> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Concat(..) => OpKind::Concat,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::L1Loss(..) => OpKind::L1Loss,
            Op::Mean(..) => OpKind::Mean,
            Op::Gather2x2 { .. } => OpKind::Gather2x2,
            Op::CellOffsets { .. } => OpKind::CellOffsets,
            Op::AreaWeights { .. } => OpKind::AreaWeights,
            Op::TemporalSlots { .. } => OpKind::TemporalSlots,
            Op::TemporalWeights { .. } => OpKind::TemporalWeights,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::Correlate { .. } => OpKind::Correlate,
            Op::PixelNormalize { .. } => OpKind::PixelNormalize,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A computation graph recorded in topological order.
///
/// Nodes are appended as operations are applied, so every node's inputs
/// precede it and the graph is acyclic by construction. Values are computed
/// eagerly; [`Graph::backward`] walks the recorded nodes in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Neighbor cell of a continuous coordinate along one axis of length `n`.
/// Returns the lower site and the fractional offset from it in `[0, 1]`.
pub(crate) fn cell_along(v: f32, n: usize) -> (usize, f32) {
    if n < 2 {
        return (0, 0.0);
    }
    let lo = (libm::floorf(v).max(0.0) as usize).min(n - 2);
    (lo, v - lo as f32)
}

/// Lower frame of the two bracketing `tau` (relative frame units), and the
/// fractional position between them.
pub(crate) fn frame_pair(tau: f32, frames: usize) -> (usize, f32) {
    cell_along(tau, frames)
}

fn triangle(tau: f32, f: usize) -> f32 {
    (1.0 - (tau - f as f32).abs()).max(0.0)
}

fn triangle_grad(tau: f32, f: usize) -> f32 {
    let d = tau - f as f32;
    if (0.0..1.0).contains(&d) {
        -1.0
    } else if (-1.0..0.0).contains(&d) {
        1.0
    } else {
        0.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf. The tensor is already known finite.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        check_finite(value.data(), op_name(op.kind()))?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err!("elementwise shapes differ: {:?} vs {:?}", sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err!("matmul inner dims {} vs {}", k, k2));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(x)?;
        let (k2, n) = self.dims2(w)?;
        if k != k2 || self.value(b).shape() != [n] {
            return Err(shape_err!(
                "linear: x {:?}, w {:?}, b {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            ));
        }
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, true);
        let ng = self.ng(&[x, w, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Linear { x, w, b }, ng)
    }

    /// 3x3, stride 1, zero same-padding convolution over an `H x W x Ci`
    /// input. Weights are `[9 * Ci, Co]`, row index `(ky * 3 + kx) * Ci + ci`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, ci) = self.value(x).dims3()?;
        let (kr, co) = self.dims2(w)?;
        if kr != 9 * ci || self.value(b).shape() != [co] {
            return Err(shape_err!(
                "conv2d: x {:?}, w {:?}, b {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            ));
        }
        let cols = im2col(self.value(x).data(), h, wd, ci);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(h * wd * co);
        for _ in 0..h * wd {
            out.extend_from_slice(bias);
        }
        gemm(h * wd, 9 * ci, co, &cols, false, self.value(w).data(), false, &mut out, true);
        let ng = self.ng(&[x, w, b]);
        self.push(Tensor::from_parts(vec![h, wd, co], out), Op::Conv2d { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat of nothing"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.dims2(p)?);
        }
        let m = dims[0].0;
        if dims.iter().any(|d| d.0 != m) {
            return Err(shape_err!("concat row counts differ: {:?}", dims));
        }
        let n: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let ng = self.ng(parts);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > n {
            return Err(shape_err!("slice {}..{} of {} columns", start, end, n));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&d[r * n + start..r * n + end]);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![m, end - start], out), Op::SliceCols { x, start }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(&[x]);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(libm::tanhf);
        let ng = self.ng(&[x]);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Clamps each column of the last axis to `[lo[j], hi[j]]`. A bound of
    /// length one applies to every column.
    pub fn clamp(&mut self, x: Var, lo: &[f32], hi: &[f32]) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().unwrap_or(&1);
        let ok = |b: &[f32]| b.len() == 1 || b.len() == n;
        if !ok(lo) || !ok(hi) {
            return Err(shape_err!("clamp bounds {} / {} for {} columns", lo.len(), hi.len(), n));
        }
        let data: Vec<f32> = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % n;
                v.clamp(lo[j % lo.len()], hi[j % hi.len()])
            })
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let ng = self.ng(&[x]);
        self.push(out, Op::Clamp { x, lo: lo.to_vec(), hi: hi.to_vec() }, ng)
    }

    /// Mean absolute difference, a scalar.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let s: f64 = da.iter().zip(db).map(|(x, y)| (x - y).abs() as f64).sum();
        let out = Tensor::scalar((s / da.len().max(1) as f64) as f32);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::L1Loss(a, b), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        let s: f64 = d.iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar((s / d.len().max(1) as f64) as f32);
        let ng = self.ng(&[x]);
        self.push(out, Op::Mean(x), ng)
    }

    /// Fetches the 2x2 neighborhood of latent rows around each continuous
    /// coordinate. `vol` is `[h * w, D]` (row-major sites); `coords` is
    /// `[P, 2]` holding `(x, y)` with `x` the row. Output is `[4P, D]` with
    /// slot order `(x0,y0), (x0,y1), (x1,y0), (x1,y1)`. No gradient flows to
    /// the coordinates through the selection.
    pub fn gather_2x2(&mut self, vol: Var, coords: Var, h: usize, w: usize) -> Result<Var> {
        let (sites, d) = self.dims2(vol)?;
        let (p, two) = self.dims2(coords)?;
        if sites != h * w || two != 2 {
            return Err(shape_err!("gather_2x2: vol {:?}, coords {:?}, grid {}x{}", (sites, d), (p, two), h, w));
        }
        let c = self.value(coords).data();
        check_coords(c, h, w)?;
        let mut rows = Vec::with_capacity(p);
        for q in 0..p {
            let (x0, _) = cell_along(c[2 * q], h);
            let (y0, _) = cell_along(c[2 * q + 1], w);
            let x1 = (x0 + 1).min(h - 1);
            let y1 = (y0 + 1).min(w - 1);
            rows.push([
                (x0 * w + y0) as u32,
                (x0 * w + y1) as u32,
                (x1 * w + y0) as u32,
                (x1 * w + y1) as u32,
            ]);
        }
        let v = self.value(vol).data();
        let mut out = Vec::with_capacity(4 * p * d);
        for r in &rows {
            for &s in r {
                let s = s as usize;
                out.extend_from_slice(&v[s * d..(s + 1) * d]);
            }
        }
        let ng = self.ng(&[vol]);
        self.push(Tensor::from_parts(vec![4 * p, d], out), Op::Gather2x2 { vol, rows }, ng)
    }

    /// Signed offsets `(x - x_q, y - y_q)` from each coordinate to its four
    /// neighbor sites, in the slot order of [`Graph::gather_2x2`]. `[4P, 2]`.
    pub fn cell_offsets(&mut self, coords: Var, h: usize, w: usize) -> Result<Var> {
        let (p, two) = self.dims2(coords)?;
        if two != 2 {
            return Err(shape_err!("cell_offsets expects [P, 2], got {:?}", (p, two)));
        }
        let c = self.value(coords).data();
        check_coords(c, h, w)?;
        let mut out = Vec::with_capacity(8 * p);
        for q in 0..p {
            let (_, fx) = cell_along(c[2 * q], h);
            let (_, fy) = cell_along(c[2 * q + 1], w);
            let gx = if h < 2 { 0.0 } else { fx - 1.0 };
            let gy = if w < 2 { 0.0 } else { fy - 1.0 };
            out.extend_from_slice(&[fx, fy, fx, gy, gx, fy, gx, gy]);
        }
        let ng = self.ng(&[coords]);
        self.push(
            Tensor::from_parts(vec![4 * p, 2], out),
            Op::CellOffsets { coords, live: [h >= 2, w >= 2] },
            ng,
        )
    }

    /// Local-ensemble weights: each neighbor site gets the area of the
    /// rectangle between the coordinate and the diagonally opposite site.
    /// `[P, 4]`, rows sum to one.
    pub fn area_weights(&mut self, coords: Var, h: usize, w: usize) -> Result<Var> {
        let (p, two) = self.dims2(coords)?;
        if two != 2 {
            return Err(shape_err!("area_weights expects [P, 2], got {:?}", (p, two)));
        }
        let c = self.value(coords).data();
        check_coords(c, h, w)?;
        let mut frac = Vec::with_capacity(p);
        let mut out = Vec::with_capacity(4 * p);
        for q in 0..p {
            let (_, fx) = cell_along(c[2 * q], h);
            let (_, fy) = cell_along(c[2 * q + 1], w);
            frac.push([fx, fy]);
            out.extend_from_slice(&bilinear4(fx, fy));
        }
        let ng = self.ng(&[coords]);
        self.push(
            Tensor::from_parts(vec![p, 4], out),
            Op::AreaWeights { coords, frac, live: [h >= 2, w >= 2] },
            ng,
        )
    }

    /// Inputs of the temporal stage. `colors` is `[P, 3F]` (per-frame RGB),
    /// `tau` is `[P, 1]` in relative frame units `[0, F-1]`. Each output row is
    /// `[rgb of frame f, tau - f]`. In dense mode every frame gets a row
    /// (`[P*F, 4]`); otherwise only the two frames bracketing `tau`
    /// (`[P*2, 4]`, or `[P, 4]` when `F == 1`).
    pub fn temporal_slots(&mut self, colors: Var, tau: Var, dense: bool) -> Result<Var> {
        let (p, c3) = self.dims2(colors)?;
        let (p2, one) = self.dims2(tau)?;
        if c3 % 3 != 0 || c3 == 0 || p != p2 || one != 1 {
            return Err(shape_err!("temporal_slots: colors {:?}, tau {:?}", (p, c3), (p2, one)));
        }
        let nf = c3 / 3;
        let t = self.value(tau).data();
        check_tau(t, nf)?;
        let slots = if dense { nf } else { nf.min(2) };
        let col = self.value(colors).data();
        let mut frames = Vec::with_capacity(p * slots);
        let mut out = Vec::with_capacity(p * slots * 4);
        for q in 0..p {
            let f0 = if dense { 0 } else { frame_pair(t[q], nf).0 };
            for s in 0..slots {
                let f = f0 + s;
                frames.push(f as u32);
                out.extend_from_slice(&col[q * c3 + 3 * f..q * c3 + 3 * f + 3]);
                out.push(t[q] - f as f32);
            }
        }
        let ng = self.ng(&[colors, tau]);
        self.push(
            Tensor::from_parts(vec![p * slots, 4], out),
            Op::TemporalSlots { colors, tau, frames, slots },
            ng,
        )
    }

    /// Triangle temporal weights `max(0, 1 - |tau - f|)` matching the rows of
    /// [`Graph::temporal_slots`]. `frames` is `F`.
    pub fn temporal_weights(&mut self, tau: Var, frames: usize, dense: bool) -> Result<Var> {
        let (p, one) = self.dims2(tau)?;
        if one != 1 || frames == 0 {
            return Err(shape_err!("temporal_weights: tau {:?}, frames {}", (p, one), frames));
        }
        let t = self.value(tau).data();
        check_tau(t, frames)?;
        let slots = if dense { frames } else { frames.min(2) };
        let mut out = Vec::with_capacity(p * slots);
        for &tq in t {
            if dense {
                out.extend((0..frames).map(|f| triangle(tq, f)));
            } else if frames == 1 {
                out.push(1.0);
            } else {
                let (_, ft) = frame_pair(tq, frames);
                out.extend_from_slice(&[1.0 - ft, ft]);
            }
        }
        let ng = self.ng(&[tau]);
        self.push(
            Tensor::from_parts(vec![p, slots], out),
            Op::TemporalWeights { tau, dense, frames },
            ng,
        )
    }

    /// `out[p] = sum_s w[p, s] * x[p * S + s]` for `x: [P*S, D]`, `w: [P, S]`.
    pub fn weighted_sum(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ps, d) = self.dims2(x)?;
        let (p, s) = self.dims2(w)?;
        if p * s != ps {
            return Err(shape_err!("weighted_sum: x {:?}, w {:?}", (ps, d), (p, s)));
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; p * d];
        for q in 0..p {
            let o = &mut out[q * d..(q + 1) * d];
            for k in 0..s {
                let wk = wv[q * s + k];
                let row = &xv[(q * s + k) * d..(q * s + k + 1) * d];
                for (oi, &xi) in o.iter_mut().zip(row) {
                    *oi += wk * xi;
                }
            }
        }
        let ng = self.ng(&[x, w]);
        self.push(Tensor::from_parts(vec![p, d], out), Op::WeightedSum { x, w }, ng)
    }

    /// Channel-summed valid cross-correlation of `template [Ht, Wt, F]` over
    /// `search [Hs, Ws, F]`, divided by `Ht * Wt`. Output `[Hs-Ht+1, Ws-Wt+1]`.
    pub fn correlate(&mut self, search: Var, template: Var) -> Result<Var> {
        let (hs, ws, f) = self.value(search).dims3()?;
        let (ht, wt, f2) = self.value(template).dims3()?;
        if f != f2 || ht > hs || wt > ws || ht == 0 || wt == 0 {
            return Err(shape_err!("correlate: search {:?}, template {:?}", (hs, ws, f), (ht, wt, f2)));
        }
        let (hr, wr) = (hs - ht + 1, ws - wt + 1);
        let (s, t) = (self.value(search).data(), self.value(template).data());
        let seg = wt * f;
        let norm = 1.0 / (ht * wt) as f32;
        let mut out = vec![0.0; hr * wr];
        for dy in 0..hr {
            for dx in 0..wr {
                let mut acc = 0.0f32;
                for i in 0..ht {
                    let so = ((dy + i) * ws + dx) * f;
                    acc += dot(&t[i * seg..(i + 1) * seg], &s[so..so + seg]);
                }
                out[dy * wr + dx] = acc * norm;
            }
        }
        let ng = self.ng(&[search, template]);
        self.push(Tensor::from_parts(vec![hr, wr], out), Op::Correlate { search, template }, ng)
    }

    /// Per-row mean removal and L2 normalization of `x: [.., C]` (last axis).
    pub fn pixel_normalize(&mut self, x: Var, eps: f32) -> Result<Var> {
        let t = self.value(x);
        let c = *t.shape().last().ok_or_else(|| shape_err!("pixel_normalize on scalar"))?;
        let rows = t.len() / c.max(1);
        let d = t.data();
        let mut out = Vec::with_capacity(t.len());
        let mut inv_norm = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f32>() / c as f32;
            let ss: f32 = row.iter().map(|v| (v - mu) * (v - mu)).sum();
            let inv = 1.0 / libm::sqrtf(ss + eps);
            inv_norm.push(inv);
            out.extend(row.iter().map(|v| (v - mu) * inv));
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.ng(&[x]);
        self.push(out, Op::PixelNormalize { x, inv_norm }, ng)
    }

    /// Softmax cross-entropy of all elements of `logits` against the flat
    /// index `target`. Scalar output.
    pub fn softmax_xent(&mut self, logits: Var, target: usize) -> Result<Var> {
        let d = self.value(logits).data();
        if target >= d.len() {
            return Err(domain_err!("target {} outside {} logits", target, d.len()));
        }
        let mx = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let z: f64 = d.iter().map(|&v| libm::exp((v - mx) as f64)).sum();
        let probs: Vec<f32> = d.iter().map(|&v| (libm::exp((v - mx) as f64) / z) as f32).collect();
        let loss = (libm::log(z) + mx as f64 - d[target] as f64) as f32;
        let ng = self.ng(&[logits]);
        self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, target, probs }, ng)
    }

    /// Reverse pass from a scalar node. Returns gradients for every leaf
    /// that requires them and is reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.needs_grad => Some(Tensor::from_parts(n.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if self.nodes[v.0].needs_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a)?;
                let n = self.dims2(b)?.1;
                acc(a, &mut |da| gemm(m, n, k, g, false, self.value(b).data(), true, da, true));
                acc(b, &mut |db| gemm(k, m, n, self.value(a).data(), true, g, false, db, true));
            }
            &Op::Linear { x, w, b } => {
                let (m, k) = self.dims2(x)?;
                let n = self.dims2(w)?.1;
                acc(x, &mut |dx| gemm(m, n, k, g, false, self.value(w).data(), true, dx, true));
                acc(w, &mut |dw| gemm(k, m, n, self.value(x).data(), true, g, false, dw, true));
                acc(b, &mut |db| col_sums(g, n, db));
            }
            &Op::Conv2d { x, w, b } => {
                let (h, wd, ci) = self.value(x).dims3()?;
                let co = self.dims2(w)?.1;
                acc(w, &mut |dw| {
                    let cols = im2col(self.value(x).data(), h, wd, ci);
                    gemm(9 * ci, h * wd, co, &cols, true, g, false, dw, true);
                });
                acc(x, &mut |dx| {
                    let mut dcols = vec![0.0; h * wd * 9 * ci];
                    gemm(h * wd, co, 9 * ci, g, false, self.value(w).data(), true, &mut dcols, false);
                    col2im(&dcols, h, wd, ci, dx);
                });
                acc(b, &mut |db| col_sums(g, co, db));
            }
            &Op::Add(a, b) => {
                acc(a, &mut |da| axpy(1.0, g, da));
                acc(b, &mut |db| axpy(1.0, g, db));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |da| axpy(1.0, g, da));
                acc(b, &mut |db| axpy(-1.0, g, db));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |da| da.iter_mut().zip(g).zip(bv).for_each(|((d, gi), y)| *d += gi * y));
                acc(b, &mut |db| db.iter_mut().zip(g).zip(av).for_each(|((d, gi), x)| *d += gi * x));
            }
            &Op::Scale(a, s) => acc(a, &mut |da| axpy(s, g, da)),
            Op::Concat(parts) => {
                let (m, n) = node.value.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let c = self.dims2(p)?.1;
                    acc(p, &mut |dp| {
                        for r in 0..m {
                            axpy(1.0, &g[r * n + off..r * n + off + c], &mut dp[r * c..(r + 1) * c]);
                        }
                    });
                    off += c;
                }
            }
            &Op::SliceCols { x, start } => {
                let (m, c) = node.value.dims2()?;
                let n = self.dims2(x)?.1;
                acc(x, &mut |dx| {
                    for r in 0..m {
                        axpy(1.0, &g[r * c..(r + 1) * c], &mut dx[r * n + start..r * n + start + c]);
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &mut |dx| axpy(1.0, g, dx)),
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                acc(x, &mut |dx| {
                    dx.iter_mut().zip(g).zip(xv).for_each(|((d, gi), v)| {
                        if *v > 0.0 {
                            *d += gi
                        }
                    })
                });
            }
            &Op::Tanh(x) => {
                let y = node.value.data();
                acc(x, &mut |dx| dx.iter_mut().zip(g).zip(y).for_each(|((d, gi), yi)| *d += gi * (1.0 - yi * yi)));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let n = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &mut |dx| {
                    for (i, ((d, gi), v)) in dx.iter_mut().zip(g).zip(xv).enumerate() {
                        let j = i % n;
                        if *v >= lo[j % lo.len()] && *v <= hi[j % hi.len()] {
                            *d += gi;
                        }
                    }
                });
            }
            &Op::L1Loss(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let s = g[0] / av.len().max(1) as f32;
                let sign = |x: f32, y: f32| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(a, &mut |da| da.iter_mut().zip(av).zip(bv).for_each(|((d, x), y)| *d += s * sign(*x, *y)));
                acc(b, &mut |db| db.iter_mut().zip(av).zip(bv).for_each(|((d, x), y)| *d -= s * sign(*x, *y)));
            }
            &Op::Mean(x) => {
                let n = self.value(x).len().max(1) as f32;
                acc(x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Gather2x2 { vol, rows } => {
                let d = self.dims2(*vol)?.1;
                acc(*vol, &mut |dv| {
                    for (q, r) in rows.iter().enumerate() {
                        for (s, &site) in r.iter().enumerate() {
                            let site = site as usize;
                            let src = &g[(4 * q + s) * d..(4 * q + s + 1) * d];
                            axpy(1.0, src, &mut dv[site * d..(site + 1) * d]);
                        }
                    }
                });
            }
            &Op::CellOffsets { coords, live } => {
                acc(coords, &mut |dc| {
                    for q in 0..dc.len() / 2 {
                        for s in 0..4 {
                            if live[0] {
                                dc[2 * q] += g[(4 * q + s) * 2];
                            }
                            if live[1] {
                                dc[2 * q + 1] += g[(4 * q + s) * 2 + 1];
                            }
                        }
                    }
                });
            }
            Op::AreaWeights { coords, frac, live } => {
                acc(*coords, &mut |dc| {
                    for (q, &[fx, fy]) in frac.iter().enumerate() {
                        let gq = &g[4 * q..4 * q + 4];
                        let dfx = -(1.0 - fy) * gq[0] - fy * gq[1] + (1.0 - fy) * gq[2] + fy * gq[3];
                        let dfy = -(1.0 - fx) * gq[0] + (1.0 - fx) * gq[1] - fx * gq[2] + fx * gq[3];
                        if live[0] {
                            dc[2 * q] += dfx;
                        }
                        if live[1] {
                            dc[2 * q + 1] += dfy;
                        }
                    }
                });
            }
            Op::TemporalSlots { colors, tau, frames, slots } => {
                let c3 = self.dims2(*colors)?.1;
                acc(*colors, &mut |dcol| {
                    for (r, &f) in frames.iter().enumerate() {
                        let q = r / slots;
                        let f = f as usize;
                        axpy(1.0, &g[4 * r..4 * r + 3], &mut dcol[q * c3 + 3 * f..q * c3 + 3 * f + 3]);
                    }
                });
                acc(*tau, &mut |dt| {
                    for r in 0..frames.len() {
                        dt[r / slots] += g[4 * r + 3];
                    }
                });
            }
            &Op::TemporalWeights { tau, dense, frames } => {
                let t = self.value(tau).data();
                acc(tau, &mut |dt| {
                    for (q, &tq) in t.iter().enumerate() {
                        if dense {
                            for f in 0..frames {
                                dt[q] += g[q * frames + f] * triangle_grad(tq, f);
                            }
                        } else if frames > 1 {
                            dt[q] += g[2 * q + 1] - g[2 * q];
                        }
                    }
                });
            }
            &Op::WeightedSum { x, w } => {
                let (p, s) = self.dims2(w)?;
                let d = self.dims2(x)?.1;
                let (xv, wv) = (self.value(x).data(), self.value(w).data());
                acc(x, &mut |dx| {
                    for q in 0..p {
                        for k in 0..s {
                            let r = q * s + k;
                            axpy(wv[r], &g[q * d..(q + 1) * d], &mut dx[r * d..(r + 1) * d]);
                        }
                    }
                });
                acc(w, &mut |dw| {
                    for q in 0..p {
                        for k in 0..s {
                            let r = q * s + k;
                            dw[r] += dot(&xv[r * d..(r + 1) * d], &g[q * d..(q + 1) * d]);
                        }
                    }
                });
            }
            &Op::Correlate { search, template } => {
                let (_, ws, f) = self.value(search).dims3()?;
                let (ht, wt, _) = self.value(template).dims3()?;
                let (hr, wr) = node.value.dims2()?;
                let seg = wt * f;
                let norm = 1.0 / (ht * wt) as f32;
                let (sv, tv) = (self.value(search).data(), self.value(template).data());
                acc(search, &mut |ds| {
                    for dy in 0..hr {
                        for dx in 0..wr {
                            let gd = g[dy * wr + dx] * norm;
                            for i in 0..ht {
                                let so = ((dy + i) * ws + dx) * f;
                                axpy(gd, &tv[i * seg..(i + 1) * seg], &mut ds[so..so + seg]);
                            }
                        }
                    }
                });
                acc(template, &mut |dt| {
                    for dy in 0..hr {
                        for dx in 0..wr {
                            let gd = g[dy * wr + dx] * norm;
                            for i in 0..ht {
                                let so = ((dy + i) * ws + dx) * f;
                                axpy(gd, &sv[so..so + seg], &mut dt[i * seg..(i + 1) * seg]);
                            }
                        }
                    }
                });
            }
            Op::PixelNormalize { x, inv_norm } => {
                let c = *node.value.shape().last().unwrap_or(&1);
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for (r, &inv) in inv_norm.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let yg = dot(yr, gr);
                        let mut du: Vec<f32> = yr.iter().zip(gr).map(|(yi, gi)| (gi - yi * yg) * inv).collect();
                        let mu = du.iter().sum::<f32>() / c as f32;
                        du.iter_mut().for_each(|v| *v -= mu);
                        axpy(1.0, &du, &mut dx[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SoftmaxXent { logits, target, probs } => {
                acc(*logits, &mut |dl| {
                    for (i, (d, p)) in dl.iter_mut().zip(probs).enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        *d += g[0] * (p - onehot);
                    }
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn bilinear4(fx: f32, fy: f32) -> [f32; 4] {
    [(1.0 - fx) * (1.0 - fy), (1.0 - fx) * fy, fx * (1.0 - fy), fx * fy]
}

fn check_coords(c: &[f32], h: usize, w: usize) -> Result<()> {
    let hx = h.saturating_sub(1) as f32;
    let wy = w.saturating_sub(1) as f32;
    for pair in c.chunks_exact(2) {
        if !(0.0..=hx).contains(&pair[0]) || !(0.0..=wy).contains(&pair[1]) {
            return Err(domain_err!("coordinate ({}, {}) outside [0, {}] x [0, {}]", pair[0], pair[1], hx, wy));
        }
    }
    Ok(())
}

fn check_tau(t: &[f32], frames: usize) -> Result<()> {
    let hi = frames.saturating_sub(1) as f32;
    if let Some(v) = t.iter().find(|v| !(0.0..=hi).contains(*v)) {
        return Err(domain_err!("temporal coordinate {} outside [0, {}]", v, hi));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent partial sums let the loop vectorize.
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn col_sums(g: &[f32], n: usize, out: &mut [f32]) {
    for row in g.chunks_exact(n) {
        axpy(1.0, row, out);
    }
}

fn im2col(x: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let k = 9 * c;
    let mut cols = vec![0.0; h * w * k];
    for r in 0..h {
        for q in 0..w {
            let base = (r * w + q) * k;
            for ky in 0..3 {
                let sr = r as isize + ky as isize - 1;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sc = q as isize + kx as isize - 1;
                    if sc < 0 || sc >= w as isize {
                        continue;
                    }
                    let src = (sr as usize * w + sc as usize) * c;
                    let dst = base + (ky * 3 + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], h: usize, w: usize, c: usize, dx: &mut [f32]) {
    let k = 9 * c;
    for r in 0..h {
        for q in 0..w {
            let base = (r * w + q) * k;
            for ky in 0..3 {
                let sr = r as isize + ky as isize - 1;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sc = q as isize + kx as isize - 1;
                    if sc < 0 || sc >= w as isize {
                        continue;
                    }
                    let dst = (sr as usize * w + sc as usize) * c;
                    let src = base + (ky * 3 + kx) * c;
                    axpy(1.0, &cols[src..src + c], &mut dx[dst..dst + c]);
                }
            }
        }
    }
}

fn op_name(k: OpKind) -> &'static str {
    match k {
        OpKind::Leaf => "leaf",
        OpKind::MatMul => "matmul",
        OpKind::Linear => "linear",
        OpKind::Conv2d => "conv2d",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Scale => "scale",
        OpKind::Concat => "concat",
        OpKind::SliceCols => "slice_cols",
        OpKind::Reshape => "reshape",
        OpKind::Relu => "relu",
        OpKind::Tanh => "tanh",
        OpKind::Clamp => "clamp",
        OpKind::L1Loss => "l1_loss",
        OpKind::Mean => "mean",
        OpKind::Gather2x2 => "gather_2x2",
        OpKind::CellOffsets => "cell_offsets",
        OpKind::AreaWeights => "area_weights",
        OpKind::TemporalSlots => "temporal_slots",
        OpKind::TemporalWeights => "temporal_weights",
        OpKind::WeightedSum => "weighted_sum",
        OpKind::Correlate => "correlate",
        OpKind::PixelNormalize => "pixel_normalize",
        OpKind::SoftmaxXent => "softmax_xent",
    }
}
