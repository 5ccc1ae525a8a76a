//! Operation recording and reverse-mode accumulation.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use rand::Rng;

use super::gemm::gemm;
use super::ops::{self, ConvGeom, LayerNormStats, Mode, PROB_FLOOR};
use super::{resolve_axis, strides, Tensor};
use crate::error::{dim_err, Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Environment toggle that forces per-op finiteness checks in release builds.
pub const CHECK_FINITE_ENV: &str = "VIDSWIN_CHECK_FINITE";

fn check_finite_enabled() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        cfg!(debug_assertions)
            || std::env::var(CHECK_FINITE_ENV).map(|v| v != "0" && !v.is_empty()).unwrap_or(false)
    })
}

/// Handle of a recorded node: owning tape serial plus position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    MatMul { a: Tensor, b: Tensor },
    Add,
    Sub,
    Mul { a: Tensor, b: Tensor },
    Scale(f64),
    AddBroadcast { b_len: usize, bstrides: Vec<usize> },
    Relu { x: Tensor },
    Gelu { x: Tensor },
    Permute { perm: Vec<usize> },
    Reshape,
    Roll { shifts: Vec<isize> },
    PadTo { in_shape: Vec<usize> },
    CropTo { in_shape: Vec<usize> },
    Gather { indices: Vec<usize>, rows: usize },
    Im2Col { geom: ConvGeom },
    Sum,
    MeanAxis { axis: usize, in_shape: Vec<usize> },
    Softmax { y: Tensor, axis: usize },
    LayerNorm { stats: LayerNormStats, gamma: Tensor },
    MaxPool1d { arg: Vec<usize>, t: usize },
    Dropout { mask: Vec<f64> },
    Nll { probs: Tensor, label: usize },
}

struct Node {
    op: Op,
    inputs: [Option<usize>; 3],
    shape: Vec<usize>,
}

/// Records operations for one forward pass; [`Tape::backward`] consumes it.
///
/// A detached tape runs the same kernels without recording, for inference.
pub struct Tape {
    serial: u64,
    nodes: Vec<Node>,
    recording: bool,
    sabotage: bool,
    matmul_flops: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            serial: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
            sabotage: false,
            matmul_flops: 0,
        }
    }

    /// A tape that records nothing; every result is untracked.
    pub fn detached() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    /// Debug negative control: backward returns deliberately wrong gradients.
    pub fn sabotaged(mut self) -> Self {
        self.sabotage = true;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total `2·m·n·k` of every matmul executed through this tape.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    fn tracked(&self, t: &Tensor) -> Option<usize> {
        t.tape_id().filter(|id| id.tape == self.serial).map(|id| id.index)
    }

    /// Registers `t` as a differentiable leaf and returns the tracked handle.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detach();
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: [None; 3],
            shape: t.shape().to_vec(),
        });
        t.detach().with_tape_id(Some(NodeId {
            tape: self.serial,
            index,
        }))
    }

    fn record(&mut self, name: &'static str, out: Tensor, inputs: &[&Tensor], op: impl FnOnce() -> Op) -> Result<Tensor> {
        if check_finite_enabled() && !out.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        if !self.recording {
            return Ok(out);
        }
        let mut ids = [None; 3];
        for (slot, t) in ids.iter_mut().zip(inputs) {
            *slot = self.tracked(t);
        }
        if ids.iter().all(Option::is_none) {
            return Ok(out);
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: op(),
            inputs: ids,
            shape: out.shape().to_vec(),
        });
        Ok(out.with_tape_id(Some(NodeId {
            tape: self.serial,
            index,
        })))
    }

    // -- arithmetic -------------------------------------------------------

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::matmul(a, b)?;
        let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let n = b.shape()[b.rank() - 1];
        let batches = (out.len() / (m * n)) as u64;
        self.matmul_flops += 2 * batches * (m * k * n) as u64;
        self.record("matmul", out, &[a, b], || Op::MatMul {
            a: a.detach(),
            b: b.detach(),
        })
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::add(a, b)?;
        self.record("add", out, &[a, b], || Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::sub(a, b)?;
        self.record("sub", out, &[a, b], || Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::mul(a, b)?;
        self.record("mul", out, &[a, b], || Op::Mul {
            a: a.detach(),
            b: b.detach(),
        })
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out = ops::scale(a, c);
        self.record("scale", out, &[a], || Op::Scale(c))
    }

    /// `a + b` with `b` broadcast into `a`'s shape.
    pub fn add_broadcast(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::add_broadcast(a, b)?;
        self.record("add_broadcast", out, &[a, b], || Op::AddBroadcast {
            b_len: b.len(),
            bstrides: ops::broadcast_strides(a.shape(), b.shape()).expect("checked by kernel"),
        })
    }

    /// `x · w + bias` over the last axis.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_broadcast(&y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = ops::relu(x);
        self.record("relu", out, &[x], || Op::Relu { x: x.detach() })
    }

    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = ops::gelu(x);
        self.record("gelu", out, &[x], || Op::Gelu { x: x.detach() })
    }

    // -- layout -----------------------------------------------------------

    pub fn permute(&mut self, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
        let out = ops::permute(x, perm)?;
        self.record("permute", out, &[x], || Op::Permute { perm: perm.to_vec() })
    }

    pub fn transpose_last2(&mut self, x: &Tensor) -> Result<Tensor> {
        let r = x.rank();
        if r < 2 {
            return dim_err(format!("transpose needs rank >= 2, got {:?}", x.shape()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let out = x.reshape(shape)?;
        self.record("reshape", out, &[x], || Op::Reshape)
    }

    pub fn roll(&mut self, x: &Tensor, shifts: &[isize]) -> Result<Tensor> {
        let out = ops::roll(x, shifts)?;
        self.record("roll", out, &[x], || Op::Roll { shifts: shifts.to_vec() })
    }

    pub fn pad_to(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let out = ops::pad_to(x, shape)?;
        self.record("pad_to", out, &[x], || Op::PadTo {
            in_shape: x.shape().to_vec(),
        })
    }

    pub fn crop_to(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let out = ops::crop_to(x, shape)?;
        self.record("crop_to", out, &[x], || Op::CropTo {
            in_shape: x.shape().to_vec(),
        })
    }

    pub fn gather_rows(&mut self, table: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let out = ops::gather_rows(table, indices)?;
        self.record("gather_rows", out, &[table], || Op::Gather {
            indices: indices.to_vec(),
            rows: table.shape()[0],
        })
    }

    pub fn im2col(&mut self, x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
        let (out, geom) = ops::im2col(x, kernel, stride)?;
        self.record("im2col", out, &[x], || Op::Im2Col { geom })
    }

    // -- reductions and nonlinearities -----------------------------------

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = ops::sum_all(x);
        self.record("sum", out, &[x], || Op::Sum)
    }

    pub fn mean_axis(&mut self, x: &Tensor, axis: isize) -> Result<Tensor> {
        let out = ops::mean_axis(x, axis)?;
        let ax = resolve_axis(axis, x.rank())?;
        self.record("mean_axis", out, &[x], || Op::MeanAxis {
            axis: ax,
            in_shape: x.shape().to_vec(),
        })
    }

    pub fn softmax(&mut self, x: &Tensor, axis: isize) -> Result<Tensor> {
        let out = ops::softmax(x, axis)?;
        let ax = resolve_axis(axis, x.rank())?;
        let y = out.detach();
        self.record("softmax", out, &[x], || Op::Softmax { y, axis: ax })
    }

    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (out, stats) = ops::layer_norm_with_stats(x, gamma, beta, eps)?;
        self.record("layer_norm", out, &[x, gamma, beta], || Op::LayerNorm {
            stats,
            gamma: gamma.detach(),
        })
    }

    pub fn max_pool_1d(&mut self, x: &Tensor) -> Result<Tensor> {
        let (out, arg) = ops::max_pool_1d(x)?;
        let t = x.shape()[0];
        self.record("max_pool_1d", out, &[x], || Op::MaxPool1d { arg, t })
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: &Tensor, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let (out, mask) = ops::dropout(x, p, mode, rng)?;
        match mask {
            Some(mask) => self.record("dropout", out, &[x], || Op::Dropout { mask }),
            None => self.record("dropout", out, &[x], || Op::Scale(1.0)),
        }
    }

    /// Negative log of the floored probability at `label`.
    pub fn nll(&mut self, probs: &Tensor, label: usize) -> Result<Tensor> {
        let out = ops::nll(probs, label)?;
        self.record("nll", out, &[probs], || Op::Nll {
            probs: probs.detach(),
            label,
        })
    }

    // -- backward ---------------------------------------------------------

    /// Reverse accumulation from a scalar `loss`, which must be the last
    /// node recorded. Untracked inputs are skipped.
    pub fn backward(self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = self
            .tracked(loss)
            .ok_or_else(|| Error::Contract("loss was not recorded on this tape".into()))?;
        if root + 1 != self.nodes.len() {
            return Err(Error::Contract(format!(
                "loss is node {root} but the tape ends at node {}",
                self.nodes.len() - 1
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for (i, node) in self.nodes.iter().enumerate().rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                let g = if self.sabotage {
                    g.iter().map(|v| v * 1.5 + 1e-3).collect()
                } else {
                    g
                };
                leaves.insert(i, g);
                continue;
            }
            let ins = node.inputs;
            let want = |k: usize| ins[k].is_some();
            let mut outs: [Option<Vec<f64>>; 3] = [None, None, None];
            backward_rule(&node.op, &node.shape, &g, &ins.map(|x| x.map(|j| &self.nodes[j])), want, &mut outs);
            for (k, out) in outs.into_iter().enumerate() {
                if let (Some(j), Some(d)) = (ins[k], out) {
                    match &mut grads[j] {
                        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(d),
                    }
                }
            }
        }
        Ok(Gradients {
            serial: self.serial,
            leaves,
        })
    }
}

fn backward_rule(
    op: &Op,
    out_shape: &[usize],
    g: &[f64],
    inputs: &[Option<&Node>; 3],
    want: impl Fn(usize) -> bool,
    outs: &mut [Option<Vec<f64>>; 3],
) {
    let in_len = |k: usize| -> usize { inputs[k].map(|n| n.shape.iter().product()).unwrap_or(0) };
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let plan = ops::matmul_plan(a.shape(), b.shape()).expect("validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let count = plan.pairs.len();
            if want(0) {
                let mut da = vec![0.0; a.len()];
                if plan.fold_lhs {
                    gemm(count * m, n, k, g, false, b.data(), true, &mut da, false);
                } else {
                    for (o, &(ai, bi)) in plan.pairs.iter().enumerate() {
                        gemm(
                            m,
                            n,
                            k,
                            &g[o * m * n..(o + 1) * m * n],
                            false,
                            &b.data()[bi * k * n..(bi + 1) * k * n],
                            true,
                            &mut da[ai * m * k..(ai + 1) * m * k],
                            true,
                        );
                    }
                }
                outs[0] = Some(da);
            }
            if want(1) {
                let mut db = vec![0.0; b.len()];
                if plan.fold_lhs {
                    gemm(k, count * m, n, a.data(), true, g, false, &mut db, false);
                } else {
                    for (o, &(ai, bi)) in plan.pairs.iter().enumerate() {
                        gemm(
                            k,
                            m,
                            n,
                            &a.data()[ai * m * k..(ai + 1) * m * k],
                            true,
                            &g[o * m * n..(o + 1) * m * n],
                            false,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            true,
                        );
                    }
                }
                outs[1] = Some(db);
            }
        }
        Op::Add => {
            if want(0) {
                outs[0] = Some(g.to_vec());
            }
            if want(1) {
                outs[1] = Some(g.to_vec());
            }
        }
        Op::Sub => {
            if want(0) {
                outs[0] = Some(g.to_vec());
            }
            if want(1) {
                outs[1] = Some(g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul { a, b } => {
            if want(0) {
                outs[0] = Some(g.iter().zip(b.data()).map(|(x, y)| x * y).collect());
            }
            if want(1) {
                outs[1] = Some(g.iter().zip(a.data()).map(|(x, y)| x * y).collect());
            }
        }
        Op::Scale(c) => outs[0] = Some(g.iter().map(|v| v * c).collect()),
        Op::AddBroadcast { b_len, bstrides } => {
            if want(0) {
                outs[0] = Some(g.to_vec());
            }
            if want(1) {
                let mut db = vec![0.0; *b_len];
                ops::for_each_broadcast(out_shape, bstrides, |o, bi| db[bi] += g[o]);
                outs[1] = Some(db);
            }
        }
        Op::Relu { x } => {
            outs[0] = Some(
                g.iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )
        }
        Op::Gelu { x } => {
            outs[0] = Some(
                g.iter()
                    .zip(x.data())
                    .map(|(gv, xv)| gv * ops::gelu_grad_scalar(*xv))
                    .collect(),
            )
        }
        Op::Permute { perm } => {
            let in_shape = &inputs[0].expect("permute input").shape;
            let in_str = strides(in_shape);
            let src_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
            let mut dx = vec![0.0; g.len()];
            ops::for_each_broadcast(out_shape, &src_str, |o, si| dx[si] = g[o]);
            outs[0] = Some(dx);
        }
        Op::Reshape => outs[0] = Some(g.to_vec()),
        Op::Roll { shifts } => {
            let gt = Tensor::from_parts(out_shape.to_vec(), g.to_vec());
            let back: Vec<isize> = shifts.iter().map(|s| -s).collect();
            outs[0] = Some(ops::roll(&gt, &back).expect("same shape").to_vec());
        }
        Op::PadTo { in_shape } => {
            let gt = Tensor::from_parts(out_shape.to_vec(), g.to_vec());
            outs[0] = Some(ops::crop_to(&gt, in_shape).expect("same rank").to_vec());
        }
        Op::CropTo { in_shape } => {
            let gt = Tensor::from_parts(out_shape.to_vec(), g.to_vec());
            outs[0] = Some(ops::pad_to(&gt, in_shape).expect("same rank").to_vec());
        }
        Op::Gather { indices, rows } => {
            let cols = out_shape[1];
            let mut dt = vec![0.0; rows * cols];
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..cols {
                    dt[i * cols + c] += g[r * cols + c];
                }
            }
            outs[0] = Some(dt);
        }
        Op::Im2Col { geom } => outs[0] = Some(ops::col2im(g, geom)),
        Op::Sum => outs[0] = Some(vec![g[0]; in_len(0)]),
        Op::MeanAxis { axis, in_shape } => {
            let outer: usize = in_shape[..*axis].iter().product();
            let len = in_shape[*axis];
            let inner: usize = in_shape[axis + 1..].iter().product();
            let inv = 1.0 / len as f64;
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..len {
                    for j in 0..inner {
                        dx[(o * len + i) * inner + j] = g[o * inner + j] * inv;
                    }
                }
            }
            outs[0] = Some(dx);
        }
        Op::Softmax { y, axis } => {
            let shape = y.shape();
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let yd = y.data();
            let mut dx = vec![0.0; yd.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * len + i) * inner + j;
                    let dot: f64 = (0..len).map(|i| g[at(i)] * yd[at(i)]).sum();
                    for i in 0..len {
                        dx[at(i)] = yd[at(i)] * (g[at(i)] - dot);
                    }
                }
            }
            outs[0] = Some(dx);
        }
        Op::LayerNorm { stats, gamma } => {
            let d = gamma.len();
            let rows = g.len() / d;
            let gm = gamma.data();
            if want(0) {
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &stats.xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_xh = 0.0;
                    for i in 0..d {
                        let dh = gr[i] * gm[i];
                        mean_dh += dh;
                        mean_dh_xh += dh * xh[i];
                    }
                    mean_dh /= d as f64;
                    mean_dh_xh /= d as f64;
                    for i in 0..d {
                        let dh = gr[i] * gm[i];
                        dx[r * d + i] = stats.inv_std[r] * (dh - mean_dh - xh[i] * mean_dh_xh);
                    }
                }
                outs[0] = Some(dx);
            }
            if want(1) {
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    for i in 0..d {
                        dg[i] += g[r * d + i] * stats.xhat[r * d + i];
                    }
                }
                outs[1] = Some(dg);
            }
            if want(2) {
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    for i in 0..d {
                        db[i] += g[r * d + i];
                    }
                }
                outs[2] = Some(db);
            }
        }
        Op::MaxPool1d { arg, t } => {
            let d = arg.len();
            let mut dx = vec![0.0; t * d];
            for c in 0..d {
                dx[arg[c] * d + c] = g[c];
            }
            outs[0] = Some(dx);
        }
        Op::Dropout { mask } => outs[0] = Some(g.iter().zip(mask).map(|(a, m)| a * m).collect()),
        Op::Nll { probs, label } => {
            let mut dp = vec![0.0; probs.len()];
            let p = probs.data()[*label];
            if p >= PROB_FLOOR {
                dp[*label] = -g[0] / p;
            }
            outs[0] = Some(dp);
        }
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    serial: u64,
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient for a watched tensor; `None` if it never influenced the loss.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.tape_id().filter(|id| id.tape == self.serial)?;
        self.leaves.get(&id.index).map(Vec::as_slice)
    }

    /// Like [`Gradients::get`] but zero-filled for leaves the loss did not reach.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])
    }

    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        self.get(t).map(|g| Tensor::from_parts(t.shape().to_vec(), g.to_vec()))
    }

    /// Stores the gradient in `t.grad` (zeros when unreached).
    pub fn populate(&self, t: &mut Tensor) {
        let g = self.get_or_zeros(t);
        t.set_grad(Some(g)).expect("gradient length matches its leaf");
    }
}
