//! Pure forward kernels. Nothing here touches a tape.

use rand::Rng;

use super::gemm::gemm;
use super::{resolve_axis, strides, Tensor};
use crate::error::{dim_err, Error, Result};

/// Train mode enables dropout; eval mode makes it the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Additive bias for forbidden attention pairs.
pub const MASK_NEG: f64 = -1e9;

// ---------------------------------------------------------------------------
// matmul

/// Pairing of batch slices for a broadcast matmul.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// (lhs slice, rhs slice) per output slice, in output order.
    pub pairs: Vec<(usize, usize)>,
    /// rhs has no batch extent, so the lhs batch folds into rows.
    pub fold_lhs: bool,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return dim_err(format!("matmul needs rank >= 2, got {a:?} x {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return dim_err(format!("matmul inner extents differ: {a:?} x {b:?}"));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let rank = ab.len().max(bb.len());
    let mut out_batch = vec![0; rank];
    for i in 0..rank {
        let da = if i + ab.len() >= rank { ab[i + ab.len() - rank] } else { 1 };
        let db = if i + bb.len() >= rank { bb[i + bb.len() - rank] } else { 1 };
        if da != db && da != 1 && db != 1 {
            return dim_err(format!("matmul batch extents not broadcastable: {a:?} x {b:?}"));
        }
        out_batch[i] = da.max(db);
    }
    let a_batch: usize = ab.iter().product();
    let b_batch: usize = bb.iter().product();
    let count: usize = out_batch.iter().product();
    let fold_lhs = b_batch == 1 && a_batch == count;

    let pairs = if fold_lhs {
        (0..count).map(|i| (i, 0)).collect()
    } else {
        let a_str = aligned_strides(ab, rank);
        let b_str = aligned_strides(bb, rank);
        let mut pairs = Vec::with_capacity(count);
        let mut idx = vec![0usize; rank];
        for _ in 0..count {
            let ai: usize = idx.iter().zip(&a_str).map(|(i, s)| i * s).sum();
            let bi: usize = idx.iter().zip(&b_str).map(|(i, s)| i * s).sum();
            pairs.push((ai, bi));
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_batch[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        pairs
    };
    let mut out_shape = out_batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs,
        fold_lhs,
    })
}

/// Strides of `shape` right-aligned to `rank`, zero on broadcast (extent 1) axes.
fn aligned_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let own = strides(shape);
    let mut out = vec![0; rank];
    let off = rank - shape.len();
    for i in 0..shape.len() {
        out[off + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    out
}

/// Batched matrix product `[..,M,K] x [..,K,N] -> [..,M,N]` with broadcast batch axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let count = plan.pairs.len();
    let mut out = vec![0.0; count * m * n];
    if plan.fold_lhs {
        gemm(count * m, k, n, a.data(), false, b.data(), false, &mut out, false);
    } else {
        for (o, &(ai, bi)) in plan.pairs.iter().enumerate() {
            gemm(
                m,
                k,
                n,
                &a.data()[ai * m * k..(ai + 1) * m * k],
                false,
                &b.data()[bi * k * n..(bi + 1) * k * n],
                false,
                &mut out[o * m * n..(o + 1) * m * n],
                false,
            );
        }
    }
    Ok(Tensor::from_parts(plan.out_shape, out))
}

// ---------------------------------------------------------------------------
// elementwise

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), d))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), d))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), d))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect())
}

/// Visits every offset of `shape` together with the matching offset of a
/// tensor broadcast into it (strides of zero on broadcast axes).
pub(crate) fn for_each_broadcast(shape: &[usize], bstrides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let inner_stride = bstrides[rank - 1];
    let outer: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    let mut off = 0usize;
    for _ in 0..outer {
        for j in 0..inner {
            f(off + j, base + j * inner_stride);
        }
        off += inner;
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += bstrides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= bstrides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Checks that `b` broadcasts into `a` and returns its aligned strides.
pub(crate) fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if b.len() > a.len() {
        return dim_err(format!("cannot broadcast {b:?} into {a:?}"));
    }
    let off = a.len() - b.len();
    for (i, &d) in b.iter().enumerate() {
        if d != 1 && d != a[off + i] {
            return dim_err(format!("cannot broadcast {b:?} into {a:?}"));
        }
    }
    Ok(aligned_strides(b, a.len()))
}

/// `a + b` where `b` broadcasts into the shape of `a` (extent-1 or missing leading axes).
pub fn add_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let bs = broadcast_strides(a.shape(), b.shape())?;
    let mut out = a.to_vec();
    let bd = b.data();
    if a.shape().ends_with(b.shape()) {
        let w = b.len();
        for (i, x) in out.iter_mut().enumerate() {
            *x += bd[i % w];
        }
    } else {
        for_each_broadcast(a.shape(), &bs, |o, bi| out[o] += bd[bi]);
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| gelu_scalar(v)).collect())
}

// ---------------------------------------------------------------------------
// layout

/// Output shape of a permutation, validating `perm`.
pub(crate) fn permuted_shape(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return dim_err(format!("permutation {perm:?} does not match rank of {shape:?}"));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return dim_err(format!("invalid permutation {perm:?}"));
        }
        seen[p] = true;
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let out_shape = permuted_shape(x.shape(), perm)?;
    let in_str = strides(x.shape());
    let src_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let src = x.data();
    for_each_broadcast(&out_shape, &src_str, |_, si| out.push(src[si]));
    Ok(Tensor::from_parts(out_shape, out))
}

/// Swaps the two trailing axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return dim_err(format!("transpose needs rank >= 2, got {:?}", x.shape()));
    }
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    permute(x, &perm)
}

/// Toroidal roll: `out[(i + shift) mod n] = x[i]` on each axis.
pub fn roll(x: &Tensor, shifts: &[isize]) -> Result<Tensor> {
    if shifts.len() > x.rank() {
        return dim_err(format!("{} shifts for rank {}", shifts.len(), x.rank()));
    }
    let shape = x.shape();
    let st = strides(shape);
    let norm: Vec<usize> = (0..shape.len())
        .map(|ax| {
            let s = shifts.get(ax).copied().unwrap_or(0);
            s.rem_euclid(shape[ax] as isize) as usize
        })
        .collect();
    if norm.iter().all(|&s| s == 0) {
        return Ok(x.detach());
    }
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for &v in src.iter() {
        let mut o = 0;
        for ax in 0..rank {
            let mut j = idx[ax] + norm[ax];
            if j >= shape[ax] {
                j -= shape[ax];
            }
            o += j * st[ax];
        }
        out[o] = v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Copies `x` into the leading corner of a zero tensor of `shape`.
pub fn pad_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.len() != x.rank() || shape.iter().zip(x.shape()).any(|(o, i)| o < i) {
        return dim_err(format!("cannot pad {:?} to {shape:?}", x.shape()));
    }
    let mut out = vec![0.0; shape.iter().product()];
    let out_str = strides(shape);
    let src = x.data();
    let mut k = 0;
    for_each_broadcast(x.shape(), &out_str, |_, o| {
        out[o] = src[k];
        k += 1;
    });
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Leading-corner sub-block of `x` with extents `shape`.
pub fn crop_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.len() != x.rank() || shape.iter().zip(x.shape()).any(|(o, i)| o > i || *o == 0) {
        return dim_err(format!("cannot crop {:?} to {shape:?}", x.shape()));
    }
    let in_str = strides(x.shape());
    let src = x.data();
    let mut out = Vec::with_capacity(shape.iter().product());
    for_each_broadcast(shape, &in_str, |_, i| out.push(src[i]));
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Rows of `table [R,C]` selected by `indices`, giving `[indices.len(), C]`.
pub fn gather_rows(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 || indices.is_empty() {
        return dim_err(format!("gather_rows needs a rank-2 table, got {:?}", table.shape()));
    }
    let (rows, cols) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        if i >= rows {
            return Err(Error::Index(format!("row {i} out of {rows}")));
        }
        out.extend_from_slice(&table.data()[i * cols..(i + 1) * cols]);
    }
    Ok(Tensor::from_parts(vec![indices.len(), cols], out))
}

// ---------------------------------------------------------------------------
// convolution support

/// Geometry of a square-kernel, unpadded 2D convolution on `[B,H,W,C]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w - self.kernel) / self.stride + 1
    }
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c
    }
}

/// Patch extraction: `[B,H,W,C] -> [B,Ho,Wo,k·k·C]`, patch order (kh, kw, c).
pub fn im2col(x: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, ConvGeom)> {
    if x.rank() != 4 {
        return dim_err(format!("im2col expects [B,H,W,C], got {:?}", x.shape()));
    }
    let s = x.shape();
    let g = ConvGeom {
        batch: s[0],
        h: s[1],
        w: s[2],
        c: s[3],
        kernel,
        stride,
    };
    if kernel == 0 || stride == 0 || g.h < kernel || g.w < kernel {
        return dim_err(format!("kernel {kernel} stride {stride} does not fit {s:?}"));
    }
    let (oh, ow, pl) = (g.out_h(), g.out_w(), g.patch_len());
    let src = x.data();
    let mut out = Vec::with_capacity(g.batch * oh * ow * pl);
    for b in 0..g.batch {
        for i in 0..oh {
            for j in 0..ow {
                for di in 0..kernel {
                    let row = ((b * g.h + i * stride + di) * g.w + j * stride) * g.c;
                    out.extend_from_slice(&src[row..row + kernel * g.c]);
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![g.batch, oh, ow, pl], out), g))
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow, pl) = (g.out_h(), g.out_w(), g.patch_len());
    let mut img = vec![0.0; g.batch * g.h * g.w * g.c];
    let run = g.kernel * g.c;
    for b in 0..g.batch {
        for i in 0..oh {
            for j in 0..ow {
                let p = ((b * oh + i) * ow + j) * pl;
                for di in 0..g.kernel {
                    let row = ((b * g.h + i * g.stride + di) * g.w + j * g.stride) * g.c;
                    let src = &cols[p + di * run..p + (di + 1) * run];
                    for (d, s) in img[row..row + run].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// reductions and normalization

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::from_parts(vec![], vec![x.data().iter().sum()])
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Mean along `axis`, removing it.
pub fn mean_axis(x: &Tensor, axis: isize) -> Result<Tensor> {
    let ax = resolve_axis(axis, x.rank())?;
    let (outer, len, inner) = axis_split(x.shape(), ax);
    let src = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..len {
            let row = &src[(o * len + i) * inner..(o * len + i + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *d += s;
            }
        }
    }
    let inv = 1.0 / len as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    let mut shape = x.shape().to_vec();
    shape.remove(ax);
    Ok(Tensor::from_parts(shape, out))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: isize) -> Result<Tensor> {
    let ax = resolve_axis(axis, x.rank())?;
    let (outer, len, inner) = axis_split(x.shape(), ax);
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    if inner == 1 {
        for (row_in, row_out) in src.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
            let m = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - m).exp();
                s += *o;
            }
            let inv = 1.0 / s;
            row_out.iter_mut().for_each(|o| *o *= inv);
        }
    } else {
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let m = (0..len).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in 0..len {
                    let e = (src[at(i)] - m).exp();
                    out[at(i)] = e;
                    s += e;
                }
                for i in 0..len {
                    out[at(i)] /= s;
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Saved statistics of a layer norm, needed for its gradient.
pub(crate) struct LayerNormStats {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormStats)> {
    let d = *x.shape().last().ok_or_else(|| Error::Dimension("layer_norm on a scalar".into()))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return dim_err(format!(
            "layer_norm width {d} but gamma {:?}, beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Parameter(format!("layer_norm eps {eps} must be >= 0")));
    }
    let rows = x.len() / d;
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = if is.is_finite() { is } else { 0.0 };
        for i in 0..d {
            let h = (row[i] - mean) * inv_std[r];
            xhat[r * d + i] = h;
            out[r * d + i] = h * g[i] + b[i];
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), LayerNormStats { xhat, inv_std }))
}

/// Per-row normalization over the last axis, then `· gamma + beta`.
///
/// A zero-variance row with `eps = 0` normalizes to zero rather than NaN.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(t, _)| t)
}

/// Column-wise max over the sequence axis of `[T,D]`; also returns the
/// first arg-max row per column.
pub fn max_pool_1d(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 2 {
        return dim_err(format!("max_pool_1d expects [T,D], got {:?}", x.shape()));
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    if t == 0 {
        return Err(Error::Precondition("max_pool_1d over an empty sequence".into()));
    }
    let src = x.data();
    let mut best = src[..d].to_vec();
    let mut arg = vec![0usize; d];
    for r in 1..t {
        for c in 0..d {
            let v = src[r * d + c];
            if v > best[c] {
                best[c] = v;
                arg[c] = r;
            }
        }
    }
    Ok((Tensor::from_parts(vec![d], best), arg))
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (0 or `1/(1-p)`), which is the mask used by the gradient.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, mode: Mode, rng: &mut R) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.detach(), None));
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((Tensor::from_parts(x.shape().to_vec(), out), Some(mask)))
}

/// Smallest probability admitted into the log of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln(max(probs[label], 1e-12))` for a single probability vector.
pub fn nll(probs: &Tensor, label: usize) -> Result<Tensor> {
    if probs.rank() != 1 {
        return dim_err(format!("nll expects a probability vector, got {:?}", probs.shape()));
    }
    if label >= probs.len() {
        return Err(Error::Index(format!("label {label} out of {} classes", probs.len())));
    }
    let p = probs.data()[label].max(PROB_FLOOR);
    Ok(Tensor::from_parts(vec![], vec![-p.ln()]))
}
