//! Scaled dot-product attention, multi-head attention, and 3D (shifted)
//! window attention over a `[T, H, W, D]` token grid.
//!
//! Shifted windows follow the cyclic-shift scheme: the grid is rolled by
//! `-shift`, tiled into non-overlapping windows, and an additive mask keeps
//! tokens from attending across the seams the roll introduced.

use crate::error::{dim_err, Error, Result};
use crate::tensor::ops::MASK_NEG;
use crate::tensor::{Tape, Tensor};

/// Epsilon used by every layer norm in the models.
pub const LN_EPS: f64 = 1e-5;

/// Projection weights of one multi-head attention layer (no biases).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: usize,
    pub d_model: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl AttentionParams {
    pub fn new(heads: usize, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor) -> Result<Self> {
        let d_model = w_q.shape().first().copied().unwrap_or(0);
        if heads == 0 || d_model == 0 || d_model % heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if w.shape() != [d_model, d_model] {
                return dim_err(format!(
                    "{name} has shape {:?}, expected [{d_model}, {d_model}]",
                    w.shape()
                ));
            }
        }
        Ok(AttentionParams {
            heads,
            d_model,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Window extents and cyclic shift along (t, h, w).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    pub window: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowSpec {
    pub fn new(window: [usize; 3], shift: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if window[a] == 0 || shift[a] >= window[a] {
                return Err(Error::Parameter(format!(
                    "window {window:?} with shift {shift:?}: need 0 <= shift < window"
                )));
            }
        }
        Ok(WindowSpec { window, shift })
    }

    pub fn unshifted(window: [usize; 3]) -> Result<Self> {
        Self::new(window, [0; 3])
    }

    /// Shift of half a window (rounded down) on every axis.
    pub fn shifted(window: [usize; 3]) -> Result<Self> {
        Self::new(window, window.map(|w| w / 2))
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    pub fn tokens(&self) -> usize {
        self.window.iter().product()
    }

    /// Clamps to a grid: on any axis where the grid is no larger than the
    /// window, the window becomes the full extent and the shift drops to 0.
    pub fn fit_to(&self, grid: [usize; 3]) -> WindowSpec {
        let mut out = *self;
        for a in 0..3 {
            if grid[a] <= self.window[a] {
                out.window[a] = grid[a];
                out.shift[a] = 0;
            }
        }
        out
    }

    /// Grid extents rounded up to whole windows.
    pub fn padded_grid(&self, grid: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| grid[a].div_ceil(self.window[a]) * self.window[a])
    }

    pub fn num_windows(&self, grid: [usize; 3]) -> usize {
        (0..3).map(|a| grid[a] / self.window[a]).product()
    }

    fn check_divides(&self, grid: [usize; 3]) -> Result<()> {
        if (0..3).any(|a| grid[a] % self.window[a] != 0) {
            return dim_err(format!(
                "grid {grid:?} is not divisible by window {:?}",
                self.window
            ));
        }
        Ok(())
    }
}

/// Per-window additive attention bias `[num_windows, N, N]`: 0 where a pair
/// may attend, `-1e9` where it may not.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    bias: Tensor,
}

impl AttentionMask {
    pub fn new(bias: Tensor) -> Result<Self> {
        let s = bias.shape();
        if s.len() != 3 || s[1] != s[2] {
            return dim_err(format!("mask must be [windows, N, N], got {s:?}"));
        }
        Ok(AttentionMask { bias })
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn num_windows(&self) -> usize {
        self.bias.shape()[0]
    }

    pub fn window_tokens(&self) -> usize {
        self.bias.shape()[1]
    }

    /// True if every entry is zero (the mask changes nothing).
    pub fn is_trivial(&self) -> bool {
        self.bias.data().iter().all(|&v| v == 0.0)
    }
}

fn grid_of(x: &Tensor) -> Result<[usize; 3]> {
    if x.rank() != 4 {
        return dim_err(format!("expected a [T, H, W, D] grid, got {:?}", x.shape()));
    }
    let s = x.shape();
    Ok([s[0], s[1], s[2]])
}

// ---------------------------------------------------------------------------
// attention

/// `softmax(q·kᵀ/√d_k + mask)` along the key axis.
pub fn attention_weights(tape: &mut Tape, q: &Tensor, k: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let d_k = *q.shape().last().unwrap_or(&0);
    if d_k == 0 {
        return Err(Error::Parameter("attention with d_k = 0".into()));
    }
    if k.shape().last() != Some(&d_k) {
        return dim_err(format!(
            "query width {d_k} differs from key shape {:?}",
            k.shape()
        ));
    }
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, &kt)?;
    let scores = tape.scale(&scores, 1.0 / (d_k as f64).sqrt())?;
    let scores = match mask {
        Some(m) => tape.add_broadcast(&scores, m)?,
        None => scores,
    };
    tape.softmax(&scores, -1)
}

/// `softmax(q·kᵀ/√d_k + mask)·v`.
pub fn scaled_dot_product_attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let kr = k.shape()[k.rank().saturating_sub(2)];
    let vr = v.shape()[v.rank().saturating_sub(2)];
    if k.rank() < 2 || v.rank() < 2 || kr != vr {
        return dim_err(format!(
            "keys {:?} and values {:?} must share a row count",
            k.shape(),
            v.shape()
        ));
    }
    let w = attention_weights(tape, q, k, mask)?;
    tape.matmul(&w, v)
}

/// Self-attention over `x [.., N, d_model]` with heads split from the
/// model width. `mask` is `[.., N, N]` matching the leading axes of `x`
/// (or `[N, N]`) and is shared by all heads; `head_bias` is `[heads, N, N]`.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: &Tensor,
    params: &AttentionParams,
    mask: Option<&Tensor>,
    head_bias: Option<&Tensor>,
) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 || x.shape()[r - 1] != params.d_model {
        return dim_err(format!(
            "input {:?} does not end in d_model {}",
            x.shape(),
            params.d_model
        ));
    }
    let lead = &x.shape()[..r - 2];
    let n = x.shape()[r - 2];
    let (h, dk) = (params.heads, params.d_k());

    let mut split_shape = lead.to_vec();
    split_shape.extend([n, h, dk]);
    let mut perm: Vec<usize> = (0..lead.len()).collect();
    let base = lead.len();
    perm.extend([base + 1, base, base + 2]);

    let heads_of = |w: &Tensor, tape: &mut Tape| -> Result<Tensor> {
        let p = tape.matmul(x, w)?;
        let p = tape.reshape(&p, &split_shape)?;
        tape.permute(&p, &perm)
    };
    let q = heads_of(&params.w_q, tape)?;
    let k = heads_of(&params.w_k, tape)?;
    let v = heads_of(&params.w_v, tape)?;

    let kt = tape.transpose_last2(&k)?;
    let scores = tape.matmul(&q, &kt)?;
    let mut scores = tape.scale(&scores, 1.0 / (dk as f64).sqrt())?;
    if let Some(b) = head_bias {
        if b.shape() != [h, n, n] {
            return dim_err(format!("head bias {:?}, expected [{h}, {n}, {n}]", b.shape()));
        }
        scores = tape.add_broadcast(&scores, b)?;
    }
    if let Some(m) = mask {
        let ms = m.shape();
        if ms.len() < 2 || ms[ms.len() - 2..] != [n, n] {
            return dim_err(format!("mask {ms:?} does not match {n} tokens"));
        }
        let mut with_head = ms[..ms.len() - 2].to_vec();
        with_head.extend([1, n, n]);
        let m4 = m.reshape(&with_head)?;
        scores = tape.add_broadcast(&scores, &m4)?;
    }
    let attn = tape.softmax(&scores, -1)?;
    let ctx = tape.matmul(&attn, &v)?;
    let ctx = tape.permute(&ctx, &perm)?;
    let mut merged = lead.to_vec();
    merged.extend([n, params.d_model]);
    let ctx = tape.reshape(&ctx, &merged)?;
    tape.matmul(&ctx, &params.w_o)
}

// ---------------------------------------------------------------------------
// windows

/// Tiles `[T, H, W, D]` into `[num_windows, wt·wh·ww, D]`; windows and the
/// tokens inside each are both in row-major (t, h, w) order.
pub fn window_partition_3d(tape: &mut Tape, x: &Tensor, spec: &WindowSpec) -> Result<Tensor> {
    let g = grid_of(x)?;
    spec.check_divides(g)?;
    let d = x.shape()[3];
    let [wt, wh, ww] = spec.window;
    let split = [g[0] / wt, wt, g[1] / wh, wh, g[2] / ww, ww, d];
    let y = tape.reshape(x, &split)?;
    let y = tape.permute(&y, &[0, 2, 4, 1, 3, 5, 6])?;
    tape.reshape(&y, &[spec.num_windows(g), spec.tokens(), d])
}

/// Inverse of [`window_partition_3d`].
pub fn window_reverse_3d(tape: &mut Tape, windows: &Tensor, spec: &WindowSpec, grid: [usize; 3]) -> Result<Tensor> {
    spec.check_divides(grid)?;
    let s = windows.shape();
    if s.len() != 3 || s[0] != spec.num_windows(grid) || s[1] != spec.tokens() {
        return dim_err(format!(
            "windows {s:?} inconsistent with grid {grid:?} and window {:?}",
            spec.window
        ));
    }
    let d = s[2];
    let [wt, wh, ww] = spec.window;
    let split = [grid[0] / wt, grid[1] / wh, grid[2] / ww, wt, wh, ww, d];
    let y = tape.reshape(windows, &split)?;
    let y = tape.permute(&y, &[0, 3, 1, 4, 2, 5, 6])?;
    tape.reshape(&y, &[grid[0], grid[1], grid[2], d])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftDirection {
    /// Roll by `-shift`, so the token at `shift` moves to the origin.
    Forward,
    /// Undo [`ShiftDirection::Forward`].
    Reverse,
}

/// Toroidal roll of a `[T, H, W, D]` grid; shifts are taken modulo extents.
pub fn cyclic_shift_3d(tape: &mut Tape, x: &Tensor, shift: [usize; 3], direction: ShiftDirection) -> Result<Tensor> {
    grid_of(x)?;
    let sign = match direction {
        ShiftDirection::Forward => -1,
        ShiftDirection::Reverse => 1,
    };
    let s: Vec<isize> = shift.iter().map(|&v| sign * v as isize).collect();
    tape.roll(x, &s)
}

/// Region label along one axis, in the rolled frame.
fn region(p: usize, extent: usize, window: usize, shift: usize) -> usize {
    if shift == 0 || p < extent - window {
        0
    } else if p < extent - shift {
        1
    } else {
        2
    }
}

/// Combined shift/padding mask for window attention on a (possibly padded)
/// grid. `valid` is the unpadded extent. Returns `None` when neither the
/// shift nor padding restricts any pair.
pub fn window_mask(grid: [usize; 3], valid: [usize; 3], spec: &WindowSpec, use_shift_regions: bool) -> Result<Option<AttentionMask>> {
    spec.check_divides(grid)?;
    let shift_regions = use_shift_regions && spec.is_shifted();
    let padded = valid != grid;
    if !shift_regions && !padded {
        return Ok(None);
    }
    let [wt, wh, ww] = spec.window;
    let n = spec.tokens();
    let nw = spec.num_windows(grid);
    // Labels and pad flags in rolled coordinates, ordered as window_partition_3d.
    let mut label = vec![0usize; nw * n];
    let mut is_pad = vec![false; nw * n];
    let mut wi = 0;
    for bt in 0..grid[0] / wt {
        for bh in 0..grid[1] / wh {
            for bw in 0..grid[2] / ww {
                let mut ti = 0;
                for it in 0..wt {
                    for ih in 0..wh {
                        for iw in 0..ww {
                            let p = [bt * wt + it, bh * wh + ih, bw * ww + iw];
                            let slot = wi * n + ti;
                            if shift_regions {
                                let r: Vec<usize> = (0..3)
                                    .map(|a| region(p[a], grid[a], spec.window[a], spec.shift[a]))
                                    .collect();
                                label[slot] = r[0] * 9 + r[1] * 3 + r[2];
                            }
                            // Rolled position p holds the original token p + shift.
                            is_pad[slot] = (0..3).any(|a| {
                                let s = if spec.is_shifted() { spec.shift[a] } else { 0 };
                                (p[a] + s) % grid[a] >= valid[a]
                            });
                            ti += 1;
                        }
                    }
                }
                wi += 1;
            }
        }
    }
    let mut bias = vec![0.0; nw * n * n];
    for w in 0..nw {
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (w * n + i, w * n + j);
                let forbidden = label[a] != label[b] || (is_pad[b] && i != j);
                if forbidden && i != j {
                    bias[(w * n + i) * n + j] = MASK_NEG;
                }
            }
        }
    }
    Ok(Some(AttentionMask::new(Tensor::new(&[nw, n, n], bias)?)?))
}

/// Mask that stops shifted windows from mixing tokens that were not
/// neighbours before the cyclic shift.
///
/// Each axis with a nonzero shift is split, in the rolled frame, into
/// `[0, E-w)`, `[E-w, E-s)`, `[E-s, E)`; tokens attend only within their
/// combined region.
pub fn build_shift_mask(grid: [usize; 3], spec: &WindowSpec) -> Result<AttentionMask> {
    if !spec.is_shifted() {
        return Err(Error::Contract("shift mask requested for an unshifted window".into()));
    }
    Ok(window_mask(grid, grid, spec, true)?.expect("shifted spec always yields a mask"))
}

/// Relative-offset index into a `[(2wt-1)(2wh-1)(2ww-1), heads]` bias table
/// for every (query, key) pair inside one window.
pub fn relative_position_index(window: [usize; 3]) -> Vec<usize> {
    let [wt, wh, ww] = window;
    let coords: Vec<[usize; 3]> = (0..wt)
        .flat_map(|t| (0..wh).flat_map(move |h| (0..ww).map(move |w| [t, h, w])))
        .collect();
    let (sh, sw) = (2 * wh - 1, 2 * ww - 1);
    let mut idx = Vec::with_capacity(coords.len() * coords.len());
    for a in &coords {
        for b in &coords {
            let dt = a[0] + wt - 1 - b[0];
            let dh = a[1] + wh - 1 - b[1];
            let dw = a[2] + ww - 1 - b[2];
            idx.push((dt * sh + dh) * sw + dw);
        }
    }
    idx
}

pub fn relative_table_rows(window: [usize; 3]) -> usize {
    window.iter().map(|w| 2 * w - 1).product()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowOptions {
    /// Zero-pad grids that do not divide into whole windows.
    pub pad: bool,
    /// Apply the cyclic-shift region mask (disable for a purely toroidal tiling).
    pub shift_mask: bool,
}

impl Default for WindowOptions {
    fn default() -> Self {
        WindowOptions {
            pad: false,
            shift_mask: true,
        }
    }
}

/// Windowed multi-head self-attention on a `[T, H, W, D]` grid:
/// pad, roll, partition, masked attention, reverse, unroll, crop.
pub fn window_attention_3d(
    tape: &mut Tape,
    x: &Tensor,
    params: &AttentionParams,
    spec: &WindowSpec,
    opts: WindowOptions,
    rel_table: Option<&Tensor>,
) -> Result<Tensor> {
    let valid = grid_of(x)?;
    let d = x.shape()[3];
    let grid = spec.padded_grid(valid);
    let padded = grid != valid;
    if padded && !opts.pad {
        return dim_err(format!(
            "grid {valid:?} is not divisible by window {:?} and padding is disabled",
            spec.window
        ));
    }
    let mut h = if padded {
        tape.pad_to(x, &[grid[0], grid[1], grid[2], d])?
    } else {
        x.clone()
    };
    if spec.is_shifted() {
        h = cyclic_shift_3d(tape, &h, spec.shift, ShiftDirection::Forward)?;
    }
    let windows = window_partition_3d(tape, &h, spec)?;
    let mask = window_mask(grid, valid, spec, opts.shift_mask)?;
    let head_bias = match rel_table {
        Some(table) => {
            let n = spec.tokens();
            let rows = relative_table_rows(spec.window);
            if table.shape() != [rows, params.heads] {
                return dim_err(format!(
                    "relative bias table {:?}, expected [{rows}, {}]",
                    table.shape(),
                    params.heads
                ));
            }
            let g = tape.gather_rows(table, &relative_position_index(spec.window))?;
            let g = tape.reshape(&g, &[n, n, params.heads])?;
            Some(tape.permute(&g, &[2, 0, 1])?)
        }
        None => None,
    };
    let out = multi_head_attention(tape, &windows, params, mask.as_ref().map(AttentionMask::bias), head_bias.as_ref())?;
    let mut h = window_reverse_3d(tape, &out, spec, grid)?;
    if spec.is_shifted() {
        h = cyclic_shift_3d(tape, &h, spec.shift, ShiftDirection::Reverse)?;
    }
    if padded {
        h = tape.crop_to(&h, &[valid[0], valid[1], valid[2], d])?;
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// blocks

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// `gelu(x·w1 + b1)·w2 + b2`
pub fn mlp(tape: &mut Tape, x: &Tensor, p: &MlpParams) -> Result<Tensor> {
    let h = tape.linear(x, &p.w1, Some(&p.b1))?;
    let h = tape.gelu(&h)?;
    tape.linear(&h, &p.w2, Some(&p.b2))
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub attn: AttentionParams,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub mlp: MlpParams,
    /// Relative position bias table for windowed blocks, if enabled.
    pub rel_table: Option<Tensor>,
}

fn mlp_residual(tape: &mut Tape, x: &Tensor, p: &BlockParams) -> Result<Tensor> {
    let h = tape.layer_norm(x, &p.norm2_gamma, &p.norm2_beta, LN_EPS)?;
    let h = mlp(tape, &h, &p.mlp)?;
    tape.add(x, &h)
}

/// Sequence block over `[N, D]`: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
pub fn transformer_block(tape: &mut Tape, x: &Tensor, p: &BlockParams) -> Result<Tensor> {
    let h = tape.layer_norm(x, &p.norm1_gamma, &p.norm1_beta, LN_EPS)?;
    let h = multi_head_attention(tape, &h, &p.attn, None, None)?;
    let x = tape.add(x, &h)?;
    mlp_residual(tape, &x, p)
}

/// Window block over a `[T, H, W, D]` grid: `x + W-MSA(LN(x))` (or SW-MSA
/// when `spec` is shifted), then `x + MLP(LN(x))`.
pub fn swin_block(tape: &mut Tape, x: &Tensor, p: &BlockParams, spec: &WindowSpec, opts: WindowOptions) -> Result<Tensor> {
    let h = tape.layer_norm(x, &p.norm1_gamma, &p.norm1_beta, LN_EPS)?;
    let h = window_attention_3d(tape, &h, &p.attn, spec, opts, p.rel_table.as_ref())?;
    let x = tape.add(x, &h)?;
    mlp_residual(tape, &x, p)
}
