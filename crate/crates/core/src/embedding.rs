//! Clip-to-token conversion: tubelet embedding and patch merging for the
//! window pipeline, and a per-frame convolutional feature extractor for the
//! frame-sequence pipeline.

use crate::attention::LN_EPS;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tape, Tensor};

/// Channels per frame (RGB).
pub const CHANNELS: usize = 3;
/// Smallest frame side the convolutional extractor accepts.
pub const MIN_FRAME_SIDE: usize = 8;

/// A labelled clip of `[T, H, W, C]` frames with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub label: usize,
    pub source_id: String,
}

impl VideoClip {
    pub fn new(frames: Tensor, label: usize, source_id: impl Into<String>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != CHANNELS {
            return dim_err(format!("clip frames must be [T, H, W, 3], got {s:?}"));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Precondition(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(VideoClip {
            frames,
            label,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(T, H, W)`
    pub fn dims(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[0], s[1], s[2]]
    }
}

/// A `[T', H', W', D]` token grid and how it was produced.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub patch: [usize; 3],
    pub merges: usize,
}

impl TokenGrid {
    pub fn grid(&self) -> [usize; 3] {
        let s = self.tokens.shape();
        [s[0], s[1], s[2]]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[3]
    }

    pub fn num_tokens(&self) -> usize {
        self.grid().iter().product()
    }
}

/// Flattens each non-overlapping `pt×ph×pw×C` pixel block in `(t, h, w, c)`
/// order and projects it: `block · proj + bias`.
///
/// With `pad`, extents that do not divide are zero-padded at the far end.
pub fn tubelet_embed(
    tape: &mut Tape,
    frames: &Tensor,
    patch: [usize; 3],
    proj: &Tensor,
    bias: &Tensor,
    pad: bool,
) -> Result<TokenGrid> {
    let s = frames.shape();
    if s.len() != 4 {
        return dim_err(format!("expected [T, H, W, C] frames, got {s:?}"));
    }
    let c = s[3];
    let [pt, ph, pw] = patch;
    if patch.contains(&0) {
        return Err(Error::Parameter(format!("tubelet size {patch:?} has a zero extent")));
    }
    let flat = pt * ph * pw * c;
    if proj.rank() != 2 || proj.shape()[0] != flat {
        return dim_err(format!(
            "tubelet projection {:?} does not take {flat} inputs",
            proj.shape()
        ));
    }
    let d = proj.shape()[1];
    let dims = [s[0], s[1], s[2]];
    let padded = [0, 1, 2].map(|a| dims[a].div_ceil(patch[a]) * patch[a]);
    let x = if padded != dims {
        if !pad {
            return dim_err(format!(
                "clip extents {dims:?} are not divisible by tubelet {patch:?}"
            ));
        }
        tape.pad_to(frames, &[padded[0], padded[1], padded[2], c])?
    } else {
        frames.clone()
    };
    let g = [padded[0] / pt, padded[1] / ph, padded[2] / pw];
    let y = tape.reshape(&x, &[g[0], pt, g[1], ph, g[2], pw, c])?;
    let y = tape.permute(&y, &[0, 2, 4, 1, 3, 5, 6])?;
    let y = tape.reshape(&y, &[g[0] * g[1] * g[2], flat])?;
    let y = tape.linear(&y, proj, Some(bias))?;
    let tokens = tape.reshape(&y, &[g[0], g[1], g[2], d])?;
    Ok(TokenGrid {
        tokens,
        patch,
        merges: 0,
    })
}

/// Concatenates each 2×2 spatial neighbourhood (order (0,0), (0,1), (1,0),
/// (1,1)), layer-normalizes the `4D` vector and projects it to `proj`'s width.
/// The temporal extent is untouched.
pub fn patch_merging(tape: &mut Tape, grid: &TokenGrid, gamma: &Tensor, beta: &Tensor, proj: &Tensor) -> Result<TokenGrid> {
    let [t, h, w] = grid.grid();
    let d = grid.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return dim_err(format!("patch merging needs even H' and W', got {h}x{w}"));
    }
    if proj.rank() != 2 || proj.shape()[0] != 4 * d {
        return dim_err(format!(
            "merge projection {:?} does not take {} inputs",
            proj.shape(),
            4 * d
        ));
    }
    let y = tape.reshape(&grid.tokens, &[t, h / 2, 2, w / 2, 2, d])?;
    let y = tape.permute(&y, &[0, 1, 3, 2, 4, 5])?;
    let y = tape.reshape(&y, &[t, h / 2, w / 2, 4 * d])?;
    let y = tape.layer_norm(&y, gamma, beta, LN_EPS)?;
    let tokens = tape.matmul(&y, proj)?;
    Ok(TokenGrid {
        tokens,
        patch: grid.patch,
        merges: grid.merges + 1,
    })
}

/// Weights of the per-frame extractor. Convolution kernels are stored in
/// im2col layout `[k·k·C_in, C_out]` with patch order `(kh, kw, c)`.
#[derive(Debug, Clone)]
pub struct CnnParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

pub const CNN_KERNEL: usize = 3;
pub const CNN_STRIDE: usize = 2;
pub const CNN_CONV1: usize = 16;
pub const CNN_CONV2: usize = 32;

/// Per frame: conv 3×3/2 → ReLU → conv 3×3/2 → ReLU → global average pool →
/// dense. Returns `[T, fc_width]`.
pub fn cnn_frame_features(tape: &mut Tape, frames: &Tensor, p: &CnnParams) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return dim_err(format!("expected [T, H, W, C] frames, got {s:?}"));
    }
    if s[1] < MIN_FRAME_SIDE || s[2] < MIN_FRAME_SIDE {
        return dim_err(format!(
            "frames of {}x{} are below the {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE} minimum",
            s[1], s[2]
        ));
    }
    let t = s[0];
    let cols = tape.im2col(frames, CNN_KERNEL, CNN_STRIDE)?;
    let y = tape.linear(&cols, &p.conv1_w, Some(&p.conv1_b))?;
    let y = tape.relu(&y)?;
    let cols = tape.im2col(&y, CNN_KERNEL, CNN_STRIDE)?;
    let y = tape.linear(&cols, &p.conv2_w, Some(&p.conv2_b))?;
    let y = tape.relu(&y)?;
    let ys = y.shape().to_vec();
    let y = tape.reshape(&y, &[t, ys[1] * ys[2], ys[3]])?;
    let pooled = tape.mean_axis(&y, 1)?;
    tape.linear(&pooled, &p.fc_w, Some(&p.fc_b))
}

/// `features · proj + pos`
pub fn sequence_embed(tape: &mut Tape, features: &Tensor, proj: &Tensor, pos: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 || proj.rank() != 2 || features.shape()[1] != proj.shape()[0] {
        return dim_err(format!(
            "features {:?} do not conform to projection {:?}",
            features.shape(),
            proj.shape()
        ));
    }
    if pos.shape() != [features.shape()[0], proj.shape()[1]] {
        return dim_err(format!(
            "position table {:?}, expected [{}, {}]",
            pos.shape(),
            features.shape()[0],
            proj.shape()[1]
        ));
    }
    let y = tape.matmul(features, proj)?;
    tape.add(&y, pos)
}
