use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Pipeline};
use super::weights::Weights;
use crate::attention::{swin_block, transformer_block, WindowOptions, LN_EPS};
use crate::embedding::{cnn_frame_features, patch_merging, sequence_embed, tubelet_embed, VideoClip, CHANNELS};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Mode, Tape, Tensor};

/// Softmax output of a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs {
    pub probs: Tensor,
}

impl ClassProbs {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 1 {
            return dim_err(format!("class probabilities must be a vector, got {:?}", probs.shape()));
        }
        let total: f64 = probs.data().iter().sum();
        if (total - 1.0).abs() > 1e-9 || probs.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Numerical(format!("not a probability vector (sum {total})")));
        }
        Ok(ClassProbs { probs })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let d = self.probs.data();
        let mut best = 0;
        for (i, &p) in d.iter().enumerate() {
            if p > d[best] {
                best = i;
            }
        }
        best
    }
}

/// `softmax(dropout(x)·w + b)` for a pooled feature vector `x [D]`.
pub fn classification_head<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    if x.rank() != 1 || w.rank() != 2 || w.shape()[0] != x.len() || b.shape() != [w.shape()[1]] {
        return dim_err(format!(
            "head input {:?} does not conform to weights {:?} and bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let row = tape.reshape(x, &[1, x.len()])?;
    let row = tape.dropout(&row, p, mode, rng)?;
    let logits = tape.linear(&row, w, Some(b))?;
    let logits = tape.reshape(&logits, &[w.shape()[1]])?;
    tape.softmax(&logits, 0)
}

fn check_frames(cfg: &ModelConfig, frames: &Tensor) -> Result<()> {
    let want = [cfg.seq_len, cfg.height, cfg.width, CHANNELS];
    if frames.shape() != want {
        return Err(Error::Config(format!(
            "clip of shape {:?} does not match configured {want:?}",
            frames.shape()
        )));
    }
    Ok(())
}

fn check_pipeline(cfg: &ModelConfig, want: Pipeline) -> Result<()> {
    if cfg.pipeline != want {
        return Err(Error::Config(format!(
            "{want} forward called with a {} configuration",
            cfg.pipeline
        )));
    }
    Ok(())
}

/// Frame features → embedding → encoder blocks → max pool → head.
pub fn drowsy_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights,
    frames: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    check_pipeline(cfg, Pipeline::Drowsy)?;
    w.validate(cfg)?;
    check_frames(cfg, frames)?;
    let feats = cnn_frame_features(tape, frames, &w.cnn()?)?;
    let mut x = sequence_embed(tape, &feats, w.get("embed.proj")?, w.get("embed.pos")?)?;
    for i in 0..cfg.depth {
        let p = w.block(&format!("encoder.{i}"), cfg.heads, false)?;
        x = transformer_block(tape, &x, &p)?;
    }
    let pooled = tape.max_pool_1d(&x)?;
    classification_head(tape, &pooled, w.get("head.w")?, w.get("head.b")?, cfg.dropout_p, mode, rng)
}

/// Tubelets → (W-MSA, SW-MSA) stages with patch merging → norm → mean pool → head.
pub fn distracted_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights,
    frames: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    check_pipeline(cfg, Pipeline::Distracted)?;
    w.validate(cfg)?;
    check_frames(cfg, frames)?;
    let mut grid = tubelet_embed(
        tape,
        frames,
        cfg.tubelet,
        w.get("patch_embed.proj")?,
        w.get("patch_embed.bias")?,
        cfg.pad,
    )?;
    let opts = WindowOptions {
        pad: cfg.pad,
        shift_mask: cfg.shift_mask,
    };
    for s in 0..cfg.stages {
        if s > 0 {
            let pre = format!("stages.{s}.merge");
            grid = patch_merging(
                tape,
                &grid,
                w.get(&format!("{pre}.norm.gamma"))?,
                w.get(&format!("{pre}.norm.beta"))?,
                w.get(&format!("{pre}.proj"))?,
            )?;
        }
        let g = grid.grid();
        for i in 0..cfg.depth {
            let spec = cfg.block_window(g, i)?;
            let p = w.block(&format!("stages.{s}.blocks.{i}"), cfg.heads, cfg.rel_pos_bias)?;
            grid.tokens = swin_block(tape, &grid.tokens, &p, &spec, opts)?;
        }
    }
    let flat = tape.reshape(&grid.tokens, &[grid.num_tokens(), grid.dim()])?;
    let flat = tape.layer_norm(&flat, w.get("norm.gamma")?, w.get("norm.beta")?, LN_EPS)?;
    let pooled = tape.mean_axis(&flat, 0)?;
    classification_head(tape, &pooled, w.get("head.w")?, w.get("head.b")?, cfg.dropout_p, mode, rng)
}

/// Dispatches on `cfg.pipeline`.
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights,
    frames: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    match cfg.pipeline {
        Pipeline::Drowsy => drowsy_forward(tape, cfg, w, frames, mode, rng),
        Pipeline::Distracted => distracted_forward(tape, cfg, w, frames, mode, rng),
    }
}

/// Eval-mode class probabilities for one clip.
pub fn predict(cfg: &ModelConfig, w: &Weights, clip: &VideoClip) -> Result<ClassProbs> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let probs = forward(&mut Tape::detached(), cfg, w, &clip.frames, Mode::Eval, &mut rng)?;
    ClassProbs::new(probs)
}

/// Finite-difference check of the full pipeline loss `−ln p[label]` with
/// respect to every weight, dropout off.
pub fn grad_check_pipeline(
    cfg: &ModelConfig,
    w: &Weights,
    frames: &Tensor,
    label: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let names: Vec<String> = w.iter().map(|(n, _)| n.to_string()).collect();
    let params: Vec<Tensor> = w.tensors().cloned().collect();
    grad_check(
        |tape, ps| {
            let mut ww = Weights::new();
            for (n, t) in names.iter().zip(ps) {
                ww.insert(n.clone(), t.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let probs = forward(tape, cfg, &ww, frames, Mode::Eval, &mut rng)?;
            tape.nll(&probs, label)
        },
        &params,
        opts,
    )
}
