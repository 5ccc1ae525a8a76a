use std::fmt;
use std::str::FromStr;

use crate::attention::WindowSpec;
use crate::embedding::MIN_FRAME_SIDE;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pipeline {
    /// Per-frame CNN features, sequence transformer encoder, max pooling.
    Drowsy,
    /// Tubelet embedding and shifted-window stages with patch merging.
    Distracted,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Drowsy => "drowsy",
            Pipeline::Distracted => "distracted",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Pipeline::Drowsy => 0,
            Pipeline::Distracted => 1,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Pipeline::Drowsy),
            1 => Some(Pipeline::Distracted),
            _ => None,
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pipeline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drowsy" => Ok(Pipeline::Drowsy),
            "distracted" => Ok(Pipeline::Distracted),
            other => Err(Error::Config(format!(
                "unknown pipeline {other:?} (expected drowsy or distracted)"
            ))),
        }
    }
}

/// Architecture hyperparameters. Fields that do not apply to a pipeline
/// are ignored by it (e.g. `window` for drowsy, `feature_dim` for distracted).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub pipeline: Pipeline,
    pub num_classes: usize,
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
    /// Token width; for distracted this is the first-stage width, doubled
    /// by every merge.
    pub d_model: usize,
    pub heads: usize,
    /// Encoder blocks (drowsy) or blocks per stage (distracted).
    pub depth: usize,
    /// Hidden width of the MLP as a multiple of the token width.
    pub mlp_ratio: usize,
    pub window: [usize; 3],
    /// Number of window stages; a patch merge precedes every stage but the first.
    pub stages: usize,
    pub tubelet: [usize; 3],
    pub feature_dim: usize,
    pub dropout_p: f64,
    pub rel_pos_bias: bool,
    /// Mask cross-seam pairs in shifted blocks. Off gives a purely
    /// toroidal tiling.
    pub shift_mask: bool,
    /// Zero-pad token grids that do not divide into whole windows or tubelets.
    pub pad: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn drowsy() -> Self {
        ModelConfig {
            pipeline: Pipeline::Drowsy,
            num_classes: 2,
            seq_len: 30,
            height: 64,
            width: 64,
            d_model: 128,
            heads: 4,
            depth: 2,
            mlp_ratio: 4,
            window: [3, 4, 4],
            stages: 2,
            tubelet: [2, 4, 4],
            feature_dim: 1024,
            dropout_p: 0.5,
            rel_pos_bias: false,
            shift_mask: true,
            pad: false,
            seed: 0,
        }
    }

    pub fn distracted() -> Self {
        ModelConfig {
            pipeline: Pipeline::Distracted,
            num_classes: 9,
            d_model: 96,
            ..Self::drowsy()
        }
    }

    pub fn for_pipeline(p: Pipeline) -> Self {
        match p {
            Pipeline::Drowsy => Self::drowsy(),
            Pipeline::Distracted => Self::distracted(),
        }
    }

    /// Token width at each distracted stage.
    pub fn stage_dims(&self) -> Vec<usize> {
        (0..self.stages).map(|s| self.d_model << s).collect()
    }

    pub fn final_dim(&self) -> usize {
        match self.pipeline {
            Pipeline::Drowsy => self.d_model,
            Pipeline::Distracted => self.d_model << (self.stages - 1),
        }
    }

    /// Token grid entering each distracted stage.
    pub fn stage_grids(&self) -> Result<Vec<[usize; 3]>> {
        let dims = [self.seq_len, self.height, self.width];
        let mut g = [0usize; 3];
        for a in 0..3 {
            if dims[a] % self.tubelet[a] != 0 && !self.pad {
                return Err(Error::Config(format!(
                    "clip extents {dims:?} are not divisible by tubelet {:?}",
                    self.tubelet
                )));
            }
            g[a] = dims[a].div_ceil(self.tubelet[a]);
        }
        let mut out = vec![g];
        for _ in 1..self.stages {
            if g[1] % 2 != 0 || g[2] % 2 != 0 {
                return Err(Error::Config(format!(
                    "token grid {g:?} cannot be merged: H' and W' must be even"
                )));
            }
            g = [g[0], g[1] / 2, g[2] / 2];
            out.push(g);
        }
        Ok(out)
    }

    /// Window layout of block `block` in a stage with token grid `grid`.
    /// Odd blocks are shifted by half a window; extents are clamped to the grid.
    pub fn block_window(&self, grid: [usize; 3], block: usize) -> Result<WindowSpec> {
        let base = if block % 2 == 1 {
            WindowSpec::shifted(self.window)?
        } else {
            WindowSpec::unshifted(self.window)?
        };
        let spec = base.fit_to(grid);
        let padded = spec.padded_grid(grid);
        if padded != grid && !self.pad {
            return Err(Error::Config(format!(
                "token grid {grid:?} is not divisible by window {:?}; enable pad",
                spec.window
            )));
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.seq_len == 0 {
            return bad("depth, mlp_ratio and seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        match self.pipeline {
            Pipeline::Drowsy => {
                if self.height < MIN_FRAME_SIDE || self.width < MIN_FRAME_SIDE {
                    return bad(format!(
                        "frames of {}x{} are below the {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE} minimum",
                        self.height, self.width
                    ));
                }
                if self.feature_dim == 0 {
                    return bad("feature_dim must be positive".into());
                }
            }
            Pipeline::Distracted => {
                if self.stages == 0 {
                    return bad("stages must be positive".into());
                }
                if self.tubelet.contains(&0) || self.window.contains(&0) {
                    return bad("tubelet and window extents must be positive".into());
                }
                for g in self.stage_grids()? {
                    for b in 0..self.depth {
                        self.block_window(g, b)?;
                    }
                }
            }
        }
        Ok(())
    }
}
