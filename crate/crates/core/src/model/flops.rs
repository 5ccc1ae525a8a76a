//! Analytic per-clip forward FLOPs.
//!
//! Matmuls count `2·m·n·k`. Elementwise costs per element: layer norm 8,
//! softmax 5, GELU 8, ReLU 1, bias/residual/mask add 1, scaling 1,
//! pooling 1 per input element. Dropout is the identity at inference and
//! costs nothing.

use std::fmt;

use super::config::{ModelConfig, Pipeline};
use crate::embedding::{CHANNELS, CNN_CONV1, CNN_CONV2, CNN_KERNEL, CNN_STRIDE};
use crate::error::Result;

pub const LAYER_NORM_PER_ELEM: u64 = 8;
pub const SOFTMAX_PER_ELEM: u64 = 5;
pub const GELU_PER_ELEM: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    /// Matmul share only.
    pub matmul: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.total).sum()
    }

    pub fn matmul_total(&self) -> u64 {
        self.layers.iter().map(|l| l.matmul).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 / 1e9
    }

    /// Sum over layers whose name starts with `prefix`.
    pub fn total_of(&self, prefix: &str) -> u64 {
        self.layers.iter().filter(|l| l.name.starts_with(prefix)).map(|l| l.total).sum()
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>14} {:>12}", "layer", "flops", "gflops")?;
        for l in &self.layers {
            writeln!(f, "{:<28} {:>14} {:>12.6}", l.name, l.total, l.total as f64 / 1e9)?;
        }
        write!(f, "{:<28} {:>14} {:>12.6}", "total", self.total(), self.gflops())
    }
}

#[derive(Default)]
struct Acc {
    matmul: u64,
    other: u64,
}

impl Acc {
    fn mm(&mut self, m: usize, k: usize, n: usize) {
        self.matmul += 2 * (m * k * n) as u64;
    }

    fn ew(&mut self, elems: usize, per: u64) {
        self.other += elems as u64 * per;
    }

    fn push(self, layers: &mut Vec<LayerFlops>, name: String) {
        layers.push(LayerFlops {
            name,
            matmul: self.matmul,
            total: self.matmul + self.other,
        });
    }
}

/// Attention sublayer over `windows` windows of `n` tokens each.
fn attention(acc: &mut Acc, valid_tokens: usize, windows: usize, n: usize, d: usize, heads: usize, masked: bool, rel: bool) {
    let tokens = windows * n;
    let scores = windows * heads * n * n;
    acc.ew(valid_tokens * d, LAYER_NORM_PER_ELEM);
    acc.mm(tokens, d, d);
    acc.mm(tokens, d, d);
    acc.mm(tokens, d, d);
    acc.mm(windows * heads * n, d / heads, n);
    acc.ew(scores, 1);
    if masked {
        acc.ew(scores, 1);
    }
    if rel {
        acc.ew(scores, 1);
    }
    acc.ew(scores, SOFTMAX_PER_ELEM);
    acc.mm(windows * heads * n, n, d / heads);
    acc.mm(tokens, d, d);
    acc.ew(valid_tokens * d, 1);
}

fn mlp(acc: &mut Acc, tokens: usize, d: usize, ratio: usize) {
    let h = ratio * d;
    acc.ew(tokens * d, LAYER_NORM_PER_ELEM);
    acc.mm(tokens, d, h);
    acc.ew(tokens * h, 1 + GELU_PER_ELEM);
    acc.mm(tokens, h, d);
    acc.ew(tokens * d, 2);
}

fn conv_out(side: usize) -> usize {
    (side - CNN_KERNEL) / CNN_STRIDE + 1
}

/// Analytic forward cost of one clip.
pub fn flops_estimate(cfg: &ModelConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let (d, c) = (cfg.d_model, cfg.num_classes);
    match cfg.pipeline {
        Pipeline::Drowsy => {
            let t = cfg.seq_len;
            let (h1, w1) = (conv_out(cfg.height), conv_out(cfg.width));
            let (h2, w2) = (conv_out(h1), conv_out(w1));
            let k2 = CNN_KERNEL * CNN_KERNEL;
            let mut a = Acc::default();
            a.mm(t * h1 * w1, k2 * CHANNELS, CNN_CONV1);
            a.ew(t * h1 * w1 * CNN_CONV1, 2);
            a.push(&mut layers, "cnn.conv1".into());
            let mut a = Acc::default();
            a.mm(t * h2 * w2, k2 * CNN_CONV1, CNN_CONV2);
            a.ew(t * h2 * w2 * CNN_CONV2, 2);
            a.push(&mut layers, "cnn.conv2".into());
            let mut a = Acc::default();
            a.ew(t * h2 * w2 * CNN_CONV2, 1);
            a.mm(t, CNN_CONV2, cfg.feature_dim);
            a.ew(t * cfg.feature_dim, 1);
            a.push(&mut layers, "cnn.fc".into());
            let mut a = Acc::default();
            a.mm(t, cfg.feature_dim, d);
            a.ew(t * d, 1);
            a.push(&mut layers, "embed".into());
            for i in 0..cfg.depth {
                let mut a = Acc::default();
                attention(&mut a, t, 1, t, d, cfg.heads, false, false);
                a.push(&mut layers, format!("encoder.{i}.attn"));
                let mut a = Acc::default();
                mlp(&mut a, t, d, cfg.mlp_ratio);
                a.push(&mut layers, format!("encoder.{i}.mlp"));
            }
            let mut a = Acc::default();
            a.ew(t * d, 1);
            a.push(&mut layers, "pool".into());
        }
        Pipeline::Distracted => {
            let grids = cfg.stage_grids()?;
            let g0 = grids[0];
            let tokens0: usize = g0.iter().product();
            let flat = cfg.tubelet.iter().product::<usize>() * CHANNELS;
            let mut a = Acc::default();
            a.mm(tokens0, flat, d);
            a.ew(tokens0 * d, 1);
            a.push(&mut layers, "patch_embed".into());
            for (s, (&ds, g)) in cfg.stage_dims().iter().zip(&grids).enumerate() {
                let tokens: usize = g.iter().product();
                if s > 0 {
                    let prev = ds / 2;
                    let mut a = Acc::default();
                    a.ew(tokens * 4 * prev, LAYER_NORM_PER_ELEM);
                    a.mm(tokens, 4 * prev, ds);
                    a.push(&mut layers, format!("stages.{s}.merge"));
                }
                for i in 0..cfg.depth {
                    let spec = cfg.block_window(*g, i)?;
                    let padded = spec.padded_grid(*g);
                    let masked = padded != *g || (cfg.shift_mask && spec.is_shifted());
                    let mut a = Acc::default();
                    attention(
                        &mut a,
                        tokens,
                        spec.num_windows(padded),
                        spec.tokens(),
                        ds,
                        cfg.heads,
                        masked,
                        cfg.rel_pos_bias,
                    );
                    a.push(&mut layers, format!("stages.{s}.blocks.{i}.attn"));
                    let mut a = Acc::default();
                    mlp(&mut a, tokens, ds, cfg.mlp_ratio);
                    a.push(&mut layers, format!("stages.{s}.blocks.{i}.mlp"));
                }
            }
            let last: usize = grids.last().expect("at least one stage").iter().product();
            let mut a = Acc::default();
            a.ew(last * cfg.final_dim(), LAYER_NORM_PER_ELEM);
            a.push(&mut layers, "norm".into());
            let mut a = Acc::default();
            a.ew(last * cfg.final_dim(), 1);
            a.push(&mut layers, "pool".into());
        }
    }
    let f = cfg.final_dim();
    let mut a = Acc::default();
    a.mm(1, f, c);
    a.ew(c, 1 + SOFTMAX_PER_ELEM);
    a.push(&mut layers, "head".into());
    Ok(FlopsReport { layers })
}
