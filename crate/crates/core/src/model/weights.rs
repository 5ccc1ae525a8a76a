use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Pipeline};
use crate::attention::{relative_table_rows, AttentionParams, BlockParams, MlpParams};
use crate::embedding::{CnnParams, CHANNELS, CNN_CONV1, CNN_CONV2, CNN_KERNEL};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Initial value distribution of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform ±sqrt(6 / (fan_in + fan_out)) over a `[fan_in, fan_out]` matrix.
    Xavier,
    Zeros,
    Ones,
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init) {
    out.push(ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    });
}

fn block_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, cfg: &ModelConfig, rel_window: Option<[usize; 3]>) {
    let h = cfg.mlp_ratio * d;
    spec(out, format!("{prefix}.norm1.gamma"), &[d], Init::Ones);
    spec(out, format!("{prefix}.norm1.beta"), &[d], Init::Zeros);
    for p in ["w_q", "w_k", "w_v", "w_o"] {
        spec(out, format!("{prefix}.attn.{p}"), &[d, d], Init::Xavier);
    }
    if let Some(w) = rel_window {
        spec(out, format!("{prefix}.attn.rel_bias"), &[relative_table_rows(w), cfg.heads], Init::Zeros);
    }
    spec(out, format!("{prefix}.norm2.gamma"), &[d], Init::Ones);
    spec(out, format!("{prefix}.norm2.beta"), &[d], Init::Zeros);
    spec(out, format!("{prefix}.mlp.fc1.w"), &[d, h], Init::Xavier);
    spec(out, format!("{prefix}.mlp.fc1.b"), &[h], Init::Zeros);
    spec(out, format!("{prefix}.mlp.fc2.w"), &[h, d], Init::Xavier);
    spec(out, format!("{prefix}.mlp.fc2.b"), &[d], Init::Zeros);
}

/// Every trainable tensor of a configuration, in initialization order.
pub fn layout(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let d = cfg.d_model;
    match cfg.pipeline {
        Pipeline::Drowsy => {
            let k = CNN_KERNEL * CNN_KERNEL;
            spec(&mut out, "cnn.conv1.w".into(), &[k * CHANNELS, CNN_CONV1], Init::Xavier);
            spec(&mut out, "cnn.conv1.b".into(), &[CNN_CONV1], Init::Zeros);
            spec(&mut out, "cnn.conv2.w".into(), &[k * CNN_CONV1, CNN_CONV2], Init::Xavier);
            spec(&mut out, "cnn.conv2.b".into(), &[CNN_CONV2], Init::Zeros);
            spec(&mut out, "cnn.fc.w".into(), &[CNN_CONV2, cfg.feature_dim], Init::Xavier);
            spec(&mut out, "cnn.fc.b".into(), &[cfg.feature_dim], Init::Zeros);
            spec(&mut out, "embed.proj".into(), &[cfg.feature_dim, d], Init::Xavier);
            spec(&mut out, "embed.pos".into(), &[cfg.seq_len, d], Init::Uniform(0.02));
            for i in 0..cfg.depth {
                block_specs(&mut out, &format!("encoder.{i}"), d, cfg, None);
            }
        }
        Pipeline::Distracted => {
            let flat = cfg.tubelet.iter().product::<usize>() * CHANNELS;
            spec(&mut out, "patch_embed.proj".into(), &[flat, d], Init::Xavier);
            spec(&mut out, "patch_embed.bias".into(), &[d], Init::Zeros);
            let grids = cfg.stage_grids()?;
            for (s, (&ds, grid)) in cfg.stage_dims().iter().zip(grids).enumerate() {
                if s > 0 {
                    let prev = ds / 2;
                    spec(&mut out, format!("stages.{s}.merge.norm.gamma"), &[4 * prev], Init::Ones);
                    spec(&mut out, format!("stages.{s}.merge.norm.beta"), &[4 * prev], Init::Zeros);
                    spec(&mut out, format!("stages.{s}.merge.proj"), &[4 * prev, ds], Init::Xavier);
                }
                for i in 0..cfg.depth {
                    let rel = if cfg.rel_pos_bias {
                        Some(cfg.block_window(grid, i)?.window)
                    } else {
                        None
                    };
                    block_specs(&mut out, &format!("stages.{s}.blocks.{i}"), ds, cfg, rel);
                }
            }
            spec(&mut out, "norm.gamma".into(), &[cfg.final_dim()], Init::Ones);
            spec(&mut out, "norm.beta".into(), &[cfg.final_dim()], Init::Zeros);
        }
    }
    let f = cfg.final_dim();
    let head = match cfg.pipeline {
        Pipeline::Drowsy => Init::Xavier,
        Pipeline::Distracted => Init::Uniform(0.02),
    };
    spec(&mut out, "head.w".into(), &[f, cfg.num_classes], head);
    spec(&mut out, "head.b".into(), &[cfg.num_classes], Init::Zeros);
    Ok(out)
}

/// Total trainable scalars of a configuration.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(layout(cfg)?.iter().map(|p| p.shape.iter().product::<usize>()).sum())
}

/// Named parameter tensors in a stable order.
#[derive(Debug, Clone, Default)]
pub struct Weights {
    map: IndexMap<String, Tensor>,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeded initialization following [`layout`].
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut w = Weights::new();
        for p in layout(cfg)? {
            let t = match p.init {
                Init::Zeros => Tensor::zeros(&p.shape),
                Init::Ones => Tensor::ones(&p.shape),
                Init::Xavier => {
                    let a = (6.0 / (p.shape[0] + p.shape[1]) as f64).sqrt();
                    Tensor::from_fn(&p.shape, |_| rng.random_range(-a..a))?
                }
                Init::Uniform(a) => Tensor::from_fn(&p.shape, |_| rng.random_range(-a..a))?,
            };
            w.insert(p.name, t);
        }
        Ok(w)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing weight {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.map.values()
    }

    pub fn param_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Copies with every tensor registered as a leaf on `tape`.
    pub fn watch(&self, tape: &mut Tape) -> Weights {
        Weights {
            map: self.map.iter().map(|(k, v)| (k.clone(), tape.watch(v))).collect(),
        }
    }

    /// Checks names, order and shapes against the configuration's layout.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let want = layout(cfg)?;
        if want.len() != self.map.len() {
            return Err(Error::Config(format!(
                "{} weights present, configuration needs {}",
                self.map.len(),
                want.len()
            )));
        }
        for p in &want {
            let t = self.get(&p.name)?;
            if t.shape() != p.shape.as_slice() {
                return Err(Error::Config(format!(
                    "weight {:?} has shape {:?}, configuration needs {:?}",
                    p.name,
                    t.shape(),
                    p.shape
                )));
            }
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &Weights) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }

    pub(crate) fn block(&self, prefix: &str, heads: usize, rel: bool) -> Result<BlockParams> {
        let g = |s: &str| self.get(&format!("{prefix}.{s}")).cloned();
        Ok(BlockParams {
            norm1_gamma: g("norm1.gamma")?,
            norm1_beta: g("norm1.beta")?,
            attn: AttentionParams::new(heads, g("attn.w_q")?, g("attn.w_k")?, g("attn.w_v")?, g("attn.w_o")?)?,
            norm2_gamma: g("norm2.gamma")?,
            norm2_beta: g("norm2.beta")?,
            mlp: MlpParams {
                w1: g("mlp.fc1.w")?,
                b1: g("mlp.fc1.b")?,
                w2: g("mlp.fc2.w")?,
                b2: g("mlp.fc2.b")?,
            },
            rel_table: if rel { Some(g("attn.rel_bias")?) } else { None },
        })
    }

    pub(crate) fn cnn(&self) -> Result<CnnParams> {
        let g = |s: &str| self.get(s).cloned();
        Ok(CnnParams {
            conv1_w: g("cnn.conv1.w")?,
            conv1_b: g("cnn.conv1.b")?,
            conv2_w: g("cnn.conv2.w")?,
            conv2_b: g("cnn.conv2.b")?,
            fc_w: g("cnn.fc.w")?,
            fc_b: g("cnn.fc.b")?,
        })
    }
}
