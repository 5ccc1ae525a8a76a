//! Flat `key = value` run configuration.

use std::path::PathBuf;

use vidswin::data::{PixelFormat, SyntheticSpec};
use vidswin::model::{ModelConfig, Pipeline};
use vidswin::train::{OptimizerKind, TrainConfig};

use crate::Failure;

/// Every accepted key with its default; `-` marks pipeline-dependent or
/// unset defaults.
pub const KEYS: &[(&str, &str)] = &[
    ("pipeline", "drowsy"),
    ("seed", "0"),
    ("num_classes", "2 (drowsy) / 9 (distracted)"),
    ("seq_len", "30"),
    ("height", "64"),
    ("width", "64"),
    ("d_model", "128 (drowsy) / 96 (distracted)"),
    ("heads", "4"),
    ("depth", "2"),
    ("mlp_ratio", "4"),
    ("window", "3,4,4"),
    ("stages", "2"),
    ("tubelet", "2,4,4"),
    ("feature_dim", "1024"),
    ("dropout", "0.5"),
    ("rel_pos_bias", "false"),
    ("shift_mask", "true"),
    ("pad", "false"),
    ("epochs", "10 (drowsy) / 50 (distracted)"),
    ("batch_size", "8"),
    ("learning_rate", "0.001"),
    ("optimizer", "adam"),
    ("split_fraction", "0.8"),
    ("log_wall_time", "false"),
    ("clips_per_class", "10"),
    ("noise_sigma", "0.03"),
    ("synth_patch", "12"),
    ("domain", "0"),
    ("pixel_format", "u8"),
    ("gradcheck_samples", "60"),
    ("gradcheck_eps", "0.0001"),
    ("data_dir", "-"),
    ("out_dir", "-"),
    ("checkpoint", "-"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub clips_per_class: usize,
    pub noise_sigma: f64,
    pub synth_patch: usize,
    pub domain: u64,
    pub pixel_format: PixelFormat,
    pub gradcheck_samples: usize,
    pub gradcheck_eps: f64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Source lines that set a key, as written.
    pub echo: Vec<String>,
}

impl RunConfig {
    pub fn defaults(p: Pipeline) -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::for_pipeline(p),
            train: TrainConfig::for_pipeline(p),
            clips_per_class: 10,
            noise_sigma: 0.03,
            synth_patch: 12,
            domain: 0,
            pixel_format: PixelFormat::U8,
            gradcheck_samples: 60,
            gradcheck_eps: 1e-4,
            data_dir: None,
            out_dir: None,
            checkpoint: None,
            echo: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut pairs: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Failure::Config(format!("line {line}: expected key = value, got {body:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(name, _)| *name == k) {
                return Err(Failure::Config(format!("line {line}: unknown key {k:?}")));
            }
            if let Some((first, ..)) = pairs.iter().find(|(_, pk, _)| *pk == k) {
                return Err(Failure::Config(format!("line {line}: key {k:?} already set on line {first}")));
            }
            pairs.push((line, k, v));
        }
        let pipeline = match pairs.iter().find(|(_, k, _)| *k == "pipeline") {
            Some((line, _, v)) => v
                .parse::<Pipeline>()
                .map_err(|e| Failure::Config(format!("line {line}: {e}")))?,
            None => Pipeline::Drowsy,
        };
        let mut rc = RunConfig::defaults(pipeline);
        for (line, k, v) in &pairs {
            rc.set(k, v).map_err(|m| Failure::Config(format!("line {line}: key {k:?}: {m}")))?;
        }
        rc.echo = text
            .lines()
            .filter(|l| !l.split('#').next().unwrap_or("").trim().is_empty())
            .map(str::to_string)
            .collect();
        Ok(rc)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "pipeline" => {}
            "seed" => self.set_seed(num(v)?),
            "num_classes" => m.num_classes = num(v)?,
            "seq_len" => m.seq_len = num(v)?,
            "height" => m.height = num(v)?,
            "width" => m.width = num(v)?,
            "d_model" => m.d_model = num(v)?,
            "heads" => m.heads = num(v)?,
            "depth" => m.depth = num(v)?,
            "mlp_ratio" => m.mlp_ratio = num(v)?,
            "window" => m.window = triple(v)?,
            "stages" => m.stages = num(v)?,
            "tubelet" => m.tubelet = triple(v)?,
            "feature_dim" => m.feature_dim = num(v)?,
            "dropout" => m.dropout_p = num(v)?,
            "rel_pos_bias" => m.rel_pos_bias = flag(v)?,
            "shift_mask" => m.shift_mask = flag(v)?,
            "pad" => m.pad = flag(v)?,
            "epochs" => t.epochs = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "learning_rate" => t.learning_rate = num(v)?,
            "optimizer" => t.optimizer = v.parse::<OptimizerKind>().map_err(|e| e.to_string())?,
            "split_fraction" => t.split_fraction = num(v)?,
            "log_wall_time" => t.log_wall_time = flag(v)?,
            "clips_per_class" => self.clips_per_class = num(v)?,
            "noise_sigma" => self.noise_sigma = num(v)?,
            "synth_patch" => self.synth_patch = num(v)?,
            "domain" => self.domain = num(v)?,
            "pixel_format" => {
                self.pixel_format = match v {
                    "u8" => PixelFormat::U8,
                    "f64" => PixelFormat::F64,
                    _ => return Err(format!("expected u8 or f64, got {v:?}")),
                }
            }
            "gradcheck_samples" => self.gradcheck_samples = num(v)?,
            "gradcheck_eps" => self.gradcheck_eps = num(v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            _ => unreachable!("keys are checked against KEYS"),
        }
        Ok(())
    }

    /// Model, training and synthetic-data settings checked together.
    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate().map_err(|e| Failure::Config(e.to_string()))?;
        self.train.validate().map_err(|e| Failure::Config(e.to_string()))?;
        if !(self.gradcheck_eps > 0.0 && self.gradcheck_eps.is_finite()) || self.gradcheck_samples == 0 {
            return Err(Failure::Config("gradcheck_eps and gradcheck_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> Result<SyntheticSpec, Failure> {
        let base = SyntheticSpec::for_classes(self.model.num_classes, self.clips_per_class)
            .map_err(|e| Failure::Config(e.to_string()))?;
        let spec = SyntheticSpec {
            seq_len: self.model.seq_len,
            height: self.model.height,
            width: self.model.width,
            patch: self.synth_patch,
            noise_sigma: self.noise_sigma,
            domain: self.domain,
            ..base
        };
        spec.validate().map_err(|e| Failure::Config(e.to_string()))?;
        Ok(spec)
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn triple(v: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = v.split(',').map(|p| num(p.trim())).collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected three comma-separated integers, got {v:?}"))
}
