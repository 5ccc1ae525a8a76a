//! `SWSH` weight checkpoints.
//!
//! Layout (little-endian): magic `SWSH`, u16 version, the configuration
//! record, then tensors until end of file, each as u16 name length, name
//! bytes, u8 rank, u32 extents, f64 data.

use std::fs;
use std::path::Path;

use super::config::{ModelConfig, Pipeline};
use super::weights::Weights;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SWSH";
pub const CHECKPOINT_VERSION: u16 = 1;

fn write_config(w: &mut Writer, c: &ModelConfig) -> Result<()> {
    w.u8(c.pipeline.tag());
    for (v, what) in [
        (c.num_classes, "num_classes"),
        (c.seq_len, "seq_len"),
        (c.height, "height"),
        (c.width, "width"),
        (c.d_model, "d_model"),
        (c.heads, "heads"),
        (c.depth, "depth"),
        (c.mlp_ratio, "mlp_ratio"),
        (c.window[0], "window"),
        (c.window[1], "window"),
        (c.window[2], "window"),
        (c.stages, "stages"),
        (c.tubelet[0], "tubelet"),
        (c.tubelet[1], "tubelet"),
        (c.tubelet[2], "tubelet"),
        (c.feature_dim, "feature_dim"),
    ] {
        w.count(v, what)?;
    }
    w.f64(c.dropout_p);
    w.u8(c.rel_pos_bias as u8);
    w.u8(c.shift_mask as u8);
    w.u8(c.pad as u8);
    w.u64(c.seed);
    Ok(())
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let at = r.offset();
    let tag = r.u8("pipeline")?;
    let pipeline = Pipeline::from_tag(tag).ok_or(Error::Format {
        offset: at,
        message: format!("unknown pipeline tag {tag}"),
    })?;
    let mut n = |what: &str| r.usize32(what);
    let num_classes = n("num_classes")?;
    let seq_len = n("seq_len")?;
    let height = n("height")?;
    let width = n("width")?;
    let d_model = n("d_model")?;
    let heads = n("heads")?;
    let depth = n("depth")?;
    let mlp_ratio = n("mlp_ratio")?;
    let window = [n("window")?, n("window")?, n("window")?];
    let stages = n("stages")?;
    let tubelet = [n("tubelet")?, n("tubelet")?, n("tubelet")?];
    let feature_dim = n("feature_dim")?;
    Ok(ModelConfig {
        pipeline,
        num_classes,
        seq_len,
        height,
        width,
        d_model,
        heads,
        depth,
        mlp_ratio,
        window,
        stages,
        tubelet,
        feature_dim,
        dropout_p: r.f64("dropout_p")?,
        rel_pos_bias: r.bool("rel_pos_bias")?,
        shift_mask: r.bool("shift_mask")?,
        pad: r.bool("pad")?,
        seed: r.u64("seed")?,
    })
}

pub fn encode_checkpoint(cfg: &ModelConfig, weights: &Weights) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    write_config(&mut w, cfg)?;
    for (name, t) in weights.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Parameter(format!("weight name too long: {name}")))?;
        w.u16(len);
        w.bytes(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Parameter(format!("rank of {name} exceeds u8")))?;
        w.u8(rank);
        for &e in t.shape() {
            w.count(e, "extent")?;
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    Ok(w.buf)
}

/// Parses a checkpoint and checks the weights against its configuration.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Weights)> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic (expected SWSH)".into(),
        });
    }
    let at = r.offset();
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: at,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let cfg = read_config(&mut r)?;
    let mut weights = Weights::new();
    while !r.at_end() {
        let len = r.u16("name length")? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                message: "weight name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize32("extent")?);
        }
        let at = r.offset();
        let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or(Error::Format {
            offset: at,
            message: format!("{name}: element count overflows"),
        })?;
        let data = r.f64s(count, &name)?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
            offset: at,
            message: format!("{name}: {e}"),
        })?;
        weights.insert(name, t);
    }
    weights.validate(&cfg)?;
    Ok((cfg, weights))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, weights: &Weights) -> Result<()> {
    fs::write(path, encode_checkpoint(cfg, weights)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Weights)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut cfg = ModelConfig::distracted();
        cfg.seq_len = 4;
        cfg.height = 16;
        cfg.width = 16;
        cfg.window = [2, 2, 2];
        cfg.rel_pos_bias = true;
        cfg.seed = 77;
        cfg.dropout_p = 0.3;
        let w = Weights::init(&cfg).unwrap();
        let bytes = encode_checkpoint(&cfg, &w).unwrap();
        let (c2, w2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert!(w2.bitwise_eq(&w));
        assert_eq!(encode_checkpoint(&c2, &w2).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let cfg = ModelConfig { seq_len: 2, height: 8, width: 8, d_model: 8, feature_dim: 4, ..ModelConfig::drowsy() };
        let w = Weights::init(&cfg).unwrap();
        let bytes = encode_checkpoint(&cfg, &w).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 4, .. })));
        match decode_checkpoint(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, message }) => {
                assert!(offset > 6 && offset < bytes.len() as u64, "{offset}");
                assert!(message.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }
}
