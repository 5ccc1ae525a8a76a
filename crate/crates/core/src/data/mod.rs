//! Synthetic clip generation, the `SVC1` container, manifests and
//! fixed-length clip sampling.

mod container;
mod manifest;
mod synth;

use std::path::Path;

use rayon::prelude::*;

pub use container::{decode_clip, encode_clip, read_clip, write_clip, PixelFormat, CLIP_MAGIC, CLIP_VERSION};
pub use manifest::{Manifest, ManifestRow, Split, MANIFEST_FILE};
pub use synth::{generate_synthetic, MotionFamily, SyntheticSpec, MIN_SYNTH_SIDE};

use crate::embedding::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sliding windows of `seq_len` frames every `stride` frames over a
/// `[L, H, W, C]` video; a trailing partial window is dropped.
pub fn clip_sample(video: &Tensor, label: usize, source_id: &str, seq_len: usize, stride: usize) -> Result<Vec<VideoClip>> {
    if video.rank() != 4 {
        return Err(Error::Dimension(format!("expected [L, H, W, C] video, got {:?}", video.shape())));
    }
    if seq_len == 0 || stride == 0 {
        return Err(Error::Parameter("seq_len and stride must be positive".into()));
    }
    let len = video.shape()[0];
    if len < seq_len {
        return Err(Error::Precondition(format!("video of {len} frames is shorter than {seq_len}")));
    }
    let frame: usize = video.shape()[1..].iter().product();
    let mut shape = video.shape().to_vec();
    shape[0] = seq_len;
    (0..=len - seq_len)
        .step_by(stride)
        .map(|start| {
            let data = video.data()[start * frame..(start + seq_len) * frame].to_vec();
            VideoClip::new(Tensor::new(&shape, data)?, label, format!("{source_id}@{start}"))
        })
        .collect()
}

/// Writes clips as `clip_NNNNN.svc` plus `manifest.csv` into `dir`.
pub fn write_dataset(dir: &Path, clips: &[VideoClip], format: PixelFormat, splits: Option<&[Split]>) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let rows = clips
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let name = format!("clip_{i:05}.svc");
            write_clip(&dir.join(&name), c, format)?;
            Ok(ManifestRow {
                path: name,
                label: c.label,
                split: splits.map(|s| s[i]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest { rows };
    m.save(&dir.join(MANIFEST_FILE))?;
    Ok(m)
}

/// Loads every clip listed in `dir/manifest.csv`, in manifest order. A
/// clip whose stored label disagrees with the manifest is an error.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<VideoClip>)> {
    let m = Manifest::load(&dir.join(MANIFEST_FILE))?;
    let clips = m
        .rows
        .par_iter()
        .map(|r| {
            let mut c = read_clip(&dir.join(&r.path))?;
            if c.label != r.label {
                return Err(Error::Config(format!(
                    "{}: stored label {} but manifest says {}",
                    r.path, c.label, r.label
                )));
            }
            c.source_id = r.path.clone();
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m, clips))
}
