//! `SVC1` clip container.
//!
//! Layout (little-endian): magic `SVC1`, u16 version, u32 T, H, W, C,
//! u8 dtype, u32 label, then row-major `(t, h, w, c)` pixels as u8
//! (value·255, rounded) or f64.

use std::fs;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::embedding::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"SVC1";
pub const CLIP_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelFormat {
    /// One byte per pixel, `round(v·255)`.
    #[default]
    U8,
    /// Raw f64, bit-exact.
    F64,
}

impl PixelFormat {
    fn tag(self) -> u8 {
        match self {
            PixelFormat::U8 => 0,
            PixelFormat::F64 => 1,
        }
    }
}

pub fn encode_clip(clip: &VideoClip, format: PixelFormat) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(CLIP_MAGIC);
    w.u16(CLIP_VERSION);
    for &e in clip.frames.shape() {
        w.count(e, "extent")?;
    }
    w.u8(format.tag());
    w.count(clip.label, "label")?;
    match format {
        PixelFormat::U8 => w.buf.extend(clip.frames.data().iter().map(|v| (v * 255.0).round() as u8)),
        PixelFormat::F64 => clip.frames.data().iter().for_each(|&v| w.f64(v)),
    }
    Ok(w.buf)
}

/// Parses a clip; `source_id` is attached to the result.
pub fn decode_clip(bytes: &[u8], source_id: &str) -> Result<VideoClip> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CLIP_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic (expected SVC1)".into(),
        });
    }
    let at = r.offset();
    let version = r.u16("version")?;
    if version != CLIP_VERSION {
        return Err(Error::Format {
            offset: at,
            message: format!("unsupported clip version {version}"),
        });
    }
    let mut shape = [0usize; 4];
    for e in shape.iter_mut() {
        *e = r.usize32("extent")?;
    }
    let at = r.offset();
    let tag = r.u8("dtype")?;
    let label = r.usize32("label")?;
    let n: usize = shape.iter().product();
    let data = match tag {
        0 => r.take(n, "pixels")?.iter().map(|&b| b as f64 / 255.0).collect(),
        1 => r.f64s(n, "pixels")?,
        t => {
            return Err(Error::Format {
                offset: at,
                message: format!("unknown dtype tag {t}"),
            })
        }
    };
    if !r.at_end() {
        return r.fail("trailing bytes after pixel payload");
    }
    let frames = Tensor::new(&shape, data).map_err(|e| Error::Format {
        offset: 6,
        message: e.to_string(),
    })?;
    VideoClip::new(frames, label, source_id).map_err(|e| Error::Format {
        offset: 0,
        message: e.to_string(),
    })
}

pub fn write_clip(path: &Path, clip: &VideoClip, format: PixelFormat) -> Result<()> {
    fs::write(path, encode_clip(clip, format)?)?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    decode_clip(&fs::read(path)?, &path.to_string_lossy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Tensor::from_fn(&[3, 5, 4, 3], |_| rng.random_range(0.0..=1.0)).unwrap();
        VideoClip::new(frames, 7, "x").unwrap()
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let clip = random_clip(1);
        let back = decode_clip(&encode_clip(&clip, PixelFormat::F64).unwrap(), "x").unwrap();
        assert!(back.frames.bitwise_eq(&clip.frames));
        assert_eq!(back.label, 7);
    }

    #[test]
    fn u8_quantization_error_is_bounded() {
        let clip = random_clip(2);
        let back = decode_clip(&encode_clip(&clip, PixelFormat::U8).unwrap(), "x").unwrap();
        let worst = back.frames.max_abs_diff(&clip.frames);
        assert!(worst <= 1.0 / 510.0 + 1e-15, "{worst}");
    }

    #[test]
    fn corrupt_input_names_offset() {
        let clip = random_clip(3);
        let bytes = encode_clip(&clip, PixelFormat::U8).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_clip(&bad, "x"), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_clip(&bad, "x"), Err(Error::Format { offset: 4, .. })));
        let mut bad = bytes.clone();
        bad[22] = 5;
        assert!(matches!(decode_clip(&bad, "x"), Err(Error::Format { offset: 22, .. })));
        match decode_clip(&bytes[..40], "x") {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 27);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_clip(&long, "x"), Err(Error::Format { .. })));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.svc");
        let clip = random_clip(4);
        write_clip(&p, &clip, PixelFormat::F64).unwrap();
        assert!(read_clip(&p).unwrap().frames.bitwise_eq(&clip.frames));
    }
}
