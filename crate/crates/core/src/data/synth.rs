//! Deterministic synthetic clips: a textured patch that moves and/or
//! blinks over a smooth per-clip background, plus pixel noise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::embedding::{VideoClip, CHANNELS};
use crate::error::{Error, Result};
use crate::seed::mix;
use crate::tensor::Tensor;

/// Smallest frame side the generator accepts.
pub const MIN_SYNTH_SIDE: usize = 16;

/// Per-class motion and appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFamily {
    /// Pixels per frame along (x, y), i.e. (width, height).
    pub velocity: (f64, f64),
    /// Frames per blink cycle; 0 disables blinking.
    pub blink_period: usize,
    /// Frames per cycle during which the patch is dimmed.
    pub blink_closed: usize,
    pub texture_seed: u64,
}

impl MotionFamily {
    pub fn moving(angle_deg: f64, speed: f64, texture_seed: u64) -> Self {
        let a = angle_deg.to_radians();
        MotionFamily {
            velocity: (speed * a.cos(), speed * a.sin()),
            blink_period: 0,
            blink_closed: 0,
            texture_seed,
        }
    }

    pub fn blinking(period: usize, closed: usize, drift: (f64, f64), texture_seed: u64) -> Self {
        MotionFamily {
            velocity: drift,
            blink_period: period,
            blink_closed: closed,
            texture_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the square foreground patch in pixels.
    pub patch: usize,
    pub noise_sigma: f64,
    pub families: Vec<MotionFamily>,
    /// Appearance domain mixed into every class texture. Two specs that
    /// differ only here share motion semantics but not textures.
    pub domain: u64,
}

impl SyntheticSpec {
    /// Nine classes: eight directions 45° apart at 2 px/frame, and a
    /// static blinking patch.
    pub fn distracted(clips_per_class: usize) -> Self {
        let mut families: Vec<MotionFamily> = (0..8).map(|k| MotionFamily::moving(45.0 * k as f64, 2.0, 100 + k)).collect();
        families.push(MotionFamily::blinking(8, 3, (0.0, 0.0), 108));
        SyntheticSpec {
            num_classes: 9,
            clips_per_class,
            seq_len: 30,
            height: 64,
            width: 64,
            patch: 12,
            noise_sigma: 0.03,
            families,
            domain: 0,
        }
    }

    /// Two classes: brief infrequent blinks (alert) versus long frequent
    /// closures with a slow downward drift (drowsy).
    pub fn drowsy(clips_per_class: usize) -> Self {
        SyntheticSpec {
            num_classes: 2,
            families: vec![
                MotionFamily::blinking(10, 1, (0.0, 0.0), 200),
                MotionFamily::blinking(15, 6, (0.0, 0.3), 201),
            ],
            ..Self::distracted(clips_per_class)
        }
    }

    pub fn for_classes(num_classes: usize, clips_per_class: usize) -> Result<Self> {
        match num_classes {
            2 => Ok(Self::drowsy(clips_per_class)),
            9 => Ok(Self::distracted(clips_per_class)),
            n => Err(Error::Parameter(format!(
                "no built-in motion families for {n} classes (use 2 or 9)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.height < MIN_SYNTH_SIDE || self.width < MIN_SYNTH_SIDE {
            return bad(format!(
                "frames of {}x{} are below the {MIN_SYNTH_SIDE}x{MIN_SYNTH_SIDE} minimum",
                self.height, self.width
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        if self.num_classes < 2 || self.families.len() != self.num_classes {
            return bad(format!(
                "{} motion families for {} classes",
                self.families.len(),
                self.num_classes
            ));
        }
        if self.seq_len == 0 || self.clips_per_class == 0 {
            return bad("seq_len and clips_per_class must be positive".into());
        }
        if self.patch < 2 || self.patch > self.height.min(self.width) {
            return bad(format!("patch side {} does not fit the frame", self.patch));
        }
        for (i, a) in self.families.iter().enumerate() {
            if a.blink_period > 0 && a.blink_closed >= a.blink_period {
                return bad(format!("class {i}: blink_closed must be below blink_period"));
            }
            for (j, b) in self.families.iter().enumerate().skip(i + 1) {
                if a == b {
                    return bad(format!("classes {i} and {j} share a motion family"));
                }
            }
        }
        Ok(())
    }
}

struct Texture {
    base: [f64; 3],
    freq: (f64, f64),
    phase: [f64; 3],
}

impl Texture {
    /// Hues follow the golden-ratio sequence in `texture_seed`, so classes
    /// with consecutive seeds get well-separated colours; `domain` rotates
    /// every hue by the same random offset.
    fn new(texture_seed: u64, domain: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(texture_seed, &[domain]));
        let offset = if domain == 0 {
            0.0
        } else {
            ChaCha8Rng::seed_from_u64(mix(domain, &[0x6875])).random_range(0.0..1.0)
        };
        let hue = (texture_seed as f64 * GOLDEN + offset).fract();
        Texture {
            base: hsv(hue, 0.75, 0.95),
            // At most one cycle per patch so a 2 px/frame shift never aliases.
            freq: (rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)),
            phase: [0; 3].map(|_| rng.random_range(0.0..TAU)),
        }
    }

    fn at(&self, u: usize, v: usize, side: usize, ch: usize) -> f64 {
        let arg = TAU * (self.freq.0 * u as f64 + self.freq.1 * v as f64) / side as f64 + self.phase[ch];
        self.base[ch] * (0.7 + 0.3 * arg.sin())
    }
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Brightness multiplier of a closed blink.
const BLINK_DIM: f64 = 0.3;

fn render(spec: &SyntheticSpec, class: usize, seed: u64) -> Result<Tensor> {
    let fam = &spec.families[class];
    let tex = Texture::new(fam.texture_seed, spec.domain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, p) = (spec.height, spec.width, spec.patch);

    let fx = rng.random_range(1..=2) as f64;
    let fy = rng.random_range(1..=2) as f64;
    let level = rng.random_range(0.28..0.32);
    let phase = rng.random_range(0.0..TAU);
    let x0 = rng.random_range(0.0..w as f64);
    let y0 = rng.random_range(0.0..h as f64);
    let blink_phase = if fam.blink_period > 0 { rng.random_range(0..fam.blink_period) } else { 0 };

    let mut bg = vec![0.0; h * w * CHANNELS];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..CHANNELS {
                let arg = TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + phase;
                bg[(y * w + x) * CHANNELS + ch] = level + 0.05 * arg.sin();
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let frame_len = h * w * CHANNELS;
    let mut data = vec![0.0; spec.seq_len * frame_len];
    for t in 0..spec.seq_len {
        let frame = &mut data[t * frame_len..(t + 1) * frame_len];
        frame.copy_from_slice(&bg);
        let px = (x0 + fam.velocity.0 * t as f64).floor().rem_euclid(w as f64) as usize;
        let py = (y0 + fam.velocity.1 * t as f64).floor().rem_euclid(h as f64) as usize;
        let closed = fam.blink_period > 0 && (t + blink_phase) % fam.blink_period < fam.blink_closed;
        let gain = if closed { BLINK_DIM } else { 1.0 };
        for v in 0..p {
            for u in 0..p {
                let (y, x) = ((py + v) % h, (px + u) % w);
                for ch in 0..CHANNELS {
                    frame[(y * w + x) * CHANNELS + ch] = gain * tex.at(u, v, p, ch);
                }
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in frame.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        for v in frame.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[spec.seq_len, h, w, CHANNELS], data)
}

/// `clips_per_class` clips for every class, class-major. Each clip is
/// seeded by `mix(seed, [class, index])`, so output does not depend on
/// evaluation order or thread count.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<VideoClip>> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.num_classes)
        .flat_map(|c| (0..spec.clips_per_class).map(move |i| (c, i)))
        .collect();
    jobs.par_iter()
        .map(|&(c, i)| {
            let frames = render(spec, c, mix(seed, &[c as u64, i as u64]))?;
            VideoClip::new(frames, c, format!("synth-c{c}-{i:04}"))
        })
        .collect()
}
