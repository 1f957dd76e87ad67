//! Seeded synthetic textures with controllable repetition.
//!
//! A texture is a blend of a periodic tile (smooth random Fourier modes whose
//! wavelengths divide the tile period) and a non-repeating field built from
//! plane waves with arbitrary orientation and wavelength in the same band.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::imagedata::{Image, CHANNELS};
use crate::seeding::{label_tag, rng_from, Rng};

/// Highest harmonic of the tile period used by the periodic component.
pub const MAX_HARMONIC: i32 = 2;
/// Plane waves in the non-repeating component.
const APERIODIC_WAVES: usize = 24;
const TARGET_STD: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureSpec {
    pub height: usize,
    pub width: usize,
    /// Tile side in pixels.
    pub period: usize,
    /// 1 = exact tiling, 0 = no repetition at all.
    pub regularity: f64,
}

impl TextureSpec {
    pub fn periodic(size: usize, period: usize) -> Self {
        TextureSpec {
            height: size,
            width: size,
            period,
            regularity: 1.0,
        }
    }
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

fn eval(waves: &[Wave], y: f64, x: f64) -> f64 {
    waves
        .iter()
        .map(|w| w.amp * (TAU * (w.fy * y + w.fx * x) + w.phase).cos())
        .sum()
}

fn tile_waves(period: f64, rng: &mut Rng) -> Vec<Wave> {
    let mut waves = Vec::new();
    for ky in -MAX_HARMONIC..=MAX_HARMONIC {
        for kx in 0..=MAX_HARMONIC {
            // half plane: (kx, ky) and (-kx, -ky) give the same cosine family
            if kx == 0 && ky <= 0 {
                continue;
            }
            let norm = ((kx * kx + ky * ky) as f64).sqrt();
            let amp: f64 = StandardNormal.sample(rng);
            waves.push(Wave {
                fy: ky as f64 / period,
                fx: kx as f64 / period,
                phase: rng.gen_range(0.0..TAU),
                amp: amp / norm,
            });
        }
    }
    waves
}

fn free_waves(period: f64, rng: &mut Rng) -> Vec<Wave> {
    (0..APERIODIC_WAVES)
        .map(|_| {
            let f = rng.gen_range(1.0..MAX_HARMONIC as f64) / period;
            let theta = rng.gen_range(0.0..TAU);
            let amp: f64 = StandardNormal.sample(rng);
            Wave {
                fy: f * theta.sin(),
                fx: f * theta.cos(),
                phase: rng.gen_range(0.0..TAU),
                amp: amp / (f * period),
            }
        })
        .collect()
}

/// Rescales a raw field to mean 0.5 and a fixed standard deviation, clamped to [0,1].
fn normalize(field: &[f64]) -> Vec<f32> {
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let s = if std > 0.0 { TARGET_STD / std } else { 0.0 };
    field
        .iter()
        .map(|v| (0.5 + (v - mean) * s).clamp(0.0, 1.0) as f32)
        .collect()
}

pub fn texture(spec: &TextureSpec, seed: u64) -> Result<Image> {
    if spec.height == 0 || spec.width == 0 || spec.period == 0 {
        return Err(Error::Parameter(format!("degenerate texture spec {spec:?}")));
    }
    if !(0.0..=1.0).contains(&spec.regularity) {
        return Err(Error::Parameter(format!("regularity must lie in [0,1], got {}", spec.regularity)));
    }
    let (h, w) = (spec.height, spec.width);
    let period = spec.period as f64;
    let mut channels = Vec::with_capacity(CHANNELS);
    for c in 0..CHANNELS {
        let mut rng = rng_from(seed, &[label_tag("texture"), c as u64]);
        let tile = tile_waves(period, &mut rng);
        let free = free_waves(period, &mut rng);
        let r = spec.regularity;
        let norm_p = tile.iter().map(|w| w.amp * w.amp).sum::<f64>().sqrt().max(1e-12);
        let norm_f = free.iter().map(|w| w.amp * w.amp).sum::<f64>().sqrt().max(1e-12);
        let mut field = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let p = if r > 0.0 { eval(&tile, yf, xf) / norm_p } else { 0.0 };
                let q = if r < 1.0 { eval(&free, yf, xf) / norm_f } else { 0.0 };
                field.push(r * p + (1.0 - r) * q);
            }
        }
        channels.push(normalize(&field));
    }
    Ok(Image::from_fn(h, w, |y, x| {
        let i = y * w + x;
        [channels[0][i], channels[1][i], channels[2][i]]
    }))
}
