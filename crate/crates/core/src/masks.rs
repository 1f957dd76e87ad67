//! Binary hole masks: random boxes, free-form brush strokes, and child masks
//! derived from a parent hole.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::Rng;

/// Maximum number of reject-and-retry attempts for a rate-constrained mask.
pub const MAX_ATTEMPTS: usize = 100;

/// H×W binary mask; 1 marks a hole (invalid pixel), 0 a valid pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Parameter("mask values must be 0 or 1".into()));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }

    /// A mask with a single filled rectangle.
    pub fn rect(height: usize, width: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> Self {
        Mask::from_fn(height, width, |y, x| {
            (y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x)
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_hole(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    fn set(&mut self, y: usize, x: usize) {
        self.data[y * self.width + x] = 1;
    }

    pub fn hole_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Pixelwise OR.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "mask {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Ok(Mask {
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Bounding box of the hole pixels as `(y0, x0, y1, x1)`, inclusive.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_hole(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        bb
    }

    /// Shifts holes by `(dy, dx)`; pixels leaving the frame are dropped.
    pub fn translate(&self, dy: isize, dx: isize) -> Mask {
        let mut out = Mask::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.is_hole(y, x) {
                    continue;
                }
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if (0..self.height as isize).contains(&ny) && (0..self.width as isize).contains(&nx) {
                    out.set(ny as usize, nx as usize);
                }
            }
        }
        out
    }
}

/// Fraction of hole pixels.
pub fn mask_rate(mask: &Mask) -> f64 {
    mask.hole_count() as f64 / (mask.height * mask.width) as f64
}

/// Writes a single-channel PNG: 255 for holes, 0 for valid pixels.
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = mask.data.iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Reads a mask PNG; any gray value ≥ 128 is a hole. Color inputs are reduced to luma first.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = decoded.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|v| (v >= 128) as u8).collect();
    Ok(Mask {
        height: h as usize,
        width: w as usize,
        data,
    })
}

/// Family of a parent mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFamily {
    Irregular,
    Box,
}

impl MaskFamily {
    pub const ALL: [MaskFamily; 2] = [MaskFamily::Irregular, MaskFamily::Box];

    pub fn name(self) -> &'static str {
        match self {
            MaskFamily::Irregular => "irregular",
            MaskFamily::Box => "box",
        }
    }
}

impl fmt::Display for MaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irregular" => Ok(MaskFamily::Irregular),
            "box" => Ok(MaskFamily::Box),
            other => Err(Error::Parameter(format!("unknown mask family '{other}'"))),
        }
    }
}

/// Family a child mask is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChildFamily {
    Box,
    Irregular,
    ParentLike,
}

impl From<MaskFamily> for ChildFamily {
    fn from(f: MaskFamily) -> Self {
        match f {
            MaskFamily::Box => ChildFamily::Box,
            MaskFamily::Irregular => ChildFamily::Irregular,
        }
    }
}

/// Inclusive hole-rate interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRange {
    pub lo: f64,
    pub hi: f64,
}

impl RateRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        RateRange { lo, hi }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo > 0.0 && self.lo <= self.hi && self.hi < 1.0) {
            return Err(Error::Parameter(format!(
                "rate range [{}, {}] must satisfy 0 < lo <= hi < 1",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, rate: f64) -> bool {
        rate >= self.lo && rate <= self.hi
    }
}

impl FromStr for RateRange {
    type Err = Error;

    /// Parses `lo:hi`.
    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| Error::Parameter(format!("rate range '{s}' is not lo:hi")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parameter(format!("bad rate '{v}'")))
        };
        let r = RateRange::new(parse(lo)?, parse(hi)?);
        r.validate()?;
        Ok(r)
    }
}

/// Hole-rate bounds per mask family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    pub irregular: RateRange,
    pub r#box: RateRange,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            irregular: RateRange::new(0.10, 0.30),
            r#box: RateRange::new(0.05, 0.15),
        }
    }
}

impl RateConfig {
    pub fn for_family(&self, family: MaskFamily) -> RateRange {
        match family {
            MaskFamily::Irregular => self.irregular,
            MaskFamily::Box => self.r#box,
        }
    }
}

/// Free-form brush stroke parameters, expressed for a 256-pixel reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrushConfig {
    pub min_strokes: usize,
    pub max_strokes: usize,
    pub min_vertices: usize,
    pub max_vertices: usize,
    pub min_width: f64,
    pub max_width: f64,
    pub max_turn_angle: f64,
    pub max_step: f64,
}

impl Default for BrushConfig {
    fn default() -> Self {
        BrushConfig {
            min_strokes: 1,
            max_strokes: 5,
            min_vertices: 4,
            max_vertices: 12,
            min_width: 12.0,
            max_width: 40.0,
            max_turn_angle: PI / 2.0,
            max_step: 60.0,
        }
    }
}

impl BrushConfig {
    pub const REFERENCE_SIZE: f64 = 256.0;

    pub fn validate(&self) -> Result<()> {
        let ok = self.min_strokes >= 1
            && self.min_strokes <= self.max_strokes
            && self.min_vertices >= 1
            && self.min_vertices <= self.max_vertices
            && self.min_width >= 1.0
            && self.min_width <= self.max_width
            && self.max_turn_angle >= 0.0
            && self.max_step >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid brush config {self:?}")))
        }
    }

    /// Rescales lengths to a frame whose shorter side is `min_side`.
    fn scaled(&self, min_side: usize) -> BrushConfig {
        let s = min_side as f64 / Self::REFERENCE_SIZE;
        BrushConfig {
            min_width: (self.min_width * s).max(1.0),
            max_width: (self.max_width * s).max(1.0),
            max_step: (self.max_step * s).max(1.0),
            ..*self
        }
    }
}

/// One axis-aligned rectangle covering a hole rate in `[rate_lo, rate_hi]`.
pub fn gen_box_mask(h: usize, w: usize, rate_lo: f64, rate_hi: f64, rng: &mut Rng) -> Result<Mask> {
    RateRange::new(rate_lo, rate_hi).validate()?;
    let total = (h * w) as f64;
    // small slack so that exact-rate requests survive float rounding
    let mut amin = (rate_lo * total - 1e-9).ceil().max(1.0) as usize;
    let mut amax = (rate_hi * total + 1e-9).floor() as usize;
    if amin > amax {
        // a degenerate interval between two integers: accept round(target) ± 1 pixel
        let target = (rate_lo * total).round() as usize;
        amin = target.saturating_sub(1).max(1);
        amax = target + 1;
    }
    amax = amax.min(h * w - 1);
    if amin > amax || amin > h * w {
        return Err(Error::Parameter(format!(
            "no integer box area in [{rate_lo}, {rate_hi}] of {h}x{w}"
        )));
    }
    let target = rng.gen_range(amin..=amax) as f64;
    let aspect = (rng.gen_range(-1.0f64..=1.0) * 2f64.ln()).exp();
    let ideal_h = (target * aspect).sqrt();

    // candidate heights ordered by closeness to the ideal, aspect-bounded ones first
    let mut heights: Vec<usize> = (1..=h).collect();
    heights.sort_by(|&a, &b| {
        (a as f64 - ideal_h)
            .abs()
            .partial_cmp(&(b as f64 - ideal_h).abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let pick_width = |bh: usize, bounded: bool| -> Option<usize> {
        let lo = amin.div_ceil(bh).max(1);
        let hi = (amax / bh).min(w);
        let (lo, hi) = if bounded {
            (lo.max(bh.div_ceil(2)), hi.min(bh * 2))
        } else {
            (lo, hi)
        };
        (lo <= hi).then(|| ((target / bh as f64).round() as usize).clamp(lo, hi))
    };
    let dims = heights
        .iter()
        .find_map(|&bh| pick_width(bh, true).map(|bw| (bh, bw)))
        .or_else(|| heights.iter().find_map(|&bh| pick_width(bh, false).map(|bw| (bh, bw))));
    let (bh, bw) = dims.ok_or_else(|| {
        Error::Parameter(format!(
            "no rectangle with hole rate in [{rate_lo}, {rate_hi}] fits {h}x{w}"
        ))
    })?;
    let y0 = rng.gen_range(0..=h - bh);
    let x0 = rng.gen_range(0..=w - bw);
    Ok(Mask::rect(h, w, y0, x0, bh, bw))
}

/// Stamps every pixel within `radius` of the segment `a`–`b`.
fn stamp_segment(mask: &mut Mask, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (h, w) = (mask.height as f64, mask.width as f64);
    let y_lo = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let y_hi = (a.0.max(b.0) + radius).ceil().min(h - 1.0).max(0.0) as usize;
    let x_lo = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let x_hi = (a.1.max(b.1) + radius).ceil().min(w - 1.0).max(0.0) as usize;
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let r2 = radius * radius;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qy, qx) = (a.0 + t * dy - py, a.1 + t * dx - px);
            if qy * qy + qx * qx <= r2 {
                mask.set(y, x);
            }
        }
    }
}

fn draw_stroke(mask: &mut Mask, brush: &BrushConfig, rng: &mut Rng) {
    let (h, w) = (mask.height as f64, mask.width as f64);
    let vertices = rng.gen_range(brush.min_vertices..=brush.max_vertices);
    let width = rng.gen_range(brush.min_width..=brush.max_width);
    let mut p = (rng.gen_range(0.0..h), rng.gen_range(0.0..w));
    let mut heading = rng.gen_range(0.0..2.0 * PI);
    for _ in 0..vertices {
        heading += rng.gen_range(-brush.max_turn_angle..=brush.max_turn_angle);
        let step = rng.gen_range(1.0..=brush.max_step);
        let q = (
            (p.0 + step * heading.sin()).clamp(0.0, h - 1e-6),
            (p.1 + step * heading.cos()).clamp(0.0, w - 1e-6),
        );
        stamp_segment(mask, p, q, width / 2.0);
        p = q;
    }
}

/// Union of random brush strokes with hole rate in `[rate_lo, rate_hi]`.
///
/// Each attempt draws the sampled number of strokes, tops up with extra strokes
/// while below `rate_lo`, and is rejected when it overshoots `rate_hi`.
pub fn gen_irregular_mask(
    h: usize,
    w: usize,
    rate_lo: f64,
    rate_hi: f64,
    brush: &BrushConfig,
    rng: &mut Rng,
) -> Result<Mask> {
    RateRange::new(rate_lo, rate_hi).validate()?;
    brush.validate()?;
    let brush = brush.scaled(h.min(w));
    let total = (h * w) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let mut mask = Mask::zeros(h, w);
        let strokes = rng.gen_range(brush.min_strokes..=brush.max_strokes);
        for _ in 0..strokes {
            draw_stroke(&mut mask, &brush, rng);
        }
        let mut extra = 0;
        while (mask.hole_count() as f64) < rate_lo * total && extra < 4 * brush.max_strokes {
            draw_stroke(&mut mask, &brush, rng);
            extra += 1;
        }
        if RateRange::new(rate_lo, rate_hi).contains(mask_rate(&mask)) {
            return Ok(mask);
        }
    }
    Err(Error::Generation(format!(
        "no {h}x{w} brush mask with rate in [{rate_lo}, {rate_hi}] after {MAX_ATTEMPTS} attempts"
    )))
}

/// Rotates about the center and scales with nearest-neighbor resampling.
///
/// Output pixels whose source falls outside the frame are valid (0).
pub fn transform_mask(mask: &Mask, angle: f64, scale: f64) -> Result<Mask> {
    if !(0.25..=4.0).contains(&scale) {
        return Err(Error::Parameter(format!("scale {scale} outside [0.25, 4]")));
    }
    let (h, w) = mask.dims();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (sin, cos) = angle.sin_cos();
    Ok(Mask::from_fn(h, w, |y, x| {
        let (v, u) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        // inverse map: rotate by -angle, then undo the scale
        let su = (cos * u + sin * v) / scale + cx;
        let sv = (-sin * u + cos * v) / scale + cy;
        let (sx, sy) = (su.floor(), sv.floor());
        sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h && mask.is_hole(sy as usize, sx as usize)
    }))
}

/// Explicit geometry for a parent-like child mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParentLikeTransform {
    pub angle: f64,
    pub scale: f64,
    pub shift: (isize, isize),
}

impl ParentLikeTransform {
    pub const IDENTITY: ParentLikeTransform = ParentLikeTransform {
        angle: 0.0,
        scale: 1.0,
        shift: (0, 0),
    };
}

/// Applies rotation, scaling and a translation to the parent mask.
pub fn parent_like_mask(parent: &Mask, t: ParentLikeTransform) -> Result<Mask> {
    Ok(transform_mask(parent, t.angle, t.scale)?.translate(t.shift.0, t.shift.1))
}

fn sample_parent_like(parent: &Mask, rng: &mut Rng) -> Result<Mask> {
    let (h, w) = parent.dims();
    for _ in 0..MAX_ATTEMPTS {
        let angle = rng.gen_range(0.0..2.0 * PI);
        let scale = rng.gen_range(0.7..=1.3);
        let rotated = transform_mask(parent, angle, scale)?;
        let Some((y0, x0, y1, x1)) = rotated.bounding_box() else {
            continue;
        };
        // keep the hole inside the frame when it fits, otherwise leave it in place
        let shift_range = |lo: usize, hi: usize, n: usize| -> (isize, isize) {
            let a = -(lo as isize);
            let b = (n - 1 - hi) as isize;
            (a.min(0), b.max(0))
        };
        let (ya, yb) = shift_range(y0, y1, h);
        let (xa, xb) = shift_range(x0, x1, w);
        let shifted = rotated.translate(rng.gen_range(ya..=yb), rng.gen_range(xa..=xb));
        let rate = mask_rate(&shifted);
        if rate > 0.0 && rate < 1.0 {
            return Ok(shifted);
        }
    }
    Err(Error::Generation(
        "parent-like child mask degenerate after repeated attempts".into(),
    ))
}

/// Samples a child mask for a parent. The parent is only read.
pub fn derive_child_mask(
    parent: &Mask,
    family: ChildFamily,
    rates: &RateConfig,
    brush: &BrushConfig,
    rng: &mut Rng,
) -> Result<Mask> {
    let (h, w) = parent.dims();
    match family {
        ChildFamily::Box => gen_box_mask(h, w, rates.r#box.lo, rates.r#box.hi, rng),
        ChildFamily::Irregular => gen_irregular_mask(h, w, rates.irregular.lo, rates.irregular.hi, brush, rng),
        ChildFamily::ParentLike => sample_parent_like(parent, rng),
    }
}

/// Samples a parent mask of the given family.
pub fn gen_parent_mask(
    h: usize,
    w: usize,
    family: MaskFamily,
    rates: &RateConfig,
    brush: &BrushConfig,
    rng: &mut Rng,
) -> Result<Mask> {
    let r = rates.for_family(family);
    match family {
        MaskFamily::Box => gen_box_mask(h, w, r.lo, r.hi, rng),
        MaskFamily::Irregular => gen_irregular_mask(h, w, r.lo, r.hi, brush, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    #[test]
    fn rates_of_simple_masks() {
        assert_eq!(mask_rate(&Mask::zeros(4, 4)), 0.0);
        assert_eq!(mask_rate(&Mask::ones(4, 4)), 1.0);
        assert_eq!(mask_rate(&Mask::rect(16, 16, 3, 5, 8, 8)), 0.25);
    }

    #[test]
    fn exact_rate_box_is_square() {
        for seed in 0..20 {
            let m = gen_box_mask(16, 16, 0.25, 0.25, &mut rng(seed)).unwrap();
            let (y0, x0, y1, x1) = m.bounding_box().unwrap();
            assert_eq!((y1 - y0 + 1, x1 - x0 + 1), (8, 8));
            assert_eq!(m.hole_count(), 64);
        }
    }

    #[test]
    fn exact_rate_box_hits_target_area() {
        for seed in 0..50 {
            let m = gen_box_mask(64, 48, 0.1, 0.1, &mut rng(seed)).unwrap();
            let target = (0.1f64 * 64.0 * 48.0).round() as isize;
            assert!((m.hole_count() as isize - target).abs() <= 1);
        }
    }

    #[test]
    fn box_mask_is_one_rectangle() {
        let m = gen_box_mask(40, 30, 0.05, 0.15, &mut rng(3)).unwrap();
        let (y0, x0, y1, x1) = m.bounding_box().unwrap();
        assert_eq!(m.hole_count(), (y1 - y0 + 1) * (x1 - x0 + 1));
    }

    #[test]
    fn infeasible_box_rates() {
        assert!(matches!(gen_box_mask(1, 1, 0.5, 0.5, &mut rng(0)), Err(Error::Parameter(_))));
        assert!(matches!(gen_box_mask(4, 4, 0.0, 0.3, &mut rng(0)), Err(Error::Parameter(_))));
        assert!(matches!(gen_box_mask(4, 4, 0.5, 0.2, &mut rng(0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(
            gen_box_mask(32, 32, 0.05, 0.15, &mut rng(9)).unwrap(),
            gen_box_mask(32, 32, 0.05, 0.15, &mut rng(9)).unwrap()
        );
        let b = BrushConfig::default();
        assert_eq!(
            gen_irregular_mask(64, 64, 0.1, 0.3, &b, &mut rng(9)).unwrap(),
            gen_irregular_mask(64, 64, 0.1, 0.3, &b, &mut rng(9)).unwrap()
        );
    }

    #[test]
    fn unreachable_irregular_rate_fails() {
        let b = BrushConfig {
            min_width: 1.0,
            max_width: 1.0,
            max_strokes: 1,
            max_vertices: 1,
            min_vertices: 1,
            max_step: 1.0,
            ..BrushConfig::default()
        };
        let err = gen_irregular_mask(256, 256, 0.9, 0.95, &b, &mut rng(1)).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn transform_identity_and_half_rotation() {
        let m = gen_irregular_mask(33, 40, 0.1, 0.3, &BrushConfig::default(), &mut rng(2)).unwrap();
        assert_eq!(transform_mask(&m, 0.0, 1.0).unwrap(), m);

        let sym = Mask::from_fn(20, 30, |y, x| (y + x) % 7 == 0 || (19 - y + 29 - x) % 7 == 0);
        assert_eq!(transform_mask(&sym, PI, 1.0).unwrap(), sym);
    }

    #[test]
    fn transform_full_frame_half_scale() {
        let full = Mask::ones(64, 64);
        let rate = mask_rate(&transform_mask(&full, 0.0, 0.5).unwrap());
        assert!((rate - 0.25).abs() <= 0.02, "{rate}");
        assert!(transform_mask(&full, 0.0, 0.1).is_err());
    }

    #[test]
    fn parent_like_identity_and_purity() {
        let parent = Mask::rect(32, 32, 4, 6, 10, 7);
        let snapshot = parent.clone();
        assert_eq!(parent_like_mask(&parent, ParentLikeTransform::IDENTITY).unwrap(), parent);
        let rates = RateConfig::default();
        let brush = BrushConfig::default();
        let a = derive_child_mask(&parent, ChildFamily::ParentLike, &rates, &brush, &mut rng(4)).unwrap();
        let b = derive_child_mask(&parent, ChildFamily::ParentLike, &rates, &brush, &mut rng(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.hole_count() > 0);
        assert_eq!(parent, snapshot);
    }

    #[test]
    fn box_child_meets_box_rates() {
        let parent = Mask::rect(64, 64, 10, 10, 20, 20);
        for seed in 0..50 {
            let m = derive_child_mask(
                &parent,
                ChildFamily::Box,
                &RateConfig::default(),
                &BrushConfig::default(),
                &mut rng(seed),
            )
            .unwrap();
            assert!(RateRange::new(0.05, 0.15).contains(mask_rate(&m)));
        }
    }

    #[test]
    fn mask_png_round_trip_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::rect(9, 7, 1, 2, 3, 4);
        let p = dir.path().join("m.png");
        save_mask(&m, &p).unwrap();
        let raw = image::open(&p).unwrap().to_luma8();
        assert!(raw.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));
        assert_eq!(load_mask(&p).unwrap(), m);

        let q = dir.path().join("t.png");
        image::GrayImage::from_raw(3, 1, vec![127, 128, 200]).unwrap().save(&q).unwrap();
        assert_eq!(load_mask(&q).unwrap().data(), &[0, 1, 1]);
    }

    #[test]
    fn rate_range_parsing() {
        let r: RateRange = "0.10:0.30".parse().unwrap();
        assert_eq!(r, RateRange::new(0.1, 0.3));
        assert!("0.3".parse::<RateRange>().is_err());
        assert!("0.5:0.2".parse::<RateRange>().is_err());
    }
}
