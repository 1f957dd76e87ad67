//! PSNR, SSIM, feature-space perceptual distance and the internal-similarity
//! score, plus the per-image/aggregate report.

mod report;
mod vgg;

pub use report::{Aggregate, Failure, MetricEntry, MetricReport, REPORT_VERSION};
pub use vgg::Vgg19Extractor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::imagedata::{Image, CHANNELS};
use crate::masks::Mask;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// `10·log10(1/MSE)` over all pixels and channels; identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(psnr_from_mse(se / a.data().len() as f64))
}

/// PSNR restricted to the pixels where `region` is set.
pub fn psnr_in(a: &Image, b: &Image, region: &Mask) -> Result<f64> {
    check_same(a, b)?;
    crate::degrade::check_dims(a, region)?;
    let mut se = 0.0f64;
    let mut n = 0usize;
    for ((pa, pb), &m) in a
        .data()
        .chunks_exact(CHANNELS)
        .zip(b.data().chunks_exact(CHANNELS))
        .zip(region.data())
    {
        if m != 0 {
            se += pa.iter().zip(pb).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>();
            n += CHANNELS;
        }
    }
    if n == 0 {
        return Err(Error::Parameter("PSNR region is empty".into()));
    }
    Ok(psnr_from_mse(se / n as f64))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" Gaussian filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|k| win[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * wo + x]).sum();
        }
    }
    out
}

/// Local SSIM per window position (`(H−10)×(W−10)`), averaged over channels.
pub fn ssim_map(a: &Image, b: &Image) -> Result<(usize, usize, Vec<f64>)> {
    check_same(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut map = vec![0.0; ho * wo];
    for c in 0..CHANNELS {
        let pa: Vec<f64> = a.data().iter().skip(c).step_by(CHANNELS).map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data().iter().skip(c).step_by(CHANNELS).map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &win);
        let mu_b = filter_valid(&pb, h, w, &win);
        let aa = filter_valid(&prod(&pa, &pa), h, w, &win);
        let bb = filter_valid(&prod(&pb, &pb), h, w, &win);
        let ab = filter_valid(&prod(&pa, &pb), h, w, &win);
        for i in 0..ho * wo {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            map[i] += s / CHANNELS as f64;
        }
    }
    Ok((ho, wo, map))
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, dynamic range 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (_, _, map) = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Mean local SSIM over windows whose center lies inside `region`.
pub fn ssim_in(a: &Image, b: &Image, region: &Mask) -> Result<f64> {
    crate::degrade::check_dims(a, region)?;
    let (ho, wo, map) = ssim_map(a, b)?;
    let r = SSIM_WINDOW / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..ho {
        for x in 0..wo {
            if region.is_hole(y + r, x + r) {
                sum += map[y * wo + x];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Parameter("SSIM region has no window centers".into()));
    }
    Ok(sum / n as f64)
}

/// A `C×H×W` grid of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major values.
    pub data: Vec<f32>,
    /// Extractor and layer that produced the map.
    pub source: String,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>, source: impl Into<String>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!("empty feature map {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature map holds non-finite values".into()));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
            source: source.into(),
        })
    }

    /// Feature vector at spatial position `p` (row-major).
    pub fn vector(&self, p: usize) -> Vec<f32> {
        let plane = self.height * self.width;
        (0..self.channels).map(|c| self.data[c * plane + p]).collect()
    }
}

pub trait FeatureExtractor {
    fn id(&self) -> &str;
    fn extract(&self, image: &Image) -> Result<FeatureMap>;
}

/// Deterministic patch features: each non-overlapping 8×8 luminance patch is
/// mean-centered and multiplied by a fixed Gaussian random matrix.
#[derive(Debug, Clone)]
pub struct StubExtractor {
    pub patch: usize,
    pub dims: usize,
    projection: Vec<f32>,
    id: String,
}

impl StubExtractor {
    pub const DEFAULT_SEED: u64 = 0x5eed;

    pub fn new(patch: usize, dims: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / ((patch * patch) as f32).sqrt();
        let projection = (0..dims * patch * patch)
            .map(|_| {
                let v: f32 = StandardNormal.sample(&mut rng);
                v * scale
            })
            .collect();
        StubExtractor {
            patch,
            dims,
            projection,
            id: format!("stub-patch{patch}-d{dims}-s{seed}"),
        }
    }
}

impl Default for StubExtractor {
    fn default() -> Self {
        StubExtractor::new(8, 16, Self::DEFAULT_SEED)
    }
}

impl FeatureExtractor for StubExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn extract(&self, image: &Image) -> Result<FeatureMap> {
        let (h, w) = image.dims();
        let p = self.patch;
        let (gh, gw) = (h / p, w / p);
        if gh == 0 || gw == 0 {
            return Err(Error::Size(format!("image {h}x{w} smaller than one {p}x{p} patch")));
        }
        let plane = gh * gw;
        let mut data = vec![0.0f32; self.dims * plane];
        let mut patch = vec![0.0f32; p * p];
        for gy in 0..gh {
            for gx in 0..gw {
                for y in 0..p {
                    for x in 0..p {
                        patch[y * p + x] = image.luminance(gy * p + y, gx * p + x);
                    }
                }
                let mean = patch.iter().map(|&v| v as f64).sum::<f64>() / patch.len() as f64;
                patch.iter_mut().for_each(|v| *v = (*v as f64 - mean) as f32);
                for d in 0..self.dims {
                    let row = &self.projection[d * p * p..(d + 1) * p * p];
                    data[d * plane + gy * gw + gx] = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                }
            }
        }
        FeatureMap::new(self.dims, gh, gw, data, self.id.clone())
    }
}

/// Mean absolute feature difference under `backend`; `None` means no backend is configured.
pub fn perceptual_distance(a: &Image, b: &Image, backend: Option<&dyn FeatureExtractor>) -> Result<f64> {
    check_same(a, b)?;
    let backend = backend.ok_or_else(|| Error::BackendUnavailable("no perceptual backend configured".into()))?;
    let fa = backend.extract(a)?;
    let fb = backend.extract(b)?;
    Ok(feature_l1(&fa, &fb))
}

fn feature_l1(fa: &FeatureMap, fb: &FeatureMap) -> f64 {
    fa.data
        .iter()
        .zip(&fb.data)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / fa.data.len() as f64
}

/// Mean of the `HW×HW` cosine-similarity map between spatial feature vectors,
/// self-pairs included. A zero vector has cosine 0 with everything.
///
/// The mean over all pairs of `û_i·û_j` equals `|Σ û_i|² / N²`, so the map is
/// never materialized.
pub fn internal_similarity(features: &FeatureMap) -> f64 {
    let n = features.height * features.width;
    let mut sum = vec![0.0f64; features.channels];
    for p in 0..n {
        let v = features.vector(p);
        let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (s, &x) in sum.iter_mut().zip(&v) {
                *s += x as f64 / norm;
            }
        }
    }
    sum.iter().map(|s| s * s).sum::<f64>() / (n * n) as f64
}

/// Scores a prediction against its ground truth. Metrics cover the full image
/// unless `region` is given, in which case PSNR/SSIM are restricted to it.
pub fn score_image(
    image_id: &str,
    gt: &Image,
    pred: &Image,
    extractor: &dyn FeatureExtractor,
    backend: Option<&dyn FeatureExtractor>,
    region: Option<&Mask>,
) -> Result<MetricEntry> {
    check_same(gt, pred)?;
    let (psnr_v, ssim_v) = match region {
        Some(r) => (psnr_in(gt, pred, r)?, ssim_in(gt, pred, r)?),
        None => (psnr(gt, pred)?, ssim(gt, pred)?),
    };
    let perceptual = match perceptual_distance(gt, pred, backend) {
        Ok(d) => Some(d),
        Err(Error::BackendUnavailable(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricEntry {
        image_id: image_id.to_string(),
        family: None,
        mode: None,
        psnr: psnr_v,
        ssim: ssim_v,
        perceptual,
        internal_similarity: internal_similarity(&extractor.extract(gt)?),
        baseline_psnr: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        Image::from_fn(h, w, |_, _| {
            let mut next = || {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 40) as f32 / (1u64 << 24) as f32
            };
            [next(), next(), next()]
        })
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(16, 16, 0.2);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(16, 16, 0.3);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        assert!(psnr(&Image::filled(8, 8, 0.0), &Image::filled(8, 8, 1.0)).unwrap().abs() < 1e-9);
        assert!(psnr(&a, &Image::filled(8, 16, 0.2)).is_err());
    }

    #[test]
    fn psnr_decreases_with_difference() {
        let a = Image::filled(8, 8, 0.0);
        let mut last = f64::INFINITY;
        for k in 1..20 {
            let p = psnr(&a, &Image::filled(8, 8, k as f32 / 20.0)).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn psnr_region() {
        let a = Image::filled(8, 8, 0.5);
        let mut b = a.clone();
        b.data_mut()[..3].fill(0.6);
        let region = Mask::rect(8, 8, 0, 0, 1, 1);
        assert!((psnr_in(&a, &b, &region).unwrap() - 20.0).abs() < 1e-4);
        assert_eq!(psnr_in(&a, &b, &Mask::rect(8, 8, 4, 4, 2, 2)).unwrap(), f64::INFINITY);
        assert!(psnr_in(&a, &b, &Mask::zeros(8, 8)).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_size() {
        let a = noise(24, 20, 1);
        let b = noise(24, 20, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&a, &b).unwrap() < 0.5);
        assert!(matches!(ssim(&noise(10, 20, 1), &noise(10, 20, 1)), Err(Error::Size(_))));
    }

    #[test]
    fn ssim_of_constants_is_luminance_term() {
        let (c1, c2) = (0.25f64, 0.75f64);
        let got = ssim(&Image::filled(16, 16, c1 as f32), &Image::filled(16, 16, c2 as f32)).unwrap();
        let k = (SSIM_K1 * SSIM_K1) as f64;
        let want = (2.0 * c1 * c2 + k) / (c1 * c1 + c2 * c2 + k);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!(got < 1.0);
    }

    #[test]
    fn gaussian_window_is_normalized() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w[0], w[10]);
    }

    fn grid(c: usize, h: usize, w: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new(c, h, w, data, "test").unwrap()
    }

    #[test]
    fn internal_similarity_simple_cases() {
        let same = grid(2, 2, 2, vec![1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0]);
        assert!((internal_similarity(&same) - 1.0).abs() < 1e-12);
        let ortho = grid(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(internal_similarity(&ortho), 0.5);
        let zeros = grid(2, 1, 2, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(internal_similarity(&zeros), 0.25);
        assert!(FeatureMap::new(0, 1, 1, vec![], "x").is_err());
        assert!(FeatureMap::new(1, 1, 2, vec![1.0], "x").is_err());
    }

    #[test]
    fn stub_extractor_shapes_and_determinism() {
        let ex = StubExtractor::default();
        let img = noise(32, 24, 3);
        let f = ex.extract(&img).unwrap();
        assert_eq!((f.channels, f.height, f.width), (16, 4, 3));
        assert_eq!(f, StubExtractor::default().extract(&img).unwrap());
        assert!(ex.extract(&Image::filled(4, 16, 0.1)).is_err());
        let flat = ex.extract(&Image::filled(16, 16, 0.7)).unwrap();
        assert!(flat.data.iter().all(|&v| v == 0.0));
        assert_eq!(internal_similarity(&flat), 0.0);
    }

    /// Identity-projection stub on 1-pixel patches: the distance is hand computable.
    struct Luma;

    impl FeatureExtractor for Luma {
        fn id(&self) -> &str {
            "luma"
        }
        fn extract(&self, image: &Image) -> Result<FeatureMap> {
            let (h, w) = image.dims();
            let data = (0..h * w).map(|p| image.luminance(p / w, p % w)).collect();
            FeatureMap::new(1, h, w, data, "luma")
        }
    }

    #[test]
    fn perceptual_stub_values() {
        let a = Image::filled(2, 2, 0.2);
        let b = Image::from_fn(2, 2, |y, _| if y == 0 { [0.2; 3] } else { [0.6; 3] });
        let d = perceptual_distance(&a, &b, Some(&Luma)).unwrap();
        assert!((d - 0.2).abs() < 1e-6, "{d}");
        assert_eq!(d, perceptual_distance(&b, &a, Some(&Luma)).unwrap());
        assert_eq!(perceptual_distance(&a, &a, Some(&Luma)).unwrap(), 0.0);
        assert!(matches!(perceptual_distance(&a, &b, None), Err(Error::BackendUnavailable(_))));
        let stub = StubExtractor::default();
        let (x, y) = (noise(16, 16, 4), noise(16, 16, 5));
        let d1 = perceptual_distance(&x, &y, Some(&stub)).unwrap();
        assert!(d1 > 0.0 && d1 == perceptual_distance(&y, &x, Some(&stub)).unwrap());
    }

    #[test]
    fn score_identity() {
        let gt = noise(16, 16, 9);
        let stub = StubExtractor::default();
        let e = score_image("a", &gt, &gt, &stub, Some(&stub), None).unwrap();
        assert_eq!(e.psnr, f64::INFINITY);
        assert!((e.ssim - 1.0).abs() < 1e-9);
        assert_eq!(e.perceptual, Some(0.0));
        let skipped = score_image("a", &gt, &gt, &stub, None, None).unwrap();
        assert_eq!(skipped.perceptual, None);
        assert_eq!(skipped.internal_similarity, e.internal_similarity);
    }
}
