//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tta_inpaint::degrade::{apply_mask, make_training_batch, ChildSampler};
use tta_inpaint::generator::{concat_input, tensor_to_image, Architecture, GeneratorParams, ParamGrads};
use tta_inpaint::masks::{Mask, MaskFamily};
use tta_inpaint::optimize::{batch_tta_loss, tta_loss, LossReduction};
use tta_inpaint::tensor::Tensor;
use tta_inpaint::Image;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

pub fn random_mask(h: usize, w: usize, p: f64, rng: &mut ChaCha8Rng) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.gen_bool(p))
}

/// Denominator floor for relative gradient errors. A central difference of an
/// O(0.1) loss at eps = 1e-3 in f32 resolves about 2^-24 * 0.1 / 1e-3 ≈ 6e-6,
/// so gradients below 1e-3 are compared with an absolute tolerance of 1e-5.
pub const GRAD_FLOOR: f64 = 1e-3;

/// One checked parameter.
#[derive(Debug, Clone)]
pub struct GradSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// A train-mode batch of doubly degraded inputs for one degraded image.
pub struct GradProblem {
    pub params: GeneratorParams,
    pub input: Tensor,
    pub x_d: Image,
    pub parent: Mask,
}

impl GradProblem {
    pub fn new(arch: Architecture, size: usize, batch: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let smooth = Image::from_fn(size, size, |y, x| {
            let (fy, fx) = (y as f32 / size as f32, x as f32 / size as f32);
            [
                0.5 + 0.3 * (6.0 * fx + 1.0).sin(),
                0.5 + 0.3 * (5.0 * fy - 2.0).cos(),
                0.5 + 0.2 * (4.0 * (fx + fy)).sin(),
            ]
        });
        let q = size / 4;
        let parent = Mask::rect(size, size, q, q, q, q + 1);
        let x_d = apply_mask(&smooth, &parent).unwrap();
        let sampler = ChildSampler::new(MaskFamily::Box, 0.5);
        let pairs = make_training_batch(&x_d, &parent, batch, &sampler, &mut r).unwrap();
        let inputs: Vec<Tensor> = pairs
            .iter()
            .map(|p| concat_input(&p.degraded, &p.child).unwrap())
            .collect();
        GradProblem {
            params: GeneratorParams::init(arch, seed).unwrap(),
            input: Tensor::stack(&inputs).unwrap(),
            x_d,
            parent,
        }
    }

    /// Batch-mean `tta_loss`, evaluated through images with f64 accumulation.
    pub fn loss(&self, params: &GeneratorParams) -> f64 {
        self.evaluate(params).0
    }

    /// Loss plus the piece of the piecewise-smooth loss surface it lies on:
    /// rectifier signs and the signs of the valid-pixel L1 residuals.
    fn evaluate(&self, params: &GeneratorParams) -> (f64, Piece) {
        let mut p = params.clone();
        let (out, tape) = p.forward_train(&self.input).unwrap();
        let mut signs = Vec::new();
        let mut loss = 0.0;
        for i in 0..out.n {
            let pred = tensor_to_image(&out, i).unwrap();
            loss += tta_loss(&pred, &self.x_d, &self.parent).unwrap();
            let masked = apply_mask(&pred, &self.parent).unwrap();
            signs.extend(masked.data().iter().zip(self.x_d.data()).map(|(a, b)| {
                let d = a - b;
                (d > 0.0) as i8 - (d < 0.0) as i8
            }));
        }
        (loss / out.n as f64, (p.relu_pattern(&tape), signs))
    }

    /// Analytic gradients of every learnable tensor at the current parameters.
    pub fn analytic(&self) -> ParamGrads {
        let mut p = self.params.clone();
        let (out, tape) = p.forward_train(&self.input).unwrap();
        let (_, g) = batch_tta_loss(&out, &self.x_d, &self.parent, LossReduction::MeanAll).unwrap();
        self.params.backward(&tape, &g).unwrap()
    }

    /// Central difference for one parameter, or `None` when one of the ±eps
    /// probes leaves the linear piece of a ReLU or L1 kink: the difference
    /// quotient does not approximate a derivative there.
    pub fn probe(&self, grads: &ParamGrads, base: &Piece, tensor: usize, index: usize, eps: f32) -> Option<GradSample> {
        let mut plus = self.params.clone();
        plus.tensors_mut()[tensor].data[index] += eps;
        let mut minus = self.params.clone();
        minus.tensors_mut()[tensor].data[index] -= eps;
        let (lp, piece_p) = self.evaluate(&plus);
        let (lm, piece_m) = self.evaluate(&minus);
        (piece_p == *base && piece_m == *base).then(|| GradSample {
            tensor: self.params.tensors()[tensor].name.clone(),
            index,
            analytic: grads.0[tensor][index] as f64,
            numeric: (lp - lm) / (2.0 * eps as f64),
        })
    }

    pub fn base_piece(&self) -> Piece {
        self.evaluate(&self.params).1
    }

    pub fn learnable(&self) -> Vec<usize> {
        self.params
            .tensors()
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role.is_learnable())
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks `count` parameters against central differences. Tensors are
    /// picked uniformly so every layer kind is exercised, then an index within.
    /// Draws that straddle a kink are rejected and redrawn.
    pub fn check(&self, count: usize, eps: f32, seed: u64) -> GradCheck {
        let grads = self.analytic();
        let base = self.base_piece();
        let learnable = self.learnable();
        let mut r = rng(seed);
        let mut result = GradCheck::default();
        while result.samples.len() < count && result.rejected < 20 * count {
            let ti = learnable[r.gen_range(0..learnable.len())];
            let k = r.gen_range(0..self.params.tensors()[ti].data.len());
            match self.probe(&grads, &base, ti, k, eps) {
                Some(s) => result.samples.push(s),
                None => result.rejected += 1,
            }
        }
        result
    }
}

/// Rectifier signs and valid-pixel L1 residual signs of one evaluation.
pub type Piece = (Vec<bool>, Vec<i8>);

#[derive(Debug, Default)]
pub struct GradCheck {
    pub samples: Vec<GradSample>,
    /// Draws discarded because a probe crossed a kink.
    pub rejected: usize,
}

/// Gaussian feature grid of `c` channels over `h × w` positions.
pub fn random_features(c: usize, h: usize, w: usize, seed: u64) -> tta_inpaint::metrics::FeatureMap {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    let data = (0..c * h * w).map(|_| StandardNormal.sample(&mut r)).collect();
    tta_inpaint::metrics::FeatureMap::new(c, h, w, data, "random").unwrap()
}

/// Writes `count` seeded periodic textures as PNGs named `tex00.png`, ...
pub fn write_textures(dir: &std::path::Path, count: usize, size: usize, period: usize) {
    use tta_inpaint::synth::{texture, TextureSpec};
    for i in 0..count {
        let img = texture(&TextureSpec::periodic(size, period), i as u64).unwrap();
        tta_inpaint::imagedata::save_image(&img, dir.join(format!("tex{i:02}.png"))).unwrap();
    }
}
