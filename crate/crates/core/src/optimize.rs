//! Self-supervised L1 loss, Adam, the per-image adaptation loop, inference and
//! small-scale pre-training.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::degrade::{self, apply_mask, make_training_batch, ChildSampler};
use crate::error::{Error, Result};
use crate::generator::{concat_input, tensor_to_image, GeneratorParams, ParamGrads};
use crate::imagedata::{Image, CHANNELS};
use crate::masks::{gen_parent_mask, BrushConfig, Mask, MaskFamily, RateConfig};
use crate::seeding::{label_tag, rng_from};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    /// Start from pre-trained weights.
    AdaFill,
    /// Start from a fresh initialization.
    ZeroFill,
}

impl AdaptMode {
    pub fn default_iterations(self) -> usize {
        match self {
            AdaptMode::AdaFill => 1000,
            AdaptMode::ZeroFill => 5000,
        }
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptMode::AdaFill => "adafill",
            AdaptMode::ZeroFill => "zerofill",
        })
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adafill" => Ok(AdaptMode::AdaFill),
            "zerofill" => Ok(AdaptMode::ZeroFill),
            _ => Err(Error::Parameter(format!("unknown mode '{s}' (adafill|zerofill)"))),
        }
    }
}

/// How the per-pixel L1 terms are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Divide by every pixel and channel; hole pixels count as zeros.
    #[default]
    MeanAll,
    /// Divide by the valid pixels only.
    MeanValid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub mode: AdaptMode,
    pub seed: u64,
    /// Probability that a child mask is a transformed copy of the parent.
    pub child_family_mix: f64,
    pub loss_reduction: LossReduction,
    /// Progress is logged every this many iterations; 0 disables it.
    pub log_every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig::for_mode(AdaptMode::AdaFill)
    }
}

impl AdaptConfig {
    pub fn for_mode(mode: AdaptMode) -> Self {
        AdaptConfig {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            adam_epsilon: 1e-8,
            batch_size: 8,
            iterations: mode.default_iterations(),
            mode,
            seed: 0,
            child_family_mix: 0.5,
            loss_reduction: LossReduction::MeanAll,
            log_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon must be > 0, got {}", self.adam_epsilon));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2 for batch statistics, got {}", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.child_family_mix) {
            return bad(format!("child_family_mix must lie in [0, 1], got {}", self.child_family_mix));
        }
        Ok(())
    }
}

/// First/second moment accumulators mirroring the learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &GeneratorParams) -> Self {
        let zeros = ParamGrads::zeros_like(params).0;
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every learnable tensor.
///
/// Non-finite gradients abort before anything is modified.
pub fn adam_step(params: &mut GeneratorParams, grads: &ParamGrads, state: &mut AdamState, config: &AdaptConfig) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.0.len() != tensors.len() || state.m.len() != tensors.len() {
        return Err(Error::Dimension("gradient / optimizer state layout differs from parameters".into()));
    }
    for ((t, g), m) in tensors.iter().zip(&grads.0).zip(&state.m) {
        if g.len() != m.len() {
            return Err(Error::Dimension(format!("gradient for '{}' has {} values, expected {}", t.name, g.len(), m.len())));
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient of '{}' is {} at index {pos} (step {})",
                t.name,
                g[pos],
                state.t + 1
            )));
        }
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let lr = config.learning_rate as f32;
    let eps = config.adam_epsilon as f32;
    let (b1, b2, bc1, bc2) = (b1 as f32, b2 as f32, bc1 as f32, bc2 as f32);
    for (((t, g), m), v) in tensors.iter_mut().zip(&grads.0).zip(&mut state.m).zip(&mut state.v) {
        if g.is_empty() {
            continue;
        }
        for (((p, &gi), mi), vi) in t.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `mean |apply_mask(prediction, parent) − x_d|` over all pixels and channels.
pub fn tta_loss(prediction: &Image, x_d: &Image, parent: &Mask) -> Result<f64> {
    tta_loss_with(prediction, x_d, parent, LossReduction::MeanAll)
}

pub fn tta_loss_with(prediction: &Image, x_d: &Image, parent: &Mask, reduction: LossReduction) -> Result<f64> {
    if prediction.dims() != x_d.dims() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs degraded image {:?}",
            prediction.dims(),
            x_d.dims()
        )));
    }
    let pred_d = apply_mask(prediction, parent)?;
    let sum: f64 = pred_d
        .data()
        .iter()
        .zip(x_d.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    let denom = match reduction {
        LossReduction::MeanAll => x_d.data().len(),
        LossReduction::MeanValid => (parent.data().len() - parent.hole_count()) * CHANNELS,
    };
    Ok(if denom == 0 { 0.0 } else { sum / denom as f64 })
}

/// L1 loss of a batch of network outputs against one target (broadcast) or a
/// per-sample target, and its gradient. Pixels where `valid` is 0 contribute
/// nothing, which is exactly the parent-degradation cancellation.
fn l1_loss_grad(out: &Tensor, target: &Tensor, valid: Option<&[u8]>, denom: f64) -> (f64, Tensor) {
    let plane = out.plane();
    let mut grad = Tensor::zeros(out.n, out.c, out.h, out.w);
    let scale = (1.0 / denom) as f32;
    let mut sum = 0.0f64;
    for i in 0..out.n {
        let t = target.sample(if target.n == 1 { 0 } else { i });
        let o = out.sample(i);
        let g = grad.sample_mut(i);
        for (k, ((&ov, &tv), gv)) in o.iter().zip(t).zip(g.iter_mut()).enumerate() {
            if valid.is_some_and(|v| v[k % plane] == 0) {
                continue;
            }
            let d = ov - tv;
            sum += d.abs() as f64;
            *gv = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
    }
    (sum / denom, grad)
}

/// Per-iteration training losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Mean of the last `window` losses (fewer if the trace is shorter).
    pub fn final_mean(&self, window: usize) -> Option<f64> {
        let n = self.losses.len().min(window.max(1));
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(w, "{i},{l:.9}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Result of a training loop.
#[derive(Debug, Clone)]
pub struct Trained {
    pub params: GeneratorParams,
    pub trace: LossTrace,
}

/// Loss, gradient step and trace bookkeeping shared by both training loops.
struct Stepper<'a> {
    params: GeneratorParams,
    state: AdamState,
    config: &'a AdaptConfig,
    trace: LossTrace,
    label: &'static str,
    total: usize,
}

impl<'a> Stepper<'a> {
    fn new(params: &GeneratorParams, config: &'a AdaptConfig, label: &'static str, total: usize) -> Self {
        Stepper {
            params: params.clone(),
            state: AdamState::new(params),
            config,
            trace: LossTrace {
                losses: Vec::with_capacity(total),
            },
            label,
            total,
        }
    }

    fn step(&mut self, input: &Tensor, target: &Tensor, valid: Option<&[u8]>, denom: f64) -> Result<()> {
        let (out, tape) = self.params.forward_train(input)?;
        let (loss, grad) = l1_loss_grad(&out, target, valid, denom);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("{} loss is {loss} at iteration {}", self.label, self.trace.len())));
        }
        let grads = self.params.backward(&tape, &grad)?;
        adam_step(&mut self.params, &grads, &mut self.state, self.config)?;
        self.trace.losses.push(loss);
        let done = self.trace.len();
        if self.config.log_every > 0 && (done % self.config.log_every == 0 || done == self.total) {
            log::info!("{} {done}/{} loss {loss:.6}", self.label, self.total);
        }
        Ok(())
    }

    fn finish(self) -> Trained {
        Trained {
            params: self.params,
            trace: self.trace,
        }
    }
}

/// Adapts `initial` to one degraded image by re-masking its valid pixels.
///
/// Only the degraded image and its hole are visible here; non-parent-like
/// child masks are drawn from `parent_family`.
pub fn adapt(
    initial: &GeneratorParams,
    x_d: &Image,
    parent: &Mask,
    parent_family: MaskFamily,
    config: &AdaptConfig,
) -> Result<Trained> {
    config.validate()?;
    degrade::check_dims(x_d, parent)?;
    let sampler = ChildSampler::new(parent_family, config.child_family_mix);
    let mut rng = rng_from(config.seed, &[label_tag("adapt")]);
    let target = TtaTarget::new(x_d, parent, config.loss_reduction);
    let mut stepper = Stepper::new(initial, config, "adapt", config.iterations);
    for _ in 0..config.iterations {
        let batch = make_training_batch(x_d, parent, config.batch_size, &sampler, &mut rng)?;
        let inputs = batch
            .iter()
            .map(|p| concat_input(&p.degraded, &p.child))
            .collect::<Result<Vec<_>>>()?;
        let denom = target.denom(config.batch_size);
        stepper.step(&Tensor::stack(&inputs)?, &target.rgb, Some(&target.valid), denom)?;
    }
    Ok(stepper.finish())
}

struct TtaTarget {
    rgb: Tensor,
    valid: Vec<u8>,
    per_sample: usize,
}

impl TtaTarget {
    fn new(x_d: &Image, parent: &Mask, reduction: LossReduction) -> Self {
        let plane = x_d.height() * x_d.width();
        TtaTarget {
            rgb: concat_rgb(x_d),
            valid: parent.data().iter().map(|&m| 1 - m).collect(),
            per_sample: match reduction {
                LossReduction::MeanAll => plane * CHANNELS,
                LossReduction::MeanValid => (plane - parent.hole_count()).max(1) * CHANNELS,
            },
        }
    }

    fn denom(&self, n: usize) -> f64 {
        (self.per_sample * n) as f64
    }
}

/// Mean of [`tta_loss`] over a batch of raw network outputs (`N×3×H×W`) and
/// its gradient with respect to those outputs.
pub fn batch_tta_loss(out: &Tensor, x_d: &Image, parent: &Mask, reduction: LossReduction) -> Result<(f64, Tensor)> {
    degrade::check_dims(x_d, parent)?;
    if out.c != CHANNELS || (out.h, out.w) != x_d.dims() {
        return Err(Error::Dimension(format!(
            "output {:?} vs degraded image {:?}",
            out.shape(),
            x_d.dims()
        )));
    }
    let target = TtaTarget::new(x_d, parent, reduction);
    Ok(l1_loss_grad(out, &target.rgb, Some(&target.valid), target.denom(out.n)))
}

fn concat_rgb(image: &Image) -> Tensor {
    let (h, w) = image.dims();
    let plane = h * w;
    let mut data = vec![0.0f32; CHANNELS * plane];
    for (p, px) in image.data().chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            data[c * plane + p] = px[c];
        }
    }
    Tensor::from_vec(1, CHANNELS, h, w, data).expect("consistent shape")
}

/// `x̂ = G([x_d, M_p])` in eval mode, optionally pasted back over the valid pixels.
pub fn infer(params: &GeneratorParams, x_d: &Image, parent: &Mask, composite: bool) -> Result<Image> {
    let raw = tensor_to_image(&params.forward_eval(&concat_input(x_d, parent)?)?, 0)?;
    if composite {
        composite_output(&raw, x_d, parent)
    } else {
        Ok(raw)
    }
}

/// `x̂ ⊙ M + x_d ⊙ (1 − M)`.
pub fn composite_output(raw: &Image, x_d: &Image, parent: &Mask) -> Result<Image> {
    degrade::check_dims(raw, parent)?;
    degrade::check_dims(x_d, parent)?;
    let (h, w) = raw.dims();
    Ok(Image::from_fn(h, w, |y, x| {
        if parent.is_hole(y, x) {
            raw.pixel(y, x)
        } else {
            x_d.pixel(y, x)
        }
    }))
}

/// Schedule of the supervised pre-training surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Optimizer, batch size and seed; `iterations` and `mode` are ignored.
    pub optimizer: AdaptConfig,
    pub epochs: usize,
    /// Fixed step count overriding `epochs` when set.
    pub steps: Option<usize>,
    /// Mask families the training holes are drawn from (uniformly).
    pub families: Vec<MaskFamily>,
    pub rates: RateConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            optimizer: AdaptConfig::default(),
            epochs: 1,
            steps: None,
            families: MaskFamily::ALL.to_vec(),
            rates: RateConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * dataset_len.div_ceil(self.optimizer.batch_size))
    }
}

/// Supervised training on clean images: `mean |G([apply_mask(x, M), M]) − x|`.
///
/// Images are visited in a fresh shuffled order every pass; a batch wraps
/// into the next pass when the dataset is smaller than the batch.
pub fn pretrain(initial: &GeneratorParams, dataset: &[Image], config: &PretrainConfig) -> Result<Trained> {
    let opt = &config.optimizer;
    opt.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::EmptyDataset("<pretrain dataset>".into()))?;
    if let Some(bad) = dataset.iter().find(|im| im.dims() != first.dims()) {
        return Err(Error::Dimension(format!(
            "pre-training images must share one size: {:?} vs {:?}",
            first.dims(),
            bad.dims()
        )));
    }
    if config.families.is_empty() {
        return Err(Error::Parameter("pre-training needs at least one mask family".into()));
    }
    let (h, w) = first.dims();
    let brush = BrushConfig::default();
    let mut rng = rng_from(opt.seed, &[label_tag("pretrain")]);
    let total = config.total_steps(dataset.len());
    let denom = (opt.batch_size * h * w * CHANNELS) as f64;
    let mut order: Vec<usize> = Vec::new();
    let mut stepper = Stepper::new(initial, opt, "pretrain", total);
    for _ in 0..total {
        let mut inputs = Vec::with_capacity(opt.batch_size);
        let mut targets = Vec::with_capacity(opt.batch_size);
        for _ in 0..opt.batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).rev().collect();
                order.shuffle(&mut rng);
            }
            let x = &dataset[order.pop().expect("refilled")];
            let family = *config.families.choose(&mut rng).expect("non-empty");
            let mask = gen_parent_mask(h, w, family, &config.rates, &brush, &mut rng)?;
            inputs.push(concat_input(&apply_mask(x, &mask)?, &mask)?);
            targets.push(concat_rgb(x));
        }
        stepper.step(&Tensor::stack(&inputs)?, &Tensor::stack(&targets)?, None, denom)?;
    }
    Ok(stepper.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Architecture;

    fn tiny() -> GeneratorParams {
        GeneratorParams::init(Architecture::reduced([4, 4, 8], 1), 5).unwrap()
    }

    fn texture(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| {
            let v = ((x as f32 * 0.7).sin() * (y as f32 * 0.4).cos() + 1.0) / 2.0;
            [v, 1.0 - v, 0.5]
        })
    }

    #[test]
    fn loss_zero_cases() {
        let x_d = texture(8, 8);
        let parent = Mask::rect(8, 8, 2, 2, 3, 3);
        let x_d = apply_mask(&x_d, &parent).unwrap();
        assert_eq!(tta_loss(&x_d, &x_d, &parent).unwrap(), 0.0);
        let mut inside = x_d.clone();
        for (p, &m) in inside.data_mut().chunks_exact_mut(3).zip(parent.data()) {
            if m == 1 {
                p.fill(0.25);
            }
        }
        assert_eq!(tta_loss(&inside, &x_d, &parent).unwrap(), 0.0);
    }

    #[test]
    fn two_pixel_hand_value() {
        // a single channel is embedded by replicating it across all three
        let x_d = Image::from_fn(2, 1, |y, _| [[0.5; 3], [1.0; 3]][y]);
        let pred = Image::from_fn(2, 1, |y, _| [[0.7; 3], [0.3; 3]][y]);
        let parent = Mask::new(2, 1, vec![0, 1]).unwrap();
        let loss = tta_loss(&pred, &x_d, &parent).unwrap();
        assert!((loss - 0.1).abs() < 1e-6, "{loss}");
        let valid = tta_loss_with(&pred, &x_d, &parent, LossReduction::MeanValid).unwrap();
        assert!((valid - 0.2).abs() < 1e-6, "{valid}");
        assert!(tta_loss(&pred, &Image::filled(1, 2, 0.0), &parent).is_err());
    }

    #[test]
    fn loss_gradient_matches_tta_loss() {
        let x_d = texture(8, 8);
        let parent = Mask::rect(8, 8, 1, 3, 4, 2);
        let x_d = apply_mask(&x_d, &parent).unwrap();
        let pred = Image::from_fn(8, 8, |y, x| [(y * 8 + x) as f32 / 64.0, 0.3, 0.9]);
        let valid: Vec<u8> = parent.data().iter().map(|&m| 1 - m).collect();
        let out = concat_rgb(&pred);
        let (loss, grad) = l1_loss_grad(&out, &concat_rgb(&x_d), Some(&valid), 192.0);
        assert!((loss - tta_loss(&pred, &x_d, &parent).unwrap()).abs() < 1e-9);
        for (k, g) in grad.data.iter().enumerate() {
            if parent.data()[k % 64] == 1 {
                assert_eq!(*g, 0.0);
            } else {
                assert!((g.abs() - 1.0 / 192.0).abs() < 1e-9 || *g == 0.0);
            }
        }
    }

    fn scalar_params() -> (GeneratorParams, ParamGrads) {
        let p = tiny();
        let g = ParamGrads::zeros_like(&p);
        (p, g)
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let (mut p, mut g) = scalar_params();
        let before = p.clone();
        let widx = p.tensors().iter().position(|t| t.role.is_learnable()).unwrap();
        g.0[widx][0] = 2.0;
        g.0[widx][1] = -0.5;
        let mut cfg = AdaptConfig::default();
        cfg.learning_rate = 0.1;
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        let d0 = p.tensors()[widx].data[0] - before.tensors()[widx].data[0];
        let d1 = p.tensors()[widx].data[1] - before.tensors()[widx].data[1];
        assert!((d0 + 0.1).abs() < 1e-6, "{d0}");
        assert!((d1 - 0.1).abs() < 1e-6, "{d1}");
        assert_eq!(p.tensors()[widx].data[2..], before.tensors()[widx].data[2..]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_scalar_formula() {
        let (mut p, mut g) = scalar_params();
        let widx = p.tensors().iter().position(|t| t.role.is_learnable()).unwrap();
        p.tensors_mut()[widx].data[0] = 1.0;
        g.0[widx][0] = 2.0;
        let mut cfg = AdaptConfig::default();
        cfg.learning_rate = 0.1;
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        let expect = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.tensors()[widx].data[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_and_decay() {
        let (mut p, g) = scalar_params();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        st.m[0][0] = 1.0;
        st.v[0][0] = 4.0;
        let g0 = ParamGrads(g.0.clone());
        let mut cfg = AdaptConfig::default();
        cfg.learning_rate = 1e-12;
        adam_step(&mut p, &g0, &mut st, &cfg).unwrap();
        assert!(st.m[0][0] == 0.5 && (st.v[0][0] - 3.6).abs() < 1e-6);
        let mut fresh = AdamState::new(&before);
        let mut q = before.clone();
        adam_step(&mut q, &g, &mut fresh, &cfg).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let (mut p, mut g) = scalar_params();
        let before = p.clone();
        let widx = p.tensors().iter().position(|t| t.role.is_learnable()).unwrap();
        g.0[widx][3] = f32::NAN;
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut st, &AdaptConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p, before);
        assert_eq!(st.t, 0);
    }

    fn small_cfg(iterations: usize) -> AdaptConfig {
        AdaptConfig {
            batch_size: 2,
            iterations,
            seed: 11,
            ..AdaptConfig::for_mode(AdaptMode::ZeroFill)
        }
    }

    #[test]
    fn adapt_zero_iterations_is_identity() {
        let p = tiny();
        let parent = Mask::rect(16, 16, 4, 4, 6, 6);
        let x_d = apply_mask(&texture(16, 16), &parent).unwrap();
        let out = adapt(&p, &x_d, &parent, MaskFamily::Box, &small_cfg(0)).unwrap();
        assert_eq!(out.params, p);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn adapt_is_seeded_and_traced() {
        let p = tiny();
        let parent = Mask::rect(16, 16, 4, 4, 6, 6);
        let x_d = apply_mask(&texture(16, 16), &parent).unwrap();
        let a = adapt(&p, &x_d, &parent, MaskFamily::Box, &small_cfg(3)).unwrap();
        let b = adapt(&p, &x_d, &parent, MaskFamily::Box, &small_cfg(3)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 3);
        assert_ne!(a.params, p);
        let mut csv = Vec::new();
        a.trace.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
    }

    #[test]
    fn adapt_rejects_bad_config() {
        let p = tiny();
        let parent = Mask::rect(16, 16, 4, 4, 6, 6);
        let x_d = apply_mask(&texture(16, 16), &parent).unwrap();
        let mut cfg = small_cfg(1);
        cfg.batch_size = 1;
        assert!(adapt(&p, &x_d, &parent, MaskFamily::Box, &cfg).is_err());
        let cfg = AdaptConfig { beta2: 1.0, ..small_cfg(1) };
        assert!(adapt(&p, &x_d, &parent, MaskFamily::Box, &cfg).is_err());
    }

    #[test]
    fn infer_composite_properties() {
        let p = tiny();
        let parent = Mask::rect(16, 16, 4, 4, 6, 6);
        let x_d = apply_mask(&texture(16, 16), &parent).unwrap();
        let raw = infer(&p, &x_d, &parent, false).unwrap();
        let comp = infer(&p, &x_d, &parent, true).unwrap();
        assert_eq!(raw, infer(&p, &x_d, &parent, false).unwrap());
        for y in 0..16 {
            for x in 0..16 {
                let want = if parent.is_hole(y, x) { raw.pixel(y, x) } else { x_d.pixel(y, x) };
                assert_eq!(comp.pixel(y, x), want);
            }
        }
    }

    #[test]
    fn pretrain_single_image_single_step() {
        let p = tiny();
        let cfg = PretrainConfig {
            optimizer: AdaptConfig {
                batch_size: 2,
                seed: 4,
                ..AdaptConfig::default()
            },
            steps: Some(1),
            ..PretrainConfig::default()
        };
        let out = pretrain(&p, &[texture(16, 16)], &cfg).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_ne!(out.params, p);
        let again = pretrain(&p, &[texture(16, 16)], &cfg).unwrap();
        assert_eq!(out.params, again.params);
        assert_eq!(PretrainConfig::default().total_steps(1), 1);
        assert_eq!(PretrainConfig::default().total_steps(17), 3);
        assert!(matches!(pretrain(&p, &[], &cfg), Err(Error::EmptyDataset(_))));
    }
}
