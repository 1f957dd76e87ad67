//! The inpainting generator: a one-stage encoder, dilated residual trunk and
//! nearest-neighbor-upsampling decoder with batch normalization, plus its
//! hand-written reverse pass.
//!
//! Layout for widths `(c1, c2, c3)`:
//!
//! ```text
//! reflect-pad 3, conv 7x7 4->c1, BN, ReLU
//! conv 4x4/2 c1->c2, BN, ReLU
//! conv 4x4/2 c2->c3, BN, ReLU
//! N x [ conv 3x3 dil d, BN, ReLU, conv 3x3, BN ] + skip
//! upsample x2, conv 3x3 c3->c2, BN, ReLU
//! upsample x2, conv 3x3 c2->c1, BN, ReLU
//! reflect-pad 3, conv 7x7 c1->3 (+bias), sigmoid
//! ```

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagedata::{Image, CHANNELS};
use crate::masks::Mask;
use crate::conv::{self, ConvGeom};
use crate::tensor::{self, NormStats, Tensor};

pub use checkpoint::{load_checkpoint, params_digest, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const INPUT_CHANNELS: usize = 4;
pub const BN_MOMENTUM: f32 = 0.9;
pub const BN_EPS: f32 = 1e-5;

/// Channel widths and trunk depth of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub widths: [usize; 3],
    pub res_blocks: usize,
    pub dilation: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            widths: [64, 128, 256],
            res_blocks: 8,
            dilation: 2,
        }
    }
}

impl Architecture {
    pub fn reduced(widths: [usize; 3], res_blocks: usize) -> Self {
        Architecture {
            widths,
            res_blocks,
            dilation: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.dilation == 0 {
            return Err(Error::Parameter(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    /// Stable description of the layer layout, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let [c1, c2, c3] = self.widths;
        format!(
            "tta-gen/v1;in={INPUT_CHANNELS};w={c1},{c2},{c3};res={};dil={};stem=r7;down=4s2;up=nn3;out=r7;norm=bn;act=sigmoid",
            self.res_blocks, self.dilation
        )
    }

    pub fn from_fingerprint(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("unrecognized architecture fingerprint '{s}'"));
        let mut widths = None;
        let mut res_blocks = None;
        let mut dilation = None;
        for part in s.split(';') {
            match part.split_once('=') {
                Some(("w", v)) => {
                    let ws: Vec<usize> = v.split(',').map(|t| t.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                    widths = Some(<[usize; 3]>::try_from(ws).map_err(|_| bad())?);
                }
                Some(("res", v)) => res_blocks = Some(v.parse().map_err(|_| bad())?),
                Some(("dil", v)) => dilation = Some(v.parse().map_err(|_| bad())?),
                _ => {}
            }
        }
        let arch = Architecture {
            widths: widths.ok_or_else(bad)?,
            res_blocks: res_blocks.ok_or_else(bad)?,
            dilation: dilation.ok_or_else(bad)?,
        };
        if arch.fingerprint() != s {
            return Err(bad());
        }
        Ok(arch)
    }

    fn layout(&self) -> (Vec<ParamTensor>, Vec<Op>) {
        let mut b = LayoutBuilder::default();
        let [c1, c2, c3] = self.widths;
        b.ops.push(Op::ReflectPad(3));
        b.conv("stem.conv", geom(INPUT_CHANNELS, c1, 7, 1, 0, 1), false);
        b.norm_relu("stem.bn", c1, true);
        b.conv("down1.conv", geom(c1, c2, 4, 2, 1, 1), false);
        b.norm_relu("down1.bn", c2, true);
        b.conv("down2.conv", geom(c2, c3, 4, 2, 1, 1), false);
        b.norm_relu("down2.bn", c3, true);
        for i in 0..self.res_blocks {
            b.ops.push(Op::SkipSave);
            b.conv(&format!("res{i}.conv1"), geom(c3, c3, 3, 1, self.dilation, self.dilation), false);
            b.norm_relu(&format!("res{i}.bn1"), c3, true);
            b.conv(&format!("res{i}.conv2"), geom(c3, c3, 3, 1, 1, 1), false);
            b.norm_relu(&format!("res{i}.bn2"), c3, false);
            b.ops.push(Op::SkipAdd);
        }
        b.ops.push(Op::Upsample);
        b.conv("up1.conv", geom(c3, c2, 3, 1, 1, 1), false);
        b.norm_relu("up1.bn", c2, true);
        b.ops.push(Op::Upsample);
        b.conv("up2.conv", geom(c2, c1, 3, 1, 1, 1), false);
        b.norm_relu("up2.bn", c1, true);
        b.ops.push(Op::ReflectPad(3));
        b.conv("out.conv", geom(c1, CHANNELS, 7, 1, 0, 1), true);
        b.ops.push(Op::Sigmoid);
        (b.tensors, b.ops)
    }
}

fn geom(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> ConvGeom {
    ConvGeom {
        cin,
        cout,
        kernel,
        stride,
        pad,
        dilation,
    }
}

/// What a parameter tensor is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    ReflectPad(usize),
    Conv {
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Norm {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Relu,
    Upsample,
    Sigmoid,
    SkipSave,
    SkipAdd,
}

#[derive(Default)]
struct LayoutBuilder {
    tensors: Vec<ParamTensor>,
    ops: Vec<Op>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, role: ParamRole, fill: f32) -> usize {
        let len = shape.iter().product();
        self.tensors.push(ParamTensor {
            name,
            shape,
            role,
            data: vec![fill; len],
        });
        self.tensors.len() - 1
    }

    fn conv(&mut self, name: &str, g: ConvGeom, with_bias: bool) {
        let weight = self.push(
            format!("{name}.weight"),
            vec![g.cout, g.cin, g.kernel, g.kernel],
            ParamRole::Weight,
            0.0,
        );
        let bias = with_bias.then(|| self.push(format!("{name}.bias"), vec![g.cout], ParamRole::Bias, 0.0));
        self.ops.push(Op::Conv { weight, bias, geom: g });
    }

    fn norm_relu(&mut self, name: &str, c: usize, relu: bool) {
        let gamma = self.push(format!("{name}.gamma"), vec![c], ParamRole::Scale, 1.0);
        let beta = self.push(format!("{name}.beta"), vec![c], ParamRole::Shift, 0.0);
        let mean = self.push(format!("{name}.running_mean"), vec![c], ParamRole::RunningMean, 0.0);
        let var = self.push(format!("{name}.running_var"), vec![c], ParamRole::RunningVar, 1.0);
        self.ops.push(Op::Norm { gamma, beta, mean, var });
        if relu {
            self.ops.push(Op::Relu);
        }
    }
}

/// Forward mode: batch statistics (and running-stat updates) or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// All weights and normalization statistics of one generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    arch: Architecture,
    tensors: Vec<ParamTensor>,
    ops: Vec<Op>,
}

/// Gradients aligned with [`GeneratorParams::tensors`]; running statistics get empty entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Vec<f32>>);

impl ParamGrads {
    pub fn zeros_like(params: &GeneratorParams) -> Self {
        ParamGrads(
            params
                .tensors
                .iter()
                .map(|t| if t.role.is_learnable() { vec![0.0; t.data.len()] } else { Vec::new() })
                .collect(),
        )
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.0.iter().flatten().copied()
    }

    pub fn scale(&mut self, s: f32) {
        self.0.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Activations recorded by a train-mode forward pass.
pub struct Tape {
    activations: Vec<Tensor>,
    norm_stats: Vec<Option<NormStats>>,
}

/// Glues an image and its mask into a 1×4×H×W network input.
pub fn concat_input(image: &Image, mask: &Mask) -> Result<Tensor> {
    if image.dims() != mask.dims() {
        return Err(Error::Dimension(format!(
            "image {:?} vs mask {:?}",
            image.dims(),
            mask.dims()
        )));
    }
    let (h, w) = image.dims();
    let plane = h * w;
    let mut data = vec![0.0f32; INPUT_CHANNELS * plane];
    for (p, px) in image.data().chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            data[c * plane + p] = px[c];
        }
    }
    for (p, &m) in mask.data().iter().enumerate() {
        data[CHANNELS * plane + p] = m as f32;
    }
    Tensor::from_vec(1, INPUT_CHANNELS, h, w, data)
}

/// Converts the `i`-th sample of a 3-channel output tensor into an image.
pub fn tensor_to_image(t: &Tensor, i: usize) -> Result<Image> {
    if t.c != CHANNELS {
        return Err(Error::Dimension(format!("expected 3 channels, got {}", t.c)));
    }
    let plane = t.plane();
    let s = t.sample(i);
    let mut data = vec![0.0f32; plane * CHANNELS];
    for p in 0..plane {
        for c in 0..CHANNELS {
            data[p * CHANNELS + c] = s[c * plane + p].clamp(0.0, 1.0);
        }
    }
    Ok(Image::from_raw_unchecked(t.h, t.w, data))
}

impl GeneratorParams {
    /// He-normal conv kernels, unit scale / zero shift, zero running mean, unit running variance.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (mut tensors, ops) = arch.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in tensors.iter_mut().filter(|t| t.role == ParamRole::Weight) {
            let fan_in: usize = t.shape[1..].iter().product();
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
            t.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        Ok(GeneratorParams { arch, tensors, ops })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn learnable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.role.is_learnable())
            .map(|t| t.data.len())
            .sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.c != INPUT_CHANNELS {
            return Err(Error::Dimension(format!(
                "generator expects {INPUT_CHANNELS} input channels, got {}",
                input.c
            )));
        }
        if input.n == 0 {
            return Err(Error::Dimension("empty batch".into()));
        }
        if input.h % 4 != 0 || input.w % 4 != 0 || input.h < 8 || input.w < 8 {
            return Err(Error::Dimension(format!(
                "input {}x{} must have sides divisible by 4 and at least 8",
                input.h, input.w
            )));
        }
        Ok(())
    }

    /// Dispatches on `mode`; train mode updates running statistics.
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.forward_eval(input),
            Mode::Train => self.forward_train(input).map(|(out, _)| out),
        }
    }

    /// Inference with running statistics. Pure.
    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut skips: Vec<Tensor> = Vec::new();
        for op in &self.ops {
            x = match *op {
                Op::ReflectPad(p) => tensor::reflect_pad(&x, p)?,
                Op::Conv { weight, bias, geom } => conv::conv_forward(
                    &x,
                    &self.tensors[weight].data,
                    bias.map(|b| self.tensors[b].data.as_slice()),
                    &geom,
                )?,
                Op::Norm { gamma, beta, mean, var } => {
                    let inv_std: Vec<f32> = self.tensors[var]
                        .data
                        .iter()
                        .map(|v| 1.0 / (v + BN_EPS).sqrt())
                        .collect();
                    tensor::normalize_inplace(
                        &mut x,
                        &self.tensors[mean].data,
                        &inv_std,
                        &self.tensors[gamma].data,
                        &self.tensors[beta].data,
                    );
                    x
                }
                Op::Relu => {
                    tensor::relu_inplace(&mut x);
                    x
                }
                Op::Upsample => tensor::upsample_nearest2(&x),
                Op::Sigmoid => {
                    tensor::sigmoid_inplace(&mut x);
                    x
                }
                Op::SkipSave => {
                    skips.push(x.clone());
                    x
                }
                Op::SkipAdd => {
                    x.add_assign(&skips.pop().expect("balanced skips"));
                    x
                }
            };
        }
        Ok(x)
    }

    /// Training forward with batch statistics; records the activations needed by [`backward`].
    ///
    /// [`backward`]: GeneratorParams::backward
    pub fn forward_train(&mut self, input: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(input)?;
        if input.n < 2 {
            return Err(Error::Dimension(
                "train-mode normalization needs a batch of at least 2".into(),
            ));
        }
        let mut activations = Vec::with_capacity(self.ops.len() + 1);
        let mut norm_stats = vec![None; self.ops.len()];
        activations.push(input.clone());
        let mut skips: Vec<Tensor> = Vec::new();
        for (i, op) in self.ops.clone().into_iter().enumerate() {
            let x = activations.last().expect("non-empty");
            let y = match op {
                Op::ReflectPad(p) => tensor::reflect_pad(x, p)?,
                Op::Conv { weight, bias, geom } => conv::conv_forward(
                    x,
                    &self.tensors[weight].data,
                    bias.map(|b| self.tensors[b].data.as_slice()),
                    &geom,
                )?,
                Op::Norm { gamma, beta, mean, var } => {
                    let (bm, bv) = tensor::channel_stats(x);
                    let inv_std: Vec<f32> = bv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let mut y = x.clone();
                    tensor::normalize_inplace(&mut y, &bm, &inv_std, &self.tensors[gamma].data, &self.tensors[beta].data);
                    let count = (x.n * x.plane()) as f32;
                    let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    for (r, m) in self.tensors[mean].data.iter_mut().zip(&bm) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                    }
                    for (r, v) in self.tensors[var].data.iter_mut().zip(&bv) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
                    }
                    norm_stats[i] = Some(NormStats {
                        mean: bm,
                        inv_std,
                        var: bv,
                    });
                    y
                }
                Op::Relu => {
                    let mut y = x.clone();
                    tensor::relu_inplace(&mut y);
                    y
                }
                Op::Upsample => tensor::upsample_nearest2(x),
                Op::Sigmoid => {
                    let mut y = x.clone();
                    tensor::sigmoid_inplace(&mut y);
                    y
                }
                Op::SkipSave => {
                    skips.push(x.clone());
                    x.clone()
                }
                Op::SkipAdd => {
                    let mut y = x.clone();
                    y.add_assign(&skips.pop().expect("balanced skips"));
                    y
                }
            };
            activations.push(y);
        }
        let out = activations.last().expect("non-empty").clone();
        Ok((
            out,
            Tape {
                activations,
                norm_stats,
            },
        ))
    }

    /// Which rectifier inputs were positive in a recorded forward, in op order.
    /// Two tapes with equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self, tape: &Tape) -> Vec<bool> {
        self.ops
            .iter()
            .enumerate()
            .filter(|(_, op)| matches!(op, Op::Relu))
            .flat_map(|(i, _)| tape.activations[i].data.iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Reverse pass of the recorded forward. `upstream` is dLoss/dOutput.
    pub fn backward(&self, tape: &Tape, upstream: &Tensor) -> Result<ParamGrads> {
        let out = tape.activations.last().expect("non-empty tape");
        if upstream.shape() != out.shape() {
            return Err(Error::Dimension(format!(
                "upstream gradient {:?} vs output {:?}",
                upstream.shape(),
                out.shape()
            )));
        }
        let mut grads = ParamGrads::zeros_like(self);
        let mut g = upstream.clone();
        let mut skip_grads: Vec<Tensor> = Vec::new();
        for (i, op) in self.ops.iter().enumerate().rev() {
            let x = &tape.activations[i];
            let y = &tape.activations[i + 1];
            g = match *op {
                Op::ReflectPad(p) => {
                    if i == 0 {
                        break;
                    }
                    tensor::reflect_pad_backward(&g, p)
                }
                Op::Conv { weight, bias, geom } => {
                    let need_dx = i > 1;
                    let (dw, db) = split_two(&mut grads.0, weight, bias);
                    match conv::conv_backward(x, &self.tensors[weight].data, &geom, &g, dw, db, need_dx) {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                Op::Norm { gamma, beta, .. } => {
                    let stats = tape.norm_stats[i].as_ref().expect("train-mode tape");
                    let (dgamma, dbeta) = split_two(&mut grads.0, gamma, Some(beta));
                    tensor::norm_backward(
                        x,
                        stats,
                        &self.tensors[gamma].data,
                        &g,
                        dgamma,
                        dbeta.expect("beta index"),
                    )
                }
                Op::Relu => {
                    tensor::relu_backward_inplace(&mut g, y);
                    g
                }
                Op::Upsample => tensor::upsample_nearest2_backward(&g),
                Op::Sigmoid => {
                    tensor::sigmoid_backward_inplace(&mut g, y);
                    g
                }
                Op::SkipAdd => {
                    skip_grads.push(g.clone());
                    g
                }
                Op::SkipSave => {
                    g.add_assign(&skip_grads.pop().expect("balanced skips"));
                    g
                }
            };
        }
        Ok(grads)
    }
}

/// Two disjoint mutable borrows into the gradient list.
fn split_two(grads: &mut [Vec<f32>], a: usize, b: Option<usize>) -> (&mut [f32], Option<&mut [f32]>) {
    match b {
        None => (&mut grads[a], None),
        Some(b) => {
            assert!(a < b, "parameter order");
            let (lo, hi) = grads.split_at_mut(b);
            (&mut lo[a], Some(&mut hi[0]))
        }
    }
}

/// Runs the network on a single image/mask pair in eval mode.
pub fn predict(params: &GeneratorParams, image: &Image, mask: &Mask) -> Result<Image> {
    let input = concat_input(image, mask)?;
    tensor_to_image(&params.forward_eval(&input)?, 0)
}
