//! Dense NCHW `f32` tensors and the forward/backward kernels the generator is built from.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Dimension(format!(
                "{} values for a {n}x{c}x{h}x{w} tensor",
                data.len()
            )));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.c * self.plane();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.c * self.plane();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack an empty batch".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * items.len());
        let mut n = 0;
        for t in items {
            if (t.c, t.h, t.w) != (first.c, first.h, first.w) {
                return Err(Error::Dimension(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            n += t.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            n,
            c: first.c,
            h: first.h,
            w: first.w,
            data,
        })
    }
}

/// Reflection padding (edge pixel not repeated).
pub fn reflect_pad(x: &Tensor, p: usize) -> Result<Tensor> {
    if p >= x.h || p >= x.w {
        return Err(Error::Dimension(format!(
            "reflection padding {p} needs sides > {p}, got {}x{}",
            x.h, x.w
        )));
    }
    let (h2, w2) = (x.h + 2 * p, x.w + 2 * p);
    let mut y = Tensor::zeros(x.n, x.c, h2, w2);
    let map = |i: usize, len: usize| reflect_index(i as isize - p as isize, len);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut y.data[nc * h2 * w2..(nc + 1) * h2 * w2];
        for yy in 0..h2 {
            let sy = map(yy, x.h);
            for xx in 0..w2 {
                dst[yy * w2 + xx] = src[sy * x.w + map(xx, x.w)];
            }
        }
    }
    Ok(y)
}

fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

pub fn reflect_pad_backward(dy: &Tensor, p: usize) -> Tensor {
    let (h, w) = (dy.h - 2 * p, dy.w - 2 * p);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for yy in 0..dy.h {
            let sy = reflect_index(yy as isize - p as isize, h);
            for xx in 0..dy.w {
                dst[sy * w + reflect_index(xx as isize - p as isize, w)] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, h2, w2);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut y.data[nc * h2 * w2..(nc + 1) * h2 * w2];
        for yy in 0..h2 {
            let s = &src[(yy / 2) * x.w..(yy / 2 + 1) * x.w];
            let d = &mut dst[yy * w2..(yy + 1) * w2];
            for (pair, &v) in d.chunks_exact_mut(2).zip(s) {
                pair[0] = v;
                pair[1] = v;
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for yy in 0..dy.h {
            let s = &src[yy * dy.w..(yy + 1) * dy.w];
            let d = &mut dst[(yy / 2) * w..(yy / 2 + 1) * w];
            for (v, pair) in d.iter_mut().zip(s.chunks_exact(2)) {
                *v += pair[0] + pair[1];
            }
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient through a ReLU given its output.
pub fn relu_backward_inplace(dy: &mut Tensor, y: &Tensor) {
    dy.data.iter_mut().zip(&y.data).for_each(|(g, &o)| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn sigmoid_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = sigmoid(*v));
}

pub fn sigmoid_backward_inplace(dy: &mut Tensor, y: &Tensor) {
    dy.data.iter_mut().zip(&y.data).for_each(|(g, &o)| *g *= o * (1.0 - o));
}

/// Per-channel batch statistics of a train-mode normalization.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// Biased variance used for normalization.
    pub var: Vec<f32>,
}

/// Channel mean and biased variance over batch and space, accumulated in f64.
pub fn channel_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let plane = x.plane();
    let count = (x.n * plane) as f64;
    let mut mean = vec![0f32; x.c];
    let mut var = vec![0f32; x.c];
    for c in 0..x.c {
        let mut s = 0f64;
        for i in 0..x.n {
            s += x.sample(i)[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0f64;
        for i in 0..x.n {
            ss += x.sample(i)[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m as f32;
        var[c] = (ss / count) as f32;
    }
    (mean, var)
}

/// Applies `gamma * (x - mean) * inv_std + beta` per channel in place.
pub fn normalize_inplace(x: &mut Tensor, mean: &[f32], inv_std: &[f32], gamma: &[f32], beta: &[f32]) {
    let plane = x.plane();
    let c = x.c;
    for i in 0..x.n {
        let s = x.sample_mut(i);
        for ch in 0..c {
            let a = gamma[ch] * inv_std[ch];
            let b = beta[ch] - mean[ch] * a;
            s[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = *v * a + b);
        }
    }
}

/// Backward of train-mode normalization given its input `x`.
///
/// Returns `dx` and accumulates into `dgamma`, `dbeta`.
pub fn norm_backward(
    x: &Tensor,
    stats: &NormStats,
    gamma: &[f32],
    dy: &Tensor,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) -> Tensor {
    let plane = x.plane();
    let count = (x.n * plane) as f64;
    let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
    for c in 0..x.c {
        let (m, is) = (stats.mean[c], stats.inv_std[c]);
        let mut sum_dy = 0f64;
        let mut sum_dy_xhat = 0f64;
        for i in 0..x.n {
            let xs = &x.sample(i)[c * plane..(c + 1) * plane];
            let gs = &dy.sample(i)[c * plane..(c + 1) * plane];
            for (&xv, &g) in xs.iter().zip(gs) {
                sum_dy += g as f64;
                sum_dy_xhat += (g * (xv - m) * is) as f64;
            }
        }
        dgamma[c] += sum_dy_xhat as f32;
        dbeta[c] += sum_dy as f32;
        let k = gamma[c] * is;
        let mean_dy = (sum_dy / count) as f32;
        let mean_dy_xhat = (sum_dy_xhat / count) as f32;
        for i in 0..x.n {
            let xs = &x.sample(i)[c * plane..(c + 1) * plane];
            let gs = &dy.sample(i)[c * plane..(c + 1) * plane];
            let ds = &mut dx.sample_mut(i)[c * plane..(c + 1) * plane];
            for ((d, &xv), &g) in ds.iter_mut().zip(xs).zip(gs) {
                let xhat = (xv - m) * is;
                *d = k * (g - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    dx
}
