//! 2-D convolution: register-tiled direct kernels for stride 1 and
//! im2col + GEMM for strided layers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `C = alpha * A·B + beta * C` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ph < span || pw < span {
            return Err(Error::Dimension(format!(
                "{h}x{w} input too small for a {}x{} kernel (dilation {})",
                self.kernel, self.kernel, self.dilation
            )));
        }
        Ok(((ph - span) / self.stride + 1, (pw - span) / self.stride + 1))
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap offset `off`.
    fn valid_range(&self, off: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // input index = o * stride + off - pad must lie in [0, in_len)
        let lo = if off >= self.pad {
            0
        } else {
            (self.pad - off).div_ceil(self.stride)
        };
        let hi = if in_len + self.pad > off {
            ((in_len + self.pad - off - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col(x: &[f32], h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, col: &mut [f32]) {
    let k = g.kernel;
    let plane_out = ho * wo;
    for ci in 0..g.cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky * g.dilation, h, ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx * g.dilation, w, wo);
                let row = &mut col[((ci * k + ky) * k + kx) * plane_out..][..plane_out];
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let iy = oy * g.stride + ky * g.dilation - g.pad;
                    let src_row = &xc[iy * w..(iy + 1) * w];
                    dst[..ox_lo].fill(0.0);
                    dst[ox_hi..].fill(0.0);
                    let ix0 = ox_lo * g.stride + kx * g.dilation - g.pad;
                    if g.stride == 1 {
                        dst[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for (j, d) in dst[ox_lo..ox_hi].iter_mut().enumerate() {
                            *d = src_row[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f32], h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, dx: &mut [f32]) {
    let k = g.kernel;
    let plane_out = ho * wo;
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky * g.dilation, h, ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx * g.dilation, w, wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = &col[((ci * k + ky) * k + kx) * plane_out..][..plane_out];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky * g.dilation - g.pad;
                    let ix0 = ox_lo * g.stride + kx * g.dilation - g.pad;
                    let src = &row[oy * wo + ox_lo..oy * wo + ox_hi];
                    let dst_row = &mut dxc[iy * w..(iy + 1) * w];
                    if g.stride == 1 {
                        for (d, s) in dst_row[ix0..ix0 + src.len()].iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for (j, s) in src.iter().enumerate() {
                            dst_row[ix0 + j * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}



/// Output pixels per register tile.
const TW: usize = 16;
/// Output channels per register tile.
const CB: usize = 4;

/// Repacks `[cout][cin][k][k]` weights into `[cout/CB][cin][k*k][CB]`, zero-filling the last block.
fn pack_weights(weight: &[f32], cout: usize, cin: usize, kk: usize) -> Vec<f32> {
    let blocks = cout.div_ceil(CB);
    let mut packed = vec![0.0f32; blocks * cin * kk * CB];
    for co in 0..cout {
        let (b, c) = (co / CB, co % CB);
        for ci in 0..cin {
            for t in 0..kk {
                packed[((b * cin + ci) * kk + t) * CB + c] = weight[(co * cin + ci) * kk + t];
            }
        }
    }
    packed
}

/// Copies `x` (`c` planes of `h`×`w`) into a zero border of width `p`.
fn zero_pad(x: &[f32], c: usize, h: usize, w: usize, p: usize) -> Vec<f32> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0f32; c * hp * wp];
    for ci in 0..c {
        for y in 0..h {
            let src = &x[(ci * h + y) * w..(ci * h + y + 1) * w];
            out[(ci * hp + y + p) * wp + p..][..w].copy_from_slice(src);
        }
    }
    out
}

/// `y[co][oy][ox] = Σ w[co][ci][ky][kx] · xp[ci][oy + ky·d][ox + kx·d]` over a pre-padded input.
#[allow(clippy::too_many_arguments)]
fn direct_conv(
    xp: &[f32],
    cin: usize,
    hp: usize,
    wp: usize,
    packed: &[f32],
    cout: usize,
    k: usize,
    d: usize,
    y: &mut [f32],
    ho: usize,
    wo: usize,
) {
    let kk = k * k;
    for blk in 0..cout.div_ceil(CB) {
        let wb = &packed[blk * cin * kk * CB..(blk + 1) * cin * kk * CB];
        let cb = CB.min(cout - blk * CB);
        for oy in 0..ho {
            let mut ox0 = 0;
            while ox0 < wo {
                let tile = TW.min(wo - ox0);
                let mut acc = [[0f32; TW]; CB];
                if tile == TW {
                    for ci in 0..cin {
                        for ky in 0..k {
                            let xrow = &xp[(ci * hp + oy + ky * d) * wp..][..wp];
                            let wrow = &wb[(ci * kk + ky * k) * CB..][..k * CB];
                            for kx in 0..k {
                                let xv: &[f32; TW] = xrow[ox0 + kx * d..][..TW].try_into().unwrap();
                                let wv: &[f32; CB] = wrow[kx * CB..][..CB].try_into().unwrap();
                                for (a, &wc) in acc.iter_mut().zip(wv) {
                                    for (aj, &xj) in a.iter_mut().zip(xv) {
                                        *aj = wc.mul_add(xj, *aj);
                                    }
                                }
                            }
                        }
                    }
                } else {
                    for ci in 0..cin {
                        for ky in 0..k {
                            let xrow = &xp[(ci * hp + oy + ky * d) * wp..][..wp];
                            for kx in 0..k {
                                let wv = &wb[(ci * kk + ky * k + kx) * CB..][..CB];
                                for c in 0..CB {
                                    for j in 0..tile {
                                        acc[c][j] += wv[c] * xrow[ox0 + kx * d + j];
                                    }
                                }
                            }
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate().take(cb) {
                    let co = blk * CB + c;
                    y[(co * ho + oy) * wo + ox0..][..tile].copy_from_slice(&a[..tile]);
                }
                ox0 += tile;
            }
        }
    }
}

/// `dw[co][ci][ky][kx] += Σ dy[co][oy][ox] · xp[ci][oy + ky·d][ox + kx·d]`.
#[allow(clippy::too_many_arguments)]
fn direct_weight_grad(
    xp: &[f32],
    cin: usize,
    hp: usize,
    wp: usize,
    dy: &[f32],
    cout: usize,
    ho: usize,
    wo: usize,
    k: usize,
    d: usize,
    dweight: &mut [f32],
) {
    let kk = k * k;
    let full = wo / TW * TW;
    let mut rows: [&[f32]; CB] = [&[]; CB];
    for blk in 0..cout.div_ceil(CB) {
        let cb = CB.min(cout - blk * CB);
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = [[0f32; TW]; CB];
                    let mut tail = [0f32; CB];
                    for oy in 0..ho {
                        let xrow = &xp[(ci * hp + oy + ky * d) * wp + kx * d..][..wo];
                        for (c, r) in rows.iter_mut().enumerate() {
                            let co = (blk * CB + c).min(cout - 1);
                            *r = &dy[(co * ho + oy) * wo..][..wo];
                        }
                        let mut ox0 = 0;
                        while ox0 < full {
                            let xv: &[f32; TW] = xrow[ox0..][..TW].try_into().unwrap();
                            for (a, r) in acc.iter_mut().zip(&rows) {
                                let gv: &[f32; TW] = r[ox0..][..TW].try_into().unwrap();
                                for ((aj, &gj), &xj) in a.iter_mut().zip(gv).zip(xv) {
                                    *aj = gj.mul_add(xj, *aj);
                                }
                            }
                            ox0 += TW;
                        }
                        for c in 0..CB {
                            for j in full..wo {
                                tail[c] += rows[c][j] * xrow[j];
                            }
                        }
                    }
                    for c in 0..cb {
                        let co = blk * CB + c;
                        dweight[(co * cin + ci) * kk + ky * k + kx] += acc[c].iter().sum::<f32>() + tail[c];
                    }
                }
            }
        }
    }
}

/// Stride-1 layers use the direct kernels; strided layers go through im2col + GEMM.
fn use_direct(g: &ConvGeom) -> bool {
    g.stride == 1 && g.pad <= g.dilation * (g.kernel - 1)
}

/// Wide layers get their weight gradient from GEMM; the direct kernel is load bound there.
fn gemm_weight_grad(g: &ConvGeom) -> bool {
    g.cout >= 16 && g.cin >= 32
}

pub fn conv_forward(x: &Tensor, weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Result<Tensor> {
    if x.c != g.cin {
        return Err(Error::Dimension(format!("conv expects {} channels, got {}", g.cin, x.c)));
    }
    debug_assert_eq!(weight.len(), g.weight_len());
    let (ho, wo) = g.out_dims(x.h, x.w)?;
    let mut y = Tensor::zeros(x.n, g.cout, ho, wo);
    let kk = g.col_rows();
    let plane_out = ho * wo;
    if use_direct(g) {
        let packed = pack_weights(weight, g.cout, g.cin, g.kernel * g.kernel);
        let (hp, wp) = (x.h + 2 * g.pad, x.w + 2 * g.pad);
        for i in 0..x.n {
            let padded;
            let xp = if g.pad == 0 {
                x.sample(i)
            } else {
                padded = zero_pad(x.sample(i), x.c, x.h, x.w, g.pad);
                &padded
            };
            direct_conv(xp, g.cin, hp, wp, &packed, g.cout, g.kernel, g.dilation, y.sample_mut(i), ho, wo);
        }
    } else {
        let mut col = vec![0.0f32; kk * plane_out];
        for i in 0..x.n {
            im2col(x.sample(i), x.h, x.w, g, ho, wo, &mut col);
            gemm(g.cout, kk, plane_out, weight, (kk, 1), &col, (plane_out, 1), 0.0, y.sample_mut(i));
        }
    }
    if let Some(b) = bias {
        for i in 0..x.n {
            for (co, chunk) in y.sample_mut(i).chunks_exact_mut(plane_out).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    Ok(y)
}

/// Accumulates weight (and bias) gradients; returns the input gradient when requested.
pub fn conv_backward(
    x: &Tensor,
    weight: &[f32],
    g: &ConvGeom,
    dy: &Tensor,
    dweight: &mut [f32],
    dbias: Option<&mut [f32]>,
    need_dx: bool,
) -> Option<Tensor> {
    let (ho, wo) = (dy.h, dy.w);
    let kk = g.col_rows();
    let plane_out = ho * wo;
    let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
    if use_direct(g) {
        let k = g.kernel;
        let (hp, wp) = (x.h + 2 * g.pad, x.w + 2 * g.pad);
        // input gradient = correlation of the re-padded output gradient with the
        // flipped, channel-transposed kernel
        let back_pad = g.dilation * (k - 1) - g.pad;
        let flipped = need_dx.then(|| {
            let mut t = vec![0.0f32; weight.len()];
            for co in 0..g.cout {
                for ci in 0..g.cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            t[((ci * g.cout + co) * k + ky) * k + kx] =
                                weight[((co * g.cin + ci) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                        }
                    }
                }
            }
            pack_weights(&t, g.cin, g.cout, k * k)
        });
        let mut col = if gemm_weight_grad(g) { vec![0.0f32; kk * plane_out] } else { Vec::new() };
        for i in 0..x.n {
            let padded;
            let xp = if g.pad == 0 {
                x.sample(i)
            } else {
                padded = zero_pad(x.sample(i), x.c, x.h, x.w, g.pad);
                &padded
            };
            if gemm_weight_grad(g) {
                im2col(x.sample(i), x.h, x.w, g, ho, wo, &mut col);
                gemm(g.cout, plane_out, kk, dy.sample(i), (plane_out, 1), &col, (1, plane_out), 1.0, dweight);
            } else {
                direct_weight_grad(xp, g.cin, hp, wp, dy.sample(i), g.cout, ho, wo, k, g.dilation, dweight);
            }
            if let (Some(dx), Some(fl)) = (dx.as_mut(), flipped.as_ref()) {
                let dyp = zero_pad(dy.sample(i), g.cout, ho, wo, back_pad);
                let (bh, bw) = (ho + 2 * back_pad, wo + 2 * back_pad);
                direct_conv(&dyp, g.cout, bh, bw, fl, g.cin, k, g.dilation, dx.sample_mut(i), x.h, x.w);
            }
        }
    } else {
        let mut col = vec![0.0f32; kk * plane_out];
        let mut dcol = if need_dx { vec![0.0f32; kk * plane_out] } else { Vec::new() };
        for i in 0..x.n {
            let dyi = dy.sample(i);
            im2col(x.sample(i), x.h, x.w, g, ho, wo, &mut col);
            gemm(g.cout, plane_out, kk, dyi, (plane_out, 1), &col, (1, plane_out), 1.0, dweight);
            if let Some(dx) = dx.as_mut() {
                gemm(kk, g.cout, plane_out, weight, (1, kk), dyi, (plane_out, 1), 0.0, &mut dcol);
                col2im_add(&dcol, x.h, x.w, g, ho, wo, dx.sample_mut(i));
            }
        }
    }
    if let Some(db) = dbias {
        for i in 0..dy.n {
            for (co, chunk) in dy.sample(i).chunks_exact(plane_out).enumerate() {
                db[co] += chunk.iter().sum::<f32>();
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, wt: &[f32], g: &ConvGeom) -> Tensor {
        let (ho, wo) = g.out_dims(x.h, x.w).unwrap();
        let mut y = Tensor::zeros(x.n, g.cout, ho, wo);
        for n in 0..x.n {
            for co in 0..g.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f64;
                        for ci in 0..g.cin {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((n * x.c + ci) * x.h + iy as usize) * x.w + ix as usize];
                                    let wv = wt[((co * g.cin + ci) * g.kernel + ky) * g.kernel + kx];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        y.data[((n * g.cout + co) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        y
    }

    fn pseudo(len: usize, seed: u32) -> Vec<f32> {
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        (0..len)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 17;
                s ^= s << 5;
                (s as f32 / u32::MAX as f32) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (stride, pad, dilation, kernel) in [(1, 1, 1, 3), (2, 1, 1, 4), (1, 2, 2, 3), (1, 0, 1, 7), (2, 0, 1, 3), (1, 3, 1, 7), (1, 1, 1, 3)] {
            let g = ConvGeom {
                cin: 3,
                cout: 4,
                kernel,
                stride,
                pad,
                dilation,
            };
            let x = Tensor::from_vec(2, 3, 9, 10, pseudo(2 * 3 * 90, 7)).unwrap();
            let wt = pseudo(g.weight_len(), 11);
            let fast = conv_forward(&x, &wt, None, &g).unwrap();
            let slow = naive_conv(&x, &wt, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "{g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> = <x, conv^T(dy)> = <w, dW> for a bias-free (linear) convolution
        for (stride, pad, dilation, kernel, h, w) in [
            (2, 1, 1, 3, 8, 7),
            (2, 1, 1, 4, 8, 8),
            (1, 1, 1, 3, 9, 21),
            (1, 2, 2, 3, 12, 18),
            (1, 0, 1, 7, 10, 40),
            (1, 3, 1, 7, 9, 9),
        ] {
            let g = ConvGeom {
                cin: 3,
                cout: 5,
                kernel,
                stride,
                pad,
                dilation,
            };
            let x = Tensor::from_vec(2, 3, h, w, pseudo(6 * h * w, 3)).unwrap();
            let wt = pseudo(g.weight_len(), 5);
            let y = conv_forward(&x, &wt, None, &g).unwrap();
            let dy = Tensor::from_vec(y.n, y.c, y.h, y.w, pseudo(y.data.len(), 9)).unwrap();
            let mut dw = vec![0.0; wt.len()];
            let dx = conv_backward(&x, &wt, &g, &dy, &mut dw, None, true).unwrap();
            let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| (a * b) as f64).sum();
            let rhs_x: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| (a * b) as f64).sum();
            let rhs_w: f64 = wt.iter().zip(&dw).map(|(a, b)| (a * b) as f64).sum();
            assert!((lhs - rhs_x).abs() < 1e-3 * (1.0 + lhs.abs()), "{g:?}: {lhs} vs {rhs_x}");
            assert!((lhs - rhs_w).abs() < 1e-3 * (1.0 + lhs.abs()), "{g:?}: {lhs} vs {rhs_w}");
        }
    }

    #[test]
    fn bias_and_channel_check() {
        let g = ConvGeom {
            cin: 2,
            cout: 3,
            kernel: 3,
            stride: 1,
            pad: 1,
            dilation: 1,
        };
        let x = Tensor::zeros(1, 2, 5, 5);
        let y = conv_forward(&x, &vec![0.5; g.weight_len()], Some(&[1.0, 2.0, 3.0]), &g).unwrap();
        assert_eq!(y.sample(0)[25 * 2 + 7], 3.0);
        let dy = Tensor::from_vec(1, 3, 5, 5, vec![1.0; 75]).unwrap();
        let mut dw = vec![0.0; g.weight_len()];
        let mut db = vec![0.0; 3];
        conv_backward(&x, &vec![0.5; g.weight_len()], &g, &dy, &mut dw, Some(&mut db), false);
        assert_eq!(db, vec![25.0; 3]);
        assert!(conv_forward(&Tensor::zeros(1, 3, 5, 5), &vec![0.0; g.weight_len()], None, &g).is_err());
    }
}
