//! Single-image 2-D convolution, transposed convolution and per-channel
//! normalization over `[C, H, W]` tensors.

use super::linalg::{gemm, Mat};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec { stride, padding }
    }
}

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Unfold `x: [c, h, w]` into `[c*kh*kw, ho*wo]` patches.
fn im2col(x: &[f64], g: Geom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * hw];
    for ch in 0..g.c {
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = (ch * g.kh + a) * g.kw + b;
                let dst = &mut cols[row * hw..][..hw];
                for i in 0..g.ho {
                    let r = (i * g.stride + a) as isize - g.pad as isize;
                    if r < 0 || r >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ch * g.h + r as usize) * g.w..][..g.w];
                    for j in 0..g.wo {
                        let c = (j * g.stride + b) as isize - g.pad as isize;
                        if c >= 0 && c < g.w as isize {
                            dst[i * g.wo + j] = src[c as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patches back into `[c, h, w]`.
fn col2im(cols: &[f64], g: Geom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut x = vec![0.0; g.c * g.h * g.w];
    for ch in 0..g.c {
        for a in 0..g.kh {
            for b in 0..g.kw {
                let row = (ch * g.kh + a) * g.kw + b;
                let src = &cols[row * hw..][..hw];
                for i in 0..g.ho {
                    let r = (i * g.stride + a) as isize - g.pad as isize;
                    if r < 0 || r >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(ch * g.h + r as usize) * g.w..][..g.w];
                    for j in 0..g.wo {
                        let c = (j * g.stride + b) as isize - g.pad as isize;
                        if c >= 0 && c < g.w as isize {
                            dst[c as usize] += src[i * g.wo + j];
                        }
                    }
                }
            }
        }
    }
    x
}

fn chw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(op, format!("expected [C, H, W], got {:?}", t.shape()))),
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], hw: usize) {
    for (plane, b) in out.chunks_mut(hw).zip(bias) {
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[f64], hw: usize) -> Vec<f64> {
    g.chunks(hw).map(|p| p.iter().sum()).collect()
}

impl Tensor {
    /// Cross-correlation of `self: [C, H, W]` with `weight: [C', C, kh, kw]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let (c, h, w) = chw(self, "conv2d")?;
        let (co, kh, kw) = match *weight.shape() {
            [co, ci, kh, kw] if ci == c => (co, kh, kw),
            _ => return Err(Error::shape("conv2d", self.shape(), weight.shape())),
        };
        if let Some(b) = bias {
            if b.len() != co {
                return Err(Error::shape("conv2d", weight.shape(), b.shape()));
            }
        }
        if spec.stride == 0 || h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (w + 2 * spec.padding - kw) / spec.stride + 1;
        let g = Geom { c, h, w, kh, kw, stride: spec.stride, pad: spec.padding, ho, wo };
        let hw = ho * wo;
        let ckk = c * kh * kw;
        let cols = im2col(self.values(), g);
        let mut out = vec![0.0; co * hw];
        gemm(Mat::new(weight.values(), co, ckk), Mat::new(&cols, ckk, hw), &mut out, 0.0);
        if let Some(b) = bias {
            add_channel_bias(&mut out, b.values(), hw);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            "conv2d",
            out,
            vec![co, ho, wo],
            parents,
            Box::new(move |gout, _, p| {
                let gm = Mat::new(gout, co, hw);
                let gx = p[0].requires_grad().then(|| {
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(Mat::new(p[1].values(), co, ckk).t(), gm, &mut dcols, 0.0);
                    col2im(&dcols, g)
                });
                let gw = p[1].requires_grad().then(|| {
                    let cols = im2col(p[0].values(), g);
                    let mut gw = vec![0.0; co * ckk];
                    gemm(gm, Mat::new(&cols, ckk, hw).t(), &mut gw, 0.0);
                    gw
                });
                let mut grads = vec![gx, gw];
                if p.len() == 3 {
                    grads.push(Some(channel_sums(gout, hw)));
                }
                grads
            }),
        ))
    }

    /// Transposed convolution of `self: [C, H, W]` with
    /// `weight: [C, C', k, k]`; output side is `(H-1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        spec: Conv2dSpec,
    ) -> Result<Tensor> {
        let (c, h, w) = chw(self, "conv_transpose2d")?;
        let (co, kh, kw) = match *weight.shape() {
            [ci, co, kh, kw] if ci == c => (co, kh, kw),
            _ => return Err(Error::shape("conv_transpose2d", self.shape(), weight.shape())),
        };
        if let Some(b) = bias {
            if b.len() != co {
                return Err(Error::shape("conv_transpose2d", weight.shape(), b.shape()));
            }
        }
        let full_h = (h - 1) * spec.stride + kh;
        let full_w = (w - 1) * spec.stride + kw;
        if spec.stride == 0 || full_h <= 2 * spec.padding || full_w <= 2 * spec.padding {
            return Err(Error::shape("conv_transpose2d", self.shape(), weight.shape()));
        }
        let (ho, wo) = (full_h - 2 * spec.padding, full_w - 2 * spec.padding);
        // Output grid seen as the input of the adjoint convolution.
        let g = Geom { c: co, h: ho, w: wo, kh, kw, stride: spec.stride, pad: spec.padding, ho: h, wo: w };
        let hw_in = h * w;
        let hw_out = ho * wo;
        let okk = co * kh * kw;
        let mut cols = vec![0.0; okk * hw_in];
        gemm(Mat::new(weight.values(), c, okk).t(), Mat::new(self.values(), c, hw_in), &mut cols, 0.0);
        let mut out = col2im(&cols, g);
        if let Some(b) = bias {
            add_channel_bias(&mut out, b.values(), hw_out);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            "conv_transpose2d",
            out,
            vec![co, ho, wo],
            parents,
            Box::new(move |gout, _, p| {
                let gcols = im2col(gout, g);
                let gc = Mat::new(&gcols, okk, hw_in);
                let gx = p[0].requires_grad().then(|| {
                    let mut gx = vec![0.0; c * hw_in];
                    gemm(Mat::new(p[1].values(), c, okk), gc, &mut gx, 0.0);
                    gx
                });
                let gw = p[1].requires_grad().then(|| {
                    let mut gw = vec![0.0; c * okk];
                    gemm(Mat::new(p[0].values(), c, hw_in), gc.t(), &mut gw, 0.0);
                    gw
                });
                let mut grads = vec![gx, gw];
                if p.len() == 3 {
                    grads.push(Some(channel_sums(gout, hw_out)));
                }
                grads
            }),
        ))
    }

    /// Zero-mean, unit-variance per channel over the spatial axes.
    pub fn instance_norm(&self, eps: f64) -> Result<Tensor> {
        let (c, h, w) = chw(self, "instance_norm")?;
        let hw = h * w;
        let n = hw as f64;
        let mut out = Vec::with_capacity(c * hw);
        let mut inv_std = Vec::with_capacity(c);
        for plane in self.values().chunks(hw) {
            let mean = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(plane.iter().map(|v| (v - mean) * is));
        }
        Ok(Tensor::from_op(
            "instance_norm",
            out,
            vec![c, h, w],
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = Vec::with_capacity(g.len());
                for ((gp, yp), is) in g.chunks(hw).zip(y.chunks(hw)).zip(&inv_std) {
                    let gm = gp.iter().sum::<f64>() / n;
                    let gym = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / n;
                    gx.extend(gp.iter().zip(yp).map(|(g, y)| is * (g - gm - y * gym)));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `scale[c] · x[c] + shift[c]` for `x: [C, H, W]`.
    pub fn channel_affine(&self, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        let (c, h, w) = chw(self, "channel_affine")?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape("channel_affine", self.shape(), scale.shape()));
        }
        let hw = h * w;
        let (s, b) = (scale.values(), shift.values());
        let mut out = Vec::with_capacity(c * hw);
        for (k, plane) in self.values().chunks(hw).enumerate() {
            out.extend(plane.iter().map(|v| s[k] * v + b[k]));
        }
        Ok(Tensor::from_op(
            "channel_affine",
            out,
            vec![c, h, w],
            vec![self.clone(), scale.clone(), shift.clone()],
            Box::new(move |g, _, p| {
                let (x, s) = (p[0].values(), p[1].values());
                let mut gx = Vec::with_capacity(g.len());
                let mut gs = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for k in 0..c {
                    let gp = &g[k * hw..][..hw];
                    let xp = &x[k * hw..][..hw];
                    gx.extend(gp.iter().map(|v| v * s[k]));
                    gs[k] = gp.iter().zip(xp).map(|(a, b)| a * b).sum();
                    gb[k] = gp.iter().sum();
                }
                vec![Some(gx), Some(gs), Some(gb)]
            }),
        ))
    }
}
