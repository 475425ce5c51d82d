//! 2D cross-correlation with zero padding over `[C, H, W]` feature maps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn conv_out_side(side: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = side + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn dims3<T: Scalar>(x: &Tensor<T>) -> Result<[usize; 3]> {
    match *x.shape() {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(Error::shape(format!("feature map must be [C, H, W], got {s:?}"))),
    }
}

/// General grouped convolution.
///
/// `filter` is `[C_out, C_in / groups, k_h, k_w]`; depthwise when
/// `groups == C_in == C_out`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    filter: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let [cin, h, w] = dims3(x)?;
    let [cout, cg, kh, kw] = match *filter.shape() {
        [a, b, c, d] => [a, b, c, d],
        ref s => return Err(Error::shape(format!("filter must be rank 4, got {s:?}"))),
    };
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cg * groups != cin {
        return Err(Error::shape(format!(
            "groups {groups} incompatible with {cin} -> {cout} channels (filter group width {cg})"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(format!("filter sides must be odd, got {kh}x{kw}")));
    }
    if let Some(b) = bias {
        b.expect_shape(&[cout])?;
    }
    let (ho, wo) = match (
        conv_out_side(h, kh, stride, padding),
        conv_out_side(w, kw, stride, padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(format!(
                "{h}x{w} map too small for {kh}x{kw} filter with padding {padding}, stride {stride}"
            )))
        }
    };

    if groups == cin && cg == 1 && cout == cin {
        let f = filter.clone().reshape(&[cin, kh, kw])?;
        return depthwise_impl(x, &f, bias, stride, padding, ho, wo);
    }

    let og = cout / groups;
    let patch = cg * kh * kw;
    let n = ho * wo;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    let mut cols = vec![T::zero(); patch * n];
    for g in 0..groups {
        im2col(x, g * cg, kh, kw, stride, padding, ho, wo, &mut cols);
        let wslice = &filter.data()[g * og * patch..(g + 1) * og * patch];
        let oslice = &mut out.data_mut()[g * og * n..(g + 1) * og * n];
        T::gemm(og, patch, n, wslice, (patch as isize, 1), &cols, (n as isize, 1), T::zero(), oslice);
    }
    if let Some(b) = bias {
        add_channel_bias(&mut out, b);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &Tensor<T>,
    c0: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let [_, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let xd = x.data();
    let n = ho * wo;
    cols.par_chunks_mut(n).enumerate().for_each(|(row, dst)| {
        let c = row / (kh * kw);
        let (dy, dx) = ((row / kw) % kh, row % kw);
        let plane = &xd[(c0 + c) * h * w..][..h * w];
        for oy in 0..ho {
            let iy = (oy * stride + dy) as isize - padding as isize;
            for ox in 0..wo {
                let ix = (ox * stride + dx) as isize - padding as isize;
                dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    plane[iy as usize * w + ix as usize]
                } else {
                    T::zero()
                };
            }
        }
    });
}

fn add_channel_bias<T: Scalar>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let plane = out.len() / bias.len().max(1);
    if plane == 0 {
        return;
    }
    out.data_mut()
        .chunks_mut(plane)
        .zip(bias.data())
        .for_each(|(p, &b)| p.iter_mut().for_each(|v| *v = *v + b));
}

fn depthwise_impl<T: Scalar>(
    x: &Tensor<T>,
    filter: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Result<Tensor<T>> {
    let [c, h, w] = dims3(x)?;
    let (kh, kw) = (filter.shape()[1], filter.shape()[2]);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    if out.is_empty() {
        return Ok(out);
    }
    let (xd, fd) = (x.data(), filter.data());
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(ch, dst)| {
            let plane = &xd[ch * h * w..][..h * w];
            let taps = &fd[ch * kh * kw..][..kh * kw];
            let b = bias.map_or(T::zero(), |b| b.data()[ch]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b;
                    for dy in 0..kh {
                        let iy = (oy * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for dx in 0..kw {
                            let ix = (ox * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            acc = acc + taps[dy * kw + dx] * plane[iy as usize * w + ix as usize];
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        });
    Ok(out)
}

/// Stride-1 depthwise convolution with `filter` shaped `[C, k, k]`,
/// "same" zero padding.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, filter: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [c, h, w] = dims3(x)?;
    let k = match *filter.shape() {
        [fc, a, b] if fc == c && a % 2 == 1 && a == b => a,
        ref s => {
            return Err(Error::shape(format!(
                "depthwise filter must be [{c}, k, k] with odd k, got {s:?}"
            )))
        }
    };
    if let Some(b) = bias {
        b.expect_shape(&[c])?;
    }
    depthwise_impl(x, filter, bias, 1, k / 2, h, w)
}

/// Gradients of [`depthwise_conv2d`]: `(input, filter, bias)`.
pub fn depthwise_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    filter: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [c, h, w] = dims3(x)?;
    grad_out.expect_shape(x.shape())?;
    let k = filter.shape()[1];
    let pad = (k / 2) as isize;
    let mut gx = Tensor::zeros(x.shape());
    let mut gf = Tensor::zeros(filter.shape());
    let mut gb = Tensor::zeros(&[c]);
    if x.is_empty() {
        return Ok((gx, gf, gb));
    }
    let (gd, xd, fd) = (grad_out.data(), x.data(), filter.data());
    gx.data_mut()
        .par_chunks_mut(h * w)
        .zip(gf.data_mut().par_chunks_mut(k * k))
        .zip(gb.data_mut().par_iter_mut())
        .enumerate()
        .for_each(|(ch, ((gxp, gfp), gbv))| {
            let g = &gd[ch * h * w..][..h * w];
            let xp = &xd[ch * h * w..][..h * w];
            let taps = &fd[ch * k * k..][..k * k];
            *gbv = g.iter().copied().sum();
            for oy in 0..h {
                for ox in 0..w {
                    let go = g[oy * w + ox];
                    for dy in 0..k {
                        let iy = oy as isize + dy as isize - pad;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = ox as isize + dx as isize - pad;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let src = iy as usize * w + ix as usize;
                            gfp[dy * k + dx] = gfp[dy * k + dx] + go * xp[src];
                            gxp[src] = gxp[src] + go * taps[dy * k + dx];
                        }
                    }
                }
            }
        });
    Ok((gx, gf, gb))
}
