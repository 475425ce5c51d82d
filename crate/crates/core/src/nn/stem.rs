//! Convolutional stem and inter-stage downsampling.

use crate::error::{Error, Result};
use crate::nn::block::init_tensor;
use crate::nn::{batchnorm_folded, conv2d, gelu, layernorm, LN_EPS};
use crate::tensor::{Rng, Scalar, Tensor};

/// Strides of the four stem convolutions; composite reduction ×4.
pub const STEM_STRIDES: [usize; 4] = [2, 1, 1, 2];

/// 3×3 convolution (no bias) followed by folded batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bn_scale: Tensor<T>,
    pub bn_shift: Tensor<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        ConvBn {
            weight: Tensor::zeros(&[cout, cin, 3, 3]),
            bn_scale: Tensor::zeros(&[cout]),
            bn_shift: Tensor::zeros(&[cout]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemParams<T: Scalar = f32> {
    pub convs: Vec<ConvBn<T>>,
}

impl<T: Scalar> StemParams<T> {
    /// Channel path `3 → C/2 → C/2 → C/2 → C`.
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        let mid = out_channels / 2;
        let path = [in_channels, mid, mid, mid, out_channels];
        StemParams {
            convs: path.windows(2).map(|p| ConvBn::zeros(p[0], p[1])).collect(),
        }
    }

    pub fn init(in_channels: usize, out_channels: usize, rng: &mut Rng, std: f64) -> Self {
        let mut p = Self::zeros(in_channels, out_channels);
        for (name, t) in p.tensors_mut() {
            init_tensor(&name, t, rng, std);
        }
        p
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    (format!("conv{i}.weight"), &c.weight),
                    (format!("conv{i}.bn.weight"), &c.bn_scale),
                    (format!("conv{i}.bn.bias"), &c.bn_shift),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.convs
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    (format!("conv{i}.weight"), &mut c.weight),
                    (format!("conv{i}.bn.weight"), &mut c.bn_scale),
                    (format!("conv{i}.bn.bias"), &mut c.bn_shift),
                ]
            })
            .collect()
    }
}

pub fn stem<T: Scalar>(image: &Tensor<T>, p: &StemParams<T>) -> Result<Tensor<T>> {
    if p.convs.len() != STEM_STRIDES.len() {
        return Err(Error::shape("stem needs exactly four convolutions"));
    }
    let mut x = image.clone();
    for (conv, &stride) in p.convs.iter().zip(&STEM_STRIDES) {
        x = conv2d(&x, &conv.weight, None, stride, 1, 1)?;
        x = gelu(&batchnorm_folded(&x, &conv.bn_scale, &conv.bn_shift)?);
    }
    Ok(x)
}

/// Dense 3×3 stride-2 convolution followed by LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm_scale: Tensor<T>,
    pub norm_shift: Tensor<T>,
}

impl<T: Scalar> DownsampleParams<T> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        DownsampleParams {
            weight: Tensor::zeros(&[cout, cin, 3, 3]),
            bias: Tensor::zeros(&[cout]),
            norm_scale: Tensor::zeros(&[cout]),
            norm_shift: Tensor::zeros(&[cout]),
        }
    }

    pub fn init(cin: usize, cout: usize, rng: &mut Rng, std: f64) -> Self {
        let mut p = Self::zeros(cin, cout);
        for (name, t) in p.tensors_mut() {
            init_tensor(&name, t, rng, std);
        }
        p
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("conv.weight".into(), &self.weight),
            ("conv.bias".into(), &self.bias),
            ("norm.weight".into(), &self.norm_scale),
            ("norm.bias".into(), &self.norm_shift),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("conv.weight".into(), &mut self.weight),
            ("conv.bias".into(), &mut self.bias),
            ("norm.weight".into(), &mut self.norm_scale),
            ("norm.bias".into(), &mut self.norm_shift),
        ]
    }
}

pub fn downsample<T: Scalar>(x: &Tensor<T>, p: &DownsampleParams<T>) -> Result<Tensor<T>> {
    let y = conv2d(x, &p.weight, Some(&p.bias), 2, 1, 1)?;
    layernorm(&y, &p.norm_scale, &p.norm_shift, LN_EPS)
}
