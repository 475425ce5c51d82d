//! The SSViT block: conditional positional encoding, then pre-norm S³A and
//! pre-norm FFN, each wrapped in a residual.

use crate::error::{Error, Result};
use crate::nn::{conv2d, gelu, layernorm, pointwise, LN_EPS};
use crate::s3a::{s3a_forward, S3AConfig, S3AParams};
use crate::tensor::{Rng, Scalar, Tensor};

pub const CPE_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T: Scalar = f32> {
    /// Depthwise `[C, 1, 3, 3]`.
    pub cpe_filter: Tensor<T>,
    pub cpe_bias: Tensor<T>,
    pub norm1_scale: Tensor<T>,
    pub norm1_shift: Tensor<T>,
    pub s3a: S3AParams<T>,
    pub norm2_scale: Tensor<T>,
    pub norm2_shift: Tensor<T>,
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn zeros(cfg: &S3AConfig, ffn_ratio: usize) -> Self {
        let c = cfg.channels;
        let hidden = ffn_ratio * c;
        BlockParams {
            cpe_filter: Tensor::zeros(&[c, 1, CPE_KERNEL, CPE_KERNEL]),
            cpe_bias: Tensor::zeros(&[c]),
            norm1_scale: Tensor::zeros(&[c]),
            norm1_shift: Tensor::zeros(&[c]),
            s3a: S3AParams::zeros(cfg),
            norm2_scale: Tensor::zeros(&[c]),
            norm2_shift: Tensor::zeros(&[c]),
            fc1_weight: Tensor::zeros(&[hidden, c]),
            fc1_bias: Tensor::zeros(&[hidden]),
            fc2_weight: Tensor::zeros(&[c, hidden]),
            fc2_bias: Tensor::zeros(&[c]),
        }
    }

    /// Weights `N(0, std²)`, zero biases and shifts, unit norm scales.
    pub fn init(cfg: &S3AConfig, ffn_ratio: usize, rng: &mut Rng, std: f64) -> Self {
        let mut p = Self::zeros(cfg, ffn_ratio);
        for (name, t) in p.tensors_mut() {
            init_tensor(&name, t, rng, std);
        }
        p
    }

    pub fn ffn_ratio(&self) -> usize {
        self.fc1_weight.shape()[0] / self.fc1_weight.shape()[1].max(1)
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<(String, &Tensor<T>)> = vec![
            ("cpe.weight".into(), &self.cpe_filter),
            ("cpe.bias".into(), &self.cpe_bias),
            ("norm1.weight".into(), &self.norm1_scale),
            ("norm1.bias".into(), &self.norm1_shift),
        ];
        v.extend(self.s3a.tensors().into_iter().map(|(n, t)| (format!("s3a.{n}"), t)));
        v.extend([
            ("norm2.weight".into(), &self.norm2_scale),
            ("norm2.bias".into(), &self.norm2_shift),
            ("ffn.fc1.weight".into(), &self.fc1_weight),
            ("ffn.fc1.bias".into(), &self.fc1_bias),
            ("ffn.fc2.weight".into(), &self.fc2_weight),
            ("ffn.fc2.bias".into(), &self.fc2_bias),
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v: Vec<(String, &mut Tensor<T>)> = vec![
            ("cpe.weight".into(), &mut self.cpe_filter),
            ("cpe.bias".into(), &mut self.cpe_bias),
            ("norm1.weight".into(), &mut self.norm1_scale),
            ("norm1.bias".into(), &mut self.norm1_shift),
        ];
        v.extend(self.s3a.tensors_mut().into_iter().map(|(n, t)| (format!("s3a.{n}"), t)));
        v.extend([
            ("norm2.weight".into(), &mut self.norm2_scale),
            ("norm2.bias".into(), &mut self.norm2_shift),
            ("ffn.fc1.weight".into(), &mut self.fc1_weight),
            ("ffn.fc1.bias".into(), &mut self.fc1_bias),
            ("ffn.fc2.weight".into(), &mut self.fc2_weight),
            ("ffn.fc2.bias".into(), &mut self.fc2_bias),
        ]);
        v
    }
}

/// Shared init rule for named parameters: norm scales start at one, biases
/// and shifts at zero, everything else `N(0, std²)`.
pub(crate) fn init_tensor<T: Scalar>(name: &str, t: &mut Tensor<T>, rng: &mut Rng, std: f64) {
    let last = name.rsplit('.').next().unwrap_or(name);
    let is_norm = name.split('.').any(|seg| seg.starts_with("norm") || seg == "bn");
    if last == "bias" || last.starts_with("b_") {
        *t = Tensor::zeros(t.shape());
    } else if is_norm {
        *t = Tensor::new(t.shape(), T::one()).expect("validated shape");
    } else {
        *t = Tensor::randn(t.shape(), rng, std);
    }
}

/// `x + depthwise3x3(x)`.
pub fn cpe<T: Scalar>(x: &Tensor<T>, filter: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape().first().copied().unwrap_or(0);
    if filter.shape() != [c, 1, CPE_KERNEL, CPE_KERNEL] {
        return Err(Error::shape(format!(
            "CPE filter must be [{c}, 1, 3, 3], got {:?}",
            filter.shape()
        )));
    }
    let mut y = conv2d(x, filter, Some(bias), 1, CPE_KERNEL / 2, c)?;
    y.add_assign(x)?;
    Ok(y)
}

/// `W2 · GELU(W1 · x + b1) + b2` at every site.
pub fn ffn<T: Scalar>(x: &Tensor<T>, p: &BlockParams<T>) -> Result<Tensor<T>> {
    let hidden = gelu(&pointwise(x, &p.fc1_weight, Some(&p.fc1_bias))?);
    pointwise(&hidden, &p.fc2_weight, Some(&p.fc2_bias))
}

pub fn ssvit_block<T: Scalar>(x: &Tensor<T>, p: &BlockParams<T>, cfg: &S3AConfig) -> Result<Tensor<T>> {
    let x1 = cpe(x, &p.cpe_filter, &p.cpe_bias)?;
    let (attn, _) = s3a_forward(&layernorm(&x1, &p.norm1_scale, &p.norm1_shift, LN_EPS)?, cfg, &p.s3a)?;
    let y = attn.add(&x1)?;
    let mut z = ffn(&layernorm(&y, &p.norm2_scale, &p.norm2_shift, LN_EPS)?, p)?;
    z.add_assign(&y)?;
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::act::gelu_scalar;

    #[test]
    fn zero_params_are_identity() {
        let mut rng = Rng::seed(1);
        let cfg = S3AConfig::new(8, 2);
        let p = BlockParams::<f32>::zeros(&cfg, 3);
        for (h, w) in [(5, 7), (1, 1), (9, 2)] {
            let x = Tensor::<f32>::randn(&[8, h, w], &mut rng, 1.0);
            assert_eq!(ssvit_block(&x, &p, &cfg).unwrap(), x);
        }
    }

    #[test]
    fn cpe_zero_filter_is_identity() {
        let x = Tensor::<f64>::randn(&[3, 4, 6], &mut Rng::seed(2), 1.0);
        let y = cpe(&x, &Tensor::zeros(&[3, 1, 3, 3]), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn cpe_matches_direct_loops() {
        let mut rng = Rng::seed(3);
        let x = Tensor::<f64>::randn(&[2, 3, 5], &mut rng, 1.0);
        let f = Tensor::<f64>::randn(&[2, 1, 3, 3], &mut rng, 1.0);
        let b = Tensor::<f64>::randn(&[2], &mut rng, 1.0);
        let y = cpe(&x, &f, &b).unwrap();
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let mut want = x.get(&[c, i, j]).unwrap() + b.data()[c];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (yy, xx) = (i as isize + dy as isize - 1, j as isize + dx as isize - 1);
                            if (0..3).contains(&yy) && (0..5).contains(&xx) {
                                want += f.get(&[c, 0, dy, dx]).unwrap() * x.get(&[c, yy as usize, xx as usize]).unwrap();
                            }
                        }
                    }
                    assert!((y.get(&[c, i, j]).unwrap() - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ffn_zero_weights_give_bias() {
        let cfg = S3AConfig::new(4, 1);
        let mut p = BlockParams::<f64>::zeros(&cfg, 3);
        p.fc2_bias = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        p.fc1_bias = Tensor::new(&[12], 0.7).unwrap();
        let x = Tensor::<f64>::randn(&[4, 2, 2], &mut Rng::seed(0), 1.0);
        let y = ffn(&x, &p).unwrap();
        for c in 0..4 {
            assert!(y.data()[c * 4..c * 4 + 4].iter().all(|&v| v == p.fc2_bias.data()[c]));
        }
        assert_eq!(gelu_scalar(0.0f64), 0.0);
    }

    #[test]
    fn block_matches_straight_line_transcription() {
        let mut rng = Rng::seed(4);
        let mut cfg = S3AConfig::new(4, 2);
        cfg.anchors = (3, 3);
        let mut p = BlockParams::<f64>::init(&cfg, 3, &mut rng, 0.3);
        for (_, t) in p.tensors_mut() {
            *t = t.add(&Tensor::randn(t.shape(), &mut rng, 0.1)).unwrap();
        }
        let (c, h, w) = (4usize, 5usize, 4usize);
        let x = Tensor::<f64>::randn(&[c, h, w], &mut rng, 1.0);

        // straight-line transcription with scalar loops
        let at = |t: &Tensor<f64>, ch: usize, i: usize, j: usize| t.data()[(ch * h + i) * w + j];
        let mut x1 = x.clone();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = p.cpe_bias.data()[ch];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (yy, xx) = (i as isize + dy as isize - 1, j as isize + dx as isize - 1);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                acc += p.cpe_filter.data()[ch * 9 + dy * 3 + dx] * at(&x, ch, yy as usize, xx as usize);
                            }
                        }
                    }
                    x1.data_mut()[(ch * h + i) * w + j] += acc;
                }
            }
        }
        let ln = |t: &Tensor<f64>, s: &Tensor<f64>, b: &Tensor<f64>| {
            let mut o = t.clone();
            for site in 0..h * w {
                let col: Vec<f64> = (0..c).map(|ch| t.data()[ch * h * w + site]).collect();
                let m = col.iter().sum::<f64>() / c as f64;
                let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / c as f64;
                for ch in 0..c {
                    o.data_mut()[ch * h * w + site] = (col[ch] - m) / (v + 1e-6).sqrt() * s.data()[ch] + b.data()[ch];
                }
            }
            o
        };
        let attn = crate::oracle::oracle_s3a(&ln(&x1, &p.norm1_scale, &p.norm1_shift), &cfg, &p.s3a).unwrap();
        let y = attn.add(&x1).unwrap();
        let yn = ln(&y, &p.norm2_scale, &p.norm2_shift);
        let mut z = y.clone();
        for site in 0..h * w {
            let hid: Vec<f64> = (0..12)
                .map(|k| {
                    let pre = p.fc1_bias.data()[k] + (0..c).map(|ch| p.fc1_weight.data()[k * c + ch] * yn.data()[ch * h * w + site]).sum::<f64>();
                    0.5 * pre * (1.0 + libm::erf(pre / 2f64.sqrt()))
                })
                .collect();
            for ch in 0..c {
                z.data_mut()[ch * h * w + site] += p.fc2_bias.data()[ch] + (0..12).map(|k| p.fc2_weight.data()[ch * 12 + k] * hid[k]).sum::<f64>();
            }
        }
        let got = ssvit_block(&x, &p, &cfg).unwrap();
        assert!(got.max_abs_diff(&z).unwrap() < 1e-5);
    }
}
