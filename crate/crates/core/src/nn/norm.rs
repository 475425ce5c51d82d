use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Normalizes the channel vector at every spatial site of `[C, ...]`, then
/// applies the per-channel affine. Statistics accumulate in `f64`.
pub fn layernorm<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let c = *x.shape().first().ok_or_else(|| Error::shape("layernorm on a scalar"))?;
    scale.expect_shape(&[c])?;
    shift.expect_shape(&[c])?;
    if eps <= 0.0 {
        return Err(Error::config(format!("layernorm eps must be positive, got {eps}")));
    }
    let n = x.len() / c.max(1);
    let mut out = Tensor::zeros(x.shape());
    let (xd, sd, bd) = (x.data(), scale.data(), shift.data());
    let od = out.data_mut();
    for s in 0..n {
        let mean = (0..c).map(|ch| xd[ch * n + s].as_f64()).sum::<f64>() / c as f64;
        let var = (0..c).map(|ch| (xd[ch * n + s].as_f64() - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ch in 0..c {
            let z = (xd[ch * n + s].as_f64() - mean) * inv;
            od[ch * n + s] = T::of_f64(z * sd[ch].as_f64() + bd[ch].as_f64());
        }
    }
    Ok(out)
}

/// Inference-form batch norm: `y = x · scale[c] + shift[c]`.
pub fn batchnorm_folded<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x.shape().first().ok_or_else(|| Error::shape("batchnorm on a scalar"))?;
    scale.expect_shape(&[c])?;
    shift.expect_shape(&[c])?;
    let n = x.len() / c.max(1);
    let mut out = x.clone();
    if n > 0 {
        out.data_mut()
            .chunks_mut(n)
            .zip(scale.data().iter().zip(shift.data()))
            .for_each(|(p, (&a, &b))| p.iter_mut().for_each(|v| *v = *v * a + b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn constant_channels_give_shift() {
        let x = Tensor::<f32>::new(&[4, 3, 2], 2.5).unwrap();
        let scale = Tensor::new(&[4], 3.0).unwrap();
        let shift = Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = layernorm(&x, &scale, &shift, LN_EPS).unwrap();
        for ch in 0..4 {
            for s in 0..6 {
                assert_eq!(y.data()[ch * 6 + s], shift.data()[ch]);
            }
        }
    }

    #[test]
    fn normalized_input_is_fixed_point() {
        // channel vector [1, -1, 1, -1]: mean 0, variance 1
        let x = Tensor::<f64>::from_vec(&[4, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = layernorm(&x, &Tensor::new(&[4], 1.0).unwrap(), &Tensor::zeros(&[4]), LN_EPS).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn f32_matches_f64_oracle() {
        let mut rng = Rng::seed(12);
        let x = Tensor::<f64>::randn(&[16, 5, 3], &mut rng, 2.0);
        let scale = Tensor::<f64>::randn(&[16], &mut rng, 1.0);
        let shift = Tensor::<f64>::randn(&[16], &mut rng, 1.0);
        let got = layernorm(&x.cast::<f32>(), &scale.cast(), &shift.cast(), LN_EPS).unwrap();
        let xs = x.cast::<f32>().cast::<f64>();
        let (sc, sh) = (scale.cast::<f32>().cast::<f64>(), shift.cast::<f32>().cast::<f64>());
        for s in 0..15 {
            let col: Vec<f64> = (0..16).map(|c| xs.data()[c * 15 + s]).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            for c in 0..16 {
                let want = (col[c] - mean) / (var + LN_EPS).sqrt() * sc.data()[c] + sh.data()[c];
                assert!((got.data()[c * 15 + s] as f64 - want).abs() < 1e-6);
            }
        }
    }
}
