//! Per-site channel mixing (1×1 convolution) as a single gemm over all sites.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `y[:, s] = W · x[:, s] + b` for every spatial site `s`.
///
/// `x` is `[C_in, ...spatial]`, `weight` is `[C_out, C_in]`.
pub fn pointwise<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (cout, cin) = weight_dims(weight)?;
    if x.shape().first() != Some(&cin) {
        return Err(Error::shape(format!(
            "pointwise weight expects {cin} input channels, got shape {:?}",
            x.shape()
        )));
    }
    let n = x.len() / cin.max(1);
    let mut shape = x.shape().to_vec();
    shape[0] = cout;
    let mut out = Tensor::zeros(&shape);
    T::gemm(cout, cin, n, weight.data(), (cin as isize, 1), x.data(), (n as isize, 1), T::zero(), out.data_mut());
    if let Some(b) = bias {
        b.expect_shape(&[cout])?;
        if n > 0 {
            out.data_mut()
                .chunks_mut(n)
                .zip(b.data())
                .for_each(|(row, &bv)| row.iter_mut().for_each(|v| *v = *v + bv));
        }
    }
    Ok(out)
}

/// Returns `(grad_x, grad_weight, grad_bias)` for [`pointwise`].
pub fn pointwise_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (cout, cin) = weight_dims(weight)?;
    let n = x.len() / cin.max(1);
    if grad_out.len() != cout * n || grad_out.shape().first() != Some(&cout) {
        return Err(Error::shape(format!(
            "pointwise cotangent {:?} does not match {cout} outputs over {n} sites",
            grad_out.shape()
        )));
    }
    let mut gx = Tensor::zeros(x.shape());
    // W^T · G
    T::gemm(cin, cout, n, weight.data(), (1, cin as isize), grad_out.data(), (n as isize, 1), T::zero(), gx.data_mut());
    let mut gw = Tensor::zeros(weight.shape());
    // G · X^T
    T::gemm(cout, n, cin, grad_out.data(), (n as isize, 1), x.data(), (1, n as isize), T::zero(), gw.data_mut());
    let gb = if n == 0 {
        Tensor::zeros(&[cout])
    } else {
        Tensor::from_vec(&[cout], grad_out.data().chunks(n).map(|r| r.iter().copied().sum()).collect())?
    };
    Ok((gx, gw, gb))
}

fn weight_dims<T: Scalar>(weight: &Tensor<T>) -> Result<(usize, usize)> {
    match *weight.shape() {
        [o, i] => Ok((o, i)),
        ref s => Err(Error::shape(format!("pointwise weight must be [C_out, C_in], got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn matches_explicit_sum() {
        let mut rng = Rng::seed(8);
        let x = Tensor::<f64>::randn(&[3, 2, 4], &mut rng, 1.0);
        let w = Tensor::<f64>::randn(&[5, 3], &mut rng, 1.0);
        let b = Tensor::<f64>::randn(&[5], &mut rng, 1.0);
        let y = pointwise(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[5, 2, 4]);
        for o in 0..5 {
            for s in 0..8 {
                let want: f64 = b.data()[o] + (0..3).map(|c| w.data()[o * 3 + c] * x.data()[c * 8 + s]).sum::<f64>();
                assert!((y.data()[o * 8 + s] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_explicit_sums() {
        let mut rng = Rng::seed(9);
        let x = Tensor::<f64>::randn(&[3, 5], &mut rng, 1.0);
        let w = Tensor::<f64>::randn(&[2, 3], &mut rng, 1.0);
        let g = Tensor::<f64>::randn(&[2, 5], &mut rng, 1.0);
        let (gx, gw, gb) = pointwise_backward(&g, &x, &w).unwrap();
        for c in 0..3 {
            for s in 0..5 {
                let want: f64 = (0..2).map(|o| w.data()[o * 3 + c] * g.data()[o * 5 + s]).sum();
                assert!((gx.data()[c * 5 + s] - want).abs() < 1e-12);
            }
        }
        for o in 0..2 {
            for c in 0..3 {
                let want: f64 = (0..5).map(|s| g.data()[o * 5 + s] * x.data()[c * 5 + s]).sum();
                assert!((gw.data()[o * 3 + c] - want).abs() < 1e-12);
            }
            let want: f64 = g.data()[o * 5..o * 5 + 5].iter().sum();
            assert!((gb.data()[o] - want).abs() < 1e-12);
        }
    }
}
