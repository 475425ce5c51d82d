use crate::tensor::{Scalar, Tensor};

/// Exact GELU, `x · Φ(x)` with `Φ` evaluated through `erf`.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    T::of_f64(0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        assert_eq!(gelu_scalar(0.0f32), 0.0);
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((gelu_scalar(1.0f32) - 0.8413).abs() < 1e-4);
        // Φ(-1) = 1 - Φ(1)
        assert!((gelu_scalar(-1.0f64) + (1.0 - 0.841_344_746_068_543)).abs() < 1e-12);
    }
}
