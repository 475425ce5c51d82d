//! Clamped, optionally dilated 2D neighborhood attention.
//!
//! Every query at `(i, j)` attends to a `k_eff_h × k_eff_w` lattice of key
//! positions with step `(d_h, d_w)`. Near the borders the lattice is
//! translated (its start is clamped) so that it stays inside the map; the
//! step is never compressed and no position is masked, so every row of
//! attention weights has the same length and sums to one.
//!
//! Tensors are laid out `[heads, H, W, head_dim]`; scores and attention maps
//! are `[heads, H, W, k_eff_h · k_eff_w]` with the lattice enumerated
//! height-major (`n = r · k_eff_w + c`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    pub kernel: (usize, usize),
    pub dilation: (usize, usize),
}

impl NeighborhoodSpec {
    pub fn new(kernel: (usize, usize), dilation: (usize, usize)) -> Result<Self> {
        if kernel.0.is_multiple_of(2) || kernel.1.is_multiple_of(2) {
            return Err(Error::config(format!(
                "neighborhood kernel {kernel:?} must be odd on both axes"
            )));
        }
        if dilation.0 == 0 || dilation.1 == 0 {
            return Err(Error::config(format!(
                "neighborhood dilation {dilation:?} must be >= 1"
            )));
        }
        Ok(NeighborhoodSpec { kernel, dilation })
    }

    pub fn square(kernel: usize, dilation: usize) -> Result<Self> {
        Self::new((kernel, kernel), (dilation, dilation))
    }
}

/// Largest odd `k' <= k` whose dilated span `(k' - 1)·d + 1` fits in `side`
/// (at least 1).
pub fn effective_kernel(side: usize, k: usize, d: usize) -> usize {
    debug_assert!(d >= 1);
    if side == 0 || k == 0 {
        return 1;
    }
    let fit = (side - 1) / d + 1;
    let fit_odd = if fit % 2 == 1 { fit } else { fit - 1 };
    k.min(fit_odd).max(1)
}

fn lattice_start(center: usize, side: usize, k_eff: usize, d: usize) -> usize {
    let half = (k_eff / 2) * d;
    let max_start = side - 1 - (k_eff - 1) * d;
    center.saturating_sub(half).min(max_start)
}

/// Key positions along one axis for the query at `center`.
pub fn clamped_lattice(center: usize, side: usize, k: usize, d: usize) -> Result<Vec<usize>> {
    if side == 0 {
        return Err(Error::EmptyDomain("lattice over an axis of extent 0".into()));
    }
    if k.is_multiple_of(2) || d == 0 {
        return Err(Error::config(format!(
            "lattice needs odd kernel and step >= 1 (got k={k}, d={d})"
        )));
    }
    if center >= side {
        return Err(Error::shape(format!(
            "lattice center {center} outside axis of extent {side}"
        )));
    }
    let k_eff = effective_kernel(side, k, d);
    let start = lattice_start(center, side, k_eff, d);
    Ok((0..k_eff).map(|j| start + j * d).collect())
}

/// Precomputed lattice starts for every query position on one axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisLattice {
    side: usize,
    len: usize,
    step: usize,
    starts: Vec<usize>,
}

impl AxisLattice {
    pub fn new(side: usize, k: usize, d: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::EmptyDomain("lattice over an axis of extent 0".into()));
        }
        if k.is_multiple_of(2) || d == 0 {
            return Err(Error::config(format!(
                "lattice needs odd kernel and step >= 1 (got k={k}, d={d})"
            )));
        }
        let len = effective_kernel(side, k, d);
        let starts = (0..side).map(|c| lattice_start(c, side, len, d)).collect();
        Ok(AxisLattice {
            side,
            len,
            step: d,
            starts,
        })
    }

    /// Builds a lattice from explicit per-query starts. Every member must
    /// land inside the axis.
    pub fn from_starts(side: usize, len: usize, step: usize, starts: Vec<usize>) -> Result<Self> {
        if starts.len() != side || len == 0 || step == 0 {
            return Err(Error::shape("inconsistent explicit lattice"));
        }
        if starts.iter().any(|&s| s + (len - 1) * step >= side) {
            return Err(Error::shape("explicit lattice leaves the axis"));
        }
        Ok(AxisLattice {
            side,
            len,
            step,
            starts,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn indices(&self, center: usize) -> impl Iterator<Item = usize> + '_ {
        let s = self.starts[center];
        (0..self.len).map(move |j| s + j * self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lattice2d {
    pub rows: AxisLattice,
    pub cols: AxisLattice,
}

impl Lattice2d {
    pub fn new(height: usize, width: usize, spec: &NeighborhoodSpec) -> Result<Self> {
        Ok(Lattice2d {
            rows: AxisLattice::new(height, spec.kernel.0, spec.dilation.0)?,
            cols: AxisLattice::new(width, spec.kernel.1, spec.dilation.1)?,
        })
    }

    /// Neighbors per query.
    pub fn size(&self) -> usize {
        self.rows.len * self.cols.len
    }

    pub fn height(&self) -> usize {
        self.rows.side
    }

    pub fn width(&self) -> usize {
        self.cols.side
    }

    /// Flattened `(row, col)` key sites for query `(i, j)` in enumeration order.
    pub fn sites(&self, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .indices(i)
            .flat_map(move |r| self.cols.indices(j).map(move |c| (r, c)))
    }
}

/// Post-softmax attention weights, `[heads, H, W, neighbors]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMap<T: Scalar = f32> {
    values: Tensor<T>,
}

impl<T: Scalar> AttnMap<T> {
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    /// Wraps already-normalized weights without re-checking them.
    pub fn from_weights(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::shape("attention map must be rank 4"));
        }
        Ok(AttnMap { values })
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(format!("{what} must be [heads, H, W, dim], got {s:?}"))),
    }
}

fn check_lattice(lat: &Lattice2d, h: usize, w: usize) -> Result<()> {
    if lat.height() != h || lat.width() != w {
        return Err(Error::shape(format!(
            "lattice built for {}x{}, tensor is {h}x{w}",
            lat.height(),
            lat.width()
        )));
    }
    Ok(())
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y = *y + alpha * x);
}

/// `score[a,i,j,n] = <q[a,i,j], scale · k[a, site_n(i,j)]>` on an explicit lattice.
pub fn scores_on<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, lat: &Lattice2d, scale: T) -> Result<Tensor<T>> {
    let [heads, h, w, dh] = dims4(q, "q")?;
    k.expect_shape(q.shape())?;
    check_lattice(lat, h, w)?;
    let nb = lat.size();
    let mut out = Tensor::zeros(&[heads, h, w, nb]);
    if out.is_empty() {
        return Ok(out);
    }
    let (qd, kd) = (q.data(), k.data());
    out.data_mut()
        .par_chunks_mut(w * nb)
        .enumerate()
        .for_each(|(row, chunk)| {
            let (a, i) = (row / h, row % h);
            let head = a * h * w * dh;
            for j in 0..w {
                let qv = &qd[head + (i * w + j) * dh..][..dh];
                for (n, (r, c)) in lat.sites(i, j).enumerate() {
                    let kv = &kd[head + (r * w + c) * dh..][..dh];
                    chunk[j * nb + n] = scale * dot(qv, kv);
                }
            }
        });
    Ok(out)
}

pub fn neighborhood_scores<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    spec: &NeighborhoodSpec,
    scale: T,
) -> Result<Tensor<T>> {
    let [_, h, w, _] = dims4(q, "q")?;
    scores_on(q, k, &Lattice2d::new(h, w, spec)?, scale)
}

/// Max-subtracted softmax along the last axis.
pub fn softmax_rows<T: Scalar>(scores: &Tensor<T>) -> Result<AttnMap<T>> {
    dims4(scores, "scores")?;
    if let Some(bad) = scores.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite attention score {bad:?}")));
    }
    let nb = scores.shape()[3];
    let mut values = scores.clone();
    if nb > 0 {
        values.data_mut().par_chunks_mut(nb).for_each(|row| {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            let inv = total.recip();
            row.iter_mut().for_each(|v| *v = *v * inv);
        });
    }
    Ok(AttnMap { values })
}

/// `out[a,i,j] = Σ_n attn[a,i,j,n] · v[a, site_n(i,j)]` on an explicit lattice.
pub fn aggregate_on<T: Scalar>(attn: &AttnMap<T>, v: &Tensor<T>, lat: &Lattice2d) -> Result<Tensor<T>> {
    let [heads, h, w, dh] = dims4(v, "v")?;
    check_lattice(lat, h, w)?;
    let nb = lat.size();
    attn.values.expect_shape(&[heads, h, w, nb])?;
    let mut out = Tensor::zeros(&[heads, h, w, dh]);
    if out.is_empty() {
        return Ok(out);
    }
    let (ad, vd) = (attn.values.data(), v.data());
    out.data_mut()
        .par_chunks_mut(w * dh)
        .enumerate()
        .for_each(|(row, chunk)| {
            let (a, i) = (row / h, row % h);
            let head = a * h * w * dh;
            for j in 0..w {
                let weights = &ad[((a * h + i) * w + j) * nb..][..nb];
                let dst = &mut chunk[j * dh..(j + 1) * dh];
                for (n, (r, c)) in lat.sites(i, j).enumerate() {
                    axpy(weights[n], &vd[head + (r * w + c) * dh..][..dh], dst);
                }
            }
        });
    Ok(out)
}

pub fn neighborhood_aggregate<T: Scalar>(
    attn: &AttnMap<T>,
    v: &Tensor<T>,
    spec: &NeighborhoodSpec,
) -> Result<Tensor<T>> {
    let [_, h, w, _] = dims4(v, "v")?;
    aggregate_on(attn, v, &Lattice2d::new(h, w, spec)?)
}

/// Gradients of [`aggregate_on`] with respect to the weights and the values.
pub fn aggregate_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    attn: &AttnMap<T>,
    v: &Tensor<T>,
    lat: &Lattice2d,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [heads, h, w, dh] = dims4(v, "v")?;
    grad_out.expect_shape(v.shape())?;
    check_lattice(lat, h, w)?;
    let nb = lat.size();
    attn.values.expect_shape(&[heads, h, w, nb])?;
    let mut grad_attn = Tensor::zeros(&[heads, h, w, nb]);
    let mut grad_v = Tensor::zeros(v.shape());
    if grad_v.is_empty() {
        return Ok((grad_attn, grad_v));
    }
    let (gd, ad, vd) = (grad_out.data(), attn.values.data(), v.data());
    let plane = h * w * dh;
    grad_attn
        .data_mut()
        .par_chunks_mut(h * w * nb)
        .zip(grad_v.data_mut().par_chunks_mut(plane))
        .enumerate()
        .for_each(|(a, (ga, gv))| {
            let head = a * plane;
            for i in 0..h {
                for j in 0..w {
                    let site = i * w + j;
                    let g = &gd[head + site * dh..][..dh];
                    let weights = &ad[(a * h * w + site) * nb..][..nb];
                    for (n, (r, c)) in lat.sites(i, j).enumerate() {
                        let key = (r * w + c) * dh;
                        ga[site * nb + n] = dot(g, &vd[head + key..][..dh]);
                        axpy(weights[n], g, &mut gv[key..key + dh]);
                    }
                }
            }
        });
    Ok((grad_attn, grad_v))
}

/// Softmax Jacobian-vector product: `a ⊙ (g − Σ a ⊙ g)` per row.
pub fn softmax_backward<T: Scalar>(grad_attn: &Tensor<T>, attn: &AttnMap<T>) -> Result<Tensor<T>> {
    grad_attn.expect_shape(attn.values.shape())?;
    let nb = *attn.values.shape().last().unwrap_or(&0);
    let mut out = Tensor::zeros(grad_attn.shape());
    if nb == 0 || out.is_empty() {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(nb)
        .zip(grad_attn.data().par_chunks(nb))
        .zip(attn.values.data().par_chunks(nb))
        .for_each(|((o, g), a)| {
            let inner = dot(g, a);
            for n in 0..nb {
                o[n] = a[n] * (g[n] - inner);
            }
        });
    Ok(out)
}

/// Gradients of [`scores_on`] with respect to `q` and `k`.
pub fn scores_backward<T: Scalar>(
    grad_scores: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    lat: &Lattice2d,
    scale: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [heads, h, w, dh] = dims4(q, "q")?;
    k.expect_shape(q.shape())?;
    check_lattice(lat, h, w)?;
    let nb = lat.size();
    grad_scores.expect_shape(&[heads, h, w, nb])?;
    let mut grad_q = Tensor::zeros(q.shape());
    let mut grad_k = Tensor::zeros(k.shape());
    if grad_q.is_empty() {
        return Ok((grad_q, grad_k));
    }
    let (gd, qd, kd) = (grad_scores.data(), q.data(), k.data());
    let plane = h * w * dh;
    grad_q
        .data_mut()
        .par_chunks_mut(plane)
        .zip(grad_k.data_mut().par_chunks_mut(plane))
        .enumerate()
        .for_each(|(a, (gq, gk))| {
            let head = a * plane;
            for i in 0..h {
                for j in 0..w {
                    let site = i * w + j;
                    let g = &gd[(a * h * w + site) * nb..][..nb];
                    let qv = &qd[head + site * dh..][..dh];
                    for (n, (r, c)) in lat.sites(i, j).enumerate() {
                        let key = (r * w + c) * dh;
                        let coeff = scale * g[n];
                        axpy(coeff, &kd[head + key..][..dh], &mut gq[site * dh..(site + 1) * dh]);
                        axpy(coeff, qv, &mut gk[key..key + dh]);
                    }
                }
            }
        });
    Ok((grad_q, grad_k))
}

/// Activations saved by [`kernel_forward`] for [`kernel_backward`].
#[derive(Debug, Clone)]
pub struct KernelSaved<T: Scalar> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub attn: AttnMap<T>,
    pub lattice: Lattice2d,
    pub scale: T,
}

#[derive(Debug, Clone)]
pub struct KernelGrads<T: Scalar> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// scores → softmax → aggregate, keeping what the backward pass needs.
pub fn kernel_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &NeighborhoodSpec,
    scale: T,
) -> Result<(Tensor<T>, KernelSaved<T>)> {
    let [_, h, w, _] = dims4(q, "q")?;
    kernel_forward_on(q, k, v, Lattice2d::new(h, w, spec)?, scale)
}

/// [`kernel_forward`] on an explicit lattice.
pub fn kernel_forward_on<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    lattice: Lattice2d,
    scale: T,
) -> Result<(Tensor<T>, KernelSaved<T>)> {
    v.expect_shape(q.shape())?;
    let attn = softmax_rows(&scores_on(q, k, &lattice, scale)?)?;
    let out = aggregate_on(&attn, v, &lattice)?;
    let saved = KernelSaved {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        attn,
        lattice,
        scale,
    };
    Ok((out, saved))
}

pub fn kernel_backward<T: Scalar>(grad_out: &Tensor<T>, saved: &KernelSaved<T>) -> Result<KernelGrads<T>> {
    let [heads, h, w, _] = dims4(&saved.v, "saved v")
        .map_err(|_| Error::State("saved state holds no value tensor".into()))?;
    if saved.q.shape() != saved.v.shape()
        || saved.k.shape() != saved.v.shape()
        || saved.attn.values.shape() != [heads, h, w, saved.lattice.size()]
        || saved.lattice.height() != h
        || saved.lattice.width() != w
    {
        return Err(Error::State("saved kernel state is inconsistent".into()));
    }
    grad_out.expect_shape(saved.v.shape())?;
    let (grad_attn, grad_v) = aggregate_backward(grad_out, &saved.attn, &saved.v, &saved.lattice)?;
    let grad_scores = softmax_backward(&grad_attn, &saved.attn)?;
    let (grad_q, grad_k) = scores_backward(&grad_scores, &saved.q, &saved.k, &saved.lattice, saved.scale)?;
    Ok(KernelGrads {
        q: grad_q,
        k: grad_k,
        v: grad_v,
    })
}

/// Multiply-accumulates for scores plus aggregation; softmax is not counted.
pub fn kernel_flops(height: usize, width: usize, heads: usize, head_dim: usize, spec: &NeighborhoodSpec) -> u64 {
    let kh = effective_kernel(height, spec.kernel.0, spec.dilation.0);
    let kw = effective_kernel(width, spec.kernel.1, spec.dilation.1);
    2 * (height * width * heads * head_dim * kh * kw) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    #[test]
    fn lattice_examples() {
        assert_eq!(clamped_lattice(28, 56, 7, 8).unwrap(), vec![4, 12, 20, 28, 36, 44, 52]);
        assert_eq!(clamped_lattice(5, 56, 7, 8).unwrap(), vec![0, 8, 16, 24, 32, 40, 48]);
        for i in 0..9 {
            assert_eq!(clamped_lattice(i, 9, 1, 5).unwrap(), vec![i]);
        }
        assert!(matches!(clamped_lattice(0, 0, 3, 1), Err(Error::EmptyDomain(_))));
        // upper edge: start clamps to side - 1 - 48 = 7
        assert_eq!(clamped_lattice(55, 56, 7, 8).unwrap(), vec![7, 15, 23, 31, 39, 47, 55]);
    }

    #[test]
    fn effective_kernel_shrinks_to_feasible_odd() {
        assert_eq!(effective_kernel(56, 7, 8), 7);
        assert_eq!(effective_kernel(5, 7, 1), 5);
        assert_eq!(effective_kernel(4, 7, 1), 3);
        assert_eq!(effective_kernel(1, 7, 3), 1);
        assert_eq!(effective_kernel(7, 7, 2), 3);
        assert_eq!(effective_kernel(9, 7, 2), 5);
    }

    #[test]
    fn spec_rejects_even_and_zero() {
        assert!(NeighborhoodSpec::new((2, 3), (1, 1)).is_err());
        assert!(NeighborhoodSpec::new((3, 3), (0, 1)).is_err());
    }

    #[test]
    fn zero_inputs_give_zero_scores() {
        let q = Tensor::<f64>::zeros(&[2, 5, 4, 3]);
        let s = neighborhood_scores(&q, &q, &NeighborhoodSpec::square(3, 1).unwrap(), 0.5).unwrap();
        assert_eq!(s.shape(), &[2, 5, 4, 9]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_site_score() {
        let q = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let k = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![3.0, -1.0]).unwrap();
        let s = neighborhood_scores(&q, &k, &NeighborhoodSpec::square(1, 1).unwrap(), 0.5).unwrap();
        assert_eq!(s.data(), &[0.5]);
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::<f64>::from_vec(&[1, 1, 1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let a = softmax_rows(&s).unwrap();
        for &v in a.values().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = Tensor::<f32>::from_vec(&[1, 1, 1, 1], vec![-4.0]).unwrap();
        assert_eq!(softmax_rows(&one).unwrap().values().data(), &[1.0]);

        // independent evaluation: e^x / Σ e^x with no max subtraction
        let s = Tensor::<f64>::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let a = softmax_rows(&s).unwrap();
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        for (n, &v) in a.values().data().iter().enumerate() {
            let want = ((n + 1) as f64).exp() / z;
            assert!((v - want).abs() < 1e-7);
        }

        let bad = Tensor::<f32>::from_vec(&[1, 1, 1, 2], vec![0.0, f32::NAN]).unwrap();
        assert!(matches!(softmax_rows(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn aggregate_delta_and_constant() {
        let spec = NeighborhoodSpec::square(3, 1).unwrap();
        let (h, w) = (5, 6);
        let lat = Lattice2d::new(h, w, &spec).unwrap();
        let v = Tensor::<f64>::randn(&[2, h, w, 4], &mut Rng::seed(1), 1.0);

        let mut onehot = Tensor::<f64>::zeros(&[2, h, w, 9]);
        for a in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    let n = lat.sites(i, j).position(|p| p == (i, j)).unwrap();
                    onehot.set(&[a, i, j, n], 1.0).unwrap();
                }
            }
        }
        let out = neighborhood_aggregate(&AttnMap::from_weights(onehot).unwrap(), &v, &spec).unwrap();
        assert_eq!(out, v);

        let c = Tensor::<f64>::new(&[2, h, w, 4], 1.75).unwrap();
        let uniform = AttnMap::from_weights(Tensor::new(&[2, h, w, 9], 1.0 / 9.0).unwrap()).unwrap();
        let out = neighborhood_aggregate(&uniform, &c, &spec).unwrap();
        assert!(out.data().iter().all(|&x| (x - 1.75).abs() < 1e-12));

        let wrong = AttnMap::from_weights(Tensor::new(&[2, h, w, 25], 0.04).unwrap()).unwrap();
        assert!(matches!(neighborhood_aggregate(&wrong, &c, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_cotangent_zero_grads() {
        let mut rng = Rng::seed(9);
        let shape = [2, 4, 3, 2];
        let q = Tensor::<f64>::randn(&shape, &mut rng, 1.0);
        let k = Tensor::<f64>::randn(&shape, &mut rng, 1.0);
        let v = Tensor::<f64>::randn(&shape, &mut rng, 1.0);
        let spec = NeighborhoodSpec::square(3, 1).unwrap();
        let (_, saved) = kernel_forward(&q, &k, &v, &spec, 0.7).unwrap();
        let g = kernel_backward(&Tensor::zeros(&shape), &saved).unwrap();
        assert!(g.q.data().iter().chain(g.k.data()).chain(g.v.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn inconsistent_saved_state_is_rejected() {
        let mut rng = Rng::seed(9);
        let shape = [1, 3, 3, 2];
        let q = Tensor::<f64>::randn(&shape, &mut rng, 1.0);
        let spec = NeighborhoodSpec::square(3, 1).unwrap();
        let (_, mut saved) = kernel_forward(&q, &q, &q, &spec, 1.0).unwrap();
        saved.lattice = Lattice2d::new(4, 3, &spec).unwrap();
        assert!(matches!(
            kernel_backward(&Tensor::zeros(&shape), &saved),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn flops_examples() {
        let one = NeighborhoodSpec::square(1, 1).unwrap();
        assert_eq!(kernel_flops(1, 1, 1, 16, &one), 32);
        let k3 = NeighborhoodSpec::square(3, 1).unwrap();
        assert_eq!(kernel_flops(56, 56, 2, 32, &k3), 3_612_672);
        assert_eq!(kernel_flops(112, 56, 2, 32, &k3), 2 * 3_612_672);
    }

    proptest! {
        #[test]
        fn lattice_is_legal(side in 1usize..80, k in 0usize..6, d in 1usize..10, c in 0usize..80) {
            let k = 2 * k + 1;
            let center = c % side;
            let idx = clamped_lattice(center, side, k, d).unwrap();
            prop_assert_eq!(idx.len(), effective_kernel(side, k, d));
            prop_assert!(idx.iter().all(|&i| i < side));
            prop_assert!(idx.windows(2).all(|p| p[1] - p[0] == d));
            let half = (k / 2) * d;
            if idx.len() == k && center >= half && center + half < side {
                prop_assert_eq!(idx[k / 2], center);
            }
        }
    }
}
