//! Slow, transparent ground truth for the attention path.
//!
//! Everything here runs in `f64` with explicit loops and re-derives its index
//! sets from first principles instead of going through
//! [`crate::neighborhood`]: the anchor and window sets are materialized
//! member by member, then attention is computed by gather, softmax and sum.

use crate::error::{Error, Result};
use crate::s3a::{S3AConfig, S3AParams, StridePolicy};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetKind {
    /// Dilated anchors around a query token.
    Aoi,
    /// Dense reference window around an anchor.
    Rwin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    pub members: Vec<(usize, usize)>,
    pub kind: SetKind,
}

impl IndexSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, site: (usize, usize)) -> bool {
        self.members.contains(&site)
    }
}

/// Ideal symmetric positions `center + t·step`, `t ∈ [-⌊n/2⌋, ⌊n/2⌋]`, with
/// `n` reduced (by twos) until the span fits, then shifted inward as a whole
/// if it sticks out of `[0, side)`.
fn axis_positions(center: usize, side: usize, count: usize, step: usize) -> Vec<usize> {
    assert!(side >= 1 && count % 2 == 1 && step >= 1);
    let mut n = count;
    while n > 1 && (n - 1) * step + 1 > side {
        n -= 2;
    }
    let half = (n / 2) as isize;
    let step = step as isize;
    let ideal: Vec<isize> = (-half..=half).map(|t| center as isize + t * step).collect();
    let (lo, hi) = (ideal[0], ideal[ideal.len() - 1]);
    let last = side as isize - 1;
    let shift = if lo < 0 {
        -lo
    } else if hi > last {
        last - hi
    } else {
        0
    };
    ideal.into_iter().map(|p| (p + shift) as usize).collect()
}

fn product(rows: Vec<usize>, cols: Vec<usize>, kind: SetKind) -> IndexSet {
    let mut members = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            members.push((r, c));
        }
    }
    IndexSet { members, kind }
}

/// Anchors of interest for token `(i, j)`.
pub fn aoi_set(i: usize, j: usize, h: usize, w: usize, anchors: (usize, usize), stride: (usize, usize)) -> IndexSet {
    product(
        axis_positions(i, h, anchors.0, stride.0),
        axis_positions(j, w, anchors.1, stride.1),
        SetKind::Aoi,
    )
}

/// Reference window around anchor `(m, n)`.
pub fn rwin_set(m: usize, n: usize, h: usize, w: usize, window: (usize, usize)) -> IndexSet {
    product(
        axis_positions(m, h, window.0, 1),
        axis_positions(n, w, window.1, 1),
        SetKind::Rwin,
    )
}

fn anchor_stride(cfg: &S3AConfig, h: usize, w: usize) -> (usize, usize) {
    match cfg.stride {
        StridePolicy::Fixed(a, b) => (a, b),
        StridePolicy::Auto => ((h / cfg.anchors.0).max(1), (w / cfg.anchors.1).max(1)),
    }
}

/// Softmax-weighted average of `values` by `<query, key>`.
fn attend(query: &[f64], keys: &[&[f64]], values: &[&[f64]]) -> Vec<f64> {
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| query.iter().zip(k.iter()).map(|(a, b)| a * b).sum())
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let dim = values[0].len();
    let mut out = vec![0.0; dim];
    for (wgt, v) in weights.iter().zip(values) {
        for d in 0..dim {
            out[d] += wgt / total * v[d];
        }
    }
    out
}

/// Affine map `y = W·x + b` over channels.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

impl Affine {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.weight.shape()[0], self.weight.shape()[1]);
        (0..rows)
            .map(|r| self.bias.data()[r] + (0..cols).map(|c| self.weight.data()[r * cols + c] * x[c]).sum::<f64>())
            .collect()
    }
}

/// The `q`, `k` and `v` rows of the fused projection.
pub fn qkv_affines(params: &S3AParams<f64>) -> [Affine; 3] {
    let c = params.w_out.shape()[0];
    let part = |i: usize| Affine {
        weight: Tensor::from_vec(&[c, c], params.w_qkv.data()[i * c * c..(i + 1) * c * c].to_vec()).unwrap(),
        bias: Tensor::from_vec(&[c], params.b_qkv.data()[i * c..(i + 1) * c].to_vec()).unwrap(),
    };
    [part(0), part(1), part(2)]
}

fn sites(x: &Tensor<f64>) -> Result<(usize, usize, usize, Vec<Vec<f64>>)> {
    let [c, h, w] = match *x.shape() {
        [c, h, w] => [c, h, w],
        ref s => return Err(Error::shape(format!("expected [C, H, W], got {s:?}"))),
    };
    let n = h * w;
    let cols = (0..n).map(|s| (0..c).map(|ch| x.data()[ch * n + s]).collect()).collect();
    Ok((c, h, w, cols))
}

fn to_chw(cols: &[Vec<f64>], c: usize, h: usize, w: usize) -> Tensor<f64> {
    let n = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for (s, col) in cols.iter().enumerate() {
        for ch in 0..c {
            out.data_mut()[ch * n + s] = col[ch];
        }
    }
    out
}

/// Output projection plus the optional 5×5 zero-padded depthwise branch on `v`.
fn finish(attn: &[Vec<f64>], v: &[Vec<f64>], params: &S3AParams<f64>, h: usize, w: usize) -> Tensor<f64> {
    let c = params.w_out.shape()[0];
    let out_proj = Affine {
        weight: params.w_out.clone(),
        bias: params.b_out.clone(),
    };
    let mut cols: Vec<Vec<f64>> = attn.iter().map(|a| out_proj.apply(a)).collect();
    if let Some(lce) = &params.lce {
        let k = lce.filter.shape()[1];
        let r = (k / 2) as isize;
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut acc = lce.bias.data()[ch];
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (y, x) = (i as isize + dy, j as isize + dx);
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                continue;
                            }
                            let tap = lce.filter.data()[(ch * k + (dy + r) as usize) * k + (dx + r) as usize];
                            acc += tap * v[y as usize * w + x as usize][ch];
                        }
                    }
                    cols[i * w + j][ch] += acc;
                }
            }
        }
    }
    to_chw(&cols, c, h, w)
}

struct Projected {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn project(cols: &[Vec<f64>], cfg: &S3AConfig, params: &S3AParams<f64>) -> Projected {
    let [aq, ak, av] = qkv_affines(params);
    let scale = 1.0 / ((cfg.channels / cfg.heads) as f64).sqrt();
    Projected {
        q: cols.iter().map(|x| aq.apply(x)).collect(),
        k: cols.iter().map(|x| ak.apply(x).into_iter().map(|e| e * scale).collect()).collect(),
        v: cols.iter().map(|x| av.apply(x)).collect(),
    }
}

fn head(vec: &[f64], a: usize, dh: usize) -> &[f64] {
    &vec[a * dh..(a + 1) * dh]
}

/// Two-stage sparse scan attention computed token by token from the
/// materialized sets.
pub fn oracle_s3a(x: &Tensor<f64>, cfg: &S3AConfig, params: &S3AParams<f64>) -> Result<Tensor<f64>> {
    cfg.validate()?;
    params.check(cfg)?;
    let (c, h, w, cols) = sites(x)?;
    if c != cfg.channels || h == 0 || w == 0 {
        return Err(Error::shape("oracle input does not match the config"));
    }
    let (heads, dh) = (cfg.heads, cfg.channels / cfg.heads);
    let stride = anchor_stride(cfg, h, w);
    let p = project(&cols, cfg, params);

    let mut merged = vec![vec![0.0; c]; h * w];
    for i in 0..h {
        for j in 0..w {
            let aoi = aoi_set(i, j, h, w, cfg.anchors, stride);
            for a in 0..heads {
                // update every anchor from its reference window
                let updated: Vec<Vec<f64>> = aoi
                    .members
                    .iter()
                    .map(|&(m, n)| {
                        let rwin = rwin_set(m, n, h, w, cfg.window);
                        let keys: Vec<&[f64]> = rwin.members.iter().map(|&(r, s)| head(&p.k[r * w + s], a, dh)).collect();
                        let vals: Vec<&[f64]> = rwin.members.iter().map(|&(r, s)| head(&p.v[r * w + s], a, dh)).collect();
                        attend(head(&p.q[m * w + n], a, dh), &keys, &vals)
                    })
                    .collect();
                let keys: Vec<&[f64]> = aoi.members.iter().map(|&(m, n)| head(&p.k[m * w + n], a, dh)).collect();
                let vals: Vec<&[f64]> = updated.iter().map(Vec::as_slice).collect();
                let out = attend(head(&p.q[i * w + j], a, dh), &keys, &vals);
                merged[i * w + j][a * dh..(a + 1) * dh].copy_from_slice(&out);
            }
        }
    }
    Ok(finish(&merged, &p.v, params, h, w))
}

/// Single dilated anchor attention straight over the projected values (no
/// window stage). Equals [`oracle_s3a`] whenever the window is 1×1.
pub fn oracle_anchor_only(x: &Tensor<f64>, cfg: &S3AConfig, params: &S3AParams<f64>) -> Result<Tensor<f64>> {
    cfg.validate()?;
    params.check(cfg)?;
    let (_, h, w, cols) = sites(x)?;
    let (heads, dh) = (cfg.heads, cfg.channels / cfg.heads);
    let stride = anchor_stride(cfg, h, w);
    let p = project(&cols, cfg, params);
    let mut merged = vec![vec![0.0; cfg.channels]; h * w];
    for i in 0..h {
        for j in 0..w {
            let aoi = aoi_set(i, j, h, w, cfg.anchors, stride);
            for a in 0..heads {
                let keys: Vec<&[f64]> = aoi.members.iter().map(|&(m, n)| head(&p.k[m * w + n], a, dh)).collect();
                let vals: Vec<&[f64]> = aoi.members.iter().map(|&(m, n)| head(&p.v[m * w + n], a, dh)).collect();
                let out = attend(head(&p.q[i * w + j], a, dh), &keys, &vals);
                merged[i * w + j][a * dh..(a + 1) * dh].copy_from_slice(&out);
            }
        }
    }
    Ok(finish(&merged, &p.v, params, h, w))
}

/// Multi-head full self-attention over all `H·W` tokens:
/// `softmax(q · (scale·k)ᵀ) · v` per head. Returns `[C, H, W]`.
pub fn dense_attention(
    x: &Tensor<f64>,
    wq: &Affine,
    wk: &Affine,
    wv: &Affine,
    heads: usize,
    scale: f64,
) -> Result<Tensor<f64>> {
    let (c, h, w, cols) = sites(x)?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::config("heads must divide channels"));
    }
    let dh = c / heads;
    let q: Vec<Vec<f64>> = cols.iter().map(|s| wq.apply(s)).collect();
    let k: Vec<Vec<f64>> = cols.iter().map(|s| wk.apply(s).into_iter().map(|e| e * scale).collect()).collect();
    let v: Vec<Vec<f64>> = cols.iter().map(|s| wv.apply(s)).collect();
    let mut out = vec![vec![0.0; c]; h * w];
    for (t, o) in out.iter_mut().enumerate() {
        for a in 0..heads {
            let keys: Vec<&[f64]> = k.iter().map(|kv| head(kv, a, dh)).collect();
            let vals: Vec<&[f64]> = v.iter().map(|vv| head(vv, a, dh)).collect();
            o[a * dh..(a + 1) * dh].copy_from_slice(&attend(head(&q[t], a, dh), &keys, &vals));
        }
    }
    Ok(to_chw(&out, c, h, w))
}

/// Dense attention wrapped in the layer's output projection and LCE branch.
pub fn dense_s3a(x: &Tensor<f64>, cfg: &S3AConfig, params: &S3AParams<f64>) -> Result<Tensor<f64>> {
    let [aq, ak, av] = qkv_affines(params);
    let scale = 1.0 / ((cfg.channels / cfg.heads) as f64).sqrt();
    let attn = dense_attention(x, &aq, &ak, &av, cfg.heads, scale)?;
    let (_, h, w, attn_cols) = sites(&attn)?;
    let (_, _, _, cols) = sites(x)?;
    let v: Vec<Vec<f64>> = cols.iter().map(|s| av.apply(s)).collect();
    Ok(finish(&attn_cols, &v, params, h, w))
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn fd_gradient<F>(mut f: F, x: &Tensor<f64>, step: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Numeric(format!("finite-difference step must be positive, got {step}")));
    }
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("objective is non-finite near coordinate {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`; zero when both are zero.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> Result<f64> {
    let diff = analytic.max_abs_diff(numeric)?;
    let scale = analytic.max_abs().max(numeric.max_abs());
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn aoi_interior_and_corner() {
        let s = aoi_set(28, 30, 56, 56, (7, 7), (8, 8));
        assert_eq!(s.len(), 49);
        assert_eq!(s.kind, SetKind::Aoi);
        // symmetric about the token
        for &(m, n) in &s.members {
            assert!(s.contains((56 - m, 60 - n)));
        }
        let corner = aoi_set(0, 0, 56, 56, (7, 7), (8, 8));
        assert_eq!(corner.len(), 49);
        assert_eq!(corner.members.iter().min().unwrap(), &(0, 0));
        assert_eq!(corner.members.iter().max().unwrap(), &(48, 48));
        assert_eq!(aoi_set(3, 4, 9, 9, (1, 1), (5, 5)).members, vec![(3, 4)]);
    }

    #[test]
    fn rwin_cases() {
        let s = rwin_set(4, 4, 9, 9, (3, 3));
        let mut want = Vec::new();
        for r in 3..=5 {
            for c in 3..=5 {
                want.push((r, c));
            }
        }
        assert_eq!(s.members, want);
        let corner = rwin_set(0, 0, 9, 9, (3, 3));
        assert_eq!(corner.members, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)]);
        assert_eq!(rwin_set(2, 7, 9, 9, (1, 1)).members, vec![(2, 7)]);
    }

    #[test]
    fn constant_field_fixed_point() {
        let mut rng = Rng::seed(6);
        let mut cfg = S3AConfig::new(4, 2);
        cfg.lce = false;
        let p = S3AParams::<f64>::random(&cfg, &mut rng, 0.5, 0.2);
        let cval = [0.3, -1.2, 0.8, 2.0];
        let x = Tensor::from_vec(&[4, 5, 6], (0..4).flat_map(|c| std::iter::repeat_n(cval[c], 30)).collect()).unwrap();
        let y = oracle_s3a(&x, &cfg, &p).unwrap();
        let [_, _, av] = qkv_affines(&p);
        let v = av.apply(&cval);
        for o in 0..4 {
            let want = p.b_out.data()[o] + (0..4).map(|c| p.w_out.data()[o * 4 + c] * v[c]).sum::<f64>();
            assert!(y.data()[o * 30..(o + 1) * 30].iter().all(|&e| (e - want).abs() < 1e-12));
        }
    }

    #[test]
    fn dense_single_and_duplicate_tokens() {
        let mut rng = Rng::seed(7);
        let mk = |rng: &mut Rng| Affine {
            weight: Tensor::randn(&[2, 2], rng, 1.0),
            bias: Tensor::randn(&[2], rng, 1.0),
        };
        let (wq, wk, wv) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let x = Tensor::from_vec(&[2, 1, 1], vec![0.4, -0.9]).unwrap();
        let y = dense_attention(&x, &wq, &wk, &wv, 1, 0.7).unwrap();
        let v = wv.apply(&[0.4, -0.9]);
        assert!((y.data()[0] - v[0]).abs() < 1e-14 && (y.data()[1] - v[1]).abs() < 1e-14);

        let x2 = Tensor::from_vec(&[2, 1, 2], vec![0.4, 0.4, -0.9, -0.9]).unwrap();
        let y2 = dense_attention(&x2, &wq, &wk, &wv, 2, 0.7).unwrap();
        assert!((y2.data()[0] - v[0]).abs() < 1e-14 && (y2.data()[1] - v[0]).abs() < 1e-14);
    }

    #[test]
    fn fd_basics() {
        let x = Tensor::<f64>::randn(&[7], &mut Rng::seed(1), 1.0);
        let g = fd_gradient(|t| t.sum(), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
        let g = fd_gradient(|t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(), &x, 1e-5).unwrap();
        assert!(g.max_abs_diff(&x).unwrap() < 1e-8);
        assert!(matches!(fd_gradient(|_| f64::NAN, &x, 1e-5), Err(Error::Numeric(_))));
        assert!(fd_gradient(|t| t.sum(), &x, 0.0).is_err());
    }
}
