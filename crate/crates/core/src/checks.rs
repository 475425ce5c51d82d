//! Randomized verification suites: the layer against the slow oracle, the
//! degenerate configurations against dense and one-stage attention, kernel
//! properties, and analytic gradients against finite differences.
//!
//! Suites are generic over [`S3aImpl`] so a deliberately broken layer can be
//! pushed through the same harness.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::neighborhood::{clamped_lattice, effective_kernel, kernel_forward, neighborhood_scores, softmax_rows, NeighborhoodSpec};
use crate::oracle::{dense_s3a, fd_gradient, oracle_anchor_only, oracle_s3a};
use crate::s3a::{s3a_backward, s3a_forward, S3AConfig, S3AGrads, S3AParams, StridePolicy};
use crate::tensor::{Rng, Scalar, Tensor};

/// A forward/backward pair for the attention layer.
pub trait S3aImpl: Sync {
    fn forward<T: Scalar>(&self, x: &Tensor<T>, cfg: &S3AConfig, params: &S3AParams<T>) -> Result<Tensor<T>>;

    fn gradients<T: Scalar>(
        &self,
        x: &Tensor<T>,
        cfg: &S3AConfig,
        params: &S3AParams<T>,
        grad_out: &Tensor<T>,
    ) -> Result<S3AGrads<T>>;
}

/// The library's own layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct Library;

impl S3aImpl for Library {
    fn forward<T: Scalar>(&self, x: &Tensor<T>, cfg: &S3AConfig, params: &S3AParams<T>) -> Result<Tensor<T>> {
        Ok(s3a_forward(x, cfg, params)?.0)
    }

    fn gradients<T: Scalar>(
        &self,
        x: &Tensor<T>,
        cfg: &S3AConfig,
        params: &S3AParams<T>,
        grad_out: &Tensor<T>,
    ) -> Result<S3AGrads<T>> {
        let (_, saved) = s3a_forward(x, cfg, params)?;
        s3a_backward(grad_out, &saved, params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, cases: usize, max_error: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            cases,
            max_error,
            tolerance,
            passed: max_error.is_finite() && max_error <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub oracle_f64: f64,
    pub oracle_f32: f64,
    pub dense: f64,
    pub single_stage: f64,
    pub row_sum: f64,
    pub equivariance: f64,
    pub head_permutation: f64,
    pub gradient_f64: f64,
    pub gradient_f32: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            oracle_f64: 1e-6,
            oracle_f32: 1e-4,
            dense: 1e-5,
            single_stage: 1e-6,
            row_sum: 1e-6,
            equivariance: 1e-6,
            head_permutation: 1e-6,
            gradient_f64: 1e-6,
            gradient_f32: 1e-2,
        }
    }
}

impl Tolerances {
    /// Overrides one field by name, e.g. `("dense", 1e-4)`.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "oracle_f64" => &mut self.oracle_f64,
            "oracle_f32" => &mut self.oracle_f32,
            "dense" => &mut self.dense,
            "single_stage" => &mut self.single_stage,
            "row_sum" => &mut self.row_sum,
            "equivariance" => &mut self.equivariance,
            "head_permutation" => &mut self.head_permutation,
            "gradient_f64" => &mut self.gradient_f64,
            "gradient_f32" => &mut self.gradient_f32,
            _ => return Err(crate::Error::config(format!("unknown tolerance `{name}`"))),
        };
        *slot = value;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    pub seed: u64,
    pub oracle_cases: usize,
    pub degenerate_cases: usize,
    pub property_cases: usize,
    pub gradient_cases: usize,
    pub tolerances: Tolerances,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            oracle_cases: 200,
            degenerate_cases: 20,
            property_cases: 500,
            gradient_cases: 25,
            tolerances: Tolerances::default(),
        }
    }
}

pub const SUITES: [&str; 5] = ["oracle", "degenerate", "normalization", "equivariance", "gradient"];

const WEIGHT_STD: f64 = 0.5;
const BIAS_STD: f64 = 0.2;

fn odd_in(rng: &mut Rng, choices: &[usize]) -> usize {
    *rng.choose(choices)
}

fn random_stride(rng: &mut Rng, choices: &[usize]) -> StridePolicy {
    match rng.range(0, choices.len()) {
        i if i == choices.len() => StridePolicy::Auto,
        i => StridePolicy::Fixed(choices[i], choices[rng.range(0, choices.len() - 1)]),
    }
}

/// Random layer instance in `f64`: config, params and input.
fn random_instance(rng: &mut Rng, cfg: S3AConfig, h: usize, w: usize) -> (S3AParams<f64>, Tensor<f64>) {
    let p = S3AParams::random(&cfg, rng, WEIGHT_STD, BIAS_STD);
    let x = Tensor::randn(&[cfg.channels, h, w], rng, 1.0);
    (p, x)
}

fn random_heads(rng: &mut Rng, channels: usize, choices: &[usize]) -> usize {
    let ok: Vec<usize> = choices.iter().copied().filter(|hd| channels.is_multiple_of(*hd)).collect();
    *rng.choose(&ok)
}

/// Layer vs the oracle on random geometry, in `f64` and `f32`.
pub fn oracle_suite<I: S3aImpl>(imp: &I, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed(opts.seed ^ 0x0ac1e);
    let (mut err64, mut err32) = (0.0f64, 0.0f64);
    for case in 0..opts.oracle_cases {
        let mut h = rng.range(1, 12);
        let mut w = rng.range(1, 12);
        match case % 10 {
            0 => h = 1,
            1 => w = 1,
            2 => (h, w) = (1, 1),
            _ => {}
        }
        let channels = *rng.choose(&[2, 4, 8, 16]);
        let mut cfg = S3AConfig::new(channels, random_heads(&mut rng, channels, &[1, 2, 4]));
        cfg.window = (odd_in(&mut rng, &[1, 3, 5]), odd_in(&mut rng, &[1, 3, 5]));
        cfg.anchors = (odd_in(&mut rng, &[1, 3, 5, 7]), odd_in(&mut rng, &[1, 3, 5, 7]));
        cfg.stride = random_stride(&mut rng, &[1, 2, 3]);
        cfg.lce = case % 3 != 0;
        let (p, x) = random_instance(&mut rng, cfg, h, w);
        let want = oracle_s3a(&x, &cfg, &p)?;
        err64 = err64.max(imp.forward(&x, &cfg, &p)?.max_abs_diff(&want)?);
        let got32 = imp.forward(&x.cast::<f32>(), &cfg, &p.cast::<f32>())?;
        err32 = err32.max(got32.max_abs_diff(&want)?);
    }
    let t = &opts.tolerances;
    Ok(vec![
        CheckResult::new("oracle_equivalence_f64", opts.oracle_cases, err64, t.oracle_f64),
        CheckResult::new("oracle_equivalence_f32", opts.oracle_cases, err32, t.oracle_f32),
    ])
}

/// Full window with a single anchor is dense attention; a 1×1 window leaves
/// only the dilated anchor stage.
pub fn degenerate_suite<I: S3aImpl>(imp: &I, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed(opts.seed ^ 0xde9e);
    let (mut dense_err, mut single_err) = (0.0f64, 0.0f64);
    for case in 0..opts.degenerate_cases {
        // full coverage by an odd window needs odd sides
        let h = odd_in(&mut rng, &[1, 3, 5, 7, 9]);
        let w = odd_in(&mut rng, &[1, 3, 5, 7, 9]);
        let channels = *rng.choose(&[2, 4, 8]);
        let mut cfg = S3AConfig::new(channels, random_heads(&mut rng, channels, &[1, 2]));
        cfg.window = (h + 2 * rng.range(0, 1), w + 2 * rng.range(0, 1));
        cfg.anchors = (1, 1);
        cfg.stride = random_stride(&mut rng, &[1, 2, 3]);
        cfg.lce = case % 2 == 0;
        let (p, x) = random_instance(&mut rng, cfg, h, w);
        dense_err = dense_err.max(imp.forward(&x, &cfg, &p)?.max_abs_diff(&dense_s3a(&x, &cfg, &p)?)?);

        let h = rng.range(1, 12);
        let w = rng.range(1, 12);
        cfg.window = (1, 1);
        cfg.anchors = (odd_in(&mut rng, &[1, 3, 5, 7]), odd_in(&mut rng, &[1, 3, 5, 7]));
        let (p, x) = random_instance(&mut rng, cfg, h, w);
        single_err = single_err.max(imp.forward(&x, &cfg, &p)?.max_abs_diff(&oracle_anchor_only(&x, &cfg, &p)?)?);
    }
    let t = &opts.tolerances;
    Ok(vec![
        CheckResult::new("degenerate_dense", opts.degenerate_cases, dense_err, t.dense),
        CheckResult::new("degenerate_single_stage", opts.degenerate_cases, single_err, t.single_stage),
    ])
}

fn random_spec(rng: &mut Rng) -> NeighborhoodSpec {
    NeighborhoodSpec::new(
        (odd_in(rng, &[1, 3, 5, 7]), odd_in(rng, &[1, 3, 5, 7])),
        (rng.range(1, 3), rng.range(1, 3)),
    )
    .expect("odd kernel, positive dilation")
}

/// Lattice legality, cardinality and symmetry (violation count, must be 0)
/// and attention row-stochasticity.
pub fn normalization_suite(opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed(opts.seed ^ 0x5077);
    let mut violations = 0usize;
    for _ in 0..opts.property_cases {
        let side = rng.range(1, 64);
        let k = odd_in(&mut rng, &[1, 3, 5, 7, 9, 11]);
        let d = rng.range(1, 9);
        let k_eff = effective_kernel(side, k, d);
        for center in 0..side {
            let lat = clamped_lattice(center, side, k, d)?;
            let legal = lat.len() == k_eff
                && lat.iter().all(|&i| i < side)
                && lat.windows(2).all(|p| p[1] == p[0] + d);
            let half = (k / 2) * d;
            let interior = k_eff == k && center >= half && center + half < side;
            let symmetric = !interior || lat.iter().zip(lat.iter().rev()).all(|(a, b)| a + b == 2 * center);
            violations += usize::from(!(legal && symmetric));
        }
    }
    let lattice = CheckResult::new("lattice_properties", opts.property_cases, violations as f64, 0.0);

    let mut row_err = 0.0f64;
    for _ in 0..opts.property_cases {
        let (heads, h, w, dh) = (rng.range(1, 2), rng.range(1, 10), rng.range(1, 10), rng.range(1, 4));
        let spec = random_spec(&mut rng);
        let q = Tensor::<f64>::randn(&[heads, h, w, dh], &mut rng, 2.0);
        let k = Tensor::<f64>::randn(&[heads, h, w, dh], &mut rng, 2.0);
        let attn = softmax_rows(&neighborhood_scores(&q, &k, &spec, 1.0)?)?;
        let vals = attn.values();
        let nb = vals.shape()[3];
        for row in vals.data().chunks(nb) {
            let sum: f64 = row.iter().sum();
            let in_range = row.iter().all(|&p| (0.0..=1.0).contains(&p));
            row_err = row_err.max(if in_range { (sum - 1.0).abs() } else { f64::INFINITY });
        }
    }
    Ok(vec![
        lattice,
        CheckResult::new("normalization", opts.property_cases, row_err, opts.tolerances.row_sum),
    ])
}

/// `t` rolled by `(sh, sw)` on the spatial axes of a `[heads, H, W, dh]` tensor.
fn roll(t: &Tensor<f64>, sh: usize, sw: usize) -> Tensor<f64> {
    let [heads, h, w, dh] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let mut out = Tensor::zeros(t.shape());
    for a in 0..heads {
        for i in 0..h {
            for j in 0..w {
                let src = ((a * h + i) * w + j) * dh;
                let dst = ((a * h + (i + sh) % h) * w + (j + sw) % w) * dh;
                out.data_mut()[dst..dst + dh].copy_from_slice(&t.data()[src..src + dh]);
            }
        }
    }
    out
}

/// Interior shift-equivariance of the kernel, and head-permutation
/// invariance of the layer (LCE off, since it acts on unpermuted channels).
pub fn equivariance_suite<I: S3aImpl>(imp: &I, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed(opts.seed ^ 0xe9a1);
    let mut shift_err = 0.0f64;
    let mut compared = 0usize;
    for _ in 0..opts.property_cases {
        let spec = random_spec(&mut rng);
        let (kh, kw) = spec.kernel;
        let (dh_, dw_) = spec.dilation;
        let (rh, rw) = ((kh / 2) * dh_, (kw / 2) * dw_);
        let (sh, sw) = (rng.range(0, 2) * dh_, rng.range(0, 2) * dw_);
        let h = 2 * rh + sh + 1 + rng.range(0, 3);
        let w = 2 * rw + sw + 1 + rng.range(0, 3);
        let (heads, dim) = (rng.range(1, 2), rng.range(1, 3));
        let q = Tensor::<f64>::randn(&[heads, h, w, dim], &mut rng, 1.5);
        let k = Tensor::<f64>::randn(&[heads, h, w, dim], &mut rng, 1.5);
        let v = Tensor::<f64>::randn(&[heads, h, w, dim], &mut rng, 1.0);
        let (base, _) = kernel_forward(&q, &k, &v, &spec, 1.0)?;
        let (moved, _) = kernel_forward(&roll(&q, sh, sw), &roll(&k, sh, sw), &roll(&v, sh, sw), &spec, 1.0)?;
        for a in 0..heads {
            for i in rh..h - rh - sh {
                for j in rw..w - rw - sw {
                    let p = ((a * h + i) * w + j) * dim;
                    let s = ((a * h + i + sh) * w + j + sw) * dim;
                    for e in 0..dim {
                        shift_err = shift_err.max((base.data()[p + e] - moved.data()[s + e]).abs());
                    }
                    compared += 1;
                }
            }
        }
    }
    let shift = CheckResult::new(
        "shift_equivariance",
        opts.property_cases,
        if compared == 0 { f64::INFINITY } else { shift_err },
        opts.tolerances.equivariance,
    );

    let mut perm_err = 0.0f64;
    let cases = opts.degenerate_cases;
    for _ in 0..cases {
        let heads = *rng.choose(&[2, 4]);
        let mut cfg = S3AConfig::new(heads * rng.range(1, 3), heads);
        cfg.window = (odd_in(&mut rng, &[1, 3, 5]), odd_in(&mut rng, &[1, 3, 5]));
        cfg.anchors = (odd_in(&mut rng, &[1, 3, 5]), odd_in(&mut rng, &[1, 3, 5]));
        cfg.stride = random_stride(&mut rng, &[1, 2]);
        cfg.lce = false;
        let (h, w) = (rng.range(1, 9), rng.range(1, 9));
        let (p, x) = random_instance(&mut rng, cfg, h, w);
        let mut order: Vec<usize> = (0..heads).collect();
        order.rotate_left(1 + rng.range(0, heads - 2));
        let permuted = permute_heads(&p, &cfg, &order);
        let a = imp.forward(&x, &cfg, &p)?;
        let b = imp.forward(&x, &cfg, &permuted)?;
        perm_err = perm_err.max(a.max_abs_diff(&b)?);
    }
    Ok(vec![
        shift,
        CheckResult::new("head_permutation", cases, perm_err, opts.tolerances.head_permutation),
    ])
}

/// New head `n` takes old head `order[n]` in q, k, v and in the columns of
/// the output projection.
fn permute_heads(p: &S3AParams<f64>, cfg: &S3AConfig, order: &[usize]) -> S3AParams<f64> {
    let (c, dh) = (cfg.channels, cfg.head_dim());
    let channel = |new: usize| order[new / dh] * dh + new % dh;
    let mut out = p.clone();
    for block in 0..3 {
        for new in 0..c {
            let (dst, src) = (block * c + new, block * c + channel(new));
            out.w_qkv.data_mut()[dst * c..(dst + 1) * c].copy_from_slice(&p.w_qkv.data()[src * c..(src + 1) * c]);
            out.b_qkv.data_mut()[dst] = p.b_qkv.data()[src];
        }
    }
    for row in 0..c {
        for new in 0..c {
            out.w_out.data_mut()[row * c + new] = p.w_out.data()[row * c + channel(new)];
        }
    }
    out
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)` per tensor; `floor` keeps tensors
/// whose true gradient vanishes (such as the key bias, which shifts every
/// score in a row equally) from dividing rounding noise by rounding noise.
fn tensor_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>, floor: f64) -> Result<f64> {
    let scale = analytic.max_abs().max(numeric.max_abs()).max(floor);
    Ok(if scale == 0.0 { 0.0 } else { analytic.max_abs_diff(numeric)? / scale })
}

const FD_STEP: f64 = 1e-5;
const GRAD_FLOOR: f64 = 1e-3;

/// Central-difference gradients of `Σ r ⊙ forward(x; params)` for the input
/// and every parameter tensor, in `f64`.
fn numeric_grads<I: S3aImpl>(
    imp: &I,
    x: &Tensor<f64>,
    cfg: &S3AConfig,
    p: &S3AParams<f64>,
    r: &Tensor<f64>,
) -> Result<Vec<(String, Tensor<f64>)>> {
    let loss = |y: Result<Tensor<f64>>| y.map(|y| y.mul(r).map(|m| m.sum()).unwrap_or(f64::NAN)).unwrap_or(f64::NAN);
    let mut out = vec![("x".to_string(), fd_gradient(|xp| loss(imp.forward(xp, cfg, p)), x, FD_STEP)?)];
    for (i, (name, t)) in p.tensors().into_iter().enumerate() {
        let g = fd_gradient(
            |tp| {
                let mut q = p.clone();
                *q.tensors_mut()[i].1 = tp.clone();
                loss(imp.forward(x, cfg, &q))
            },
            t,
            FD_STEP,
        )?;
        out.push((name.to_string(), g));
    }
    Ok(out)
}

fn analytic_grads<T: Scalar>(g: &S3AGrads<T>) -> Vec<Tensor<f64>> {
    std::iter::once(g.x.cast())
        .chain(g.params.tensors().into_iter().map(|(_, t)| t.cast()))
        .collect()
}

/// Analytic backward vs central differences.
pub fn gradient_suite<I: S3aImpl>(imp: &I, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::seed(opts.seed ^ 0x9bad);
    let (mut e64, mut e32) = (0.0f64, 0.0f64);
    for case in 0..opts.gradient_cases {
        let channels = *rng.choose(&[2, 4]);
        let mut cfg = S3AConfig::new(channels, random_heads(&mut rng, channels, &[1, 2]));
        cfg.window = (odd_in(&mut rng, &[1, 3]), odd_in(&mut rng, &[1, 3]));
        cfg.anchors = (odd_in(&mut rng, &[1, 3, 5]), odd_in(&mut rng, &[1, 3, 5]));
        cfg.stride = random_stride(&mut rng, &[1, 2]);
        cfg.lce = case % 2 == 0;
        let (h, w) = if case == 0 { (4, 4) } else { (rng.range(1, 5), rng.range(1, 5)) };
        if case == 0 {
            cfg = S3AConfig { window: (3, 3), anchors: (3, 3), stride: StridePolicy::Fixed(1, 1), ..S3AConfig::new(4, 2) };
        }
        let (p, x) = random_instance(&mut rng, cfg, h, w);
        let r = Tensor::<f64>::randn(&[cfg.channels, h, w], &mut rng, 1.0);
        let numeric = numeric_grads(imp, &x, &cfg, &p, &r)?;
        let global = numeric.iter().map(|(_, t)| t.max_abs()).fold(0.0, f64::max);
        let floor = GRAD_FLOOR * global;

        let g64 = analytic_grads(&imp.gradients(&x, &cfg, &p, &r)?);
        let g32 = analytic_grads(&imp.gradients(&x.cast::<f32>(), &cfg, &p.cast::<f32>(), &r.cast::<f32>())?);
        for ((_, n), (a64, a32)) in numeric.iter().zip(g64.iter().zip(&g32)) {
            e64 = e64.max(tensor_error(a64, n, floor)?);
            e32 = e32.max(tensor_error(a32, n, floor)?);
        }
    }
    let t = &opts.tolerances;
    Ok(vec![
        CheckResult::new("gradient_f64", opts.gradient_cases, e64, t.gradient_f64),
        CheckResult::new("gradient_f32", opts.gradient_cases, e32, t.gradient_f32),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub seed: u64,
    pub passed: bool,
    pub failed: Vec<String>,
    pub results: Vec<CheckResult>,
}

/// Runs the named suites (all of [`SUITES`] when `suites` is empty).
pub fn run_checks<I: S3aImpl>(imp: &I, opts: &CheckOptions, suites: &[String]) -> Result<CheckReport> {
    let wanted = |s: &str| suites.is_empty() || suites.iter().any(|x| x == s);
    if let Some(bad) = suites.iter().find(|s| !SUITES.contains(&s.as_str())) {
        return Err(crate::Error::config(format!(
            "unknown suite `{bad}` (expected one of {})",
            SUITES.join(", ")
        )));
    }
    let mut results = Vec::new();
    if wanted("oracle") {
        results.extend(oracle_suite(imp, opts)?);
    }
    if wanted("degenerate") {
        results.extend(degenerate_suite(imp, opts)?);
    }
    if wanted("normalization") {
        results.extend(normalization_suite(opts)?);
    }
    if wanted("equivariance") {
        results.extend(equivariance_suite(imp, opts)?);
    }
    if wanted("gradient") {
        results.extend(gradient_suite(imp, opts)?);
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    Ok(CheckReport {
        seed: opts.seed,
        passed: failed.is_empty(),
        failed,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> CheckOptions {
        CheckOptions {
            oracle_cases: 20,
            degenerate_cases: 4,
            property_cases: 20,
            gradient_cases: 3,
            ..CheckOptions::default()
        }
    }

    #[test]
    fn quick_run_passes() {
        let report = run_checks(&Library, &quick(), &[]).unwrap();
        assert!(report.passed, "{:#?}", report.results);
        assert_eq!(report.results.len(), 10);
    }

    #[test]
    fn unknown_suite_rejected() {
        assert!(run_checks(&Library, &quick(), &["nope".into()]).is_err());
    }

    #[test]
    fn tolerance_override() {
        let mut t = Tolerances::default();
        t.set("dense", 0.5).unwrap();
        assert_eq!(t.dense, 0.5);
        assert!(t.set("bogus", 1.0).is_err());
    }
}
