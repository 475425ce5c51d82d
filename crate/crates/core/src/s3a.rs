//! Sparse Scan Self-Attention layer.
//!
//! One shared 1×1 projection produces `q`, `k` and `v`; `k` is scaled by
//! `head_dim^-1/2`. Stage 1 updates every token from its dense local window
//! (dilation 1). Stage 2 lets each token attend over its dilated anchor
//! lattice, reusing the same `q` and `k` and taking the stage-1 outputs as
//! values. Heads are merged, projected out, and the local context branch (a
//! 5×5 depthwise convolution of the un-split `v` projection) is added.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighborhood::{
    kernel_backward, kernel_flops, kernel_forward_on, KernelSaved, Lattice2d, NeighborhoodSpec,
};
use crate::nn::{depthwise_backward, depthwise_conv2d, pointwise, pointwise_backward};
use crate::report::ReportNode;
use crate::tensor::{Rng, Scalar, Tensor};

pub const LCE_KERNEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StridePolicy {
    /// `max(1, ⌊side / anchors⌋)` per axis.
    Auto,
    Fixed(usize, usize),
}

/// Anchor step along one axis: the fixed value, or `max(1, ⌊side / anchors⌋)`.
pub fn resolve_stride(fixed: Option<usize>, feature_side: usize, anchors: usize) -> usize {
    match fixed {
        Some(s) => s,
        None => (feature_side / anchors.max(1)).max(1),
    }
}

impl StridePolicy {
    pub fn resolve(&self, height: usize, width: usize, anchors: (usize, usize)) -> (usize, usize) {
        let (fh, fw) = match *self {
            StridePolicy::Auto => (None, None),
            StridePolicy::Fixed(a, b) => (Some(a), Some(b)),
        };
        (
            resolve_stride(fh, height, anchors.0),
            resolve_stride(fw, width, anchors.1),
        )
    }
}

impl fmt::Display for StridePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            StridePolicy::Auto => f.write_str("auto"),
            StridePolicy::Fixed(a, b) if a == b => write!(f, "{a}"),
            StridePolicy::Fixed(a, b) => write!(f, "{a},{b}"),
        }
    }
}

impl FromStr for StridePolicy {
    type Err = Error;

    /// `auto`, `N`, or `N,M`.
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(StridePolicy::Auto);
        }
        let (a, b) = parse_pair(s)?;
        Ok(StridePolicy::Fixed(a, b))
    }
}

/// Parses `N` or `N,M` (also `NxM`) into a pair.
pub fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split([',', 'x']).map(str::trim).collect();
    let num = |p: &str| {
        p.parse::<usize>()
            .map_err(|_| Error::config(format!("expected a positive integer, got `{p}`")))
    };
    match parts.as_slice() {
        [a] => {
            let a = num(a)?;
            Ok((a, a))
        }
        [a, b] => Ok((num(a)?, num(b)?)),
        _ => Err(Error::config(format!("expected `N` or `N,M`, got `{s}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct S3AConfig {
    pub channels: usize,
    pub heads: usize,
    pub window: (usize, usize),
    pub anchors: (usize, usize),
    pub stride: StridePolicy,
    /// Local context enhancement branch.
    pub lce: bool,
}

impl S3AConfig {
    /// Window 3×3, anchors 7×7, automatic stride, LCE on.
    pub fn new(channels: usize, heads: usize) -> Self {
        S3AConfig {
            channels,
            heads,
            window: (3, 3),
            anchors: (7, 7),
            stride: StridePolicy::Auto,
            lce: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "{} channels cannot be split across {} heads",
                self.channels, self.heads
            )));
        }
        for (what, (a, b)) in [("window", self.window), ("anchors", self.anchors)] {
            if a % 2 == 0 || b % 2 == 0 {
                return Err(Error::config(format!("{what} ({a}, {b}) must be odd and >= 1")));
            }
        }
        if let StridePolicy::Fixed(a, b) = self.stride {
            if a == 0 || b == 0 {
                return Err(Error::config(format!("fixed stride ({a}, {b}) must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn scale(&self) -> f64 {
        (self.head_dim() as f64).powf(-0.5)
    }

    pub fn window_spec(&self) -> Result<NeighborhoodSpec> {
        NeighborhoodSpec::new(self.window, (1, 1))
    }

    pub fn anchor_spec(&self, height: usize, width: usize) -> Result<NeighborhoodSpec> {
        NeighborhoodSpec::new(self.anchors, self.stride.resolve(height, width, self.anchors))
    }

    /// `4C² + 4C`, plus `26C` with the LCE branch.
    pub fn param_count(&self) -> u64 {
        let c = self.channels as u64;
        4 * c * c + 4 * c + if self.lce { (LCE_KERNEL * LCE_KERNEL) as u64 * c + c } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LceParams<T: Scalar> {
    pub filter: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Learnable tensors of one layer. There is exactly one q/k/v projection.
#[derive(Debug, Clone, PartialEq)]
pub struct S3AParams<T: Scalar = f32> {
    pub w_qkv: Tensor<T>,
    pub b_qkv: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
    pub lce: Option<LceParams<T>>,
}

impl<T: Scalar> S3AParams<T> {
    pub fn zeros(cfg: &S3AConfig) -> Self {
        let c = cfg.channels;
        S3AParams {
            w_qkv: Tensor::zeros(&[3 * c, c]),
            b_qkv: Tensor::zeros(&[3 * c]),
            w_out: Tensor::zeros(&[c, c]),
            b_out: Tensor::zeros(&[c]),
            lce: cfg.lce.then(|| LceParams {
                filter: Tensor::zeros(&[c, LCE_KERNEL, LCE_KERNEL]),
                bias: Tensor::zeros(&[c]),
            }),
        }
    }

    /// Weights `N(0, weight_std²)`, biases `N(0, bias_std²)`.
    pub fn random(cfg: &S3AConfig, rng: &mut Rng, weight_std: f64, bias_std: f64) -> Self {
        let mut p = Self::zeros(cfg);
        for (name, t) in p.tensors_mut() {
            let std = if name.starts_with('b') || name.ends_with("bias") {
                bias_std
            } else {
                weight_std
            };
            *t = Tensor::randn(t.shape(), rng, std);
        }
        p
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![
            ("w_qkv", &self.w_qkv),
            ("b_qkv", &self.b_qkv),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ];
        if let Some(l) = &self.lce {
            v.push(("lce.weight", &l.filter));
            v.push(("lce.bias", &l.bias));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![
            ("w_qkv", &mut self.w_qkv),
            ("b_qkv", &mut self.b_qkv),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
        ];
        if let Some(l) = &mut self.lce {
            v.push(("lce.weight", &mut l.filter));
            v.push(("lce.bias", &mut l.bias));
        }
        v
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check(&self, cfg: &S3AConfig) -> Result<()> {
        let reference = Self::zeros(cfg);
        if reference.lce.is_some() != self.lce.is_some() {
            return Err(Error::config(format!(
                "LCE branch is {} in the config but {} in the parameters",
                if cfg.lce { "enabled" } else { "disabled" },
                if self.lce.is_some() { "present" } else { "absent" }
            )));
        }
        for ((name, want), (_, got)) in reference.tensors().iter().zip(self.tensors()) {
            if want.shape() != got.shape() {
                return Err(Error::config(format!(
                    "s3a parameter {name} has shape {:?}, config needs {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> S3AParams<U> {
        S3AParams {
            w_qkv: self.w_qkv.cast(),
            b_qkv: self.b_qkv.cast(),
            w_out: self.w_out.cast(),
            b_out: self.b_out.cast(),
            lce: self.lce.as_ref().map(|l| LceParams {
                filter: l.filter.cast(),
                bias: l.bias.cast(),
            }),
        }
    }
}

/// Activations kept by [`s3a_forward`] for [`s3a_backward`].
#[derive(Debug, Clone)]
pub struct SavedState<T: Scalar> {
    cfg: S3AConfig,
    x: Tensor<T>,
    v_pre: Tensor<T>,
    merged: Tensor<T>,
    stage1: KernelSaved<T>,
    stage2: KernelSaved<T>,
}

impl<T: Scalar> SavedState<T> {
    pub fn config(&self) -> &S3AConfig {
        &self.cfg
    }

    pub fn stage1(&self) -> &KernelSaved<T> {
        &self.stage1
    }

    pub fn stage2(&self) -> &KernelSaved<T> {
        &self.stage2
    }
}

#[derive(Debug, Clone)]
pub struct S3AGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub params: S3AParams<T>,
}

/// `[C, H, W]` channel block → `[heads, H, W, head_dim]`.
fn split_heads<T: Scalar>(src: &[T], heads: usize, h: usize, w: usize) -> Tensor<T> {
    let n = h * w;
    let dh = src.len() / (heads * n).max(1);
    let mut out = Tensor::zeros(&[heads, h, w, dh]);
    let od = out.data_mut();
    for a in 0..heads {
        for d in 0..dh {
            let row = &src[(a * dh + d) * n..][..n];
            for (s, &v) in row.iter().enumerate() {
                od[(a * n + s) * dh + d] = v;
            }
        }
    }
    out
}

/// Inverse of [`split_heads`], appended to `dst` as `[C, H·W]` rows.
fn merge_heads_into<T: Scalar>(t: &Tensor<T>, dst: &mut [T]) {
    let [heads, h, w, dh] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let n = h * w;
    let td = t.data();
    for a in 0..heads {
        for s in 0..n {
            for d in 0..dh {
                dst[(a * dh + d) * n + s] = td[(a * n + s) * dh + d];
            }
        }
    }
}

fn feature_dims<T: Scalar>(x: &Tensor<T>, cfg: &S3AConfig) -> Result<(usize, usize)> {
    match *x.shape() {
        [c, h, w] if c == cfg.channels && h >= 1 && w >= 1 => Ok((h, w)),
        ref s => Err(Error::shape(format!(
            "s3a input must be [{}, H>=1, W>=1], got {s:?}",
            cfg.channels
        ))),
    }
}

/// Lattices for both stages at feature size `h × w`.
pub fn stage_lattices(cfg: &S3AConfig, h: usize, w: usize) -> Result<(Lattice2d, Lattice2d)> {
    Ok((
        Lattice2d::new(h, w, &cfg.window_spec()?)?,
        Lattice2d::new(h, w, &cfg.anchor_spec(h, w)?)?,
    ))
}

pub fn s3a_forward<T: Scalar>(
    x: &Tensor<T>,
    cfg: &S3AConfig,
    params: &S3AParams<T>,
) -> Result<(Tensor<T>, SavedState<T>)> {
    cfg.validate()?;
    let (h, w) = feature_dims(x, cfg)?;
    let (window, anchors) = stage_lattices(cfg, h, w)?;
    s3a_forward_with_lattices(x, cfg, params, window, anchors)
}

/// [`s3a_forward`] with caller-supplied stage lattices.
pub fn s3a_forward_with_lattices<T: Scalar>(
    x: &Tensor<T>,
    cfg: &S3AConfig,
    params: &S3AParams<T>,
    window: Lattice2d,
    anchors: Lattice2d,
) -> Result<(Tensor<T>, SavedState<T>)> {
    cfg.validate()?;
    params.check(cfg)?;
    let (h, w) = feature_dims(x, cfg)?;
    let (c, heads, n) = (cfg.channels, cfg.heads, h * w);
    let one = T::one();

    let qkv = pointwise(x, &params.w_qkv, Some(&params.b_qkv))?;
    let block = |i: usize| &qkv.data()[i * c * n..(i + 1) * c * n];
    let q = split_heads(block(0), heads, h, w);
    let k = split_heads(block(1), heads, h, w).scale(T::of_f64(cfg.scale()));
    let v = split_heads(block(2), heads, h, w);
    let v_pre = Tensor::from_vec(&[c, h, w], block(2).to_vec())?;

    let (v1, stage1) = kernel_forward_on(&q, &k, &v, window, one)?;
    let (v2, stage2) = kernel_forward_on(&q, &k, &v1, anchors, one)?;

    let mut merged = Tensor::zeros(&[c, h, w]);
    merge_heads_into(&v2, merged.data_mut());
    let mut out = pointwise(&merged, &params.w_out, Some(&params.b_out))?;
    if let Some(lce) = &params.lce {
        out.add_assign(&depthwise_conv2d(&v_pre, &lce.filter, Some(&lce.bias))?)?;
    }

    let saved = SavedState {
        cfg: *cfg,
        x: x.clone(),
        v_pre,
        merged,
        stage1,
        stage2,
    };
    Ok((out, saved))
}

pub fn s3a_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    saved: &SavedState<T>,
    params: &S3AParams<T>,
) -> Result<S3AGrads<T>> {
    let cfg = &saved.cfg;
    params
        .check(cfg)
        .map_err(|e| Error::State(format!("parameters do not match the saved forward: {e}")))?;
    let [c, h, w] = match *saved.x.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::State("saved state holds no input".into())),
    };
    if saved.merged.shape() != [c, h, w] || saved.v_pre.shape() != [c, h, w] {
        return Err(Error::State("saved state is inconsistent".into()));
    }
    grad_out.expect_shape(&[c, h, w])?;
    let (heads, n) = (cfg.heads, h * w);

    let (g_merged, g_w_out, g_b_out) = pointwise_backward(grad_out, &saved.merged, &params.w_out)?;
    let g_v2 = split_heads(g_merged.data(), heads, h, w);
    let s2 = kernel_backward(&g_v2, &saved.stage2)?;
    let s1 = kernel_backward(&s2.v, &saved.stage1)?;

    let g_q = s1.q.add(&s2.q)?;
    let g_k = s1.k.add(&s2.k)?.scale(T::of_f64(cfg.scale()));

    let mut g_qkv = Tensor::zeros(&[3 * c, h, w]);
    {
        let gd = g_qkv.data_mut();
        merge_heads_into(&g_q, &mut gd[..c * n]);
        merge_heads_into(&g_k, &mut gd[c * n..2 * c * n]);
        merge_heads_into(&s1.v, &mut gd[2 * c * n..]);
    }
    let lce = match &params.lce {
        Some(p) => {
            let (g_vpre, g_filter, g_bias) = depthwise_backward(grad_out, &saved.v_pre, &p.filter)?;
            g_qkv.data_mut()[2 * c * n..]
                .iter_mut()
                .zip(g_vpre.data())
                .for_each(|(a, &b)| *a = *a + b);
            Some(LceParams {
                filter: g_filter,
                bias: g_bias,
            })
        }
        None => None,
    };
    let (g_x, g_w_qkv, g_b_qkv) = pointwise_backward(&g_qkv, &saved.x, &params.w_qkv)?;

    Ok(S3AGrads {
        x: g_x,
        params: S3AParams {
            w_qkv: g_w_qkv,
            b_qkv: g_b_qkv,
            w_out: g_w_out,
            b_out: g_b_out,
            lce,
        },
    })
}

/// Itemized multiply-accumulates of one layer at `h × w`.
pub fn s3a_flops(cfg: &S3AConfig, h: usize, w: usize) -> Result<ReportNode> {
    cfg.validate()?;
    let (c, n) = (cfg.channels as u64, (h * w) as u64);
    let (dh, heads) = (cfg.head_dim(), cfg.heads);
    let mut items = vec![
        ReportNode::leaf("qkv", n * 3 * c * c),
        ReportNode::leaf("attn_window", kernel_flops(h, w, heads, dh, &cfg.window_spec()?)),
        ReportNode::leaf("attn_anchor", kernel_flops(h, w, heads, dh, &cfg.anchor_spec(h, w)?)),
        ReportNode::leaf("out", n * c * c),
    ];
    if cfg.lce {
        items.push(ReportNode::leaf("lce", n * (LCE_KERNEL * LCE_KERNEL) as u64 * c));
    }
    Ok(ReportNode::group("s3a", items))
}
