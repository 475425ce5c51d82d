//! SSViT-T/S/B/L: configuration presets, parameter assembly, whole-network
//! inference and analytic parameter / MAC counters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::block::init_tensor;
use crate::nn::{
    conv_out_side, downsample, layernorm, pointwise, ssvit_block, stem, BlockParams, DownsampleParams, StemParams,
    LN_EPS,
};
use crate::report::{FlopReport, ParamReport, ReportNode};
use crate::s3a::{s3a_flops, S3AConfig, StridePolicy};
use crate::tensor::{Rng, Scalar, Tensor};

pub const STAGES: usize = 4;
pub const INIT_STD: f64 = 0.02;
pub const IN_CHANNELS: usize = 3;
pub const PRESETS: [&str; 4] = ["ssvit-t", "ssvit-s", "ssvit-b", "ssvit-l"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub blocks: [usize; STAGES],
    pub channels: [usize; STAGES],
    pub heads: [usize; STAGES],
    pub ffn_ratio: usize,
    pub window: [(usize, usize); STAGES],
    pub anchors: [(usize, usize); STAGES],
    pub stride: [StridePolicy; STAGES],
    pub lce: bool,
    pub num_classes: usize,
}

impl ModelConfig {
    fn with_shape(name: &str, blocks: [usize; 4], channels: [usize; 4], heads: [usize; 4]) -> Self {
        ModelConfig {
            name: name.to_string(),
            blocks,
            channels,
            heads,
            ffn_ratio: 3,
            window: [(3, 3); STAGES],
            anchors: [(7, 7); STAGES],
            stride: [StridePolicy::Auto; STAGES],
            lce: true,
            num_classes: 1000,
        }
    }

    pub fn ssvit_t() -> Self {
        Self::with_shape("ssvit-t", [2, 2, 9, 2], [64, 128, 256, 512], [2, 4, 8, 16])
    }

    pub fn ssvit_s() -> Self {
        Self::with_shape("ssvit-s", [3, 5, 18, 4], [64, 128, 256, 512], [2, 4, 8, 16])
    }

    pub fn ssvit_b() -> Self {
        Self::with_shape("ssvit-b", [4, 9, 25, 9], [80, 160, 320, 512], [5, 5, 10, 16])
    }

    pub fn ssvit_l() -> Self {
        Self::with_shape("ssvit-l", [4, 9, 25, 9], [112, 224, 448, 640], [7, 7, 14, 20])
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "ssvit-t" | "t" => Ok(Self::ssvit_t()),
            "ssvit-s" | "s" => Ok(Self::ssvit_s()),
            "ssvit-b" | "b" => Ok(Self::ssvit_b()),
            "ssvit-l" | "l" => Ok(Self::ssvit_l()),
            _ => Err(Error::config(format!(
                "unknown model `{name}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::config("ffn_ratio must be >= 1"));
        }
        if self.channels[0] < 2 || !self.channels[0].is_multiple_of(2) {
            return Err(Error::config("first-stage channels must be even and >= 2"));
        }
        if self.channels.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config(format!("channels {:?} must strictly increase", self.channels)));
        }
        if self.blocks.contains(&0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        (0..STAGES).try_for_each(|i| self.stage_s3a(i).validate())
    }

    /// Attention settings of stage `i` (0-based).
    pub fn stage_s3a(&self, i: usize) -> S3AConfig {
        S3AConfig {
            channels: self.channels[i],
            heads: self.heads[i],
            window: self.window[i],
            anchors: self.anchors[i],
            stride: self.stride[i],
            lce: self.lce,
        }
    }

    /// Feature-map side of each stage for an input side.
    pub fn stage_sides(&self, side: usize) -> Option<[usize; STAGES]> {
        let mut s = crate::nn::stem::STEM_STRIDES
            .iter()
            .try_fold(side, |s, &st| conv_out_side(s, 3, st, 1))?;
        let mut out = [0; STAGES];
        for (i, slot) in out.iter_mut().enumerate() {
            if i > 0 {
                s = conv_out_side(s, 3, 2, 1)?;
            }
            *slot = s;
        }
        Some(out)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match *shape {
            [c, h, w] if c == IN_CHANNELS && h >= 32 && w >= 32 && h % 4 == 0 && w % 4 == 0 => Ok((h, w)),
            _ => Err(Error::shape(format!(
                "input must be [3, H, W] with H, W >= 32 and divisible by 4, got {shape:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T: Scalar = f32> {
    /// Absent for the first stage.
    pub downsample: Option<DownsampleParams<T>>,
    pub blocks: Vec<BlockParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub stem: StemParams<T>,
    pub stages: Vec<StageParams<T>>,
    pub head_norm_scale: Tensor<T>,
    pub head_norm_shift: Tensor<T>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

fn prefixed<'a, X>(prefix: &str, items: Vec<(String, X)>) -> impl Iterator<Item = (String, X)> + 'a
where
    X: 'a,
{
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

impl<T: Scalar> ModelParams<T> {
    /// All tensors zero-filled.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let stages = (0..STAGES)
            .map(|i| StageParams {
                downsample: (i > 0).then(|| DownsampleParams::zeros(cfg.channels[i - 1], cfg.channels[i])),
                blocks: (0..cfg.blocks[i])
                    .map(|_| BlockParams::zeros(&cfg.stage_s3a(i), cfg.ffn_ratio))
                    .collect(),
            })
            .collect();
        let c4 = cfg.channels[STAGES - 1];
        Ok(ModelParams {
            config: cfg.clone(),
            stem: StemParams::zeros(IN_CHANNELS, cfg.channels[0]),
            stages,
            head_norm_scale: Tensor::zeros(&[c4]),
            head_norm_shift: Tensor::zeros(&[c4]),
            head_weight: Tensor::zeros(&[cfg.num_classes, c4]),
            head_bias: Tensor::zeros(&[cfg.num_classes]),
        })
    }

    /// Every tensor under its dotted path, e.g. `stage3.block0.s3a.w_qkv`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = prefixed("stem", self.stem.tensors()).collect();
        for (i, st) in self.stages.iter().enumerate() {
            if let Some(d) = &st.downsample {
                out.extend(prefixed(&format!("stage{}.downsample", i + 1), d.tensors()));
            }
            for (j, b) in st.blocks.iter().enumerate() {
                out.extend(prefixed(&format!("stage{}.block{j}", i + 1), b.tensors()));
            }
        }
        out.push(("head.norm.weight".into(), &self.head_norm_scale));
        out.push(("head.norm.bias".into(), &self.head_norm_shift));
        out.push(("head.fc.weight".into(), &self.head_weight));
        out.push(("head.fc.bias".into(), &self.head_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = prefixed("stem", self.stem.tensors_mut()).collect();
        for (i, st) in self.stages.iter_mut().enumerate() {
            if let Some(d) = &mut st.downsample {
                out.extend(prefixed(&format!("stage{}.downsample", i + 1), d.tensors_mut()));
            }
            for (j, b) in st.blocks.iter_mut().enumerate() {
                out.extend(prefixed(&format!("stage{}.block{j}", i + 1), b.tensors_mut()));
            }
        }
        out.push(("head.norm.weight".into(), &mut self.head_norm_scale));
        out.push(("head.norm.bias".into(), &mut self.head_norm_shift));
        out.push(("head.fc.weight".into(), &mut self.head_weight));
        out.push(("head.fc.bias".into(), &mut self.head_bias));
        out
    }

    pub fn num_scalars(&self) -> u64 {
        self.named_params().iter().map(|(_, t)| t.len() as u64).sum()
    }
}

/// Weights `N(0, 0.02²)`, zero biases, unit norm scales.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelParams<T>> {
    let mut p = ModelParams::zeros(cfg)?;
    for (name, t) in p.named_params_mut() {
        init_tensor(&name, t, rng, INIT_STD);
    }
    Ok(p)
}

/// Stem, four stages, then LayerNorm → global average pool → linear.
pub fn model_forward<T: Scalar>(params: &ModelParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = &params.config;
    cfg.check_input(image.shape())?;
    let mut x = stem(image, &params.stem)?;
    for (i, st) in params.stages.iter().enumerate() {
        if let Some(d) = &st.downsample {
            x = downsample(&x, d)?;
        }
        let s3a_cfg = cfg.stage_s3a(i);
        for b in &st.blocks {
            x = ssvit_block(&x, b, &s3a_cfg)?;
        }
    }
    let x = layernorm(&x, &params.head_norm_scale, &params.head_norm_shift, LN_EPS)?;
    let (c, n) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let pooled: Vec<T> = x
        .data()
        .chunks(n)
        .map(|plane| T::of_f64(plane.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64))
        .collect();
    let pooled = Tensor::from_vec(&[c, 1], pooled)?;
    pointwise(&pooled, &params.head_weight, Some(&params.head_bias))?.reshape(&[cfg.num_classes])
}

fn block_param_nodes(cfg: &S3AConfig, ratio: usize) -> Vec<ReportNode> {
    let c = cfg.channels as u64;
    let hidden = c * ratio as u64;
    vec![
        ReportNode::leaf("cpe", 9 * c + c),
        ReportNode::leaf("norm1", 2 * c),
        ReportNode::leaf("s3a", cfg.param_count()),
        ReportNode::leaf("norm2", 2 * c),
        ReportNode::leaf("ffn", 2 * c * hidden + hidden + c),
    ]
}

fn conv3_params(cin: usize, cout: usize) -> u64 {
    (cin * cout * 9) as u64
}

fn stem_channels(c1: usize) -> [(usize, usize); 4] {
    let half = c1 / 2;
    [(IN_CHANNELS, half), (half, half), (half, half), (half, c1)]
}

/// Closed-form parameter count, itemized per stage, block and component.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamReport> {
    cfg.validate()?;
    let stem = ReportNode::group(
        "stem",
        stem_channels(cfg.channels[0])
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| ReportNode::leaf(format!("conv{i}"), conv3_params(ci, co) + 2 * co as u64))
            .collect(),
    );
    let mut top = vec![stem];
    for i in 0..STAGES {
        let s3a_cfg = cfg.stage_s3a(i);
        let mut items = Vec::new();
        if i > 0 {
            let (ci, co) = (cfg.channels[i - 1], cfg.channels[i]);
            items.push(ReportNode::leaf("downsample", conv3_params(ci, co) + 3 * co as u64));
        }
        for j in 0..cfg.blocks[i] {
            items.push(ReportNode::group(format!("block{j}"), block_param_nodes(&s3a_cfg, cfg.ffn_ratio)));
        }
        top.push(ReportNode::group(format!("stage{}", i + 1), items));
    }
    let (c4, k) = (cfg.channels[STAGES - 1] as u64, cfg.num_classes as u64);
    top.push(ReportNode::group(
        "head",
        vec![ReportNode::leaf("norm", 2 * c4), ReportNode::leaf("fc", c4 * k + k)],
    ));
    Ok(ParamReport::new(ReportNode::group(cfg.name.clone(), top)))
}

/// Multiply-accumulates for one `h × w` forward pass, itemized per stage,
/// block and component.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<FlopReport> {
    cfg.validate()?;
    cfg.check_input(&[IN_CHANNELS, h, w])?;
    let geometry_err = || Error::shape(format!("{h}x{w} input is too small for this network"));
    let hs = cfg.stage_sides(h).ok_or_else(geometry_err)?;
    let ws = cfg.stage_sides(w).ok_or_else(geometry_err)?;

    let (mut sh, mut sw) = (h, w);
    let mut stem_items = Vec::new();
    for (i, (&(ci, co), &st)) in stem_channels(cfg.channels[0])
        .iter()
        .zip(&crate::nn::stem::STEM_STRIDES)
        .enumerate()
    {
        sh = conv_out_side(sh, 3, st, 1).ok_or_else(geometry_err)?;
        sw = conv_out_side(sw, 3, st, 1).ok_or_else(geometry_err)?;
        stem_items.push(ReportNode::leaf(format!("conv{i}"), (sh * sw) as u64 * conv3_params(ci, co)));
    }
    let mut top = vec![ReportNode::group("stem", stem_items)];

    for i in 0..STAGES {
        let (fh, fw) = (hs[i], ws[i]);
        let n = (fh * fw) as u64;
        let s3a_cfg = cfg.stage_s3a(i);
        let c = cfg.channels[i] as u64;
        let mut items = Vec::new();
        if i > 0 {
            items.push(ReportNode::leaf("downsample", n * conv3_params(cfg.channels[i - 1], cfg.channels[i])));
        }
        let attn = s3a_flops(&s3a_cfg, fh, fw)?;
        for j in 0..cfg.blocks[i] {
            items.push(ReportNode::group(
                format!("block{j}"),
                vec![
                    ReportNode::leaf("cpe", n * 9 * c),
                    attn.clone(),
                    ReportNode::leaf("ffn", 2 * n * c * c * cfg.ffn_ratio as u64),
                ],
            ));
        }
        top.push(ReportNode::group(format!("stage{}", i + 1), items));
    }
    let c4 = cfg.channels[STAGES - 1] as u64;
    top.push(ReportNode::group(
        "head",
        vec![ReportNode::leaf("fc", c4 * cfg.num_classes as u64)],
    ));
    Ok(FlopReport::new((h, w), ReportNode::group(cfg.name.clone(), top)))
}
