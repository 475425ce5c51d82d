//! The `ssattn` command line: describe, check, bench, infer, plus the
//! `init` / `randn` helpers that produce inputs for `infer`.
//!
//! Machine output is one JSON document on stdout; tables and diagnostics go
//! to stderr. Exit status: 0 success, 1 failed checks, 2 usage or
//! validation errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checks::{run_checks, CheckOptions, S3aImpl};
use crate::io::{sha256_hex, load_checkpoint, load_tensor, peek_checkpoint, peek_tensor, save_checkpoint, save_tensor, RunReport};
use crate::model::{build_model, count_flops, count_params, model_forward, ModelConfig, STAGES};
use crate::s3a::{parse_pair, s3a_flops, s3a_forward, S3AParams, StridePolicy};
use crate::tensor::{DType, Rng, Scalar, Tensor};
use crate::{Error, FormatError, Result};

#[derive(Debug, Parser)]
#[command(name = "ssattn", version, about = "Sparse scan self-attention: model counters, checks, benchmarks and inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and FLOP breakdown of a model.
    Describe(DescribeArgs),
    /// Run the oracle, degeneracy, property and gradient suites.
    Check(CheckArgs),
    /// Time whole-model inference and isolated attention layers.
    Bench(BenchArgs),
    /// Classify a tensor file with a checkpoint.
    Infer(InferArgs),
    /// Write a randomly initialized checkpoint.
    Init(InitArgs),
    /// Write a tensor file of standard normal draws.
    Randn(RandnArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Preset (ssvit-t|s|b|l) or path to a JSON model config.
    #[arg(value_name = "CONFIG")]
    pub name: Option<String>,
    #[arg(long = "config", conflicts_with = "name")]
    pub config: Option<String>,
    /// Window extent for every stage: `N` or `N,M`.
    #[arg(long)]
    pub window: Option<String>,
    /// Anchor lattice extent for every stage: `N` or `N,M`.
    #[arg(long)]
    pub anchors: Option<String>,
    /// Anchor stride for every stage: `auto`, `N` or `N,M`.
    #[arg(long)]
    pub stride: Option<StridePolicy>,
    /// Drop the local context enhancement branch.
    #[arg(long)]
    pub no_lce: bool,
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let name = self.config.as_deref().or(self.name.as_deref()).unwrap_or("ssvit-t");
        let mut cfg = if Path::new(name).is_file() {
            let text = std::fs::read_to_string(name).map_err(|e| FormatError::Io {
                path: name.into(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{name}: {e}")))?
        } else {
            ModelConfig::preset(name)?
        };
        if let Some(w) = &self.window {
            cfg.window = [parse_pair(w)?; STAGES];
        }
        if let Some(a) = &self.anchors {
            cfg.anchors = [parse_pair(a)?; STAGES];
        }
        if let Some(s) = self.stride {
            cfg.stride = [s; STAGES];
        }
        if self.no_lce {
            cfg.lce = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    parse_pair(s)
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input side `N` or `H,W`.
    #[arg(long, default_value = "224", value_parser = parse_resolution)]
    pub resolution: (usize, usize),
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict to a suite (repeatable): oracle, degenerate, normalization, equivariance, gradient.
    #[arg(long = "suite")]
    pub suites: Vec<String>,
    /// Override a tolerance, e.g. `--tolerance dense=1e-4` (repeatable).
    #[arg(long = "tolerance", value_name = "NAME=VALUE")]
    pub tolerances: Vec<String>,
    /// Randomized oracle-equivalence configurations.
    #[arg(long, default_value_t = 200)]
    pub oracle_cases: usize,
    /// Randomized gradient configurations.
    #[arg(long, default_value_t = 25)]
    pub gradient_cases: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "224", value_parser = parse_resolution)]
    pub resolution: (usize, usize),
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "f32")]
    pub dtype: DType,
    /// Skip the single-thread token-scaling measurement.
    #[arg(long)]
    pub no_scaling: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Tensor file of shape [3, H, W].
    #[arg(long)]
    pub input: PathBuf,
    /// Where to write the logits tensor.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "f32")]
    pub dtype: DType,
    /// Override the classifier width.
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RandnArgs {
    /// Comma-separated shape, e.g. `3,224,224`.
    #[arg(long)]
    pub shape: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "f32")]
    pub dtype: DType,
    #[arg(long)]
    pub out: PathBuf,
}

pub struct Streams<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

/// Parses `args` (including the program name) and runs the command against
/// `imp`. Returns the process exit status.
pub fn run<I: S3aImpl>(args: &[String], imp: &I, io: &mut Streams) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let sink: &mut dyn Write = if e.use_stderr() { &mut *io.err } else { &mut *io.out };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Describe(a) => describe(&a, io),
        Command::Check(a) => check(&a, imp, io),
        Command::Bench(a) => bench(&a, io),
        Command::Infer(a) => infer(&a, io),
        Command::Init(a) => init(&a, io),
        Command::Randn(a) => randn(&a, io),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(io.err, "error: {e}");
            2
        }
    }
}

fn emit(report: &RunReport, out: Option<&Path>, io: &mut Streams) -> Result<()> {
    let text = report.to_json();
    writeln!(io.out, "{text}").map_err(|e| FormatError::Io {
        path: "<stdout>".into(),
        source: e,
    })?;
    if let Some(path) = out {
        crate::io::write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

fn millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn giga(n: u64) -> String {
    format!("{:.3}G", n as f64 / 1e9)
}

fn describe(a: &DescribeArgs, io: &mut Streams) -> Result<i32> {
    let cfg = a.model.resolve()?;
    let (h, w) = a.resolution;
    let params = count_params(&cfg)?;
    let flops = count_flops(&cfg, h, w)?;

    let _ = writeln!(io.err, "{} @ {h}x{w}", cfg.name);
    let _ = writeln!(io.err, "{:<10} {:>12} {:>12}", "part", "params", "MACs");
    for part in &params.root.children {
        let f = flops.root.child(&part.name).map_or(0, |n| n.count);
        let _ = writeln!(io.err, "{:<10} {:>12} {:>12}", part.name, millions(part.count), giga(f));
    }
    let _ = writeln!(io.err, "{:<10} {:>12} {:>12}", "total", millions(params.total), giga(flops.total));

    let report = RunReport::new(
        "describe",
        &cfg,
        json!({ "config": cfg, "params": params, "flops": flops }),
    );
    emit(&report, a.out.as_deref(), io)?;
    Ok(0)
}

fn check<I: S3aImpl>(a: &CheckArgs, imp: &I, io: &mut Streams) -> Result<i32> {
    let mut opts = CheckOptions {
        seed: a.seed,
        oracle_cases: a.oracle_cases,
        gradient_cases: a.gradient_cases,
        ..CheckOptions::default()
    };
    for t in &a.tolerances {
        let (name, value) = t
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected NAME=VALUE, got `{t}`")))?;
        let value: f64 = value
            .parse()
            .map_err(|_| Error::Config(format!("`{value}` is not a number")))?;
        opts.tolerances.set(name.trim(), value)?;
    }
    let report = run_checks(imp, &opts, &a.suites)?;
    for r in &report.results {
        let _ = writeln!(
            io.err,
            "{:<26} {:>5} cases  max err {:>10.3e}  tol {:>8.1e}  {}",
            r.name,
            r.cases,
            r.max_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let passed = report.passed;
    let run = RunReport::new("check", &opts, serde_json::to_value(&report).expect("report serializes"));
    emit(&run, a.out.as_deref(), io)?;
    Ok(if passed { 0 } else { 1 })
}

/// Wall-clock samples in milliseconds.
fn time_ms(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    f()?;
    (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

fn stats(samples: &[f64]) -> serde_json::Value {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    json!({ "samples_ms": samples, "median_ms": median, "min_ms": s[0] })
}

fn median(v: &serde_json::Value) -> f64 {
    v["median_ms"].as_f64().unwrap_or(f64::NAN)
}

pub const SCALING_SIDES: [usize; 3] = [56, 28, 14];
pub const SCALING_ENVELOPE: f64 = 2.0;

fn bench(a: &BenchArgs, io: &mut Streams) -> Result<i32> {
    if a.repeats < 3 {
        return Err(Error::Config(format!("--repeats must be >= 3, got {}", a.repeats)));
    }
    match a.dtype {
        DType::F32 => bench_typed::<f32>(a, io),
        DType::F64 => bench_typed::<f64>(a, io),
    }
}

fn bench_typed<T: Scalar>(a: &BenchArgs, io: &mut Streams) -> Result<i32> {
    let cfg = a.model.resolve()?;
    let (h, w) = a.resolution;
    let flops = count_flops(&cfg, h, w)?;
    let mut rng = Rng::seed(a.seed);
    let params = build_model::<T>(&cfg, &mut rng)?;
    let image = Tensor::<T>::randn(&[3, h, w], &mut rng, 1.0);
    let fwd = stats(&time_ms(a.repeats, || model_forward(&params, &image).map(|_| ()))?);
    let _ = writeln!(io.err, "model_forward {h}x{w}: median {:.2} ms", median(&fwd));

    let hs = cfg.stage_sides(h).expect("validated geometry");
    let ws = cfg.stage_sides(w).expect("validated geometry");
    let mut layer_info = Vec::new();
    let mut layer_times = Vec::new();
    for i in 0..STAGES {
        let s_cfg = cfg.stage_s3a(i);
        let p = S3AParams::<T>::random(&s_cfg, &mut rng, 0.02, 0.0);
        let x = Tensor::<T>::randn(&[s_cfg.channels, hs[i], ws[i]], &mut rng, 1.0);
        let macs = s3a_flops(&s_cfg, hs[i], ws[i])?.count;
        let t = stats(&time_ms(a.repeats, || s3a_forward(&x, &s_cfg, &p).map(|_| ()))?);
        let _ = writeln!(
            io.err,
            "stage{} s3a {}x{} C={}: median {:.3} ms",
            i + 1,
            hs[i],
            ws[i],
            s_cfg.channels,
            median(&t)
        );
        layer_info.push(json!({ "stage": i + 1, "height": hs[i], "width": ws[i], "channels": s_cfg.channels, "macs": macs }));
        let mut t = t;
        t["macs_per_s"] = json!(macs as f64 / (median(&t) * 1e-3));
        layer_times.push(t);
    }

    let mut results = json!({
        "config": cfg,
        "dtype": T::DTYPE,
        "resolution": [h, w],
        "repeats": a.repeats,
        "forward_macs": flops.total,
        "s3a_layers": layer_info,
    });
    let mut fwd = fwd;
    fwd["macs_per_s"] = json!(flops.total as f64 / (median(&fwd) * 1e-3));
    let mut timings = json!({ "model_forward": fwd, "s3a_layers": layer_times });

    if !a.no_scaling {
        let (info, timing) = scaling::<T>(&cfg, a.repeats, &mut rng)?;
        results["scaling"] = info;
        let _ = writeln!(
            io.err,
            "s3a per-token time ratio across {SCALING_SIDES:?}: {:.2} (envelope {SCALING_ENVELOPE})",
            timing["ratio"].as_f64().unwrap_or(f64::NAN)
        );
        timings["scaling"] = timing;
    }
    let mut report = RunReport::new("bench", &cfg, results);
    report.timings = Some(timings);
    emit(&report, a.out.as_deref(), io)?;
    Ok(0)
}

/// Single-thread attention-layer time per token at fixed width across
/// [`SCALING_SIDES`]; linear cost keeps the max/min ratio within the envelope.
fn scaling<T: Scalar>(cfg: &ModelConfig, repeats: usize, rng: &mut Rng) -> Result<(serde_json::Value, serde_json::Value)> {
    let s_cfg = cfg.stage_s3a(0);
    let p = S3AParams::<T>::random(&s_cfg, rng, 0.02, 0.0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::State(format!("cannot build thread pool: {e}")))?;
    let mut per_token = Vec::new();
    let mut macs = Vec::new();
    for &side in &SCALING_SIDES {
        let x = Tensor::<T>::randn(&[s_cfg.channels, side, side], rng, 1.0);
        let samples = pool.install(|| time_ms(repeats, || s3a_forward(&x, &s_cfg, &p).map(|_| ())))?;
        let best = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        per_token.push(best * 1e6 / (side * side) as f64);
        macs.push(s3a_flops(&s_cfg, side, side)?.count);
    }
    let hi = per_token.iter().cloned().fold(0.0, f64::max);
    let lo = per_token.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = hi / lo;
    let info = json!({
        "channels": s_cfg.channels,
        "sides": SCALING_SIDES,
        "tokens": SCALING_SIDES.iter().map(|s| s * s).collect::<Vec<_>>(),
        "macs": macs,
        "envelope": SCALING_ENVELOPE,
    });
    let timing = json!({
        "threads": 1,
        "statistic": "min",
        "ns_per_token": per_token,
        "ratio": ratio,
        "within_envelope": ratio <= SCALING_ENVELOPE,
    });
    Ok((info, timing))
}

fn infer(a: &InferArgs, io: &mut Streams) -> Result<i32> {
    let manifest = peek_checkpoint(&a.checkpoint)?;
    let header = peek_tensor(&a.input)?;
    if header.dtype != manifest.dtype {
        return Err(FormatError::Dtype {
            expected: manifest.dtype.to_string(),
            found: header.dtype.to_string(),
        }
        .into());
    }
    manifest.config.check_input(&header.shape)?;
    let logits_shape = match manifest.dtype {
        DType::F32 => infer_typed::<f32>(a)?,
        DType::F64 => infer_typed::<f64>(a)?,
    };
    let bytes = std::fs::read(&a.out).map_err(|e| FormatError::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let _ = writeln!(io.err, "wrote {:?} logits to {}", logits_shape, a.out.display());
    let report = RunReport::new(
        "infer",
        &manifest.config,
        json!({
            "config": manifest.config.name,
            "dtype": manifest.dtype,
            "input_shape": header.shape,
            "output_shape": logits_shape,
            "output": a.out,
            "output_sha256": sha256_hex(&bytes),
        }),
    );
    emit(&report, None, io)?;
    Ok(0)
}

fn infer_typed<T: Scalar>(a: &InferArgs) -> Result<Vec<usize>> {
    let params = load_checkpoint::<T>(&a.checkpoint)?;
    let image = load_tensor::<T>(&a.input)?;
    let logits = model_forward(&params, &image)?;
    save_tensor(&a.out, &logits)?;
    Ok(logits.shape().to_vec())
}

fn init(a: &InitArgs, io: &mut Streams) -> Result<i32> {
    let mut cfg = a.model.resolve()?;
    if let Some(k) = a.num_classes {
        cfg.num_classes = k;
        cfg.validate()?;
    }
    let mut rng = Rng::seed(a.seed);
    let scalars = match a.dtype {
        DType::F32 => {
            let p = build_model::<f32>(&cfg, &mut rng)?;
            save_checkpoint(&a.out, &p)?;
            p.num_scalars()
        }
        DType::F64 => {
            let p = build_model::<f64>(&cfg, &mut rng)?;
            save_checkpoint(&a.out, &p)?;
            p.num_scalars()
        }
    };
    let _ = writeln!(io.err, "wrote {} ({} parameters) to {}", cfg.name, scalars, a.out.display());
    let report = RunReport::new(
        "init",
        &cfg,
        json!({ "config": cfg.name, "dtype": a.dtype, "seed": a.seed, "parameters": scalars, "output": a.out }),
    );
    emit(&report, None, io)?;
    Ok(0)
}

fn randn(a: &RandnArgs, io: &mut Streams) -> Result<i32> {
    let shape: Vec<usize> = a
        .shape
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad shape `{}`", a.shape)))?;
    crate::tensor::checked_numel(&shape)?;
    let mut rng = Rng::seed(a.seed);
    match a.dtype {
        DType::F32 => save_tensor(&a.out, &Tensor::<f32>::randn(&shape, &mut rng, 1.0))?,
        DType::F64 => save_tensor(&a.out, &Tensor::<f64>::randn(&shape, &mut rng, 1.0))?,
    }
    let report = RunReport::new(
        "randn",
        &shape,
        json!({ "shape": shape, "dtype": a.dtype, "seed": a.seed, "output": a.out }),
    );
    emit(&report, None, io)?;
    Ok(0)
}
