//! Acceptance gate: one line per criterion on stderr, nonzero exit if any fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use ssattn::checks::{
    degenerate_suite, equivariance_suite, gradient_suite, normalization_suite, oracle_suite, CheckOptions,
    CheckResult, Library,
};
use ssattn::io::{
    decode_checkpoint, decode_manifest, decode_tensor, encode_checkpoint, encode_tensor, load_checkpoint,
    load_tensor, save_checkpoint, save_tensor,
};
use ssattn::model::{build_model, count_flops, count_params, model_forward, ModelConfig, ModelParams, PRESETS};
use ssattn::nn::{ssvit_block, BlockParams};
use ssattn::{Error, FormatError, Rng, S3AConfig, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed <= budget, format!("took {elapsed:.2?}, budget {budget:?}"))
}

fn summarize(results: &[CheckResult]) -> Result<String, String> {
    let line = results
        .iter()
        .map(|r| format!("{} {:.1e}/{:.0e} over {}", r.name, r.max_error, r.tolerance, r.cases))
        .collect::<Vec<_>>()
        .join("; ");
    match results.iter().find(|r| !r.passed) {
        Some(bad) => Err(format!("{} failed: {line}", bad.name)),
        None => Ok(line),
    }
}

fn c1_params() -> Outcome {
    let t = Instant::now();
    let targets = [15e6, 27e6, 57e6, 100e6];
    let mut parts = Vec::new();
    for (name, target) in PRESETS.iter().zip(targets) {
        let total = count_params(&ModelConfig::preset(name).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?
            .total as f64;
        ensure(
            (total - target).abs() <= 0.10 * target,
            format!("{name}: {total} outside ±10% of {target}"),
        )?;
        parts.push(format!("{name} {:.2}M", total / 1e6));
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(parts.join(", "))
}

fn c2_flops() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::ssvit_t();
    let f = count_flops(&cfg, 224, 224).map_err(|e| e.to_string())?;
    let target = 2.4e9;
    ensure(
        (f.total as f64 - target).abs() <= 0.15 * target,
        format!("{} MACs outside ±15% of 2.4G", f.total),
    )?;
    let stages: Vec<u64> = (1..=4).map(|i| f.stage(i).map_or(0, |n| n.count)).collect();
    ensure(stages.iter().all(|&s| s > 0), "per-stage itemization missing")?;
    ensure(f.root.is_consistent(), "report tree does not sum to its total")?;
    within(t.elapsed(), Duration::from_secs(1))?;
    let mut info = Vec::new();
    for name in ["ssvit-b", "ssvit-l"] {
        let r = count_flops(&ModelConfig::preset(name).unwrap(), 224, 224).map_err(|e| e.to_string())?;
        info.push(format!("{name} {:.2}G (informational)", r.total as f64 / 1e9));
    }
    Ok(format!(
        "ssvit-t {:.3}G, stages {:?}; {}",
        f.total as f64 / 1e9,
        stages.iter().map(|s| format!("{:.3}G", *s as f64 / 1e9)).collect::<Vec<_>>(),
        info.join(", ")
    ))
}

fn c3_oracle() -> Outcome {
    let t = Instant::now();
    let opts = CheckOptions {
        seed: 3,
        oracle_cases: 240,
        ..CheckOptions::default()
    };
    let res = oracle_suite(&Library, &opts).map_err(|e| e.to_string())?;
    ensure(res.iter().all(|r| r.cases >= 200), "fewer than 200 configurations")?;
    within(t.elapsed(), Duration::from_secs(120))?;
    summarize(&res)
}

fn c4_degenerate() -> Outcome {
    let t = Instant::now();
    let opts = CheckOptions {
        seed: 4,
        degenerate_cases: 24,
        ..CheckOptions::default()
    };
    let res = degenerate_suite(&Library, &opts).map_err(|e| e.to_string())?;
    within(t.elapsed(), Duration::from_secs(30))?;
    summarize(&res)
}

fn c5_gradients() -> Outcome {
    let t = Instant::now();
    let opts = CheckOptions {
        seed: 5,
        gradient_cases: 30,
        ..CheckOptions::default()
    };
    let res = gradient_suite(&Library, &opts).map_err(|e| e.to_string())?;
    within(t.elapsed(), Duration::from_secs(180))?;
    summarize(&res)
}

fn c6_properties() -> Outcome {
    let t = Instant::now();
    let opts = CheckOptions {
        seed: 6,
        property_cases: 500,
        ..CheckOptions::default()
    };
    let mut res = normalization_suite(&opts).map_err(|e| e.to_string())?;
    res.extend(
        equivariance_suite(&Library, &opts)
            .map_err(|e| e.to_string())?
            .into_iter()
            .filter(|r| r.name == "shift_equivariance"),
    );
    ensure(res.iter().all(|r| r.cases >= 500), "fewer than 500 cases")?;
    within(t.elapsed(), Duration::from_secs(60))?;
    summarize(&res)
}

fn c7_identity_and_shapes() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::seed(7);
    for (c, heads, h, w) in [(4, 2, 5, 7), (8, 4, 9, 3), (16, 2, 1, 6), (64, 2, 14, 14)] {
        let cfg = S3AConfig::new(c, heads);
        let zero = BlockParams::<f32>::zeros(&cfg, 3);
        let x = Tensor::<f32>::randn(&[c, h, w], &mut rng, 1.0);
        let y = ssvit_block(&x, &zero, &cfg).map_err(|e| e.to_string())?;
        ensure(y == x, format!("zero block is not the identity at C={c} {h}x{w}"))?;
    }
    let mut cfg = ModelConfig::ssvit_t();
    cfg.num_classes = 10;
    let params = build_model::<f32>(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let geometries = [(32, 32), (32, 64), (64, 32), (48, 48), (36, 60), (64, 64), (96, 32), (40, 72), (128, 96), (44, 44)];
    for (h, w) in geometries {
        let x = Tensor::<f32>::randn(&[3, h, w], &mut rng, 1.0);
        let y = model_forward(&params, &x).map_err(|e| e.to_string())?;
        ensure(y.shape() == [10] && y.all_finite(), format!("bad logits at {h}x{w}"))?;
    }
    for bad in [[3, 30, 32], [3, 32, 34], [1, 32, 32]] {
        ensure(
            matches!(model_forward(&params, &Tensor::zeros(&bad)), Err(Error::Shape(_))),
            format!("{bad:?} was not rejected"),
        )?;
    }
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(format!("zero block identity on 4 geometries; {} forward geometries", geometries.len()))
}

fn bits_equal<T: ssattn::Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape() && encode_tensor(a) == encode_tensor(b)
}

fn c8_formats() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = Rng::seed(8);
    for i in 0..100 {
        let rank = rng.range(0, 4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.range(1, 9)).collect();
        let path = dir.path().join(format!("t{i}.ssa"));
        let ok = if i % 2 == 0 {
            let x = Tensor::<f32>::randn(&shape, &mut rng, 3.0);
            save_tensor(&path, &x).map_err(|e| e.to_string())?;
            bits_equal(&x, &load_tensor::<f32>(&path).map_err(|e| e.to_string())?)
        } else {
            let x = Tensor::<f64>::randn(&shape, &mut rng, 3.0);
            save_tensor(&path, &x).map_err(|e| e.to_string())?;
            bits_equal(&x, &load_tensor::<f64>(&path).map_err(|e| e.to_string())?)
        };
        ensure(ok, format!("tensor {i} {shape:?} changed in round trip"))?;
    }

    let cfg = ModelConfig::ssvit_t();
    let a = build_model::<f32>(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let pa = dir.path().join("t.ckpt");
    save_checkpoint(&pa, &a).map_err(|e| e.to_string())?;
    ensure(load_checkpoint::<f32>(&pa).map_err(|e| e.to_string())? == a, "f32 checkpoint changed")?;
    let mut small = ModelConfig::ssvit_t();
    small.lce = false;
    small.num_classes = 10;
    let b = build_model::<f64>(&small, &mut rng).map_err(|e| e.to_string())?;
    let pb = dir.path().join("s.ckpt");
    save_checkpoint(&pb, &b).map_err(|e| e.to_string())?;
    ensure(load_checkpoint::<f64>(&pb).map_err(|e| e.to_string())? == b, "f64 checkpoint changed")?;

    let good = encode_tensor(&Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let mut bad_magic = good.clone();
    let pos = bad_magic.windows(4).position(|w| w == b"SSA1").unwrap();
    bad_magic[pos..pos + 4].copy_from_slice(b"SSA0");
    ensure(
        matches!(decode_tensor::<f32>(&bad_magic), Err(Error::Format(FormatError::Magic { .. }))),
        "corrupt magic not reported",
    )?;
    ensure(
        matches!(decode_tensor::<f32>(&good[..good.len() - 4]), Err(Error::Format(FormatError::Length(_)))),
        "3 scalars for shape [2, 2] not reported as a length error",
    )?;

    let mut tiny = ModelConfig::ssvit_t();
    tiny.blocks = [1, 1, 1, 1];
    tiny.num_classes = 3;
    let bytes = encode_checkpoint(&ModelParams::<f32>::zeros(&tiny).unwrap());
    let mut manifest = decode_manifest(&bytes).map_err(|e| e.to_string())?;
    let data_end = manifest.entries.last().map(|e| e.offset + e.length).unwrap() as usize;
    let dropped = manifest.entries.remove(5).path;
    let json = serde_json::to_vec(&manifest).unwrap();
    let mut cut = bytes[..data_end].to_vec();
    cut.extend_from_slice(&json);
    cut.extend_from_slice(&(json.len() as u64).to_le_bytes());
    cut.extend_from_slice(ssattn::io::CHECKPOINT_MAGIC);
    match decode_checkpoint::<f32>(&cut) {
        Err(Error::Format(FormatError::MissingParam(p))) if p == dropped => {}
        other => return Err(format!("missing `{dropped}` not reported: {other:?}")),
    }
    let mut trailer = bytes.clone();
    let n = trailer.len();
    trailer[n - 1] ^= 0xff;
    ensure(
        matches!(decode_checkpoint::<f32>(&trailer), Err(Error::Format(FormatError::Magic { .. }))),
        "corrupt checkpoint trailer not reported",
    )?;
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok("100 tensors and 2 checkpoints bitwise; magic, length and missing-parameter errors named".into())
}

fn c9_bench_and_scope() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_ssattn"))
        .args(["bench", "ssvit-t", "--resolution", "64", "--repeats", "5"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("bench exited with {}", out.status))?;
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let timings = &report["timings"];
    ensure(
        timings["model_forward"]["samples_ms"].as_array().map_or(0, Vec::len) == 5,
        "expected 5 forward samples",
    )?;
    ensure(timings["s3a_layers"].as_array().map_or(0, Vec::len) == 4, "missing per-stage layer timings")?;
    ensure(report["results"]["scaling"]["tokens"].as_array().map_or(0, Vec::len) == 3, "malformed scaling report")?;
    let ratio = timings["scaling"]["ratio"].as_f64().unwrap_or(f64::NAN);
    ensure(
        timings["scaling"]["within_envelope"] == true,
        format!("per-token time ratio {ratio:.2} exceeds the 2x envelope"),
    )?;
    Ok(format!(
        "scaling ratio {ratio:.2} within 2x. Not reproducible at desk scale and not attempted: ImageNet top-1 \
         (83.0/84.4/85.3/85.7), COCO AP, ADE20K mIoU, robustness scores, throughput tables; criteria 3-7 stand in"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("parameter counts", c1_params),
        ("FLOP count", c2_flops),
        ("oracle equivalence", c3_oracle),
        ("degenerate equivalences", c4_degenerate),
        ("gradient fidelity", c5_gradients),
        ("lattice and stochasticity properties", c6_properties),
        ("residual identity and shape contract", c7_identity_and_shapes),
        ("format round trip", c8_formats),
        ("bench scaling and scope statement", c9_bench_and_scope),
    ];
    let mut failures = 0;
    let mut err = std::io::stderr();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(err, "criterion {}: {tag} {name} [{:.2?}] {detail}", i + 1, t.elapsed());
    }
    let _ = writeln!(err, "acceptance: {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
