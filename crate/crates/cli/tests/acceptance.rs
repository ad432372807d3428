//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p w8a8-cli --test acceptance`.

use std::process::{Command, ExitCode};
use std::time::Instant;

use w8a8::calib::{build_plan, run_calibration, search_alpha, CalibConfig};
use w8a8::graph::{
    attach_smoothing, attach_smoothing_explicit, forward_fp, output_error_report, synthetic_inputs, synthetic_model,
    ModelConfig, ModelGraph, PrecisionMap, ReportConfig,
};
use w8a8::igemm::{gemm_quantized, int8_gemm, quantized_linear, rescale};
use w8a8::io;
use w8a8::quant::{
    compute_step, dequantize, effective_levels, fake_quant, quantize, Granularity, QuantScheme, SettingLevel, Timing,
};
use w8a8::smooth::{apply_smoothing, smoothing_factors};
use w8a8::tensor::{
    channel_absmax, gen_outlier_activations, matmul, max_rel_error, mse, row_absmax, OutlierSpec,
    SeededRng, Tensor,
};
use w8a8::Error;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn outlier_case(seed: u64) -> (Tensor, Tensor) {
    let x = gen_outlier_activations(64, 128, &OutlierSpec::new(0.01, 100.0, seed).unwrap()).unwrap();
    let w = SeededRng::new(seed.wrapping_add(1000)).gaussian(&[128, 128], 1.0);
    (x, w)
}

fn equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..200 {
        let (x, w) = outlier_case(seed);
        let s = smoothing_factors(&channel_absmax(&x).unwrap(), &row_absmax(&w), 0.5).unwrap();
        let (xs, ws) = apply_smoothing(&x, &w, &s).unwrap();
        worst = worst.max(max_rel_error(&matmul(&xs, &ws).unwrap(), &matmul(&x, &w).unwrap()).unwrap());
    }
    check(worst <= 1e-4, format!("worst max relative error {worst:.3e} over 200 cases (bound 1e-4)"))
}

fn balance() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..200 {
        let (x, w) = outlier_case(seed);
        let s = smoothing_factors(&channel_absmax(&x).unwrap(), &row_absmax(&w), 0.5).unwrap();
        let (xs, ws) = apply_smoothing(&x, &w, &s).unwrap();
        for (a, b) in channel_absmax(&xs).unwrap().iter().zip(row_absmax(&ws)) {
            worst = worst.max(((a - b).abs() / a.max(b)) as f64);
        }
    }
    check(worst <= 1e-5, format!("worst per-channel relative gap {worst:.3e} over 200 cases (bound 1e-5)"))
}

fn granularity_ordering() -> Outcome {
    let (mut worst_channel, mut worst_token) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let (x, w) = outlier_case(seed);
        let reference = matmul(&x, &w).unwrap();
        let err = |g| {
            let xq = fake_quant(&x, &QuantScheme::int8(g, Timing::Dynamic), None).unwrap();
            mse(&matmul(&xq, &w).unwrap(), &reference).unwrap()
        };
        let tensor = err(Granularity::PerTensor);
        worst_channel = worst_channel.max(err(Granularity::PerChannel) / tensor);
        worst_token = worst_token.max(err(Granularity::PerToken) / tensor);
    }
    check(
        worst_channel <= 0.1 && worst_token <= 2.0,
        format!("per-channel/per-tensor MSE ≤ {worst_channel:.4} (bound 0.1), per-token/per-tensor ≤ {worst_token:.3} (bound 2), 20 seeds"),
    )
}

fn smoothing_benefit() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (x, w) = outlier_case(seed);
        let reference = matmul(&x, &w).unwrap();
        // The static step is calibrated on the evaluated inputs.
        let naive = quantized_linear(&x, &w, SettingLevel::O3, Some(compute_step(x.absmax(), 8).unwrap())).unwrap();
        let s = smoothing_factors(&channel_absmax(&x).unwrap(), &row_absmax(&w), 0.5).unwrap();
        let (xs, ws) = apply_smoothing(&x, &w, &s).unwrap();
        let smoothed = quantized_linear(&xs, &ws, SettingLevel::O3, Some(compute_step(xs.absmax(), 8).unwrap())).unwrap();
        worst = worst.max(mse(&smoothed, &reference).unwrap() / mse(&naive, &reference).unwrap());
    }
    check(worst <= 0.2, format!("worst smoothed/unsmoothed O3 MSE ratio {worst:.4} over 20 seeds (bound 0.2)"))
}

/// The standard synthetic model for `seed`, its calibration batches and its
/// evaluation batches.
fn standard(seed: u64) -> (ModelGraph, Vec<Tensor>, Vec<Tensor>) {
    let cfg = ModelConfig { seed, outlier: OutlierSpec::new(0.01, 100.0, seed).unwrap(), ..ModelConfig::default() };
    let model = synthetic_model(&cfg).unwrap();
    let calib = synthetic_inputs(32, 1, 64, cfg.channels, seed + 10);
    let eval = synthetic_inputs(4, 1, 64, cfg.channels, seed + 20);
    (model, calib, eval)
}

fn alpha_sweep() -> Outcome {
    let grid: Vec<f32> = (1..=9).map(|i| i as f32 / 10.0).collect();
    let mut picks = Vec::new();
    let mut ok = true;
    for seed in 0..5 {
        let (model, calib, eval) = standard(seed);
        let found = search_alpha(&model, &calib, &eval, &grid, SettingLevel::O3, &CalibConfig::with_samples(calib.len())).unwrap();
        let best = found.curve.iter().find(|c| c.0 == found.best_alpha).unwrap().1;
        let (first, last) = (found.curve[0].1, found.curve[found.curve.len() - 1].1);
        ok &= (0.4..=0.6).contains(&found.best_alpha) && first > best && last > best;
        picks.push(format!("{:.1}", found.best_alpha));
    }
    check(ok, format!("best alpha per seed [{}], ends of the curve above the minimum", picks.join(", ")))
}

fn effective_level_count() -> Outcome {
    let levels = effective_levels(0.01 * 100.0, 100.0, 8).unwrap();
    // One channel 100 times smaller than the tensor maximum.
    let mut rng = SeededRng::new(6);
    let mut x = rng.gaussian(&[256, 2], 1.0);
    let m_i = x.data().iter().step_by(2).fold(0.0f32, |m, v| m.max(v.abs()));
    x = Tensor::new(vec![257, 2], [x.data(), &[0.0, 100.0 * m_i]].concat()).unwrap();
    let q = quantize(&x, &QuantScheme::int8(Granularity::PerTensor, Timing::Dynamic), None).unwrap();
    let mut codes: Vec<i8> = q.values().iter().step_by(2).copied().collect();
    codes.sort_unstable();
    codes.dedup();
    check(
        levels == 2.56 && codes.len() <= 3,
        format!("effective levels {levels}, small channel uses {} distinct codes {codes:?}", codes.len()),
    )
}

fn integer_gemm() -> Outcome {
    let mut worst = 0.0f64;
    let schemes = [
        (Granularity::PerTensor, Granularity::PerTensor),
        (Granularity::PerToken, Granularity::PerChannel),
        (Granularity::PerToken, Granularity::GroupWise(8)),
        (Granularity::PerTensor, Granularity::PerChannel),
    ];
    for seed in 0..100u64 {
        let mut rng = SeededRng::new(seed);
        let dims = [1 + rng.below(48), 1 + rng.below(96), 8 * (1 + rng.below(8))];
        let x = rng.gaussian(&[dims[0], dims[1]], 2.0);
        let w = rng.gaussian(&[dims[1], dims[2]], 0.5);
        let (gx, gw) = schemes[seed as usize % schemes.len()];
        let xq = quantize(&x, &QuantScheme::int8(gx, Timing::Dynamic), None).unwrap();
        let wq = quantize(&w, &QuantScheme::int8(gw, Timing::Dynamic), None).unwrap();
        let acc = int8_gemm(&xq, &wq).unwrap();
        let y = rescale(&acc, (&xq).into(), (&wq).into(), None).unwrap();
        let reference = matmul(&dequantize(&xq), &dequantize(&wq)).unwrap();
        worst = worst.max(max_rel_error(&y, &reference).unwrap());
    }
    let x = SeededRng::new(1).gaussian(&[4, 8], 1.0);
    let inner_x = quantize(&x, &QuantScheme::int8(Granularity::PerChannel, Timing::Dynamic), None).unwrap();
    let fine_w = quantize(&x.transpose(), &QuantScheme::int8(Granularity::PerTensor, Timing::Dynamic), None).unwrap();
    let inner_w = quantize(&x.transpose(), &QuantScheme::int8(Granularity::PerToken, Timing::Dynamic), None).unwrap();
    let fine_x = quantize(&x, &QuantScheme::int8(Granularity::PerTensor, Timing::Dynamic), None).unwrap();
    let rejected = matches!(gemm_quantized(&inner_x, &fine_w, None), Err(Error::UnsupportedGranularity(_)))
        && matches!(gemm_quantized(&fine_x, &inner_w, None), Err(Error::UnsupportedGranularity(_)));
    check(
        worst <= 1e-5 && rejected,
        format!("worst relative gap {worst:.3e} over 100 cases (bound 1e-5), inner-dimension steps rejected: {rejected}"),
    )
}

fn end_to_end() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 0..5 {
        let (model, calib, eval) = standard(seed);
        let plan = build_plan(&run_calibration(&model, &calib, &CalibConfig::with_samples(calib.len())).unwrap(), &model, 0.5).unwrap();
        let cfg = |label: &str, level, plan: Option<&_>| ReportConfig {
            label: label.into(),
            pmap: PrecisionMap::level(level),
            plan: plan.cloned(),
        };
        let rows = output_error_report(
            &model,
            &calib,
            &eval,
            &[
                cfg("o3-smoothed", SettingLevel::O3, Some(&plan)),
                cfg("o3-naive", SettingLevel::O3, None),
                cfg("o1-smoothed", SettingLevel::O1, Some(&plan)),
                cfg("o1-naive", SettingLevel::O1, None),
            ],
        )
        .unwrap();
        let [s3, n3, s1, n1] = [0, 1, 2, 3].map(|i| rows[i].rel_l2_error);
        ok &= s3 <= 0.05 && n3 >= 2.0 * s3 && s1 <= s3 && n1 <= n3;
        parts.push(format!("{s3:.4}/{n3:.3}/{s1:.4}"));
    }
    check(
        ok,
        format!("relative L2 error smoothed-O3/naive-O3/smoothed-O1 per seed [{}] (bound 0.05, naive ≥ 2×, O1 ≤ O3)", parts.join(", ")),
    )
}

fn fusion() -> Outcome {
    let mut worst = 0.0f32;
    for seed in 0..5 {
        let (model, calib, eval) = standard(seed);
        let plan = build_plan(&run_calibration(&model, &calib[..8], &CalibConfig::with_samples(8)).unwrap(), &model, 0.5).unwrap();
        let fused = attach_smoothing(&model, &plan).unwrap();
        let explicit = attach_smoothing_explicit(&model, &plan).unwrap();
        for x in &eval {
            let (a, b) = (forward_fp(&fused, x).unwrap(), forward_fp(&explicit, x).unwrap());
            worst = worst.max(a.zip_with(&b, |p, q| (p - q).abs()).unwrap().absmax());
        }
    }
    check(worst <= 1e-5, format!("worst max absolute difference {worst:.3e} over 5 models (bound 1e-5)"))
}

fn container_and_reports() -> Outcome {
    let (model, calib, _) = standard(0);
    let stats = run_calibration(&model, &calib[..4], &CalibConfig::with_samples(4)).unwrap();
    let plan = build_plan(&stats, &model, 0.5).unwrap();
    let wq = quantize(&model.blocks[0].fc1.weight, &QuantScheme::int8(Granularity::PerChannel, Timing::Dynamic), None).unwrap();
    let mut entries = io::model_to_entries(&model);
    entries.extend(io::plan_to_entries(&plan));
    entries.extend(io::calib_to_entries(&stats));
    entries.extend(io::quantized_to_entries("fc1", &wq));
    let dir = tempfile::TempDir::new().unwrap();
    let path = dir.path().join("all.sqtc");
    io::save(&path, &entries).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = io::load(&path).unwrap();
    let round_trip = back == entries
        && io::encode(&back).unwrap() == bytes
        && io::model_from_entries(&back).unwrap() == model
        && io::plan_from_entries(&back).unwrap() == plan
        && io::calib_from_entries(&back).unwrap() == stats
        && io::quantized_from_entries(&back, "fc1").unwrap() == wq;

    let mut rng = SeededRng::new(77);
    let mut truncations_ok = true;
    for _ in 0..1000 {
        let cut = rng.below(bytes.len());
        truncations_ok &= matches!(io::decode(&bytes[..cut]), Err(Error::Format { .. }));
    }
    // Random byte rewrites must not panic; whatever they decode to is fine.
    for _ in 0..1000 {
        let mut m = bytes.clone();
        for _ in 0..1 + rng.below(4) {
            let i = rng.below(m.len().min(4096));
            m[i] = rng.below(256) as u8;
        }
        let _ = io::decode(&m);
    }

    let reports: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let out = Command::new(env!("CARGO_BIN_EXE_w8a8"))
                .args(["compare", "--seed", "5", "--report", "json"])
                .current_dir(dir.path())
                .output()
                .unwrap();
            assert!(out.status.success());
            out.stdout
        })
        .collect();
    let identical = !reports[0].is_empty() && reports[0] == reports[1];
    check(
        round_trip && truncations_ok && identical,
        format!(
            "round trip bit-exact: {round_trip}, 1000 truncations all format errors: {truncations_ok}, 1000 byte rewrites without panic, repeated JSON reports identical: {identical}"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("smoothing preserves the product", equivalence),
        ("balance identity at alpha 0.5", balance),
        ("granularity ordering", granularity_ordering),
        ("smoothing benefit at O3", smoothing_benefit),
        ("alpha sweep", alpha_sweep),
        ("effective levels", effective_level_count),
        ("integer GEMM oracle", integer_gemm),
        ("end-to-end toy transformer", end_to_end),
        ("fusion exactness", fusion),
        ("container IO and report determinism", container_and_reports),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (status, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {status} {name}: {detail} [{:.1}s]", i + 1, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
