use w8a8::calib::{build_plan, run_calibration, CalibConfig};
use w8a8::graph::{
    attach_smoothing, forward_fp, forward_quant, output_error_report, synthetic_inputs, synthetic_model, ModelConfig,
    PrecisionMap, ReportConfig,
};
use w8a8::io::{self, EntryMap};
use w8a8::quant::SettingLevel;
use w8a8::tensor::{rel_l2_error, OutlierSpec};
use w8a8::Error;

fn small() -> ModelConfig {
    ModelConfig { blocks: 1, channels: 32, heads: 2, seed: 5, outlier: OutlierSpec { fraction: 0.05, scale: 50.0, seed: 5 } }
}

#[test]
fn calibrate_smooth_quantize_evaluate() {
    let model = synthetic_model(&small()).unwrap();
    let cfg = CalibConfig { sample_count: 8, sequence_length: 16, clip_fraction: 0.0, seed: 1 };
    let samples = cfg.samples(model.channels());
    let calib = run_calibration(&model, &samples, &cfg).unwrap();
    let plan = build_plan(&calib, &model, 0.5).unwrap();
    assert_eq!(plan.factors.len(), model.attachment_points().len());

    let smoothed = attach_smoothing(&model, &plan).unwrap();
    let steps = run_calibration(&smoothed, &samples, &cfg).unwrap().static_steps();
    let x = &synthetic_inputs(1, 1, 16, 32, 2)[0];
    let reference = forward_fp(&model, x).unwrap();
    let float_smoothed = forward_fp(&smoothed, x).unwrap();
    assert!(rel_l2_error(&float_smoothed, &reference).unwrap() < 1e-5);

    let pmap = PrecisionMap::level(SettingLevel::O3);
    let y = forward_quant(&smoothed, x, &pmap, None, Some(&steps)).unwrap();
    assert!(rel_l2_error(&y, &reference).unwrap() < 0.2);
    let err = forward_quant(&smoothed, x, &pmap, None, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn report_puts_smoothing_ahead_of_naive_o3() {
    let model = synthetic_model(&small()).unwrap();
    let cfg = CalibConfig { sample_count: 8, sequence_length: 16, clip_fraction: 0.0, seed: 3 };
    let samples = cfg.samples(32);
    let plan = build_plan(&run_calibration(&model, &samples, &cfg).unwrap(), &model, 0.5).unwrap();
    let inputs = synthetic_inputs(2, 1, 16, 32, 4);
    let pmap = PrecisionMap::level(SettingLevel::O3);
    let configs = [
        ReportConfig { label: "fp".into(), pmap: PrecisionMap::all_float(), plan: None },
        ReportConfig { label: "naive".into(), pmap: pmap.clone(), plan: None },
        ReportConfig { label: "smoothed".into(), pmap, plan: Some(plan) },
    ];
    let rows = output_error_report(&model, &samples, &inputs, &configs).unwrap();
    assert_eq!(rows[0].rel_l2_error, 0.0);
    assert!(rows[2].rel_l2_error < rows[1].rel_l2_error, "{rows:?}");
}

#[test]
fn artifacts_survive_the_container() {
    let model = synthetic_model(&small()).unwrap();
    let cfg = CalibConfig { sample_count: 4, sequence_length: 8, clip_fraction: 0.1, seed: 6 };
    let calib = run_calibration(&model, &cfg.samples(32), &cfg).unwrap();
    let plan = build_plan(&calib, &model, 0.6).unwrap();

    let mut entries = io::model_to_entries(&model);
    entries.extend(io::plan_to_entries(&plan));
    entries.extend(io::calib_to_entries(&calib));
    let bytes = io::encode(&entries).unwrap();
    let back = io::decode(&bytes).unwrap();
    assert_eq!(back, entries);

    let map = EntryMap::new(&back);
    assert!(map.contains("plan.alpha"));
    assert_eq!(io::plan_from_entries(&back).unwrap(), plan);
    let calib_back = io::calib_from_entries(&back).unwrap();
    assert_eq!(calib_back.static_steps(), calib.static_steps());
    let model_back = io::model_from_entries(&back).unwrap();
    let x = &synthetic_inputs(1, 1, 8, 32, 7)[0];
    assert_eq!(forward_fp(&model_back, x).unwrap(), forward_fp(&model, x).unwrap());
}
