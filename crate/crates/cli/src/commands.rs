//! The pipeline stages behind each subcommand.
//!
//! `calibrate → smooth → quantize → eval` share artifacts through the paths
//! in [`Outputs`](crate::config::Outputs); `search-alpha` and `compare` run
//! from the model alone.

use std::path::{Path, PathBuf};

use w8a8::calib::{build_plan, run_calibration, search_alpha, CalibResult};
use w8a8::graph::{
    attach_smoothing, forward_fp, forward_quant, output_error_report, synthetic_model, ErrorRow, ModelGraph,
    PrecisionMap, ReportConfig, StaticSteps,
};
use w8a8::io::{self, Entry, EntryMap};
use w8a8::quant::{
    dequantize, quantize, Baseline, Granularity, QuantScheme, Recipe, SettingLevel, Timing, DEFAULT_GROUP_SIZE,
};
use w8a8::smooth::SmoothingPlan;
use w8a8::tensor::{max_rel_error, mse, rel_l2_error, Tensor};

use crate::config::{Level, ModelSource, RunConfig};
use crate::error::CliError;
use crate::report::{Report, Table};

type Result<T> = std::result::Result<T, CliError>;

const LEVEL_ENTRY: &str = "quant.level";
const STEP_PREFIX: &str = "steps.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Calibrate,
    Smooth,
    Quantize,
    Eval,
    SearchAlpha,
    Compare,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Calibrate => "calibrate",
            Stage::Smooth => "smooth",
            Stage::Quantize => "quantize",
            Stage::Eval => "eval",
            Stage::SearchAlpha => "search-alpha",
            Stage::Compare => "compare",
        }
    }
}

/// What a stage reads and writes, resolved before anything runs.
struct Plan {
    /// Artifact produced by an earlier stage, and that stage.
    input: Option<(PathBuf, Stage)>,
    /// Container or report this stage writes.
    output: Option<PathBuf>,
}

fn resolve(stage: Stage, cfg: &RunConfig, out: Option<&Path>) -> Result<Plan> {
    let o = &cfg.outputs;
    let needs_int8 = |what: &str| match cfg.level {
        Level::Fp => Err(CliError::Config(format!("{what} needs level O1, O2 or O3, not FP"))),
        Level::Int8(_) => Ok(()),
    };
    let report = out.map(Path::to_path_buf).or_else(|| o.report.clone());
    let plan = match stage {
        Stage::Calibrate => Plan { input: None, output: Some(out.map_or(o.calib.clone(), Path::to_path_buf)) },
        Stage::Smooth => Plan {
            input: Some((o.calib.clone(), Stage::Calibrate)),
            output: Some(out.map_or(o.plan.clone(), Path::to_path_buf)),
        },
        Stage::Quantize => {
            needs_int8("quantize")?;
            Plan {
                input: Some((o.plan.clone(), Stage::Smooth)),
                output: Some(out.map_or(o.quantized.clone(), Path::to_path_buf)),
            }
        }
        Stage::Eval => match cfg.level {
            Level::Fp => Plan { input: None, output: report },
            Level::Int8(_) => Plan { input: Some((o.quantized.clone(), Stage::Quantize)), output: report },
        },
        Stage::SearchAlpha => {
            needs_int8("search-alpha")?;
            Plan { input: None, output: report }
        }
        Stage::Compare => Plan { input: None, output: report },
    };
    if let ModelSource::Container(p) = &cfg.model {
        if !p.is_file() {
            return Err(CliError::Config(format!("model container {} does not exist", p.display())));
        }
    }
    if let Some((p, producer)) = &plan.input {
        if !p.is_file() {
            return Err(CliError::MissingStage(format!(
                "{} not found; run `w8a8 {}` first",
                p.display(),
                producer.name()
            )));
        }
    }
    if let Some(p) = &plan.output {
        check_output(p)?;
    }
    Ok(plan)
}

fn check_output(p: &Path) -> Result<()> {
    if p.is_dir() {
        return Err(CliError::Config(format!("output {} is a directory", p.display())));
    }
    let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(CliError::Config(format!("output directory {} does not exist", parent.display())));
    }
    Ok(())
}

fn load(path: &Path) -> Result<Vec<Entry>> {
    io::load(path).map_err(CliError::at(path))
}

fn save(path: &Path, entries: &[Entry]) -> Result<()> {
    io::save(path, entries).map_err(CliError::at(path))
}

fn load_model(cfg: &RunConfig) -> Result<ModelGraph> {
    match &cfg.model {
        ModelSource::Synthetic(m) => Ok(synthetic_model(m)?),
        ModelSource::Container(p) => io::model_from_entries(&load(p)?).map_err(CliError::at(p)),
    }
}

/// Runs `stage` and returns its report, plus the path the report should be
/// written to, if any.
pub fn run(stage: Stage, cfg: &RunConfig, out: Option<&Path>) -> Result<(Report, Option<PathBuf>)> {
    cfg.validate()?;
    let plan = resolve(stage, cfg, out)?;
    let model = load_model(cfg)?;
    let input = plan.input.as_ref().map(|(p, _)| p.as_path());
    let output = plan.output.as_deref();
    let report = match stage {
        Stage::Calibrate => calibrate(cfg, &model, output.expect("calibrate writes"))?,
        Stage::Smooth => smooth(cfg, &model, input.expect("smooth reads"), output.expect("smooth writes"))?,
        Stage::Quantize => quantize_model(cfg, &model, input.expect("quantize reads"), output.expect("quantize writes"))?,
        Stage::Eval => eval(cfg, &model, input)?,
        Stage::SearchAlpha => alpha_search(cfg, &model)?,
        Stage::Compare => compare(cfg, &model)?,
    };
    let report_path = match stage {
        Stage::Eval | Stage::SearchAlpha | Stage::Compare => plan.output,
        _ => None,
    };
    Ok((report, report_path))
}

fn model_summary(r: Report, cfg: &RunConfig, model: &ModelGraph) -> Report {
    let source = match &cfg.model {
        ModelSource::Synthetic(m) => format!("synthetic seed {}", m.seed),
        ModelSource::Container(p) => p.display().to_string(),
    };
    r.with("model", source).with("blocks", model.blocks.len()).with("channels", model.channels())
}

fn write_note(r: Report, path: &Path) -> Report {
    r.with("wrote", path.display().to_string())
}

fn calibrate(cfg: &RunConfig, model: &ModelGraph, out: &Path) -> Result<Report> {
    let ccfg = cfg.calib_config();
    let result = run_calibration(model, &ccfg.samples(model.channels()), &ccfg)?;
    save(out, &io::calib_to_entries(&result))?;

    let mut points = Table::new("channel_stats", vec!["point", "channels", "min_absmax", "max_absmax"]);
    for (k, s) in &result.stats {
        let (lo, hi) = s.act_absmax.iter().fold((f32::INFINITY, 0.0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        points.push(vec![k.as_str().into(), s.act_absmax.len().into(), lo.into(), hi.into()]);
    }
    let mut sites = Table::new("sites", vec!["site", "absmax", "clipped_absmax", "step"]);
    for (k, s) in &result.sites {
        sites.push(vec![k.as_str().into(), s.absmax.into(), s.clipped_absmax.into(), s.step().into()]);
    }
    let mut r = model_summary(Report::new("calibrate"), cfg, model)
        .with("samples", ccfg.sample_count)
        .with("sequence_length", ccfg.sequence_length)
        .with("clip_fraction", ccfg.clip_fraction);
    r = write_note(r, out);
    r.tables = vec![points, sites];
    Ok(r)
}

fn smooth(cfg: &RunConfig, model: &ModelGraph, calib_path: &Path, out: &Path) -> Result<Report> {
    let calib: CalibResult = io::calib_from_entries(&load(calib_path)?).map_err(CliError::at(calib_path))?;
    let plan = build_plan(&calib, model, cfg.alpha)?;
    save(out, &io::plan_to_entries(&plan))?;

    let mut t = Table::new("factors", vec!["point", "min_factor", "max_factor", "act_peak_before", "act_peak_after"]);
    for (k, s) in &plan.factors {
        let stats = &calib.stats[k];
        let (lo, hi) = s.iter().fold((f32::INFINITY, 0.0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let before = stats.act_absmax.iter().fold(0.0f32, |m, &v| m.max(v));
        let after = stats.act_absmax.iter().zip(s).fold(0.0f32, |m, (&a, &f)| m.max(a / f));
        t.push(vec![k.as_str().into(), lo.into(), hi.into(), before.into(), after.into()]);
    }
    let mut r = model_summary(Report::new("smooth"), cfg, model).with("alpha", cfg.alpha);
    r = write_note(r, out);
    r.tables = vec![t];
    Ok(r)
}

fn level_code(l: SettingLevel) -> i32 {
    match l {
        SettingLevel::O1 => 1,
        SettingLevel::O2 => 2,
        SettingLevel::O3 => 3,
    }
}

fn linears(model: &ModelGraph) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        for (name, lin) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("out", &b.out), ("fc1", &b.fc1), ("fc2", &b.fc2)] {
            out.push((format!("blocks.{i}.{name}"), &lin.weight));
        }
    }
    out
}

fn quantize_model(cfg: &RunConfig, model: &ModelGraph, plan_path: &Path, out: &Path) -> Result<Report> {
    let Level::Int8(level) = cfg.level else { unreachable!("checked in resolve") };
    let plan: SmoothingPlan = io::plan_from_entries(&load(plan_path)?).map_err(CliError::at(plan_path))?;
    let smoothed = attach_smoothing(model, &plan)?;
    let ccfg = cfg.calib_config();
    let steps = run_calibration(&smoothed, &ccfg.samples(model.channels()), &ccfg)?.static_steps();

    let mut entries = io::model_to_entries(&smoothed);
    entries.push(Entry::scalar_i32(LEVEL_ENTRY, level_code(level)));
    entries.extend(steps.iter().map(|(k, v)| Entry::scalar_f32(format!("{STEP_PREFIX}{k}"), *v)));
    let mut t = Table::new("weights", vec!["layer", "step", "mse"]);
    for (name, w) in linears(&smoothed) {
        let q = quantize(w, &level.weight_scheme(), None)?;
        t.push(vec![name.as_str().into(), q.scales()[0].into(), mse(&dequantize(&q), w)?.into()]);
        entries.extend(io::quantized_to_entries(&format!("{name}.weight_q"), &q));
    }
    save(out, &entries)?;

    let mut r = model_summary(Report::new("quantize"), cfg, model).with("level", level.to_string()).with("alpha", plan.alpha);
    r = write_note(r, out);
    r.tables = vec![t];
    Ok(r)
}

fn error_table(rows: &[ErrorRow]) -> Table {
    let mut t = Table::new("errors", vec!["config", "mse", "max_rel_error", "rel_l2_error"]);
    for row in rows {
        t.push(vec![row.label.as_str().into(), row.mse.into(), row.max_rel_error.into(), row.rel_l2_error.into()]);
    }
    t
}

fn eval(cfg: &RunConfig, model: &ModelGraph, quantized: Option<&Path>) -> Result<Report> {
    let inputs = cfg.eval_config().samples(model.channels());
    let row = match (cfg.level, quantized) {
        (Level::Int8(level), Some(path)) => {
            let entries = load(path)?;
            let map = EntryMap::new(&entries);
            let stored = map.scalar_i32(LEVEL_ENTRY).map_err(CliError::at(path))?;
            if stored != level_code(level) {
                return Err(CliError::Config(format!(
                    "{} was quantized for O{stored}, but eval was asked for {level}",
                    path.display()
                )));
            }
            let smoothed = io::model_from_entries(&entries).map_err(CliError::at(path))?;
            if smoothed.channels() != model.channels() || smoothed.blocks.len() != model.blocks.len() {
                return Err(CliError::Config(format!("{} does not match the configured model", path.display())));
            }
            let mut steps = StaticSteps::new();
            for key in map.with_prefix(STEP_PREFIX) {
                steps.insert(key.to_string(), map.scalar_f32(&format!("{STEP_PREFIX}{key}")).map_err(CliError::at(path))?);
            }
            let pmap = PrecisionMap::level(level);
            let mut row = ErrorRow { label: format!("smoothed-{level}"), mse: 0.0, max_rel_error: 0.0, rel_l2_error: 0.0 };
            for x in &inputs {
                let reference = forward_fp(model, x)?;
                let y = forward_quant(&smoothed, x, &pmap, None, Some(&steps))?;
                row.mse += mse(&y, &reference)?;
                row.max_rel_error = row.max_rel_error.max(max_rel_error(&y, &reference)?);
                row.rel_l2_error += rel_l2_error(&y, &reference)?;
            }
            row.mse /= inputs.len() as f64;
            row.rel_l2_error /= inputs.len() as f64;
            row
        }
        _ => {
            let fp = ReportConfig { label: "FP".into(), pmap: PrecisionMap::all_float(), plan: None };
            output_error_report(model, &[], &inputs, &[fp])?.remove(0)
        }
    };
    let mut r = model_summary(Report::new("eval"), cfg, model)
        .with("level", cfg.level.to_string())
        .with("samples", inputs.len());
    r.tables = vec![error_table(&[row])];
    Ok(r)
}

fn alpha_search(cfg: &RunConfig, model: &ModelGraph) -> Result<Report> {
    let Level::Int8(level) = cfg.level else { unreachable!("checked in resolve") };
    let (ccfg, ecfg) = (cfg.calib_config(), cfg.eval_config());
    let grid = cfg.grid()?;
    let found = search_alpha(model, &ccfg.samples(model.channels()), &ecfg.samples(model.channels()), &grid, level, &ccfg)?;
    let mut t = Table::new("curve", vec!["alpha", "mse"]);
    for (a, e) in &found.curve {
        t.push(vec![(*a).into(), (*e).into()]);
    }
    let mut r = model_summary(Report::new("search-alpha"), cfg, model)
        .with("level", level.to_string())
        .with("best_alpha", found.best_alpha);
    r.tables = vec![t];
    Ok(r)
}

/// The default group size if it divides the channel count (and with it the
/// 4× wider FC1 output), else one group of `C` columns.
fn group_size(model: &ModelGraph) -> usize {
    let c = model.channels();
    if c.is_multiple_of(DEFAULT_GROUP_SIZE) {
        DEFAULT_GROUP_SIZE
    } else {
        c
    }
}

fn compare(cfg: &RunConfig, model: &ModelGraph) -> Result<Report> {
    let ccfg = cfg.calib_config();
    let calib_samples = ccfg.samples(model.channels());
    let inputs = cfg.eval_config().samples(model.channels());
    let plan = build_plan(&run_calibration(model, &calib_samples, &ccfg)?, model, cfg.alpha)?;

    let mut configs = vec![ReportConfig { label: "FP".into(), pmap: PrecisionMap::all_float(), plan: None }];
    for b in Baseline::ALL {
        configs.push(ReportConfig { label: b.name().into(), pmap: PrecisionMap::int8(b.recipe(group_size(model))), plan: None });
    }
    for l in SettingLevel::ALL {
        configs.push(ReportConfig { label: format!("smoothed-{l}"), pmap: PrecisionMap::level(l), plan: Some(plan.clone()) });
    }
    // Simulated activation granularities on the linear layers alone.
    let w = QuantScheme::int8(Granularity::PerTensor, Timing::Dynamic);
    for (name, g) in [("per-tensor", Granularity::PerTensor), ("per-token", Granularity::PerToken), ("per-channel", Granularity::PerChannel)] {
        let recipe = Recipe::new(w, QuantScheme::int8(g, Timing::Dynamic));
        configs.push(ReportConfig { label: format!("act-{name}"), pmap: PrecisionMap::linears_only(recipe), plan: None });
    }
    let rows = output_error_report(model, &calib_samples, &inputs, &configs)?;
    let mut r = model_summary(Report::new("compare"), cfg, model).with("alpha", cfg.alpha).with("samples", inputs.len());
    r.tables = vec![error_table(&rows)];
    Ok(r)
}
