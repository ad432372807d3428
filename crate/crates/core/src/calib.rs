//! Calibration: activation statistics for smoothing, static steps for O3,
//! and the migration-strength grid search.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{param_err, Error, Result};
use crate::graph::{
    attach_smoothing, attn_point, ffn_point, forward_fp, forward_observed, forward_quant, synthetic_inputs, ModelGraph,
    PrecisionMap, StaticSteps, Tap,
};
use crate::quant::{compute_step, SettingLevel};
use crate::smooth::{smoothing_factors, ChannelStats, SmoothingPlan};
use crate::tensor::{channel_absmax, mse, row_absmax, Tensor};

pub const DEFAULT_SAMPLE_COUNT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibConfig {
    pub sample_count: usize,
    pub sequence_length: usize,
    /// Fraction of tokens with the largest magnitude dropped before taking
    /// maxima; applies to smoothing statistics and static steps alike.
    pub clip_fraction: f32,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self { sample_count: DEFAULT_SAMPLE_COUNT, sequence_length: 64, clip_fraction: 0.0, seed: 0 }
    }
}

impl CalibConfig {
    pub fn with_samples(sample_count: usize) -> Self {
        Self { sample_count, ..Self::default() }
    }

    /// The standard-normal calibration batches this configuration describes,
    /// for a model with `channels` channels.
    pub fn samples(&self, channels: usize) -> Vec<Tensor> {
        synthetic_inputs(self.sample_count, 1, self.sequence_length, channels, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(param_err!("calibration needs at least one sample"));
        }
        if !(0.0..0.5).contains(&self.clip_fraction) {
            return Err(param_err!("clip fraction {} outside [0, 0.5)", self.clip_fraction));
        }
        Ok(())
    }
}

/// Maxima recorded for one quantized-operator input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteStats {
    /// Largest magnitude over all tokens.
    pub absmax: f32,
    /// Largest magnitude after dropping the clipped tokens.
    pub clipped_absmax: f32,
}

impl SiteStats {
    pub fn step(&self) -> f32 {
        // clipped_absmax is finite and non-negative by construction.
        compute_step(self.clipped_absmax, 8).unwrap_or(1.0)
    }

    fn merge(&mut self, other: &SiteStats) {
        self.absmax = self.absmax.max(other.absmax);
        self.clipped_absmax = self.clipped_absmax.max(other.clipped_absmax);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibResult {
    /// Channel statistics per smoothing attachment point.
    pub stats: BTreeMap<String, ChannelStats>,
    /// Per-tensor maxima per tap (see [`Tap::key`]).
    pub sites: BTreeMap<String, SiteStats>,
    pub alpha_used: Option<f32>,
    pub sample_count: usize,
    pub clip_fraction: f32,
}

impl CalibResult {
    /// Static per-tensor steps for every tap.
    pub fn static_steps(&self) -> StaticSteps {
        self.sites.iter().map(|(k, s)| (k.clone(), s.step())).collect()
    }

    fn merge(&mut self, other: CalibResult) -> Result<()> {
        for (k, s) in other.stats {
            match self.stats.get_mut(&k) {
                Some(mine) => mine.merge(&s)?,
                None => {
                    self.stats.insert(k, s);
                }
            }
        }
        for (k, s) in other.sites {
            self.sites.entry(k).and_modify(|m| m.merge(&s)).or_insert(s);
        }
        self.sample_count += other.sample_count;
        Ok(())
    }
}

/// Rows kept after dropping the `ceil(fraction · rows)` rows with the largest
/// magnitude (never all of them).
fn kept_rows(x: &Tensor, clip_fraction: f32) -> Vec<usize> {
    let rows = x.rows();
    if clip_fraction <= 0.0 || rows < 2 {
        return (0..rows).collect();
    }
    let drop = ((clip_fraction as f64 * rows as f64).ceil() as usize).min(rows - 1);
    let maxima = row_absmax(x);
    let mut order: Vec<usize> = (0..rows).collect();
    // Stable sort keeps the choice deterministic among equal maxima.
    order.sort_by(|&a, &b| maxima[b].total_cmp(&maxima[a]));
    let mut keep = order[drop..].to_vec();
    keep.sort_unstable();
    keep
}

fn select_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(x.row_slice(r));
    }
    Tensor::from_parts(vec![rows.len(), c], data)
}

fn calibrate_one(model: &ModelGraph, sample: &Tensor, clip: f32) -> Result<CalibResult> {
    let mut result = CalibResult {
        stats: BTreeMap::new(),
        sites: BTreeMap::new(),
        alpha_used: None,
        sample_count: 1,
        clip_fraction: clip,
    };
    let mut failure = None;
    let blocks = model.blocks.len();
    let attach_keys: BTreeMap<String, String> = (0..blocks)
        .flat_map(|i| [(Tap::QkvIn.key(i), attn_point(i)), (Tap::Fc1In.key(i), ffn_point(i))])
        .collect();
    forward_observed(model, sample, &mut |key, x| {
        let kept = select_rows(x, &kept_rows(x, clip));
        let site = SiteStats { absmax: x.absmax(), clipped_absmax: kept.absmax() };
        result.sites.entry(key.to_string()).and_modify(|m| m.merge(&site)).or_insert(site);
        if let Some(point) = attach_keys.get(key) {
            match channel_absmax(&kept).and_then(|m| ChannelStats::new(m, 1, clip)) {
                Ok(s) => {
                    result.stats.insert(point.clone(), s);
                }
                Err(e) => failure = Some(e),
            }
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(result),
    }
}

/// Runs every sample through the float model and collects element-wise
/// maxima at each attachment point and each quantized-operator input.
pub fn run_calibration(model: &ModelGraph, samples: &[Tensor], cfg: &CalibConfig) -> Result<CalibResult> {
    if samples.is_empty() {
        return Err(param_err!("calibration needs at least one sample"));
    }
    cfg.validate()?;
    let per_sample = samples
        .par_iter()
        .map(|s| calibrate_one(model, s, cfg.clip_fraction))
        .collect::<Result<Vec<_>>>()?;
    let mut iter = per_sample.into_iter();
    let mut result = iter.next().expect("non-empty");
    for r in iter {
        result.merge(r)?;
    }
    Ok(result)
}

/// Largest magnitude of each input row of the weights fed by attachment
/// point `point` (Q, K and V share one input).
fn consumer_row_absmax(model: &ModelGraph, point: &str) -> Option<Vec<f32>> {
    model.blocks.iter().enumerate().find_map(|(i, b)| {
        if point == attn_point(i) {
            let (q, k, v) = (row_absmax(&b.q.weight), row_absmax(&b.k.weight), row_absmax(&b.v.weight));
            Some(q.iter().zip(&k).zip(&v).map(|((a, b), c)| a.max(*b).max(*c)).collect())
        } else if point == ffn_point(i) {
            Some(row_absmax(&b.fc1.weight))
        } else {
            None
        }
    })
}

/// Smoothing factors for every attachment point of `model`.
pub fn build_plan(calib: &CalibResult, model: &ModelGraph, alpha: f32) -> Result<SmoothingPlan> {
    let mut plan = SmoothingPlan::new(alpha);
    for point in model.attachment_points() {
        let stats = calib
            .stats
            .get(&point)
            .ok_or_else(|| Error::Config(format!("calibration has no statistics for {point}")))?;
        let weight_max = consumer_row_absmax(model, &point).expect("attachment point of this model");
        plan.insert(point, smoothing_factors(&stats.act_absmax, &weight_max, alpha)?)?;
    }
    plan.validate()?;
    Ok(plan)
}

/// Grid values `start, start+step, …` up to and including `stop`.
pub fn grid(start: f32, stop: f32, step: f32) -> Result<Vec<f32>> {
    if !(step > 0.0) || start > stop {
        return Err(param_err!("invalid grid {start}:{stop}:{step}"));
    }
    let n = ((stop as f64 - start as f64) / step as f64 + 1e-6).floor() as usize;
    Ok((0..=n).map(|i| ((start as f64 + i as f64 * step as f64) * 1e6).round() as f32 / 1e6).collect())
}

/// Parses `a:b:step`.
pub fn parse_grid(spec: &str) -> Result<Vec<f32>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f32>().map_err(|_| Error::Config(format!("bad grid {spec:?}"))))
        .collect::<Result<Vec<_>>>()?;
    match nums[..] {
        [a, b, s] => grid(a, b, s),
        _ => Err(Error::Config(format!("grid must be start:stop:step, got {spec:?}"))),
    }
}

/// The default search grid, 0.1 to 0.9 in steps of 0.05.
pub fn default_grid() -> Vec<f32> {
    grid(0.1, 0.9, 0.05).expect("valid grid")
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AlphaSearch {
    pub best_alpha: f32,
    /// `(alpha, mean output MSE)` in grid order.
    pub curve: Vec<(f32, f64)>,
}

/// Quantized-output error for each `α` in `grid`, and its minimizer.
///
/// Per candidate: build the plan from float-model statistics, fuse it,
/// recalibrate static steps on the smoothed model, run `eval_samples` at
/// `level` and compare with the float model. Equal errors resolve toward
/// the `α` nearest 0.5.
pub fn search_alpha(
    model: &ModelGraph,
    calib_samples: &[Tensor],
    eval_samples: &[Tensor],
    grid: &[f32],
    level: SettingLevel,
    cfg: &CalibConfig,
) -> Result<AlphaSearch> {
    if grid.is_empty() {
        return Err(param_err!("empty alpha grid"));
    }
    if let Some(a) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(param_err!("grid value {a} outside [0, 1]"));
    }
    if eval_samples.is_empty() {
        return Err(param_err!("alpha search needs evaluation samples"));
    }
    let stats = run_calibration(model, calib_samples, cfg)?;
    let references = eval_samples.iter().map(|x| forward_fp(model, x)).collect::<Result<Vec<_>>>()?;
    let pmap = PrecisionMap::level(level);
    let curve = grid
        .par_iter()
        .map(|&alpha| {
            let plan = build_plan(&stats, model, alpha)?;
            let smoothed = attach_smoothing(model, &plan)?;
            let steps = run_calibration(&smoothed, calib_samples, cfg)?.static_steps();
            let mut err = 0.0;
            for (x, r) in eval_samples.iter().zip(&references) {
                err += mse(&forward_quant(&smoothed, x, &pmap, None, Some(&steps))?, r)?;
            }
            Ok((alpha, err / eval_samples.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let best = curve
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then((a.0 - 0.5).abs().total_cmp(&(b.0 - 0.5).abs())))
        .expect("non-empty grid");
    Ok(AlphaSearch { best_alpha: best.0, curve })
}
