//! A small pre-LayerNorm transformer used to study where integer arithmetic
//! goes in a block.
//!
//! ```text
//! x ─┬─ LN1 ─ {Q,K,V} ─ Q·Kᵀ ─ softmax ─ P·V ─ Out ─(+)─┬─ LN2 ─ FC1 ─ GELU ─ FC2 ─(+)─ y
//!    └───────────────────────────────────────────────┘   └───────────────────────────┘
//! ```
//!
//! Every linear layer and both attention batched matmuls can run in int8
//! (see [`PrecisionMap`]); layer norms, softmax, GELU and the residual adds
//! always run in `f32`. Smoothing attaches at the two layer-norm outputs,
//! where the factors fold into `γ` and `β`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calib::{run_calibration, CalibConfig};
use crate::error::{dim_err, param_err, Error, Result};
use crate::igemm::{gemm_quantized, linear_with_recipe};
use crate::layers::{gelu, softmax_rows, LayerNorm, Linear};
use crate::quant::{compute_step, quantize, Granularity, QuantScheme, QuantizedTensor, Recipe, SettingLevel, Timing};
use crate::smooth::{fuse_into_predecessor, Predecessor, SmoothingPlan};
use crate::tensor::{matmul, max_rel_error, mse, rel_l2_error, OutlierSpec, SeededRng, Tensor};

/// Calibrated activation steps keyed by tap name (see [`Tap`]).
pub type StaticSteps = BTreeMap<String, f32>;

/// Operators of one block, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    LayerNorm1,
    QProj,
    KProj,
    VProj,
    ScoreBmm,
    Softmax,
    ContextBmm,
    OutProj,
    AttnResidual,
    LayerNorm2,
    Fc1,
    Gelu,
    Fc2,
    FfnResidual,
}

impl Op {
    pub const ALL: [Op; 14] = [
        Op::LayerNorm1,
        Op::QProj,
        Op::KProj,
        Op::VProj,
        Op::ScoreBmm,
        Op::Softmax,
        Op::ContextBmm,
        Op::OutProj,
        Op::AttnResidual,
        Op::LayerNorm2,
        Op::Fc1,
        Op::Gelu,
        Op::Fc2,
        Op::FfnResidual,
    ];

    pub fn is_linear(self) -> bool {
        matches!(self, Op::QProj | Op::KProj | Op::VProj | Op::OutProj | Op::Fc1 | Op::Fc2)
    }

    pub fn is_bmm(self) -> bool {
        matches!(self, Op::ScoreBmm | Op::ContextBmm)
    }

    /// Linear layers and batched matmuls; everything else stays in float.
    pub fn is_compute_heavy(self) -> bool {
        self.is_linear() || self.is_bmm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Precision {
    Float,
    Int8(Recipe),
}

/// One precision tag per operator, applied to every block.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionMap {
    tags: BTreeMap<Op, Precision>,
}

impl PrecisionMap {
    pub fn all_float() -> Self {
        Self { tags: Op::ALL.iter().map(|&op| (op, Precision::Float)).collect() }
    }

    /// Int8 for every linear layer and both batched matmuls.
    pub fn int8(recipe: Recipe) -> Self {
        let mut map = Self::all_float();
        for op in Op::ALL.into_iter().filter(|op| op.is_compute_heavy()) {
            map.tags.insert(op, Precision::Int8(recipe));
        }
        map
    }

    pub fn level(level: SettingLevel) -> Self {
        Self::int8(level.recipe())
    }

    /// Int8 for linear layers only; batched matmuls stay in float.
    pub fn linears_only(recipe: Recipe) -> Self {
        let mut map = Self::all_float();
        for op in Op::ALL.into_iter().filter(|op| op.is_linear()) {
            map.tags.insert(op, Precision::Int8(recipe));
        }
        map
    }

    pub fn set(&mut self, op: Op, precision: Precision) -> Result<()> {
        if let Precision::Int8(_) = precision {
            if !op.is_compute_heavy() {
                return Err(Error::Config(format!("{op:?} has no int8 implementation")));
            }
        }
        self.tags.insert(op, precision);
        Ok(())
    }

    pub fn get(&self, op: Op) -> Precision {
        self.tags.get(&op).copied().unwrap_or(Precision::Float)
    }

    pub fn is_all_float(&self) -> bool {
        self.tags.values().all(|p| matches!(p, Precision::Float))
    }
}

/// Activation tensors observed during a forward pass: the inputs of every
/// operator that may run in int8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tap {
    /// Shared input of the Q, K and V projections.
    QkvIn,
    /// Left operand of `Q·Kᵀ`.
    Query,
    /// Right operand of `Q·Kᵀ` (before transposition).
    Key,
    /// Right operand of `P·V`.
    Value,
    OutIn,
    Fc1In,
    Fc2In,
}

impl Tap {
    pub const ALL: [Tap; 7] = [Tap::QkvIn, Tap::Query, Tap::Key, Tap::Value, Tap::OutIn, Tap::Fc1In, Tap::Fc2In];

    pub fn name(self) -> &'static str {
        match self {
            Tap::QkvIn => "qkv_in",
            Tap::Query => "query",
            Tap::Key => "key",
            Tap::Value => "value",
            Tap::OutIn => "out_in",
            Tap::Fc1In => "fc1_in",
            Tap::Fc2In => "fc2_in",
        }
    }

    pub fn key(self, block: usize) -> String {
        format!("blocks.{block}.{}", self.name())
    }
}

/// Names of the two smoothing attachment points of block `i`.
pub fn attn_point(block: usize) -> String {
    format!("blocks.{block}.attn_in")
}

pub fn ffn_point(block: usize) -> String {
    format!("blocks.{block}.ffn_in")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    /// Runtime divisor applied to the LN1 output, used when smoothing is
    /// kept as an explicit scaling step instead of being fused.
    pub attn_in_divisor: Option<Vec<f32>>,
    pub ffn_in_divisor: Option<Vec<f32>>,
}

impl BlockParams {
    pub fn channels(&self) -> usize {
        self.ln1.channels()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(param_err!("{c} channels not divisible into {} heads", self.heads));
        }
        let hidden = self.fc1.out_features();
        let shapes = [
            (self.ln2.channels(), c),
            (self.q.in_features(), c),
            (self.q.out_features(), c),
            (self.k.in_features(), c),
            (self.k.out_features(), c),
            (self.v.in_features(), c),
            (self.v.out_features(), c),
            (self.out.in_features(), c),
            (self.out.out_features(), c),
            (self.fc1.in_features(), c),
            (self.fc2.in_features(), hidden),
            (self.fc2.out_features(), c),
        ];
        if shapes.iter().any(|(a, b)| a != b) {
            return Err(dim_err!("block parameters disagree with {c} channels"));
        }
        for d in [&self.attn_in_divisor, &self.ffn_in_divisor].into_iter().flatten() {
            if d.len() != c {
                return Err(dim_err!("divisor of length {} for {c} channels", d.len()));
            }
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }
}

/// An ordered stack of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub blocks: Vec<BlockParams>,
}

impl ModelGraph {
    pub fn new(blocks: Vec<BlockParams>) -> Result<Self> {
        let model = Self { blocks };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for b in &self.blocks {
            b.validate()?;
            if b.channels() != c {
                return Err(dim_err!("blocks mix {} and {c} channels", b.channels()));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.blocks.first().map(BlockParams::channels).unwrap_or(0)
    }

    /// Attachment points in block order.
    pub fn attachment_points(&self) -> Vec<String> {
        (0..self.blocks.len()).flat_map(|i| [attn_point(i), ffn_point(i)]).collect()
    }
}

/// Parameters of the deterministic synthetic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub channels: usize,
    pub heads: usize,
    pub seed: u64,
    /// Layer-norm gains of the chosen channels are multiplied by
    /// `outlier.scale`, so those channels come out of every layer norm
    /// large for every token.
    pub outlier: OutlierSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { blocks: 2, channels: 128, heads: 4, seed: 0, outlier: OutlierSpec { fraction: 0.01, scale: 100.0, seed: 0 } }
    }
}

/// Builds a random model. Linear weights are `N(0, 1/fan_in)`, with the two
/// projections that write into the residual stream further scaled by
/// `1/sqrt(2·blocks)`. Outlier
/// channels get their layer-norm gain multiplied by the outlier scale and
/// the matching weight rows of the consuming linears divided by its square
/// root: the activations carry the full outlier while the layer outputs
/// stay in a moderate range.
pub fn synthetic_model(cfg: &ModelConfig) -> Result<ModelGraph> {
    cfg.outlier.validate()?;
    let c = cfg.channels;
    if c == 0 || cfg.heads == 0 || !c.is_multiple_of(cfg.heads) {
        return Err(param_err!("{c} channels not divisible into {} heads", cfg.heads));
    }
    let outliers = cfg.outlier.channels(c);
    let mut rng = SeededRng::new(cfg.seed);
    let hidden = 4 * c;
    let linear = |rng: &mut SeededRng, fan_in: usize, fan_out: usize, std: f32| {
        let w = rng.gaussian(&[fan_in, fan_out], std);
        let b = rng.gaussian(&[fan_out], 0.02).into_data();
        Linear { weight: w, bias: b }
    };
    let consumer = |rng: &mut SeededRng, fan_out: usize| {
        let mut damp = vec![1.0; c];
        for &j in &outliers {
            damp[j] = 1.0 / cfg.outlier.scale.sqrt();
        }
        let w = rng.gaussian(&[c, fan_out], 1.0 / (c as f32).sqrt()).mul_rows(&damp).expect("row count matches");
        let b = rng.gaussian(&[fan_out], 0.02).into_data();
        Linear { weight: w, bias: b }
    };
    let norm = |rng: &mut SeededRng| {
        let mut gamma: Vec<f32> = (0..c).map(|_| 1.0 + 0.1 * rng.normal()).collect();
        let beta: Vec<f32> = (0..c).map(|_| 0.02 * rng.normal()).collect();
        for &j in &outliers {
            gamma[j] *= cfg.outlier.scale;
        }
        LayerNorm { gamma, beta }
    };
    let std_in = 1.0 / (c as f32).sqrt();
    let residual_gain = 1.0 / ((2 * cfg.blocks.max(1)) as f32).sqrt();
    let blocks = (0..cfg.blocks)
        .map(|_| BlockParams {
            ln1: norm(&mut rng),
            q: consumer(&mut rng, c),
            k: consumer(&mut rng, c),
            v: consumer(&mut rng, c),
            out: linear(&mut rng, c, c, std_in * residual_gain),
            ln2: norm(&mut rng),
            fc1: consumer(&mut rng, hidden),
            fc2: linear(&mut rng, hidden, c, residual_gain / (hidden as f32).sqrt()),
            heads: cfg.heads,
            attn_in_divisor: None,
            ffn_in_divisor: None,
        })
        .collect();
    ModelGraph::new(blocks)
}

/// `count` standard-normal input batches of shape `batch×seq_len×C`.
pub fn synthetic_inputs(count: usize, batch: usize, seq_len: usize, channels: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = SeededRng::new(seed);
    (0..count).map(|_| rng.gaussian(&[batch, seq_len, channels], 1.0)).collect()
}

/// How linear layers and batched matmuls are executed in one pass.
struct Runner<'a> {
    pmap: &'a PrecisionMap,
    steps: Option<&'a StaticSteps>,
    observer: Option<&'a mut dyn FnMut(&str, &Tensor)>,
}

impl Runner<'_> {
    fn observe(&mut self, block: usize, tap: Tap, x: &Tensor) {
        if let Some(obs) = self.observer.as_mut() {
            obs(&tap.key(block), x);
        }
    }

    fn static_step(&self, block: usize, tap: Tap, scheme: &QuantScheme) -> Result<Option<[f32; 1]>> {
        if scheme.timing != Timing::Static {
            return Ok(None);
        }
        if scheme.granularity != Granularity::PerTensor {
            return Err(Error::Config(format!("static calibration only covers per-tensor steps, not {scheme}")));
        }
        let key = tap.key(block);
        match self.steps.and_then(|s| s.get(&key)) {
            Some(&s) => Ok(Some([s])),
            None => Err(Error::Config(format!("no calibrated step for {key}; run calibration first"))),
        }
    }

    fn linear(&self, block: usize, op: Op, tap: Tap, x: &Tensor, lin: &Linear) -> Result<Tensor> {
        match self.pmap.get(op) {
            Precision::Float => lin.forward(x),
            Precision::Int8(recipe) => {
                let step = self.static_step(block, tap, &recipe.activation)?;
                linear_with_recipe(x, &lin.weight, Some(&lin.bias), &recipe, step.as_ref().map(|s| &s[..]))
            }
        }
    }
}

/// Scheme used for both operands of an int8 batched matmul. Only per-tensor
/// and per-token layouts map onto the kernel.
fn bmm_scheme(recipe: &Recipe) -> Result<QuantScheme> {
    match recipe.activation.granularity {
        Granularity::PerTensor | Granularity::PerToken => Ok(recipe.activation),
        g => Err(Error::Config(format!("batched matmul cannot use {g:?} activation steps"))),
    }
}

/// Codes and steps of the `rows×cols` sub-block at (`r0`, `c0`) of `q`.
fn sub_block(q: &QuantizedTensor, r0: usize, rows: usize, c0: usize, cols: usize, transpose: bool) -> Result<QuantizedTensor> {
    let width = q.cols();
    let mut codes = Vec::with_capacity(rows * cols);
    if transpose {
        for c in 0..cols {
            for r in 0..rows {
                codes.push(q.values()[(r0 + r) * width + c0 + c]);
            }
        }
    } else {
        for r in 0..rows {
            codes.extend_from_slice(&q.values()[(r0 + r) * width + c0..(r0 + r) * width + c0 + cols]);
        }
    }
    let scheme = q.scheme();
    let (granularity, scales) = match scheme.granularity {
        Granularity::PerTensor => (Granularity::PerTensor, q.scales().to_vec()),
        // Per-token steps of the transposed operand become per-column steps.
        Granularity::PerToken if transpose => (Granularity::PerChannel, q.scales()[r0..r0 + rows].to_vec()),
        Granularity::PerToken => (Granularity::PerToken, q.scales()[r0..r0 + rows].to_vec()),
        g => return Err(Error::Config(format!("batched matmul cannot slice {g:?} steps"))),
    };
    let dims = if transpose { vec![cols, rows] } else { vec![rows, cols] };
    QuantizedTensor::from_parts(dims, codes, scales, QuantScheme { granularity, ..scheme })
}

fn slice_block(x: &Tensor, r0: usize, rows: usize, c0: usize, cols: usize) -> Tensor {
    let width = x.cols();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend_from_slice(&x.data()[(r0 + r) * width + c0..(r0 + r) * width + c0 + cols]);
    }
    Tensor::from_parts(vec![rows, cols], out)
}

fn attention(runner: &Runner<'_>, block: usize, p: &BlockParams, q: &Tensor, k: &Tensor, v: &Tensor, batch: usize, seq: usize) -> Result<Tensor> {
    let (c, heads, d) = (p.channels(), p.heads, p.head_dim());
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();

    let score = runner.pmap.get(Op::ScoreBmm);
    let context = runner.pmap.get(Op::ContextBmm);
    let (qq, kq) = match score {
        Precision::Int8(r) => {
            let s = bmm_scheme(&r)?;
            let sq = runner.static_step(block, Tap::Query, &s)?;
            let sk = runner.static_step(block, Tap::Key, &s)?;
            (
                Some(quantize(q, &s, sq.as_ref().map(|v| &v[..]))?),
                Some(quantize(k, &s, sk.as_ref().map(|v| &v[..]))?),
            )
        }
        Precision::Float => (None, None),
    };
    let vq = match context {
        Precision::Int8(r) => {
            // P·V reduces over tokens, so V may only carry a single step.
            let s = QuantScheme { granularity: Granularity::PerTensor, ..bmm_scheme(&r)? };
            let sv = runner.static_step(block, Tap::Value, &s)?;
            Some(quantize(v, &s, sv.as_ref().map(|v| &v[..]))?)
        }
        Precision::Float => None,
    };
    // Softmax outputs lie in [0, 1]: a fixed step of 1/127.
    let prob_scheme = QuantScheme::int8(Granularity::PerTensor, Timing::Static);
    let prob_step = [compute_step(1.0, prob_scheme.bits)?];

    let mut out = vec![0.0f32; batch * seq * c];
    for b in 0..batch {
        let r0 = b * seq;
        for h in 0..heads {
            let c0 = h * d;
            let scores = match (&qq, &kq) {
                (Some(qq), Some(kq)) => {
                    let a = sub_block(qq, r0, seq, c0, d, false)?;
                    let bt = sub_block(kq, r0, seq, c0, d, true)?;
                    gemm_quantized(&a, &bt, None)?
                }
                _ => matmul(&slice_block(q, r0, seq, c0, d), &slice_block(k, r0, seq, c0, d).transpose())?,
            };
            let probs = softmax_rows(&scores.map(|s| s * inv_sqrt_d));
            let ctx = match &vq {
                Some(vq) => {
                    let pq = quantize(&probs, &prob_scheme, Some(&prob_step))?;
                    gemm_quantized(&pq, &sub_block(vq, r0, seq, c0, d, false)?, None)?
                }
                None => matmul(&probs, &slice_block(v, r0, seq, c0, d))?,
            };
            for t in 0..seq {
                out[(r0 + t) * c + c0..(r0 + t) * c + c0 + d].copy_from_slice(ctx.row_slice(t));
            }
        }
    }
    Tensor::new(vec![batch * seq, c], out)
}

fn split_input(model: &ModelGraph, x: &Tensor) -> Result<(usize, usize)> {
    let c = model.channels();
    match *x.dims() {
        [t, cc] if cc == c => Ok((1, t)),
        [b, t, cc] if cc == c => Ok((b, t)),
        _ => Err(dim_err!("input {:?} does not match a {c}-channel model", x.dims())),
    }
}

fn run(model: &ModelGraph, x: &Tensor, runner: &mut Runner<'_>) -> Result<Tensor> {
    let (batch, seq) = split_input(model, x)?;
    let mut h = x.as_matrix();
    for (i, p) in model.blocks.iter().enumerate() {
        let mut a = p.ln1.forward(&h)?;
        if let Some(s) = &p.attn_in_divisor {
            a = a.div_columns(s)?;
        }
        runner.observe(i, Tap::QkvIn, &a);
        let q = runner.linear(i, Op::QProj, Tap::QkvIn, &a, &p.q)?;
        let k = runner.linear(i, Op::KProj, Tap::QkvIn, &a, &p.k)?;
        let v = runner.linear(i, Op::VProj, Tap::QkvIn, &a, &p.v)?;
        runner.observe(i, Tap::Query, &q);
        runner.observe(i, Tap::Key, &k);
        runner.observe(i, Tap::Value, &v);
        let ctx = attention(runner, i, p, &q, &k, &v, batch, seq)?;
        runner.observe(i, Tap::OutIn, &ctx);
        h = h.add(&runner.linear(i, Op::OutProj, Tap::OutIn, &ctx, &p.out)?)?;

        let mut f = p.ln2.forward(&h)?;
        if let Some(s) = &p.ffn_in_divisor {
            f = f.div_columns(s)?;
        }
        runner.observe(i, Tap::Fc1In, &f);
        let u = runner.linear(i, Op::Fc1, Tap::Fc1In, &f, &p.fc1)?.map(gelu);
        runner.observe(i, Tap::Fc2In, &u);
        h = h.add(&runner.linear(i, Op::Fc2, Tap::Fc2In, &u, &p.fc2)?)?;
    }
    h.reshape(x.dims())
}

/// Float reference forward pass. Accepts `T×C` or `B×T×C` input.
pub fn forward_fp(model: &ModelGraph, x: &Tensor) -> Result<Tensor> {
    let pmap = PrecisionMap::all_float();
    run(model, x, &mut Runner { pmap: &pmap, steps: None, observer: None })
}

/// Float forward pass that hands every tap tensor (see [`Tap`]) to
/// `observer` as `(key, tensor)`, with tensors in `rows×C` matrix form.
pub fn forward_observed(model: &ModelGraph, x: &Tensor, observer: &mut dyn FnMut(&str, &Tensor)) -> Result<Tensor> {
    let pmap = PrecisionMap::all_float();
    run(model, x, &mut Runner { pmap: &pmap, steps: None, observer: Some(observer) })
}

/// Forward pass with operators executed per `pmap`.
///
/// When `plan` is given it is fused into a copy of the model first (see
/// [`attach_smoothing`]); `steps` must then have been calibrated on that
/// smoothed model. Static recipes fail with a configuration error if their
/// step is missing.
pub fn forward_quant(
    model: &ModelGraph,
    x: &Tensor,
    pmap: &PrecisionMap,
    plan: Option<&SmoothingPlan>,
    steps: Option<&StaticSteps>,
) -> Result<Tensor> {
    let smoothed;
    let model = match plan {
        Some(plan) => {
            smoothed = attach_smoothing(model, plan)?;
            &smoothed
        }
        None => model,
    };
    run(model, x, &mut Runner { pmap, steps, observer: None })
}

fn check_plan_points(model: &ModelGraph, plan: &SmoothingPlan) -> Result<()> {
    plan.validate()?;
    let points = model.attachment_points();
    for key in plan.factors.keys() {
        if !points.contains(key) {
            return Err(Error::Config(format!("plan entry {key} is not an attachment point of this model")));
        }
    }
    Ok(())
}

fn scale_rows(lin: &Linear, s: &[f32]) -> Result<Linear> {
    Ok(Linear { weight: lin.weight.mul_rows(s)?, bias: lin.bias.clone() })
}

/// Returns a copy of `model` with `plan` folded into the layer norms in front
/// of each attachment point and the consumer weights scaled to match.
pub fn attach_smoothing(model: &ModelGraph, plan: &SmoothingPlan) -> Result<ModelGraph> {
    attach(model, plan, true)
}

/// Like [`attach_smoothing`] but keeps the layer norms untouched and divides
/// their outputs at run time instead. Used as the reference for fusion and
/// for inputs whose predecessor cannot absorb the factors.
pub fn attach_smoothing_explicit(model: &ModelGraph, plan: &SmoothingPlan) -> Result<ModelGraph> {
    attach(model, plan, false)
}

fn attach(model: &ModelGraph, plan: &SmoothingPlan, fuse: bool) -> Result<ModelGraph> {
    check_plan_points(model, plan)?;
    let mut out = model.clone();
    for (i, b) in out.blocks.iter_mut().enumerate() {
        if let Some(s) = plan.get(&attn_point(i)) {
            if fuse {
                let Predecessor::LayerNorm(ln) = fuse_into_predecessor(&Predecessor::LayerNorm(b.ln1.clone()), s)? else {
                    unreachable!("layer norm fuses into a layer norm")
                };
                b.ln1 = ln;
            } else {
                b.attn_in_divisor = Some(s.to_vec());
            }
            b.q = scale_rows(&b.q, s)?;
            b.k = scale_rows(&b.k, s)?;
            b.v = scale_rows(&b.v, s)?;
        }
        if let Some(s) = plan.get(&ffn_point(i)) {
            if fuse {
                let Predecessor::LayerNorm(ln) = fuse_into_predecessor(&Predecessor::LayerNorm(b.ln2.clone()), s)? else {
                    unreachable!("layer norm fuses into a layer norm")
                };
                b.ln2 = ln;
            } else {
                b.ffn_in_divisor = Some(s.to_vec());
            }
            b.fc1 = scale_rows(&b.fc1, s)?;
        }
    }
    out.validate()?;
    Ok(out)
}

/// One configuration of an error report.
#[derive(Debug, Clone)]
pub struct ReportConfig {
    pub label: String,
    pub pmap: PrecisionMap,
    pub plan: Option<SmoothingPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub label: String,
    pub mse: f64,
    pub max_rel_error: f64,
    pub rel_l2_error: f64,
}

/// Quantized-versus-float error for each configuration, averaged over
/// `inputs`. Static steps are calibrated per configuration on
/// `calib_samples`, after the configuration's plan has been applied.
pub fn output_error_report(
    model: &ModelGraph,
    calib_samples: &[Tensor],
    inputs: &[Tensor],
    configs: &[ReportConfig],
) -> Result<Vec<ErrorRow>> {
    if configs.is_empty() {
        return Err(param_err!("error report needs at least one configuration"));
    }
    let references = inputs.iter().map(|x| forward_fp(model, x)).collect::<Result<Vec<_>>>()?;
    configs
        .iter()
        .map(|cfg| {
            let smoothed = match &cfg.plan {
                Some(plan) => attach_smoothing(model, plan)?,
                None => model.clone(),
            };
            let steps = if cfg.pmap.is_all_float() || calib_samples.is_empty() {
                None
            } else {
                let calib = run_calibration(&smoothed, calib_samples, &CalibConfig::with_samples(calib_samples.len()))?;
                Some(calib.static_steps())
            };
            let mut row = ErrorRow { label: cfg.label.clone(), mse: 0.0, max_rel_error: 0.0, rel_l2_error: 0.0 };
            for (x, reference) in inputs.iter().zip(&references) {
                let y = forward_quant(&smoothed, x, &cfg.pmap, None, steps.as_ref())?;
                row.mse += mse(&y, reference)?;
                row.max_rel_error = row.max_rel_error.max(max_rel_error(&y, reference)?);
                row.rel_l2_error += rel_l2_error(&y, reference)?;
            }
            let n = inputs.len().max(1) as f64;
            row.mse /= n;
            row.rel_l2_error /= n;
            Ok(row)
        })
        .collect()
}
