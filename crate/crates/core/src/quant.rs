//! Symmetric uniform integer quantization.
//!
//! A value `x` maps to the code `clamp(round(x / Δ), -q, q)` with
//! `q = 2^(bits-1) - 1` and `Δ = max|x| / q` taken over whichever slice of
//! the tensor shares a scale. Rounding is half away from zero and the most
//! negative code (`-2^(bits-1)`) is never produced, so the code range is
//! symmetric around zero.
//!
//! Scale layout follows the matrix view of a tensor (see [`crate::tensor`]):
//!
//! | granularity   | one step per            | scales length |
//! |---------------|-------------------------|---------------|
//! | `PerTensor`   | whole tensor            | 1             |
//! | `PerToken`    | row                     | rows          |
//! | `PerChannel`  | column                  | cols          |
//! | `GroupWise(g)`| run of `g` columns      | cols / g      |

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{channel_absmax, row_absmax, Tensor};

/// Default group size for [`Granularity::GroupWise`].
pub const DEFAULT_GROUP_SIZE: usize = 128;

/// Default magnitude threshold for [`decompose_outliers`].
pub const DEFAULT_OUTLIER_THRESHOLD: f32 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    PerToken,
    PerChannel,
    GroupWise(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Timing {
    /// Steps come from calibration and are fixed at run time.
    Static,
    /// Steps are computed from the tensor being quantized.
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantScheme {
    pub granularity: Granularity,
    pub timing: Timing,
    pub bits: u8,
}

impl QuantScheme {
    pub fn new(granularity: Granularity, timing: Timing, bits: u8) -> Result<Self> {
        let s = Self { granularity, timing, bits };
        s.validate()?;
        Ok(s)
    }

    pub const fn int8(granularity: Granularity, timing: Timing) -> Self {
        Self { granularity, timing, bits: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if let Granularity::GroupWise(0) = self.granularity {
            return Err(param_err!("group size must be positive"));
        }
        Ok(())
    }

    /// Largest code magnitude, `2^(bits-1) - 1`.
    pub fn qmax(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }

    /// How many steps this scheme needs for a `rows×cols` matrix.
    pub fn scale_count(&self, rows: usize, cols: usize) -> Result<usize> {
        Ok(match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerToken => rows,
            Granularity::PerChannel => cols,
            Granularity::GroupWise(g) => {
                if g == 0 || !cols.is_multiple_of(g) {
                    return Err(param_err!("group size {g} does not divide {cols} channels"));
                }
                cols / g
            }
        })
    }

    fn scale_index(&self, row: usize, col: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerToken => row,
            Granularity::PerChannel => col,
            Granularity::GroupWise(g) => col / g,
        }
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = match self.granularity {
            Granularity::PerTensor => "per-tensor".to_string(),
            Granularity::PerToken => "per-token".to_string(),
            Granularity::PerChannel => "per-channel".to_string(),
            Granularity::GroupWise(g) => format!("group-wise({g})"),
        };
        let t = match self.timing {
            Timing::Static => "static",
            Timing::Dynamic => "dynamic",
        };
        write!(f, "{g} {t} int{}", self.bits)
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(param_err!("bit width {bits} outside [2, 8]"));
    }
    Ok(())
}

/// Integer codes plus the steps needed to map them back to floats.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    dims: Vec<usize>,
    values: Vec<i8>,
    scales: Vec<f32>,
    scheme: QuantScheme,
}

impl QuantizedTensor {
    /// Reassembles a quantized tensor from stored parts, re-checking the
    /// code range and scale invariants.
    pub fn from_parts(
        dims: Vec<usize>,
        values: Vec<i8>,
        scales: Vec<f32>,
        scheme: QuantScheme,
    ) -> Result<Self> {
        scheme.validate()?;
        let len: usize = dims.iter().product();
        if len != values.len() {
            return Err(dim_err!("{} codes for dims {:?}", values.len(), dims));
        }
        let rows = if dims.is_empty() { 1 } else { len / dims.last().copied().unwrap_or(1).max(1) };
        let cols = dims.last().copied().unwrap_or(1);
        let n = scheme.scale_count(rows, cols)?;
        if scales.len() != n {
            return Err(dim_err!("{} scales for {scheme}, expected {n}", scales.len()));
        }
        check_scales(&scales)?;
        let q = scheme.qmax();
        if let Some(v) = values.iter().find(|&&v| (v as i32).abs() > q) {
            return Err(Error::Data(format!("code {v} outside ±{q}")));
        }
        Ok(Self { dims, values, scales, scheme })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    pub fn rows(&self) -> usize {
        self.values.len().checked_div(self.cols()).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    /// Step governing element `(row, col)` of the matrix view.
    pub fn step_at(&self, row: usize, col: usize) -> f32 {
        self.scales[self.scheme.scale_index(row, col)]
    }
}

fn check_scales(scales: &[f32]) -> Result<()> {
    match scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        Some(s) => Err(Error::Data(format!("scale {s} is not strictly positive"))),
        None => Ok(()),
    }
}

/// Quantization step for a slice whose largest magnitude is `absmax`:
/// `absmax / (2^(bits-1) - 1)`, or `1.0` when `absmax` is zero.
pub fn compute_step(absmax: f32, bits: u8) -> Result<f32> {
    check_bits(bits)?;
    if !(absmax >= 0.0 && absmax.is_finite()) {
        return Err(param_err!("absmax {absmax} must be finite and non-negative"));
    }
    if absmax == 0.0 {
        return Ok(1.0);
    }
    Ok(absmax / ((1i32 << (bits - 1)) - 1) as f32)
}

/// Per-slice maxima of `|x|` at the scheme's granularity.
pub fn absmax_at(x: &Tensor, granularity: Granularity) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Ok(match granularity {
            Granularity::PerTensor => vec![0.0],
            _ => vec![],
        });
    }
    Ok(match granularity {
        Granularity::PerTensor => vec![x.absmax()],
        Granularity::PerToken => row_absmax(x),
        Granularity::PerChannel => channel_absmax(x)?,
        Granularity::GroupWise(g) => {
            let per_col = channel_absmax(x)?;
            if g == 0 || per_col.len() % g != 0 {
                return Err(param_err!("group size {g} does not divide {} channels", per_col.len()));
            }
            per_col.chunks(g).map(|c| c.iter().fold(0.0f32, |m, v| m.max(*v))).collect()
        }
    })
}

/// Quantizes `x` under `scheme`.
///
/// Dynamic schemes derive their steps from `x`. Static schemes require
/// `static_scales`: one step per scale slot (see [`QuantScheme::scale_count`]).
pub fn quantize(
    x: &Tensor,
    scheme: &QuantScheme,
    static_scales: Option<&[f32]>,
) -> Result<QuantizedTensor> {
    scheme.validate()?;
    let (rows, cols) = (x.rows(), x.cols());
    let n = scheme.scale_count(rows, cols)?;
    let scales = match scheme.timing {
        Timing::Dynamic => absmax_at(x, scheme.granularity)?
            .into_iter()
            .map(|m| compute_step(m, scheme.bits))
            .collect::<Result<Vec<_>>>()?,
        Timing::Static => {
            let s = static_scales.ok_or_else(|| {
                Error::Config(format!("{scheme} quantization needs calibrated scales"))
            })?;
            if s.len() != n {
                return Err(dim_err!("{} static scales for {scheme}, expected {n}", s.len()));
            }
            check_scales(s)?;
            s.to_vec()
        }
    };
    let q = scheme.qmax() as f32;
    let mut values = Vec::with_capacity(x.len());
    for r in 0..rows {
        for (c, &v) in x.row_slice(r).iter().enumerate() {
            let step = scales[scheme.scale_index(r, c)];
            values.push((v / step).round().clamp(-q, q) as i8);
        }
    }
    Ok(QuantizedTensor { dims: x.dims().to_vec(), values, scales, scheme: *scheme })
}

/// Maps codes back to floats: `code · Δ` with the step that governs each
/// element.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let cols = q.cols();
    let data = q
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| v as f32 * q.step_at(i / cols.max(1), i % cols.max(1)))
        .collect();
    Tensor::from_parts(q.dims.clone(), data)
}

/// `dequantize(quantize(x))`: the float tensor an integer pipeline would
/// actually see.
pub fn fake_quant(x: &Tensor, scheme: &QuantScheme, static_scales: Option<&[f32]>) -> Result<Tensor> {
    Ok(dequantize(&quantize(x, scheme, static_scales)?))
}

/// Number of codes a channel with maximum `channel_absmax` can use when the
/// step is set by `tensor_absmax`: `2^bits · channel_absmax / tensor_absmax`.
pub fn effective_levels(channel_absmax: f64, tensor_absmax: f64, bits: u8) -> Result<f64> {
    check_bits(bits)?;
    if !(tensor_absmax > 0.0) {
        return Err(param_err!("tensor absmax must be positive, got {tensor_absmax}"));
    }
    if channel_absmax < 0.0 || channel_absmax > tensor_absmax {
        return Err(Error::Data(format!(
            "channel absmax {channel_absmax} outside [0, {tensor_absmax}]"
        )));
    }
    Ok((1u32 << bits) as f64 * (channel_absmax / tensor_absmax))
}

/// Result of splitting a tensor into an int8 part and exactly-kept float
/// channels.
#[derive(Debug, Clone)]
pub struct Decomposed {
    /// Quantized tensor with the outlier channels zeroed.
    pub dense: QuantizedTensor,
    /// Indices of the channels kept in float, ascending.
    pub outlier_channels: Vec<usize>,
    /// `rows × outlier_channels.len()` float values of those channels.
    pub outliers: Tensor,
}

impl Decomposed {
    /// `dequantize(dense)` with the float channels written back in.
    pub fn recompose(&self) -> Tensor {
        let mut out = dequantize(&self.dense).into_data();
        let cols = self.dense.cols();
        let k = self.outlier_channels.len();
        for r in 0..self.dense.rows() {
            for (i, &j) in self.outlier_channels.iter().enumerate() {
                out[r * cols + j] = self.outliers.data()[r * k + i];
            }
        }
        Tensor::from_parts(self.dense.dims().to_vec(), out)
    }
}

/// Moves every channel whose maximum magnitude reaches `threshold` into a
/// float side tensor and quantizes the rest per token, dynamically.
pub fn decompose_outliers(x: &Tensor, threshold: f32, bits: u8) -> Result<Decomposed> {
    if !(threshold > 0.0) {
        return Err(param_err!("outlier threshold must be positive, got {threshold}"));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let outlier_channels: Vec<usize> = if x.is_empty() {
        vec![]
    } else {
        channel_absmax(x)?
            .iter()
            .enumerate()
            .filter(|(_, &m)| m >= threshold)
            .map(|(j, _)| j)
            .collect()
    };
    let mut dense = x.data().to_vec();
    let mut side = Vec::with_capacity(rows * outlier_channels.len());
    for r in 0..rows {
        for &j in &outlier_channels {
            side.push(dense[r * cols + j]);
            dense[r * cols + j] = 0.0;
        }
    }
    let scheme = QuantScheme::new(Granularity::PerToken, Timing::Dynamic, bits)?;
    let dense = quantize(&Tensor::from_parts(x.dims().to_vec(), dense), &scheme, None)?;
    let outliers = Tensor::from_parts(vec![rows, outlier_channels.len()], side);
    Ok(Decomposed { dense, outlier_channels, outliers })
}

/// Weight and activation schemes for one linear layer, plus an optional
/// float side path for outlier channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub weight: QuantScheme,
    pub activation: QuantScheme,
    /// When set, activation channels reaching this magnitude bypass
    /// quantization (see [`decompose_outliers`]).
    pub outlier_threshold: Option<f32>,
}

impl Recipe {
    pub const fn new(weight: QuantScheme, activation: QuantScheme) -> Self {
        Self { weight, activation, outlier_threshold: None }
    }

    /// Whether the activation scheme can run through the integer kernel.
    /// Per-channel activation steps sit on the reduction dimension and are
    /// only available as a float simulation.
    pub fn is_kernel_compatible(&self) -> bool {
        !matches!(
            self.activation.granularity,
            Granularity::PerChannel | Granularity::GroupWise(_)
        )
    }
}

/// The three efficiency levels. All use per-tensor weights; activations go
/// from per-token dynamic (O1) through per-tensor dynamic (O2) to per-tensor
/// static (O3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SettingLevel {
    O1,
    O2,
    O3,
}

impl SettingLevel {
    pub const ALL: [SettingLevel; 3] = [SettingLevel::O1, SettingLevel::O2, SettingLevel::O3];

    pub fn weight_scheme(self) -> QuantScheme {
        QuantScheme::int8(Granularity::PerTensor, Timing::Dynamic)
    }

    pub fn activation_scheme(self) -> QuantScheme {
        match self {
            SettingLevel::O1 => QuantScheme::int8(Granularity::PerToken, Timing::Dynamic),
            SettingLevel::O2 => QuantScheme::int8(Granularity::PerTensor, Timing::Dynamic),
            SettingLevel::O3 => QuantScheme::int8(Granularity::PerTensor, Timing::Static),
        }
    }

    pub fn recipe(self) -> Recipe {
        Recipe::new(self.weight_scheme(), self.activation_scheme())
    }
}

impl fmt::Display for SettingLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SettingLevel::O1 => "O1",
            SettingLevel::O2 => "O2",
            SettingLevel::O3 => "O3",
        })
    }
}

impl std::str::FromStr for SettingLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "O1" | "o1" => Ok(SettingLevel::O1),
            "O2" | "o2" => Ok(SettingLevel::O2),
            "O3" | "o3" => Ok(SettingLevel::O3),
            other => Err(Error::Config(format!("unknown level {other:?}"))),
        }
    }
}

/// Reference W8A8 schemes that do not smooth activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Baseline {
    /// Per-tensor weights, per-tensor dynamic activations.
    Naive,
    /// Group-wise weights, per-token dynamic activations.
    GroupWiseToken,
    /// Per-channel weights, per-token dynamic activations, outlier channels
    /// kept in float.
    MixedDecomposition,
    /// Per-tensor weights, per-tensor static activations.
    PerTensorStatic,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [
        Baseline::Naive,
        Baseline::GroupWiseToken,
        Baseline::MixedDecomposition,
        Baseline::PerTensorStatic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Naive => "naive-w8a8",
            Baseline::GroupWiseToken => "groupwise-token",
            Baseline::MixedDecomposition => "mixed-decomposition",
            Baseline::PerTensorStatic => "per-tensor-static",
        }
    }

    /// The baseline's recipe. `group_size` applies to
    /// [`Baseline::GroupWiseToken`] and must divide the output channel count.
    pub fn recipe(self, group_size: usize) -> Recipe {
        let dyn_token = QuantScheme::int8(Granularity::PerToken, Timing::Dynamic);
        let tensor_w = QuantScheme::int8(Granularity::PerTensor, Timing::Dynamic);
        match self {
            Baseline::Naive => {
                Recipe::new(tensor_w, QuantScheme::int8(Granularity::PerTensor, Timing::Dynamic))
            }
            Baseline::GroupWiseToken => Recipe::new(
                QuantScheme::int8(Granularity::GroupWise(group_size), Timing::Dynamic),
                dyn_token,
            ),
            Baseline::MixedDecomposition => Recipe {
                weight: QuantScheme::int8(Granularity::PerChannel, Timing::Dynamic),
                activation: dyn_token,
                outlier_threshold: Some(DEFAULT_OUTLIER_THRESHOLD),
            },
            Baseline::PerTensorStatic => SettingLevel::O3.recipe(),
        }
    }
}
