//! Dense row-major `f32` tensors and the handful of operations the rest of
//! the crate is built on.
//!
//! Every tensor can be viewed as a matrix: the last extent is the column
//! (channel) dimension and all leading extents are flattened into rows
//! (tokens). A `B×T×C` activation is therefore a `(B·T)×C` matrix to
//! [`matmul`], [`channel_absmax`] and the quantizers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{dim_err, param_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `dims` exactly and holds
    /// only finite values.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(dim_err!(
                "dims {:?} describe {} elements but {} were given",
                dims,
                len,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { dims, data })
    }

    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::from_parts(dims.to_vec(), vec![0.0; dims.iter().product()])
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(dim_err!("row {i} has {} entries, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    /// A one-row matrix.
    pub fn row(values: &[f32]) -> Result<Self> {
        Self::new(vec![1, values.len()], values.to_vec())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows in the matrix view.
    pub fn rows(&self) -> usize {
        match self.dims.split_last() {
            Some((_, lead)) => lead.iter().product(),
            None => 1,
        }
    }

    /// Number of columns (channels) in the matrix view.
    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols() + col]
    }

    pub fn row_slice(&self, row: usize) -> &[f32] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.dims, dims));
        }
        Ok(Self::from_parts(dims.to_vec(), self.data.clone()))
    }

    /// Collapses leading extents into a `rows×cols` matrix.
    pub fn as_matrix(&self) -> Self {
        Self::from_parts(vec![self.rows(), self.cols()], self.data.clone())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_parts(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.dims != other.dims {
            return Err(dim_err!("shape mismatch {:?} vs {:?}", self.dims, other.dims));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.dims.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[f32]) -> Result<Self> {
        let c = self.cols();
        if bias.len() != c {
            return Err(dim_err!("bias length {} vs {} columns", bias.len(), c));
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(Self::from_parts(self.dims.clone(), data))
    }

    /// Divides column `j` by `divisors[j]`.
    pub fn div_columns(&self, divisors: &[f32]) -> Result<Self> {
        let c = self.cols();
        if divisors.len() != c {
            return Err(dim_err!("{} divisors for {} columns", divisors.len(), c));
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(c) {
            for (v, s) in row.iter_mut().zip(divisors) {
                *v /= s;
            }
        }
        Ok(Self::from_parts(self.dims.clone(), data))
    }

    /// Multiplies row `i` of the matrix view by `factors[i]`.
    pub fn mul_rows(&self, factors: &[f32]) -> Result<Self> {
        let (r, c) = (self.rows(), self.cols());
        if factors.len() != r {
            return Err(dim_err!("{} factors for {} rows", factors.len(), r));
        }
        let mut data = self.data.clone();
        for (row, s) in data.chunks_mut(c).zip(factors) {
            for v in row {
                *v *= s;
            }
        }
        Ok(Self::from_parts(self.dims.clone(), data))
    }

    pub fn absmax(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Matrix product of `a` (any rank, viewed as rows×K) with the `K×M` matrix
/// `b`. Leading extents of `a` are kept in the output.
///
/// Each output element is accumulated in `f32`, left to right over `K`, so
/// results do not depend on thread count.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.dims.len() != 2 {
        return Err(dim_err!("right operand must be a matrix, got {:?}", b.dims));
    }
    let (k, m) = (b.dims[0], b.dims[1]);
    if a.cols() != k {
        return Err(dim_err!("inner dims disagree: {:?} · {:?}", a.dims, b.dims));
    }
    let rows = a.rows();
    let mut out = vec![0.0f32; rows * m];
    if m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(|(i, out_row)| {
            let a_row = &a.data[i * k..(i + 1) * k];
            for (kk, &av) in a_row.iter().enumerate() {
                let b_row = &b.data[kk * m..(kk + 1) * m];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        });
    }
    let mut dims = a.dims.clone();
    match dims.last_mut() {
        Some(last) => *last = m,
        None => dims.push(m),
    }
    Ok(Tensor::from_parts(dims, out))
}

/// Per-column maximum of `|x|` over all rows.
pub fn channel_absmax(x: &Tensor) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(dim_err!("channel_absmax of empty tensor {:?}", x.dims));
    }
    let c = x.cols();
    let mut out = vec![0.0f32; c];
    for row in x.data.chunks(c) {
        for (m, v) in out.iter_mut().zip(row) {
            *m = m.max(v.abs());
        }
    }
    Ok(out)
}

/// Per-row maximum of `|x|`.
pub fn row_absmax(x: &Tensor) -> Vec<f32> {
    let c = x.cols().max(1);
    x.data.chunks(c).map(|r| r.iter().fold(0.0f32, |m, v| m.max(v.abs()))).collect()
}

/// Deterministic generator used for every synthetic tensor in the crate:
/// ChaCha8 seeded with `seed_from_u64`, uniforms from the top 53 bits of a
/// `u64`, normals from the cosine branch of Box–Muller:
/// `z = sqrt(-2 ln(1 - u1)) · cos(2π u2)`.
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    pub fn normal(&mut self) -> f32 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        ((-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    /// Tensor of i.i.d. `N(0, std²)` entries.
    pub fn gaussian(&mut self, dims: &[usize], std: f32) -> Tensor {
        let n = dims.iter().product();
        let data = (0..n).map(|_| self.normal() * std).collect();
        Tensor::from_parts(dims.to_vec(), data)
    }

    /// `k` distinct indices from `0..n`, in ascending order (partial
    /// Fisher–Yates).
    pub fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        let mut picked = idx[..k.min(n)].to_vec();
        picked.sort_unstable();
        picked
    }
}

/// Describes channel outliers injected into synthetic activations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OutlierSpec {
    /// Fraction of channels that carry outliers, in `[0, 1]`.
    pub fraction: f32,
    /// Multiplier applied to every entry of an outlier channel.
    pub scale: f32,
    pub seed: u64,
}

impl OutlierSpec {
    pub fn new(fraction: f32, scale: f32, seed: u64) -> Result<Self> {
        let spec = Self { fraction, scale, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn none(seed: u64) -> Self {
        Self { fraction: 0.0, scale: 1.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(param_err!("outlier fraction {} outside [0, 1]", self.fraction));
        }
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(param_err!("outlier scale {} must be positive", self.scale));
        }
        Ok(())
    }

    /// Number of outlier channels among `c`: `ceil(fraction · c)`.
    pub fn outlier_count(&self, c: usize) -> usize {
        ((self.fraction as f64 * c as f64).ceil() as usize).min(c)
    }

    /// The outlier channel indices among `c`, fixed by the seed.
    pub fn channels(&self, c: usize) -> Vec<usize> {
        SeededRng::new(self.seed).choose(c, self.outlier_count(c))
    }
}

/// A `t×c` standard-normal activation matrix whose outlier channels (see
/// [`OutlierSpec::channels`]) are multiplied by `spec.scale` in every row.
///
/// The channel set is drawn first, from a generator seeded with `spec.seed`;
/// the entries follow in row-major order from a second generator seeded with
/// `spec.seed + 1`.
pub fn gen_outlier_activations(t: usize, c: usize, spec: &OutlierSpec) -> Result<Tensor> {
    spec.validate()?;
    if c == 0 {
        return Err(param_err!("channel count must be at least 1"));
    }
    let channels = spec.channels(c);
    let mut x = SeededRng::new(spec.seed.wrapping_add(1)).gaussian(&[t, c], 1.0);
    for row in x.data.chunks_mut(c) {
        for &j in &channels {
            row[j] *= spec.scale;
        }
    }
    Ok(x)
}

/// Mean squared difference.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims != b.dims {
        return Err(dim_err!("shape mismatch {:?} vs {:?}", a.dims, b.dims));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// `max |actual − reference| / max |reference|`: the largest element error
/// relative to the reference tensor's magnitude.
pub fn max_rel_error(actual: &Tensor, reference: &Tensor) -> Result<f64> {
    if actual.dims != reference.dims {
        return Err(dim_err!("shape mismatch {:?} vs {:?}", actual.dims, reference.dims));
    }
    let diff = actual
        .data
        .iter()
        .zip(&reference.data)
        .fold(0.0f64, |m, (&a, &r)| m.max((a as f64 - r as f64).abs()));
    let scale = reference.absmax() as f64;
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// `‖actual − reference‖₂ / ‖reference‖₂` over all elements.
pub fn rel_l2_error(actual: &Tensor, reference: &Tensor) -> Result<f64> {
    if actual.dims != reference.dims {
        return Err(dim_err!("shape mismatch {:?} vs {:?}", actual.dims, reference.dims));
    }
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&a, &r) in actual.data.iter().zip(&reference.data) {
        num += (a as f64 - r as f64).powi(2);
        den += (r as f64).powi(2);
    }
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}
