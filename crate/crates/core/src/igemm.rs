//! Reference integer GEMM with exact `i32` accumulation and post-accumulation
//! rescaling.
//!
//! An integer kernel computes `X̄ · W̄` on codes and applies the steps
//! afterwards: `Y = diag(Δx) · (X̄ · W̄) · diag(Δw)`. That only works when
//! `Δx` varies along rows of `X` (tokens) and `Δw` along columns of `W`
//! (output channels). Steps along the shared inner dimension cannot be
//! factored out of the sum and are rejected by [`rescale`].

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::quant::{decompose_outliers, dequantize, fake_quant, quantize, Granularity, QuantizedTensor, Recipe, SettingLevel};
use crate::tensor::{matmul, Tensor};

/// Largest inner dimension for which `K · 127²` fits in an `i32`.
pub const MAX_INNER_DIM: usize = 1 << 16;

/// Exact integer products of a `rows×cols` GEMM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntAccumulator {
    dims: Vec<usize>,
    data: Vec<i32>,
}

impl IntAccumulator {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn cols(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }
}

/// `xq · wq` on codes. `xq` may have leading batch extents; `wq` must be a
/// `K×M` matrix.
pub fn int8_gemm(xq: &QuantizedTensor, wq: &QuantizedTensor) -> Result<IntAccumulator> {
    if wq.dims().len() != 2 {
        return Err(dim_err!("right operand must be a matrix, got {:?}", wq.dims()));
    }
    let (k, m) = (wq.dims()[0], wq.dims()[1]);
    if xq.cols() != k {
        return Err(dim_err!("inner dims disagree: {:?} · {:?}", xq.dims(), wq.dims()));
    }
    if k > MAX_INNER_DIM {
        return Err(dim_err!("inner dimension {k} exceeds {MAX_INNER_DIM}"));
    }
    let (xv, wv) = (xq.values(), wq.values());
    let mut data = vec![0i32; xq.rows() * m];
    if m > 0 {
        data.par_chunks_mut(m).enumerate().for_each(|(i, out)| {
            for (kk, &a) in xv[i * k..(i + 1) * k].iter().enumerate() {
                if a == 0 {
                    continue;
                }
                for (o, &b) in out.iter_mut().zip(&wv[kk * m..(kk + 1) * m]) {
                    *o += a as i32 * b as i32;
                }
            }
        });
    }
    let mut dims = xq.dims().to_vec();
    if let Some(last) = dims.last_mut() {
        *last = m;
    }
    Ok(IntAccumulator { dims, data })
}

/// Step layout of one GEMM operand.
#[derive(Debug, Clone, Copy)]
pub struct OperandScales<'a> {
    pub granularity: Granularity,
    pub scales: &'a [f32],
}

impl<'a> From<&'a QuantizedTensor> for OperandScales<'a> {
    fn from(q: &'a QuantizedTensor) -> Self {
        Self { granularity: q.scheme().granularity, scales: q.scales() }
    }
}

/// Converts an accumulator to floats: `Y[t,o] = acc[t,o] · Δx(t) · Δw(o)`,
/// plus `bias[o]` when given.
///
/// The left operand accepts per-tensor or per-token steps; the right operand
/// accepts per-tensor, per-channel or group-wise steps over its output
/// columns. Anything laid out along the inner dimension is
/// [`Error::UnsupportedGranularity`].
pub fn rescale(
    acc: &IntAccumulator,
    x_scales: OperandScales<'_>,
    w_scales: OperandScales<'_>,
    bias: Option<&[f32]>,
) -> Result<Tensor> {
    let (rows, cols) = (acc.rows(), acc.cols());
    let x_step: Box<dyn Fn(usize) -> f32 + '_> = match x_scales.granularity {
        Granularity::PerTensor => {
            expect_len(x_scales.scales, 1, "activation")?;
            Box::new(|_| x_scales.scales[0])
        }
        Granularity::PerToken => {
            expect_len(x_scales.scales, rows, "activation")?;
            Box::new(|t| x_scales.scales[t])
        }
        g => {
            return Err(Error::UnsupportedGranularity(format!(
                "{g:?} activation steps lie on the inner dimension"
            )))
        }
    };
    let w_step: Box<dyn Fn(usize) -> f32 + '_> = match w_scales.granularity {
        Granularity::PerTensor => {
            expect_len(w_scales.scales, 1, "weight")?;
            Box::new(|_| w_scales.scales[0])
        }
        Granularity::PerChannel => {
            expect_len(w_scales.scales, cols, "weight")?;
            Box::new(|o| w_scales.scales[o])
        }
        Granularity::GroupWise(g) => {
            if g == 0 || cols % g != 0 {
                return Err(dim_err!("group size {g} does not divide {cols} output channels"));
            }
            expect_len(w_scales.scales, cols / g, "weight")?;
            Box::new(move |o| w_scales.scales[o / g])
        }
        Granularity::PerToken => {
            return Err(Error::UnsupportedGranularity(
                "per-row weight steps lie on the inner dimension".into(),
            ))
        }
    };
    if let Some(b) = bias {
        expect_len(b, cols, "bias")?;
    }
    let mut out = Vec::with_capacity(acc.data.len());
    for t in 0..rows {
        let dx = x_step(t);
        for o in 0..cols {
            let mut y = acc.data[t * cols + o] as f32 * dx * w_step(o);
            if let Some(b) = bias {
                y += b[o];
            }
            out.push(y);
        }
    }
    Tensor::new(acc.dims.clone(), out)
}

fn expect_len(v: &[f32], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(dim_err!("{} {what} scales, expected {n}", v.len()));
    }
    Ok(())
}

/// Multiplies on codes, then rescales.
pub fn gemm_quantized(xq: &QuantizedTensor, wq: &QuantizedTensor, bias: Option<&[f32]>) -> Result<Tensor> {
    let acc = int8_gemm(xq, wq)?;
    rescale(&acc, xq.into(), wq.into(), bias)
}

/// A linear layer `x·w (+ bias)` executed under `recipe`.
///
/// `act_steps` supplies calibrated steps when the activation scheme is
/// static. Recipes whose activation steps would sit on the inner dimension
/// (per-channel, group-wise) run as a float simulation over fake-quantized
/// operands, since no integer kernel can execute them.
pub fn linear_with_recipe(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f32]>,
    recipe: &Recipe,
    act_steps: Option<&[f32]>,
) -> Result<Tensor> {
    let wq = quantize(w, &recipe.weight, None)?;
    if let Some(threshold) = recipe.outlier_threshold {
        let parts = decompose_outliers(x, threshold, recipe.activation.bits)?;
        let mut y = gemm_quantized(&parts.dense, &wq, bias)?;
        if !parts.outlier_channels.is_empty() {
            let rows: Vec<&[f32]> = parts.outlier_channels.iter().map(|&j| w.row_slice(j)).collect();
            let side = matmul(&parts.outliers, &Tensor::from_rows(&rows)?)?;
            y = y.add(&side.reshape(y.dims())?)?;
        }
        return Ok(y);
    }
    if !recipe.is_kernel_compatible() {
        let xs = fake_quant(x, &recipe.activation, act_steps)?;
        let y = matmul(&xs, &dequantize(&wq))?;
        return match bias {
            Some(b) => y.add_row_vector(b),
            None => Ok(y),
        };
    }
    let xq = quantize(x, &recipe.activation, act_steps)?;
    gemm_quantized(&xq, &wq, bias)
}

/// `x·w` at one of the efficiency levels. O3 needs `calib`, the static
/// activation step.
pub fn quantized_linear(x: &Tensor, w: &Tensor, level: SettingLevel, calib: Option<f32>) -> Result<Tensor> {
    let steps = calib.map(|s| [s]);
    linear_with_recipe(x, w, None, &level.recipe(), steps.as_ref().map(|s| s.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{compute_step, QuantScheme, Timing};
    use crate::smooth::{apply_smoothing, smoothing_factors};
    use crate::tensor::{channel_absmax, gen_outlier_activations, mse, row_absmax, OutlierSpec, SeededRng};

    const TENSOR_DYN: QuantScheme = QuantScheme::int8(Granularity::PerTensor, Timing::Dynamic);

    fn q(rows: &[&[f32]]) -> QuantizedTensor {
        let t = Tensor::from_rows(rows).unwrap();
        let step = [1.0f32];
        quantize(&t, &QuantScheme::int8(Granularity::PerTensor, Timing::Static), Some(&step)).unwrap()
    }

    #[test]
    fn single_product_and_identity() {
        let a = q(&[&[127.0]]);
        assert_eq!(int8_gemm(&a, &a).unwrap().data(), &[16129]);

        let eye = q(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = q(&[&[3.0, -7.0], &[12.0, 127.0]]);
        assert_eq!(int8_gemm(&eye, &w).unwrap().data(), &[3, -7, 12, 127]);
        assert!(matches!(int8_gemm(&w, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn rescale_examples() {
        let a = q(&[&[127.0]]);
        let acc = int8_gemm(&a, &a).unwrap();
        let y = rescale(
            &acc,
            OperandScales { granularity: Granularity::PerTensor, scales: &[0.01] },
            OperandScales { granularity: Granularity::PerTensor, scales: &[0.02] },
            None,
        )
        .unwrap();
        assert!((y.data()[0] - 3.2258).abs() < 1e-4);

        let unit = OperandScales { granularity: Granularity::PerTensor, scales: &[1.0] };
        assert_eq!(rescale(&acc, unit, unit, None).unwrap().data(), &[16129.0]);
        assert_eq!(rescale(&acc, unit, unit, Some(&[0.5])).unwrap().data(), &[16129.5]);
    }

    #[test]
    fn inner_dimension_steps_rejected() {
        let mut rng = SeededRng::new(1);
        let x = rng.gaussian(&[4, 8], 1.0);
        let w = rng.gaussian(&[8, 3], 1.0);
        let xq = quantize(&x, &QuantScheme::int8(Granularity::PerChannel, Timing::Dynamic), None).unwrap();
        let wq = quantize(&w, &TENSOR_DYN, None).unwrap();
        assert!(matches!(gemm_quantized(&xq, &wq, None), Err(Error::UnsupportedGranularity(_))));

        let xq = quantize(&x, &TENSOR_DYN, None).unwrap();
        let wq = quantize(&w, &QuantScheme::int8(Granularity::PerToken, Timing::Dynamic), None).unwrap();
        assert!(matches!(gemm_quantized(&xq, &wq, None), Err(Error::UnsupportedGranularity(_))));
    }

    #[test]
    fn matches_dequantized_float_path() {
        let schemes = [
            (Granularity::PerTensor, Granularity::PerTensor),
            (Granularity::PerToken, Granularity::PerChannel),
            (Granularity::PerToken, Granularity::GroupWise(4)),
        ];
        for seed in 0..30u64 {
            let mut rng = SeededRng::new(seed);
            let x = rng.gaussian(&[16, 32], 2.0);
            let w = rng.gaussian(&[32, 8], 0.3);
            for (gx, gw) in schemes {
                let xq = quantize(&x, &QuantScheme::int8(gx, Timing::Dynamic), None).unwrap();
                let wq = quantize(&w, &QuantScheme::int8(gw, Timing::Dynamic), None).unwrap();
                let int_path = gemm_quantized(&xq, &wq, None).unwrap();
                let float_path = matmul(&dequantize(&xq), &dequantize(&wq)).unwrap();
                assert!(crate::tensor::max_rel_error(&int_path, &float_path).unwrap() <= 1e-5);
            }
        }
    }

    #[test]
    fn lattice_inputs_are_exact_at_o2() {
        // Values are small integers and the largest magnitude is 127, so
        // both steps come out as exactly 1.
        let x = Tensor::from_rows(&[[127.0, -3.0, 5.0], [0.0, 1.0, -2.0]]).unwrap();
        let w = Tensor::from_rows(&[[1.0, 2.0], [-127.0, 0.0], [4.0, 3.0]]).unwrap();
        let y = quantized_linear(&x, &w, SettingLevel::O2, None).unwrap();
        assert_eq!(y, matmul(&x, &w).unwrap());
    }

    #[test]
    fn o3_requires_calibration() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(matches!(quantized_linear(&x, &x, SettingLevel::O3, None), Err(Error::Config(_))));
    }

    #[test]
    fn smoothing_cuts_o3_error() {
        for seed in 0..5u64 {
            let spec = OutlierSpec::new(0.01, 100.0, seed).unwrap();
            // Static steps are calibrated on the evaluated inputs themselves.
            let x = gen_outlier_activations(64, 128, &spec).unwrap();
            let w = SeededRng::new(seed + 100).gaussian(&[128, 128], 1.0);
            let reference = matmul(&x, &w).unwrap();

            let naive = quantized_linear(&x, &w, SettingLevel::O3, Some(compute_step(x.absmax(), 8).unwrap())).unwrap();
            let s = smoothing_factors(&channel_absmax(&x).unwrap(), &row_absmax(&w), 0.5).unwrap();
            let (xs, ws) = apply_smoothing(&x, &w, &s).unwrap();
            let smoothed = quantized_linear(&xs, &ws, SettingLevel::O3, Some(compute_step(xs.absmax(), 8).unwrap())).unwrap();
            let (e_naive, e_smooth) = (mse(&naive, &reference).unwrap(), mse(&smoothed, &reference).unwrap());
            assert!(e_smooth <= 0.2 * e_naive, "seed {seed}: {e_smooth} vs {e_naive}");
        }
    }

    #[test]
    fn per_token_beats_static_on_varying_ranges() {
        let mut rng = SeededRng::new(17);
        let mut x = rng.gaussian(&[64, 32], 1.0);
        let factors: Vec<f32> = (0..64).map(|t| 10f32.powf((t % 8) as f32 / 2.0 - 1.0)).collect();
        x = x.mul_rows(&factors).unwrap();
        let w = rng.gaussian(&[32, 16], 1.0);
        let reference = matmul(&x, &w).unwrap();
        let o1 = quantized_linear(&x, &w, SettingLevel::O1, None).unwrap();
        let o3 = quantized_linear(&x, &w, SettingLevel::O3, Some(compute_step(x.absmax(), 8).unwrap())).unwrap();
        assert!(mse(&o1, &reference).unwrap() <= mse(&o3, &reference).unwrap());
    }

    #[test]
    fn mixed_decomposition_keeps_outliers_in_float() {
        let spec = OutlierSpec::new(0.02, 100.0, 6).unwrap();
        let x = gen_outlier_activations(32, 64, &spec).unwrap();
        let w = SeededRng::new(7).gaussian(&[64, 16], 1.0);
        let reference = matmul(&x, &w).unwrap();
        let mixed = linear_with_recipe(&x, &w, None, &crate::quant::Baseline::MixedDecomposition.recipe(16), None).unwrap();
        let naive = linear_with_recipe(&x, &w, None, &crate::quant::Baseline::Naive.recipe(16), None).unwrap();
        assert!(mse(&mixed, &reference).unwrap() < 0.1 * mse(&naive, &reference).unwrap());
    }

    mod props {
        use super::*;
        use num_bigint::BigInt;
        use proptest::prelude::*;

        fn codes(n: usize) -> impl Strategy<Value = Vec<i8>> {
            proptest::collection::vec(-127i8..=127, n)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn accumulator_is_exact(rows in 1usize..6, k in 1usize..40, cols in 1usize..6, seed in any::<u64>()) {
                let mut rng = SeededRng::new(seed);
                let xs: Vec<i8> = (0..rows * k).map(|_| (rng.below(255) as i32 - 127) as i8).collect();
                let ws: Vec<i8> = (0..k * cols).map(|_| (rng.below(255) as i32 - 127) as i8).collect();
                let xq = QuantizedTensor::from_parts(vec![rows, k], xs.clone(), vec![1.0], TENSOR_DYN).unwrap();
                let wq = QuantizedTensor::from_parts(vec![k, cols], ws.clone(), vec![1.0], TENSOR_DYN).unwrap();
                let acc = int8_gemm(&xq, &wq).unwrap();
                for i in 0..rows {
                    for j in 0..cols {
                        let mut want = BigInt::from(0);
                        for kk in 0..k {
                            want += BigInt::from(xs[i * k + kk]) * BigInt::from(ws[kk * cols + j]);
                        }
                        prop_assert_eq!(BigInt::from(acc.data()[i * cols + j]), want);
                    }
                }
            }

            #[test]
            fn no_overflow_at_max_inner_dim(a in codes(1), b in codes(1)) {
                // Worst case: every product in a length-2^16 dot has the same sign.
                let k = MAX_INNER_DIM;
                let xq = QuantizedTensor::from_parts(vec![1, k], vec![a[0]; k], vec![1.0], TENSOR_DYN).unwrap();
                let wq = QuantizedTensor::from_parts(vec![k, 1], vec![b[0]; k], vec![1.0], TENSOR_DYN).unwrap();
                let acc = int8_gemm(&xq, &wq).unwrap();
                prop_assert_eq!(acc.data()[0] as i64, a[0] as i64 * b[0] as i64 * k as i64);
            }
        }
    }
}
