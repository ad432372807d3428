//! Per-channel smoothing: moving quantization difficulty from activations
//! into weights without changing what a linear layer computes.
//!
//! For a linear layer `Y = X·W` and a positive vector `s` over its input
//! channels,
//!
//! ```text
//! Y = (X · diag(s)⁻¹) · (diag(s) · W) = X̂ · Ŵ
//! ```
//!
//! With `A_j = max|X_j|` (from calibration) and `B_j = max|W_j|` (row `j` of
//! `W`), the factors are `s_j = A_j^α / B_j^(1-α)`. After the transform the
//! activation channel peaks are `(A_j·B_j)^(1-α)` and the weight row peaks
//! are `(A_j·B_j)^α`, so `α = 0.5` gives both sides the same peak.

use std::collections::BTreeMap;

use crate::error::{dim_err, param_err, Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::tensor::Tensor;

/// Default migration strength.
pub const DEFAULT_ALPHA: f32 = 0.5;

/// Factors below this (or non-finite ones) are replaced by 1.
pub const MIN_FACTOR: f32 = 1e-5;

/// Activation statistics gathered for one smoothing attachment point.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub act_absmax: Vec<f32>,
    pub sample_count: usize,
    pub clip_fraction: f32,
}

impl ChannelStats {
    pub fn new(act_absmax: Vec<f32>, sample_count: usize, clip_fraction: f32) -> Result<Self> {
        if act_absmax.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Data("channel statistics must be finite and non-negative".into()));
        }
        Ok(Self { act_absmax, sample_count, clip_fraction })
    }

    /// Element-wise maximum with another set of statistics for the same
    /// point.
    pub fn merge(&mut self, other: &ChannelStats) -> Result<()> {
        if self.act_absmax.len() != other.act_absmax.len() {
            return Err(dim_err!(
                "merging stats of length {} and {}",
                self.act_absmax.len(),
                other.act_absmax.len()
            ));
        }
        for (a, b) in self.act_absmax.iter_mut().zip(&other.act_absmax) {
            *a = a.max(*b);
        }
        self.sample_count += other.sample_count;
        Ok(())
    }
}

/// Smoothing vectors keyed by attachment point.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingPlan {
    pub alpha: f32,
    pub factors: BTreeMap<String, Vec<f32>>,
}

impl SmoothingPlan {
    pub fn new(alpha: f32) -> Self {
        Self { alpha, factors: BTreeMap::new() }
    }

    pub fn insert(&mut self, point: impl Into<String>, s: Vec<f32>) -> Result<()> {
        check_factors(&s)?;
        self.factors.insert(point.into(), s);
        Ok(())
    }

    pub fn get(&self, point: &str) -> Option<&[f32]> {
        self.factors.get(point).map(Vec::as_slice)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.factors.values().try_for_each(|s| check_factors(s))
    }
}

fn check_alpha(alpha: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(param_err!("migration strength {alpha} outside [0, 1]"));
    }
    Ok(())
}

fn check_factors(s: &[f32]) -> Result<()> {
    match s.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        Some(v) => Err(param_err!("smoothing factor {v} is not positive and finite")),
        None => Ok(()),
    }
}

/// `s_j = act_max_j^α / weight_max_j^(1-α)`.
///
/// Entries that come out zero, non-finite, or below [`MIN_FACTOR`] (dead
/// channels) are set to 1.
pub fn smoothing_factors(act_max: &[f32], weight_max: &[f32], alpha: f32) -> Result<Vec<f32>> {
    if act_max.len() != weight_max.len() {
        return Err(dim_err!(
            "{} activation maxima vs {} weight maxima",
            act_max.len(),
            weight_max.len()
        ));
    }
    check_alpha(alpha)?;
    if act_max.iter().chain(weight_max).any(|v| !(*v >= 0.0)) {
        return Err(param_err!("channel maxima must be non-negative"));
    }
    let a = alpha as f64;
    Ok(act_max
        .iter()
        .zip(weight_max)
        .map(|(&x, &w)| {
            let s = ((x as f64).powf(a) / (w as f64).powf(1.0 - a)) as f32;
            if s.is_finite() && s >= MIN_FACTOR {
                s
            } else {
                1.0
            }
        })
        .collect())
}

/// Divides column `j` of `x` by `s_j` and multiplies row `j` of `w` by `s_j`.
pub fn apply_smoothing(x: &Tensor, w: &Tensor, s: &[f32]) -> Result<(Tensor, Tensor)> {
    check_factors(s)?;
    if x.cols() != s.len() || w.rows() != s.len() {
        return Err(dim_err!(
            "{} factors for activations {:?} and weights {:?}",
            s.len(),
            x.dims(),
            w.dims()
        ));
    }
    Ok((x.div_columns(s)?, w.mul_rows(s)?))
}

/// Channel peaks after smoothing: `(A/s, B·s)` per channel.
pub fn post_smoothing_balance(
    act_max: &[f32],
    weight_max: &[f32],
    alpha: f32,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let s = smoothing_factors(act_max, weight_max, alpha)?;
    let x_max = act_max.iter().zip(&s).map(|(a, s)| a / s).collect();
    let w_max = weight_max.iter().zip(&s).map(|(b, s)| b * s).collect();
    Ok((x_max, w_max))
}

/// The operator whose output feeds a smoothed linear layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Predecessor {
    LayerNorm(LayerNorm),
    Linear(Linear),
    /// A residual sum has no parameters to absorb the factors; the consumer
    /// needs an explicit scaling on that branch instead.
    ResidualAdd,
}

/// Folds `1/s` into the predecessor's output so the smoothed activation is
/// produced directly.
pub fn fuse_into_predecessor(pred: &Predecessor, s: &[f32]) -> Result<Predecessor> {
    check_factors(s)?;
    match pred {
        Predecessor::LayerNorm(ln) => {
            if ln.channels() != s.len() {
                return Err(dim_err!("{} factors for {} layer-norm channels", s.len(), ln.channels()));
            }
            Ok(Predecessor::LayerNorm(LayerNorm {
                gamma: ln.gamma.iter().zip(s).map(|(g, s)| g / s).collect(),
                beta: ln.beta.iter().zip(s).map(|(b, s)| b / s).collect(),
            }))
        }
        Predecessor::Linear(lin) => {
            if lin.out_features() != s.len() {
                return Err(dim_err!("{} factors for {} linear outputs", s.len(), lin.out_features()));
            }
            Ok(Predecessor::Linear(Linear {
                weight: lin.weight.div_columns(s)?,
                bias: lin.bias.iter().zip(s).map(|(b, s)| b / s).collect(),
            }))
        }
        Predecessor::ResidualAdd => Err(Error::NotFusable(
            "residual add has no parameters; scale the residual branch explicitly".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{channel_absmax, gen_outlier_activations, matmul, max_rel_error, row_absmax, OutlierSpec, SeededRng};

    #[test]
    fn factor_examples() {
        assert_eq!(smoothing_factors(&[100.0, 1.0], &[1.0, 1.0], 0.5).unwrap(), vec![10.0, 1.0]);
        let a = [4.0, 9.0, 0.5];
        let w = [2.0, 0.25, 3.0];
        assert_eq!(smoothing_factors(&a, &w, 1.0).unwrap(), a.to_vec());
        let inv: Vec<f32> = w.iter().map(|v| 1.0 / v).collect();
        assert_eq!(smoothing_factors(&a, &w, 0.0).unwrap(), inv);
    }

    #[test]
    fn dead_channels_fall_back_to_one() {
        let s = smoothing_factors(&[0.0, 5.0, 1e-12], &[1.0, 0.0, 1.0], 0.5).unwrap();
        assert_eq!(s, vec![1.0, 1.0, 1.0]);
        assert!(matches!(smoothing_factors(&[1.0], &[1.0, 2.0], 0.5), Err(Error::Dimension(_))));
        assert!(smoothing_factors(&[1.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn ones_are_identity() {
        let mut rng = SeededRng::new(0);
        let x = rng.gaussian(&[4, 6], 1.0);
        let w = rng.gaussian(&[6, 3], 1.0);
        let (xs, ws) = apply_smoothing(&x, &w, &[1.0; 6]).unwrap();
        assert_eq!((xs, ws), (x.clone(), w.clone()));
        assert!(matches!(apply_smoothing(&x, &w, &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0]), Err(Error::Parameter(_))));
    }

    #[test]
    fn smoothed_peaks_follow_product_identity() {
        let x = gen_outlier_activations(64, 128, &OutlierSpec::new(0.01, 100.0, 8).unwrap()).unwrap();
        let w = SeededRng::new(9).gaussian(&[128, 64], 1.0);
        let a = channel_absmax(&x).unwrap();
        let b = row_absmax(&w);
        let s = smoothing_factors(&a, &b, 0.5).unwrap();
        let (xs, ws) = apply_smoothing(&x, &w, &s).unwrap();
        let xm = channel_absmax(&xs).unwrap();
        let wm = row_absmax(&ws);
        for j in 0..128 {
            let expected = ((a[j] as f64) * (b[j] as f64)).sqrt();
            assert!((xm[j] as f64 - expected).abs() <= 1e-5 * expected);
            assert!((wm[j] as f64 - expected).abs() <= 1e-5 * expected);
        }
        let rel = max_rel_error(&matmul(&xs, &ws).unwrap(), &matmul(&x, &w).unwrap()).unwrap();
        assert!(rel <= 1e-4);
    }

    #[test]
    fn balance_examples() {
        let (x, w) = post_smoothing_balance(&[100.0], &[1.0], 0.5).unwrap();
        assert_eq!((x[0], w[0]), (10.0, 10.0));
        let (x, w) = post_smoothing_balance(&[100.0], &[2.0], 0.75).unwrap();
        assert!(w[0] > x[0]);
        let (x, w) = post_smoothing_balance(&[8.0], &[0.5], 0.0).unwrap();
        assert_eq!((x[0], w[0]), (4.0, 1.0));
    }

    #[test]
    fn layer_norm_fusion() {
        let ln = Predecessor::LayerNorm(LayerNorm { gamma: vec![2.0, 2.0], beta: vec![1.0, 1.0] });
        let fused = fuse_into_predecessor(&ln, &[2.0, 4.0]).unwrap();
        assert_eq!(
            fused,
            Predecessor::LayerNorm(LayerNorm { gamma: vec![1.0, 0.5], beta: vec![0.5, 0.25] })
        );
        assert_eq!(fuse_into_predecessor(&ln, &[1.0, 1.0]).unwrap(), ln);
        assert!(fuse_into_predecessor(&ln, &[1.0]).is_err());
    }

    #[test]
    fn linear_fusion_matches_explicit_division() {
        let mut rng = SeededRng::new(4);
        let lin = Linear::new(rng.gaussian(&[5, 3], 1.0), vec![0.5, -1.0, 2.0]).unwrap();
        let s = [3.0, 0.5, 7.0];
        let Predecessor::Linear(fused) = fuse_into_predecessor(&Predecessor::Linear(lin.clone()), &s).unwrap() else {
            unreachable!()
        };
        let x = rng.gaussian(&[4, 5], 1.0);
        let explicit = lin.forward(&x).unwrap().div_columns(&s).unwrap();
        let got = fused.forward(&x).unwrap();
        assert!(max_rel_error(&got, &explicit).unwrap() < 1e-6);
    }

    #[test]
    fn residual_is_not_fusable() {
        assert!(matches!(
            fuse_into_predecessor(&Predecessor::ResidualAdd, &[1.0]),
            Err(Error::NotFusable(_))
        ));
    }

    #[test]
    fn stats_merge_takes_max() {
        let mut a = ChannelStats::new(vec![1.0, 5.0], 1, 0.0).unwrap();
        a.merge(&ChannelStats::new(vec![3.0, 2.0], 2, 0.0).unwrap()).unwrap();
        assert_eq!(a.act_absmax, vec![3.0, 5.0]);
        assert_eq!(a.sample_count, 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn equivalence_and_balance(seed in any::<u64>(), alpha in 0.0f32..=1.0) {
                let mut rng = SeededRng::new(seed);
                let x = rng.gaussian(&[8, 16], 3.0);
                let w = rng.gaussian(&[16, 8], 0.5);
                let a = channel_absmax(&x).unwrap();
                let b = row_absmax(&w);
                let s = smoothing_factors(&a, &b, alpha).unwrap();
                let (xs, ws) = apply_smoothing(&x, &w, &s).unwrap();
                let rel = max_rel_error(&matmul(&xs, &ws).unwrap(), &matmul(&x, &w).unwrap()).unwrap();
                prop_assert!(rel <= 1e-4);
                let xm = channel_absmax(&xs).unwrap();
                let wm = row_absmax(&ws);
                for j in 0..16 {
                    let lhs = xm[j] as f64 * wm[j] as f64;
                    let rhs = a[j] as f64 * b[j] as f64;
                    prop_assert!((lhs - rhs).abs() <= 1e-5 * rhs);
                }
            }

            #[test]
            fn larger_alpha_moves_peaks_into_weights(
                a in 1.0f32..1e3, b in 1.0f32..10.0, lo in 0.0f32..1.0, hi in 0.0f32..1.0,
            ) {
                let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
                let (x_lo, w_lo) = post_smoothing_balance(&[a], &[b], lo).unwrap();
                let (x_hi, w_hi) = post_smoothing_balance(&[a], &[b], hi).unwrap();
                prop_assert!(x_hi[0] <= x_lo[0] * (1.0 + 1e-6));
                prop_assert!(w_hi[0] >= w_lo[0] * (1.0 - 1e-6));
            }
        }
    }
}
