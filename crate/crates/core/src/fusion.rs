//! Pooling rules for Gaussian predictive densities.
//!
//! Linear pooling forms the mixture `Σ w_k N(y | μ_k, σ_k²)` with weights on
//! the simplex. Log-linear pooling forms the normalized weighted product
//! `∝ Π N(y | μ_k, σ_k²)^{w_k}`, which for Gaussians is again Gaussian with
//! precision `Σ w_k σ_k⁻²` and precision-weighted mean (the generalized
//! product of experts). Log-linear weights only need to be positive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, normal_log_pdf, Scalar};

/// Per-input predictive mean and variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction<T> {
    pub mean: T,
    pub variance: T,
}

impl<T: Scalar> GaussianPrediction<T> {
    pub fn new(mean: T, variance: T) -> Result<Self> {
        if !(variance > T::zero()) || !variance.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gaussian prediction needs finite mean and positive variance, got ({mean}, {variance})"
            )));
        }
        Ok(Self { mean, variance })
    }

    pub fn log_pdf(&self, y: T) -> T {
        normal_log_pdf(y, self.mean, self.variance)
    }

    pub fn precision(&self) -> T {
        self.variance.recip()
    }
}

fn simplex_tolerance<T: Scalar>(k: usize) -> T {
    let machine = T::epsilon() * T::lit(64.0) * T::from_usize_lossy(k.max(1));
    machine.max(T::lit(1e-12))
}

/// Weights on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights<T>(Vec<T>);

impl<T: Scalar> SimplexWeights<T> {
    pub fn new(w: Vec<T>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidParameter("empty weight vector".into()));
        }
        if w.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "simplex weights must be >= 0".into(),
            ));
        }
        let total: T = w.iter().copied().sum();
        if (total - T::one()).abs() > simplex_tolerance(w.len()) {
            return Err(Error::InvalidParameter(format!(
                "simplex weights sum to {total}, not 1"
            )));
        }
        Ok(Self(w))
    }

    pub fn uniform(k: usize) -> Self {
        let v = T::from_usize_lossy(k).recip();
        Self(vec![v; k])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Strictly positive weights without a sum constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositiveWeights<T>(Vec<T>);

impl<T: Scalar> PositiveWeights<T> {
    pub fn new(w: Vec<T>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidParameter("empty weight vector".into()));
        }
        if w.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "log-linear weights must be finite and > 0".into(),
            ));
        }
        Ok(Self(w))
    }

    /// Weights `exp(log_w)`; fails if any exponent underflows to zero.
    pub fn from_log(log_w: &[T]) -> Result<Self> {
        Self::new(log_w.iter().map(|v| v.exp()).collect())
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<T: Scalar> From<SimplexWeights<T>> for PositiveWeights<T> {
    /// Zero simplex entries are not positive; they are floored at the
    /// smallest normal value so the product rule stays defined.
    fn from(w: SimplexWeights<T>) -> Self {
        Self(
            w.0.into_iter()
                .map(|v| v.max(T::min_positive_value()))
                .collect(),
        )
    }
}

/// A finite Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePdf<T> {
    components: Vec<GaussianPrediction<T>>,
    weights: SimplexWeights<T>,
}

impl<T: Scalar> MixturePdf<T> {
    pub fn new(components: Vec<GaussianPrediction<T>>, weights: SimplexWeights<T>) -> Result<Self> {
        if components.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} components but {} weights",
                components.len(),
                weights.len()
            )));
        }
        Ok(Self {
            components,
            weights,
        })
    }

    pub fn components(&self) -> &[GaussianPrediction<T>] {
        &self.components
    }

    pub fn weights(&self) -> &SimplexWeights<T> {
        &self.weights
    }

    pub fn log_pdf(&self, y: T) -> T {
        linear_pool_logpdf(&self.components, &self.weights, y)
    }

    pub fn mean(&self) -> T {
        self.components
            .iter()
            .zip(self.weights.as_slice())
            .map(|(c, &w)| w * c.mean)
            .sum()
    }

    pub fn variance(&self) -> T {
        let m = self.mean();
        let second: T = self
            .components
            .iter()
            .zip(self.weights.as_slice())
            .map(|(c, &w)| w * (c.variance + c.mean * c.mean))
            .sum();
        second - m * m
    }
}

/// Softmax with max-subtraction.
pub fn softmax<T: Scalar>(w_tilde: &[T]) -> SimplexWeights<T> {
    SimplexWeights(softmax_vec(w_tilde))
}

pub(crate) fn softmax_vec<T: Scalar>(w_tilde: &[T]) -> Vec<T> {
    let max = w_tilde
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut out: Vec<T> = w_tilde.iter().map(|&v| (v - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// `ln Σ w_k N(y | μ_k, σ_k²)`.
pub fn linear_pool_logpdf<T: Scalar>(
    preds: &[GaussianPrediction<T>],
    w: &SimplexWeights<T>,
    y: T,
) -> T {
    assert_eq!(preds.len(), w.len(), "component/weight count mismatch");
    let terms: Vec<T> = preds
        .iter()
        .zip(w.as_slice())
        .map(|(p, &wk)| wk.ln() + p.log_pdf(y))
        .collect();
    log_sum_exp(&terms)
}

/// Precision floor below which the fused Gaussian is rejected.
pub fn precision_floor<T: Scalar>(preds: &[GaussianPrediction<T>]) -> T {
    let max_precision = preds
        .iter()
        .map(|p| p.variance.recip())
        .fold(T::zero(), |a, b| a.max(b));
    precision_floor_from_max(max_precision)
}

/// `max(10⁻¹²·max_k σ_k⁻², 10⁻³⁰⁰)`.
pub(crate) fn precision_floor_from_max<T: Scalar>(max_precision: T) -> T {
    (T::lit(1e-12) * max_precision).max(T::lit(1e-300).max(T::min_positive_value()))
}

/// Generalized product of experts with positive weights.
pub fn gpoe_fuse<T: Scalar>(
    preds: &[GaussianPrediction<T>],
    w: &PositiveWeights<T>,
) -> Result<GaussianPrediction<T>> {
    if preds.len() != w.len() || preds.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} experts but {} weights",
            preds.len(),
            w.len()
        )));
    }
    let mut precision = T::zero();
    let mut weighted_mean = T::zero();
    for (p, &wk) in preds.iter().zip(w.as_slice()) {
        let lam = wk / p.variance;
        precision += lam;
        weighted_mean += lam * p.mean;
    }
    let floor = precision_floor(preds);
    if !(precision > floor) || !precision.is_finite() {
        return Err(Error::PrecisionUnderflow {
            precision: precision.to_f64_lossy(),
            floor: floor.to_f64_lossy(),
        });
    }
    let variance = precision.recip();
    Ok(GaussianPrediction {
        mean: weighted_mean * variance,
        variance,
    })
}

/// Log-density of the gPoE-fused Gaussian at `y`.
pub fn gpoe_logpdf<T: Scalar>(
    preds: &[GaussianPrediction<T>],
    w: &PositiveWeights<T>,
    y: T,
) -> Result<T> {
    Ok(gpoe_fuse(preds, w)?.log_pdf(y))
}
