//! Random Fourier features for the RBF kernel.
//!
//! Frequencies are drawn from the RBF spectral density `N(0, ℓ⁻²I)` and the
//! paired feature map `φ(x) = [cos(ω₁ᵀx), sin(ω₁ᵀx), …]` turns a GP into the
//! linear model `f(x) = φ(x)ᵀψ` with `ψ ~ N(0, σ_ψ²I)`, `σ_ψ² = σ_f²/M`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, Scalar};
use crate::seeds::rng_from_seed;

/// Sampled spectral frequencies defining one RFF-GP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffBasis<T> {
    /// `M × d`, one frequency per row.
    frequencies: Matrix<T>,
    lengthscale: T,
    amplitude: T,
    prior_weight_variance: T,
}

impl<T: Scalar> RffBasis<T> {
    /// Builds a basis from explicit frequencies.
    pub fn from_frequencies(frequencies: Matrix<T>, lengthscale: T, amplitude: T) -> Result<Self> {
        if frequencies.rows() == 0 || frequencies.cols() == 0 {
            return Err(Error::InvalidParameter(
                "RFF basis needs M >= 1 and d >= 1".into(),
            ));
        }
        if !(lengthscale > T::zero()) || !(amplitude > T::zero()) {
            return Err(Error::InvalidParameter(
                "RFF lengthscale and amplitude must be > 0".into(),
            ));
        }
        let m = T::from_usize_lossy(frequencies.rows());
        Ok(Self {
            frequencies,
            lengthscale,
            amplitude,
            prior_weight_variance: amplitude / m,
        })
    }

    /// Returns the same frequencies under a new amplitude.
    pub fn with_amplitude(self, amplitude: T) -> Result<Self> {
        Self::from_frequencies(self.frequencies, self.lengthscale, amplitude)
    }

    /// Number of frequencies `M`.
    pub fn num_frequencies(&self) -> usize {
        self.frequencies.rows()
    }

    /// Length `2M` of the feature vector.
    pub fn num_features(&self) -> usize {
        2 * self.frequencies.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.frequencies.cols()
    }

    pub fn frequencies(&self) -> &Matrix<T> {
        &self.frequencies
    }

    pub fn lengthscale(&self) -> T {
        self.lengthscale
    }

    pub fn amplitude(&self) -> T {
        self.amplitude
    }

    pub fn prior_weight_variance(&self) -> T {
        self.prior_weight_variance
    }

    /// Feature vectors for every row of `x`, as an `n × 2M` matrix.
    pub fn feature_matrix(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(x.rows(), self.num_features());
        for i in 0..x.rows() {
            self.write_features(x.row(i), out.row_mut(i));
        }
        out
    }

    fn write_features(&self, x: &[T], out: &mut [T]) {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        for m in 0..self.num_frequencies() {
            let (s, c) = dot(self.frequencies.row(m), x).sin_cos();
            out[2 * m] = c;
            out[2 * m + 1] = s;
        }
    }
}

/// Linear coefficients `ψ` of an RFF-GP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffWeights<T> {
    psi: Vec<T>,
}

impl<T: Scalar> RffWeights<T> {
    pub fn new(psi: Vec<T>, basis: &RffBasis<T>) -> Result<Self> {
        if psi.len() != basis.num_features() {
            return Err(Error::DimensionMismatch(format!(
                "RFF weights have length {} but the basis has {} features",
                psi.len(),
                basis.num_features()
            )));
        }
        Ok(Self { psi })
    }

    pub fn as_slice(&self) -> &[T] {
        &self.psi
    }
}

/// Draws `M` frequencies i.i.d. from `N(0, ℓ⁻²I_d)`, with unit amplitude.
///
/// Frequencies are a standard-normal draw divided by `ℓ`, so changing the
/// lengthscale under a fixed seed rescales them exactly.
pub fn sample_frequencies<T: Scalar>(
    m: usize,
    lengthscale: T,
    dim: usize,
    seed: u64,
) -> Result<RffBasis<T>> {
    if m == 0 || dim == 0 {
        return Err(Error::InvalidParameter(
            "RFF basis needs M >= 1 and d >= 1".into(),
        ));
    }
    if !(lengthscale > T::zero()) || !lengthscale.is_finite() {
        return Err(Error::InvalidParameter(
            "RFF lengthscale must be > 0".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let data = (0..m * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z) / lengthscale
        })
        .collect();
    RffBasis::from_frequencies(Matrix::from_row_major(m, dim, data), lengthscale, T::one())
}

/// `φ(x)`, interleaving cosine and sine per frequency.
pub fn feature_map<T: Scalar>(x: &[T], basis: &RffBasis<T>) -> Vec<T> {
    let mut out = vec![T::zero(); basis.num_features()];
    basis.write_features(x, &mut out);
    out
}

/// `φ(x)ᵀψ`.
pub fn rff_predict<T: Scalar>(x: &[T], basis: &RffBasis<T>, weights: &RffWeights<T>) -> T {
    dot(&feature_map(x, basis), weights.as_slice())
}

/// `σ_ψ²·φ(x)ᵀφ(x′)`, a Monte Carlo estimate of the RBF kernel.
pub fn approx_kernel<T: Scalar>(x: &[T], x_prime: &[T], basis: &RffBasis<T>) -> T {
    basis.prior_weight_variance() * dot(&feature_map(x, basis), &feature_map(x_prime, basis))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let a: RffBasis<f64> = sample_frequencies(20, 0.3, 2, 11).unwrap();
        let b: RffBasis<f64> = sample_frequencies(20, 0.3, 2, 11).unwrap();
        assert_eq!(a, b);
        let c: RffBasis<f64> = sample_frequencies(20, 0.3, 2, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn frequency_spread_matches_inverse_lengthscale() {
        let b: RffBasis<f64> = sample_frequencies(10_000, 2.0, 1, 3).unwrap();
        let w = b.frequencies().as_slice();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.5).abs() < 0.03 * 0.5, "sd {sd}");
    }

    #[test]
    fn lengthscale_scaling_is_exact() {
        let a: RffBasis<f64> = sample_frequencies(8, 1.0, 3, 5).unwrap();
        let b: RffBasis<f64> = sample_frequencies(8, 2.0, 3, 5).unwrap();
        for (u, v) in a
            .frequencies()
            .as_slice()
            .iter()
            .zip(b.frequencies().as_slice())
        {
            assert_eq!(*v, u / 2.0);
        }
    }

    #[test]
    fn feature_map_examples() {
        let b: RffBasis<f64> = sample_frequencies(5, 0.7, 2, 1).unwrap();
        let phi = feature_map(&[0.0, 0.0], &b);
        for m in 0..5 {
            assert_eq!((phi[2 * m], phi[2 * m + 1]), (1.0, 0.0));
        }
        let phi = feature_map(&[0.3, -1.7], &b);
        let norm2: f64 = phi.iter().map(|v| v * v).sum();
        assert!((norm2 - 5.0).abs() < 1e-12);

        let pi =
            RffBasis::from_frequencies(Matrix::column(&[std::f64::consts::PI]), 1.0, 1.0).unwrap();
        let phi = feature_map(&[0.5], &pi);
        assert!(phi[0].abs() < 1e-15 && (phi[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn predict_examples() {
        let b: RffBasis<f64> = sample_frequencies(3, 0.5, 1, 9).unwrap();
        let zero = RffWeights::new(vec![0.0; 6], &b).unwrap();
        assert_eq!(rff_predict(&[0.4], &b, &zero), 0.0);
        let mut e1 = vec![0.0; 6];
        e1[0] = 1.0;
        let e1 = RffWeights::new(e1, &b).unwrap();
        let w1 = b.frequencies()[(0, 0)];
        assert!((rff_predict(&[0.4], &b, &e1) - (w1 * 0.4).cos()).abs() < 1e-15);
        assert!(RffWeights::new(vec![0.0; 5], &b).is_err());
    }

    #[test]
    fn approx_kernel_is_exact_on_diagonal() {
        let b: RffBasis<f64> = sample_frequencies(40, 0.5, 1, 2).unwrap();
        let b = b.with_amplitude(2.5).unwrap();
        assert!((approx_kernel(&[0.2], &[0.2], &b) - 2.5).abs() < 1e-12);
        assert!((b.prior_weight_variance() - 2.5 / 40.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(sample_frequencies::<f64>(0, 1.0, 1, 0).is_err());
        assert!(sample_frequencies::<f64>(4, 0.0, 1, 0).is_err());
    }
}
