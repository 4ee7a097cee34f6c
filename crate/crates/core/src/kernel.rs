//! Exact GP regression with an RBF kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::GaussianPrediction;
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::Scalar;

/// RBF kernel hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams<T> {
    /// Signal variance σ_f².
    pub amplitude: T,
    pub lengthscale: T,
    /// Observation noise variance σ_n².
    pub noise_variance: T,
}

impl<T: Scalar> KernelParams<T> {
    pub fn new(amplitude: T, lengthscale: T, noise_variance: T) -> Result<Self> {
        let p = Self {
            amplitude,
            lengthscale,
            noise_variance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.amplitude > T::zero()
            && self.lengthscale > T::zero()
            && self.noise_variance >= T::zero()
            && self.amplitude.is_finite()
            && self.lengthscale.is_finite()
            && self.noise_variance.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "kernel needs amplitude > 0, lengthscale > 0, noise >= 0; got {:?}",
                self
            )))
        }
    }

    /// `(ln σ_f², ln ℓ, ln σ_n²)`.
    pub fn to_log(&self) -> [T; 3] {
        [
            self.amplitude.ln(),
            self.lengthscale.ln(),
            self.noise_variance.ln(),
        ]
    }

    pub fn from_log(log: [T; 3]) -> Self {
        Self {
            amplitude: log[0].exp(),
            lengthscale: log[1].exp(),
            noise_variance: log[2].exp(),
        }
    }
}

/// Whether predictive variances describe the latent function or a new observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictiveSpace {
    Latent,
    Observation,
}

#[inline]
fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&u, &v)| {
        let d = u - v;
        acc + d * d
    })
}

/// `σ_f²·exp(−‖x−x′‖²/(2ℓ²))`.
pub fn rbf_eval<T: Scalar>(x: &[T], x_prime: &[T], params: &KernelParams<T>) -> T {
    let r2 = squared_distance(x, x_prime);
    params.amplitude * (-r2 / (T::lit(2.0) * params.lengthscale * params.lengthscale)).exp()
}

/// Gram matrix over the rows of `x`, optionally with σ_n² on the diagonal.
pub fn gram_matrix<T: Scalar>(
    x: &Matrix<T>,
    params: &KernelParams<T>,
    include_noise: bool,
) -> Matrix<T> {
    let n = x.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.amplitude;
        for j in 0..i {
            let v = rbf_eval(x.row(i), x.row(j), params);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    if include_noise {
        k.add_diagonal(params.noise_variance);
    }
    k
}

/// `k(X, x*)` for every row of `x`.
pub fn cross_covariance<T: Scalar>(
    x: &Matrix<T>,
    x_star: &[T],
    params: &KernelParams<T>,
) -> Vec<T> {
    (0..x.rows())
        .map(|i| rbf_eval(x.row(i), x_star, params))
        .collect()
}

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

/// Cholesky of `k`, adding `10⁻⁸·σ_f²` to the diagonal on failure and
/// escalating ×10 up to `10⁻²·σ_f²`. Returns the factor and the jitter used.
pub fn cholesky_with_jitter<T: Scalar>(k: &Matrix<T>, amplitude: T) -> Result<(Cholesky<T>, T)> {
    if let Ok(c) = Cholesky::factor(k) {
        return Ok((c, T::zero()));
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = T::lit(rel) * amplitude;
        let mut kj = k.clone();
        kj.add_diagonal(jitter);
        if let Ok(c) = Cholesky::factor(&kj) {
            return Ok((c, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::CholeskyFailure {
        jitter: (T::lit(JITTER_MAX) * amplitude).to_f64_lossy(),
    })
}

fn check_data<T: Scalar>(x: &Matrix<T>, y: &[T]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs but {} targets",
            x.rows(),
            y.len()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::InvalidParameter(
            "GP needs at least one point".into(),
        ));
    }
    Ok(())
}

/// `−½(yᵀK⁻¹y + ln|K|) − (N/2)·ln 2π` with `K` including the noise variance.
pub fn log_marginal_likelihood<T: Scalar>(
    x: &Matrix<T>,
    y: &[T],
    params: &KernelParams<T>,
) -> Result<T> {
    check_data(x, y)?;
    params.validate()?;
    let k = gram_matrix(x, params, true);
    let (chol, _) = cholesky_with_jitter(&k, params.amplitude)?;
    Ok(lml_from_factor(&chol, y))
}

fn lml_from_factor<T: Scalar>(chol: &Cholesky<T>, y: &[T]) -> T {
    let z = chol.solve_lower(y);
    let quad: T = z.iter().map(|&v| v * v).sum();
    let n = T::from_usize_lossy(y.len());
    -T::lit(0.5) * (quad + chol.log_det()) - n * T::half_ln_2pi()
}

/// Log marginal likelihood and its gradient with respect to
/// `(ln σ_f², ln ℓ, ln σ_n²)`.
pub fn log_marginal_likelihood_with_gradient<T: Scalar>(
    x: &Matrix<T>,
    y: &[T],
    params: &KernelParams<T>,
) -> Result<(T, [T; 3])> {
    check_data(x, y)?;
    params.validate()?;
    let n = x.rows();
    let k_signal = gram_matrix(x, params, false);
    let mut k = k_signal.clone();
    k.add_diagonal(params.noise_variance);
    let (chol, _) = cholesky_with_jitter(&k, params.amplitude)?;
    let value = lml_from_factor(&chol, y);
    let alpha = chol.solve(y);
    let k_inv = chol.inverse();

    // dL/dθ = ½ tr((ααᵀ − K⁻¹) ∂K/∂θ)
    let inv_l2 = (params.lengthscale * params.lengthscale).recip();
    let half = T::lit(0.5);
    let (mut g_amp, mut g_len, mut g_noise) = (T::zero(), T::zero(), T::zero());
    for i in 0..n {
        for j in 0..n {
            let a = alpha[i] * alpha[j] - k_inv[(i, j)];
            let kij = k_signal[(i, j)];
            g_amp += a * kij;
            if i != j {
                let r2 = squared_distance(x.row(i), x.row(j));
                g_len += a * kij * r2 * inv_l2;
            }
        }
        g_noise += alpha[i] * alpha[i] - k_inv[(i, i)];
    }
    Ok((
        value,
        [
            half * g_amp,
            half * g_len,
            half * g_noise * params.noise_variance,
        ],
    ))
}

/// Precomputed exact GP posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactGpPosterior<T> {
    pub train_inputs: Matrix<T>,
    pub cholesky: Cholesky<T>,
    /// Solution of `(K + σ_n²I)·α = y`.
    pub alpha: Vec<T>,
    pub params: KernelParams<T>,
    /// Diagonal jitter added beyond σ_n² to obtain the factor.
    pub jitter: T,
}

pub fn gp_fit<T: Scalar>(
    x: &Matrix<T>,
    y: &[T],
    params: &KernelParams<T>,
) -> Result<ExactGpPosterior<T>> {
    check_data(x, y)?;
    params.validate()?;
    let k = gram_matrix(x, params, true);
    let (cholesky, jitter) = cholesky_with_jitter(&k, params.amplitude)?;
    let alpha = cholesky.solve(y);
    Ok(ExactGpPosterior {
        train_inputs: x.clone(),
        cholesky,
        alpha,
        params: *params,
        jitter,
    })
}

/// Predictive moments at `x_star`. Latent variances are clamped at zero and
/// can be exactly zero at a noiseless training input.
pub fn gp_predict<T: Scalar>(
    posterior: &ExactGpPosterior<T>,
    x_star: &[T],
    space: PredictiveSpace,
) -> GaussianPrediction<T> {
    let k_star = cross_covariance(&posterior.train_inputs, x_star, &posterior.params);
    let mean = crate::scalar::dot(&k_star, &posterior.alpha);
    let v = posterior.cholesky.solve_lower(&k_star);
    let explained: T = v.iter().map(|&a| a * a).sum();
    let mut variance = (posterior.params.amplitude - explained).max(T::zero());
    if space == PredictiveSpace::Observation {
        variance += posterior.params.noise_variance;
    }
    GaussianPrediction { mean, variance }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(a: f64, l: f64, n: f64) -> KernelParams<f64> {
        KernelParams::new(a, l, n).unwrap()
    }

    #[test]
    fn rbf_examples() {
        let p = params(2.5, 0.7, 0.0);
        assert_eq!(rbf_eval(&[0.3, -1.0], &[0.3, -1.0], &p), 2.5);
        let p = params(1.0, 2.0, 0.0);
        let v = rbf_eval(&[0.0], &[2.0], &p);
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!(rbf_eval(&[0.0], &[1e4], &p) == 0.0);
        assert_eq!(rbf_eval(&[0.1], &[0.9], &p), rbf_eval(&[0.9], &[0.1], &p));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(KernelParams::new(0.0, 1.0, 0.1).is_err());
        assert!(KernelParams::new(1.0, -1.0, 0.1).is_err());
        assert!(KernelParams::new(1.0, 1.0, -0.1).is_err());
        assert!(KernelParams::new(1.0, 1.0, 0.0).is_ok());
    }

    #[test]
    fn single_point_gram() {
        let x = Matrix::column(&[0.4]);
        let k = gram_matrix(&x, &params(1.0, 1.0, 0.1), true);
        assert!((k[(0, 0)] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn lml_examples() {
        // K = [[1]] requires σ_f² + σ_n² = 1
        let x = Matrix::column(&[0.0]);
        let p = params(0.5, 1.0, 0.5);
        let v = log_marginal_likelihood(&x, &[0.0], &p).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
        let v = log_marginal_likelihood(&x, &[1.0], &p).unwrap();
        assert!((v + 1.418_938_533_204_672_7).abs() < 1e-12);

        // far-apart points make K = I
        let x2 = Matrix::column(&[0.0, 1e3]);
        let v = log_marginal_likelihood(&x2, &[1.0, 1.0], &p).unwrap();
        assert!((v - 2.0 * -1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn fit_examples() {
        let x = Matrix::column(&[0.0, 0.5, 1.0]);
        let post = gp_fit(&x, &[0.0; 3], &params(1.0, 0.3, 0.1)).unwrap();
        assert!(post.alpha.iter().all(|&a| a == 0.0));

        let x1 = Matrix::column(&[0.0]);
        let post = gp_fit(&x1, &[4.0], &params(1.5, 1.0, 0.5)).unwrap();
        assert!((post.alpha[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn predict_examples() {
        let x = Matrix::column(&[0.0, 0.3]);
        let p = params(1.3, 0.2, 0.05);
        let post = gp_fit(&x, &[1.0, -0.5], &p).unwrap();
        let far = gp_predict(&post, &[100.0], PredictiveSpace::Latent);
        assert!(far.mean.abs() < 1e-12 && (far.variance - 1.3).abs() < 1e-12);
        let far_obs = gp_predict(&post, &[100.0], PredictiveSpace::Observation);
        assert!((far_obs.variance - 1.35).abs() < 1e-12);

        let p0 = params(1.0, 0.5, 0.0);
        let post = gp_fit(&Matrix::column(&[0.0, 1.0]), &[0.7, -0.2], &p0).unwrap();
        let at = gp_predict(&post, &[1.0], PredictiveSpace::Latent);
        assert!((at.mean + 0.2).abs() < 1e-8 && at.variance < 1e-8);
    }

    #[test]
    fn hand_evaluated_prediction() {
        // k** = 1, k* = 0.5, K + σ_n²I = [[1]], y = [2]
        let l = (1.0 / (2.0 * 2f64.ln())).sqrt(); // exp(−1/(2ℓ²)) = 0.5 at distance 1
        let p = params(1.0, l, 0.0);
        let post = gp_fit(&Matrix::column(&[0.0]), &[2.0], &p).unwrap();
        let pr = gp_predict(&post, &[1.0], PredictiveSpace::Latent);
        assert!((pr.mean - 1.0).abs() < 1e-12);
        assert!((pr.variance - 0.75).abs() < 1e-12);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let x = Matrix::column(&[0.05, 0.2, 0.33, 0.5, 0.61, 0.8, 0.95]);
        let y = [0.3, 0.1, -0.4, 0.2, 0.9, 0.0, -0.3];
        let base = params(0.8, 0.25, 0.04);
        let (_, g) = log_marginal_likelihood_with_gradient(&x, &y, &base).unwrap();
        let h = 1e-5;
        for d in 0..3 {
            let mut lp = base.to_log();
            let mut lm = base.to_log();
            lp[d] += h;
            lm[d] -= h;
            let fp = log_marginal_likelihood(&x, &y, &KernelParams::from_log(lp)).unwrap();
            let fm = log_marginal_likelihood(&x, &y, &KernelParams::from_log(lm)).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - g[d]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "{d}: {fd} vs {}",
                g[d]
            );
        }
    }

    #[test]
    fn jitter_rescues_duplicate_inputs() {
        let x = Matrix::column(&[0.5, 0.5, 0.5]);
        let post = gp_fit(&x, &[1.0, 1.0, 1.0], &params(1.0, 0.3, 0.0)).unwrap();
        assert!(post.jitter > 0.0);
    }
}
