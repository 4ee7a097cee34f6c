//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use gpfuse::fusion::GaussianPrediction;
use gpfuse::kernel::KernelParams;
use gpfuse::linalg::Matrix;
use gpfuse::models::{FusionModel, FusionModelSpec, LatentHyperparameters, Method};
use gpfuse::seeds::rng_from_seed;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Dense covariance built straight from the kernel formula.
pub fn dense_kernel(x: &[f64], x2: &[f64], p: &KernelParams<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), x2.len(), |i, j| {
        let d = x[i] - x2[j];
        p.amplitude * (-d * d / (2.0 * p.lengthscale * p.lengthscale)).exp()
    })
}

/// Log marginal likelihood through an LU decomposition of the full covariance.
pub fn dense_lml(x: &[f64], y: &[f64], p: &KernelParams<f64>) -> f64 {
    let n = x.len();
    let k = dense_kernel(x, x, p) + DMatrix::identity(n, n) * p.noise_variance;
    let lu = k.clone().lu();
    let yv = DVector::from_column_slice(y);
    let alpha = lu.solve(&yv).unwrap();
    let log_det = lu.determinant().ln();
    -0.5 * yv.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Observation-space predictive moments via an explicit inverse.
pub fn dense_predict(x: &[f64], y: &[f64], p: &KernelParams<f64>, x_star: f64) -> (f64, f64) {
    let n = x.len();
    let k = dense_kernel(x, x, p) + DMatrix::identity(n, n) * p.noise_variance;
    let k_inv = k.try_inverse().unwrap();
    let ks = dense_kernel(x, &[x_star], p);
    let mean = (ks.transpose() * &k_inv * DVector::from_column_slice(y))[0];
    let var = p.amplitude - (ks.transpose() * &k_inv * &ks)[(0, 0)] + p.noise_variance;
    (mean, var)
}

/// Central-difference gradient.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖∞ / ‖b‖∞`, or the absolute error when `b` vanishes.
pub fn relative_sup_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Random expert predictions, `n × k`.
pub fn random_experts(
    n: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<GaussianPrediction<f64>>> {
    (0..n)
        .map(|_| {
            (0..k)
                .map(|_| GaussianPrediction::new(normal(rng), rng.gen_range(0.05..1.0)).unwrap())
                .collect()
        })
        .collect()
}

/// A fusion model on `n` random 1-d points.
pub fn fixture(method: Method, k: usize, m: usize, n: usize, seed: u64) -> FusionModel<f64> {
    let mut rng = rng_from_seed(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let y: Vec<f64> = xs
        .iter()
        .map(|x| (5.0 * x).sin() + 0.3 * normal(&mut rng))
        .collect();
    let spec = FusionModelSpec::sample(
        method,
        k,
        m,
        1,
        &LatentHyperparameters::default(),
        seed ^ 0xabc,
    )
    .unwrap();
    let experts = method
        .uses_experts()
        .then(|| random_experts(n, k, &mut rng));
    FusionModel::new(spec, &Matrix::column(&xs), &y, experts).unwrap()
}
