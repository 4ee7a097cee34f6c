//! Convergence diagnostics and Monte Carlo predictive averaging.

use super::PosteriorSamples;
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Split-R̂ of a `chains × draws` trace.
///
/// Zero within-chain variance yields 1 when the chains also agree and `+∞`
/// when they sit at different constants.
pub fn split_rhat(trace: &[Vec<f64>]) -> Result<f64> {
    let chains = trace.len();
    let draws = trace.iter().map(Vec::len).min().unwrap_or(0);
    if chains < 2 || draws < 4 {
        return Err(Error::InsufficientChains { chains, draws });
    }
    let half = draws / 2;
    let mut pieces: Vec<&[f64]> = Vec::with_capacity(2 * chains);
    for c in trace {
        pieces.push(&c[..half]);
        pieces.push(&c[draws - half..draws]);
    }
    let n = half as f64;
    let means: Vec<f64> = pieces.iter().map(|p| mean(p)).collect();
    let within = mean(
        &pieces
            .iter()
            .map(|p| sample_variance(p))
            .collect::<Vec<_>>(),
    );
    let between = n * sample_variance(&means);
    if !(within > 0.0) {
        return Ok(if between > 0.0 { f64::INFINITY } else { 1.0 });
    }
    let var_plus = (n - 1.0) / n * within + between / n;
    Ok((var_plus / within).sqrt())
}

/// Split-R̂ for every coordinate.
pub fn potential_scale_reduction<T: Scalar>(samples: &PosteriorSamples<T>) -> Result<Vec<f64>> {
    (0..samples.dim())
        .map(|d| split_rhat(&samples.coordinate_trace(d)))
        .collect()
}

fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let centered: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..n)
        .map(|lag| {
            centered[..n - lag]
                .iter()
                .zip(&centered[lag..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

/// Multi-chain effective sample size using Geyer's initial monotone sequence.
pub fn effective_sample_size(trace: &[Vec<f64>]) -> f64 {
    let chains = trace.len();
    let n = trace.iter().map(Vec::len).min().unwrap_or(0);
    if chains == 0 || n < 4 {
        return (chains * n) as f64;
    }
    let acov: Vec<Vec<f64>> = trace.iter().map(|c| autocovariance(&c[..n])).collect();
    let nf = n as f64;
    let chain_means: Vec<f64> = trace.iter().map(|c| mean(&c[..n])).collect();
    let mean_var = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / chains as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if chains > 1 {
        var_plus += sample_variance(&chain_means);
    }
    if !(var_plus > 0.0) {
        return (chains * n) as f64;
    }
    let rho = |lag: usize| -> f64 {
        let mean_acov = acov.iter().map(|a| a[lag]).sum::<f64>() / chains as f64;
        1.0 - (mean_var - mean_acov) / var_plus
    };

    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut s = 1;
    while s + 2 < n && even + odd > 0.0 {
        even = rho(s + 1);
        odd = rho(s + 2);
        if even + odd >= 0.0 {
            rho_hat[s + 1] = even;
            rho_hat[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s.min(n - 1);
    // enforce a monotone sequence of paired sums
    let mut k = 1;
    while k + 2 <= max_s {
        let prev = rho_hat[k - 1] + rho_hat[k];
        if rho_hat[k + 1] + rho_hat[k + 2] > prev {
            rho_hat[k + 1] = prev / 2.0;
            rho_hat[k + 2] = prev / 2.0;
        }
        k += 2;
    }
    let tau = -1.0 + 2.0 * rho_hat[..=max_s].iter().sum::<f64>();
    let total = (chains * n) as f64;
    let tau = tau.max(1.0 / total.log10().max(1.0));
    total / tau
}

/// Standard error of the posterior mean estimate, `sd / √ESS`.
pub fn monte_carlo_standard_error(trace: &[Vec<f64>]) -> f64 {
    let all: Vec<f64> = trace.iter().flatten().copied().collect();
    sample_variance(&all).sqrt() / effective_sample_size(trace).sqrt()
}

/// `ln[(1/N) Σᵢ p(y* | x*, ηᵢ)]` over all draws.
pub fn posterior_predictive_logpdf<T, F>(
    samples: &PosteriorSamples<T>,
    per_draw_logpdf: F,
    x_star: &[T],
    y_star: T,
) -> T
where
    T: Scalar,
    F: Fn(&[T], T, &[T]) -> T,
{
    let terms: Vec<T> = samples
        .iter_draws()
        .map(|eta| per_draw_logpdf(eta, y_star, x_star))
        .collect();
    mean_of_exp_log(&terms)
}

/// `ln((1/N) Σ exp(lᵢ))`.
pub fn mean_of_exp_log<T: Scalar>(log_terms: &[T]) -> T {
    log_sum_exp(log_terms) - T::from_usize_lossy(log_terms.len()).ln()
}
