mod common;

use common::{finite_difference, fixture, normal, relative_sup_error};
use gpfuse::fusion::GaussianPrediction;
use gpfuse::linalg::Matrix;
use gpfuse::models::{
    posterior_mean_weight_mixture, predictive_logpdf, FusionModel, FusionModelSpec,
    LatentHyperparameters, Method,
};
use gpfuse::sampler::PosteriorSamples;
use gpfuse::seeds::rng_from_seed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn prior_draw(spec: &FusionModelSpec<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut eta = vec![0.0; spec.dim()];
    for (slice, latent) in spec.layout().slices.iter().zip(&spec.latents) {
        let sd = latent.basis.prior_weight_variance().sqrt();
        for v in &mut eta[slice.range()] {
            *v = sd * normal(rng);
        }
    }
    eta
}

#[test]
fn gradients_match_finite_differences() {
    for method in Method::ALL {
        for k in 1..=3 {
            let model = fixture(method, k, 4, 16, 31 + k as u64);
            let mut rng = rng_from_seed(k as u64);
            for _ in 0..20 {
                let eta: Vec<f64> = (0..model.spec().dim())
                    .map(|_| 0.5 * normal(&mut rng))
                    .collect();
                let mut g = vec![0.0; eta.len()];
                model.log_posterior(&eta, Some(&mut g)).unwrap();
                let fd = finite_difference(|e| model.log_posterior(e, None).unwrap(), &eta, 1e-5);
                let err = relative_sup_error(&g, &fd);
                assert!(err <= 1e-4, "{method} K={k}: relative error {err}");
            }
        }
    }
}

#[test]
fn rotated_coordinates_preserve_the_density() {
    for method in Method::ALL {
        let model = fixture(method, 2, 5, 30, 3);
        let rotations = model.feature_rotations();
        let rotated = model.rotated(&rotations).unwrap();
        let mut rng = rng_from_seed(6);
        let z: Vec<f64> = (0..model.spec().dim())
            .map(|_| 0.3 * normal(&mut rng))
            .collect();
        let mut eta = z.clone();
        for (q, slice) in rotations.iter().zip(model.spec().layout().slices) {
            let psi = q.mat_vec(&z[slice.range()]);
            eta[slice.range()].copy_from_slice(&psi);
        }
        let a = model.log_posterior(&eta, None).unwrap();
        let b = rotated.log_posterior(&z, None).unwrap();
        assert!((a - b).abs() <= 1e-9 * a.abs(), "{method}: {a} vs {b}");
    }
}

#[test]
fn single_expert_mixture_is_the_heteroscedastic_baseline() {
    let hyper = LatentHyperparameters::default();
    let mut rng = rng_from_seed(40);
    let xs: Vec<f64> = (0..25).map(|_| rng.gen::<f64>()).collect();
    let y: Vec<f64> = xs.iter().map(|x| x * x + 0.1 * normal(&mut rng)).collect();
    let x = Matrix::column(&xs);
    let het = FusionModelSpec::sample(Method::Hetgp, 1, 6, 1, &hyper, 2).unwrap();
    let moe = FusionModelSpec::from_latents(Method::Mogpe, 1, het.latents.clone()).unwrap();
    let a = FusionModel::new(het, &x, &y, None).unwrap();
    let b = FusionModel::new(moe, &x, &y, None).unwrap();
    for _ in 0..10 {
        let eta: Vec<f64> = (0..a.spec().dim()).map(|_| normal(&mut rng)).collect();
        assert_eq!(
            a.log_posterior(&eta, None).unwrap(),
            b.log_posterior(&eta, None).unwrap()
        );
    }
}

#[test]
fn draw_averaged_stacking_equals_mixture_of_averaged_weights() {
    let spec = FusionModelSpec::sample(Method::Bhs, 3, 5, 1, &LatentHyperparameters::default(), 8)
        .unwrap();
    let mut rng = rng_from_seed(8);
    let draws: Vec<Vec<f64>> = (0..40).map(|_| prior_draw(&spec, &mut rng)).collect();
    let samples = PosteriorSamples::from_draws(spec.dim(), vec![draws]);
    let experts = vec![
        GaussianPrediction::new(-0.5, 0.2).unwrap(),
        GaussianPrediction::new(0.1, 0.05).unwrap(),
        GaussianPrediction::new(1.0, 0.4).unwrap(),
    ];
    for (xq, yq) in [(0.1, 0.0), (0.6, 0.9), (0.95, -1.2)] {
        let averaged = predictive_logpdf(&spec, &samples, &[xq], yq, Some(&experts))
            .unwrap()
            .log_density;
        let mixture = posterior_mean_weight_mixture(&spec, &samples, &[xq], &experts).unwrap();
        assert!((averaged - mixture.log_pdf(yq)).abs() < 1e-10);
    }
}

#[test]
fn three_draw_predictive_matches_hand_sum() {
    let spec = FusionModelSpec::sample(
        Method::Mogpe,
        2,
        3,
        1,
        &LatentHyperparameters::default(),
        12,
    )
    .unwrap();
    let mut rng = rng_from_seed(12);
    let draws: Vec<Vec<f64>> = (0..3).map(|_| prior_draw(&spec, &mut rng)).collect();
    let samples = PosteriorSamples::from_draws(spec.dim(), vec![draws.clone()]);
    for (xq, yq) in [(0.2, 0.3), (0.5, -0.4), (0.8, 1.1)] {
        let by_hand = (draws
            .iter()
            .map(|d| {
                spec.draw_predictive(d, &[xq], None)
                    .unwrap()
                    .log_pdf(yq)
                    .exp()
            })
            .sum::<f64>()
            / 3.0)
            .ln();
        let value = predictive_logpdf(&spec, &samples, &[xq], yq, None).unwrap();
        assert!((value.log_density - by_hand).abs() < 1e-10);
        assert_eq!((value.lost_draws, value.total_draws), (0, 3));
    }
}

#[test]
fn log_linear_pooling_gives_heteroscedastic_prior_predictive() {
    let experts = vec![
        GaussianPrediction::new(0.0, 0.3).unwrap(),
        GaussianPrediction::new(0.5, 0.3).unwrap(),
    ];
    let grid: Vec<f64> = (0..21).map(|i| i as f64 / 20.0).collect();
    for method in [Method::Pbhs, Method::Pogpe] {
        let spec = FusionModelSpec::sample(method, 2, 10, 1, &LatentHyperparameters::default(), 4)
            .unwrap();
        let mut rng = rng_from_seed(4);
        let eta = prior_draw(&spec, &mut rng);
        let variances: Vec<f64> = grid
            .iter()
            .map(|&x| {
                let e = method.uses_experts().then_some(experts.as_slice());
                spec.draw_predictive(&eta, &[x], e).unwrap().variance()
            })
            .collect();
        let lo = variances.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = variances.iter().copied().fold(0.0, f64::max);
        assert!(hi / lo > 1.01, "{method}: variance range [{lo}, {hi}]");
    }
}

#[test]
fn single_precision_tracks_double_precision() {
    let model = fixture(Method::Pogpe, 2, 4, 16, 5);
    let spec32: FusionModelSpec<f32> =
        serde_json::from_value(serde_json::to_value(model.spec()).unwrap()).unwrap();
    let mut rng = rng_from_seed(2);
    let xs: Vec<f64> = (0..16).map(|_| rng.gen::<f64>()).collect();
    let y: Vec<f64> = xs.iter().map(|x| x.cos()).collect();
    let m64 = FusionModel::new(model.spec().clone(), &Matrix::column(&xs), &y, None).unwrap();
    let xs32: Vec<f32> = xs.iter().map(|&v| v as f32).collect();
    let y32: Vec<f32> = y.iter().map(|&v| v as f32).collect();
    let m32 = FusionModel::new(spec32, &Matrix::column(&xs32), &y32, None).unwrap();
    let eta: Vec<f64> = (0..m64.spec().dim())
        .map(|_| 0.2 * normal(&mut rng))
        .collect();
    let eta32: Vec<f32> = eta.iter().map(|&v| v as f32).collect();
    let a = m64.log_posterior(&eta, None).unwrap();
    let b = m32.log_posterior(&eta32, None).unwrap() as f64;
    assert!((a - b).abs() < 1e-3 * a.abs().max(1.0), "{a} vs {b}");
}
