//! Multinomial NUTS with the generalized no-U-turn criterion.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::adaptation::{DualAveraging, VarianceEstimator, WarmupSchedule};
use super::{ChainConfig, ChainStats, LogDensityModel, PosteriorSamples};
use crate::error::{Error, Result};
use crate::scalar::{log_add_exp, Scalar};
use crate::seeds::{derive_seed, rng_from_seed, stream};

#[derive(Clone, Debug)]
struct PhasePoint<T> {
    q: Vec<T>,
    p: Vec<T>,
    grad: Vec<T>,
    logp: T,
}

struct Integrator<'a, T, M: ?Sized> {
    model: &'a M,
    inv_metric: Vec<T>,
    step: T,
}

impl<T: Scalar, M: LogDensityModel<T> + ?Sized> Integrator<'_, T, M> {
    fn kinetic(&self, p: &[T]) -> T {
        let half = T::lit(0.5);
        p.iter()
            .zip(&self.inv_metric)
            .fold(T::zero(), |acc, (&pi, &m)| acc + half * m * pi * pi)
    }

    fn hamiltonian(&self, z: &PhasePoint<T>) -> T {
        let h = -z.logp + self.kinetic(&z.p);
        if h.is_nan() {
            T::infinity()
        } else {
            h
        }
    }

    fn velocity(&self, p: &[T]) -> Vec<T> {
        p.iter()
            .zip(&self.inv_metric)
            .map(|(&a, &m)| a * m)
            .collect()
    }

    fn leapfrog(&self, z: &mut PhasePoint<T>, step: T) {
        let half = step * T::lit(0.5);
        for (p, &g) in z.p.iter_mut().zip(&z.grad) {
            *p += half * g;
        }
        for ((q, &p), &m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += step * m * p;
        }
        z.logp = self.model.log_density_and_gradient(&z.q, &mut z.grad);
        if !z.logp.is_finite() || z.grad.iter().any(|g| !g.is_finite()) {
            z.logp = T::neg_infinity();
            return;
        }
        for (p, &g) in z.p.iter_mut().zip(&z.grad) {
            *p += half * g;
        }
    }

    fn sample_momentum(&self, rng: &mut ChaCha8Rng, p: &mut [T]) {
        for (pi, &m) in p.iter_mut().zip(&self.inv_metric) {
            let z: f64 = StandardNormal.sample(rng);
            *pi = T::lit(z) / m.sqrt();
        }
    }
}

fn no_u_turn<T: Scalar>(p_sharp_minus: &[T], p_sharp_plus: &[T], rho: &[T]) -> bool {
    let a = crate::scalar::dot(p_sharp_plus, rho);
    let b = crate::scalar::dot(p_sharp_minus, rho);
    a > T::zero() && b > T::zero()
}

fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

struct TreeBuilder<'a, 'b, T, M: ?Sized> {
    integrator: &'a Integrator<'b, T, M>,
    h0: T,
    max_energy_error: T,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

impl<T: Scalar, M: LogDensityModel<T> + ?Sized> TreeBuilder<'_, '_, T, M> {
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        depth: usize,
        z: &mut PhasePoint<T>,
        z_propose: &mut PhasePoint<T>,
        p_sharp_beg: &mut Vec<T>,
        p_sharp_end: &mut Vec<T>,
        rho: &mut [T],
        p_beg: &mut Vec<T>,
        p_end: &mut Vec<T>,
        direction: T,
        log_sum_weight: &mut T,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        if depth == 0 {
            let step = direction * self.integrator.step;
            self.integrator.leapfrog(z, step);
            self.n_leapfrog += 1;
            let h = self.integrator.hamiltonian(z);
            if h - self.h0 > self.max_energy_error || !h.is_finite() {
                self.divergent = true;
                return false;
            }
            let log_w = self.h0 - h;
            *log_sum_weight = log_add_exp(*log_sum_weight, log_w);
            self.sum_metro_prob += if log_w > T::zero() {
                1.0
            } else {
                log_w.exp().to_f64_lossy()
            };
            z_propose.clone_from(z);
            let v = self.integrator.velocity(&z.p);
            p_sharp_beg.clone_from(&v);
            *p_sharp_end = v;
            for (r, &p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return true;
        }

        let dim = z.q.len();
        let mut p_sharp_left_end = vec![T::zero(); dim];
        let mut p_left_end = vec![T::zero(); dim];
        let mut rho_left = vec![T::zero(); dim];
        let mut lsw_left = T::neg_infinity();
        let mut z_propose_left = z.clone();
        if !self.build(
            depth - 1,
            z,
            &mut z_propose_left,
            p_sharp_beg,
            &mut p_sharp_left_end,
            &mut rho_left,
            p_beg,
            &mut p_left_end,
            direction,
            &mut lsw_left,
            rng,
        ) {
            return false;
        }

        let mut p_sharp_right_beg = vec![T::zero(); dim];
        let mut p_right_beg = vec![T::zero(); dim];
        let mut rho_right = vec![T::zero(); dim];
        let mut lsw_right = T::neg_infinity();
        let mut z_propose_right = z.clone();
        if !self.build(
            depth - 1,
            z,
            &mut z_propose_right,
            &mut p_sharp_right_beg,
            p_sharp_end,
            &mut rho_right,
            &mut p_right_beg,
            p_end,
            direction,
            &mut lsw_right,
            rng,
        ) {
            return false;
        }

        let lsw_subtree = log_add_exp(lsw_left, lsw_right);
        *log_sum_weight = log_add_exp(*log_sum_weight, lsw_subtree);
        let accept_prob = (lsw_right - lsw_subtree).exp().to_f64_lossy();
        if rng.gen::<f64>() < accept_prob {
            *z_propose = z_propose_right;
        } else {
            *z_propose = z_propose_left;
        }

        let rho_subtree = add(&rho_left, &rho_right);
        let mut persist = no_u_turn(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_ext = add(&rho_left, &p_right_beg);
        persist &= no_u_turn(p_sharp_beg, &p_sharp_right_beg, &rho_ext);
        let rho_ext = add(&rho_right, p_left_end.as_slice());
        persist &= no_u_turn(&p_sharp_left_end, p_sharp_end, &rho_ext);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += *s;
        }
        persist
    }
}

struct Transition {
    accept_stat: f64,
    depth: usize,
    divergent: bool,
}

fn transition<T: Scalar, M: LogDensityModel<T> + ?Sized>(
    integrator: &Integrator<'_, T, M>,
    current: &mut PhasePoint<T>,
    max_depth: usize,
    max_energy_error: f64,
    rng: &mut ChaCha8Rng,
) -> Transition {
    integrator.sample_momentum(rng, &mut current.p);
    let dim = current.q.len();
    let mut z_fwd = current.clone();
    let mut z_bck = current.clone();
    let mut z_sample = current.clone();
    let mut z_propose = current.clone();

    let v0 = integrator.velocity(&current.p);
    let mut p_fwd_fwd = current.p.clone();
    let mut p_sharp_fwd_fwd = v0.clone();
    let mut p_fwd_bck = current.p.clone();
    let mut p_sharp_fwd_bck = v0.clone();
    let mut p_bck_fwd = current.p.clone();
    let mut p_sharp_bck_fwd = v0.clone();
    let mut p_bck_bck = current.p.clone();
    let mut p_sharp_bck_bck = v0;
    let mut rho = current.p.clone();

    let mut builder = TreeBuilder {
        integrator,
        h0: integrator.hamiltonian(current),
        max_energy_error: T::lit(max_energy_error),
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };
    let mut log_sum_weight = T::zero();
    let mut depth = 0;

    while depth < max_depth {
        let mut rho_fwd = vec![T::zero(); dim];
        let mut rho_bck = vec![T::zero(); dim];
        let mut lsw_subtree = T::neg_infinity();
        let valid = if rng.gen::<f64>() > 0.5 {
            rho_bck.clone_from(&rho);
            p_bck_fwd.clone_from(&p_fwd_bck);
            p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
            let mut z = z_fwd.clone();
            let ok = builder.build(
                depth,
                &mut z,
                &mut z_propose,
                &mut p_sharp_fwd_bck,
                &mut p_sharp_fwd_fwd,
                &mut rho_fwd,
                &mut p_fwd_bck,
                &mut p_fwd_fwd,
                T::one(),
                &mut lsw_subtree,
                rng,
            );
            z_fwd = z;
            ok
        } else {
            rho_fwd.clone_from(&rho);
            p_fwd_bck.clone_from(&p_bck_fwd);
            p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
            let mut z = z_bck.clone();
            let ok = builder.build(
                depth,
                &mut z,
                &mut z_propose,
                &mut p_sharp_bck_fwd,
                &mut p_sharp_bck_bck,
                &mut rho_bck,
                &mut p_bck_fwd,
                &mut p_bck_bck,
                -T::one(),
                &mut lsw_subtree,
                rng,
            );
            z_bck = z;
            ok
        };
        if !valid {
            break;
        }
        depth += 1;

        if lsw_subtree > log_sum_weight {
            z_sample.clone_from(&z_propose);
        } else {
            let accept_prob = (lsw_subtree - log_sum_weight).exp().to_f64_lossy();
            if rng.gen::<f64>() < accept_prob {
                z_sample.clone_from(&z_propose);
            }
        }
        log_sum_weight = log_add_exp(log_sum_weight, lsw_subtree);

        rho = add(&rho_bck, &rho_fwd);
        let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        let rho_ext = add(&rho_bck, &p_fwd_bck);
        persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_ext);
        let rho_ext = add(&rho_fwd, &p_bck_fwd);
        persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_ext);
        if !persist {
            break;
        }
    }

    *current = z_sample;
    let accept_stat = if builder.n_leapfrog > 0 {
        builder.sum_metro_prob / builder.n_leapfrog as f64
    } else {
        0.0
    };
    Transition {
        accept_stat,
        depth,
        divergent: builder.divergent,
    }
}

/// Doubles or halves the step until one leapfrog step crosses 80% acceptance.
fn heuristic_step_size<T: Scalar, M: LogDensityModel<T> + ?Sized>(
    integrator: &mut Integrator<'_, T, M>,
    start: &PhasePoint<T>,
    mut step: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let threshold = 0.8f64.ln();
    let mut direction = 0i32;
    for _ in 0..100 {
        let mut z = start.clone();
        integrator.sample_momentum(rng, &mut z.p);
        let h0 = integrator.hamiltonian(&z);
        integrator.step = T::lit(step);
        integrator.leapfrog(&mut z, T::lit(step));
        let h = integrator.hamiltonian(&z);
        let delta = (h0 - h).to_f64_lossy();
        let delta = if delta.is_nan() {
            f64::NEG_INFINITY
        } else {
            delta
        };
        if direction == 0 {
            direction = if delta > threshold { 1 } else { -1 };
        }
        if (direction == 1 && !(delta > threshold)) || (direction == -1 && !(delta < threshold)) {
            break;
        }
        step = if direction == 1 {
            step * 2.0
        } else {
            step * 0.5
        };
        if !(1e-10..=1e7).contains(&step) {
            step = step.clamp(1e-10, 1e7);
            break;
        }
    }
    step
}

fn initial_point<T: Scalar, M: LogDensityModel<T> + ?Sized>(
    model: &M,
    init: &[T],
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PhasePoint<T>> {
    let dim = init.len();
    let attempts = if jitter > 0.0 { 100 } else { 1 };
    for _ in 0..attempts {
        let q: Vec<T> = init
            .iter()
            .map(|&v| {
                if jitter > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    v + T::lit(jitter * z)
                } else {
                    v
                }
            })
            .collect();
        let mut grad = vec![T::zero(); dim];
        let logp = model.log_density_and_gradient(&q, &mut grad);
        if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(PhasePoint {
                q,
                p: vec![T::zero(); dim],
                grad,
                logp,
            });
        }
    }
    Err(Error::NonFiniteDensity)
}

type ChainOutput<T> = (Vec<T>, Vec<T>, ChainStats);

fn run_chain<T: Scalar, M: LogDensityModel<T> + ?Sized>(
    model: &M,
    init: &[T],
    config: &ChainConfig,
    chain: usize,
) -> Result<ChainOutput<T>> {
    let dim = model.dim();
    let mut rng = rng_from_seed(derive_seed(config.seed, &[stream::CHAIN, chain as u64]));
    let mut current = initial_point(model, init, config.init_jitter, &mut rng)?;

    let mut integrator = Integrator {
        model,
        inv_metric: vec![T::one(); dim],
        step: T::one(),
    };
    let mut step = heuristic_step_size(&mut integrator, &current, 1.0, &mut rng);
    let mut dual = DualAveraging::new(step, config.target_accept);
    let schedule = WarmupSchedule::new(config.warmup_draws);
    let mut variance = VarianceEstimator::new(dim);

    for it in 0..config.warmup_draws {
        check_deadline(config)?;
        integrator.step = T::lit(step);
        let t = transition(
            &integrator,
            &mut current,
            config.max_tree_depth,
            config.max_energy_error,
            &mut rng,
        );
        step = dual.update(t.accept_stat);
        if schedule.collects(it) {
            variance.add(current.q.iter().map(|v| v.to_f64_lossy()));
        }
        if schedule.window_end(it) && variance.count() > 2 {
            integrator.inv_metric = variance
                .regularized_variance()
                .into_iter()
                .map(T::lit)
                .collect();
            variance.reset();
            step = heuristic_step_size(&mut integrator, &current, step, &mut rng);
            dual.restart(step);
        }
    }
    if config.warmup_draws > 0 {
        step = dual.final_step();
    }
    integrator.step = T::lit(step);

    let mut draws = Vec::with_capacity(config.kept_draws * dim);
    let mut log_density = Vec::with_capacity(config.kept_draws);
    let mut divergences = 0;
    let mut accept_total = 0.0;
    let mut depth_total = 0usize;
    let mut max_depth_hits = 0;
    for _ in 0..config.kept_draws {
        check_deadline(config)?;
        let t = transition(
            &integrator,
            &mut current,
            config.max_tree_depth,
            config.max_energy_error,
            &mut rng,
        );
        divergences += usize::from(t.divergent);
        accept_total += t.accept_stat;
        depth_total += t.depth;
        max_depth_hits += usize::from(t.depth >= config.max_tree_depth);
        draws.extend_from_slice(&current.q);
        log_density.push(current.logp);
    }
    let n = config.kept_draws as f64;
    let stats = ChainStats {
        step_size: step,
        divergences,
        mean_accept: accept_total / n,
        mean_tree_depth: depth_total as f64 / n,
        max_depth_hits,
        inverse_metric: integrator
            .inv_metric
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect(),
    };
    Ok((draws, log_density, stats))
}

fn check_deadline(config: &ChainConfig) -> Result<()> {
    match config.deadline {
        Some(d) if std::time::Instant::now() > d => Err(Error::Timeout),
        _ => Ok(()),
    }
}

/// Runs `config.chains` NUTS chains from `init` (plus optional jitter).
pub fn nuts_sample<T, M>(model: &M, init: &[T], config: &ChainConfig) -> Result<PosteriorSamples<T>>
where
    T: Scalar,
    M: LogDensityModel<T> + ?Sized,
{
    config.validate()?;
    if init.len() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "init has length {} but the model has dimension {}",
            init.len(),
            model.dim()
        )));
    }
    let chains: Vec<ChainOutput<T>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(model, init, config, c))
        .collect::<Result<_>>()?;
    let samples = PosteriorSamples::from_chains(model.dim(), chains);
    if samples.total_divergences() == samples.total_draws() {
        return Err(Error::AllDivergent);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::FnDensity;

    fn std_normal(dim: usize) -> FnDensity<impl Fn(&[f64], &mut [f64]) -> f64 + Sync> {
        FnDensity::new(dim, |x: &[f64], g: &mut [f64]| {
            let mut lp = 0.0;
            for (gi, &xi) in g.iter_mut().zip(x) {
                *gi = -xi;
                lp -= 0.5 * xi * xi;
            }
            lp
        })
    }

    #[test]
    fn deterministic_given_seed() {
        let model = std_normal(3);
        let cfg = ChainConfig {
            chains: 2,
            warmup_draws: 60,
            kept_draws: 40,
            seed: 99,
            init_jitter: 0.1,
            ..ChainConfig::default()
        };
        let a = nuts_sample(&model, &[0.0; 3], &cfg).unwrap();
        let b = nuts_sample(&model, &[0.0; 3], &cfg).unwrap();
        assert_eq!(a, b);
        let c = nuts_sample(&model, &[0.0; 3], &ChainConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_non_finite_start() {
        let model = FnDensity::new(1, |x: &[f64], g: &mut [f64]| {
            g[0] = 0.0;
            if x[0] > 0.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        let cfg = ChainConfig {
            chains: 1,
            ..ChainConfig::default()
        };
        assert_eq!(
            nuts_sample(&model, &[-1.0], &cfg),
            Err(Error::NonFiniteDensity)
        );
    }

    #[test]
    fn rejects_bad_config() {
        let model = std_normal(1);
        let cfg = ChainConfig {
            target_accept: 1.0,
            ..ChainConfig::default()
        };
        assert!(nuts_sample(&model, &[0.0], &cfg).is_err());
        let cfg = ChainConfig {
            chains: 0,
            ..ChainConfig::default()
        };
        assert!(nuts_sample(&model, &[0.0], &cfg).is_err());
    }

    #[test]
    fn leapfrog_is_reversible() {
        let model = std_normal(2);
        let integrator = Integrator {
            model: &model,
            inv_metric: vec![1.0, 2.0],
            step: 0.3,
        };
        let mut grad = vec![0.0; 2];
        let logp = model.log_density_and_gradient(&[0.4, -0.2], &mut grad);
        let start = PhasePoint {
            q: vec![0.4, -0.2],
            p: vec![0.7, 0.1],
            grad,
            logp,
        };
        let mut z = start.clone();
        for _ in 0..5 {
            integrator.leapfrog(&mut z, 0.3);
        }
        for _ in 0..5 {
            integrator.leapfrog(&mut z, -0.3);
        }
        for (a, b) in z.q.iter().zip(&start.q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn runs_in_single_precision() {
        let model = FnDensity::new(2, |x: &[f32], g: &mut [f32]| {
            g[0] = -x[0];
            g[1] = -x[1];
            -0.5 * (x[0] * x[0] + x[1] * x[1])
        });
        let cfg = ChainConfig {
            chains: 2,
            warmup_draws: 200,
            kept_draws: 300,
            seed: 3,
            ..ChainConfig::default()
        };
        let s = nuts_sample(&model, &[0.0f32; 2], &cfg).unwrap();
        let mean: f64 = s.coordinate_trace(0).iter().flatten().sum::<f64>() / 600.0;
        assert!(mean.abs() < 0.3, "{mean}");
    }
}
