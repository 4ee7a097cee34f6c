//! Warmup adaptation: dual averaging for the step size and a running
//! variance estimate for the diagonal metric.

/// Nesterov dual averaging of `ln ε` toward a target acceptance statistic.
#[derive(Clone, Debug)]
pub struct DualAveraging {
    target: f64,
    mu: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(initial_step: f64, target: f64) -> Self {
        Self {
            target,
            mu: (10.0 * initial_step).ln(),
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    /// Restarts around a new initial step size.
    pub fn restart(&mut self, initial_step: f64) {
        *self = Self::new(initial_step, self.target);
    }

    /// Feeds one acceptance statistic; returns the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        let accept = if accept_stat.is_finite() {
            accept_stat.min(1.0)
        } else {
            0.0
        };
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    /// Averaged step size used after warmup.
    pub fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford accumulator for per-coordinate variances.
#[derive(Clone, Debug)]
pub(crate) struct VarianceEstimator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl VarianceEstimator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn add(&mut self, x: impl Iterator<Item = f64>) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Sample variances shrunk toward `10⁻³`, as in Stan's diagonal adaptation.
    pub fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|&s| {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }

    pub fn reset(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Warmup phase boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct WarmupSchedule {
    /// Iterations `[first_window_start, second_window_start)` feed the early metric.
    pub first_window_start: usize,
    /// Iterations `[second_window_start, terminal_start)` feed the final metric.
    pub second_window_start: usize,
    pub terminal_start: usize,
    pub adapt_metric: bool,
}

impl WarmupSchedule {
    pub fn new(warmup: usize) -> Self {
        if warmup < 20 {
            return Self {
                first_window_start: warmup,
                second_window_start: warmup,
                terminal_start: warmup,
                adapt_metric: false,
            };
        }
        Self {
            first_window_start: (warmup * 15) / 100,
            second_window_start: warmup / 2,
            terminal_start: warmup - (warmup / 10).max(1),
            adapt_metric: true,
        }
    }

    pub fn collects(&self, iteration: usize) -> bool {
        self.adapt_metric && iteration >= self.first_window_start && iteration < self.terminal_start
    }

    /// True at the last iteration of a metric window.
    pub fn window_end(&self, iteration: usize) -> bool {
        self.adapt_metric
            && (iteration + 1 == self.second_window_start || iteration + 1 == self.terminal_start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_averaging_moves_toward_target() {
        let mut da = DualAveraging::new(1.0, 0.8);
        let mut eps = 1.0;
        for _ in 0..50 {
            eps = da.update(0.2);
        }
        assert!(eps < 1.0);
        let mut da = DualAveraging::new(1.0, 0.8);
        for _ in 0..50 {
            eps = da.update(1.0);
        }
        assert!(eps > 1.0);
        assert!(da.final_step() > 1.0);
    }

    #[test]
    fn variance_estimator_matches_two_pass() {
        let xs = [1.0, 4.0, -2.0, 0.5, 3.0, 3.5];
        let mut est = VarianceEstimator::new(1);
        for &x in &xs {
            est.add(std::iter::once(x));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expect = (n / (n + 5.0)) * var + 1e-3 * 5.0 / (n + 5.0);
        assert!((est.regularized_variance()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn schedule_windows() {
        let s = WarmupSchedule::new(500);
        assert_eq!(
            (
                s.first_window_start,
                s.second_window_start,
                s.terminal_start
            ),
            (75, 250, 450)
        );
        assert!(!s.collects(74) && s.collects(75) && s.collects(449) && !s.collects(450));
        assert!(s.window_end(249) && s.window_end(449));
        assert!(!WarmupSchedule::new(10).adapt_metric);
    }
}
