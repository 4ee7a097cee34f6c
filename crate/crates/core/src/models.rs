//! Fusion models as log-posteriors over RFF-GP coefficients.
//!
//! Every latent function (a softmax logit, a log-weight, an expert mean or
//! an expert log-scale) is an RFF-GP `f(x) = φ(x)ᵀψ + offset` with its own
//! basis, and the flat parameter vector `η` concatenates all the `ψ`.
//! The likelihood at a point depends on `η` only through the latent values
//! at that point, so gradients are assembled from per-point derivatives
//! with respect to those values.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    gpoe_fuse, precision_floor_from_max, softmax, GaussianPrediction, MixturePdf, PositiveWeights,
    SimplexWeights,
};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::rff::{feature_map, sample_frequencies, RffBasis};
use crate::sampler::{
    mean_of_exp_log, nuts_sample, ChainConfig, LogDensityModel, PosteriorSamples,
};
use crate::scalar::{dot, Scalar};
use crate::seeds::{derive_seed, stream};

/// Log-scale outputs are clamped to this range before exponentiation.
pub const LOG_SCALE_CLAMP: f64 = 15.0;

/// Largest tolerated fraction of draws lost to precision underflow.
pub const MAX_DRAW_LOSS: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bhs,
    Pbhs,
    Mogpe,
    Pogpe,
    Hetgp,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Bhs,
        Method::Pbhs,
        Method::Mogpe,
        Method::Pogpe,
        Method::Hetgp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bhs => "bhs",
            Method::Pbhs => "pbhs",
            Method::Mogpe => "mogpe",
            Method::Pogpe => "pogpe",
            Method::Hetgp => "hetgp",
        }
    }

    /// Stacking methods fuse fixed, pre-trained experts.
    pub fn uses_experts(self) -> bool {
        matches!(self, Method::Bhs | Method::Pbhs)
    }

    /// Log-linear pooling (generalized product of experts).
    pub fn is_product(self) -> bool {
        matches!(self, Method::Pbhs | Method::Pogpe)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "bhs" => Ok(Method::Bhs),
            "pbhs" => Ok(Method::Pbhs),
            "mogpe" => Ok(Method::Mogpe),
            "pogpe" => Ok(Method::Pogpe),
            "hetgp" | "hetrffgp" => Ok(Method::Hetgp),
            other => Err(Error::InvalidParameter(format!("unknown method `{other}`"))),
        }
    }
}

/// What a latent function feeds into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentRole {
    /// Softmax logit `w̃_k` (linear pooling).
    Logit(usize),
    /// Log-weight `log w_k` (log-linear pooling).
    LogWeight(usize),
    Mean(usize),
    LogScale(usize),
}

impl LatentRole {
    fn label(&self) -> String {
        match self {
            LatentRole::Logit(k) => format!("logit_{k}"),
            LatentRole::LogWeight(k) => format!("log_weight_{k}"),
            LatentRole::Mean(k) => format!("mean_{k}"),
            LatentRole::LogScale(k) => format!("log_scale_{k}"),
        }
    }
}

/// One RFF-GP latent function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFunction<T> {
    pub role: LatentRole,
    pub basis: RffBasis<T>,
    /// Constant prior mean added to `φ(x)ᵀψ`.
    pub offset: T,
}

/// A named contiguous slice of the parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterSlice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl ParameterSlice {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub slices: Vec<ParameterSlice>,
    pub dim: usize,
}

/// Fixed kernel hyperparameters of the latent RFF-GPs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentHyperparameters {
    pub weight_lengthscale: f64,
    pub mean_lengthscale: f64,
    pub log_scale_lengthscale: f64,
    pub weight_amplitude: f64,
    pub mean_amplitude: f64,
    pub log_scale_amplitude: f64,
}

impl Default for LatentHyperparameters {
    fn default() -> Self {
        Self {
            weight_lengthscale: 0.5,
            mean_lengthscale: 0.2,
            log_scale_lengthscale: 0.5,
            weight_amplitude: 1.0,
            mean_amplitude: 1.0,
            log_scale_amplitude: 1.0,
        }
    }
}

/// Latent roles for a method with `k` experts, in parameter order.
pub fn latent_roles(method: Method, k: usize) -> Vec<LatentRole> {
    let means = (0..k).map(LatentRole::Mean);
    let scales = (0..k).map(LatentRole::LogScale);
    let logits = (0..k.saturating_sub(1)).map(LatentRole::Logit);
    let log_weights = (0..k).map(LatentRole::LogWeight);
    match method {
        Method::Bhs => logits.collect(),
        Method::Pbhs => log_weights.collect(),
        Method::Mogpe => means.chain(scales).chain(logits).collect(),
        Method::Pogpe => means.chain(scales).chain(log_weights).collect(),
        Method::Hetgp => vec![LatentRole::Mean(0), LatentRole::LogScale(0)],
    }
}

/// Model structure: method, expert count and one basis per latent function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModelSpec<T> {
    pub method: Method,
    pub k: usize,
    pub latents: Vec<LatentFunction<T>>,
}

impl<T: Scalar> FusionModelSpec<T> {
    /// Samples an independent basis per latent function.
    ///
    /// Basis `j` uses seed `derive_seed(seed, [BASIS, j])`. The het-RFF-GP
    /// uses `k = 1`.
    pub fn sample(
        method: Method,
        k: usize,
        m: usize,
        input_dim: usize,
        hyper: &LatentHyperparameters,
        seed: u64,
    ) -> Result<Self> {
        let k = if method == Method::Hetgp { 1 } else { k };
        if k == 0 {
            return Err(Error::InvalidParameter("K must be >= 1".into()));
        }
        let log_k = T::from_usize_lossy(k).ln();
        let latents = latent_roles(method, k)
            .into_iter()
            .enumerate()
            .map(|(j, role)| {
                let (ls, amp, offset) = match role {
                    LatentRole::Logit(_) => {
                        (hyper.weight_lengthscale, hyper.weight_amplitude, T::zero())
                    }
                    LatentRole::LogWeight(_) => {
                        (hyper.weight_lengthscale, hyper.weight_amplitude, -log_k)
                    }
                    LatentRole::Mean(_) => {
                        (hyper.mean_lengthscale, hyper.mean_amplitude, T::zero())
                    }
                    LatentRole::LogScale(_) => (
                        hyper.log_scale_lengthscale,
                        hyper.log_scale_amplitude,
                        T::zero(),
                    ),
                };
                let basis = sample_frequencies(
                    m,
                    T::lit(ls),
                    input_dim,
                    derive_seed(seed, &[stream::BASIS, j as u64]),
                )?
                .with_amplitude(T::lit(amp))?;
                Ok(LatentFunction {
                    role,
                    basis,
                    offset,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_latents(method, k, latents)
    }

    /// Builds a spec from explicit latent functions, which must match
    /// [`latent_roles`] for the method.
    pub fn from_latents(method: Method, k: usize, latents: Vec<LatentFunction<T>>) -> Result<Self> {
        let expected = latent_roles(method, k);
        let roles: Vec<LatentRole> = latents.iter().map(|l| l.role).collect();
        if roles != expected {
            return Err(Error::InvalidParameter(format!(
                "{method} with K = {k} needs latents {expected:?}, got {roles:?}"
            )));
        }
        if let Some(d) = latents.first().map(|l| l.basis.input_dim()) {
            if latents.iter().any(|l| l.basis.input_dim() != d) {
                return Err(Error::DimensionMismatch(
                    "latent bases disagree on input dimension".into(),
                ));
            }
        }
        Ok(Self { method, k, latents })
    }

    pub fn layout(&self) -> ParameterLayout {
        let mut offset = 0;
        let slices = self
            .latents
            .iter()
            .map(|l| {
                let s = ParameterSlice {
                    name: l.role.label(),
                    offset,
                    len: l.basis.num_features(),
                };
                offset += s.len;
                s
            })
            .collect();
        ParameterLayout {
            slices,
            dim: offset,
        }
    }

    pub fn dim(&self) -> usize {
        self.latents.iter().map(|l| l.basis.num_features()).sum()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.latents.first().map(|l| l.basis.input_dim())
    }

    fn index_of(&self, role: LatentRole) -> Option<usize> {
        self.latents.iter().position(|l| l.role == role)
    }

    fn ranges(&self) -> Vec<Range<usize>> {
        let mut offset = 0;
        self.latents
            .iter()
            .map(|l| {
                let r = offset..offset + l.basis.num_features();
                offset = r.end;
                r
            })
            .collect()
    }

    /// Latent values at `x` for parameters `eta`.
    pub fn latent_values(&self, eta: &[T], x: &[T]) -> Vec<T> {
        self.latents
            .iter()
            .zip(self.ranges())
            .map(|(l, r)| dot(&feature_map(x, &l.basis), &eta[r]) + l.offset)
            .collect()
    }

    /// Gaussian prior log-density of every coefficient slice, with gradient.
    fn log_prior(&self, eta: &[T], grad: Option<&mut [T]>) -> T {
        let mut total = T::zero();
        let mut grad = grad;
        for (l, r) in self.latents.iter().zip(self.ranges()) {
            let var = l.basis.prior_weight_variance();
            let slice = &eta[r.clone()];
            let ss: T = slice.iter().map(|&v| v * v).sum();
            let n = T::from_usize_lossy(r.len());
            total += -T::lit(0.5) * ss / var - n * T::half_ln_2pi() - T::lit(0.5) * n * var.ln();
            if let Some(g) = grad.as_deref_mut() {
                for (gi, &v) in g[r].iter_mut().zip(slice) {
                    *gi -= v / var;
                }
            }
        }
        total
    }

    /// Log-likelihood of `y` given latent values `f` (and the experts'
    /// predictions at the same input, for stacking). Writes `∂ℓ/∂f` when
    /// `grad_f` is given.
    pub fn point_log_likelihood(
        &self,
        y: T,
        f: &[T],
        experts: Option<&[GaussianPrediction<T>]>,
        grad_f: Option<&mut [T]>,
    ) -> Result<T> {
        let roles = RoleIndex::new(self);
        let mut scratch = Scratch::new(self.k);
        self.point_ll(&roles, &mut scratch, y, f, experts, grad_f)
    }

    fn point_ll(
        &self,
        roles: &RoleIndex,
        s: &mut Scratch<T>,
        y: T,
        f: &[T],
        experts: Option<&[GaussianPrediction<T>]>,
        grad_f: Option<&mut [T]>,
    ) -> Result<T> {
        let k = self.k;
        let stacking = self.method.uses_experts();
        let clamp = T::lit(LOG_SCALE_CLAMP);
        let two = T::lit(2.0);
        let half = T::lit(0.5);
        if stacking {
            let e = experts.ok_or_else(|| {
                Error::Missing(format!("{} needs expert predictions", self.method))
            })?;
            if e.len() != k {
                return Err(Error::DimensionMismatch(format!(
                    "{} expert predictions for K = {k}",
                    e.len()
                )));
            }
            for (c, p) in e.iter().enumerate() {
                s.means[c] = p.mean;
                s.vars[c] = p.variance;
            }
        } else {
            for c in 0..k {
                s.means[c] = f[roles.means[c]];
                let g = f[roles.log_scales[c]];
                s.active[c] = g > -clamp && g < clamp;
                s.vars[c] = (two * g.max(-clamp).min(clamp)).exp();
            }
        }
        let mut grad_f = grad_f;
        if let Some(g) = grad_f.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }

        if self.method.is_product() {
            // a = weights, b = precisions
            let mut precision = T::zero();
            let mut weighted = T::zero();
            let mut max_lambda = T::zero();
            for c in 0..k {
                s.a[c] = f[roles.log_weights[c]].exp();
                s.b[c] = s.vars[c].recip();
                precision += s.a[c] * s.b[c];
                weighted += s.a[c] * s.b[c] * s.means[c];
                max_lambda = max_lambda.max(s.b[c]);
            }
            let floor = precision_floor_from_max(max_lambda);
            if !(precision > floor) || !precision.is_finite() {
                return Err(Error::PrecisionUnderflow {
                    precision: precision.to_f64_lossy(),
                    floor: floor.to_f64_lossy(),
                });
            }
            let m = weighted / precision;
            let r = y - m;
            let ll = -T::half_ln_2pi() + half * precision.ln() - half * precision * r * r;
            if let Some(g) = grad_f {
                let dp = half / precision - half * r * r;
                for c in 0..k {
                    let (w, lambda) = (s.a[c], s.b[c]);
                    // ∂ℓ/∂λ_c = w_c·∂ℓ/∂P + r·w_c·(μ_c − m)
                    let d_lambda = w * dp + r * w * (s.means[c] - m);
                    g[roles.log_weights[c]] = lambda * d_lambda;
                    if !stacking {
                        g[roles.means[c]] = r * w * lambda;
                        if s.active[c] {
                            g[roles.log_scales[c]] = -two * lambda * d_lambda;
                        }
                    }
                }
            }
            return Ok(ll);
        }

        // linear pooling; a = logits (the last pinned at zero), b = logits + log N
        for c in 0..k {
            s.a[c] = roles.logits[c].map_or(T::zero(), |i| f[i]);
            let ln_var = if stacking {
                s.vars[c].ln()
            } else {
                two * f[roles.log_scales[c]].max(-clamp).min(clamp)
            };
            let r = y - s.means[c];
            s.b[c] = s.a[c] - T::half_ln_2pi() - half * ln_var - half * r * r / s.vars[c];
        }
        if k == 1 {
            if let Some(g) = grad_f {
                if !stacking {
                    let r = y - s.means[0];
                    g[roles.means[0]] = r / s.vars[0];
                    if s.active[0] {
                        g[roles.log_scales[0]] = r * r / s.vars[0] - T::one();
                    }
                }
            }
            return Ok(s.b[0] - s.a[0]);
        }
        // exponentials are kept in place for the responsibilities
        let lse_joint = exp_shifted(&mut s.b);
        let lse_logits = exp_shifted(&mut s.a);
        let ll = lse_joint.0 - lse_logits.0;
        if let Some(g) = grad_f {
            for c in 0..k {
                let resp = s.b[c] / lse_joint.1;
                if let Some(i) = roles.logits[c] {
                    g[i] = resp - s.a[c] / lse_logits.1;
                }
                if !stacking {
                    let r = y - s.means[c];
                    g[roles.means[c]] = resp * r / s.vars[c];
                    if s.active[c] {
                        g[roles.log_scales[c]] = resp * (r * r / s.vars[c] - T::one());
                    }
                }
            }
        }
        Ok(ll)
    }

    /// The fused predictive density for one parameter draw at `x`.
    pub fn draw_predictive(
        &self,
        eta: &[T],
        x: &[T],
        experts: Option<&[GaussianPrediction<T>]>,
    ) -> Result<DrawPredictive<T>> {
        let f = self.latent_values(eta, x);
        let comps: Vec<GaussianPrediction<T>> = if self.method.uses_experts() {
            experts
                .ok_or_else(|| Error::Missing(format!("{} needs expert predictions", self.method)))?
                .to_vec()
        } else {
            let clamp = T::lit(LOG_SCALE_CLAMP);
            (0..self.k)
                .map(|c| {
                    let mean = f[self.index_of(LatentRole::Mean(c)).unwrap()];
                    let g = f[self.index_of(LatentRole::LogScale(c)).unwrap()]
                        .max(-clamp)
                        .min(clamp);
                    GaussianPrediction {
                        mean,
                        variance: (T::lit(2.0) * g).exp(),
                    }
                })
                .collect()
        };
        if self.method.is_product() {
            let log_w: Vec<T> = (0..self.k)
                .map(|c| f[self.index_of(LatentRole::LogWeight(c)).unwrap()])
                .collect();
            let w = PositiveWeights::from_log(&log_w).map_err(|_| Error::PrecisionUnderflow {
                precision: 0.0,
                floor: 0.0,
            })?;
            Ok(DrawPredictive::Gaussian(gpoe_fuse(&comps, &w)?))
        } else {
            let logits: Vec<T> = (0..self.k)
                .map(|c| {
                    self.index_of(LatentRole::Logit(c))
                        .map_or(T::zero(), |i| f[i])
                })
                .collect();
            Ok(DrawPredictive::Mixture(MixturePdf::new(
                comps,
                softmax(&logits),
            )?))
        }
    }

    /// Softmax weights at `x` for a linear-pooling draw.
    pub fn simplex_weights(&self, eta: &[T], x: &[T]) -> Option<SimplexWeights<T>> {
        if self.method.is_product() {
            return None;
        }
        let f = self.latent_values(eta, x);
        let logits: Vec<T> = (0..self.k)
            .map(|c| {
                self.index_of(LatentRole::Logit(c))
                    .map_or(T::zero(), |i| f[i])
            })
            .collect();
        Some(softmax(&logits))
    }
}

/// Replaces `v` by `exp(v − max v)` and returns `(log Σ exp v, Σ exp(v − max v))`.
fn exp_shifted<T: Scalar>(v: &mut [T]) -> (T, T) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return (max, T::zero());
    }
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    (max + sum.ln(), sum)
}

/// Positions of each role among a spec's latent functions.
#[derive(Clone, Debug, Default)]
struct RoleIndex {
    means: Vec<usize>,
    log_scales: Vec<usize>,
    logits: Vec<Option<usize>>,
    log_weights: Vec<usize>,
}

impl RoleIndex {
    fn new<T: Scalar>(spec: &FusionModelSpec<T>) -> Self {
        let mut idx = RoleIndex::default();
        for c in 0..spec.k {
            if let Some(i) = spec.index_of(LatentRole::Mean(c)) {
                idx.means.push(i);
            }
            if let Some(i) = spec.index_of(LatentRole::LogScale(c)) {
                idx.log_scales.push(i);
            }
            if let Some(i) = spec.index_of(LatentRole::LogWeight(c)) {
                idx.log_weights.push(i);
            }
            idx.logits.push(spec.index_of(LatentRole::Logit(c)));
        }
        idx
    }
}

struct Scratch<T> {
    means: Vec<T>,
    vars: Vec<T>,
    active: Vec<bool>,
    a: Vec<T>,
    b: Vec<T>,
}

impl<T: Scalar> Scratch<T> {
    fn new(k: usize) -> Self {
        Self {
            means: vec![T::zero(); k],
            vars: vec![T::zero(); k],
            active: vec![false; k],
            a: vec![T::zero(); k],
            b: vec![T::zero(); k],
        }
    }
}

/// Per-draw predictive density.
#[derive(Clone, Debug, PartialEq)]
pub enum DrawPredictive<T> {
    Mixture(MixturePdf<T>),
    Gaussian(GaussianPrediction<T>),
}

impl<T: Scalar> DrawPredictive<T> {
    pub fn log_pdf(&self, y: T) -> T {
        match self {
            DrawPredictive::Mixture(m) => m.log_pdf(y),
            DrawPredictive::Gaussian(g) => g.log_pdf(y),
        }
    }

    pub fn mean(&self) -> T {
        match self {
            DrawPredictive::Mixture(m) => m.mean(),
            DrawPredictive::Gaussian(g) => g.mean,
        }
    }

    pub fn variance(&self) -> T {
        match self {
            DrawPredictive::Mixture(m) => m.variance(),
            DrawPredictive::Gaussian(g) => g.variance,
        }
    }
}

const BLOCK: usize = 4;

/// A spec bound to training data: the sampler's target.
#[derive(Clone, Debug)]
pub struct FusionModel<T> {
    spec: FusionModelSpec<T>,
    y: Vec<T>,
    /// `n × dim`: row `n` concatenates every latent's features at input `n`,
    /// aligned with the parameter layout.
    features: Matrix<T>,
    experts: Option<Vec<Vec<GaussianPrediction<T>>>>,
    roles: RoleIndex,
    ranges: Vec<Range<usize>>,
}

impl<T: Scalar> FusionModel<T> {
    /// `experts[n]` holds the K expert predictions at input `n`; required
    /// for stacking methods and rejected otherwise.
    pub fn new(
        spec: FusionModelSpec<T>,
        x: &Matrix<T>,
        y: &[T],
        experts: Option<Vec<Vec<GaussianPrediction<T>>>>,
    ) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs but {} targets",
                x.rows(),
                y.len()
            )));
        }
        if let Some(d) = spec.input_dim() {
            if d != x.cols() {
                return Err(Error::DimensionMismatch(format!(
                    "bases expect {d}-d inputs, data is {}-d",
                    x.cols()
                )));
            }
        }
        match (&experts, spec.method.uses_experts()) {
            (None, true) => {
                return Err(Error::Missing(format!(
                    "{} needs pre-trained expert predictions",
                    spec.method
                )))
            }
            (Some(_), false) => {
                return Err(Error::InvalidParameter(format!(
                    "{} learns its experts jointly; expert predictions are not accepted",
                    spec.method
                )))
            }
            (Some(e), true) => {
                if e.len() != y.len() || e.iter().any(|row| row.len() != spec.k) {
                    return Err(Error::DimensionMismatch(format!(
                        "expert predictions must be {} x {}",
                        y.len(),
                        spec.k
                    )));
                }
            }
            (None, false) => {}
        }
        let per_latent: Vec<Matrix<T>> = spec
            .latents
            .iter()
            .map(|l| l.basis.feature_matrix(x))
            .collect();
        let ranges = spec.ranges();
        let mut features = Matrix::zeros(x.rows(), spec.dim());
        for n in 0..x.rows() {
            let row = features.row_mut(n);
            for (phi, r) in per_latent.iter().zip(&ranges) {
                row[r.clone()].copy_from_slice(phi.row(n));
            }
        }
        Ok(Self {
            roles: RoleIndex::new(&spec),
            ranges: spec.ranges(),
            spec,
            y: y.to_vec(),
            features,
            experts,
        })
    }

    pub fn spec(&self) -> &FusionModelSpec<T> {
        &self.spec
    }

    pub fn num_points(&self) -> usize {
        self.y.len()
    }

    /// One orthonormal basis per latent function: the eigenvectors of the
    /// Gram matrix of its training features, largest eigenvalue first.
    pub fn feature_rotations(&self) -> Vec<Matrix<T>> {
        self.ranges
            .iter()
            .map(|r| {
                let w = r.len();
                let mut gram = Matrix::zeros(w, w);
                for n in 0..self.y.len() {
                    let phi = &self.features.row(n)[r.clone()];
                    for a in 0..w {
                        for b in a..w {
                            gram[(a, b)] += phi[a] * phi[b];
                        }
                    }
                }
                for a in 0..w {
                    for b in 0..a {
                        gram[(a, b)] = gram[(b, a)];
                    }
                }
                symmetric_eigen(&gram).1
            })
            .collect()
    }

    /// The same model with latent `j`'s weights written as `ψ_j = Q_j z_j`.
    /// The weight prior is isotropic, so the density in `z` equals the
    /// density of the original model at `ψ`.
    pub fn rotated(&self, rotations: &[Matrix<T>]) -> Result<Self> {
        if rotations.len() != self.ranges.len()
            || rotations
                .iter()
                .zip(&self.ranges)
                .any(|(q, r)| q.rows() != r.len() || q.cols() != r.len())
        {
            return Err(Error::DimensionMismatch(
                "one square rotation per latent function is required".into(),
            ));
        }
        let mut out = self.clone();
        for n in 0..self.y.len() {
            let row = out.features.row_mut(n);
            for (q, r) in rotations.iter().zip(&self.ranges) {
                let rotated = q.tr_mat_vec(&row[r.clone()]);
                row[r.clone()].copy_from_slice(&rotated);
            }
        }
        Ok(out)
    }

    /// Runs NUTS in the coordinates of [`FusionModel::feature_rotations`],
    /// where the diagonal metric can absorb the correlation between
    /// features, and maps every draw back to the original weights. The
    /// inverse metric in the chain statistics refers to the rotated
    /// coordinates.
    pub fn sample_posterior(&self, init: &[T], chain: &ChainConfig) -> Result<PosteriorSamples<T>> {
        let dim = self.spec.dim();
        if init.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "initial point has length {}, expected {dim}",
                init.len()
            )));
        }
        let rotations = self.feature_rotations();
        let target = self.rotated(&rotations)?;
        let mut z0 = init.to_vec();
        for (q, r) in rotations.iter().zip(&self.ranges) {
            let z = q.tr_mat_vec(&init[r.clone()]);
            z0[r.clone()].copy_from_slice(&z);
        }
        let mut samples = nuts_sample(&target, &z0, chain)?;
        samples.transform_draws(|d| {
            for (q, r) in rotations.iter().zip(&self.ranges) {
                let psi = q.mat_vec(&d[r.clone()]);
                d[r.clone()].copy_from_slice(&psi);
            }
        });
        Ok(samples)
    }

    /// Log prior plus log likelihood; writes the gradient when asked.
    pub fn log_posterior(&self, eta: &[T], grad: Option<&mut [T]>) -> Result<T> {
        let dim = self.spec.dim();
        if eta.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector has length {} but the model has dimension {dim}",
                eta.len()
            )));
        }
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
        let mut total = self.spec.log_prior(eta, grad.as_deref_mut());
        let n_latent = self.spec.latents.len();
        let mut scratch = Scratch::new(self.spec.k);
        // points are processed in blocks so each parameter load serves several rows
        let mut f = [
            vec![T::zero(); n_latent],
            vec![T::zero(); n_latent],
            vec![T::zero(); n_latent],
            vec![T::zero(); n_latent],
        ];
        let mut df = f.clone();
        let n = self.y.len();
        let want_grad = grad.is_some();
        for start in (0..n).step_by(BLOCK) {
            let len = BLOCK.min(n - start);
            let rows: [&[T]; BLOCK] =
                std::array::from_fn(|b| self.features.row((start + b).min(n - 1)));
            for (j, l) in self.spec.latents.iter().enumerate() {
                let r = self.ranges[j].clone();
                let e = &eta[r.clone()];
                let seg: [&[T]; BLOCK] = std::array::from_fn(|b| &rows[b][r.clone()]);
                let w = e.len();
                let (s0, s1, s2, s3) = (&seg[0][..w], &seg[1][..w], &seg[2][..w], &seg[3][..w]);
                let mut acc = [T::zero(); BLOCK];
                for i in 0..w {
                    let ei = e[i];
                    acc[0] += s0[i] * ei;
                    acc[1] += s1[i] * ei;
                    acc[2] += s2[i] * ei;
                    acc[3] += s3[i] * ei;
                }
                for b in 0..BLOCK {
                    f[b][j] = acc[b] + l.offset;
                }
            }
            for b in 0..len {
                let idx = start + b;
                let experts = self.experts.as_ref().map(|e| e[idx].as_slice());
                total += self.spec.point_ll(
                    &self.roles,
                    &mut scratch,
                    self.y[idx],
                    &f[b],
                    experts,
                    if want_grad { Some(&mut df[b]) } else { None },
                )?;
            }
            if let Some(g) = grad.as_deref_mut() {
                for d in &mut df[len..] {
                    d.iter_mut().for_each(|v| *v = T::zero());
                }
                #[allow(clippy::needless_range_loop)]
                for j in 0..n_latent {
                    let d: [T; BLOCK] = std::array::from_fn(|b| df[b][j]);
                    if d.iter().all(|&v| v == T::zero()) {
                        continue;
                    }
                    let r = self.ranges[j].clone();
                    let gs = &mut g[r.clone()];
                    let w = gs.len();
                    let (s0, s1, s2, s3) = (
                        &rows[0][r.clone()][..w],
                        &rows[1][r.clone()][..w],
                        &rows[2][r.clone()][..w],
                        &rows[3][r][..w],
                    );
                    for i in 0..w {
                        gs[i] += d[0] * s0[i] + d[1] * s1[i] + d[2] * s2[i] + d[3] * s3[i];
                    }
                }
            }
        }
        Ok(total)
    }
}

impl<T: Scalar> LogDensityModel<T> for FusionModel<T> {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn log_density_and_gradient(&self, position: &[T], gradient: &mut [T]) -> T {
        match self.log_posterior(position, Some(gradient)) {
            Ok(v) if v.is_finite() => v,
            _ => T::neg_infinity(),
        }
    }

    fn log_density(&self, position: &[T]) -> T {
        self.log_posterior(position, None)
            .unwrap_or(T::neg_infinity())
    }
}

/// Draw-averaged predictive log-density at one test point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictiveValue<T> {
    pub log_density: T,
    /// Draws whose fused precision underflowed; they contribute zero mass.
    pub lost_draws: usize,
    pub total_draws: usize,
}

/// `ln[(1/J) Σ_j p(y* | x*, η_j)]` for a fitted model.
///
/// Draws whose fused precision underflows contribute zero density and are
/// counted; more than [`MAX_DRAW_LOSS`] of the draws lost is an error.
pub fn predictive_logpdf<T: Scalar>(
    spec: &FusionModelSpec<T>,
    samples: &PosteriorSamples<T>,
    x_star: &[T],
    y_star: T,
    experts: Option<&[GaussianPrediction<T>]>,
) -> Result<PredictiveValue<T>> {
    let value = predictive_logpdf_unchecked(spec, samples, x_star, y_star, experts)?;
    if value.lost_draws as f64 > MAX_DRAW_LOSS * value.total_draws as f64 {
        return Err(Error::DrawLoss {
            lost: value.lost_draws,
            total: value.total_draws,
        });
    }
    Ok(value)
}

/// As [`predictive_logpdf`] without the draw-loss check.
pub fn predictive_logpdf_unchecked<T: Scalar>(
    spec: &FusionModelSpec<T>,
    samples: &PosteriorSamples<T>,
    x_star: &[T],
    y_star: T,
    experts: Option<&[GaussianPrediction<T>]>,
) -> Result<PredictiveValue<T>> {
    let (terms, lost) = per_draw_log_densities(spec, samples, x_star, y_star, experts)?;
    Ok(PredictiveValue {
        log_density: mean_of_exp_log(&terms),
        lost_draws: lost,
        total_draws: terms.len(),
    })
}

/// `ln p(y* | x*, η_j)` for every draw in chain-major order, with `−∞` for
/// draws whose fused precision underflows; also returns how many did.
pub fn per_draw_log_densities<T: Scalar>(
    spec: &FusionModelSpec<T>,
    samples: &PosteriorSamples<T>,
    x_star: &[T],
    y_star: T,
    experts: Option<&[GaussianPrediction<T>]>,
) -> Result<(Vec<T>, usize)> {
    if samples.total_draws() == 0 {
        return Err(Error::InvalidParameter("no posterior draws".into()));
    }
    if samples.dim() != spec.dim() {
        return Err(Error::DimensionMismatch(format!(
            "samples have dimension {} but the model has {}",
            samples.dim(),
            spec.dim()
        )));
    }
    let ranges = spec.ranges();
    let roles = RoleIndex::new(spec);
    let mut scratch = Scratch::new(spec.k);
    let phis: Vec<Vec<T>> = spec
        .latents
        .iter()
        .map(|l| feature_map(x_star, &l.basis))
        .collect();
    let mut f = vec![T::zero(); spec.latents.len()];
    let mut lost = 0;
    let mut terms = Vec::with_capacity(samples.total_draws());
    for eta in samples.iter_draws() {
        for (j, l) in spec.latents.iter().enumerate() {
            f[j] = dot(&phis[j], &eta[ranges[j].clone()]) + l.offset;
        }
        match spec.point_ll(&roles, &mut scratch, y_star, &f, experts, None) {
            Ok(v) => terms.push(v),
            Err(Error::PrecisionUnderflow { .. }) => {
                lost += 1;
                terms.push(T::neg_infinity());
            }
            Err(e) => return Err(e),
        }
    }
    Ok((terms, lost))
}

/// Linear-pooling predictive built from posterior-mean weights at `x_star`.
pub fn posterior_mean_weight_mixture<T: Scalar>(
    spec: &FusionModelSpec<T>,
    samples: &PosteriorSamples<T>,
    x_star: &[T],
    experts: &[GaussianPrediction<T>],
) -> Result<MixturePdf<T>> {
    if spec.method != Method::Bhs {
        return Err(Error::InvalidParameter(
            "posterior-mean weights apply to stacking with linear pooling".into(),
        ));
    }
    let mut mean_w = vec![T::zero(); spec.k];
    for eta in samples.iter_draws() {
        let w = spec.simplex_weights(eta, x_star).expect("linear pooling");
        for (m, &v) in mean_w.iter_mut().zip(w.as_slice()) {
            *m += v;
        }
    }
    let n = T::from_usize_lossy(samples.total_draws());
    mean_w.iter_mut().for_each(|v| *v /= n);
    MixturePdf::new(experts.to_vec(), SimplexWeights::new(mean_w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::normal_log_pdf;

    fn basis(freq: f64, amp: f64) -> RffBasis<f64> {
        RffBasis::from_frequencies(Matrix::column(&[freq]), 1.0, amp).unwrap()
    }

    fn gp(m: f64, v: f64) -> GaussianPrediction<f64> {
        GaussianPrediction::new(m, v).unwrap()
    }

    fn sampled(method: Method, k: usize) -> FusionModelSpec<f64> {
        FusionModelSpec::sample(method, k, 4, 1, &LatentHyperparameters::default(), 17).unwrap()
    }

    #[test]
    fn layouts_cover_dimension() {
        for method in Method::ALL {
            for k in 1..=3 {
                let spec = sampled(method, k);
                let layout = spec.layout();
                let mut next = 0;
                for s in &layout.slices {
                    assert_eq!(s.offset, next);
                    next += s.len;
                }
                assert_eq!(next, layout.dim);
                assert_eq!(layout.dim, spec.dim());
            }
        }
        assert_eq!(sampled(Method::Bhs, 3).layout().slices.len(), 2);
        assert_eq!(sampled(Method::Pbhs, 3).layout().slices.len(), 3);
        assert_eq!(sampled(Method::Mogpe, 3).layout().slices.len(), 8);
        assert_eq!(sampled(Method::Pogpe, 3).layout().slices.len(), 9);
        assert_eq!(sampled(Method::Hetgp, 3).layout().slices.len(), 2);
    }

    #[test]
    fn method_parsing() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("het-RFF-GP".parse::<Method>().unwrap(), Method::Hetgp);
        assert!("lasso".parse::<Method>().is_err());
    }

    #[test]
    fn experts_required_for_stacking_only() {
        let x = Matrix::column(&[0.1, 0.2]);
        let y = [0.0, 1.0];
        assert!(matches!(
            FusionModel::new(sampled(Method::Bhs, 2), &x, &y, None),
            Err(Error::Missing(_))
        ));
        let e = vec![vec![gp(0.0, 1.0); 2]; 2];
        assert!(FusionModel::new(sampled(Method::Mogpe, 2), &x, &y, Some(e)).is_err());
    }

    #[test]
    fn bhs_single_expert_is_expert_density() {
        let x = Matrix::column(&[0.1, 0.7]);
        let y = [0.3, -0.2];
        let e = vec![vec![gp(0.1, 0.5)], vec![gp(0.0, 0.2)]];
        let model = FusionModel::new(sampled(Method::Bhs, 1), &x, &y, Some(e.clone())).unwrap();
        assert_eq!(model.spec().dim(), 0);
        let v = model.log_posterior(&[], None).unwrap();
        let expect = e[0][0].log_pdf(0.3) + e[1][0].log_pdf(-0.2);
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn bhs_zero_parameters_give_uniform_mixture() {
        let x = Matrix::column(&[0.1, 0.4, 0.9]);
        let y = [0.3, -0.2, 1.0];
        let e: Vec<Vec<_>> = (0..3)
            .map(|i| vec![gp(0.1 * i as f64, 0.5), gp(-0.3, 0.9), gp(0.5, 0.1)])
            .collect();
        let spec = sampled(Method::Bhs, 3);
        let dim = spec.dim();
        let model = FusionModel::new(spec.clone(), &x, &y, Some(e.clone())).unwrap();
        let eta = vec![0.0; dim];
        let mut prior_only = spec.log_prior(&eta, None);
        for n in 0..3 {
            prior_only +=
                crate::fusion::linear_pool_logpdf(&e[n], &SimplexWeights::uniform(3), y[n]);
        }
        assert!((model.log_posterior(&eta, None).unwrap() - prior_only).abs() < 1e-12);
    }

    /// n = 2, K = 2, M = 1 with frequency π; φ(0) = (1, 0), φ(0.5) = (0, 1).
    #[test]
    fn bhs_scalar_fixture() {
        let amp = 0.8;
        let spec = FusionModelSpec::from_latents(
            Method::Bhs,
            2,
            vec![LatentFunction {
                role: LatentRole::Logit(0),
                basis: basis(std::f64::consts::PI, amp),
                offset: 0.0,
            }],
        )
        .unwrap();
        let x = Matrix::column(&[0.0, 0.5]);
        let y = [0.2, -0.4];
        let e = vec![
            vec![gp(0.0, 1.0), gp(1.0, 0.5)],
            vec![gp(-1.0, 0.3), gp(0.5, 2.0)],
        ];
        let model = FusionModel::new(spec, &x, &y, Some(e.clone())).unwrap();
        let eta = [0.7, -1.1];

        // σ_ψ² = amp / M = 0.8
        let var = 0.8;
        let prior =
            -0.5 * (0.49 + 1.21) / var - 2.0 * 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let w0 = |a: f64| a.exp() / (a.exp() + 1.0);
        let lik = |w: f64, p: &[GaussianPrediction<f64>], y: f64| -> f64 {
            (w * normal_log_pdf(y, p[0].mean, p[0].variance).exp()
                + (1.0 - w) * normal_log_pdf(y, p[1].mean, p[1].variance).exp())
            .ln()
        };
        // logit at x=0 is ψ₀·cos(0) = 0.7; at x=0.5 it is ψ₁·sin(π/2) = −1.1
        let expect = prior + lik(w0(0.7), &e[0], 0.2) + lik(w0(-1.1), &e[1], -0.4);
        let got = model.log_posterior(&eta, None).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn pbhs_zero_parameters_use_prior_mean_weights() {
        let spec = sampled(Method::Pbhs, 3);
        let eta = vec![0.0; spec.dim()];
        let e = [gp(0.0, 1.0), gp(1.0, 0.5), gp(-1.0, 2.0)];
        let f = spec.latent_values(&eta, &[0.3]);
        for v in &f {
            assert!((v.exp() - 1.0 / 3.0).abs() < 1e-15);
        }
        let got = spec.point_log_likelihood(0.4, &f, Some(&e), None).unwrap();
        let w = PositiveWeights::new(vec![1.0 / 3.0; 3]).unwrap();
        let expect = crate::fusion::gpoe_logpdf(&e, &w, 0.4).unwrap();
        assert!((got - expect).abs() < 1e-13);
    }

    #[test]
    fn pbhs_single_expert_is_exact() {
        let spec = sampled(Method::Pbhs, 1);
        let eta = vec![0.0; spec.dim()];
        let e = [gp(0.3, 0.7)];
        let f = spec.latent_values(&eta, &[0.5]);
        let got = spec.point_log_likelihood(1.0, &f, Some(&e), None).unwrap();
        assert!((got - e[0].log_pdf(1.0)).abs() < 1e-14);
    }

    #[test]
    fn pbhs_scalar_fixture() {
        let spec = FusionModelSpec::from_latents(
            Method::Pbhs,
            2,
            vec![
                LatentFunction {
                    role: LatentRole::LogWeight(0),
                    basis: basis(std::f64::consts::PI, 1.0),
                    offset: -2f64.ln(),
                },
                LatentFunction {
                    role: LatentRole::LogWeight(1),
                    basis: basis(std::f64::consts::PI, 1.0),
                    offset: -2f64.ln(),
                },
            ],
        )
        .unwrap();
        let x = Matrix::column(&[0.0, 0.5]);
        let y = [0.2, -0.4];
        let e = vec![
            vec![gp(0.0, 1.0), gp(1.0, 0.5)],
            vec![gp(-1.0, 0.3), gp(0.5, 2.0)],
        ];
        let model = FusionModel::new(spec, &x, &y, Some(e.clone())).unwrap();
        let eta = [0.3, -0.2, 0.5, 0.9];
        let prior = -0.5 * (0.09 + 0.04 + 0.25 + 0.81) - 2.0 * (2.0 * std::f64::consts::PI).ln();
        let fused = |w: [f64; 2], p: &[GaussianPrediction<f64>]| -> (f64, f64) {
            let prec = w[0] / p[0].variance + w[1] / p[1].variance;
            let m = (w[0] * p[0].mean / p[0].variance + w[1] * p[1].mean / p[1].variance) / prec;
            (m, 1.0 / prec)
        };
        // x = 0 picks the cosine coefficients, x = 0.5 the sine ones
        let (m0, v0) = fused([0.5 * 0.3f64.exp(), 0.5 * 0.5f64.exp()], &e[0]);
        let (m1, v1) = fused([0.5 * (-0.2f64).exp(), 0.5 * 0.9f64.exp()], &e[1]);
        let expect = prior + normal_log_pdf(0.2, m0, v0) + normal_log_pdf(-0.4, m1, v1);
        let got = model.log_posterior(&eta, None).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn mogpe_zero_parameters_are_standard_normal() {
        let spec = sampled(Method::Mogpe, 3);
        let eta = vec![0.0; spec.dim()];
        let x = Matrix::column(&[0.1, 0.5, 0.8]);
        let y = [0.3, -1.0, 2.0];
        let model = FusionModel::new(spec.clone(), &x, &y, None).unwrap();
        let lik: f64 = y.iter().map(|&v| normal_log_pdf(v, 0.0, 1.0)).sum();
        let got = model.log_posterior(&eta, None).unwrap() - spec.log_prior(&eta, None);
        assert!((got - lik).abs() < 1e-12);
    }

    #[test]
    fn mogpe_scalar_fixture() {
        let pi = std::f64::consts::PI;
        let latents = vec![
            LatentFunction {
                role: LatentRole::Mean(0),
                basis: basis(pi, 1.0),
                offset: 0.0,
            },
            LatentFunction {
                role: LatentRole::Mean(1),
                basis: basis(pi, 1.0),
                offset: 0.0,
            },
            LatentFunction {
                role: LatentRole::LogScale(0),
                basis: basis(pi, 1.0),
                offset: 0.0,
            },
            LatentFunction {
                role: LatentRole::LogScale(1),
                basis: basis(pi, 1.0),
                offset: 0.0,
            },
            LatentFunction {
                role: LatentRole::Logit(0),
                basis: basis(pi, 1.0),
                offset: 0.0,
            },
        ];
        let spec = FusionModelSpec::from_latents(Method::Mogpe, 2, latents).unwrap();
        let x = Matrix::column(&[0.0]);
        let y = [0.4];
        let model = FusionModel::new(spec, &x, &y, None).unwrap();
        // at x = 0 only the cosine coefficient (even index) matters
        let eta = [0.5, 9.0, -0.3, 9.0, -0.2, 9.0, 0.1, 9.0, 0.8, 9.0];
        let ss: f64 = eta.iter().map(|v| v * v).sum();
        let prior = -0.5 * ss - 5.0 * (2.0 * pi).ln();
        let w0 = 0.8f64.exp() / (0.8f64.exp() + 1.0);
        let lik = (w0 * normal_log_pdf(0.4, 0.5, (2.0 * -0.2f64).exp()).exp()
            + (1.0 - w0) * normal_log_pdf(0.4, -0.3, (2.0 * 0.1f64).exp()).exp())
        .ln();
        let got = model.log_posterior(&eta, None).unwrap();
        assert!((got - (prior + lik)).abs() < 1e-10);
    }

    #[test]
    fn pogpe_zero_parameters_are_standard_normal() {
        let spec = sampled(Method::Pogpe, 2);
        let eta = vec![0.0; spec.dim()];
        match spec.draw_predictive(&eta, &[0.3], None).unwrap() {
            DrawPredictive::Gaussian(g) => {
                assert!(g.mean.abs() < 1e-15 && (g.variance - 1.0).abs() < 1e-14)
            }
            _ => panic!("product model must fuse to a Gaussian"),
        }
    }

    #[test]
    fn pogpe_scalar_fixture() {
        let pi = std::f64::consts::PI;
        let half_ln = -2f64.ln();
        let latents = vec![
            LatentFunction {
                role: LatentRole::Mean(0),
                basis: basis(pi, 1.0),
                offset: 0.0,
            },
            LatentFunction {
                role: LatentRole::Mean(1),
                basis: basis(pi, 1.0),
                offset: 0.0,
            },
            LatentFunction {
                role: LatentRole::LogScale(0),
                basis: basis(pi, 1.0),
                offset: 0.0,
            },
            LatentFunction {
                role: LatentRole::LogScale(1),
                basis: basis(pi, 1.0),
                offset: 0.0,
            },
            LatentFunction {
                role: LatentRole::LogWeight(0),
                basis: basis(pi, 1.0),
                offset: half_ln,
            },
            LatentFunction {
                role: LatentRole::LogWeight(1),
                basis: basis(pi, 1.0),
                offset: half_ln,
            },
        ];
        let spec = FusionModelSpec::from_latents(Method::Pogpe, 2, latents).unwrap();
        let model = FusionModel::new(spec, &Matrix::column(&[0.0]), &[0.4], None).unwrap();
        let eta = [
            0.5, 0.0, -0.3, 0.0, -0.2, 0.0, 0.1, 0.0, 0.2, 0.0, -0.6, 0.0,
        ];
        let ss: f64 = eta.iter().map(|v| v * v).sum();
        let prior = -0.5 * ss - 6.0 * (2.0 * pi).ln();
        let (w0, w1) = (0.5 * 0.2f64.exp(), 0.5 * (-0.6f64).exp());
        let (l0, l1) = ((-2.0 * -0.2f64).exp(), (-2.0 * 0.1f64).exp());
        let prec = w0 * l0 + w1 * l1;
        let m = (w0 * l0 * 0.5 + w1 * l1 * -0.3) / prec;
        let expect = prior + normal_log_pdf(0.4, m, 1.0 / prec);
        let got = model.log_posterior(&eta, None).unwrap();
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn hetgp_constant_scale_reduces_to_homoscedastic() {
        // with frequency 0 the cosine feature is 1 everywhere
        let latents = vec![
            LatentFunction {
                role: LatentRole::Mean(0),
                basis: basis(0.0, 1.0),
                offset: 0.0,
            },
            LatentFunction {
                role: LatentRole::LogScale(0),
                basis: basis(0.0, 1.0),
                offset: 0.0,
            },
        ];
        let spec = FusionModelSpec::from_latents(Method::Hetgp, 1, latents).unwrap();
        let x = Matrix::column(&[0.1, 0.6, 0.9]);
        let y = [0.5, -0.1, 0.3];
        let model = FusionModel::new(spec.clone(), &x, &y, None).unwrap();
        let c: f64 = -0.7;
        let eta = [0.2, 0.0, c, 0.0];
        let lik: f64 = y
            .iter()
            .map(|&v| normal_log_pdf(v, 0.2, (2.0 * c).exp()))
            .sum();
        let got = model.log_posterior(&eta, None).unwrap() - spec.log_prior(&eta, None);
        assert!((got - lik).abs() < 1e-12);
    }

    #[test]
    fn mogpe_single_expert_equals_hetgp() {
        let hyper = LatentHyperparameters::default();
        let a = FusionModelSpec::<f64>::sample(Method::Mogpe, 1, 5, 1, &hyper, 3).unwrap();
        let b = FusionModelSpec::<f64>::sample(Method::Hetgp, 1, 5, 1, &hyper, 3).unwrap();
        let x = Matrix::column(&[0.1, 0.35, 0.9]);
        let y = [0.5, -0.1, 0.3];
        let ma = FusionModel::new(a, &x, &y, None).unwrap();
        let mb = FusionModel::new(b, &x, &y, None).unwrap();
        let eta: Vec<f64> = (0..20).map(|i| 0.05 * i as f64 - 0.4).collect();
        assert_eq!(
            ma.log_posterior(&eta, None).unwrap(),
            mb.log_posterior(&eta, None).unwrap()
        );
    }

    #[test]
    fn draw_predictive_matches_point_likelihood() {
        for method in [Method::Mogpe, Method::Pogpe, Method::Hetgp] {
            let spec = sampled(method, 2);
            let eta: Vec<f64> = (0..spec.dim())
                .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.05)
                .collect();
            let f = spec.latent_values(&eta, &[0.42]);
            let a = spec.point_log_likelihood(0.1, &f, None, None).unwrap();
            let b = spec
                .draw_predictive(&eta, &[0.42], None)
                .unwrap()
                .log_pdf(0.1);
            assert!((a - b).abs() < 1e-12, "{method}");
        }
    }

    #[test]
    fn log_scale_is_clamped() {
        let spec = FusionModelSpec::from_latents(
            Method::Hetgp,
            1,
            vec![
                LatentFunction {
                    role: LatentRole::Mean(0),
                    basis: basis(0.0, 1.0),
                    offset: 0.0,
                },
                LatentFunction {
                    role: LatentRole::LogScale(0),
                    basis: basis(0.0, 1.0),
                    offset: 0.0,
                },
            ],
        )
        .unwrap();
        let mut g = vec![0.0; 2];
        let v = spec
            .point_log_likelihood(0.0, &[0.0, 40.0], None, Some(&mut g))
            .unwrap();
        assert!((v - normal_log_pdf(0.0, 0.0, (30.0f64).exp())).abs() < 1e-9);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn predictive_single_draw_is_per_draw_density() {
        let spec = sampled(Method::Pogpe, 2);
        let eta: Vec<f64> = (0..spec.dim())
            .map(|i| (i as f64 * 0.013).sin() * 0.3)
            .collect();
        let samples = PosteriorSamples::from_draws(spec.dim(), vec![vec![eta.clone()]]);
        let v = predictive_logpdf(&spec, &samples, &[0.2], 0.5, None).unwrap();
        let direct = spec
            .draw_predictive(&eta, &[0.2], None)
            .unwrap()
            .log_pdf(0.5);
        assert!((v.log_density - direct).abs() < 1e-12);
        assert_eq!((v.lost_draws, v.total_draws), (0, 1));
    }
}
