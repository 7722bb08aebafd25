//! The Gaussian-mixture prototype space: k-means++ construction, density
//! evaluation, posterior responsibilities, and prior sampling.
//!
//! The mixture uses a single shared isotropic standard deviation. Weights
//! and the shared deviation are frozen after construction; only the means
//! are updated during training.

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tape::{gm_nll_value, gm_posterior};
use crate::tensor::{sq_dist, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

/// Smallest allowed shared standard deviation. Degenerate data can drive
/// the fitted variance to zero; the density requires it positive.
pub const STD_FLOOR: f64 = 1e-3;

/// Lloyd iteration cap and relative SSE convergence threshold.
const LLOYD_MAX_ITERS: usize = 100;
const LLOYD_REL_TOL: f64 = 1e-8;

/// Posterior component probabilities for one point; a K-simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities(Vec<f64>);

impl Responsibilities {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest responsibility (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// An isotropic Gaussian mixture with shared standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GmPrototype {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    /// `[k, dim]` matrix of component means.
    means: Tensor,
    std: f64,
    dim: usize,
}

impl GmPrototype {
    /// Builds a prototype from explicit parameters, validating the simplex
    /// and flooring the deviation.
    pub fn new(weights: Vec<f64>, means: Tensor, std: f64) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::RejectedInput("mixture needs at least one component".into()));
        }
        if means.shape().len() != 2 || means.shape()[0] != k {
            return Err(Error::RejectedInput(format!(
                "means shape {:?} does not match {k} components",
                means.shape()
            )));
        }
        if !means.is_finite() {
            return Err(Error::RejectedInput("non-finite component mean".into()));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w <= 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::RejectedInput(format!(
                "weights must be strictly positive and sum to 1 (sum = {sum})"
            )));
        }
        if !std.is_finite() || std <= 0.0 {
            return Err(Error::RejectedInput(format!("std must be positive, got {std}")));
        }
        let dim = means.shape()[1];
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            log_weights,
            means,
            std: std.max(STD_FLOOR),
            dim,
        })
    }

    /// A data-independent prototype: uniform weights, zero means, unit
    /// deviation. The "untrained" baseline in evaluations.
    pub fn uninformed(k: usize, dim: usize) -> Self {
        let weights = vec![1.0 / k as f64; k];
        let log_weights = weights.iter().map(|w: &f64| w.ln()).collect();
        Self {
            weights,
            log_weights,
            means: Tensor::zeros(vec![k, dim]),
            std: 1.0,
            dim,
        }
    }

    /// Fits the prototype to `features` by k-means++ seeding and Lloyd
    /// iteration: means are the converged centroids, weights the cluster
    /// fractions, and the shared variance the per-dimension average
    /// within-cluster squared distance.
    pub fn kmeanspp_init(features: &[Vec<f64>], k: usize, seed: u64) -> Result<Self> {
        let n = features.len();
        if k == 0 {
            return Err(Error::RejectedInput("k must be at least 1".into()));
        }
        if n < k {
            return Err(Error::InsufficientData(format!(
                "{n} points cannot seed {k} clusters"
            )));
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(Error::RejectedInput("zero-dimensional features".into()));
        }
        for (i, f) in features.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::RejectedInput(format!(
                    "feature {i} has dimension {} (expected {dim})",
                    f.len()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::RejectedInput(format!("non-finite value in feature {i}")));
            }
        }

        let mut rng = rng_from_seed(seed);
        let mut centers = kmeanspp_seed(features, k, &mut rng);

        let mut assign = vec![0usize; n];
        let mut prev_sse = f64::INFINITY;
        for _ in 0..LLOYD_MAX_ITERS {
            let sse = assign_nearest(features, &centers, &mut assign);

            // Keep every component alive: move empty clusters onto the
            // points farthest from their current centroids.
            let mut counts = vec![0usize; k];
            for &a in &assign {
                counts[a] += 1;
            }
            if counts.iter().any(|&c| c == 0) {
                let mut taken = vec![false; n];
                for ki in 0..k {
                    if counts[ki] > 0 {
                        continue;
                    }
                    let far = farthest_point(features, &centers, &assign, &taken);
                    centers[ki] = features[far].clone();
                    taken[far] = true;
                }
                assign_nearest(features, &centers, &mut assign);
            }

            update_centroids(features, &assign, &mut centers, k, dim);

            if prev_sse.is_finite() {
                let denom = prev_sse.max(f64::MIN_POSITIVE);
                if (prev_sse - sse).abs() / denom < LLOYD_REL_TOL {
                    break;
                }
            }
            prev_sse = sse;
        }

        let sse = assign_nearest(features, &centers, &mut assign);
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::InsufficientData(
                "could not populate every cluster; too few distinct points".into(),
            ));
        }

        let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let variance = sse / (dim as f64 * n as f64);
        let std = variance.sqrt().max(STD_FLOOR);
        let mut flat = Vec::with_capacity(k * dim);
        for c in &centers {
            flat.extend_from_slice(c);
        }
        Self::new(weights, Tensor::matrix(k, dim, flat)?, std)
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// `[k, dim]` matrix of component means.
    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn mean_row(&self, k: usize) -> &[f64] {
        &self.means.data()[k * self.dim..(k + 1) * self.dim]
    }

    /// Mutable access for optimizers; callers keep the means finite.
    pub(crate) fn means_mut(&mut self) -> &mut Tensor {
        &mut self.means
    }

    /// Replaces the means (used by the trainer; shape must not change).
    pub fn set_means(&mut self, means: Tensor) -> Result<()> {
        if means.shape() != self.means.shape() {
            return Err(Error::ContractViolation(format!(
                "means shape changed from {:?} to {:?}",
                self.means.shape(),
                means.shape()
            )));
        }
        if !means.is_finite() {
            return Err(Error::NumericFault("non-finite prototype means".into()));
        }
        self.means = means;
        Ok(())
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    fn check_dim(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim {
            return Err(Error::RejectedInput(format!(
                "point has dimension {}, prototype has {}",
                y.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// `log sum_k pi_k N(y; mu_k, s^2 I)` in log-sum-exp form.
    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        self.check_dim(y)?;
        Ok(-gm_nll_value(&self.log_weights, self.means.data(), y, self.std))
    }

    /// Posterior responsibilities `p(c = k | y)` via a log-space softmax.
    pub fn responsibilities(&self, y: &[f64]) -> Result<Responsibilities> {
        self.check_dim(y)?;
        let (p, _) = gm_posterior(&self.log_weights, self.means.data(), y, self.std);
        Ok(Responsibilities(p))
    }

    /// Draws a component index from the weight simplex.
    pub fn draw_component<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// Draws `y ~ sum_k pi_k N(mu_k, s^2 I)`.
    pub fn sample_prior<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.draw_component(rng);
        let mu = self.mean_row(k);
        (0..self.dim)
            .map(|j| mu[j] + self.std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Analytic mixture mean `sum_k pi_k mu_k`.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (ki, w) in self.weights.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += w * self.means.data()[ki * self.dim + j];
            }
        }
        out
    }
}

/// k-means++ seeding: first center uniform, the rest sampled with
/// probability proportional to squared distance from the chosen set.
fn kmeanspp_seed<R: Rng>(features: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    centers.push(features[first].clone());

    let mut d2: Vec<f64> = features
        .iter()
        .map(|f| sq_dist(f, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.push(features[idx].clone());
        let c = centers.last().unwrap();
        for (i, f) in features.iter().enumerate() {
            let d = sq_dist(f, c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centers
}

/// Assigns each point to its nearest center (ties to the lowest index) and
/// returns the total squared error.
fn assign_nearest(features: &[Vec<f64>], centers: &[Vec<f64>], assign: &mut [usize]) -> f64 {
    let mut sse = 0.0;
    for (i, f) in features.iter().enumerate() {
        let mut best = 0;
        let mut best_d = sq_dist(f, &centers[0]);
        for (ki, c) in centers.iter().enumerate().skip(1) {
            let d = sq_dist(f, c);
            if d < best_d {
                best_d = d;
                best = ki;
            }
        }
        assign[i] = best;
        sse += best_d;
    }
    sse
}

fn update_centroids(
    features: &[Vec<f64>],
    assign: &[usize],
    centers: &mut [Vec<f64>],
    k: usize,
    dim: usize,
) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &a) in features.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(f) {
            *s += v;
        }
    }
    for ki in 0..k {
        if counts[ki] > 0 {
            for (c, s) in centers[ki].iter_mut().zip(&sums[ki]) {
                *c = s / counts[ki] as f64;
            }
        }
    }
}

/// Index of the untaken point with the greatest distance to its assigned
/// centroid.
fn farthest_point(
    features: &[Vec<f64>],
    centers: &[Vec<f64>],
    assign: &[usize],
    taken: &[bool],
) -> usize {
    let mut best = 0;
    let mut best_d = -1.0;
    for (i, f) in features.iter().enumerate() {
        if taken[i] {
            continue;
        }
        let d = sq_dist(f, &centers[assign[i]]);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}
