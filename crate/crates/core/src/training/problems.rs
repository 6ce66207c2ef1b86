//! Objective functions with exact and stochastic gradient oracles.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{invalid, Result};
use crate::quant::Gradient;

/// Which samples a stochastic gradient is computed on.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub size: usize,
    /// Seed for sampling noise or, when `indices` is absent, for drawing
    /// dataset rows with replacement.
    pub seed: u64,
    pub indices: Option<&'a [usize]>,
}

impl<'a> Batch<'a> {
    pub fn sampled(size: usize, seed: u64) -> Self {
        Self {
            size,
            seed,
            indices: None,
        }
    }

    pub fn rows(indices: &'a [usize], seed: u64) -> Self {
        Self {
            size: indices.len(),
            seed,
            indices: Some(indices),
        }
    }
}

pub trait Problem: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// Shapes of the parameter tensors, in flattening order.
    fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.dim()]]
    }

    fn init(&self) -> Vec<f64>;

    fn loss(&self, w: &[f64]) -> f64;

    fn exact_grad(&self, w: &[f64]) -> Vec<f64>;

    fn sg(&self, w: &[f64], batch: &Batch<'_>) -> Vec<f64>;

    /// Number of training rows for dataset-backed problems.
    fn dataset_len(&self) -> Option<usize> {
        None
    }

    fn optimum(&self) -> Option<Vec<f64>> {
        None
    }

    /// Gradient Lipschitz constant, when known.
    fn smoothness(&self) -> Option<f64> {
        None
    }
}

/// Stochastic gradient as a shaped gradient vector.
pub fn sg_oracle(problem: &dyn Problem, w: &[f64], batch_size: usize, seed: u64) -> Result<Gradient<f64>> {
    if batch_size == 0 {
        return Err(invalid!("batch size must be at least 1"));
    }
    let shape = vec![problem.dim()];
    Gradient::new(problem.sg(w, &Batch::sampled(batch_size, seed)), shape)
}

fn dataset_rows(batch: &Batch<'_>, n: usize) -> Vec<usize> {
    match batch.indices {
        Some(ix) => ix.to_vec(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(batch.seed);
            (0..batch.size).map(|_| rng.random_range(0..n)).collect()
        }
    }
}

/// `0.5 sum_i h_i (w_i - w*_i)^2` with additive Gaussian gradient noise of
/// per-element variance `sigma^2 / batch`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    h: Vec<f64>,
    w_star: Vec<f64>,
    sigma: f64,
    w0: Vec<f64>,
}

impl Quadratic {
    pub fn new(h: Vec<f64>, w_star: Vec<f64>, sigma: f64) -> Result<Self> {
        if h.len() != w_star.len() || h.is_empty() {
            return Err(invalid!("curvature and optimum must have equal nonzero length"));
        }
        if h.iter().any(|&x| !(x > 0.0)) || !(sigma >= 0.0) {
            return Err(invalid!("curvatures must be positive and sigma nonnegative"));
        }
        let w0 = vec![0.0; h.len()];
        Ok(Self { h, w_star, sigma, w0 })
    }

    /// Unit curvature with `w*` drawn on the sphere of radius `radius`.
    pub fn isotropic(n: usize, radius: f64, sigma: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Self::new(vec![1.0; n], v.iter().map(|x| radius * x / norm).collect(), sigma)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `E ||sg - grad||^2` for a batch of `batch` samples.
    pub fn sg_variance(&self, batch: usize) -> f64 {
        self.dim() as f64 * self.sigma * self.sigma / batch as f64
    }
}

impl Problem for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn dim(&self) -> usize {
        self.h.len()
    }

    fn init(&self) -> Vec<f64> {
        self.w0.clone()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        0.5 * w.iter().zip(&self.w_star).zip(&self.h).map(|((a, b), h)| h * (a - b) * (a - b)).sum::<f64>()
    }

    fn exact_grad(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.w_star).zip(&self.h).map(|((a, b), h)| h * (a - b)).collect()
    }

    fn sg(&self, w: &[f64], batch: &Batch<'_>) -> Vec<f64> {
        let mut g = self.exact_grad(w);
        if self.sigma > 0.0 {
            let noise = Normal::new(0.0, self.sigma / (batch.size as f64).sqrt()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(batch.seed);
            for gi in &mut g {
                *gi += noise.sample(&mut rng);
            }
        }
        g
    }

    fn optimum(&self) -> Option<Vec<f64>> {
        Some(self.w_star.clone())
    }

    fn smoothness(&self) -> Option<f64> {
        self.h.iter().copied().reduce(f64::max)
    }
}

/// Labelled feature rows stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() || labels.is_empty() {
            return Err(invalid!("dataset has {} features for {} rows of width {dim}", features.len(), labels.len()));
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(invalid!("label outside 0..{classes}"));
        }
        Ok(Self {
            features,
            dim,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Two isotropic Gaussian blobs centered at `+-(1, 1)`.
    pub fn two_blobs(n: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, std).unwrap();
        let mut features = Vec::with_capacity(2 * n);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for &l in &labels {
            let c = if l == 1 { 1.0 } else { -1.0 };
            features.push(c + noise.sample(&mut rng));
            features.push(c + noise.sample(&mut rng));
        }
        Self::new(features, 2, labels, 2).unwrap()
    }

    /// Two interleaving half circles with Gaussian jitter.
    pub fn two_moons(n: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter = Normal::new(0.0, noise).unwrap();
        let mut features = Vec::with_capacity(2 * n);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for &l in &labels {
            let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (x, y) = if l == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            features.push(x + jitter.sample(&mut rng));
            features.push(y + jitter.sample(&mut rng));
        }
        Self::new(features, 2, labels, 2).unwrap()
    }
}

/// `(1/2N) ||A w - b||^2` with `b = A w*`, so `w*` is an exact minimizer.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    a: Vec<f64>,
    b: Vec<f64>,
    dim: usize,
    w_star: Vec<f64>,
}

impl LeastSquares {
    pub fn new(a: Vec<f64>, dim: usize, w_star: Vec<f64>) -> Result<Self> {
        if dim == 0 || a.is_empty() || a.len() % dim != 0 || w_star.len() != dim {
            return Err(invalid!("design matrix does not match dimension {dim}"));
        }
        let b = a.chunks(dim).map(|row| dot(row, &w_star)).collect();
        Ok(Self { a, b, dim, w_star })
    }

    pub fn random(rows: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (0..rows * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w_star = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self::new(a, dim, w_star).unwrap()
    }

    fn rows(&self) -> usize {
        self.b.len()
    }

    fn grad_on(&self, w: &[f64], rows: impl Iterator<Item = usize>) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        let mut count = 0usize;
        for i in rows {
            let row = &self.a[i * self.dim..(i + 1) * self.dim];
            let r = dot(row, w) - self.b[i];
            for (gj, aj) in g.iter_mut().zip(row) {
                *gj += r * aj;
            }
            count += 1;
        }
        g.iter_mut().for_each(|x| *x /= count as f64);
        g
    }
}

impl Problem for LeastSquares {
    fn name(&self) -> &str {
        "least_squares"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn init(&self) -> Vec<f64> {
        vec![0.0; self.dim]
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let s: f64 = self.a.chunks(self.dim).zip(&self.b).map(|(row, b)| (dot(row, w) - b).powi(2)).sum();
        0.5 * s / self.rows() as f64
    }

    fn exact_grad(&self, w: &[f64]) -> Vec<f64> {
        self.grad_on(w, 0..self.rows())
    }

    fn sg(&self, w: &[f64], batch: &Batch<'_>) -> Vec<f64> {
        self.grad_on(w, dataset_rows(batch, self.rows()).into_iter())
    }

    fn dataset_len(&self) -> Option<usize> {
        Some(self.rows())
    }

    fn optimum(&self) -> Option<Vec<f64>> {
        Some(self.w_star.clone())
    }

    fn smoothness(&self) -> Option<f64> {
        let (a, d, n) = (&self.a, self.dim, self.rows() as f64);
        Some(top_eigenvalue(d, |v| {
            let mut out = vec![0.0; d];
            for row in a.chunks(d) {
                let r = dot(row, v) / n;
                out.iter_mut().zip(row).for_each(|(o, x)| *o += r * x);
            }
            out
        }))
    }
}

/// L2-regularized logistic regression with a bias term; labels in `{0, 1}`.
#[derive(Debug, Clone)]
pub struct Logistic {
    data: Dataset,
    lambda: f64,
}

impl Logistic {
    pub fn new(data: Dataset, lambda: f64) -> Result<Self> {
        if data.classes != 2 {
            return Err(invalid!("logistic regression needs two classes, got {}", data.classes));
        }
        Ok(Self { data, lambda })
    }

    fn margin(&self, w: &[f64], i: usize) -> (f64, f64) {
        let d = self.data.dim;
        let z = dot(self.data.row(i), &w[..d]) + w[d];
        let y = if self.data.labels[i] == 1 { 1.0 } else { -1.0 };
        (y, z)
    }

    fn grad_on(&self, w: &[f64], rows: &[usize]) -> Vec<f64> {
        let d = self.data.dim;
        let mut g: Vec<f64> = w.iter().map(|x| self.lambda * x).collect();
        let scale = 1.0 / rows.len() as f64;
        for &i in rows {
            let (y, z) = self.margin(w, i);
            // d/dz log(1 + exp(-y z)) = -y sigmoid(-y z)
            let c = -y * sigmoid(-y * z) * scale;
            for (gj, xj) in g[..d].iter_mut().zip(self.data.row(i)) {
                *gj += c * xj;
            }
            g[d] += c;
        }
        g
    }
}

impl Problem for Logistic {
    fn name(&self) -> &str {
        "logistic"
    }

    fn dim(&self) -> usize {
        self.data.dim + 1
    }

    fn init(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let n = self.data.len();
        let data: f64 = (0..n)
            .map(|i| {
                let (y, z) = self.margin(w, i);
                softplus(-y * z)
            })
            .sum::<f64>()
            / n as f64;
        data + 0.5 * self.lambda * dot(w, w)
    }

    fn exact_grad(&self, w: &[f64]) -> Vec<f64> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        self.grad_on(w, &all)
    }

    fn sg(&self, w: &[f64], batch: &Batch<'_>) -> Vec<f64> {
        self.grad_on(w, &dataset_rows(batch, self.data.len()))
    }

    fn dataset_len(&self) -> Option<usize> {
        Some(self.data.len())
    }

    fn smoothness(&self) -> Option<f64> {
        let d = self.data.dim;
        let n = self.data.len() as f64;
        let data = &self.data;
        let top = top_eigenvalue(d + 1, |v| {
            let mut out = vec![0.0; d + 1];
            for i in 0..data.len() {
                let row = data.row(i);
                let r = (dot(row, &v[..d]) + v[d]) / n;
                out[..d].iter_mut().zip(row).for_each(|(o, x)| *o += r * x);
                out[d] += r;
            }
            out
        });
        Some(0.25 * top + self.lambda)
    }
}

/// Fully connected network with tanh hidden layers and a softmax
/// cross-entropy head. Parameters are stored layer by layer, weights
/// (`out x in`, row-major) followed by biases.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<usize>,
    data: Dataset,
    init_seed: u64,
}

impl Mlp {
    pub fn new(layers: Vec<usize>, data: Dataset, init_seed: u64) -> Result<Self> {
        if layers.len() < 2 || layers.contains(&0) {
            return Err(invalid!("network needs at least an input and an output layer"));
        }
        if layers[0] != data.dim || *layers.last().unwrap() != data.classes {
            return Err(invalid!(
                "layer sizes {:?} do not match {}-dimensional data with {} classes",
                layers,
                data.dim,
                data.classes
            ));
        }
        Ok(Self {
            layers,
            data,
            init_seed,
        })
    }

    /// The 2-16-2 network on a two-moons set.
    pub fn moons(n: usize, seed: u64) -> Self {
        Self::new(vec![2, 16, 2], Dataset::two_moons(n, 0.1, seed), seed).unwrap()
    }

    pub fn param_count(layers: &[usize]) -> usize {
        layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Classification accuracy on the training rows.
    pub fn accuracy(&self, w: &[f64]) -> f64 {
        let correct = (0..self.data.len())
            .filter(|&i| {
                let acts = self.forward(w, self.data.row(i));
                let out = acts.last().unwrap();
                argmax(out) == self.data.labels[i]
            })
            .count();
        correct as f64 / self.data.len() as f64
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for w in self.layers.windows(2) {
            off.push(off.last().unwrap() + w[0] * w[1] + w[1]);
        }
        off
    }

    /// Activations of every layer; the last entry holds the logits.
    fn forward(&self, w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let off = self.offsets();
        let last = self.layers.len() - 2;
        let mut acts = vec![x.to_vec()];
        for (l, sizes) in self.layers.windows(2).enumerate() {
            let (fan_in, fan_out) = (sizes[0], sizes[1]);
            let weights = &w[off[l]..off[l] + fan_in * fan_out];
            let bias = &w[off[l] + fan_in * fan_out..off[l + 1]];
            let input = acts.last().unwrap();
            let z: Vec<f64> = weights
                .chunks(fan_in)
                .zip(bias)
                .map(|(row, b)| dot(row, input) + b)
                .map(|z| if l == last { z } else { z.tanh() })
                .collect();
            acts.push(z);
        }
        acts
    }

    fn example_loss(&self, w: &[f64], i: usize) -> f64 {
        let acts = self.forward(w, self.data.row(i));
        let logits = acts.last().unwrap();
        log_sum_exp(logits) - logits[self.data.labels[i]]
    }

    fn grad_on(&self, w: &[f64], rows: &[usize]) -> Vec<f64> {
        let off = self.offsets();
        let mut g = vec![0.0; w.len()];
        let scale = 1.0 / rows.len() as f64;
        for &i in rows {
            let acts = self.forward(w, self.data.row(i));
            let logits = acts.last().unwrap();
            let lse = log_sum_exp(logits);
            let mut delta: Vec<f64> = logits.iter().map(|z| (z - lse).exp() * scale).collect();
            delta[self.data.labels[i]] -= scale;
            for l in (0..self.layers.len() - 1).rev() {
                let (fan_in, fan_out) = (self.layers[l], self.layers[l + 1]);
                let input = &acts[l];
                let wbase = off[l];
                let bbase = off[l] + fan_in * fan_out;
                for (o, &d) in delta.iter().enumerate() {
                    let row = &mut g[wbase + o * fan_in..wbase + (o + 1) * fan_in];
                    row.iter_mut().zip(input).for_each(|(gj, xj)| *gj += d * xj);
                    g[bbase + o] += d;
                }
                if l > 0 {
                    let weights = &w[wbase..bbase];
                    let mut back = vec![0.0; fan_in];
                    for (o, &d) in delta.iter().enumerate() {
                        let row = &weights[o * fan_in..(o + 1) * fan_in];
                        back.iter_mut().zip(row).for_each(|(b, wj)| *b += d * wj);
                    }
                    // tanh' = 1 - a^2
                    delta = back.iter().zip(input).map(|(b, a)| b * (1.0 - a * a)).collect();
                }
            }
        }
        g
    }
}

impl Problem for Mlp {
    fn name(&self) -> &str {
        "mlp"
    }

    fn dim(&self) -> usize {
        Self::param_count(&self.layers)
    }

    fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.windows(2).flat_map(|w| [vec![w[1], w[0]], vec![w[1]]]).collect()
    }

    /// Glorot-uniform weights, zero biases.
    fn init(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        let mut w = Vec::with_capacity(self.dim());
        for s in self.layers.windows(2) {
            let limit = (6.0 / (s[0] + s[1]) as f64).sqrt();
            w.extend((0..s[0] * s[1]).map(|_| rng.random_range(-limit..limit)));
            w.extend(std::iter::repeat_n(0.0, s[1]));
        }
        w
    }

    fn loss(&self, w: &[f64]) -> f64 {
        (0..self.data.len()).map(|i| self.example_loss(w, i)).sum::<f64>() / self.data.len() as f64
    }

    fn exact_grad(&self, w: &[f64]) -> Vec<f64> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        self.grad_on(w, &all)
    }

    fn sg(&self, w: &[f64], batch: &Batch<'_>) -> Vec<f64> {
        self.grad_on(w, &dataset_rows(batch, self.data.len()))
    }

    fn dataset_len(&self) -> Option<usize> {
        Some(self.data.len())
    }
}

/// Shuffles `0..n` with `seed` and returns the `worker`-th contiguous slice
/// of length `per_worker`.
pub fn worker_rows(n: usize, seed: u64, worker: usize, per_worker: usize) -> Result<Vec<usize>> {
    let end = (worker + 1) * per_worker;
    if end > n {
        return Err(invalid!("batch rows {}..{end} exceed the {n} dataset rows", worker * per_worker));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(perm[worker * per_worker..end].to_vec())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn argmax(z: &[f64]) -> usize {
    z.iter().enumerate().fold(0, |best, (i, &v)| if v > z[best] { i } else { best })
}

/// Largest eigenvalue of a symmetric positive semidefinite operator by power iteration.
fn top_eigenvalue(dim: usize, apply: impl Fn(&[f64]) -> Vec<f64>) -> f64 {
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let av = apply(&v);
        let norm = dot(&av, &av).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = dot(&v, &av);
        v = av.into_iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-12 * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}
