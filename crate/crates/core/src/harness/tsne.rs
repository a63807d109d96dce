//! Exact t-SNE for a few hundred points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity >= 1.0) || self.iterations == 0 || !(self.learning_rate > 0.0) || !(self.exaggeration >= 1.0) {
            return Err(Error::config("t-SNE needs perplexity >= 1, iterations >= 1, learning_rate > 0, exaggeration >= 1"));
        }
        if !(0.0..1.0).contains(&self.initial_momentum) || !(0.0..1.0).contains(&self.final_momentum) {
            return Err(Error::config("t-SNE momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Perplexity actually used for `n` points.
    pub fn effective_perplexity(&self, n: usize) -> f64 {
        self.perplexity.min((n as f64 - 1.0) / 3.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P || Q) after every iteration, computed with the unexaggerated P.
    pub kl: Vec<f64>,
    pub perplexity: f64,
}

const JITTER: f64 = 1e-10;
const MIN_PROB: f64 = 1e-12;
const MIN_GAIN: f64 = 0.01;

fn sq_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional affinities of row `i` with the bandwidth bisected so the
/// entropy matches `ln(perplexity)`.
fn row_affinities(dist: &[f64], i: usize, target: f64) -> Vec<f64> {
    let n = dist.len();
    let mut beta = 1.0;
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut p = vec![0.0; n];
    // Shift by the nearest distance so exp() cannot underflow for every j.
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    for _ in 0..100 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for j in 0..n {
            p[j] = if j == i { 0.0 } else { (-(dist[j] - dmin) * beta).exp() };
            sum += p[j];
            weighted += (dist[j] - dmin) * p[j];
        }
        let entropy = sum.ln() + beta * weighted / sum;
        let diff = entropy - target;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
        }
    }
    let sum: f64 = p.iter().sum();
    p.iter().map(|v| v / sum).collect()
}

fn joint_probabilities(x: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = x.len();
    let dist = sq_distances(x);
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = row_affinities(&dist[i * n..(i + 1) * n], i, target);
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(MIN_PROB);
            }
        }
    }
    joint
}

/// Moves exact duplicates of an earlier point by a seeded offset of size
/// `JITTER` so every point has a well-defined bandwidth.
fn separate_duplicates(x: &mut [Vec<f64>], rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, JITTER).unwrap_or_else(|_| unreachable!());
    for i in 1..x.len() {
        if (0..i).any(|j| x[j] == x[i]) {
            for v in x[i].iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }
}

fn kl_divergence(p: &[f64], q_num: &[f64], q_sum: f64) -> f64 {
    p.iter()
        .zip(q_num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &num)| pij * (pij / (num / q_sum).max(MIN_PROB)).ln())
        .sum()
}

/// Embeds the rows of `x` in two dimensions.
pub fn tsne_2d(x: &[Vec<f64>], config: &TsneConfig, seed: u64) -> Result<TsneResult> {
    config.validate()?;
    let n = x.len();
    if n < 4 {
        return Err(Error::config(format!("t-SNE needs at least 4 points, got {n}")));
    }
    let dim = x[0].len();
    if dim == 0 || x.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("t-SNE input rows must be non-empty and of equal length"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config("t-SNE input contains non-finite values"));
    }
    let perplexity = config.effective_perplexity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x.to_vec();
    separate_duplicates(&mut x, &mut rng);
    let p = joint_probabilities(&x, perplexity);

    let init = Normal::new(0.0, 1e-4).unwrap_or_else(|_| unreachable!());
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n];
    let mut kl = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let early = iter < config.exaggeration_iters;
        let exaggeration = if early { config.exaggeration } else { 1.0 };
        let momentum = if early { config.initial_momentum } else { config.final_momentum };

        let mut q_sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                num[j * n + i] = v;
                q_sum += 2.0 * v;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let nij = num[i * n + j];
                let mult = (exaggeration * p[i * n + j] - (nij / q_sum).max(MIN_PROB)) * nij;
                g[0] += mult * (y[i][0] - y[j][0]);
                g[1] += mult * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for d in 0..2 {
                gains[i][d] = if grad[i][d] * update[i][d] < 0.0 {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(MIN_GAIN)
                };
                update[i][d] = momentum * update[i][d] - config.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        for d in 0..2 {
            let mean = y.iter().map(|r| r[d]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|r| r[d] -= mean);
        }
        kl.push(kl_divergence(&p, &num, q_sum));
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            epoch: config.iterations,
            batch: 0,
            tensor: "t-SNE coordinates".into(),
        });
    }
    Ok(TsneResult { coords: y, kl, perplexity })
}

/// Fraction of points whose nearest other point (Euclidean) has the same label.
pub fn nn_agreement(coords: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = coords.len();
    if n < 2 {
        return 0.0;
    }
    let dist = sq_distances(coords);
    let hits = (0..n)
        .filter(|&i| {
            let nearest = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| dist[i * n + a].total_cmp(&dist[i * n + b]))
                .unwrap_or(i);
            labels[nearest] == labels[i]
        })
        .count();
    hits as f64 / n as f64
}
