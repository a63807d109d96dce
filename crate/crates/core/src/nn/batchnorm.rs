//! Batch normalization over an `N x F` batch.

use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

fn batch_dims(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize)> {
    let [n, f] = *x.dims() else {
        return Err(Error::shape(format!("batchnorm input: expected N x F, got {:?}", x.dims())));
    };
    gamma.expect_dims("batchnorm gamma", &[f])?;
    beta.expect_dims("batchnorm beta", &[f])?;
    Ok((n, f))
}

/// Normalizes with batch statistics (biased variance) and folds them into the
/// running statistics.
pub fn batchnorm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
) -> Result<(Tensor, BatchNormCache)> {
    let (n, f) = batch_dims(x, gamma, beta)?;
    if n < 2 {
        return Err(Error::shape("batchnorm training needs a batch of at least 2"));
    }
    running_mean.expect_dims("batchnorm running mean", &[f])?;
    running_var.expect_dims("batchnorm running var", &[f])?;
    let data = x.data();
    let mut mean = vec![0.0; f];
    for row in data.chunks_exact(f) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; f];
    for row in data.chunks_exact(f) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut normalized = Vec::with_capacity(n * f);
    let mut out = Vec::with_capacity(n * f);
    for row in data.chunks_exact(f) {
        for j in 0..f {
            let xh = (row[j] - mean[j]) * inv_std[j];
            normalized.push(xh);
            out.push(xh * gamma.data()[j] + beta.data()[j]);
        }
    }
    for (r, &m) in running_mean.data_mut().iter_mut().zip(&mean) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(&var) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
    }
    let cache = BatchNormCache {
        normalized,
        inv_std,
        gamma: gamma.data().to_vec(),
        n,
    };
    Ok((Tensor::new(vec![n, f], out)?, cache))
}

/// Affine map using running statistics; works for any batch size.
pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Tensor> {
    let (n, f) = batch_dims(x, gamma, beta)?;
    running_mean.expect_dims("batchnorm running mean", &[f])?;
    running_var.expect_dims("batchnorm running var", &[f])?;
    let scale: Vec<f64> = gamma
        .data()
        .iter()
        .zip(running_var.data())
        .map(|(g, v)| g / (v + BN_EPSILON).sqrt())
        .collect();
    let mut out = Vec::with_capacity(n * f);
    for row in x.data().chunks_exact(f) {
        for j in 0..f {
            out.push((row[j] - running_mean.data()[j]) * scale[j] + beta.data()[j]);
        }
    }
    Tensor::new(vec![n, f], out)
}

pub fn batchnorm_backward(cache: &BatchNormCache, grad_out: &Tensor) -> Result<BatchNormGrads> {
    let f = cache.gamma.len();
    let n = cache.n;
    grad_out.expect_dims("batchnorm grad_out", &[n, f])?;
    let g = grad_out.data();
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    for (grow, xrow) in g.chunks_exact(f).zip(cache.normalized.chunks_exact(f)) {
        for j in 0..f {
            dbeta[j] += grow[j];
            dgamma[j] += grow[j] * xrow[j];
        }
    }
    let nf = n as f64;
    let mut dx = Vec::with_capacity(n * f);
    for (grow, xrow) in g.chunks_exact(f).zip(cache.normalized.chunks_exact(f)) {
        for j in 0..f {
            let k = cache.gamma[j] * cache.inv_std[j] / nf;
            dx.push(k * (nf * grow[j] - dbeta[j] - xrow[j] * dgamma[j]));
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(vec![n, f], dx)?,
        gamma: Tensor::from_vec(dgamma),
        beta: Tensor::from_vec(dbeta),
    })
}
