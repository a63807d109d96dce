//! Max pooling over `H x W x C` tensors.

use super::Tensor;
use crate::error::{Error, Result};

/// Flat input index of the winning element for every output element.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPoolCache {
    input_dims: Vec<usize>,
    argmax: Vec<usize>,
}

/// Per-channel window maximum; ties go to the first element in row-major order.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, MaxPoolCache)> {
    let [h, w, c] = *input.dims() else {
        return Err(Error::shape(format!(
            "maxpool input: expected H x W x C, got {:?}",
            input.dims()
        )));
    };
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::shape(format!(
            "pool window {window} (stride {stride}) does not fit {h}x{w}"
        )));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    let mut argmax = Vec::with_capacity(ho * wo * c);
    for p in 0..ho {
        for q in 0..wo {
            for ch in 0..c {
                let mut best = usize::MAX;
                let mut best_val = f64::NEG_INFINITY;
                for u in 0..window {
                    for v in 0..window {
                        let idx = ((p * stride + u) * w + q * stride + v) * c + ch;
                        if best == usize::MAX || x[idx] > best_val {
                            best = idx;
                            best_val = x[idx];
                        }
                    }
                }
                out.push(best_val);
                argmax.push(best);
            }
        }
    }
    let pooled = Tensor::new(vec![ho, wo, c], out)?;
    Ok((
        pooled,
        MaxPoolCache {
            input_dims: input.dims().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward(cache: &MaxPoolCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::shape(format!(
            "maxpool grad_out has {} values, expected {}",
            grad_out.len(),
            cache.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(&cache.input_dims);
    let d = dx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, EPSILON};
    use crate::nn::testutil::random_tensor;

    #[test]
    fn picks_window_maximum() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn ties_route_gradient_to_first_element() {
        let x = Tensor::filled(&[4, 4, 1], 3.0);
        let (y, cache) = maxpool2d(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let dx = maxpool2d_backward(&cache, &Tensor::filled(y.dims(), 1.0)).unwrap();
        let mut expected = vec![0.0; 16];
        for i in [0, 2, 8, 10] {
            expected[i] = 1.0;
        }
        assert_eq!(dx.data(), &expected[..]);
    }

    #[test]
    fn channels_pool_independently() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 9.0, 5.0, 2.0]).unwrap();
        let (y, _) = maxpool2d(&x, 1, 1).unwrap();
        assert_eq!(y, x);
        let (y, _) = maxpool2d(&Tensor::new(vec![2, 1, 2], vec![1.0, 9.0, 5.0, 2.0]).unwrap(), 1, 1)
            .unwrap();
        assert_eq!(y.data(), &[1.0, 9.0, 5.0, 2.0]);
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 8.0, 4.0, 2.0, 3.0, 6.0, 0.0, 7.0]).unwrap();
        let (y, _) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0, 8.0]);
    }

    #[test]
    fn oversized_window_rejected() {
        assert!(maxpool2d(&Tensor::zeros(&[2, 3, 1]), 3, 1).is_err());
        assert!(maxpool2d(&Tensor::zeros(&[2, 3]), 1, 1).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            // random continuous values are tie-free with probability one
            let x = random_tensor(&[6, 6, 2], seed);
            let (y, cache) = maxpool2d(&x, 2, 2).unwrap();
            let proj = random_tensor(y.dims(), seed + 50);
            let dx = maxpool2d_backward(&cache, &proj).unwrap();
            let err = grad_check(
                |v| {
                    let t = Tensor::new(x.dims().to_vec(), v.to_vec()).unwrap();
                    let (y, _) = maxpool2d(&t, 2, 2).unwrap();
                    y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
                },
                x.data(),
                dx.data(),
                EPSILON,
            );
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }
}
