//! 2-D convolution over `H x W x C` inputs (cross-correlation convention) and
//! its depthwise variant.

use super::Tensor;
use crate::error::{Error, Result};

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn hwc(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [h, w, c] => Ok((h, w, c)),
        ref d => Err(Error::shape(format!("{what}: expected H x W x C, got {d:?}"))),
    }
}

fn out_dims(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    match (conv_output_len(h, k, stride, pad), conv_output_len(w, k, stride, pad)) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::shape(format!(
            "kernel {k} (stride {stride}, padding {pad}) does not fit {h}x{w}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// `out[p,q,f] = sum_{u,v,c} K[u,v,c,f] * in[p*s+u-pad, q*s+v-pad, c] + b[f]`,
/// zero outside the input.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (h, w, c) = hwc(input, "conv2d input")?;
    let (k, f) = conv_kernel_dims(kernel, c)?;
    bias.expect_dims("conv2d bias", &[f])?;
    let (ho, wo) = out_dims(h, w, k, stride, padding)?;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; ho * wo * f];
    for p in 0..ho {
        for q in 0..wo {
            let o = &mut out[(p * wo + q) * f..(p * wo + q + 1) * f];
            o.copy_from_slice(bias.data());
            for u in 0..k {
                let Some(y) = (p * stride + u).checked_sub(padding).filter(|&y| y < h) else {
                    continue;
                };
                for v in 0..k {
                    let Some(xx) = (q * stride + v).checked_sub(padding).filter(|&x| x < w) else {
                        continue;
                    };
                    let pixel = &x[(y * w + xx) * c..(y * w + xx + 1) * c];
                    let kbase = (u * k + v) * c * f;
                    for (ci, &a) in pixel.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let krow = &kd[kbase + ci * f..kbase + (ci + 1) * f];
                        for (acc, &kv) in o.iter_mut().zip(krow) {
                            *acc += a * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ho, wo, f], out)
}

fn conv_kernel_dims(kernel: &Tensor, channels: usize) -> Result<(usize, usize)> {
    match *kernel.dims() {
        [k1, k2, c, f] if k1 == k2 && c == channels => Ok((k1, f)),
        ref d => Err(Error::shape(format!(
            "conv2d kernel: expected k x k x {channels} x F, got {d:?}"
        ))),
    }
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let (h, w, c) = hwc(input, "conv2d input")?;
    let (k, f) = conv_kernel_dims(kernel, c)?;
    let (ho, wo) = out_dims(h, w, k, stride, padding)?;
    grad_out.expect_dims("conv2d grad_out", &[ho, wo, f])?;
    let x = input.data();
    let kd = kernel.data();
    let g = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; f];
    for p in 0..ho {
        for q in 0..wo {
            let go = &g[(p * wo + q) * f..(p * wo + q + 1) * f];
            for (acc, &gv) in db.iter_mut().zip(go) {
                *acc += gv;
            }
            for u in 0..k {
                let Some(y) = (p * stride + u).checked_sub(padding).filter(|&y| y < h) else {
                    continue;
                };
                for v in 0..k {
                    let Some(xx) = (q * stride + v).checked_sub(padding).filter(|&x| x < w) else {
                        continue;
                    };
                    let pix = (y * w + xx) * c;
                    let kbase = (u * k + v) * c * f;
                    for ci in 0..c {
                        let a = x[pix + ci];
                        let krow = &kd[kbase + ci * f..kbase + (ci + 1) * f];
                        let dkrow = &mut dk[kbase + ci * f..kbase + (ci + 1) * f];
                        let mut s = 0.0;
                        for ((dkv, &kv), &gv) in dkrow.iter_mut().zip(krow).zip(go) {
                            *dkv += a * gv;
                            s += kv * gv;
                        }
                        dx[pix + ci] += s;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.dims().to_vec(), dx)?,
        kernel: Tensor::new(kernel.dims().to_vec(), dk)?,
        bias: Tensor::new(vec![f], db)?,
    })
}

fn depthwise_kernel_dims(kernel: &Tensor, channels: usize) -> Result<usize> {
    match *kernel.dims() {
        [k1, k2, c] if k1 == k2 && c == channels => Ok(k1),
        ref d => Err(Error::shape(format!(
            "depthwise kernel: expected k x k x {channels}, got {d:?}"
        ))),
    }
}

/// One `k x k` filter per channel: `out[p,q,c] = sum_{u,v} K[u,v,c] * in[.., .., c] + b[c]`.
pub fn depthwise_conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (h, w, c) = hwc(input, "depthwise input")?;
    let k = depthwise_kernel_dims(kernel, c)?;
    bias.expect_dims("depthwise bias", &[c])?;
    let (ho, wo) = out_dims(h, w, k, stride, padding)?;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; ho * wo * c];
    for p in 0..ho {
        for q in 0..wo {
            let o = &mut out[(p * wo + q) * c..(p * wo + q + 1) * c];
            o.copy_from_slice(bias.data());
            for u in 0..k {
                let Some(y) = (p * stride + u).checked_sub(padding).filter(|&y| y < h) else {
                    continue;
                };
                for v in 0..k {
                    let Some(xx) = (q * stride + v).checked_sub(padding).filter(|&x| x < w) else {
                        continue;
                    };
                    let pixel = &x[(y * w + xx) * c..(y * w + xx + 1) * c];
                    let krow = &kd[(u * k + v) * c..(u * k + v + 1) * c];
                    for ((acc, &a), &kv) in o.iter_mut().zip(pixel).zip(krow) {
                        *acc += a * kv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![ho, wo, c], out)
}

pub fn depthwise_conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let (h, w, c) = hwc(input, "depthwise input")?;
    let k = depthwise_kernel_dims(kernel, c)?;
    let (ho, wo) = out_dims(h, w, k, stride, padding)?;
    grad_out.expect_dims("depthwise grad_out", &[ho, wo, c])?;
    let x = input.data();
    let kd = kernel.data();
    let g = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; c];
    for p in 0..ho {
        for q in 0..wo {
            let go = &g[(p * wo + q) * c..(p * wo + q + 1) * c];
            for (acc, &gv) in db.iter_mut().zip(go) {
                *acc += gv;
            }
            for u in 0..k {
                let Some(y) = (p * stride + u).checked_sub(padding).filter(|&y| y < h) else {
                    continue;
                };
                for v in 0..k {
                    let Some(xx) = (q * stride + v).checked_sub(padding).filter(|&x| x < w) else {
                        continue;
                    };
                    let pix = (y * w + xx) * c;
                    let kb = (u * k + v) * c;
                    for ci in 0..c {
                        dk[kb + ci] += x[pix + ci] * go[ci];
                        dx[pix + ci] += kd[kb + ci] * go[ci];
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.dims().to_vec(), dx)?,
        kernel: Tensor::new(kernel.dims().to_vec(), dk)?,
        bias: Tensor::new(vec![c], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, EPSILON};
    use crate::nn::testutil::random_tensor;

    #[test]
    fn identity_kernel_is_identity() {
        let x = random_tensor(&[4, 5, 2], 1);
        let mut k = Tensor::zeros(&[1, 1, 2, 2]);
        k.data_mut()[0] = 1.0; // c0 -> f0
        k.data_mut()[3] = 1.0; // c1 -> f1
        let y = conv2d(&x, &k, &Tensor::zeros(&[2]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_computed_valid_convolution() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    /// Direct summation straight from the defining formula.
    fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, s: usize, pad: usize) -> Vec<f64> {
        let [h, w, c] = x.dims()[..] else { unreachable!() };
        let [ks, _, _, f] = k.dims()[..] else { unreachable!() };
        let ho = (h + 2 * pad - ks) / s + 1;
        let wo = (w + 2 * pad - ks) / s + 1;
        let mut out = Vec::new();
        for p in 0..ho {
            for q in 0..wo {
                for fi in 0..f {
                    let mut acc = b.data()[fi];
                    for u in 0..ks {
                        for v in 0..ks {
                            let y = (p * s + u) as isize - pad as isize;
                            let xx = (q * s + v) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                acc += k.data()[((u * ks + v) * c + ci) * f + fi]
                                    * x.data()[((y as usize) * w + xx as usize) * c + ci];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_summation_with_stride_and_padding() {
        let x = random_tensor(&[7, 6, 3], 2);
        let k = random_tensor(&[3, 3, 3, 4], 3);
        let b = random_tensor(&[4], 4);
        for (s, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let y = conv2d(&x, &k, &b, s, pad).unwrap();
            let expected = conv_oracle(&x, &k, &b, s, pad);
            for (a, e) in y.data().iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn valid_stride_one_shrinks_by_kernel_minus_one() {
        for (h, w, k) in [(5, 5, 3), (8, 6, 2), (4, 9, 4)] {
            let y = conv2d(
                &random_tensor(&[h, w, 2], 5),
                &random_tensor(&[k, k, 2, 3], 6),
                &Tensor::zeros(&[3]),
                1,
                0,
            )
            .unwrap();
            assert_eq!(y.dims(), &[h - k + 1, w - k + 1, 3]);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = random_tensor(&[4, 4, 2], 1);
        let k = random_tensor(&[3, 3, 3, 1], 1);
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).is_err());
        let k = random_tensor(&[5, 5, 2, 1], 1);
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).is_err());
        let k = random_tensor(&[3, 3, 2, 1], 1);
        assert!(conv2d(&x, &k, &Tensor::zeros(&[2]), 1, 0).is_err());
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1]), 0, 0).is_err());
    }

    fn check_conv_grads(seed: u64, stride: usize, pad: usize) -> f64 {
        let x = random_tensor(&[5, 6, 2], seed);
        let k = random_tensor(&[3, 3, 2, 3], seed + 100);
        let b = random_tensor(&[3], seed + 200);
        let y = conv2d(&x, &k, &b, stride, pad).unwrap();
        let proj = random_tensor(y.dims(), seed + 300);
        let loss = |y: &Tensor| y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>();
        let grads = conv2d_backward(&x, &k, stride, pad, &proj).unwrap();
        let ex = grad_check(
            |v| loss(&conv2d(&Tensor::new(x.dims().to_vec(), v.to_vec()).unwrap(), &k, &b, stride, pad).unwrap()),
            x.data(),
            grads.input.data(),
            EPSILON,
        );
        let ek = grad_check(
            |v| loss(&conv2d(&x, &Tensor::new(k.dims().to_vec(), v.to_vec()).unwrap(), &b, stride, pad).unwrap()),
            k.data(),
            grads.kernel.data(),
            EPSILON,
        );
        let eb = grad_check(
            |v| loss(&conv2d(&x, &k, &Tensor::from_vec(v.to_vec()), stride, pad).unwrap()),
            b.data(),
            grads.bias.data(),
            EPSILON,
        );
        ex.max(ek).max(eb)
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for (seed, s, pad) in [(1, 1, 1), (2, 1, 0), (3, 2, 1)] {
            let err = check_conv_grads(seed, s, pad);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn depthwise_matches_per_channel_conv() {
        let x = random_tensor(&[5, 5, 3], 9);
        let k = random_tensor(&[3, 3, 3], 10);
        let b = random_tensor(&[3], 11);
        let y = depthwise_conv2d(&x, &k, &b, 1, 1).unwrap();
        // oracle: full conv with a block-diagonal kernel
        let mut full = Tensor::zeros(&[3, 3, 3, 3]);
        for uv in 0..9 {
            for c in 0..3 {
                full.data_mut()[(uv * 3 + c) * 3 + c] = k.data()[uv * 3 + c];
            }
        }
        let expected = conv2d(&x, &full, &b, 1, 1).unwrap();
        for (a, e) in y.data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn depthwise_backward_matches_finite_differences() {
        let x = random_tensor(&[6, 5, 2], 12);
        let k = random_tensor(&[3, 3, 2], 13);
        let b = random_tensor(&[2], 14);
        let y = depthwise_conv2d(&x, &k, &b, 1, 1).unwrap();
        let proj = random_tensor(y.dims(), 15);
        let loss = |y: &Tensor| y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>();
        let g = depthwise_conv2d_backward(&x, &k, 1, 1, &proj).unwrap();
        let ex = grad_check(
            |v| loss(&depthwise_conv2d(&Tensor::new(x.dims().to_vec(), v.to_vec()).unwrap(), &k, &b, 1, 1).unwrap()),
            x.data(),
            g.input.data(),
            EPSILON,
        );
        let ek = grad_check(
            |v| loss(&depthwise_conv2d(&x, &Tensor::new(k.dims().to_vec(), v.to_vec()).unwrap(), &b, 1, 1).unwrap()),
            k.data(),
            g.kernel.data(),
            EPSILON,
        );
        assert!(ex.max(ek) < 1e-5, "{ex} {ek}");
    }
}
