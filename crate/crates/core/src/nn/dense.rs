//! Fully connected layer `y = W^T x + b` with `W` stored `D x K`.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize)> {
    match (x.dims(), w.dims()) {
        ([d], [wd, k]) if d == wd => Ok((*d, *k)),
        (xd, wd) => Err(Error::shape(format!("dense: input {xd:?} vs weight {wd:?}"))),
    }
}

pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = dims(x, w)?;
    b.expect_dims("dense bias", &[k])?;
    let mut out = b.data().to_vec();
    for (&xi, row) in x.data().iter().zip(w.data().chunks_exact(k)) {
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    Ok(Tensor::from_vec(out))
}

pub fn dense_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let (d, k) = dims(x, w)?;
    grad_out.expect_dims("dense grad_out", &[k])?;
    let g = grad_out.data();
    let mut dx = Vec::with_capacity(d);
    let mut dw = Vec::with_capacity(d * k);
    for (&xi, row) in x.data().iter().zip(w.data().chunks_exact(k)) {
        dx.push(row.iter().zip(g).map(|(a, b)| a * b).sum());
        dw.extend(g.iter().map(|gv| xi * gv));
    }
    Ok(DenseGrads {
        input: Tensor::from_vec(dx),
        weight: Tensor::new(vec![d, k], dw)?,
        bias: grad_out.clone(),
    })
}
