use super::Tensor;
use crate::error::{Error, Result};

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.dims().to_vec(), data).expect("same shape")
}

/// Passes gradient where the input was strictly positive (derivative at 0 is 0).
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.dims() != grad_out.dims() {
        return Err(Error::shape(format!(
            "relu backward: input {:?} vs grad {:?}",
            input.dims(),
            grad_out.dims()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.dims().to_vec(), data)
}
