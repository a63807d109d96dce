//! Minimal 64-bit tensor and layer library: every layer the classifier uses,
//! each with an explicit backward pass, plus Adam and a finite-difference
//! gradient checker.

mod activation;
mod adam;
mod batchnorm;
mod conv;
mod dense;
pub mod gradcheck;
mod loss;
mod lstm;
mod params;
mod pool;
mod tensor;

pub use activation::{relu, relu_backward};
pub use adam::{Adam, AdamConfig};
pub use batchnorm::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, BatchNormCache, BatchNormGrads,
    BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{
    conv2d, conv2d_backward, conv_output_len, depthwise_conv2d, depthwise_conv2d_backward,
    ConvGrads,
};
pub use dense::{dense, dense_backward, DenseGrads};
pub use loss::{softmax, softmax_xent, softmax_xent_class};
pub use lstm::{
    bilstm, bilstm_backward, lstm_backward, lstm_forward, BiLstmCache, LstmCache, LstmGrads,
    LstmWeights,
};
pub use params::Params;
pub use pool::{maxpool2d, maxpool2d_backward, MaxPoolCache};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testutil {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::Tensor;

    pub fn random_tensor(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }
}
