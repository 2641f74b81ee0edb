//! Hand-differentiated neural-network building blocks in double precision.

mod adam;
pub(crate) mod container;
mod gradcheck;
pub mod layers;
pub(crate) mod linalg;
mod loss;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use container::{read_container, write_container, ModelHeader, TensorEntry, FORMAT_VERSION};
pub use gradcheck::{grad_check, GradCheck};
pub use layers::{
    conv2d, conv2d_backward, dense, dense_backward, dropout, maxpool2d, maxpool2d_backward, relu,
    relu_grad, sigmoid, tanh, Conv2d, ConvGrads, Dense, DenseGrads, DropoutMask, MaxPool,
};
pub use loss::{bce_loss, sigmoid_bce, BCE_EPS};
pub use tensor::Tensor;

/// A model whose trainable tensors can be enumerated in a fixed declaration
/// order. The order is shared by optimizer state, gradients and the model
/// container.
pub trait Parameters {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters concatenated in declaration order.
    fn flat_params(&self) -> Vec<f64> {
        self.named_params()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Overwrites all parameters from a flat vector in declaration order.
    fn set_flat_params(&mut self, flat: &[f64]) -> crate::Result<()> {
        let total = self.param_count();
        if flat.len() != total {
            return Err(crate::Error::DimensionMismatch {
                context: "flat parameter vector".into(),
                expected: total,
                found: flat.len(),
            });
        }
        let mut offset = 0;
        for t in self.params_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Concatenates gradient tensors into one flat vector.
pub fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}
