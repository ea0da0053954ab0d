use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Variable<T> {
    pub value: Tensor<T>,
    /// Same shape as `value`; zero until a backward pass reaches it.
    pub grad: Tensor<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> Variable<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            value,
            grad,
            requires_grad: true,
        }
    }

    pub fn frozen(value: Tensor<T>) -> Self {
        Self {
            requires_grad: false,
            ..Self::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }

    /// Adds `g` into the gradient; `None` (unused in the graph) leaves it untouched.
    pub fn accumulate(&mut self, g: Option<&Tensor<T>>) {
        if let Some(g) = g {
            self.grad.add_assign(g);
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}
