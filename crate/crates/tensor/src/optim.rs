use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::variable::Variable;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// One momentum-SGD update in place:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    cfg: SgdConfig,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TensorError::invalid("sgd_step", format!("learning rate {lr}")));
    }
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(TensorError::shape(
            "sgd_step",
            format!("param {:?} grad {:?}", param.shape(), grad.shape()),
        ));
    }
    if !grad.is_finite() {
        return Err(TensorError::NonFinite { op: "sgd_step" });
    }
    let (lr, m, wd) = (T::lit(lr), T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD with per-parameter velocity keyed by name.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: HashMap::new(),
        }
    }

    /// Updates `var` from its accumulated gradient, then clears the gradient.
    pub fn step(&mut self, name: &str, var: &mut Variable<T>, lr: f64) -> Result<()> {
        if !var.requires_grad {
            var.zero_grad();
            return Ok(());
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(var.value.shape().to_vec()));
        if v.shape() != var.value.shape() {
            // The parameter was reshaped (pruned); restart its momentum.
            *v = Tensor::zeros(var.value.shape().to_vec());
        }
        sgd_step(&mut var.value, &var.grad, v, lr, self.config)?;
        var.zero_grad();
        Ok(())
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn vanilla_step_moves_by_lr_times_grad() {
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = t(1.0);
        let mut v = t(0.0);
        sgd_step(&mut p, &t(0.5), &mut v, 0.1, cfg).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = t(1.0);
        let mut v = t(0.0);
        sgd_step(&mut p, &t(3.0), &mut v, 0.0, SgdConfig::default()).unwrap();
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let (lr, g) = (0.1, 2.0);
        let mut p = t(0.0);
        let mut v = t(0.0);
        sgd_step(&mut p, &t(g), &mut v, lr, cfg).unwrap();
        sgd_step(&mut p, &t(g), &mut v, lr, cfg).unwrap();
        // v1 = g, v2 = 0.9 g + g; p2 = -lr (v1 + v2)
        let expected = -lr * (g + 1.9 * g);
        assert!((p.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn non_finite_grad_is_rejected() {
        let mut p = t(0.0);
        let mut v = t(0.0);
        assert!(sgd_step(&mut p, &t(f64::NAN), &mut v, 0.1, SgdConfig::default()).is_err());
    }
}
