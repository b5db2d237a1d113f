use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

/// A named trainable tensor with its optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
    pub adam: AdamState<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let n = tensor.numel();
        Parameter {
            name: name.into(),
            tensor: Tensor {
                requires_grad: true,
                grad: None,
                ..tensor
            },
            frozen: false,
            adam: AdamState {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                step: 0,
            },
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.tensor.grad.as_deref()
    }

    /// Fresh optimiser state, values cast to another precision.
    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        let mut p = Parameter::new(self.name.clone(), self.tensor.cast());
        p.frozen = self.frozen;
        p
    }

    /// Tensor to insert into a graph: trainable unless frozen.
    pub fn graph_input(&self) -> Tensor<T> {
        Tensor {
            shape: self.tensor.shape.clone(),
            data: self.tensor.data.clone(),
            grad: None,
            requires_grad: !self.frozen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// One bias-corrected Adam update. Frozen parameters and parameters without
/// a gradient are left bit-identical; every gradient is cleared afterwards.
pub fn adam_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::validation(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
        return Err(Error::validation("adam: betas must lie in [0, 1) and eps must be positive"));
    }
    let (b1, b2) = (T::of_f64(cfg.beta1), T::of_f64(cfg.beta2));
    let (lr, eps) = (T::of_f64(cfg.lr), T::of_f64(cfg.eps));
    for p in params {
        let Some(grad) = p.tensor.grad.take() else { continue };
        if p.frozen {
            continue;
        }
        p.adam.step += 1;
        let t = p.adam.step as i32;
        let bc1 = T::of_f64(1.0 - cfg.beta1.powi(t));
        let bc2 = T::of_f64(1.0 - cfg.beta2.powi(t));
        let st = &mut p.adam;
        for (((w, g), m), v) in p.tensor.data.iter_mut().zip(&grad).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * *g;
            *v = b2 * *v + (T::one() - b2) * *g * *g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
