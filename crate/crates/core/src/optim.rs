//! Optimizers: SGD with classical momentum (the spec'd update rule) and
//! Adam, which copes far better with the dice-ratio loss whose gradients
//! scale inversely with the pixel count.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::ParameterSet;
use crate::tensor::{Scalar, Tensor};

/// Gradients keyed by layer name: `(kernel gradient, bias gradient)`.
pub type GradientMap<S> = BTreeMap<String, (Tensor<S>, Tensor<S>)>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum; ignored by Adam.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 4,
            epochs: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it freezes parameters, which is useful for
        // dry runs and tested behaviour.
        if self.learning_rate.is_nan()
            || self.learning_rate < 0.0
            || !self.learning_rate.is_finite()
        {
            return Err(Error::Config(format!(
                "learning rate must be a non-negative finite number, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if let OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } = self.kind
        {
            if !(0.0..1.0).contains(&beta1)
                || !(0.0..1.0).contains(&beta2)
                || epsilon <= 0.0
                || epsilon.is_nan()
            {
                return Err(Error::Config(format!(
                    "invalid adam parameters: beta1={beta1} beta2={beta2} epsilon={epsilon}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies one update with the configured algorithm.
    pub fn step<S: Scalar>(
        &self,
        params: &mut ParameterSet<S>,
        grads: &GradientMap<S>,
    ) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(
                params,
                grads,
                S::from_f64(self.learning_rate),
                S::from_f64(self.momentum),
            ),
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => adam_step(params, grads, self.learning_rate, beta1, beta2, epsilon),
        }
    }
}

/// One momentum-SGD update: `v <- momentum * v + g`, `p <- p - lr * v`.
///
/// Every layer present in `grads` must match the parameter shapes; layers
/// without an entry are left untouched.
pub fn sgd_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &GradientMap<S>,
    learning_rate: S,
    momentum: S,
) -> Result<()> {
    for (name, (kernel_grad, bias_grad)) in grads {
        let layer = params
            .layer_mut(name)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown layer `{name}`")))?;
        if kernel_grad.shape() != layer.kernel.shape() {
            return Err(Error::Shape(format!(
                "layer `{name}` kernel gradient shape {:?} != parameter shape {:?}",
                kernel_grad.shape(),
                layer.kernel.shape()
            )));
        }
        if bias_grad.shape() != layer.bias.shape() {
            return Err(Error::Shape(format!(
                "layer `{name}` bias gradient shape {:?} != parameter shape {:?}",
                bias_grad.shape(),
                layer.bias.shape()
            )));
        }
        update(
            &mut layer.kernel,
            &mut layer.kernel_velocity,
            kernel_grad,
            learning_rate,
            momentum,
        );
        update(
            &mut layer.bias,
            &mut layer.bias_velocity,
            bias_grad,
            learning_rate,
            momentum,
        );
    }
    Ok(())
}

fn update<S: Scalar>(
    param: &mut Tensor<S>,
    velocity: &mut Tensor<S>,
    grad: &Tensor<S>,
    lr: S,
    momentum: S,
) {
    let v = velocity.data_mut();
    let p = param.data_mut();
    for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
        *vv = momentum * *vv + *gv;
        *pv = *pv - lr * *vv;
    }
}

/// One Adam update. The layer's velocity buffers hold the first moment,
/// the second-moment buffers the squared-gradient average;
/// `params.step_count` drives the bias correction.
pub fn adam_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &GradientMap<S>,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    params.step_count += 1;
    let t = params.step_count as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);
    for (name, (kernel_grad, bias_grad)) in grads {
        let layer = params
            .layer_mut(name)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown layer `{name}`")))?;
        if kernel_grad.shape() != layer.kernel.shape() || bias_grad.shape() != layer.bias.shape() {
            return Err(Error::Shape(format!(
                "layer `{name}` gradient shapes do not match the parameters"
            )));
        }
        adam_update(
            &mut layer.kernel,
            &mut layer.kernel_velocity,
            &mut layer.kernel_second_moment,
            kernel_grad,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            correction1,
            correction2,
        );
        adam_update(
            &mut layer.bias,
            &mut layer.bias_velocity,
            &mut layer.bias_second_moment,
            bias_grad,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            correction1,
            correction2,
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adam_update<S: Scalar>(
    param: &mut Tensor<S>,
    first: &mut Tensor<S>,
    second: &mut Tensor<S>,
    grad: &Tensor<S>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    correction1: f64,
    correction2: f64,
) {
    let m = first.data_mut();
    let v = second.data_mut();
    let p = param.data_mut();
    for (((pv, mv), vv), gv) in p
        .iter_mut()
        .zip(m.iter_mut())
        .zip(v.iter_mut())
        .zip(grad.data())
    {
        let g = gv.to_f64();
        let m_new = beta1 * mv.to_f64() + (1.0 - beta1) * g;
        let v_new = beta2 * vv.to_f64() + (1.0 - beta2) * g * g;
        *mv = S::from_f64(m_new);
        *vv = S::from_f64(v_new);
        let m_hat = m_new / correction1;
        let v_hat = v_new / correction2;
        *pv = S::from_f64(pv.to_f64() - lr * m_hat / (v_hat.sqrt() + epsilon));
    }
}
