//! Adam with bias correction.

use super::{Element, GridTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one tensor, plus the shared step
/// counter kept by the caller.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element> {
    pub m: GridTensor<T>,
    pub v: GridTensor<T>,
}

impl<T: Element> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            m: GridTensor::zeros(shape),
            v: GridTensor::zeros(shape),
        }
    }
}

/// One Adam update of `param` from `grad`. `t` is the 1-based step count
/// after this update (used for bias correction).
pub fn adam_step_tensor<T: Element>(
    param: &mut GridTensor<T>,
    grad: &GridTensor<T>,
    state: &mut AdamState<T>,
    params: &AdamParams,
    t: u64,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "adam gradient shape {:?} does not match parameter shape {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    if t == 0 {
        return Err(Error::config("adam step count must be >= 1"));
    }
    let b1 = T::from_f64(params.beta1);
    let b2 = T::from_f64(params.beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - params.beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - params.beta2.powi(t as i32));
    let lr = T::from_f64(params.lr);
    let eps = T::from_f64(params.eps);
    for ((p, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.data_mut().iter_mut().zip(state.v.data_mut()))
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
