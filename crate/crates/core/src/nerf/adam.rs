//! Adam with bias correction, applied tensor by tensor over [`MlpParams`].

use super::mlp::MlpParams;
use crate::scalar::{s, Scalar};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: MlpParams<T>,
    pub v: MlpParams<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &MlpParams<T>) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One update `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Scalar>(params: &mut MlpParams<T>, grads: &MlpParams<T>, state: &mut AdamState<T>, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let b1: T = s(ADAM_BETA1);
    let b2: T = s(ADAM_BETA2);
    let one = T::one();
    let c1: T = s(1.0 - ADAM_BETA1.powi(t));
    let c2: T = s(1.0 - ADAM_BETA2.powi(t));
    let eps: T = s(ADAM_EPS);
    let lr: T = s(lr);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
