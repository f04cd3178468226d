//! AdamW with decoupled weight decay.

use crate::embedding::MlpParameters;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Step-size and moment constants used by [`adamw_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            learning_rate: 5e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators shaped like the parameters, and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: MlpParameters<T>,
    pub v: MlpParameters<T>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &MlpParameters<T>) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One update:
///
/// ```text
/// m ← β1·m + (1−β1)·g
/// v ← β2·v + (1−β2)·g²
/// θ ← θ − lr·( m̂/(√v̂ + ε) + wd·θ ),  m̂ = m/(1−β1^t), v̂ = v/(1−β2^t)
/// ```
pub fn adamw_step<T: Scalar>(
    params: &mut MlpParameters<T>,
    grads: &MlpParameters<T>,
    state: &mut OptimizerState<T>,
    hp: &AdamWParams,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(Error::InvalidSpec(
            "optimizer state, gradients and parameters differ in shape".into(),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let lr = T::lit(hp.learning_rate);
    let wd = T::lit(hp.weight_decay);
    let eps = T::lit(hp.epsilon);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);

    let buffers = params
        .buffers_mut()
        .zip(grads.buffers())
        .zip(state.m.buffers_mut().zip(state.v.buffers_mut()));
    for ((theta, g), (m, v)) in buffers {
        for (((th, &gi), mi), vi) in theta.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *th = *th - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *th);
        }
    }
    Ok(())
}
