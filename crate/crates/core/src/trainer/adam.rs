use crate::probe::{Gradients, ProbeParams};

use super::{TrainConfig, TrainError};

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ProbeParams,
    pub v: ProbeParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ProbeParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ProbeParams,
    grads: &Gradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let t = state.t + 1;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let mut updated = params.clone();
    let mut m_next = state.m.clone();
    let mut v_next = state.v.clone();
    for (((p, &g), m), v) in updated.iter_mut().zip(grads.iter()).zip(m_next.iter_mut()).zip(v_next.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    if !updated.is_finite() {
        return Err(TrainError::NonFinite("adam update".into()));
    }
    *params = updated;
    state.m = m_next;
    state.v = v_next;
    state.t = t;
    Ok(())
}
