use super::{Scalar, Tensor};
use crate::error::{Result, SbdError};

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

/// Moment accumulators, one pair per parameter tensor. Allocated on the
/// first step.
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

/// One bias-corrected adaptive-moment update of every `(param, grad)` pair.
pub fn adam_step<'a, T, I>(pairs: I, state: &mut AdamState<T>) -> Result<()>
where
    T: Scalar,
    I: IntoIterator<Item = (&'a mut Tensor<T>, &'a Tensor<T>)>,
{
    let pairs: Vec<_> = pairs.into_iter().collect();
    if state.step == 0 && state.first.is_empty() {
        state.first = pairs.iter().map(|(p, _)| vec![T::zero(); p.len()]).collect();
        state.second = state.first.clone();
    }
    if pairs.len() != state.first.len() {
        return Err(SbdError::Shape(format!(
            "optimizer tracks {} tensors, got {}",
            state.first.len(),
            pairs.len()
        )));
    }
    for (i, (param, grad)) in pairs.iter().enumerate() {
        if param.shape() != grad.shape() || param.len() != state.first[i].len() {
            return Err(SbdError::Shape(format!(
                "parameter {i}: shape {:?}, gradient {:?}, state {}",
                param.shape(),
                grad.shape(),
                state.first[i].len()
            )));
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let step_size = T::from_f64_lossy(c.lr / (1.0 - c.beta1.powi(t)));
    let second_correction = T::from_f64_lossy(1.0 - c.beta2.powi(t));
    let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let eps = T::from_f64_lossy(c.eps);

    for (i, (param, grad)) in pairs.into_iter().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let denom = (*v / second_correction).sqrt() + eps;
            *p -= step_size * *m / denom;
        }
    }
    Ok(())
}
