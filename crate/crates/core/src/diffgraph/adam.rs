use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::math;

/// Moment estimates for the Adam update, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Apply one update with the state's own learning rate.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        let lr = self.lr;
        adam_step(params, grads, self, lr)
    }
}

/// Bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        bail!(Shape, "{} parameter tensors but {} gradients", params.len(), grads.len());
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            bail!(Shape, "parameter {:?} vs gradient {:?}", p.shape(), g.shape());
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
        bail!(Shape, "optimizer state does not match the parameter set");
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - libm::pow(b1, state.step as f64);
    let bc2 = 1.0 - libm::pow(b2, state.step as f64);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            let mi = &mut m.data_mut()[i];
            *mi = b1 * *mi + (1.0 - b1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = m.data()[i] / bc1;
            let vhat = v.data()[i] / bc2;
            pd[i] -= lr * mhat / (math::sqrt(vhat) + state.eps);
        }
    }
    Ok(())
}
