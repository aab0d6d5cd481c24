use super::{Gradients, NnError, ParamStore, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, params: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from tape gradients. Parameters that did not take
    /// part in the graph get a zero gradient (decay still applies).
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &Gradients<S>) -> Result<(), NnError> {
        let dense: Vec<Tensor<S>> = params
            .ids()
            .map(|id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(params.get(id).shape())))
            .collect();
        self.step_dense(params, &dense)
    }

    /// Applies one update from one gradient tensor per parameter.
    /// Any non-finite gradient aborts the whole step before touching state.
    pub fn step_dense(&mut self, params: &mut ParamStore<S>, grads: &[Tensor<S>]) -> Result<(), NnError> {
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() || g.data().iter().any(|v| !v.is_finite()) {
                return Err(NnError::BadGradient {
                    name: params.name(id).to_string(),
                });
            }
        }
        if grads.len() != params.len() {
            return Err(NnError::BadGradient {
                name: format!("<{} gradients for {} parameters>", grads.len(), params.len()),
            });
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = S::lit(1.0 - c.beta1.powi(t));
        let bc2 = S::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (lr, eps) = (S::lit(c.lr), S::lit(c.eps));
        let decay = S::one() - S::lit(c.lr * c.weight_decay);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
