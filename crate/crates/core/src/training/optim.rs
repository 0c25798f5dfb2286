//! Adam for the network parameters; Riemannian ascent for the metric
//! networks.

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamSet};
use crate::spd::{stiefel_step, StepDirection, StiefelParam};
use crate::tensor::Tensor;

/// Adam over every scalar of a [`ParamSet`], reading gradients from the
/// tensors' `grad` slots.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, size: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one descent step and returns the change of every scalar.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<Vec<f64>> {
        let g = params.flatten_grads();
        if g.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "optimizer sized for {} scalars, parameters have {}",
                self.m.len(),
                g.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut x = params.flatten();
        let mut delta = vec![0.0; x.len()];
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            let step = -self.lr * mh / (vh.sqrt() + self.eps);
            let before = x[i];
            x[i] += step;
            delta[i] = x[i] - before;
        }
        params.assign_flat(&x)?;
        Ok(delta)
    }
}

/// One ascent step: Stiefel parameters move by [`stiefel_step`], the rest by
/// `p += lr·g`. Returns the change of every scalar.
pub fn ascent_step(params: &mut ParamSet, lr: f64) -> Result<Vec<f64>> {
    let before = params.flatten();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let t = params.get(id);
        let grad = match &t.grad {
            Some(g) => g.clone(),
            None => continue,
        };
        let updated = match params.kind(id) {
            ParamKind::Stiefel => {
                let w = StiefelParam::new(t.clone())?;
                let g = Tensor::new(t.shape().to_vec(), grad.clone())?;
                stiefel_step(&w, &g, lr, StepDirection::Ascent)?.into_tensor()
            }
            ParamKind::Euclidean => {
                let data = t.data().iter().zip(&grad).map(|(x, g)| x + lr * g).collect();
                Tensor::new(t.shape().to_vec(), data)?
            }
        };
        let mut updated = updated;
        updated.grad = Some(grad);
        *params.get_mut(id) = updated;
    }
    let after = params.flatten();
    Ok(after.iter().zip(&before).map(|(a, b)| a - b).collect())
}

/// `g·Δ`.
pub fn directional_derivative(grad: &[f64], delta: &[f64]) -> f64 {
    grad.iter().zip(delta).map(|(g, d)| g * d).sum()
}
