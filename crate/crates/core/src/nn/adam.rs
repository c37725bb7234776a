use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, Real};

/// Adam hyperparameters. Weight decay is added to the gradient (`g + wd*p`)
/// before the moment updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one vector per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments matching `params`.
    pub fn for_params(params: &[&Param<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }
}

/// One Adam update of `params` with the position-aligned `grads`.
///
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut [&mut Param<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if state.m.is_empty() && state.step == 0 {
        let views: Vec<&Param<T>> = params.iter().map(|p| &**p).collect();
        *state = AdamState::for_params(&views);
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if g.len() != p.value.len() || state.m[i].len() != p.value.len() || state.v[i].len() != p.value.len() {
            return Err(Error::Shape(format!(
                "gradient or optimizer state for `{}` does not match its {} values",
                p.name,
                p.value.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NanGradient(p.name.clone()));
        }
    }
    if state.m.len() != params.len() {
        return Err(Error::Shape(
            "optimizer state has the wrong number of parameters".into(),
        ));
    }

    state.step += 1;
    let t = state.step as i32;
    let lr = T::from_f64_lossy(config.learning_rate);
    let b1 = T::from_f64_lossy(config.beta1);
    let b2 = T::from_f64_lossy(config.beta2);
    let eps = T::from_f64_lossy(config.eps);
    let wd = T::from_f64_lossy(config.weight_decay);
    let c1 = T::from_f64_lossy(1.0 - config.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - config.beta2.powi(t));
    let one = T::one();

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.iter_mut().enumerate() {
            let grad = g[j] + wd * *w;
            m[j] = b1 * m[j] + (one - b1) * grad;
            v[j] = b2 * v[j] + (one - b2) * grad * grad;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
