use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supernet::ParamMap;

/// Momentum SGD hyper-parameters. The learning rate decays once per
/// communication round: `lr(t) = initial_lr · decay^t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    pub decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            initial_lr: 0.1,
            momentum: 0.5,
            decay: 0.995,
        }
    }
}

pub fn learning_rate_at(cfg: &SgdConfig, round: u32) -> f64 {
    cfg.initial_lr * cfg.decay.powi(round as i32)
}

/// Per-training momentum buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: ParamMap,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        OptimizerState {
            learning_rate,
            momentum,
            velocity: ParamMap::new(),
        }
    }
}

/// `v ← μ·v + g`, `θ ← θ − η·v`
pub fn sgd_step(params: &mut ParamMap, grads: &ParamMap, state: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.len() || grads.keys().any(|k| !params.contains_key(k)) {
        return Err(Error::Structural(
            "gradients do not match parameters".into(),
        ));
    }
    if let Some((path, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for {path}")));
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for (path, g) in grads {
        let theta = params.get_mut(path).expect("checked above");
        if theta.shape() != g.shape() {
            return Err(Error::Structural(format!(
                "gradient shape mismatch for {path}"
            )));
        }
        let v = state
            .velocity
            .entry(path.clone())
            .or_insert_with(|| crate::nn::Tensor::zeros(g.shape()));
        for ((vi, ti), gi) in v.data_mut().iter_mut().zip(theta.data_mut()).zip(g.data()) {
            *vi = mu * *vi + gi;
            *ti -= lr * *vi;
        }
    }
    Ok(())
}
