use crate::error::{FgelError, Result};

#[derive(Clone, Copy, Debug)]
pub struct OAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Consecutive steps taken each time this player moves.
    pub steps: usize,
}

impl Default for OAdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 1,
        }
    }
}

impl OAdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(FgelError::InvalidArgument("bad optimistic Adam constants".into()));
        }
        Ok(())
    }
}

/// Moment estimates and the previous normalized step.
#[derive(Clone, Debug, PartialEq)]
pub struct OAdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub prev_step: Vec<f64>,
    pub t: u64,
}

impl OAdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            prev_step: vec![0.0; dim],
            t: 0,
        }
    }
}

/// One optimistic Adam step for minimization. With ŝ_t = m̂_t / (√v̂_t + eps)
/// the returned update is −lr·(2ŝ_t − ŝ_{t−1}), ŝ_0 = 0.
pub fn oadam_step(state: &mut OAdamState, cfg: &OAdamConfig, grad: &[f64]) -> Result<Vec<f64>> {
    if grad.len() != state.m.len() {
        return Err(FgelError::DimensionMismatch {
            context: "optimistic Adam gradient",
            expected: state.m.len(),
            actual: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(FgelError::NonFinite("optimistic Adam gradient"));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut update = vec![0.0; grad.len()];
    for (k, &g) in grad.iter().enumerate() {
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
        let step = (state.m[k] / c1) / ((state.v[k] / c2).sqrt() + cfg.eps);
        update[k] = -cfg.lr * (2.0 * step - state.prev_step[k]);
        state.prev_step[k] = step;
    }
    Ok(update)
}
