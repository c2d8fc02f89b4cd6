use serde::{Deserialize, Serialize};

use super::ResidualState;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 5e-4,
            weight_decay: 0.1,
            eps: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl AdamW {
    /// One update of every residual in `state` given `gradients` (same layout).
    pub fn step(&self, state: &mut ResidualState, gradients: &[f64]) {
        assert_eq!(gradients.len(), state.residuals.len(), "gradient shape");
        state.step += 1;
        let t = state.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let params = state
            .residuals
            .iter_mut()
            .zip(state.first_moment.iter_mut())
            .zip(state.second_moment.iter_mut())
            .zip(gradients);
        for (((r, m), v), &g) in params {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *r -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *r);
        }
    }
}
