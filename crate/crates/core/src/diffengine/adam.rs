use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural_prior::DictionaryStack;

use super::params::{ParamLayout, ParamVector};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// In-place bias-corrected update. A non-finite gradient leaves both the
    /// parameters and the state untouched.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::shape("adam_step", self.m.len(), grad.len()));
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NumericalFailure {
                term: "gradient".into(),
                value: *bad,
            });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// One Adam step on a dictionary stack followed by clamping every threshold
/// to be nonnegative.
pub fn adam_step(theta: &DictionaryStack, grad: &ParamVector, state: &AdamState) -> Result<(DictionaryStack, AdamState)> {
    let layout = ParamLayout::of(theta);
    let mut params = ParamVector::flatten(theta);
    let mut next = state.clone();
    next.update(&mut params.values, &grad.values)?;
    for v in &mut params.values[layout.lambda_range()] {
        *v = v.max(0.0);
    }
    Ok((params.unflatten(&layout)?, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let theta = DictionaryStack::init(4, &[6, 3], &mut rng).unwrap();
        let n = theta.num_parameters();
        let state = AdamState::new(AdamConfig::default(), n);
        let (next, st) = adam_step(&theta, &ParamVector { values: vec![0.0; n] }, &state).unwrap();
        assert_eq!(next, theta);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn scalar_recurrence_matches_hand_computation() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(cfg, 1);
        let mut theta = [0.0];
        let (mut m, mut v, mut expected) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            state.update(&mut theta, &[1.0]).unwrap();
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            expected -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((theta[0] - expected).abs() < 1e-12);
            if t == 1 {
                assert!((theta[0] + 1e-3).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn thresholds_are_clamped() {
        let mut theta = DictionaryStack::zeros(4, &[6, 3]).unwrap();
        theta.lambdas = vec![1e-5, 0.5];
        let layout = ParamLayout::of(&theta);
        let mut grad = ParamVector::zeros(&layout);
        let lr = layout.lambda_range();
        grad.values[lr.start] = 10.0;
        grad.values[lr.start + 1] = 10.0;
        let state = AdamState::new(AdamConfig::default(), layout.len());
        let (next, _) = adam_step(&theta, &grad, &state).unwrap();
        assert_eq!(next.lambdas[0], 0.0);
        assert!((next.lambdas[1] - (0.5 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_leaves_state_unchanged() {
        let mut state = AdamState::new(AdamConfig::default(), 2);
        let mut p = [1.0, 2.0];
        state.update(&mut p, &[0.5, 0.5]).unwrap();
        let before = state.clone();
        let p_before = p;
        assert!(matches!(state.update(&mut p, &[f64::NAN, 1.0]), Err(Error::NumericalFailure { .. })));
        assert_eq!(state, before);
        assert_eq!(p, p_before);
    }

    #[test]
    fn update_magnitude_is_bounded_by_lr() {
        // Bias-corrected steps are at most ~lr regardless of gradient scale.
        for scale in [1e-6, 1.0, 1e6] {
            let mut state = AdamState::new(AdamConfig::default(), 3);
            let mut p = [0.0; 3];
            let g = [scale, -2.0 * scale, 0.5 * scale];
            state.update(&mut p, &g).unwrap();
            for (pi, gi) in p.iter().zip(&g) {
                assert!(pi.abs() <= 1e-3 * (1.0 + 1e-6));
                assert_eq!(pi.signum(), -gi.signum());
            }
        }
    }
}
