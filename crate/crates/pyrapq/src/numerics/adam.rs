//! Adam optimizer over an ordered list of parameter tensors.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
/// Not shareable across threads mid-step; a training run owns its state.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, param_lens: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            first: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub(crate) fn accumulators(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub(crate) fn restore(
        cfg: AdamConfig,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Self {
        Self {
            cfg,
            step,
            first,
            second,
        }
    }

    /// One update over all parameters. `params[i]` and `grads[i]` must mirror
    /// the accumulator shapes this state was built with.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for i in 0..params.len() {
            if params[i].len() != self.first[i].len() || grads[i].len() != self.first[i].len() {
                return Err(Error::Shape(format!(
                    "optimizer tensor {i}: accumulator {} vs param {} / grad {}",
                    self.first[i].len(),
                    params[i].len(),
                    grads[i].len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for i in 0..params.len() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let g = grads[i];
            let p = &mut *params[i];
            for j in 0..g.len() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = AdamState::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let orig = p.clone();
        for _ in 0..10 {
            state.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(state.step_count(), 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g² at t=1, so the move is lr·g/(|g|+ε) ≈ lr·sign(g).
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg, &[2]);
        let mut p = vec![0.0, 0.0];
        state.step(&mut [&mut p], &[&[0.5, -2.0]]).unwrap();
        assert!((p[0] - -0.01).abs() < 1e-6);
        assert!((p[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn parameters_update_independently() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut joint = AdamState::new(cfg, &[2]);
        let mut pj = vec![1.0, -1.0];
        let mut solo_a = AdamState::new(cfg, &[1]);
        let mut solo_b = AdamState::new(cfg, &[1]);
        let mut pa = vec![1.0];
        let mut pb = vec![-1.0];
        for k in 0..5 {
            let g = 0.3 + 0.1 * k as f64;
            joint.step(&mut [&mut pj], &[&[g, -g]]).unwrap();
            solo_a.step(&mut [&mut pa], &[&[g]]).unwrap();
            solo_b.step(&mut [&mut pb], &[&[-g]]).unwrap();
        }
        assert_eq!(pj[0], pa[0]);
        assert_eq!(pj[1], pb[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0, 0.0];
        assert!(state.step(&mut [&mut p], &[&[1.0]]).is_err());
    }
}
