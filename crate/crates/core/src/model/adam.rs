use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        let zeros: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        let params = net.params_mut();
        if grads.tensors.len() != params.len()
            || grads.tensors.iter().zip(params.iter()).any(|(g, p)| g.len() != p.len())
            || self.m.len() != params.len()
        {
            return Err(Error::ShapeMismatch("gradients do not match the parameters".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ConvSpec, FusionMode};

    fn tiny() -> Network {
        let arch =
            Architecture { input_size: 4, conv: vec![ConvSpec::new(2, 3, 1, false)], hidden: vec![], classes: 3 };
        Network::new(arch, FusionMode::Baseline, 0).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut net = tiny();
        net.params_mut()[0][0] = 1.0;
        let mut grads = Gradients::zeros_like(&net);
        grads.tensors[0][0] = 0.1;
        let mut adam = AdamState::new(&net);
        adam.step(&mut net, &grads, &AdamConfig::default()).unwrap();
        // m̂/√v̂ = g/|g| = 1 at t = 1
        assert!((net.params()[0][0] - 0.999).abs() < 1e-9);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut net = tiny();
        let before = net.clone();
        let mut adam = AdamState::new(&net);
        adam.step(&mut net, &Gradients::zeros_like(&before), &AdamConfig::default()).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut net = tiny();
        let mut adam = AdamState::new(&net);
        let bad = Gradients { tensors: vec![vec![0.0; 3]] };
        assert!(adam.step(&mut net, &bad, &AdamConfig::default()).is_err());
    }
}
