//! Adam over a [`VsamParameters`] store.

use crate::error::{Error, Result};
use crate::model::VsamParameters;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update from the gradients stored on `params`.
    ///
    /// Tensors without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut VsamParameters) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.names().len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind};

    fn mean_model() -> VsamParameters {
        let cfg = ModelConfig {
            kind: ModelKind::MeanEmbedding,
            embed_dim: 1,
            n_classes: 2,
            ..ModelConfig::tiny()
        };
        VsamParameters::zeros(cfg).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = mean_model();
        p.get_mut("classifier.bias").unwrap().accumulate_grad(&[0.5, -2.0]).unwrap();
        let mut adam = Adam::new(0.01);
        adam.step(&mut p).unwrap();
        let b = p.get("classifier.bias").unwrap().data();
        assert!((b[0] + 0.01).abs() < 1e-9);
        assert!((b[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = mean_model();
        let before = p.clone();
        p.get_mut("classifier.weight").unwrap().accumulate_grad(&[1.0; 6]).unwrap();
        let mut adam = Adam::new(0.0);
        adam.step(&mut p).unwrap();
        p.zero_grad();
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_quadratic() {
        // f(b) = (b0 - 3)^2 + (b1 + 1)^2
        let mut p = mean_model();
        let mut adam = Adam::new(0.1);
        for _ in 0..2000 {
            let b = p.get("classifier.bias").unwrap().data().to_vec();
            let g = [2.0 * (b[0] - 3.0), 2.0 * (b[1] + 1.0)];
            p.zero_grad();
            p.get_mut("classifier.bias").unwrap().accumulate_grad(&g).unwrap();
            adam.step(&mut p).unwrap();
        }
        let b = p.get("classifier.bias").unwrap().data();
        assert!((b[0] - 3.0).abs() < 1e-3 && (b[1] + 1.0).abs() < 1e-3, "{b:?}");
    }
}
