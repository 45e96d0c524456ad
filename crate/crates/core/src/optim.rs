//! Adagrad with coupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ModelParams};

pub const ADAGRAD_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdagradConfig {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for AdagradConfig {
    fn default() -> Self {
        AdagradConfig {
            lr: 0.01,
            weight_decay: 0.0005,
        }
    }
}

/// Accumulated squared gradients per parameter.
#[derive(Clone, Debug)]
pub struct AdagradState {
    pub config: AdagradConfig,
    accum: BTreeMap<String, Vec<f64>>,
}

impl AdagradState {
    pub fn new(config: AdagradConfig) -> Self {
        AdagradState {
            config,
            accum: BTreeMap::new(),
        }
    }

    pub fn accumulator(&self, name: &str) -> Option<&[f64]> {
        self.accum.get(name).map(Vec::as_slice)
    }

    /// One update: `g += wd·θ; acc += g²; θ -= lr·g / (√acc + ε)`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        let names: Vec<String> = params.names().cloned().collect();
        for name in &names {
            if !grads.contains_key(name) {
                return Err(Error::MissingGradient(name.clone()));
            }
        }
        let AdagradConfig { lr, weight_decay } = self.config;
        for name in names {
            let g = &grads[&name];
            let theta = params.get_mut(&name)?;
            if g.len() != theta.len() {
                return Err(Error::shape("adagrad_step", theta.shape(), &[g.len()]));
            }
            let acc = self
                .accum
                .entry(name)
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((w, gi), a) in theta.data_mut().iter_mut().zip(g).zip(acc.iter_mut()) {
                let gi = gi + weight_decay * *w;
                *a += gi * gi;
                *w -= lr * gi / (a.sqrt() + ADAGRAD_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn scalar_params(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = scalar_params(0.7);
        let mut s = AdagradState::new(AdagradConfig { lr: 0.1, weight_decay: 0.0 });
        let g: Gradients = [("x".to_string(), vec![0.0])].into();
        s.step(&mut p, &g).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[0.7]);
    }

    #[test]
    fn single_step_hand_value() {
        let mut p = scalar_params(0.0);
        let mut s = AdagradState::new(AdagradConfig { lr: 1.0, weight_decay: 0.0 });
        let g: Gradients = [("x".to_string(), vec![2.0])].into();
        s.step(&mut p, &g).unwrap();
        let expected = -2.0 / (2.0 + 1e-10);
        assert!((p.get("x").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.accumulator("x").unwrap(), &[4.0]);
    }

    #[test]
    fn missing_gradient_errors() {
        let mut p = scalar_params(1.0);
        let mut s = AdagradState::new(AdagradConfig::default());
        let err = s.step(&mut p, &Gradients::new());
        assert!(matches!(err, Err(Error::MissingGradient(n)) if n == "x"));
    }

    #[test]
    fn quadratic_loss_strictly_decreases() {
        // f(w) = sum((w - c)^2) on a 3-vector
        let c = [1.0, -2.0, 0.5];
        let mut p = ModelParams::new();
        p.insert("w", Tensor::zeros(vec![3]));
        let mut s = AdagradState::new(AdagradConfig { lr: 0.1, weight_decay: 0.0 });
        let mut prev = f64::INFINITY;
        let mut prev_acc = vec![0.0; 3];
        for _ in 0..100 {
            let mut t = Tape::new();
            let b = p.bind(&mut t);
            let w = b.get("w").unwrap();
            let cv = t.constant(Tensor::new(vec![3], c.to_vec()).unwrap());
            let d = t.sub(w, cv).unwrap();
            let sq = t.mul(d, d).unwrap();
            let loss = t.sum(sq).unwrap();
            let value = t.value(loss).data()[0];
            assert!(value < prev, "{value} !< {prev}");
            prev = value;
            t.backward(loss).unwrap();
            let g = p.gradients(&t, &b);
            s.step(&mut p, &g).unwrap();
            let acc = s.accumulator("w").unwrap();
            assert!(acc.iter().zip(&prev_acc).all(|(a, b)| a >= b && *a >= 0.0));
            prev_acc = acc.to_vec();
        }
    }
}
