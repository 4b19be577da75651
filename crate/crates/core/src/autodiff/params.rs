use std::collections::HashMap;

use super::tensor::Tensor4;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor with its gradient slot and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
    m: Tensor4,
    v: Tensor4,
    step: u64,
}

impl Parameter {
    fn new(name: String, value: Tensor4) -> Self {
        let shape = value.shape();
        Self {
            name,
            value,
            grad: Tensor4::zeros(shape),
            m: Tensor4::zeros(shape),
            v: Tensor4::zeros(shape),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor4 {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor4 {
        &self.params[id.0].grad
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.all_finite())
    }

    /// One bias-corrected Adam update of every parameter in `only` (or all
    /// parameters when `None`).
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig, only: Option<&[ParamId]>) {
        let selected: Vec<usize> = match only {
            Some(ids) => ids.iter().map(|id| id.0).collect(),
            None => (0..self.params.len()).collect(),
        };
        for i in selected {
            let p = &mut self.params[i];
            p.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
            let (value, grad, m, v) = (p.value.data_mut(), p.grad.data(), p.m.data_mut(), p.v.data_mut());
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor4::zeros([1, 1, 1, 1])).unwrap();
        assert!(s.add("w", Tensor4::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor4::filled([1, 2, 1, 1], 0.7)).unwrap();
        s.adam_step(1e-3, &AdamConfig::default(), None);
        assert_eq!(s.value(id).data(), &[0.7, 0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m1 = 0.1 g, v1 = 0.001 g^2; bias-corrected ratio = g / |g|.
        for g in [3.0, -0.02] {
            let mut s = ParamStore::new();
            let id = s.add("w", Tensor4::scalar(1.0)).unwrap();
            s.get_mut(id).grad = Tensor4::scalar(g);
            s.adam_step(0.01, &AdamConfig::default(), None);
            let moved = s.value(id).data()[0] - 1.0;
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-12, "{moved} vs {expected}");
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut s = ParamStore::new();
            let id = s.add("w", Tensor4::scalar(0.3)).unwrap();
            for k in 0..10 {
                s.get_mut(id).grad = Tensor4::scalar((k as f64).sin());
                s.adam_step(0.05, &AdamConfig::default(), None);
            }
            s.value(id).data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
