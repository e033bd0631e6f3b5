use std::collections::HashMap;

use rand::Rng;

use super::graph::Gradients;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    adam: AdamState,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn adam_mut(&mut self) -> &mut AdamState {
        &mut self.adam
    }
}

/// Named parameters in insertion order, each with its Adam moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let n = value.len();
        self.index.insert(name.to_owned(), self.params.len());
        self.params.push(Param {
            name: name.to_owned(),
            value,
            grad: vec![0.0; n],
            adam: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Weight matrix (fan_in × fan_out) drawn from U(−√(1/fan_in), √(1/fan_in)).
    pub fn add_weight(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn add_bias(&mut self, name: &str, n: usize) -> Result<ParamId> {
        self.add(name, Tensor::zeros(&[n]))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.param(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.iter() {
            self.params[i]
                .grad
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    /// One bias-corrected Adam step over every parameter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        for p in &mut self.params {
            let st = &mut p.adam;
            st.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i];
                st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
                st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    /// Copies parameter values (not gradients or optimiser state) from `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Usage("parameter stores differ in size".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Usage(format!(
                    "parameter `{}` does not match `{}`",
                    dst.name, src.name
                )));
            }
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::new(vec![1], vec![value]).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add_bias("b", 3).unwrap();
        assert!(s.add_bias("b", 3).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut s, id) = single(1.25);
        s.adam_step(&AdamConfig::default());
        assert_eq!(s.param(id).value().data(), &[1.25]);
    }

    #[test]
    fn first_step_moves_by_lr_times_normalised_gradient() {
        // Fresh state: m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε).
        let cfg = AdamConfig::default();
        for g in [3.0, -0.02, 1e-3] {
            let (mut s, id) = single(0.0);
            s.params[0].grad[0] = g;
            s.adam_step(&cfg);
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((s.param(id).value().data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let cfg = AdamConfig::default();
        let (mut s, id) = single(0.0);
        let mut prev = 0.0;
        let mut last_delta = 0.0;
        for _ in 0..5000 {
            s.params[0].grad[0] = 0.7;
            s.adam_step(&cfg);
            let x = s.param(id).value().data()[0];
            last_delta = prev - x;
            prev = x;
        }
        // With m̂ → g and v̂ → g², each step approaches lr·g/(|g|+ε).
        let limit = cfg.lr * 0.7 / (0.7 + cfg.eps);
        assert!((last_delta - limit).abs() < 1e-9, "{last_delta} vs {limit}");
    }

    #[test]
    fn clip_grad_norm_rescales() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2])).unwrap();
        s.params[0].grad = vec![3.0, 4.0];
        let before = s.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}
