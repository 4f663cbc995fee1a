//! Named parameter stores and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    entries: Vec<(String, Tensor)>,
}

impl NetworkParams {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter on `graph` as a gradient leaf, in store order.
    pub fn register(&self, graph: &mut Graph) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| graph.param(t.clone()))
            .collect()
    }

    pub fn collect_grads(&self, graph: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter().map(|&v| graph.grad_or_zeros(v)).collect()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|(_, t)| vec![0.0; t.len()]).collect()
    }

    /// Concatenated parameter values in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }
}

impl Default for NetworkParams {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter store paired with the graph variables it was registered as.
pub struct BoundParams<'a> {
    params: &'a NetworkParams,
    vars: &'a [Var],
}

impl<'a> BoundParams<'a> {
    pub fn new(params: &'a NetworkParams, vars: &'a [Var]) -> Self {
        Self { params, vars }
    }

    /// Panics on unknown names: parameter layouts are fixed by the owning model.
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"));
        self.vars[i]
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.index_of(name).is_some()
    }
}

/// Uniform fan-in initialization, `U(-b, b)` with `b = gain · sqrt(3 / fan_in)`.
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr0: f64,
    /// `(iteration, lr)` drops: the rate becomes `lr` for iterations after `iteration`.
    pub schedule: Vec<(u64, f64)>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iters: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            schedule: vec![(100_000, 1e-4), (150_000, 1e-5)],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_iters: 200_000,
        }
    }
}

impl AdamConfig {
    /// Same drop structure rescaled to a shorter iteration budget.
    pub fn scaled_to(max_iters: u64) -> Self {
        let base = Self::default();
        let f = max_iters as f64 / base.max_iters as f64;
        Self {
            schedule: base
                .schedule
                .iter()
                .map(|&(it, lr)| (((it as f64) * f).round() as u64, lr))
                .collect(),
            max_iters,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        let mut prev_lr = self.lr0;
        let mut prev_it = 0u64;
        for &(it, lr) in &self.schedule {
            if !(lr > 0.0) || lr > prev_lr {
                return Err(Error::Config(format!("schedule rates must be positive and non-increasing: {:?}", self.schedule)));
            }
            if it < prev_it {
                return Err(Error::Config("schedule iterations must be sorted".into()));
            }
            prev_lr = lr;
            prev_it = it;
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid Adam moments".into()));
        }
        Ok(())
    }

    /// Learning rate used at 1-based iteration `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        self.schedule
            .iter()
            .rev()
            .find(|&&(it, _)| iter > it)
            .map_or(self.lr0, |&(_, lr)| lr)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &NetworkParams) -> Self {
        let zeros = params.zero_grads();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// One update with the scheduled rate; returns the rate used.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &[Vec<f64>]) -> f64 {
        self.t += 1;
        let lr = self.cfg.lr_at(self.t);
        self.step_with_lr(params, grads, lr);
        lr
    }

    fn step_with_lr(&mut self, params: &mut NetworkParams, grads: &[Vec<f64>], lr: f64) {
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_after_boundaries() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr_at(1), 1e-3);
        assert_eq!(cfg.lr_at(100_000), 1e-3);
        assert_eq!(cfg.lr_at(100_001), 1e-4);
        assert_eq!(cfg.lr_at(150_001), 1e-5);
        let s = AdamConfig::scaled_to(20_000);
        assert_eq!(s.schedule, vec![(10_000, 1e-4), (15_000, 1e-5)]);
        assert_eq!(s.lr_at(10_001), 1e-4);
    }

    #[test]
    fn increasing_schedule_rejected() {
        let mut cfg = AdamConfig::default();
        cfg.schedule = vec![(10, 1e-2)];
        assert!(cfg.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = NetworkParams::new();
        p.insert("x", Tensor::from_vec(vec![3.0, -2.0]));
        let mut cfg = AdamConfig::default();
        cfg.lr0 = 0.05;
        let mut opt = Adam::new(cfg, &p);
        for _ in 0..2000 {
            let g: Vec<f64> = p.tensor(0).data().iter().map(|v| 2.0 * v).collect();
            opt.step(&mut p, &[g]);
        }
        assert!(p.tensor(0).data().iter().all(|v| v.abs() < 1e-3));
    }
}
