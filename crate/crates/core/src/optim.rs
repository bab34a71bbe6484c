//! Named parameter store and the AdamW optimizer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// One named parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters (the visual stub) keep `trainable = false` and are
    /// never touched by the optimizer.
    pub trainable: bool,
}

/// Insertion-ordered map from parameter names to tensors. Iteration order
/// is stable across runs given identical insertion order, which checkpoint
/// serialization relies on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Param)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((
            name.to_string(),
            Param {
                value,
                grad,
                trainable,
            },
        ));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).copied().map(move |i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.entries.iter_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Add `delta` into the gradient accumulator of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if p.grad.shape() != delta.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.grad.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
        for (dst, src) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *dst += src;
        }
        Ok(())
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ParamStore) -> Self {
        let m = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        OptState { m, v, step: 0 }
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamwConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        AdamwConfig {
            lr: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Scale all trainable gradients so their global L2 norm does not exceed
/// `max_norm`. Returns the scale that was applied (1.0 when unchanged).
pub fn clip_global_norm(params: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::InvalidArgument("max_norm must be positive".into()));
    }
    let mut sq = 0.0;
    for (_, p) in params.iter() {
        if p.trainable {
            sq += p.grad.data().iter().map(|g| g * g).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for (_, p) in params.iter_mut() {
        if p.trainable {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }
    Ok(scale)
}

/// One decoupled-weight-decay adaptive-moment update with bias correction.
///
/// Parameters whose gradient contains a non-finite value are skipped and
/// reported back (and logged).
pub fn optimizer_step(params: &mut ParamStore, state: &mut OptState, cfg: &AdamwConfig) -> Result<Vec<String>> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut skipped = Vec::new();
    for (i, (name, p)) in params.entries.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        if p.grad.data().iter().any(|g| !g.is_finite()) {
            log::warn!("optimizer_step: non-finite gradient for {name}, update skipped");
            skipped.push(name.clone());
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let value = p.value.data_mut();
        let grad = p.grad.data();
        for j in 0..value.len() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            value[j] -= cfg.lr * cfg.weight_decay * value[j];
            value[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(skipped)
}
