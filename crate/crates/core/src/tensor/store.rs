//! Named parameters with Adam state and EMA shadows.

use std::collections::BTreeMap;

use crate::error::{CdlError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Adam hyperparameters plus optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip threshold on the global gradient norm; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: None }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub ema: Tensor,
}

/// Ordered collection of named parameters and non-optimized buffers.
///
/// Parameters carry first/second Adam moments and an exponential moving
/// average shadow that tracks the value after every step; evaluation-time
/// code reads the shadows via [`ParamStore::eval_clone`]. Iteration order is
/// always name order, so updates and serialisation are deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
    step: u64,
    ema_rate: f64,
}

impl ParamStore {
    /// Creates an empty store; `ema_rate` must lie strictly inside `(0,1)`.
    pub fn new(ema_rate: f64) -> Result<Self> {
        if !(ema_rate > 0.0 && ema_rate < 1.0) {
            return Err(CdlError::Config(format!(
                "ema rate must be in (0,1), got {ema_rate}"
            )));
        }
        Ok(Self { params: BTreeMap::new(), buffers: BTreeMap::new(), step: 0, ema_rate })
    }

    /// Registers a parameter; the EMA shadow starts at the initial value.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(CdlError::Config(format!("duplicate parameter '{name}'")));
        }
        let shape = value.shape().to_vec();
        self.params.insert(
            name.to_string(),
            Param {
                ema: value.clone(),
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
                value,
            },
        );
        Ok(())
    }

    /// Registers a non-optimized named tensor (e.g. normalisation statistics).
    pub fn insert_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.buffers.contains_key(name) {
            return Err(CdlError::Config(format!("duplicate buffer '{name}'")));
        }
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| CdlError::Config(format!("unknown parameter '{name}'")))
    }

    pub fn ema(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.ema)
            .ok_or_else(|| CdlError::Config(format!("unknown parameter '{name}'")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| CdlError::Config(format!("unknown buffer '{name}'")))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn has_buffer(&self, name: &str) -> bool {
        self.buffers.contains_key(name)
    }

    /// Puts the parameter's current value on a tape as a differentiable leaf.
    pub fn leaf(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        tape.input(self.get(name)?.clone())
    }

    /// Replaces a parameter's value outright: the EMA shadow follows and the
    /// Adam moments reset, as if the parameter had been freshly initialised.
    pub fn reinit(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| CdlError::Config(format!("unknown parameter '{name}'")))?;
        if p.value.shape() != value.shape() {
            return Err(CdlError::Shape(format!(
                "reinit '{name}': shape {:?} -> {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.m = Tensor::zeros(value.shape());
        p.v = Tensor::zeros(value.shape());
        p.ema = value.clone();
        p.value = value;
        Ok(())
    }

    /// Direct mutable access to a parameter value (finite-difference probes).
    #[cfg(test)]
    pub(crate) fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| CdlError::Config(format!("unknown parameter '{name}'")))
    }

    /// Copies every parameter and buffer from `other` into this store; names
    /// must not collide. Used to assemble one inference store from the
    /// per-component training stores.
    pub fn absorb(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in other.params() {
            if self.params.contains_key(name) || self.buffers.contains_key(name) {
                return Err(CdlError::Config(format!("absorb: name '{name}' already present")));
            }
            self.params.insert(name.clone(), p.clone());
        }
        for (name, b) in other.buffers() {
            if self.buffers.contains_key(name) || self.params.contains_key(name) {
                return Err(CdlError::Config(format!("absorb: name '{name}' already present")));
            }
            self.buffers.insert(name.clone(), b.clone());
        }
        Ok(())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ema_rate(&self) -> f64 {
        self.ema_rate
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// One Adam update over all parameters from named gradients.
    ///
    /// Parameters without a gradient entry receive a zero gradient. Applies
    /// bias correction, optional global-norm clipping before the moment
    /// updates, and refreshes every EMA shadow. Returns the pre-clip global
    /// gradient norm.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamConfig,
    ) -> Result<f64> {
        for (name, g) in grads {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| CdlError::Config(format!("gradient for unknown '{name}'")))?;
            if g.shape() != p.value.shape() {
                return Err(CdlError::Shape(format!(
                    "gradient shape {:?} vs parameter '{name}' {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        let sq_sum: f64 = grads
            .values()
            .map(|g| g.data().iter().map(|&x| x * x).sum::<f64>())
            .sum();
        let norm = sq_sum.sqrt();
        if !norm.is_finite() {
            return Err(CdlError::Numeric("non-finite gradient norm in adam_step".into()));
        }
        let scale = match cfg.clip {
            Some(clip) if norm > clip => clip / norm,
            _ => 1.0,
        };

        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for (name, p) in &mut self.params {
            let zero: Tensor;
            let g_raw = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.value.shape().to_vec());
                    &zero
                }
            };
            let n = p.value.numel();
            for i in 0..n {
                let g = g_raw.data()[i] * scale;
                let m = cfg.beta1 * p.m.data()[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.v.data()[i] + (1.0 - cfg.beta2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p.value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            for i in 0..n {
                let e = self.ema_rate * p.ema.data()[i]
                    + (1.0 - self.ema_rate) * p.value.data()[i];
                p.ema.data_mut()[i] = e;
            }
        }
        Ok(norm)
    }

    /// Copy of the store with every parameter replaced by its EMA shadow.
    pub fn eval_clone(&self) -> Self {
        let mut out = self.clone();
        for p in out.params.values_mut() {
            p.value = p.ema.clone();
        }
        out
    }

    pub(crate) fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub(crate) fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    /// Rebuilds a store from raw parts (checkpoint loading).
    pub(crate) fn from_parts(
        params: BTreeMap<String, Param>,
        buffers: BTreeMap<String, Tensor>,
        step: u64,
        ema_rate: f64,
    ) -> Self {
        Self { params, buffers, step, ema_rate }
    }
}

/// Per-tape binding of parameter names to leaf variables.
///
/// A model forward pass requests its parameters through this binder so each
/// name maps to exactly one leaf per tape; after `backward`, [`Leaves::grads`]
/// hands the optimizer a name-keyed gradient map.
pub struct Leaves<'s> {
    store: &'s ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'s> Leaves<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, vars: BTreeMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The leaf for `name`, created on first request and reused afterwards.
    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = self.store.leaf(tape, name)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Buffer lookup routed through the same binder for convenience.
    pub fn buffer(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        tape.constant(self.store.buffer(name)?.clone())
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(n, &v)| tape.grad(v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}
