use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::math::SeqTensor;

use super::AutodiffError;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: SeqTensor,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    frozen: bool,
}

/// Adam hyperparameters. `clip_norm` rescales the global gradient norm of
/// the trainable parameters before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Named trainable arrays with gradient accumulators and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
    step: u64,
    has_grads: bool,
}

/// Serializable snapshot of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub value: SeqTensor,
    #[serde(with = "crate::math::serde_f64s")]
    pub m: Vec<f64>,
    #[serde(with = "crate::math::serde_f64s")]
    pub v: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: SeqTensor) -> Result<ParamId, AutodiffError> {
        if self.index.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let n = value.len();
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, AutodiffError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &SeqTensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut SeqTensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> SeqTensor {
        let p = &self.params[id.0];
        SeqTensor::from_raw(p.value.rows(), p.value.cols(), p.grad.clone())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Parameter names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    /// Freezes every parameter whose name does not start with one of
    /// `trainable_prefixes`; unfreezes the rest.
    pub fn train_only(&mut self, trainable_prefixes: &[&str]) {
        for p in &mut self.params {
            p.frozen = !trainable_prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.frozen = false);
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        if p.frozen {
            return;
        }
        p.grad.iter_mut().zip(g).for_each(|(d, s)| *d += s);
        self.has_grads = true;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.has_grads = false;
    }

    /// Scales all accumulated gradients (used to average over a batch).
    pub fn scale_grads(&mut self, k: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= k);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One bias-corrected Adam update of every unfrozen parameter, then
    /// zeroes the gradients.
    #[allow(clippy::needless_range_loop)]
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), AutodiffError> {
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(AutodiffError::InvalidLearningRate(cfg.lr));
        }
        if !self.has_grads {
            return Err(AutodiffError::NoGradients);
        }
        let clip = match cfg.clip_norm {
            Some(max) => {
                let norm = self.grad_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.iter_mut().filter(|p| !p.frozen) {
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i] * clip;
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
        Ok(())
    }

    pub fn snapshot(&self) -> BTreeMap<String, ParamSnapshot> {
        self.params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    ParamSnapshot {
                        value: p.value.clone(),
                        m: p.m.clone(),
                        v: p.v.clone(),
                    },
                )
            })
            .collect()
    }

    /// Rebuilds a store from a snapshot, in sorted-name order.
    pub fn from_snapshot(
        snapshot: &BTreeMap<String, ParamSnapshot>,
        step: u64,
    ) -> Result<Self, AutodiffError> {
        let mut store = Self::new();
        for (name, snap) in snapshot {
            if snap.m.len() != snap.value.len() || snap.v.len() != snap.value.len() {
                return Err(AutodiffError::InvalidArgument {
                    op: "from_snapshot",
                    detail: format!("moment length mismatch for {name}"),
                });
            }
            let id = store.add(name, snap.value.clone())?;
            store.params[id.0].m = snap.m.clone();
            store.params[id.0].v = snap.v.clone();
        }
        store.step = step;
        Ok(store)
    }
}
