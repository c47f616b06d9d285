//! Pieces shared by every trainable model: the error type, the checkpoint
//! container, loss traces and the minibatch sampler.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamSnapshot, ParamStore};
use crate::corpus::{CorpusError, FORMAT_VERSION};
use crate::jsonl::{io_err, parse_versioned};
use crate::math::{MathError, RngState, RngStream};
use crate::metrics::MetricsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("context has {context} steps but latents have {latents}")]
    StepMismatch { context: usize, latents: usize },
    #[error("invalid temperature {0}")]
    InvalidTemperature(f64),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("checkpoint has no prior network")]
    MissingPrior,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("inverse of {layer} is not finite")]
    NonInvertible { layer: String },
    #[error("checkpoint is a {found} model, expected {expected}")]
    WrongKind { expected: String, found: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Data(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ModelError {
    /// Non-finite values raised while training become a divergence at `step`.
    pub(crate) fn at_step(self, step: u64) -> Self {
        match self {
            ModelError::Autodiff(e @ AutodiffError::NonFinite { .. }) => ModelError::Divergence {
                step,
                detail: e.to_string(),
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Fvae,
    Dvae,
    ArPrior,
    Flow,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Fvae => "fvae",
            ModelKind::Dvae => "dvae",
            ModelKind::ArPrior => "ar-prior",
            ModelKind::Flow => "flow",
        }
    }
}

/// Everything needed to resume or reuse a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    /// Model configuration, interpreted by the owning model.
    pub hyper: serde_json::Value,
    pub step: u64,
    pub rng: RngState,
    pub params: BTreeMap<String, ParamSnapshot>,
}

impl Checkpoint {
    pub fn new<H: Serialize>(
        kind: ModelKind,
        hyper: &H,
        store: &ParamStore,
        rng: &RngStream,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            hyper: serde_json::to_value(hyper).expect("config serializes"),
            step: store.step(),
            rng: rng.state(),
            params: store.snapshot(),
        }
    }

    pub fn store(&self) -> Result<ParamStore, ModelError> {
        Ok(ParamStore::from_snapshot(&self.params, self.step)?)
    }

    pub fn hyper<H: for<'de> Deserialize<'de>>(&self) -> Result<H, ModelError> {
        serde_json::from_value(self.hyper.clone())
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))
    }

    pub fn expect_kind(&self, allowed: &[ModelKind]) -> Result<(), ModelError> {
        if allowed.contains(&self.kind) {
            Ok(())
        } else {
            Err(ModelError::WrongKind {
                expected: allowed
                    .iter()
                    .map(|k| k.as_str())
                    .collect::<Vec<_>>()
                    .join("|"),
                found: self.kind.as_str().into(),
            })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Ok(parse_versioned(&bytes, 0)?)
    }

    /// Hex SHA-256 of the parameter values whose names start with any of
    /// `prefixes` (all parameters when empty). Adam moments are excluded.
    pub fn param_checksum(&self, prefixes: &[&str]) -> String {
        let mut bytes = Vec::new();
        for (name, p) in &self.params {
            if prefixes.is_empty() || prefixes.iter().any(|pre| name.starts_with(pre)) {
                bytes.extend_from_slice(name.as_bytes());
                bytes.extend(p.value.data().iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        crate::corpus::hex_digest(&bytes)
    }
}

/// One logged value of a named loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub term: String,
    pub value: f64,
}

impl TraceRow {
    pub fn new(step: u64, term: &str, value: f64) -> Self {
        Self {
            step,
            term: term.into(),
            value,
        }
    }
}

/// Writes a loss trace as CSV with header `step,term,value`.
pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<(), ModelError> {
    let mut out = String::from("step,term,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{:e}\n", r.step, r.term, r.value));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(io_err(path))?;
    Ok(())
}

/// Values of one term in step order.
pub fn term_values(rows: &[TraceRow], term: &str) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.term == term)
        .map(|r| r.value)
        .collect()
}

/// Mean of the first and of the last `window` values.
pub fn smoothed_ends(values: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(values.len() / 2);
    if w == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..w]), mean(&values[values.len() - w..])))
}

/// Shuffled passes over `0..n` cut into minibatches.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: RngStream,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, rng: RngStream) -> Result<Self, ModelError> {
        if n == 0 || batch == 0 {
            return Err(ModelError::InvalidConfig(
                "empty dataset or zero batch size".into(),
            ));
        }
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
            rng,
        };
        s.refill();
        Ok(s)
    }

    fn refill(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.refill();
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Validates Adam settings shared by the training configs.
pub(crate) fn check_training(steps: u64, batch: usize, lr: f64) -> Result<(), ModelError> {
    if steps == 0 || batch == 0 || !(lr > 0.0 && lr.is_finite()) {
        return Err(ModelError::InvalidConfig(format!(
            "steps {steps}, batch {batch} and lr {lr} must all be positive"
        )));
    }
    Ok(())
}
