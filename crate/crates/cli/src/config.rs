//! Run configurations: one JSON object per command, every field optional,
//! with command-line flags applied on top.

use std::fmt;
use std::fs;
use std::path::Path;

use prosody_priors::ar_prior::TeacherInput;
use prosody_priors::corpus::CorpusConfig;
use prosody_priors::flow::LinearInit;
use prosody_priors::sampling::{DEFAULT_RESAMPLES, DEFAULT_TEMPERATURES, DEFAULT_TEXTS};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// A bad flag, config file or config value. Exits with code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

/// Flag values that override config fields.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dim: Option<usize>,
    pub steps: Option<u64>,
    pub temperatures: Option<Vec<f64>>,
}

pub trait RunConfig: Serialize + DeserializeOwned + Default {
    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()>;
    fn validate(&self) -> Result<(), String>;
}

/// Reads `path` (or the defaults), applies `overrides` and validates.
pub fn resolve<T: RunConfig>(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<T> {
    let mut cfg = match path {
        None => T::default(),
        Some(p) => {
            let bytes = fs::read(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| usage(format!("config {}: {e}", p.display())))?
        }
    };
    cfg.apply(overrides)?;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn reject(flag: &str, value: bool) -> anyhow::Result<()> {
    if value {
        Err(usage(format!("{flag} does not apply to this command")))
    } else {
        Ok(())
    }
}

fn check_optim(steps: u64, batch_size: usize, lr: f64, clip: Option<f64>) -> Result<(), String> {
    if steps == 0 || batch_size == 0 {
        return Err("steps and batch_size must be positive".into());
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(format!("lr {lr} must be positive and finite"));
    }
    if clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
        return Err("clip_norm must be positive when set".into());
    }
    Ok(())
}

fn positive(fields: &[(&str, usize)]) -> Result<(), String> {
    match fields.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(format!("{name} must be positive")),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub corpus: CorpusConfig,
    /// Utterances split off into `heldout.jsonl`.
    pub heldout: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            heldout: 40,
        }
    }
}

impl RunConfig for GenDataConfig {
    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        reject("--dim", o.dim.is_some())?;
        reject("--steps", o.steps.is_some())?;
        reject("--temperature", o.temperatures.is_some())?;
        if let Some(seed) = o.seed {
            self.corpus.seed = seed;
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        self.corpus.validate().map_err(|e| e.to_string())?;
        if self.heldout >= self.corpus.n_utterances {
            return Err(format!(
                "heldout {} leaves no training utterances out of {}",
                self.heldout, self.corpus.n_utterances
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FvaeRunConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub text_hidden: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub prior_hidden: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub warmup_fraction: f64,
    pub clip_norm: Option<f64>,
}

impl Default for FvaeRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_dim: 8,
            embed_dim: 16,
            text_hidden: 32,
            enc_hidden: 64,
            dec_hidden: 64,
            prior_hidden: 64,
            steps: 2000,
            batch_size: 16,
            lr: 2e-3,
            beta: 1.0,
            warmup_fraction: 0.1,
            clip_norm: Some(10.0),
        }
    }
}

impl RunConfig for FvaeRunConfig {
    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        reject("--temperature", o.temperatures.is_some())?;
        self.seed = o.seed.unwrap_or(self.seed);
        self.latent_dim = o.dim.unwrap_or(self.latent_dim);
        self.steps = o.steps.unwrap_or(self.steps);
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        check_optim(self.steps, self.batch_size, self.lr, self.clip_norm)?;
        positive(&[
            ("latent_dim", self.latent_dim),
            ("embed_dim", self.embed_dim),
            ("text_hidden", self.text_hidden),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("prior_hidden", self.prior_hidden),
        ])?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(format!("beta {} must be non-negative", self.beta));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err("warmup_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArPriorRunConfig {
    pub seed: u64,
    pub hidden: usize,
    pub dur_hidden: usize,
    pub teacher: TeacherInput,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
}

impl Default for ArPriorRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hidden: 64,
            dur_hidden: 32,
            teacher: TeacherInput::Samples,
            steps: 1000,
            batch_size: 16,
            lr: 3e-3,
            clip_norm: Some(10.0),
        }
    }
}

impl RunConfig for ArPriorRunConfig {
    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        reject("--dim", o.dim.is_some())?;
        reject("--temperature", o.temperatures.is_some())?;
        self.seed = o.seed.unwrap_or(self.seed);
        self.steps = o.steps.unwrap_or(self.steps);
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        check_optim(self.steps, self.batch_size, self.lr, self.clip_norm)?;
        positive(&[("hidden", self.hidden), ("dur_hidden", self.dur_hidden)])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowRunConfig {
    pub seed: u64,
    pub blocks: usize,
    pub coupling_hidden: usize,
    pub base_hidden: usize,
    pub linear_init: LinearInit,
    pub include_duration: bool,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
}

impl Default for FlowRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            blocks: 4,
            coupling_hidden: 32,
            base_hidden: 32,
            linear_init: LinearInit::default(),
            include_duration: true,
            steps: 1000,
            batch_size: 16,
            lr: 2e-3,
            clip_norm: Some(10.0),
        }
    }
}

impl RunConfig for FlowRunConfig {
    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        reject("--dim", o.dim.is_some())?;
        reject("--temperature", o.temperatures.is_some())?;
        self.seed = o.seed.unwrap_or(self.seed);
        self.steps = o.steps.unwrap_or(self.steps);
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        check_optim(self.steps, self.batch_size, self.lr, self.clip_norm)?;
        positive(&[
            ("coupling_hidden", self.coupling_hidden),
            ("base_hidden", self.base_hidden),
        ])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneRunConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub validation_fraction: f64,
    pub eval_every: u64,
}

impl Default for FinetuneRunConfig {
    fn default() -> Self {
        let d = prosody_priors::fvae::FinetuneConfig::default();
        Self {
            seed: 0,
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            clip_norm: d.clip_norm,
            validation_fraction: d.validation_fraction,
            eval_every: d.eval_every,
        }
    }
}

impl RunConfig for FinetuneRunConfig {
    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        reject("--dim", o.dim.is_some())?;
        reject("--temperature", o.temperatures.is_some())?;
        self.seed = o.seed.unwrap_or(self.seed);
        self.steps = o.steps.unwrap_or(self.steps);
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        check_optim(self.steps, self.batch_size, self.lr, self.clip_norm)?;
        if !(0.0..1.0).contains(&self.validation_fraction) || self.eval_every == 0 {
            return Err(
                "validation_fraction must lie in [0, 1) and eval_every must be positive".into(),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub seed: u64,
}

impl RunConfig for ExtractConfig {
    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        reject("--dim", o.dim.is_some())?;
        reject("--steps", o.steps.is_some())?;
        reject("--temperature", o.temperatures.is_some())?;
        self.seed = o.seed.unwrap_or(self.seed);
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleRunConfig {
    pub seed: u64,
    pub temperatures: Vec<f64>,
    pub resamples: usize,
    /// Number of texts taken from the front of the corpus.
    pub texts: usize,
}

impl Default for SampleRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            temperatures: DEFAULT_TEMPERATURES.to_vec(),
            resamples: DEFAULT_RESAMPLES,
            texts: DEFAULT_TEXTS,
        }
    }
}

impl RunConfig for SampleRunConfig {
    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        reject("--dim", o.dim.is_some())?;
        reject("--steps", o.steps.is_some())?;
        self.seed = o.seed.unwrap_or(self.seed);
        if let Some(t) = &o.temperatures {
            self.temperatures = t.clone();
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        positive(&[("resamples", self.resamples), ("texts", self.texts)])?;
        if self.temperatures.is_empty() {
            return Err("at least one temperature is required".into());
        }
        if let Some(t) = self
            .temperatures
            .iter()
            .find(|t| !(**t >= 0.0 && t.is_finite()))
        {
            return Err(format!("temperature {t} must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Row label; defaults to the model family name.
    pub name: Option<String>,
}

impl RunConfig for EvalConfig {
    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        reject("--seed", o.seed.is_some())?;
        reject("--dim", o.dim.is_some())?;
        reject("--steps", o.steps.is_some())?;
        reject("--temperature", o.temperatures.is_some())
    }

    fn validate(&self) -> Result<(), String> {
        match &self.name {
            Some(n) if n.is_empty() || n.contains([',', '|', '\n']) => Err(format!(
                "name {n:?} must be non-empty without , | or newlines"
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {}

impl RunConfig for ReportConfig {
    fn apply(&mut self, o: &Overrides) -> anyhow::Result<()> {
        reject("--seed", o.seed.is_some())?;
        reject("--dim", o.dim.is_some())?;
        reject("--steps", o.steps.is_some())?;
        reject("--temperature", o.temperatures.is_some())
    }

    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}
