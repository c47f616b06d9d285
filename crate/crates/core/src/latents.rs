//! Per-utterance latent records shared by the prior models: posterior
//! means and stds, one posterior sample, durations and text context.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, FORMAT_VERSION};
use crate::jsonl::{read_file, write_file};
use crate::math::{RngStream, SeqTensor};
use crate::nn::BatchLayout;
use crate::training::ModelError;

/// Posterior std assigned to oracle latents, which are known exactly.
pub const ORACLE_STD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub id: String,
    pub symbols: Vec<usize>,
    /// `N × D`
    pub means: SeqTensor,
    /// `N × D`, all positive.
    pub stds: SeqTensor,
    /// `N × D`
    pub sample: SeqTensor,
    pub durations: Vec<usize>,
    /// `N × C`
    pub context: SeqTensor,
}

impl LatentRecord {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    fn check(&self, latent_dim: usize, context_dim: usize) -> Result<(), String> {
        let n = self.symbols.len();
        if n == 0 {
            return Err(format!("{}: empty record", self.id));
        }
        for (name, t, cols) in [
            ("means", &self.means, latent_dim),
            ("stds", &self.stds, latent_dim),
            ("sample", &self.sample, latent_dim),
            ("context", &self.context, context_dim),
        ] {
            if t.shape() != (n, cols) {
                return Err(format!(
                    "{}: {name} has shape {:?}, expected ({n}, {cols})",
                    self.id,
                    t.shape()
                ));
            }
        }
        if self.durations.len() != n || self.durations.contains(&0) {
            return Err(format!(
                "{}: durations must be one positive integer per step",
                self.id
            ));
        }
        if self.stds.data().iter().any(|&s| s <= 0.0) {
            return Err(format!("{}: non-positive posterior std", self.id));
        }
        Ok(())
    }

    /// A fresh reparameterized draw `means + stds ⊙ ε`.
    pub fn draw(&self, rng: &mut RngStream) -> SeqTensor {
        let data = self
            .means
            .data()
            .iter()
            .zip(self.stds.data())
            .map(|(m, s)| m + s * rng.normal())
            .collect();
        SeqTensor::new(self.means.rows(), self.means.cols(), data).expect("finite draw")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDataset {
    pub latent_dim: usize,
    pub context_dim: usize,
    /// Checkpoint id or corpus checksum the latents came from.
    pub source: String,
    pub seed: u64,
    pub records: Vec<LatentRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    latent_dim: usize,
    context_dim: usize,
    source: String,
    seed: u64,
    n_records: usize,
}

/// Row `i` is the one-hot encoding of `symbols[i]`.
pub fn one_hot(symbols: &[usize], vocab: usize) -> SeqTensor {
    let mut t = SeqTensor::zeros(symbols.len(), vocab);
    for (i, &s) in symbols.iter().enumerate() {
        t.set(i, s, 1.0);
    }
    t
}

impl LatentDataset {
    /// Oracle latents of a corpus as a dataset: means are the true latents,
    /// stds are [`ORACLE_STD`] and the context is the one-hot symbol.
    pub fn from_oracle(corpus: &Corpus) -> Self {
        let cfg = &corpus.config;
        let records = corpus
            .utterances
            .iter()
            .map(|u| LatentRecord {
                id: u.id.clone(),
                symbols: u.symbols.clone(),
                means: u.oracle_latents.clone(),
                stds: SeqTensor::filled(u.len(), cfg.latent_dim, ORACLE_STD),
                sample: u.oracle_latents.clone(),
                durations: u.durations.clone(),
                context: one_hot(&u.symbols, cfg.vocab_size),
            })
            .collect();
        Self {
            latent_dim: cfg.latent_dim,
            context_dim: cfg.vocab_size,
            source: corpus.process_checksum.clone(),
            seed: cfg.seed,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.records.iter().map(LatentRecord::len).sum()
    }

    /// Splits off the last `n_heldout` records.
    pub fn split(&self, n_heldout: usize) -> (LatentDataset, LatentDataset) {
        let cut = self.records.len().saturating_sub(n_heldout);
        let mk = |r: &[LatentRecord]| LatentDataset {
            records: r.to_vec(),
            ..self.clone_header()
        };
        (mk(&self.records[..cut]), mk(&self.records[cut..]))
    }

    fn clone_header(&self) -> LatentDataset {
        LatentDataset {
            latent_dim: self.latent_dim,
            context_dim: self.context_dim,
            source: self.source.clone(),
            seed: self.seed,
            records: Vec::new(),
        }
    }

    /// Mean of all posterior stds (posterior-collapse diagnostic).
    pub fn mean_posterior_std(&self) -> f64 {
        let n: usize = self.records.iter().map(|r| r.stds.len()).sum();
        self.records.iter().map(|r| r.stds.sum()).sum::<f64>() / n.max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: "latents".into(),
            latent_dim: self.latent_dim,
            context_dim: self.context_dim,
            source: self.source.clone(),
            seed: self.seed,
            n_records: self.records.len(),
        };
        write_file(path, &header, self.records.iter())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let (h, records) = read_file(
            path,
            |h: &Header| h.n_records,
            |h: &Header, r: LatentRecord| {
                r.check(h.latent_dim, h.context_dim)?;
                Ok(r)
            },
        )?;
        if h.kind != "latents" {
            return Err(CorpusError::Malformed {
                offset: 0,
                reason: "header kind is not \"latents\"".into(),
            });
        }
        Ok(Self {
            latent_dim: h.latent_dim,
            context_dim: h.context_dim,
            source: h.source,
            seed: h.seed,
            records,
        })
    }
}

/// Several records stacked flat (utterance after utterance).
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub layout: BatchLayout,
    pub context: SeqTensor,
    pub means: SeqTensor,
    pub stds: SeqTensor,
    pub durations: Vec<usize>,
}

impl LatentBatch {
    pub fn new(records: &[&LatentRecord]) -> Result<Self, ModelError> {
        let layout = BatchLayout::new(records.iter().map(|r| r.len()).collect())?;
        let stack = |f: fn(&LatentRecord) -> &SeqTensor| -> Result<SeqTensor, ModelError> {
            let parts: Vec<&SeqTensor> = records.iter().map(|r| f(r)).collect();
            Ok(SeqTensor::concat_rows(&parts)?)
        };
        Ok(Self {
            context: stack(|r| &r.context)?,
            means: stack(|r| &r.means)?,
            stds: stack(|r| &r.stds)?,
            durations: records
                .iter()
                .flat_map(|r| r.durations.iter().copied())
                .collect(),
            layout,
        })
    }

    pub fn from_dataset(data: &LatentDataset, indices: &[usize]) -> Result<Self, ModelError> {
        let recs: Vec<&LatentRecord> = indices.iter().map(|&i| &data.records[i]).collect();
        Self::new(&recs)
    }

    pub fn log_stds(&self) -> SeqTensor {
        self.stds.map(f64::ln)
    }

    /// `means + stds ⊙ ε` with fresh noise.
    pub fn draw(&self, rng: &mut RngStream) -> SeqTensor {
        let data = self
            .means
            .data()
            .iter()
            .zip(self.stds.data())
            .map(|(m, s)| m + s * rng.normal())
            .collect();
        SeqTensor::new(self.means.rows(), self.means.cols(), data).expect("finite draw")
    }
}
