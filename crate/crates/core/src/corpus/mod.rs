//! Synthetic speech-like corpora with a fully known generative process.
//!
//! Per-phoneme latents follow a symbol-driven AR(1) Gaussian process
//!
//! ```text
//! z_0 = 0,   z_n = A · z_{n−1} + e(y_n) + σ · ε_n,   ε_n ~ N(0, I)
//! ```
//!
//! with `A` symmetric and spectral radius `ar_radius < 1`. Each phoneme lasts
//! `1 + Geometric` frames with a symbol-specific mean modulated by the latent,
//! clipped to `[1, max_duration]`. Every frame of phoneme `n` observes the
//! fixed decoder output plus white noise:
//!
//! | channels          | content                                      |
//! |-------------------|----------------------------------------------|
//! | 0                 | energy feature `w_e · z_n`                   |
//! | 1                 | F0 feature `w_f · z_n` (0 for unvoiced)      |
//! | 2                 | voicing indicator (1 voiced, 0 unvoiced)     |
//! | 3 .. 3+K          | cepstra-like `z_n · C`                       |
//! | 3+K .. obs_dim    | `tanh(z_n W1 + b1) W2 + b2`                  |
//!
//! Frame tracks in physical units are read back from any observation with
//! [`tracks_from_observation`], so reconstructed or sampled observations are
//! scored exactly like the reference.

mod io;

pub use io::{file_checksum, load_corpus, load_process, save_corpus, save_process, FORMAT_VERSION};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::math::{linalg, log_prob_term, MathError, RngStream, SeqTensor};
use crate::metrics::FrameTrack;

pub const OBS_ENERGY: usize = 0;
pub const OBS_F0: usize = 1;
pub const OBS_VOICING: usize = 2;
pub const OBS_CEP: usize = 3;

/// Energy track in dB: `ENERGY_OFFSET + ENERGY_SCALE · x[0]`.
pub const ENERGY_OFFSET: f64 = 60.0;
pub const ENERGY_SCALE: f64 = 6.0;
/// F0 track in Hz: `F0_OFFSET + F0_SCALE · x[1]`, floored at `F0_FLOOR`.
pub const F0_OFFSET: f64 = 150.0;
pub const F0_SCALE: f64 = 30.0;
pub const F0_FLOOR: f64 = 40.0;
/// Latent modulation of the mean duration: `base · exp(k · tanh(w_d · z))`.
const DURATION_MODULATION: f64 = 0.3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed record at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("file ends at byte {offset} after {found} of {expected} utterances")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("process checksum {process} does not match corpus header {corpus}")]
    ProcessMismatch { corpus: String, process: String },
    #[error(transparent)]
    Math(#[from] MathError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_utterances: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub n_cep: usize,
    pub seed: u64,
    /// Spectral radius of the AR matrix.
    pub ar_radius: f64,
    pub innovation_std: f64,
    /// Stddev of the per-symbol latent offsets.
    pub symbol_scale: f64,
    pub obs_noise: f64,
    pub unvoiced_fraction: f64,
    pub max_duration: usize,
    pub decoder_hidden: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_utterances: 200,
            min_len: 8,
            max_len: 24,
            vocab_size: 40,
            latent_dim: 8,
            obs_dim: 32,
            n_cep: 13,
            seed: 0,
            ar_radius: 0.5,
            innovation_std: 0.5,
            symbol_scale: 0.7,
            obs_noise: 0.1,
            unvoiced_fraction: 0.3,
            max_duration: 40,
            decoder_hidden: 16,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidConfig(m));
        if self.n_utterances == 0 || self.vocab_size == 0 || self.latent_dim == 0 || self.n_cep < 2
        {
            return bad("n_utterances, vocab_size, latent_dim must be >= 1 and n_cep >= 2".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "length range {}..={} invalid",
                self.min_len, self.max_len
            ));
        }
        if self.obs_dim < OBS_CEP + self.n_cep {
            return bad(format!(
                "obs_dim {} < 3 + n_cep {}",
                self.obs_dim, self.n_cep
            ));
        }
        if !(self.ar_radius >= 0.0 && self.ar_radius < 1.0) {
            return bad(format!("ar_radius {} outside [0, 1)", self.ar_radius));
        }
        for (name, v) in [
            ("innovation_std", self.innovation_std),
            ("obs_noise", self.obs_noise),
            ("symbol_scale", self.symbol_scale + 1.0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite"));
            }
        }
        if !(0.0..=1.0).contains(&self.unvoiced_fraction) {
            return bad("unvoiced_fraction outside [0, 1]".into());
        }
        if self.max_duration == 0 || self.decoder_hidden == 0 {
            return bad("max_duration and decoder_hidden must be >= 1".into());
        }
        Ok(())
    }

    pub fn extra_dim(&self) -> usize {
        self.obs_dim - OBS_CEP - self.n_cep
    }
}

/// Every parameter of the generating process; serialized next to the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueProcess {
    pub format_version: u32,
    pub config: CorpusConfig,
    /// `V × D` per-symbol latent offsets `e(y)`.
    pub symbol_effect: SeqTensor,
    /// `D × D`, symmetric.
    pub ar_matrix: SeqTensor,
    pub innovation_std: f64,
    /// `1 × V` mean duration per symbol before modulation.
    pub duration_base: SeqTensor,
    /// `1 × D`
    pub duration_weight: SeqTensor,
    pub voiced: Vec<bool>,
    /// `1 × D`
    pub energy_weight: SeqTensor,
    /// `1 × D`
    pub f0_weight: SeqTensor,
    /// `D × K`
    pub cep_map: SeqTensor,
    /// `D × H`, `1 × H`, `H × E`, `1 × E` (absent when there are no extra
    /// channels).
    pub decoder: Option<[SeqTensor; 4]>,
    pub obs_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub symbols: Vec<usize>,
    pub durations: Vec<usize>,
    pub oracle_latents: SeqTensor,
    pub tracks: FrameTrack,
    pub observation: SeqTensor,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Phoneme index of every frame.
    pub fn frame_owner(&self) -> Vec<usize> {
        expand_durations(&self.durations)
    }

    /// Structural invariants; `Err` carries the reason.
    pub fn check(
        &self,
        obs_dim: usize,
        n_cep: usize,
        latent_dim: usize,
        vocab: usize,
    ) -> Result<(), String> {
        let n = self.symbols.len();
        if n == 0 {
            return Err(format!("{}: no symbols", self.id));
        }
        if self.durations.len() != n || self.oracle_latents.rows() != n {
            return Err(format!("{}: per-phoneme lengths disagree", self.id));
        }
        if self.durations.contains(&0) {
            return Err(format!("{}: zero duration", self.id));
        }
        if let Some(s) = self.symbols.iter().find(|&&s| s >= vocab) {
            return Err(format!(
                "{}: symbol {s} outside vocabulary {vocab}",
                self.id
            ));
        }
        let frames = self.frames();
        if self.observation.rows() != frames || self.tracks.frames() != frames {
            return Err(format!(
                "{}: durations sum to {frames} but observation has {} and tracks {} frames",
                self.id,
                self.observation.rows(),
                self.tracks.frames()
            ));
        }
        if self.observation.cols() != obs_dim
            || self.tracks.mcep.cols() != n_cep
            || self.oracle_latents.cols() != latent_dim
        {
            return Err(format!("{}: channel counts disagree with config", self.id));
        }
        Ok(())
    }
}

/// `[0, 0, 1, 2, 2, 2]` for durations `[2, 1, 3]`.
pub fn expand_durations(durations: &[usize]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub process_checksum: String,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Splits off the last `n_heldout` utterances.
    pub fn split(&self, n_heldout: usize) -> (Corpus, Corpus) {
        let cut = self.utterances.len().saturating_sub(n_heldout);
        let mk = |u: &[Utterance]| Corpus {
            config: self.config.clone(),
            process_checksum: self.process_checksum.clone(),
            utterances: u.to_vec(),
        };
        (mk(&self.utterances[..cut]), mk(&self.utterances[cut..]))
    }

    pub fn total_steps(&self) -> usize {
        self.utterances.iter().map(Utterance::len).sum()
    }
}

/// Physical-unit frame tracks read off observation channels.
pub fn tracks_from_observation(x: &SeqTensor, n_cep: usize) -> Result<FrameTrack, CorpusError> {
    if x.cols() < OBS_CEP + n_cep {
        return Err(CorpusError::InvalidConfig(format!(
            "observation has {} channels, need {}",
            x.cols(),
            OBS_CEP + n_cep
        )));
    }
    let n = x.rows();
    let mut f0 = Vec::with_capacity(n);
    let mut voiced = Vec::with_capacity(n);
    let mut energy = Vec::with_capacity(n);
    let mut mcep = Vec::with_capacity(n * n_cep);
    for row in x.iter_rows() {
        let v = row[OBS_VOICING] > 0.5;
        voiced.push(v);
        f0.push(if v {
            (F0_OFFSET + F0_SCALE * row[OBS_F0]).max(F0_FLOOR)
        } else {
            0.0
        });
        energy.push(ENERGY_OFFSET + ENERGY_SCALE * row[OBS_ENERGY]);
        mcep.extend_from_slice(&row[OBS_CEP..OBS_CEP + n_cep]);
    }
    let mcep = SeqTensor::new(n, n_cep, mcep)?;
    FrameTrack::new(f0, voiced, energy, mcep).map_err(|e| CorpusError::InvalidConfig(e.to_string()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vec_mat(v: &[f64], m: &SeqTensor) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, &vi) in v.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(m.row(i)) {
            *o += vi * w;
        }
    }
    out
}

impl TrueProcess {
    /// Draws all process parameters from `config.seed`.
    pub fn generate(config: &CorpusConfig) -> Result<Self, CorpusError> {
        config.validate()?;
        let (v, d, k) = (config.vocab_size, config.latent_dim, config.n_cep);
        let mut rng = RngStream::new(config.seed).derive_named("process");

        let symbol_effect = SeqTensor::new(
            v,
            d,
            rng.normals(v * d)
                .iter()
                .map(|x| x * config.symbol_scale)
                .collect(),
        )?;

        let q = linalg::random_orthogonal(d, &mut rng);
        let r = config.ar_radius;
        let eig: Vec<f64> = (0..d)
            .map(|i| {
                if i == 0 {
                    r
                } else {
                    r * (0.2 + 0.8 * rng.uniform())
                }
            })
            .collect();
        let mut ar = SeqTensor::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let s: f64 = (0..d).map(|m| q.get(i, m) * eig[m] * q.get(j, m)).sum();
                ar.set(i, j, s);
            }
        }
        // exact symmetry
        for i in 0..d {
            for j in 0..i {
                let s = 0.5 * (ar.get(i, j) + ar.get(j, i));
                ar.set(i, j, s);
                ar.set(j, i, s);
            }
        }

        let duration_base =
            SeqTensor::new(1, v, (0..v).map(|_| 2.0 + 8.0 * rng.uniform()).collect())?;
        let mut order: Vec<usize> = (0..v).collect();
        rng.shuffle(&mut order);
        let n_unvoiced = (config.unvoiced_fraction * v as f64).round() as usize;
        let mut voiced = vec![true; v];
        for &s in &order[..n_unvoiced.min(v)] {
            voiced[s] = false;
        }

        let mut proc = Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            symbol_effect,
            ar_matrix: ar,
            innovation_std: config.innovation_std,
            duration_base,
            duration_weight: SeqTensor::zeros(1, d),
            voiced,
            energy_weight: SeqTensor::zeros(1, d),
            f0_weight: SeqTensor::zeros(1, d),
            cep_map: SeqTensor::zeros(d, k),
            decoder: None,
            obs_noise: config.obs_noise,
        };

        let sigma = proc.stationary_covariance();
        let unit_variance = |rng: &mut RngStream| -> Result<SeqTensor, CorpusError> {
            let u = rng.normals(d);
            let su = vec_mat(&u, &sigma);
            let var = dot(&u, &su);
            Ok(SeqTensor::new(
                1,
                d,
                u.iter().map(|x| x / var.sqrt()).collect(),
            )?)
        };
        proc.duration_weight = unit_variance(&mut rng)?;
        proc.energy_weight = unit_variance(&mut rng)?;
        proc.f0_weight = unit_variance(&mut rng)?;

        let mean_var = (0..d).map(|i| sigma.get(i, i)).sum::<f64>() / d as f64;
        let cep_scale = 1.0 / (d as f64 * mean_var).sqrt();
        proc.cep_map = SeqTensor::new(
            d,
            k,
            rng.normals(d * k).iter().map(|x| x * cep_scale).collect(),
        )?;

        let e = config.extra_dim();
        if e > 0 {
            let h = config.decoder_hidden;
            let s1 = 1.0 / (d as f64 * mean_var).sqrt();
            let w1 = SeqTensor::new(d, h, rng.normals(d * h).iter().map(|x| x * s1).collect())?;
            let b1 = SeqTensor::new(1, h, rng.normals(h).iter().map(|x| 0.1 * x).collect())?;
            let s2 = 1.5 / (h as f64).sqrt();
            let w2 = SeqTensor::new(h, e, rng.normals(h * e).iter().map(|x| x * s2).collect())?;
            let b2 = SeqTensor::zeros(1, e);
            proc.decoder = Some([w1, b1, w2, b2]);
        }
        Ok(proc)
    }

    pub fn latent_dim(&self) -> usize {
        self.ar_matrix.rows()
    }

    /// Hex SHA-256 of the serialized process.
    pub fn checksum(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("process serializes");
        hex_digest(&bytes)
    }

    /// Mean and covariance of `e(y)` under uniformly drawn symbols.
    pub fn symbol_moments(&self) -> (Vec<f64>, SeqTensor) {
        let (v, d) = self.symbol_effect.shape();
        let mut mean = vec![0.0; d];
        for row in self.symbol_effect.iter_rows() {
            mean.iter_mut()
                .zip(row)
                .for_each(|(m, x)| *m += x / v as f64);
        }
        let mut cov = SeqTensor::zeros(d, d);
        for row in self.symbol_effect.iter_rows() {
            for i in 0..d {
                for j in 0..d {
                    let c = cov.get(i, j) + (row[i] - mean[i]) * (row[j] - mean[j]) / v as f64;
                    cov.set(i, j, c);
                }
            }
        }
        (mean, cov)
    }

    /// Stationary covariance `Σ = A Σ Aᵀ + Q` of the latent process under
    /// i.i.d. uniform symbols, with `Q = Cov[e(y)] + σ² I`.
    pub fn stationary_covariance(&self) -> SeqTensor {
        let d = self.latent_dim();
        let (_, mut q) = self.symbol_moments();
        for i in 0..d {
            q.set(
                i,
                i,
                q.get(i, i) + self.innovation_std * self.innovation_std,
            );
        }
        let a = &self.ar_matrix;
        let at = a.transpose();
        let mut sigma = q.clone();
        for _ in 0..100_000 {
            let next = a
                .matmul(&sigma)
                .and_then(|m| m.matmul(&at))
                .expect("square");
            let next = SeqTensor::from_raw(
                d,
                d,
                next.data()
                    .iter()
                    .zip(q.data())
                    .map(|(x, y)| x + y)
                    .collect(),
            );
            let delta = next.max_abs_diff(&sigma).expect("same shape");
            sigma = next;
            if delta < 1e-15 {
                break;
            }
        }
        sigma
    }

    /// Conditional mean of `z_n` given the previous latent and symbol.
    pub fn conditional_mean(&self, prev: &[f64], symbol: usize) -> Vec<f64> {
        let d = self.latent_dim();
        (0..d)
            .map(|i| dot(self.ar_matrix.row(i), prev) + self.symbol_effect.get(symbol, i))
            .collect()
    }

    /// Noise-free observation row for latent `z` of a phoneme with `symbol`.
    pub fn clean_frame(&self, z: &[f64], symbol: usize) -> Vec<f64> {
        let cfg = &self.config;
        let mut out = vec![0.0; cfg.obs_dim];
        let voiced = self.voiced[symbol];
        out[OBS_ENERGY] = dot(self.energy_weight.data(), z);
        out[OBS_F0] = if voiced {
            dot(self.f0_weight.data(), z)
        } else {
            0.0
        };
        out[OBS_VOICING] = if voiced { 1.0 } else { 0.0 };
        out[OBS_CEP..OBS_CEP + cfg.n_cep].copy_from_slice(&vec_mat(z, &self.cep_map));
        if let Some([w1, b1, w2, b2]) = &self.decoder {
            let h: Vec<f64> = vec_mat(z, w1)
                .iter()
                .zip(b1.data())
                .map(|(x, b)| (x + b).tanh())
                .collect();
            let extra: Vec<f64> = vec_mat(&h, w2)
                .iter()
                .zip(b2.data())
                .map(|(x, b)| x + b)
                .collect();
            out[OBS_CEP + cfg.n_cep..].copy_from_slice(&extra);
        }
        out
    }

    fn draw_duration(&self, z: &[f64], symbol: usize, rng: &mut RngStream) -> usize {
        let mean = self.duration_base.data()[symbol]
            * (DURATION_MODULATION * dot(self.duration_weight.data(), z).tanh()).exp();
        let p = (1.0 / mean).min(1.0);
        let failures = if p >= 1.0 {
            0.0
        } else {
            ((1.0 - rng.uniform()).ln() / (1.0 - p).ln()).floor()
        };
        (1 + failures as usize).clamp(1, self.config.max_duration)
    }

    /// Draws utterance `index` from its own substream of the master seed.
    pub fn generate_utterance(&self, index: usize) -> Result<Utterance, CorpusError> {
        let cfg = &self.config;
        let d = self.latent_dim();
        let mut rng = RngStream::new(cfg.seed)
            .derive_named("utterances")
            .derive(index as u64);
        let n = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
        let symbols: Vec<usize> = (0..n).map(|_| rng.below(cfg.vocab_size)).collect();
        let mut latents = Vec::with_capacity(n * d);
        let mut prev = vec![0.0; d];
        for &s in &symbols {
            let mean = self.conditional_mean(&prev, s);
            let z: Vec<f64> = mean
                .iter()
                .map(|m| m + self.innovation_std * rng.normal())
                .collect();
            latents.extend_from_slice(&z);
            prev = z;
        }
        let oracle_latents = SeqTensor::new(n, d, latents)?;
        let durations: Vec<usize> = symbols
            .iter()
            .enumerate()
            .map(|(i, &s)| self.draw_duration(oracle_latents.row(i), s, &mut rng))
            .collect();
        let frames: usize = durations.iter().sum();
        let mut obs = Vec::with_capacity(frames * cfg.obs_dim);
        for (i, (&s, &dur)) in symbols.iter().zip(&durations).enumerate() {
            let clean = self.clean_frame(oracle_latents.row(i), s);
            for _ in 0..dur {
                obs.extend(clean.iter().map(|c| c + self.obs_noise * rng.normal()));
            }
        }
        let observation = SeqTensor::new(frames, cfg.obs_dim, obs)?;
        let tracks = tracks_from_observation(&observation, cfg.n_cep)?;
        Ok(Utterance {
            id: format!("utt{index:05}"),
            symbols,
            durations,
            oracle_latents,
            tracks,
            observation,
        })
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Generates a corpus and the process that produced it.
pub fn generate_corpus(config: &CorpusConfig) -> Result<(Corpus, TrueProcess), CorpusError> {
    let process = TrueProcess::generate(config)?;
    let utterances = (0..config.n_utterances)
        .map(|i| process.generate_utterance(i))
        .collect::<Result<Vec<_>, _>>()?;
    let corpus = Corpus {
        config: config.clone(),
        process_checksum: process.checksum(),
        utterances,
    };
    Ok((corpus, process))
}

/// Average per-step, per-dimension NLL with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllEstimate {
    pub per_dim: f64,
    pub std_error: f64,
    pub n_steps: usize,
}

impl NllEstimate {
    /// Mean and standard error of per-step values.
    pub fn from_steps(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            per_dim: mean,
            std_error: (var / n.max(1) as f64).sqrt(),
            n_steps: n,
        }
    }
}

/// NLL of the corpus's oracle latents under `process`, without checking that
/// `process` generated the corpus.
pub fn process_nll(corpus: &Corpus, process: &TrueProcess) -> Result<NllEstimate, CorpusError> {
    let d = process.latent_dim();
    let mut steps = Vec::with_capacity(corpus.total_steps());
    for u in &corpus.utterances {
        if u.oracle_latents.cols() != d {
            return Err(CorpusError::ProcessMismatch {
                corpus: format!("latent dim {}", u.oracle_latents.cols()),
                process: format!("latent dim {d}"),
            });
        }
        let mut prev = vec![0.0; d];
        for (n, &s) in u.symbols.iter().enumerate() {
            let z = u.oracle_latents.row(n);
            let mean = process.conditional_mean(&prev, s);
            let log_std = process.innovation_std.ln();
            let lp: f64 = z
                .iter()
                .zip(&mean)
                .map(|(&x, &m)| log_prob_term(x, m, log_std))
                .sum();
            steps.push(-lp / d as f64);
            prev = z.to_vec();
        }
    }
    if steps.is_empty() {
        return Err(CorpusError::InvalidConfig("corpus has no steps".into()));
    }
    Ok(NllEstimate::from_steps(&steps))
}

/// NLL of the oracle latents under the process that generated them.
pub fn oracle_nll(corpus: &Corpus, process: &TrueProcess) -> Result<NllEstimate, CorpusError> {
    let checksum = process.checksum();
    if checksum != corpus.process_checksum {
        return Err(CorpusError::ProcessMismatch {
            corpus: corpus.process_checksum.clone(),
            process: checksum,
        });
    }
    process_nll(corpus, process)
}
