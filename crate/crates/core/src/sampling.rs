//! Prosody drawn from a trained prior and decoded through an FVAE decoder.
//!
//! Every draw yields per-phoneme latents and durations, the decoded
//! observation frames and the frame tracks read off them. Sample sets are
//! persisted as versioned JSON lines (header, then one record per draw).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ar_prior::ArPriorModel;
use crate::corpus::{tracks_from_observation, CorpusError, FORMAT_VERSION};
use crate::flow::FlowModel;
use crate::fvae::FvaeModel;
use crate::jsonl::{read_file, write_file};
use crate::math::{RngStream, SeqTensor};
use crate::metrics::{features_from_track, FrameTrack, PhonemeFeatures};
use crate::pool::parallel_map;
use crate::training::{ModelError, ModelKind};

/// Default sampling temperatures (base-distribution std multipliers).
pub const DEFAULT_TEMPERATURES: [f64; 3] = [0.33, 0.5, 0.8];
/// Resamples per text.
pub const DEFAULT_RESAMPLES: usize = 10;
/// Number of texts sampled.
pub const DEFAULT_TEXTS: usize = 50;

/// Where latents come from; decoding always uses the FVAE passed alongside.
#[derive(Debug, Clone, Copy)]
pub enum PriorSampler<'a> {
    /// Post-hoc autoregressive prior over the FVAE's latents.
    Ar(&'a ArPriorModel),
    /// Flow prior over the FVAE's latents and log-durations.
    Flow(&'a FlowModel),
    /// The DVAE's own prior network.
    Dvae,
}

impl PriorSampler<'_> {
    pub fn kind(&self) -> ModelKind {
        match self {
            PriorSampler::Ar(_) => ModelKind::ArPrior,
            PriorSampler::Flow(_) => ModelKind::Flow,
            PriorSampler::Dvae => ModelKind::Dvae,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub text_id: String,
    pub symbols: Vec<usize>,
    pub temperature: f64,
    /// Resample index within this text and temperature.
    pub draw: usize,
    pub durations: Vec<usize>,
    pub latents: SeqTensor,
    pub track: FrameTrack,
}

impl SampleRecord {
    pub fn features(&self) -> Result<Vec<PhonemeFeatures>, ModelError> {
        Ok(features_from_track(&self.track, &self.durations)?)
    }

    fn check(&self, latent_dim: usize) -> Result<(), String> {
        let n = self.symbols.len();
        if n == 0 || self.durations.len() != n || self.durations.contains(&0) {
            return Err(format!(
                "{}: one positive duration per symbol expected",
                self.text_id
            ));
        }
        if self.latents.shape() != (n, latent_dim) {
            return Err(format!(
                "{}: latents have shape {:?}",
                self.text_id,
                self.latents.shape()
            ));
        }
        if self.track.frames() != self.durations.iter().sum::<usize>() {
            return Err(format!(
                "{}: track length differs from the durations",
                self.text_id
            ));
        }
        Ok(())
    }
}

/// One draw for a symbol sequence at a temperature.
pub fn draw(
    fvae: &FvaeModel,
    prior: PriorSampler<'_>,
    symbols: &[usize],
    temperature: f64,
    n_cep: usize,
    rng: &mut RngStream,
) -> Result<(SeqTensor, Vec<usize>, FrameTrack), ModelError> {
    if symbols.is_empty() {
        return Err(ModelError::InvalidConfig(
            "cannot sample an empty text".into(),
        ));
    }
    let context = fvae.context_of(symbols)?;
    let (z, durations) = match prior {
        PriorSampler::Ar(m) => m.net.sample(&m.store, &context, temperature, rng)?,
        PriorSampler::Flow(m) => {
            let (z, durations) = m.sample(&context, temperature, rng)?;
            let durations = durations.ok_or_else(|| {
                ModelError::InvalidConfig("flow has no duration channel to sample from".into())
            })?;
            (z, durations)
        }
        PriorSampler::Dvae => {
            let net = fvae.prior.as_ref().ok_or(ModelError::MissingPrior)?;
            net.sample(&fvae.store, &context, temperature, rng)?
        }
    };
    let x = fvae.decode_latents(symbols, &z, &durations)?;
    let track = tracks_from_observation(&x, n_cep)?;
    Ok((z, durations, track))
}

/// A text to sample: an identifier and its symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleText {
    pub id: String,
    pub symbols: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    /// Which prior produced the latents.
    pub model: ModelKind,
    pub latent_dim: usize,
    pub temperatures: Vec<f64>,
    pub n_resamples: usize,
    pub seed: u64,
    /// Ordered by temperature, then text, then draw.
    pub records: Vec<SampleRecord>,
}

/// `n_resamples` draws for every text at every temperature. The stream of
/// a (temperature, text) pair is `seed → temperature index → text index`, so
/// results do not depend on `workers`, and adding texts or temperatures
/// leaves existing draws unchanged.
#[allow(clippy::too_many_arguments)]
pub fn sample_set(
    fvae: &FvaeModel,
    prior: PriorSampler<'_>,
    texts: &[SampleText],
    temperatures: &[f64],
    n_resamples: usize,
    n_cep: usize,
    seed: u64,
    workers: usize,
) -> Result<SampleSet, ModelError> {
    if texts.is_empty() || temperatures.is_empty() || n_resamples == 0 {
        return Err(ModelError::InvalidConfig(
            "sampling needs texts, temperatures and resamples".into(),
        ));
    }
    let root = RngStream::new(seed).derive_named("samples");
    let jobs: Vec<(usize, usize)> = (0..temperatures.len())
        .flat_map(|ti| (0..texts.len()).map(move |xi| (ti, xi)))
        .collect();
    let groups = parallel_map(
        &jobs,
        workers,
        |_, &(ti, xi)| -> Result<Vec<SampleRecord>, ModelError> {
            let (temperature, text) = (temperatures[ti], &texts[xi]);
            let mut rng = root.derive(ti as u64).derive(xi as u64);
            (0..n_resamples)
                .map(|r| {
                    let (latents, durations, track) =
                        draw(fvae, prior, &text.symbols, temperature, n_cep, &mut rng)?;
                    Ok(SampleRecord {
                        text_id: text.id.clone(),
                        symbols: text.symbols.clone(),
                        temperature,
                        draw: r,
                        durations,
                        latents,
                        track,
                    })
                })
                .collect()
        },
    );
    let mut records = Vec::with_capacity(jobs.len() * n_resamples);
    for g in groups {
        records.extend(g?);
    }
    Ok(SampleSet {
        model: prior.kind(),
        latent_dim: fvae.config.latent_dim,
        temperatures: temperatures.to_vec(),
        n_resamples,
        seed,
        records,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    model: ModelKind,
    latent_dim: usize,
    temperatures: Vec<f64>,
    n_resamples: usize,
    seed: u64,
    n_records: usize,
}

impl SampleSet {
    /// Records at one temperature grouped by text, in first-seen order.
    pub fn by_text(&self, temperature: f64) -> Vec<Vec<&SampleRecord>> {
        let mut groups: Vec<Vec<&SampleRecord>> = Vec::new();
        let mut ids: Vec<&str> = Vec::new();
        for r in self
            .records
            .iter()
            .filter(|r| r.temperature.to_bits() == temperature.to_bits())
        {
            match ids.iter().position(|&id| id == r.text_id) {
                Some(i) => groups[i].push(r),
                None => {
                    ids.push(&r.text_id);
                    groups.push(vec![r]);
                }
            }
        }
        groups
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: "samples".into(),
            model: self.model,
            latent_dim: self.latent_dim,
            temperatures: self.temperatures.clone(),
            n_resamples: self.n_resamples,
            seed: self.seed,
            n_records: self.records.len(),
        };
        write_file(path, &header, self.records.iter())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let (h, records) = read_file(
            path,
            |h: &Header| h.n_records,
            |h: &Header, r: SampleRecord| {
                r.check(h.latent_dim)?;
                Ok(r)
            },
        )?;
        if h.kind != "samples" {
            return Err(CorpusError::Malformed {
                offset: 0,
                reason: "header kind is not \"samples\"".into(),
            });
        }
        Ok(Self {
            model: h.model,
            latent_dim: h.latent_dim,
            temperatures: h.temperatures,
            n_resamples: h.n_resamples,
            seed: h.seed,
            records,
        })
    }
}
