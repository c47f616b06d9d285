use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{hex_digest, Corpus, CorpusConfig, CorpusError, TrueProcess, Utterance};
use crate::jsonl::{io_err, parse_versioned, read_file, write_file};
use crate::math::{decode_f64s, encode_f64s, SeqTensor};
use crate::metrics::FrameTrack;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: CorpusConfig,
    process_checksum: String,
    n_utterances: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    symbols: Vec<usize>,
    durations: Vec<usize>,
    oracle_latents: SeqTensor,
    f0: String,
    voiced: String,
    energy: String,
    mcep: SeqTensor,
    observation: SeqTensor,
}

impl Record {
    fn from_utterance(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            symbols: u.symbols.clone(),
            durations: u.durations.clone(),
            oracle_latents: u.oracle_latents.clone(),
            f0: encode_f64s(&u.tracks.f0),
            voiced: u
                .tracks
                .voiced
                .iter()
                .map(|&v| if v { '1' } else { '0' })
                .collect(),
            energy: encode_f64s(&u.tracks.energy),
            mcep: u.tracks.mcep.clone(),
            observation: u.observation.clone(),
        }
    }

    fn into_utterance(self) -> Result<Utterance, String> {
        let voiced = self
            .voiced
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(format!("voicing flag {other:?} is not 0 or 1")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let f0 = decode_f64s(&self.f0)?;
        let energy = decode_f64s(&self.energy)?;
        let tracks = FrameTrack::new(f0, voiced, energy, self.mcep).map_err(|e| e.to_string())?;
        Ok(Utterance {
            id: self.id,
            symbols: self.symbols,
            durations: self.durations,
            oracle_latents: self.oracle_latents,
            tracks,
            observation: self.observation,
        })
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_checksum(path: &Path) -> Result<String, CorpusError> {
    Ok(hex_digest(&fs::read(path).map_err(io_err(path))?))
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "corpus".into(),
        config: corpus.config.clone(),
        process_checksum: corpus.process_checksum.clone(),
        n_utterances: corpus.utterances.len(),
    };
    write_file(
        path,
        &header,
        corpus.utterances.iter().map(Record::from_utterance),
    )
}

/// Reads a corpus, validating the header and every utterance. Errors carry
/// the byte offset of the offending record.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let (header, utterances) = read_file(
        path,
        |h: &Header| h.n_utterances,
        |h: &Header, r: Record| {
            let cfg = &h.config;
            let u = r.into_utterance()?;
            u.check(cfg.obs_dim, cfg.n_cep, cfg.latent_dim, cfg.vocab_size)?;
            Ok(u)
        },
    )?;
    let bad_header = |reason: &str| CorpusError::Malformed {
        offset: 0,
        reason: reason.into(),
    };
    if header.kind != "corpus" {
        return Err(bad_header("header kind is not \"corpus\""));
    }
    if header.process_checksum.len() != 64
        || !header
            .process_checksum
            .bytes()
            .all(|b| b.is_ascii_hexdigit())
    {
        return Err(bad_header("process_checksum is not a SHA-256 hex digest"));
    }
    Ok(Corpus {
        config: header.config,
        process_checksum: header.process_checksum,
        utterances,
    })
}

/// Writes the process sidecar. The file's SHA-256 equals
/// [`TrueProcess::checksum`].
pub fn save_process(process: &TrueProcess, path: &Path) -> Result<(), CorpusError> {
    fs::write(
        path,
        serde_json::to_vec(process).expect("process serializes"),
    )
    .map_err(io_err(path))
}

pub fn load_process(path: &Path) -> Result<TrueProcess, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let process: TrueProcess = parse_versioned(&bytes, 0)?;
    let d = process.latent_dim();
    let cfg = &process.config;
    let shapes_ok = process.ar_matrix.shape() == (d, d)
        && d == cfg.latent_dim
        && process.symbol_effect.shape() == (cfg.vocab_size, d)
        && process.voiced.len() == cfg.vocab_size
        && process.duration_base.len() == cfg.vocab_size
        && process.cep_map.shape() == (d, cfg.n_cep)
        && process.decoder.is_some() == (cfg.extra_dim() > 0);
    if !shapes_ok {
        return Err(CorpusError::Malformed {
            offset: 0,
            reason: "process parameter shapes disagree with its config".into(),
        });
    }
    Ok(process)
}
