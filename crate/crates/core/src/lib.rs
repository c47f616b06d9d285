//! Phoneme-level prosodic latent priors on synthetic speech-like corpora.
//!
//! The crate trains a fine-grained VAE over per-phoneme latents, fits
//! autoregressive Gaussian and conditional normalizing-flow priors to its
//! posteriors, and evaluates reconstruction (MCD, FFE), expressiveness and
//! diversity of sampled prosody. Data comes from a synthetic generator whose
//! latent process is known exactly, so learned likelihoods can be compared
//! against an oracle.

pub mod ar_prior;
pub mod autodiff;
pub mod corpus;
pub mod flow;
pub mod fvae;
mod jsonl;
pub mod latents;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod pool;
pub mod sampling;
pub mod training;
