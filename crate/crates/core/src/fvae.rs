//! Fine-grained VAE with one latent per phoneme.
//!
//! * text encoder: symbol embedding → GRU, giving the context `c_n`;
//! * posterior `q(z_n | x, y)`: frames averaged over the phoneme's exact
//!   alignment, joined with `c_n`, then an MLP to `(μ, log σ)`;
//! * decoder `p(x | z, c)`: `[z_n ; c_n]` broadcast to the phoneme's frames,
//!   then an MLP to the observation mean (unit variance);
//! * prior: standard normal, or an [`ArPriorNet`] teacher-forced on the
//!   posterior sample (the DVAE objective).

use serde::{Deserialize, Serialize};

use crate::ar_prior::{ArPriorConfig, ArPriorNet, PRIOR_PREFIX};
use crate::autodiff::{AdamConfig, Graph, ParamId, ParamStore, Var};
use crate::corpus::{Corpus, CorpusConfig, Utterance};
use crate::latents::{LatentDataset, LatentRecord};
use crate::math::{GaussianSeq, RngStream, SeqTensor, HALF_LN_2PI};
use crate::nn::{xavier, BatchLayout, GruCell, Linear};
use crate::pool::parallel_map;
use crate::training::{check_training, BatchSampler, Checkpoint, ModelError, ModelKind, TraceRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    StandardNormal,
    Autoregressive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvaeConfig {
    pub vocab_size: usize,
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub text_hidden: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub prior_hidden: usize,
    pub prior: PriorMode,
}

impl FvaeConfig {
    pub fn for_corpus(corpus: &CorpusConfig, latent_dim: usize, prior: PriorMode) -> Self {
        Self {
            vocab_size: corpus.vocab_size,
            obs_dim: corpus.obs_dim,
            latent_dim,
            embed_dim: 16,
            text_hidden: 32,
            enc_hidden: 64,
            dec_hidden: 64,
            prior_hidden: 64,
            prior,
        }
    }

    fn prior_config(&self) -> ArPriorConfig {
        ArPriorConfig {
            hidden: self.prior_hidden,
            ..ArPriorConfig::new(self.latent_dim, self.text_hidden)
        }
    }
}

/// Flat batch of utterances: phoneme rows follow `layout`, frame rows
/// follow the concatenated durations.
#[derive(Debug, Clone)]
pub struct FvaeBatch {
    pub layout: BatchLayout,
    pub symbols: Vec<usize>,
    pub durations: Vec<usize>,
    pub observation: SeqTensor,
    /// Flat phoneme row of every flat frame row.
    pub frame_owner: Vec<Option<usize>>,
}

impl FvaeBatch {
    pub fn new(utts: &[&Utterance]) -> Result<Self, ModelError> {
        let layout = BatchLayout::new(utts.iter().map(|u| u.len()).collect())?;
        let durations: Vec<usize> = utts
            .iter()
            .flat_map(|u| u.durations.iter().copied())
            .collect();
        let frame_owner = crate::corpus::expand_durations(&durations)
            .into_iter()
            .map(Some)
            .collect();
        let parts: Vec<&SeqTensor> = utts.iter().map(|u| &u.observation).collect();
        Ok(Self {
            symbols: utts
                .iter()
                .flat_map(|u| u.symbols.iter().copied())
                .collect(),
            observation: SeqTensor::concat_rows(&parts)?,
            durations,
            frame_owner,
            layout,
        })
    }

    pub fn from_corpus(corpus: &Corpus, indices: &[usize]) -> Result<Self, ModelError> {
        let utts: Vec<&Utterance> = indices.iter().map(|&i| &corpus.utterances[i]).collect();
        Self::new(&utts)
    }

    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

/// Graph values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FvaeVars {
    pub context: Var,
    pub post_mean: Var,
    pub post_log_std: Var,
    pub z: Var,
    pub x_hat: Var,
    /// `log p(x | z)`, summed.
    pub recon: Var,
    /// `KL(q ‖ p)`, summed.
    pub kl: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
    pub kl_per_step: f64,
    pub beta: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct FvaeModel {
    pub config: FvaeConfig,
    pub store: ParamStore,
    embedding: ParamId,
    text_gru: GruCell,
    enc_hidden: Linear,
    enc_out: Linear,
    dec_hidden: Linear,
    dec_out: Linear,
    pub prior: Option<ArPriorNet>,
}

impl FvaeModel {
    pub fn new(config: FvaeConfig, seed: u64) -> Result<Self, ModelError> {
        let c = &config;
        if [
            c.vocab_size,
            c.obs_dim,
            c.latent_dim,
            c.embed_dim,
            c.text_hidden,
            c.enc_hidden,
            c.dec_hidden,
        ]
        .contains(&0)
        {
            return Err(ModelError::InvalidConfig(
                "all FVAE sizes must be >= 1".into(),
            ));
        }
        let mut rng = RngStream::new(seed).derive_named("fvae-init");
        let mut store = ParamStore::new();
        let embedding = store.add(
            "text.embedding",
            xavier(c.vocab_size, c.embed_dim, &mut rng),
        )?;
        let text_gru = GruCell::new(&mut store, "text.gru", c.embed_dim, c.text_hidden, &mut rng)?;
        let enc_hidden = Linear::new(
            &mut store,
            "enc.hidden",
            c.obs_dim + c.text_hidden,
            c.enc_hidden,
            &mut rng,
        )?;
        let enc_out = Linear::new(
            &mut store,
            "enc.out",
            c.enc_hidden,
            2 * c.latent_dim,
            &mut rng,
        )?;
        let dec_hidden = Linear::new(
            &mut store,
            "dec.hidden",
            c.latent_dim + c.text_hidden,
            c.dec_hidden,
            &mut rng,
        )?;
        let dec_out = Linear::new(&mut store, "dec.out", c.dec_hidden, c.obs_dim, &mut rng)?;
        // small initial posterior log-stds keep early samples informative
        let out_b = store.value_mut(enc_out_bias(&store)?);
        for j in c.latent_dim..2 * c.latent_dim {
            out_b.set(0, j, -1.0);
        }
        let mut model = Self {
            prior: None,
            config,
            store,
            embedding,
            text_gru,
            enc_hidden,
            enc_out,
            dec_hidden,
            dec_out,
        };
        if model.config.prior == PriorMode::Autoregressive {
            model.attach_prior(&mut rng)?;
        }
        Ok(model)
    }

    fn attach_prior(&mut self, rng: &mut RngStream) -> Result<(), ModelError> {
        let net = ArPriorNet::new(
            &mut self.store,
            PRIOR_PREFIX,
            &self.config.prior_config(),
            rng,
        )?;
        self.prior = Some(net);
        self.config.prior = PriorMode::Autoregressive;
        Ok(())
    }

    /// Switches a standard-normal model to an autoregressive prior with a
    /// freshly initialized prior network.
    pub fn convert_to_autoregressive(&mut self, seed: u64) -> Result<(), ModelError> {
        if self.prior.is_none() {
            let mut rng = RngStream::new(seed).derive_named("prior-init");
            self.attach_prior(&mut rng)?;
        }
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        match self.config.prior {
            PriorMode::StandardNormal => ModelKind::Fvae,
            PriorMode::Autoregressive => ModelKind::Dvae,
        }
    }

    pub fn checkpoint(&self, rng: &RngStream) -> Checkpoint {
        Checkpoint::new(self.kind(), &self.config, &self.store, rng)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.expect_kind(&[ModelKind::Fvae, ModelKind::Dvae])?;
        let config: FvaeConfig = ckpt.hyper()?;
        let store = ckpt.store()?;
        let prior = match config.prior {
            PriorMode::Autoregressive => Some(ArPriorNet::bind(&store, PRIOR_PREFIX)?),
            PriorMode::StandardNormal => None,
        };
        Ok(Self {
            embedding: store.id("text.embedding")?,
            text_gru: GruCell::bind(&store, "text.gru")?,
            enc_hidden: Linear::bind(&store, "enc.hidden")?,
            enc_out: Linear::bind(&store, "enc.out")?,
            dec_hidden: Linear::bind(&store, "dec.hidden")?,
            dec_out: Linear::bind(&store, "dec.out")?,
            prior,
            config,
            store,
        })
    }

    pub fn context_dim(&self) -> usize {
        self.config.text_hidden
    }

    /// Checks an utterance-bearing corpus against the model's sizes.
    pub fn check_corpus(&self, cfg: &CorpusConfig) -> Result<(), ModelError> {
        for (what, expected, found) in [
            ("corpus obs_dim", self.config.obs_dim, cfg.obs_dim),
            ("corpus vocab_size", self.config.vocab_size, cfg.vocab_size),
        ] {
            if expected != found {
                return Err(ModelError::DimensionMismatch {
                    what: what.into(),
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }

    fn check_symbols(&self, symbols: &[usize]) -> Result<(), ModelError> {
        if let Some(&s) = symbols.iter().find(|&&s| s >= self.config.vocab_size) {
            return Err(ModelError::DimensionMismatch {
                what: "symbol id".into(),
                expected: self.config.vocab_size,
                found: s,
            });
        }
        Ok(())
    }

    /// Context `c` for flat symbols.
    pub fn text_context(
        &self,
        g: &mut Graph,
        symbols: &[usize],
        layout: &BatchLayout,
    ) -> Result<Var, ModelError> {
        self.check_symbols(symbols)?;
        let emb = g.param(&self.store, self.embedding);
        let idx: Vec<Option<usize>> = symbols.iter().map(|&s| Some(s)).collect();
        let e = g.gather_rows(emb, &idx)?;
        Ok(self.text_gru.run(g, &self.store, e, layout)?)
    }

    /// Posterior `(μ, log σ)` from frames pooled per phoneme.
    pub fn encode(
        &self,
        g: &mut Graph,
        batch: &FvaeBatch,
        context: Var,
    ) -> Result<(Var, Var), ModelError> {
        if batch.observation.cols() != self.config.obs_dim {
            return Err(ModelError::DimensionMismatch {
                what: "observation channels".into(),
                expected: self.config.obs_dim,
                found: batch.observation.cols(),
            });
        }
        let x = g.constant(batch.observation.clone());
        let pooled = g.segment_mean(x, &batch.durations)?;
        let inp = g.concat_cols(&[pooled, context])?;
        let h = self.enc_hidden.forward(g, &self.store, inp)?;
        let h = g.tanh(h)?;
        let out = self.enc_out.forward(g, &self.store, h)?;
        let d = self.config.latent_dim;
        Ok((g.slice_cols(out, 0, d)?, g.slice_cols(out, d, 2 * d)?))
    }

    /// Observation means for per-phoneme latents broadcast to frames.
    pub fn decode(
        &self,
        g: &mut Graph,
        z: Var,
        context: Var,
        frame_owner: &[Option<usize>],
    ) -> Result<Var, ModelError> {
        let zc = g.concat_cols(&[z, context])?;
        let frames = g.gather_rows(zc, frame_owner)?;
        let h = self.dec_hidden.forward(g, &self.store, frames)?;
        let h = g.tanh(h)?;
        Ok(self.dec_out.forward(g, &self.store, h)?)
    }

    /// Full forward pass with a given reparameterization noise `eps`
    /// (`N × D`). `None` uses the posterior mean as `z`.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &FvaeBatch,
        eps: Option<&SeqTensor>,
    ) -> Result<FvaeVars, ModelError> {
        let context = self.text_context(g, &batch.symbols, &batch.layout)?;
        let (post_mean, post_log_std) = self.encode(g, batch, context)?;
        let z = match eps {
            Some(eps) => {
                let e = g.constant(eps.clone());
                let std = g.exp(post_log_std)?;
                let noise = g.mul(std, e)?;
                g.add(post_mean, noise)?
            }
            None => post_mean,
        };
        let x_hat = self.decode(g, z, context, &batch.frame_owner)?;
        let x = g.constant(batch.observation.clone());
        let se = g.squared_error(x, x_hat)?;
        let recon = g.scale(se, -0.5)?;
        let recon = g.add_scalar(recon, -HALF_LN_2PI * batch.observation.len() as f64)?;
        let kl_el = match &self.prior {
            None => {
                let zeros = g.constant(SeqTensor::zeros(
                    batch.layout.total(),
                    self.config.latent_dim,
                ));
                g.gaussian_kl(post_mean, post_log_std, zeros, zeros)?
            }
            Some(net) => {
                let (mp, lp) = net.forward(g, &self.store, context, z, &batch.layout)?;
                g.gaussian_kl(post_mean, post_log_std, mp, lp)?
            }
        };
        let kl = g.sum(kl_el)?;
        Ok(FvaeVars {
            context,
            post_mean,
            post_log_std,
            z,
            x_hat,
            recon,
            kl,
        })
    }

    /// ELBO terms of one utterance with a single reparameterized sample.
    pub fn elbo(
        &self,
        utterance: &Utterance,
        beta: f64,
        rng: &mut RngStream,
    ) -> Result<ElboTerms, ModelError> {
        let batch = FvaeBatch::new(&[utterance])?;
        let eps = SeqTensor::new(
            utterance.len(),
            self.config.latent_dim,
            rng.normals(utterance.len() * self.config.latent_dim),
        )?;
        let mut g = Graph::new();
        let v = self.forward(&mut g, &batch, Some(&eps))?;
        let (recon, kl) = (g.scalar(v.recon), g.scalar(v.kl));
        Ok(ElboTerms {
            recon,
            kl,
            kl_per_step: kl / utterance.len() as f64,
            beta,
            total: recon - beta * kl,
        })
    }

    /// Posterior over the latents of one utterance.
    pub fn posterior(&self, utterance: &Utterance) -> Result<(GaussianSeq, SeqTensor), ModelError> {
        let batch = FvaeBatch::new(&[utterance])?;
        let mut g = Graph::new();
        let c = self.text_context(&mut g, &batch.symbols, &batch.layout)?;
        let (m, l) = self.encode(&mut g, &batch, c)?;
        Ok((
            GaussianSeq::new(g.value(m).clone(), g.value(l).clone())?,
            g.value(c).clone(),
        ))
    }

    /// Text context of a symbol sequence.
    pub fn context_of(&self, symbols: &[usize]) -> Result<SeqTensor, ModelError> {
        let layout = BatchLayout::new(vec![symbols.len()])?;
        let mut g = Graph::new();
        let c = self.text_context(&mut g, symbols, &layout)?;
        Ok(g.value(c).clone())
    }

    /// Observation frames decoded from given latents and durations.
    pub fn decode_latents(
        &self,
        symbols: &[usize],
        z: &SeqTensor,
        durations: &[usize],
    ) -> Result<SeqTensor, ModelError> {
        if z.rows() != symbols.len() || durations.len() != symbols.len() {
            return Err(ModelError::StepMismatch {
                context: symbols.len(),
                latents: z.rows(),
            });
        }
        if z.cols() != self.config.latent_dim {
            return Err(ModelError::DimensionMismatch {
                what: "latent dim".into(),
                expected: self.config.latent_dim,
                found: z.cols(),
            });
        }
        let layout = BatchLayout::new(vec![symbols.len()])?;
        let owner: Vec<Option<usize>> = crate::corpus::expand_durations(durations)
            .into_iter()
            .map(Some)
            .collect();
        let mut g = Graph::new();
        let c = self.text_context(&mut g, symbols, &layout)?;
        let zv = g.constant(z.clone());
        let x = self.decode(&mut g, zv, c, &owner)?;
        Ok(g.value(x).clone())
    }

    /// Reconstruction from the posterior mean.
    pub fn reconstruct(&self, utterance: &Utterance) -> Result<SeqTensor, ModelError> {
        let batch = FvaeBatch::new(&[utterance])?;
        let mut g = Graph::new();
        let v = self.forward(&mut g, &batch, None)?;
        Ok(g.value(v.x_hat).clone())
    }
}

fn enc_out_bias(store: &ParamStore) -> Result<ParamId, ModelError> {
    Ok(store.id("enc.out.b")?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvaeTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Final KL weight.
    pub beta: f64,
    /// Fraction of steps over which β ramps linearly from 0.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for FvaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 2e-3,
            beta: 1.0,
            warmup_fraction: 0.1,
            seed: 0,
            clip_norm: Some(10.0),
        }
    }
}

impl FvaeTrainConfig {
    /// KL weight in effect at 1-based `step`.
    pub fn beta_at(&self, step: u64) -> f64 {
        let warm = (self.warmup_fraction * self.steps as f64).round();
        if warm <= 0.0 {
            self.beta
        } else {
            self.beta * (step as f64 / warm).min(1.0)
        }
    }
}

fn adam_for(lr: f64, clip: Option<f64>) -> AdamConfig {
    AdamConfig {
        clip_norm: clip,
        ..AdamConfig::with_lr(lr)
    }
}

fn eps_for(batch: &FvaeBatch, d: usize, rng: &mut RngStream) -> Result<SeqTensor, ModelError> {
    let n = batch.layout.total();
    Ok(SeqTensor::new(n, d, rng.normals(n * d))?)
}

/// Trains every parameter on `−(recon − β·KL)` per frame. DVAE models also
/// fit the prior's duration regressor on the detached context. Records
/// `loss`, `recon`, `kl` and `beta` at every step.
pub fn train(
    model: &mut FvaeModel,
    corpus: &Corpus,
    cfg: &FvaeTrainConfig,
) -> Result<Vec<TraceRow>, ModelError> {
    check_training(cfg.steps, cfg.batch_size, cfg.lr)?;
    model.check_corpus(&corpus.config)?;
    let root = RngStream::new(cfg.seed);
    let mut sampler = BatchSampler::new(
        corpus.utterances.len(),
        cfg.batch_size,
        root.derive_named("batches"),
    )?;
    let mut noise = root.derive_named("posterior-noise");
    let adam = adam_for(cfg.lr, cfg.clip_norm);
    let d = model.config.latent_dim;
    let mut trace = Vec::with_capacity(4 * cfg.steps as usize);
    for step in 1..=cfg.steps {
        let beta = cfg.beta_at(step);
        let mut run = || -> Result<[f64; 3], ModelError> {
            let batch = FvaeBatch::from_corpus(corpus, &sampler.next_batch())?;
            let eps = eps_for(&batch, d, &mut noise)?;
            let mut g = Graph::new();
            let v = model.forward(&mut g, &batch, Some(&eps))?;
            let bkl = g.scale(v.kl, beta)?;
            let neg = g.sub(bkl, v.recon)?;
            let mut loss = g.scale(neg, 1.0 / batch.frames() as f64)?;
            if let Some(net) = &model.prior {
                let c = g.detach(v.context);
                let dur = net
                    .duration
                    .loss(&mut g, &model.store, c, &batch.durations)?;
                let dur = g.scale(dur, 1.0 / batch.layout.total() as f64)?;
                loss = g.add(loss, dur)?;
            }
            let out = [g.scalar(loss), g.scalar(v.recon), g.scalar(v.kl)];
            g.backward(loss)?.accumulate_into(&mut model.store);
            model.store.adam_step(&adam)?;
            Ok(out)
        };
        let [loss, recon, kl] = run().map_err(|e| e.at_step(step))?;
        trace.push(TraceRow::new(step, "loss", loss));
        trace.push(TraceRow::new(step, "recon", recon));
        trace.push(TraceRow::new(step, "kl", kl));
        trace.push(TraceRow::new(step, "beta", beta));
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Fraction of the corpus held back to select the best prior; 0 keeps
    /// the final parameters.
    pub validation_fraction: f64,
    /// Steps between validation passes.
    pub eval_every: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 2e-4,
            seed: 0,
            clip_norm: Some(10.0),
            validation_fraction: 0.1,
            eval_every: 25,
        }
    }
}

/// Trains only the prior network on `KL(q ‖ p)` with the posterior frozen;
/// every other parameter is left bit-identical.
///
/// With a validation fraction, the last utterances of `corpus` are held
/// back and the prior with the lowest validation KL (starting point
/// included) is kept. Validation rows are logged as term `val_kl`.
pub fn finetune_prior(
    model: &mut FvaeModel,
    corpus: &Corpus,
    cfg: &FinetuneConfig,
) -> Result<Vec<TraceRow>, ModelError> {
    check_training(cfg.steps, cfg.batch_size, cfg.lr)?;
    model.check_corpus(&corpus.config)?;
    if model.prior.is_none() {
        return Err(ModelError::MissingPrior);
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) || cfg.eval_every == 0 {
        return Err(ModelError::InvalidConfig(format!(
            "validation fraction {} must lie in [0, 1) and eval_every must be positive",
            cfg.validation_fraction
        )));
    }
    let n_val = (corpus.utterances.len() as f64 * cfg.validation_fraction).round() as usize;
    let (train_set, val_set) = corpus.split(n_val);
    let corpus = &train_set;
    let root = RngStream::new(cfg.seed);
    let val_seed = root.derive_named("validation").seed();
    let mut best = if n_val > 0 {
        Some((mean_kl(model, &val_set, val_seed)?, model.store.clone()))
    } else {
        None
    };
    let mut sampler = BatchSampler::new(
        corpus.utterances.len(),
        cfg.batch_size,
        root.derive_named("batches"),
    )?;
    let mut noise = root.derive_named("posterior-noise");
    let adam = adam_for(cfg.lr, cfg.clip_norm);
    let prefix = format!("{PRIOR_PREFIX}.");
    model.store.train_only(&[&prefix]);
    let mut trace = Vec::with_capacity(cfg.steps as usize);
    let result = (1..=cfg.steps).try_for_each(|step| {
        let mut run = || -> Result<f64, ModelError> {
            let batch = FvaeBatch::from_corpus(corpus, &sampler.next_batch())?;
            let eps = eps_for(&batch, model.config.latent_dim, &mut noise)?;
            let mut g = Graph::new();
            let v = model.forward(&mut g, &batch, Some(&eps))?;
            let per = (batch.layout.total() * model.config.latent_dim) as f64;
            let mut loss = g.scale(v.kl, 1.0 / per)?;
            let kl = g.scalar(loss);
            let net = model.prior.as_ref().expect("checked above");
            let dur = net
                .duration
                .loss(&mut g, &model.store, v.context, &batch.durations)?;
            let dur = g.scale(dur, 1.0 / batch.layout.total() as f64)?;
            loss = g.add(loss, dur)?;
            g.backward(loss)?.accumulate_into(&mut model.store);
            model.store.adam_step(&adam)?;
            Ok(kl)
        };
        let kl = run().map_err(|e| e.at_step(step))?;
        trace.push(TraceRow::new(step, "kl", kl));
        if let Some((best_kl, best_store)) = best.as_mut() {
            if step % cfg.eval_every == 0 || step == cfg.steps {
                let val = mean_kl(model, &val_set, val_seed)?;
                trace.push(TraceRow::new(step, "val_kl", val));
                if val < *best_kl {
                    *best_kl = val;
                    *best_store = model.store.clone();
                }
            }
        }
        Ok::<(), ModelError>(())
    });
    if let (Ok(()), Some((_, best_store))) = (&result, best) {
        model.store = best_store;
    }
    model.store.unfreeze_all();
    result.map(|_| trace)
}

/// Mean per-step, per-dimension `KL(q ‖ p)` over a corpus, with posterior
/// noise drawn from `seed`.
pub fn mean_kl(model: &FvaeModel, corpus: &Corpus, seed: u64) -> Result<f64, ModelError> {
    let mut rng = RngStream::new(seed).derive_named("eval-noise");
    let (mut total, mut count) = (0.0, 0usize);
    let idx: Vec<usize> = (0..corpus.utterances.len()).collect();
    for chunk in idx.chunks(32) {
        let batch = FvaeBatch::from_corpus(corpus, chunk)?;
        let eps = eps_for(&batch, model.config.latent_dim, &mut rng)?;
        let mut g = Graph::new();
        let v = model.forward(&mut g, &batch, Some(&eps))?;
        total += g.scalar(v.kl);
        count += batch.layout.total() * model.config.latent_dim;
    }
    Ok(total / count.max(1) as f64)
}

/// Mean squared error per observation element of posterior-mean
/// reconstructions.
pub fn reconstruction_mse(model: &FvaeModel, corpus: &Corpus) -> Result<f64, ModelError> {
    let (mut se, mut n) = (0.0, 0usize);
    let idx: Vec<usize> = (0..corpus.utterances.len()).collect();
    for chunk in idx.chunks(32) {
        let batch = FvaeBatch::from_corpus(corpus, chunk)?;
        let mut g = Graph::new();
        let v = model.forward(&mut g, &batch, None)?;
        se += g
            .value(v.x_hat)
            .data()
            .iter()
            .zip(batch.observation.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        n += batch.observation.len();
    }
    Ok(se / n.max(1) as f64)
}

/// Posterior means, stds, one sample and the text context per utterance,
/// computed on up to `workers` threads. The sample of utterance `i` uses the
/// stream `seed → "extract" → i`.
pub fn extract_posteriors(
    model: &FvaeModel,
    corpus: &Corpus,
    seed: u64,
    source: &str,
    workers: usize,
) -> Result<LatentDataset, ModelError> {
    model.check_corpus(&corpus.config)?;
    let root = RngStream::new(seed).derive_named("extract");
    let records = parallel_map(&corpus.utterances, workers, |i, u| {
        let (post, context) = model.posterior(u)?;
        let stds = post.std();
        let mut rng = root.derive(i as u64);
        let sample = SeqTensor::new(
            u.len(),
            model.config.latent_dim,
            post.mean()
                .data()
                .iter()
                .zip(stds.data())
                .map(|(m, s)| m + s * rng.normal())
                .collect(),
        )?;
        Ok(LatentRecord {
            id: u.id.clone(),
            symbols: u.symbols.clone(),
            means: post.mean().clone(),
            stds,
            sample,
            durations: u.durations.clone(),
            context,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(LatentDataset {
        latent_dim: model.config.latent_dim,
        context_dim: model.context_dim(),
        source: source.into(),
        seed,
        records,
    })
}
