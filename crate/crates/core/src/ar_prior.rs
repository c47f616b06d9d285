//! Autoregressive Gaussian prior `p(z_n | z_<n, c)`.
//!
//! Step `n` sees the context `c_n` and the previous latent (a learned `z_0`
//! at the first step) through an input projection `p_n`; a GRU runs over the
//! projections and linear heads read `[h_n ; p_n]` to emit the mean and log
//! std. Heads start at zero, so an untrained net is the standard normal.
//! A small regressor predicts log-durations from the (detached) context.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, ParamId, ParamStore, Var};
use crate::corpus::NllEstimate;
use crate::latents::{LatentBatch, LatentDataset};
use crate::math::{log_prob_term, GaussianSeq, RngStream, SeqTensor};
use crate::nn::{BatchLayout, GruCell, Linear};
use crate::training::{check_training, BatchSampler, Checkpoint, ModelError, ModelKind, TraceRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArPriorConfig {
    pub latent_dim: usize,
    pub context_dim: usize,
    pub hidden: usize,
    pub dur_hidden: usize,
}

impl ArPriorConfig {
    pub fn new(latent_dim: usize, context_dim: usize) -> Self {
        Self {
            latent_dim,
            context_dim,
            hidden: 64,
            dur_hidden: 32,
        }
    }
}

/// Maps context rows to predicted log-durations.
#[derive(Debug, Clone)]
pub struct DurationRegressor {
    hidden: Linear,
    out: Linear,
}

impl DurationRegressor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        context_dim: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), context_dim, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, 1, rng)?,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self, ModelError> {
        Ok(Self {
            hidden: Linear::bind(store, &format!("{name}.hidden"))?,
            out: Linear::bind(store, &format!("{name}.out"))?,
        })
    }

    /// `N × 1` predicted log-durations.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        context: Var,
    ) -> Result<Var, ModelError> {
        let h = self.hidden.forward(g, store, context)?;
        let h = g.tanh(h)?;
        Ok(self.out.forward(g, store, h)?)
    }

    /// Squared error against `log(durations)`, summed over steps.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        context: Var,
        durations: &[usize],
    ) -> Result<Var, ModelError> {
        let pred = self.forward(g, store, context)?;
        let target = SeqTensor::new(
            durations.len(),
            1,
            durations.iter().map(|&d| (d as f64).ln()).collect(),
        )?;
        let target = g.constant(target);
        Ok(g.squared_error(pred, target)?)
    }

    /// Rounded durations, at least one frame each.
    pub fn predict(
        &self,
        store: &ParamStore,
        context: &SeqTensor,
    ) -> Result<Vec<usize>, ModelError> {
        let mut g = Graph::new();
        let c = g.constant(context.clone());
        let pred = self.forward(&mut g, store, c)?;
        Ok(g.value(pred)
            .data()
            .iter()
            .map(|&l| (l.exp().round() as usize).max(1))
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct ArPriorNet {
    input: Linear,
    gru: GruCell,
    mean_head: Linear,
    log_std_head: Linear,
    z0: ParamId,
    pub duration: DurationRegressor,
    pub latent_dim: usize,
    pub context_dim: usize,
}

impl ArPriorNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ArPriorConfig,
        rng: &mut RngStream,
    ) -> Result<Self, ModelError> {
        let (d, c, h) = (cfg.latent_dim, cfg.context_dim, cfg.hidden);
        if d == 0 || c == 0 || h == 0 {
            return Err(ModelError::InvalidConfig("prior dims must be >= 1".into()));
        }
        let input = Linear::new(store, &format!("{prefix}.input"), c + d, h, rng)?;
        let gru = GruCell::new(store, &format!("{prefix}.gru"), h, h, rng)?;
        let mean_head = Linear::zeros(store, &format!("{prefix}.mean"), 2 * h, d)?;
        let log_std_head = Linear::zeros(store, &format!("{prefix}.log_std"), 2 * h, d)?;
        let z0 = store.add(&format!("{prefix}.z0"), SeqTensor::zeros(1, d))?;
        let duration =
            DurationRegressor::new(store, &format!("{prefix}.dur"), c, cfg.dur_hidden, rng)?;
        Ok(Self {
            input,
            gru,
            mean_head,
            log_std_head,
            z0,
            duration,
            latent_dim: d,
            context_dim: c,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self, ModelError> {
        let input = Linear::bind(store, &format!("{prefix}.input"))?;
        let z0 = store.id(&format!("{prefix}.z0"))?;
        let latent_dim = store.value(z0).cols();
        Ok(Self {
            context_dim: input.in_dim - latent_dim,
            input,
            gru: GruCell::bind(store, &format!("{prefix}.gru"))?,
            mean_head: Linear::bind(store, &format!("{prefix}.mean"))?,
            log_std_head: Linear::bind(store, &format!("{prefix}.log_std"))?,
            z0,
            duration: DurationRegressor::bind(store, &format!("{prefix}.dur"))?,
            latent_dim,
        })
    }

    fn check_dims(
        &self,
        g: &Graph,
        context: Var,
        teacher: Var,
        layout: &BatchLayout,
    ) -> Result<(), ModelError> {
        let (cn, cd) = g.shape(context);
        let (tn, td) = g.shape(teacher);
        if cn != tn || cn != layout.total() {
            return Err(ModelError::StepMismatch {
                context: cn,
                latents: tn,
            });
        }
        if cd != self.context_dim {
            return Err(ModelError::DimensionMismatch {
                what: "prior context dim".into(),
                expected: self.context_dim,
                found: cd,
            });
        }
        if td != self.latent_dim {
            return Err(ModelError::DimensionMismatch {
                what: "prior latent dim".into(),
                expected: self.latent_dim,
                found: td,
            });
        }
        Ok(())
    }

    fn heads(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        p: Var,
    ) -> Result<(Var, Var), ModelError> {
        let feat = g.concat_cols(&[h, p])?;
        let mean = self.mean_head.forward(g, store, feat)?;
        let log_std = self.log_std_head.forward(g, store, feat)?;
        Ok((mean, log_std))
    }

    /// Teacher-forced prior parameters for a flat batch: step `n` of each
    /// sequence depends on `context[..=n]` and `teacher[..n]` only.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        context: Var,
        teacher: Var,
        layout: &BatchLayout,
    ) -> Result<(Var, Var), ModelError> {
        self.check_dims(g, context, teacher, layout)?;
        let shifted = g.gather_rows(teacher, &layout.prev_rows())?;
        let mut starts = SeqTensor::zeros(layout.total(), 1);
        for &o in layout.offsets() {
            starts.set(o, 0, 1.0);
        }
        let starts = g.constant(starts);
        let z0 = g.param(store, self.z0);
        let z0_rows = g.matmul(starts, z0)?;
        let prev = g.add(shifted, z0_rows)?;
        let inp = g.concat_cols(&[context, prev])?;
        let p = self.input.forward(g, store, inp)?;
        let h = self.gru.run(g, store, p, layout)?;
        self.heads(g, store, h, p)
    }

    /// Prior over one utterance given its context and teacher latents.
    pub fn prior_forward(
        &self,
        store: &ParamStore,
        context: &SeqTensor,
        teacher: &SeqTensor,
    ) -> Result<GaussianSeq, ModelError> {
        if context.rows() != teacher.rows() || context.rows() == 0 {
            return Err(ModelError::StepMismatch {
                context: context.rows(),
                latents: teacher.rows(),
            });
        }
        let layout = BatchLayout::new(vec![context.rows()])?;
        let mut g = Graph::new();
        let c = g.constant(context.clone());
        let t = g.constant(teacher.clone());
        let (m, l) = self.forward(&mut g, store, c, t, &layout)?;
        Ok(GaussianSeq::new(g.value(m).clone(), g.value(l).clone())?)
    }

    /// Ancestral sampling: `z_n ~ N(μ_n, (temperature · σ_n)²)` fed back as
    /// the next step's input. Temperature 0 gives the mean rollout.
    /// Durations come from the regressor.
    pub fn sample(
        &self,
        store: &ParamStore,
        context: &SeqTensor,
        temperature: f64,
        rng: &mut RngStream,
    ) -> Result<(SeqTensor, Vec<usize>), ModelError> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(ModelError::InvalidTemperature(temperature));
        }
        if context.cols() != self.context_dim {
            return Err(ModelError::DimensionMismatch {
                what: "prior context dim".into(),
                expected: self.context_dim,
                found: context.cols(),
            });
        }
        let d = self.latent_dim;
        let mut g = Graph::new();
        let mut prev = g.param(store, self.z0);
        let mut h = g.constant(SeqTensor::zeros(1, self.gru.hidden));
        let mut out = Vec::with_capacity(context.rows() * d);
        for n in 0..context.rows() {
            let c = g.constant(SeqTensor::new(1, context.cols(), context.row(n).to_vec())?);
            let inp = g.concat_cols(&[c, prev])?;
            let p = self.input.forward(&mut g, store, inp)?;
            let xp = self.gru.project_inputs(&mut g, store, p)?;
            h = self.gru.step(&mut g, store, xp, h)?;
            let (m, l) = self.heads(&mut g, store, h, p)?;
            let z: Vec<f64> = g
                .value(m)
                .data()
                .iter()
                .zip(g.value(l).data())
                .map(|(&mu, &ls)| {
                    if temperature == 0.0 {
                        mu
                    } else {
                        mu + temperature * ls.exp() * rng.normal()
                    }
                })
                .collect();
            out.extend_from_slice(&z);
            prev = g.constant(SeqTensor::new(1, d, z)?);
        }
        let z = SeqTensor::new(context.rows(), d, out)?;
        let durations = self.duration.predict(store, context)?;
        Ok((z, durations))
    }
}

/// Which posterior statistic feeds the prior as the previous latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherInput {
    #[default]
    Samples,
    Means,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub teacher: TeacherInput,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
            clip_norm: Some(10.0),
            teacher: TeacherInput::Samples,
        }
    }
}

/// A stand-alone prior trained post hoc on a latent dataset.
#[derive(Debug, Clone)]
pub struct ArPriorModel {
    pub config: ArPriorConfig,
    pub store: ParamStore,
    pub net: ArPriorNet,
}

pub const PRIOR_PREFIX: &str = "prior";

impl ArPriorModel {
    pub fn new(config: ArPriorConfig, seed: u64) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed).derive_named("ar-prior-init");
        let net = ArPriorNet::new(&mut store, PRIOR_PREFIX, &config, &mut rng)?;
        Ok(Self { config, store, net })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.expect_kind(&[ModelKind::ArPrior])?;
        let config: ArPriorConfig = ckpt.hyper()?;
        let store = ckpt.store()?;
        let net = ArPriorNet::bind(&store, PRIOR_PREFIX)?;
        Ok(Self { config, store, net })
    }

    pub fn checkpoint(&self, rng: &RngStream) -> Checkpoint {
        Checkpoint::new(ModelKind::ArPrior, &self.config, &self.store, rng)
    }

    fn check_dataset(&self, data: &LatentDataset) -> Result<(), ModelError> {
        for (what, expected, found) in [
            (
                "dataset latent dim",
                self.config.latent_dim,
                data.latent_dim,
            ),
            (
                "dataset context dim",
                self.config.context_dim,
                data.context_dim,
            ),
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
}

/// Summed `KL(q ‖ p)` over a batch, with `p` teacher-forced on `teacher`.
pub fn batch_kl(
    g: &mut Graph,
    store: &ParamStore,
    net: &ArPriorNet,
    batch: &LatentBatch,
    teacher: SeqTensor,
) -> Result<Var, ModelError> {
    let c = g.constant(batch.context.clone());
    let t = g.constant(teacher);
    let (mp, lp) = net.forward(g, store, c, t, &batch.layout)?;
    let mq = g.constant(batch.means.clone());
    let lq = g.constant(batch.log_stds());
    let kl = g.gaussian_kl(mq, lq, mp, lp)?;
    Ok(g.sum(kl)?)
}

/// Minimizes the per-step, per-dimension `KL(q ‖ p)` against the stored
/// posteriors, plus the duration regressor's squared log error. Returns the
/// trace of both terms at every step.
pub fn train_posthoc(
    model: &mut ArPriorModel,
    data: &LatentDataset,
    cfg: &PriorTrainConfig,
) -> Result<Vec<TraceRow>, ModelError> {
    check_training(cfg.steps, cfg.batch_size, cfg.lr)?;
    model.check_dataset(data)?;
    let root = RngStream::new(cfg.seed);
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, root.derive_named("batches"))?;
    let mut noise = root.derive_named("teacher-noise");
    let adam = AdamConfig {
        clip_norm: cfg.clip_norm,
        ..AdamConfig::with_lr(cfg.lr)
    };
    let mut trace = Vec::with_capacity(2 * cfg.steps as usize);
    for step in 1..=cfg.steps {
        let mut run =
            |model: &mut ArPriorModel, noise: &mut RngStream| -> Result<(f64, f64), ModelError> {
                let batch = LatentBatch::from_dataset(data, &sampler.next_batch())?;
                let teacher = match cfg.teacher {
                    TeacherInput::Samples => batch.draw(noise),
                    TeacherInput::Means => batch.means.clone(),
                };
                let mut g = Graph::new();
                let kl = batch_kl(&mut g, &model.store, &model.net, &batch, teacher)?;
                let per = (batch.layout.total() * model.config.latent_dim) as f64;
                let kl = g.scale(kl, 1.0 / per)?;
                let c = g.constant(batch.context.clone());
                let dur = model
                    .net
                    .duration
                    .loss(&mut g, &model.store, c, &batch.durations)?;
                let dur = g.scale(dur, 1.0 / batch.layout.total() as f64)?;
                let loss = g.add(kl, dur)?;
                let values = (g.scalar(kl), g.scalar(dur));
                g.backward(loss)?.accumulate_into(&mut model.store);
                model.store.adam_step(&adam)?;
                Ok(values)
            };
        let (kl, dur) = run(model, &mut noise).map_err(|e| e.at_step(step))?;
        trace.push(TraceRow::new(step, "kl", kl));
        trace.push(TraceRow::new(step, "dur_mse", dur));
    }
    Ok(trace)
}

/// Mean per-step, per-dimension `KL(q ‖ p)` over a dataset, teacher-forced
/// on posterior draws from `seed`.
pub fn mean_kl(
    store: &ParamStore,
    net: &ArPriorNet,
    data: &LatentDataset,
    seed: u64,
) -> Result<f64, ModelError> {
    let mut rng = RngStream::new(seed).derive_named("eval-teacher");
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(64) {
        let batch = LatentBatch::from_dataset(data, chunk)?;
        let teacher = batch.draw(&mut rng);
        let mut g = Graph::new();
        let kl = batch_kl(&mut g, store, net, &batch, teacher)?;
        total += g.scalar(kl);
        count += batch.layout.total() * net.latent_dim;
    }
    Ok(total / count.max(1) as f64)
}

/// Per-step, per-dimension NLL of the posterior means under the prior,
/// teacher-forced on the means themselves.
pub fn nll_per_dim(
    store: &ParamStore,
    net: &ArPriorNet,
    data: &LatentDataset,
) -> Result<NllEstimate, ModelError> {
    let mut steps = Vec::with_capacity(data.total_steps());
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(64) {
        let batch = LatentBatch::from_dataset(data, chunk)?;
        let mut g = Graph::new();
        let c = g.constant(batch.context.clone());
        let t = g.constant(batch.means.clone());
        let (m, l) = net.forward(&mut g, store, c, t, &batch.layout)?;
        let (mv, lv) = (g.value(m), g.value(l));
        for n in 0..batch.layout.total() {
            let lp: f64 = (0..net.latent_dim)
                .map(|j| log_prob_term(batch.means.get(n, j), mv.get(n, j), lv.get(n, j)))
                .sum();
            steps.push(-lp / net.latent_dim as f64);
        }
    }
    Ok(NllEstimate::from_steps(&steps))
}
