//! Conditional normalizing flow over per-phoneme channels `[z ; log d̃]`.
//!
//! The stack maps data `v` to base variables `z_0` through repeated
//! actnorm → invertible linear → affine coupling blocks. The base
//! distribution is a diagonal Gaussian whose parameters come from a GRU over
//! the text context, so
//!
//! ```text
//! log p(v | c) = log N(f(v); μ(c), σ(c)²) + log |det ∂f/∂v|.
//! ```
//!
//! Coupling conditioners see the identity half at the previous, current and
//! next step (a width-3 temporal convolution) plus `c_n`; their output layer
//! starts at zero and the scale is `sigmoid(raw) + 0.5`, so every layer is
//! invertible and starts as the identity. Integer durations are dequantized
//! as `log(d + u)`, `u ~ U[0, 1)`; sampling undoes this with `floor(exp(·))`
//! clamped to at least one frame.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AutodiffError, Graph, ParamId, ParamStore, Var};
use crate::corpus::NllEstimate;
use crate::latents::{LatentBatch, LatentDataset};
use crate::math::{linalg, GaussianSeq, RngStream, SeqTensor};
use crate::nn::{BatchLayout, GruCell, Linear};
use crate::training::{check_training, BatchSampler, Checkpoint, ModelError, ModelKind, TraceRow};

/// Initial value of the invertible linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearInit {
    /// A fixed random channel permutation.
    #[default]
    Permutation,
    /// A random rotation, factored as `P · L · U`.
    Rotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub latent_dim: usize,
    pub context_dim: usize,
    /// Append the dequantized log-duration as the last channel.
    pub include_duration: bool,
    /// Number of actnorm → linear → coupling blocks (3 layers each).
    pub blocks: usize,
    pub coupling_hidden: usize,
    pub base_hidden: usize,
    pub linear_init: LinearInit,
}

impl FlowConfig {
    pub fn new(latent_dim: usize, context_dim: usize, include_duration: bool) -> Self {
        Self {
            latent_dim,
            context_dim,
            include_duration,
            blocks: 4,
            coupling_hidden: 32,
            base_hidden: 32,
            linear_init: LinearInit::Permutation,
        }
    }

    pub fn channels(&self) -> usize {
        self.latent_dim + usize::from(self.include_duration)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    ActNorm {
        bias: ParamId,
        log_scale: ParamId,
    },
    Linear {
        lower: ParamId,
        upper: ParamId,
        log_s: ParamId,
        fixed: LinearFixed,
    },
    Coupling {
        split: usize,
        hidden: Linear,
        out: Linear,
    },
}

/// Non-trainable part of an invertible linear layer: the permutation
/// (`P[i][perm[i]] = 1`) and the signs of the diagonal of `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFixed {
    pub perm: Vec<usize>,
    pub sign: Vec<f64>,
}

impl Layer {
    fn name(&self, index: usize) -> String {
        let kind = match self {
            Layer::ActNorm { .. } => "actnorm",
            Layer::Linear { .. } => "linear",
            Layer::Coupling { .. } => "coupling",
        };
        format!("flow.{index}.{kind}")
    }
}

/// Recurrent encoder over `c` with linear heads on `[h_n ; c_n]`.
#[derive(Debug, Clone)]
struct BaseConditioner {
    gru: GruCell,
    mean: Linear,
    log_std: Linear,
}

impl BaseConditioner {
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        context: Var,
        layout: &BatchLayout,
    ) -> Result<(Var, Var), ModelError> {
        let h = self.gru.run(g, store, context, layout)?;
        let feat = g.concat_cols(&[h, context])?;
        Ok((
            self.mean.forward(g, store, feat)?,
            self.log_std.forward(g, store, feat)?,
        ))
    }
}

/// Serialized model state beyond the parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FlowHyper {
    config: FlowConfig,
    actnorm_initialized: bool,
    linear_fixed: Vec<LinearFixed>,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub store: ParamStore,
    layers: Vec<Layer>,
    base: BaseConditioner,
    pub actnorm_initialized: bool,
}

fn col_ones(n: usize) -> SeqTensor {
    SeqTensor::filled(n, 1, 1.0)
}

fn permutation_matrix(perm: &[usize]) -> SeqTensor {
    let mut p = SeqTensor::zeros(perm.len(), perm.len());
    for (i, &j) in perm.iter().enumerate() {
        p.set(i, j, 1.0);
    }
    p
}

fn tri_mask(n: usize, lower: bool) -> SeqTensor {
    let mut m = SeqTensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if (lower && j < i) || (!lower && j > i) {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

fn identity(n: usize) -> SeqTensor {
    let mut m = SeqTensor::zeros(n, n);
    for i in 0..n {
        m.set(i, i, 1.0);
    }
    m
}

impl FlowModel {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self, ModelError> {
        let ch = config.channels();
        if ch == 0
            || config.context_dim == 0
            || config.coupling_hidden == 0
            || config.base_hidden == 0
        {
            return Err(ModelError::InvalidConfig("flow sizes must be >= 1".into()));
        }
        let mut rng = RngStream::new(seed).derive_named("flow-init");
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(3 * config.blocks);
        for b in 0..config.blocks {
            let i = 3 * b;
            let an = format!("flow.{i}.actnorm");
            layers.push(Layer::ActNorm {
                bias: store.add(&format!("{an}.bias"), SeqTensor::zeros(1, ch))?,
                log_scale: store.add(&format!("{an}.log_scale"), SeqTensor::zeros(1, ch))?,
            });
            let ln = format!("flow.{}.linear", i + 1);
            let (lower, upper, log_s, fixed) = match config.linear_init {
                LinearInit::Permutation => {
                    let mut perm: Vec<usize> = (0..ch).collect();
                    rng.shuffle(&mut perm);
                    (
                        SeqTensor::zeros(ch, ch),
                        SeqTensor::zeros(ch, ch),
                        SeqTensor::zeros(1, ch),
                        LinearFixed {
                            perm,
                            sign: vec![1.0; ch],
                        },
                    )
                }
                LinearInit::Rotation => {
                    let q = linalg::random_orthogonal(ch, &mut rng);
                    let lu = linalg::lu_decompose(&q)?;
                    // q = Pᵀ L U with (P q)[i] = q[perm[i]]
                    let mut perm = vec![0; ch];
                    for (i, &p) in lu.perm.iter().enumerate() {
                        perm[p] = i;
                    }
                    let diag: Vec<f64> = (0..ch).map(|i| lu.upper.get(i, i)).collect();
                    let mut upper = lu.upper.clone();
                    for i in 0..ch {
                        upper.set(i, i, 0.0);
                    }
                    let mut lower = lu.lower.clone();
                    for i in 0..ch {
                        lower.set(i, i, 0.0);
                    }
                    (
                        lower,
                        upper,
                        SeqTensor::new(1, ch, diag.iter().map(|d| d.abs().ln()).collect())?,
                        LinearFixed {
                            perm,
                            sign: diag.iter().map(|d| d.signum()).collect(),
                        },
                    )
                }
            };
            layers.push(Layer::Linear {
                lower: store.add(&format!("{ln}.lower"), lower)?,
                upper: store.add(&format!("{ln}.upper"), upper)?,
                log_s: store.add(&format!("{ln}.log_s"), log_s)?,
                fixed,
            });
            let split = ch / 2;
            let cn = format!("flow.{}.coupling", i + 2);
            let in_dim = 3 * split + config.context_dim;
            layers.push(Layer::Coupling {
                split,
                hidden: Linear::new(
                    &mut store,
                    &format!("{cn}.hidden"),
                    in_dim,
                    config.coupling_hidden,
                    &mut rng,
                )?,
                out: Linear::zeros(
                    &mut store,
                    &format!("{cn}.out"),
                    config.coupling_hidden,
                    2 * (ch - split),
                )?,
            });
        }
        let base = BaseConditioner {
            gru: GruCell::new(
                &mut store,
                "base.gru",
                config.context_dim,
                config.base_hidden,
                &mut rng,
            )?,
            mean: Linear::zeros(
                &mut store,
                "base.mean",
                config.base_hidden + config.context_dim,
                ch,
            )?,
            log_std: Linear::zeros(
                &mut store,
                "base.log_std",
                config.base_hidden + config.context_dim,
                ch,
            )?,
        };
        Ok(Self {
            config,
            store,
            layers,
            base,
            actnorm_initialized: false,
        })
    }

    fn hyper(&self) -> FlowHyper {
        FlowHyper {
            config: self.config.clone(),
            actnorm_initialized: self.actnorm_initialized,
            linear_fixed: self
                .layers
                .iter()
                .filter_map(|l| match l {
                    Layer::Linear { fixed, .. } => Some(fixed.clone()),
                    _ => None,
                })
                .collect(),
        }
    }

    pub fn checkpoint(&self, rng: &RngStream) -> Checkpoint {
        Checkpoint::new(ModelKind::Flow, &self.hyper(), &self.store, rng)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.expect_kind(&[ModelKind::Flow])?;
        let hyper: FlowHyper = ckpt.hyper()?;
        let store = ckpt.store()?;
        let cfg = &hyper.config;
        let ch = cfg.channels();
        if hyper.linear_fixed.len() != cfg.blocks {
            return Err(ModelError::InvalidConfig(
                "one fixed permutation per block expected".into(),
            ));
        }
        let mut layers = Vec::with_capacity(3 * cfg.blocks);
        for (b, fixed) in hyper.linear_fixed.iter().enumerate() {
            let i = 3 * b;
            if fixed.perm.len() != ch || fixed.sign.len() != ch {
                return Err(ModelError::DimensionMismatch {
                    what: "linear layer permutation".into(),
                    expected: ch,
                    found: fixed.perm.len(),
                });
            }
            let an = format!("flow.{i}.actnorm");
            layers.push(Layer::ActNorm {
                bias: store.id(&format!("{an}.bias"))?,
                log_scale: store.id(&format!("{an}.log_scale"))?,
            });
            let ln = format!("flow.{}.linear", i + 1);
            layers.push(Layer::Linear {
                lower: store.id(&format!("{ln}.lower"))?,
                upper: store.id(&format!("{ln}.upper"))?,
                log_s: store.id(&format!("{ln}.log_s"))?,
                fixed: fixed.clone(),
            });
            let cn = format!("flow.{}.coupling", i + 2);
            layers.push(Layer::Coupling {
                split: ch / 2,
                hidden: Linear::bind(&store, &format!("{cn}.hidden"))?,
                out: Linear::bind(&store, &format!("{cn}.out"))?,
            });
        }
        let base = BaseConditioner {
            gru: GruCell::bind(&store, "base.gru")?,
            mean: Linear::bind(&store, "base.mean")?,
            log_std: Linear::bind(&store, "base.log_std")?,
        };
        Ok(Self {
            config: hyper.config,
            store,
            layers,
            base,
            actnorm_initialized: hyper.actnorm_initialized,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Appends a coupling layer whose output weights are zero, i.e. an exact
    /// identity until trained.
    pub fn push_identity_coupling(&mut self, seed: u64) -> Result<(), ModelError> {
        let ch = self.config.channels();
        let i = self.layers.len();
        let split = ch / 2;
        let mut rng = RngStream::new(seed).derive_named("extra-coupling");
        let cn = format!("flow.{i}.coupling");
        let hidden = Linear::new(
            &mut self.store,
            &format!("{cn}.hidden"),
            3 * split + self.config.context_dim,
            self.config.coupling_hidden,
            &mut rng,
        )?;
        let out = Linear::zeros(
            &mut self.store,
            &format!("{cn}.out"),
            self.config.coupling_hidden,
            2 * (ch - split),
        )?;
        self.layers.push(Layer::Coupling { split, hidden, out });
        Ok(())
    }

    fn check_shapes(
        &self,
        v: (usize, usize),
        c: (usize, usize),
        layout: &BatchLayout,
    ) -> Result<(), ModelError> {
        if v.0 != c.0 || v.0 != layout.total() {
            return Err(ModelError::StepMismatch {
                context: c.0,
                latents: v.0,
            });
        }
        if v.1 != self.config.channels() {
            return Err(ModelError::DimensionMismatch {
                what: "flow channels".into(),
                expected: self.config.channels(),
                found: v.1,
            });
        }
        if c.1 != self.config.context_dim {
            return Err(ModelError::DimensionMismatch {
                what: "flow context dim".into(),
                expected: self.config.context_dim,
                found: c.1,
            });
        }
        Ok(())
    }

    /// `W = P · (L + I) · (U + diag(sign ⊙ exp(log_s)))` as a graph value.
    fn linear_weight(
        &self,
        g: &mut Graph,
        lower: ParamId,
        upper: ParamId,
        log_s: ParamId,
        fixed: &LinearFixed,
    ) -> Result<Var, AutodiffError> {
        let ch = fixed.perm.len();
        let l = g.param(&self.store, lower);
        let u = g.param(&self.store, upper);
        let s = g.param(&self.store, log_s);
        let lm = g.constant(tri_mask(ch, true));
        let um = g.constant(tri_mask(ch, false));
        let eye = g.constant(identity(ch));
        let sign = g.constant(SeqTensor::new(1, ch, fixed.sign.clone()).expect("finite signs"));
        let l = g.mul(l, lm)?;
        let l = g.add(l, eye)?;
        let u = g.mul(u, um)?;
        let es = g.exp(s)?;
        let diag_row = g.mul(es, sign)?;
        let diag = g.mul_row(eye, diag_row)?;
        let u = g.add(u, diag)?;
        let lu = g.matmul(l, u)?;
        let p = g.constant(permutation_matrix(&fixed.perm));
        g.matmul(p, lu)
    }

    /// Shift and scale of a coupling layer from the identity half `x1`.
    #[allow(clippy::too_many_arguments)]
    fn coupling_params(
        &self,
        g: &mut Graph,
        x1: Option<Var>,
        context: Var,
        layout: &BatchLayout,
        hidden: &Linear,
        out: &Linear,
        d2: usize,
    ) -> Result<(Var, Var), AutodiffError> {
        let inp = match x1 {
            Some(x1) => {
                let prev = g.gather_rows(x1, &layout.prev_rows())?;
                let next = g.gather_rows(x1, &layout.next_rows())?;
                g.concat_cols(&[prev, x1, next, context])?
            }
            None => context,
        };
        let h = hidden.forward(g, &self.store, inp)?;
        let h = g.tanh(h)?;
        let raw = out.forward(g, &self.store, h)?;
        let shift = g.slice_cols(raw, 0, d2)?;
        let sraw = g.slice_cols(raw, d2, 2 * d2)?;
        let sig = g.sigmoid(sraw)?;
        let scale = g.add_scalar(sig, 0.5)?;
        Ok((shift, scale))
    }

    fn layer_forward(
        &self,
        g: &mut Graph,
        layer: &Layer,
        x: Var,
        context: Var,
        layout: &BatchLayout,
    ) -> Result<(Var, Var), AutodiffError> {
        let n = layout.total();
        let ones = g.constant(col_ones(n));
        match layer {
            Layer::ActNorm { bias, log_scale } => {
                let b = g.param(&self.store, *bias);
                let s = g.param(&self.store, *log_scale);
                let xb = g.add_row(x, b)?;
                let es = g.exp(s)?;
                let y = g.mul_row(xb, es)?;
                let sum = g.row_sum(s)?;
                let ld = g.matmul(ones, sum)?;
                Ok((y, ld))
            }
            Layer::Linear {
                lower,
                upper,
                log_s,
                fixed,
            } => {
                let w = self.linear_weight(g, *lower, *upper, *log_s, fixed)?;
                let y = g.matmul(x, w)?;
                let s = g.param(&self.store, *log_s);
                let sum = g.row_sum(s)?;
                let ld = g.matmul(ones, sum)?;
                Ok((y, ld))
            }
            Layer::Coupling { split, hidden, out } => {
                let ch = g.shape(x).1;
                let d2 = ch - split;
                let x1 = if *split > 0 {
                    Some(g.slice_cols(x, 0, *split)?)
                } else {
                    None
                };
                let x2 = g.slice_cols(x, *split, ch)?;
                let (shift, scale) =
                    self.coupling_params(g, x1, context, layout, hidden, out, d2)?;
                let y2 = g.mul(x2, scale)?;
                let y2 = g.add(y2, shift)?;
                let y = match x1 {
                    Some(x1) => g.concat_cols(&[x1, y2])?,
                    None => y2,
                };
                let ls = g.log(scale)?;
                let ld = g.row_sum(ls)?;
                Ok((y, ld))
            }
        }
    }

    /// Maps data to base variables. Returns `z_0` and the per-row
    /// log-determinant (`N × 1`) of the data → base direction.
    pub fn forward(
        &self,
        g: &mut Graph,
        v: Var,
        context: Var,
        layout: &BatchLayout,
    ) -> Result<(Var, Var), ModelError> {
        self.check_shapes(g.shape(v), g.shape(context), layout)?;
        let mut x = v;
        let mut logdet = g.constant(SeqTensor::zeros(layout.total(), 1));
        for layer in &self.layers {
            let (y, ld) = self.layer_forward(g, layer, x, context, layout)?;
            logdet = g.add(logdet, ld)?;
            x = y;
        }
        Ok((x, logdet))
    }

    /// Per-row `log p(v_n | ·)` contributions (`N × 1`); summing over an
    /// utterance's rows gives its exact log-likelihood.
    pub fn row_log_likelihood(
        &self,
        g: &mut Graph,
        v: Var,
        context: Var,
        layout: &BatchLayout,
    ) -> Result<Var, ModelError> {
        let (z, logdet) = self.forward(g, v, context, layout)?;
        let (m, l) = self.base.forward(g, &self.store, context, layout)?;
        let lp = g.gaussian_log_prob(z, m, l)?;
        let lp = g.row_sum(lp)?;
        Ok(g.add(lp, logdet)?)
    }

    /// Base variables and total log-determinant for one utterance.
    pub fn forward_with_logdet(
        &self,
        v: &SeqTensor,
        context: &SeqTensor,
    ) -> Result<(SeqTensor, f64), ModelError> {
        let layout = BatchLayout::new(vec![v.rows()])?;
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let c = g.constant(context.clone());
        let (z, ld) = self.forward(&mut g, vv, c, &layout)?;
        Ok((g.value(z).clone(), g.value(ld).sum()))
    }

    /// Exact log-likelihood of one utterance.
    pub fn log_likelihood(&self, v: &SeqTensor, context: &SeqTensor) -> Result<f64, ModelError> {
        let layout = BatchLayout::new(vec![v.rows()])?;
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let c = g.constant(context.clone());
        let ll = self.row_log_likelihood(&mut g, vv, c, &layout)?;
        Ok(g.value(ll).sum())
    }

    /// Base distribution for one utterance's context.
    pub fn base_distribution(&self, context: &SeqTensor) -> Result<GaussianSeq, ModelError> {
        let layout = BatchLayout::new(vec![context.rows()])?;
        let mut g = Graph::new();
        let c = g.constant(context.clone());
        let (m, l) = self.base.forward(&mut g, &self.store, c, &layout)?;
        Ok(GaussianSeq::new(g.value(m).clone(), g.value(l).clone())?)
    }

    /// Maps base variables back to data for one utterance.
    pub fn inverse(&self, z0: &SeqTensor, context: &SeqTensor) -> Result<SeqTensor, ModelError> {
        let layout = BatchLayout::new(vec![z0.rows()])?;
        self.check_shapes(z0.shape(), context.shape(), &layout)?;
        let mut y = z0.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            y = self.layer_inverse(layer, &y, context, &layout)?;
            if !y.is_finite() {
                return Err(ModelError::NonInvertible {
                    layer: layer.name(i),
                });
            }
        }
        Ok(y)
    }

    fn layer_inverse(
        &self,
        layer: &Layer,
        y: &SeqTensor,
        context: &SeqTensor,
        layout: &BatchLayout,
    ) -> Result<SeqTensor, ModelError> {
        let (n, ch) = y.shape();
        match layer {
            Layer::ActNorm { bias, log_scale } => {
                let b = self.store.value(*bias).data();
                let s = self.store.value(*log_scale).data();
                let mut x = y.clone();
                for r in 0..n {
                    for (j, v) in x.row_mut(r).iter_mut().enumerate() {
                        *v = *v * (-s[j]).exp() - b[j];
                    }
                }
                Ok(x)
            }
            Layer::Linear {
                lower,
                upper,
                log_s,
                fixed,
            } => {
                let mut g = Graph::new();
                let w = self.linear_weight(&mut g, *lower, *upper, *log_s, fixed)?;
                let w_inv = linalg::inverse(g.value(w))?;
                Ok(y.matmul(&w_inv)?)
            }
            Layer::Coupling { split, hidden, out } => {
                let d2 = ch - split;
                let mut g = Graph::new();
                let c = g.constant(context.clone());
                let x1 = if *split > 0 {
                    let mut x1 = SeqTensor::zeros(n, *split);
                    for r in 0..n {
                        x1.row_mut(r).copy_from_slice(&y.row(r)[..*split]);
                    }
                    Some(g.constant(x1))
                } else {
                    None
                };
                let (shift, scale) =
                    self.coupling_params(&mut g, x1, c, layout, hidden, out, d2)?;
                let (sh, sc) = (g.value(shift), g.value(scale));
                let mut x = y.clone();
                for r in 0..n {
                    for j in 0..d2 {
                        let v = (y.get(r, split + j) - sh.get(r, j)) / sc.get(r, j);
                        x.set(r, split + j, v);
                    }
                }
                Ok(x)
            }
        }
    }

    /// Sets every actnorm layer so that its output on `v` has zero mean and
    /// unit (population) std per channel, layer by layer.
    pub fn initialize_actnorm(
        &mut self,
        v: &SeqTensor,
        context: &SeqTensor,
        layout: &BatchLayout,
    ) -> Result<(), ModelError> {
        self.check_shapes(v.shape(), context.shape(), layout)?;
        let mut x = v.clone();
        for i in 0..self.layers.len() {
            if let Layer::ActNorm { bias, log_scale } = self.layers[i] {
                let (n, ch) = x.shape();
                for j in 0..ch {
                    let mean = (0..n).map(|r| x.get(r, j)).sum::<f64>() / n as f64;
                    let var = (0..n).map(|r| (x.get(r, j) - mean).powi(2)).sum::<f64>() / n as f64;
                    let std = var.sqrt().max(1e-6);
                    self.store.value_mut(bias).set(0, j, -mean);
                    self.store.value_mut(log_scale).set(0, j, -std.ln());
                }
            }
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let c = g.constant(context.clone());
            let (y, _) = self.layer_forward(&mut g, &self.layers[i], xv, c, layout)?;
            x = g.value(y).clone();
        }
        self.actnorm_initialized = true;
        Ok(())
    }

    /// Draws `z_0 ~ N(μ(c), (temperature · σ(c))²)` and inverts the stack.
    /// Returns the latents and, with a duration channel, the durations.
    pub fn sample(
        &self,
        context: &SeqTensor,
        temperature: f64,
        rng: &mut RngStream,
    ) -> Result<(SeqTensor, Option<Vec<usize>>), ModelError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(ModelError::InvalidTemperature(temperature));
        }
        let z0 = self.sample_base(context, temperature, rng)?;
        let v = self.inverse(&z0, context)?;
        Ok(self.split_channels(&v))
    }

    /// A base draw at the given temperature.
    pub fn sample_base(
        &self,
        context: &SeqTensor,
        temperature: f64,
        rng: &mut RngStream,
    ) -> Result<SeqTensor, ModelError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(ModelError::InvalidTemperature(temperature));
        }
        let base = self.base_distribution(context)?;
        let data = base
            .mean()
            .data()
            .iter()
            .zip(base.log_std().data())
            .map(|(m, l)| m + temperature * l.exp() * rng.normal())
            .collect();
        Ok(SeqTensor::new(
            context.rows(),
            self.config.channels(),
            data,
        )?)
    }

    /// Separates latents from the duration channel, un-dequantizing it.
    pub fn split_channels(&self, v: &SeqTensor) -> (SeqTensor, Option<Vec<usize>>) {
        let d = self.config.latent_dim;
        if !self.config.include_duration {
            return (v.clone(), None);
        }
        let mut z = SeqTensor::zeros(v.rows(), d);
        let mut durations = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            z.row_mut(r).copy_from_slice(&v.row(r)[..d]);
            durations.push(undequantize(v.get(r, d)));
        }
        (z, Some(durations))
    }
}

/// `log(d + u)`.
pub fn dequantize(d: usize, u: f64) -> f64 {
    (d as f64 + u).ln()
}

/// `max(1, floor(exp(x)))`, tolerant of the rounding in `exp(ln d)`.
pub fn undequantize(x: f64) -> usize {
    let e = x.exp();
    if e.is_finite() {
        ((e + 1e-9).floor() as usize).max(1)
    } else {
        usize::MAX
    }
}

/// Flow inputs for a batch: a fresh posterior draw per element, plus the
/// dequantized duration channel when configured.
pub fn flow_inputs(
    config: &FlowConfig,
    batch: &LatentBatch,
    rng: &mut RngStream,
) -> Result<SeqTensor, ModelError> {
    let z = batch.draw(rng);
    if !config.include_duration {
        return Ok(z);
    }
    let (n, d) = z.shape();
    let mut v = SeqTensor::zeros(n, d + 1);
    for r in 0..n {
        v.row_mut(r)[..d].copy_from_slice(z.row(r));
        v.set(r, d, dequantize(batch.durations[r], rng.uniform()));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            clip_norm: Some(10.0),
        }
    }
}

fn check_dataset(model: &FlowModel, data: &LatentDataset) -> Result<(), ModelError> {
    for (what, expected, found) in [
        (
            "dataset latent dim",
            model.config.latent_dim,
            data.latent_dim,
        ),
        (
            "dataset context dim",
            model.config.context_dim,
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

/// Maximizes the exact log-likelihood of posterior draws (and dequantized
/// durations). Actnorm layers are initialized from the first batch when
/// needed. Records the per-step, per-channel NLL of each batch as `nll`.
pub fn train_flow(
    model: &mut FlowModel,
    data: &LatentDataset,
    cfg: &FlowTrainConfig,
) -> Result<Vec<TraceRow>, ModelError> {
    check_training(cfg.steps, cfg.batch_size, cfg.lr)?;
    check_dataset(model, data)?;
    let root = RngStream::new(cfg.seed);
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, root.derive_named("batches"))?;
    let mut noise = root.derive_named("flow-noise");
    let adam = AdamConfig {
        clip_norm: cfg.clip_norm,
        ..AdamConfig::with_lr(cfg.lr)
    };
    let ch = model.config.channels();
    let mut trace = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let mut run = || -> Result<f64, ModelError> {
            let batch = LatentBatch::from_dataset(data, &sampler.next_batch())?;
            let v = flow_inputs(&model.config, &batch, &mut noise)?;
            if !model.actnorm_initialized {
                model.initialize_actnorm(&v, &batch.context, &batch.layout)?;
            }
            let mut g = Graph::new();
            let vv = g.constant(v);
            let c = g.constant(batch.context.clone());
            let ll = model.row_log_likelihood(&mut g, vv, c, &batch.layout)?;
            let total = g.sum(ll)?;
            let loss = g.scale(total, -1.0 / (batch.layout.total() * ch) as f64)?;
            let value = g.scalar(loss);
            g.backward(loss)?.accumulate_into(&mut model.store);
            model.store.adam_step(&adam)?;
            Ok(value)
        };
        let nll = run().map_err(|e| e.at_step(step))?;
        trace.push(TraceRow::new(step, "nll", nll));
    }
    Ok(trace)
}

/// Per-step, per-channel NLL over a dataset with inputs drawn from `seed`.
/// The standard error is over utterances.
pub fn nll_per_dim(
    model: &FlowModel,
    data: &LatentDataset,
    seed: u64,
) -> Result<NllEstimate, ModelError> {
    check_dataset(model, data)?;
    let mut rng = RngStream::new(seed).derive_named("eval-inputs");
    let ch = model.config.channels() as f64;
    let mut per_utt = Vec::with_capacity(data.len());
    let mut weights = Vec::with_capacity(data.len());
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(64) {
        let batch = LatentBatch::from_dataset(data, chunk)?;
        let v = flow_inputs(&model.config, &batch, &mut rng)?;
        let mut g = Graph::new();
        let vv = g.constant(v);
        let c = g.constant(batch.context.clone());
        let ll = model.row_log_likelihood(&mut g, vv, c, &batch.layout)?;
        let rows = g.value(ll);
        for (&len, &off) in batch.layout.lengths().iter().zip(batch.layout.offsets()) {
            let s: f64 = (off..off + len).map(|r| rows.get(r, 0)).sum();
            per_utt.push(-s / (len as f64 * ch));
            weights.push(len as f64);
        }
    }
    let wsum: f64 = weights.iter().sum();
    let mean = per_utt
        .iter()
        .zip(&weights)
        .map(|(v, w)| v * w)
        .sum::<f64>()
        / wsum;
    let se = NllEstimate::from_steps(&per_utt).std_error;
    Ok(NllEstimate {
        per_dim: mean,
        std_error: se,
        n_steps: wsum as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perturbed(config: FlowConfig, seed: u64) -> FlowModel {
        let mut m = FlowModel::new(config, seed).unwrap();
        let mut rng = RngStream::new(seed + 100);
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            for v in m.store.value_mut(id).data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
        m
    }

    fn random(rows: usize, cols: usize, rng: &mut RngStream) -> SeqTensor {
        SeqTensor::new(rows, cols, rng.normals(rows * cols)).unwrap()
    }

    fn det(a: &SeqTensor) -> f64 {
        let lu = linalg::lu_decompose(a).unwrap();
        let mut swaps = 0;
        let mut perm = lu.perm.clone();
        for i in 0..perm.len() {
            while perm[i] != i {
                let j = perm[i];
                perm.swap(i, j);
                swaps += 1;
            }
        }
        let sign = if swaps % 2 == 0 { 1.0 } else { -1.0 };
        sign * (0..a.rows()).map(|i| lu.upper.get(i, i)).product::<f64>()
    }

    #[test]
    fn coupling_logdet_is_sum_of_log_scales() {
        let m = perturbed(FlowConfig::new(5, 3, false), 1);
        let mut rng = RngStream::new(2);
        let layout = BatchLayout::new(vec![4, 2]).unwrap();
        let x = random(6, 5, &mut rng);
        let c = random(6, 3, &mut rng);
        let Layer::Coupling { split, hidden, out } = &m.layers[2] else {
            panic!("layer 2 is a coupling");
        };
        let mut g = Graph::new();
        let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
        let (y, ld) = m
            .layer_forward(&mut g, &m.layers[2], xv, cv, &layout)
            .unwrap();
        let (y, ld) = (g.value(y).clone(), g.value(ld).clone());

        // brute-force conditioner evaluation, row by row
        let _ = (hidden, out);
        let param = |name: &str| m.store.value(m.store.id(name).unwrap());
        let (w1, b1) = (
            param("flow.2.coupling.hidden.w"),
            param("flow.2.coupling.hidden.b"),
        );
        let (w2, b2) = (
            param("flow.2.coupling.out.w"),
            param("flow.2.coupling.out.b"),
        );
        let d2 = 5 - split;
        let prev = layout.prev_rows();
        let next = layout.next_rows();
        for r in 0..6 {
            let pick = |row: Option<usize>| -> Vec<f64> {
                row.map_or(vec![0.0; *split], |q| x.row(q)[..*split].to_vec())
            };
            let mut inp = pick(prev[r]);
            inp.extend(&x.row(r)[..*split]);
            inp.extend(pick(next[r]));
            inp.extend(c.row(r));
            let h: Vec<f64> = (0..w1.cols())
                .map(|j| {
                    (b1.get(0, j)
                        + inp
                            .iter()
                            .enumerate()
                            .map(|(i, v)| v * w1.get(i, j))
                            .sum::<f64>())
                    .tanh()
                })
                .collect();
            let raw: Vec<f64> = (0..w2.cols())
                .map(|j| {
                    b2.get(0, j)
                        + h.iter()
                            .enumerate()
                            .map(|(i, v)| v * w2.get(i, j))
                            .sum::<f64>()
                })
                .collect();
            let mut expect_ld = 0.0;
            for j in 0..d2 {
                let s = 1.0 / (1.0 + (-raw[d2 + j]).exp()) + 0.5;
                expect_ld += s.ln();
                let want = x.get(r, split + j) * s + raw[j];
                assert!((y.get(r, split + j) - want).abs() < 1e-12);
            }
            for j in 0..*split {
                assert_eq!(y.get(r, j), x.get(r, j));
            }
            assert!((ld.get(r, 0) - expect_ld).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_logdet_matches_determinant() {
        for init in [LinearInit::Permutation, LinearInit::Rotation] {
            let mut cfg = FlowConfig::new(4, 2, true);
            cfg.linear_init = init;
            let m = perturbed(cfg, 3);
            let Layer::Linear {
                lower,
                upper,
                log_s,
                fixed,
            } = &m.layers[1]
            else {
                panic!("layer 1 is linear");
            };
            let mut g = Graph::new();
            let w = m
                .linear_weight(&mut g, *lower, *upper, *log_s, fixed)
                .unwrap();
            let d = det(g.value(w));
            let sum: f64 = m.store.value(*log_s).data().iter().sum();
            assert!((d.abs().ln() - sum).abs() < 1e-10, "{init:?}");
        }
    }

    #[test]
    fn rotation_init_is_orthogonal() {
        let mut cfg = FlowConfig::new(5, 2, false);
        cfg.linear_init = LinearInit::Rotation;
        let m = FlowModel::new(cfg, 4).unwrap();
        let Layer::Linear {
            lower,
            upper,
            log_s,
            fixed,
        } = &m.layers[1]
        else {
            panic!("layer 1 is linear");
        };
        let mut g = Graph::new();
        let w = m
            .linear_weight(&mut g, *lower, *upper, *log_s, fixed)
            .unwrap();
        let w = g.value(w);
        let wwt = w.matmul(&w.transpose()).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((wwt.get(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn actnorm_init_standardizes_each_layer_input() {
        let mut m = perturbed(FlowConfig::new(3, 2, true), 5);
        let mut rng = RngStream::new(6);
        let layout = BatchLayout::new(vec![30, 20, 14]).unwrap();
        let n = layout.total();
        let mut v = random(n, 4, &mut rng);
        for r in 0..n {
            for (j, x) in v.row_mut(r).iter_mut().enumerate() {
                *x = 3.0 * j as f64 - 2.0 + (j as f64 + 0.5) * *x;
            }
        }
        let c = random(n, 2, &mut rng);
        m.initialize_actnorm(&v, &c, &layout).unwrap();
        assert!(m.actnorm_initialized);
        let mut x = v.clone();
        for layer in &m.layers {
            let mut g = Graph::new();
            let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
            let (y, _) = m.layer_forward(&mut g, layer, xv, cv, &layout).unwrap();
            let y = g.value(y).clone();
            if matches!(layer, Layer::ActNorm { .. }) {
                for j in 0..4 {
                    let mean = (0..n).map(|r| y.get(r, j)).sum::<f64>() / n as f64;
                    let var = (0..n).map(|r| (y.get(r, j) - mean).powi(2)).sum::<f64>() / n as f64;
                    assert!(mean.abs() < 1e-10, "mean {mean}");
                    assert!((var - 1.0).abs() < 1e-10, "var {var}");
                }
            }
            x = y;
        }
    }

    #[test]
    fn dequantization_round_trips() {
        for d in 1..50 {
            for u in [0.0, 0.3, 0.999] {
                assert_eq!(undequantize(dequantize(d, u)), d);
            }
        }
        assert_eq!(undequantize(-3.0), 1);
    }
}
