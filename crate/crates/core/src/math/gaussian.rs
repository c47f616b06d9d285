//! Diagonal Gaussian sequences: closed-form KL, log density, sampling and a
//! Monte Carlo KL estimator used as an independent check on the closed form.

use serde::{Deserialize, Serialize};

use super::{MathError, RngStream, SeqTensor};

/// `½ ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-step, per-channel isotropic Gaussian stored as `(mean, log_std)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSeq {
    mean: SeqTensor,
    log_std: SeqTensor,
}

/// Per-step values (summed over channels) and their grand total.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTotals {
    pub per_step: Vec<f64>,
    pub total: f64,
}

impl StepTotals {
    fn from_per_step(per_step: Vec<f64>) -> Self {
        let total = per_step.iter().sum();
        Self { per_step, total }
    }
}

/// Monte Carlo estimate with its standard error of the mean. The standard
/// error is `None` when a single sample was drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub n_samples: usize,
}

impl GaussianSeq {
    pub fn new(mean: SeqTensor, log_std: SeqTensor) -> Result<Self, MathError> {
        if mean.shape() != log_std.shape() {
            return Err(MathError::ShapeMismatch {
                op: "GaussianSeq::new",
                left: mean.shape(),
                right: log_std.shape(),
            });
        }
        Ok(Self { mean, log_std })
    }

    /// `N(0, I)` with the given shape.
    pub fn standard(steps: usize, channels: usize) -> Self {
        Self {
            mean: SeqTensor::zeros(steps, channels),
            log_std: SeqTensor::zeros(steps, channels),
        }
    }

    pub fn mean(&self) -> &SeqTensor {
        &self.mean
    }

    pub fn log_std(&self) -> &SeqTensor {
        &self.log_std
    }

    pub fn std(&self) -> SeqTensor {
        self.log_std.map(f64::exp)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }

    pub fn into_parts(self) -> (SeqTensor, SeqTensor) {
        (self.mean, self.log_std)
    }
}

fn check_same(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(), MathError> {
    if a == b {
        Ok(())
    } else {
        Err(MathError::ShapeMismatch {
            op,
            left: a,
            right: b,
        })
    }
}

/// Single-channel KL(N(mq, e^lq) ‖ N(mp, e^lp)).
///
/// Written as `½(r² − 1 − 2 ln r) + ½((mp − mq)/σp)²` with `r = σq/σp`, using
/// `expm1` so the value stays non-negative to rounding when `q ≈ p`.
#[inline]
pub fn kl_term(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    let lr = lq - lp;
    let z = (mp - mq) * (-lp).exp();
    0.5 * ((2.0 * lr).exp_m1() - 2.0 * lr) + 0.5 * z * z
}

/// Single-channel Gaussian log density.
#[inline]
pub fn log_prob_term(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) * (-log_std).exp();
    -HALF_LN_2PI - log_std - 0.5 * z * z
}

/// Closed-form KL(q ‖ p) per step (summed over channels) and in total.
pub fn gaussian_kl(q: &GaussianSeq, p: &GaussianSeq) -> Result<StepTotals, MathError> {
    check_same("gaussian_kl", q.shape(), p.shape())?;
    let per_step = (0..q.mean.rows())
        .map(|r| {
            q.mean
                .row(r)
                .iter()
                .zip(q.log_std.row(r))
                .zip(p.mean.row(r).iter().zip(p.log_std.row(r)))
                .map(|((&mq, &lq), (&mp, &lp))| kl_term(mq, lq, mp, lp))
                .sum()
        })
        .collect();
    Ok(StepTotals::from_per_step(per_step))
}

/// Diagonal-Gaussian log density of `x` under `g`, per step and in total.
pub fn gaussian_log_prob(x: &SeqTensor, g: &GaussianSeq) -> Result<StepTotals, MathError> {
    check_same("gaussian_log_prob", x.shape(), g.shape())?;
    let per_step = (0..x.rows())
        .map(|r| {
            x.row(r)
                .iter()
                .zip(g.mean.row(r))
                .zip(g.log_std.row(r))
                .map(|((&v, &m), &l)| log_prob_term(v, m, l))
                .sum()
        })
        .collect();
    Ok(StepTotals::from_per_step(per_step))
}

/// `mean + temperature · std · ε`. Temperature zero returns the mean exactly
/// and consumes no draws.
pub fn gaussian_sample(
    g: &GaussianSeq,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<SeqTensor, MathError> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(MathError::InvalidTemperature(temperature));
    }
    if temperature == 0.0 {
        return Ok(g.mean.clone());
    }
    let data = g
        .mean
        .data()
        .iter()
        .zip(g.log_std.data())
        .map(|(&m, &l)| m + temperature * l.exp() * rng.normal())
        .collect();
    SeqTensor::new(g.mean.rows(), g.mean.cols(), data)
}

/// Monte Carlo estimate of `E_q[log q(z) − log p(z)]` summed over all steps
/// and channels.
pub fn kl_mc_estimate(
    q: &GaussianSeq,
    p: &GaussianSeq,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<McEstimate, MathError> {
    check_same("kl_mc_estimate", q.shape(), p.shape())?;
    if n_samples == 0 {
        return Err(MathError::InvalidSampleCount(n_samples));
    }
    let params: Vec<(f64, f64, f64, f64)> = q
        .mean
        .data()
        .iter()
        .zip(q.log_std.data())
        .zip(p.mean.data().iter().zip(p.log_std.data()))
        .map(|((&mq, &lq), (&mp, &lp))| (mq, lq, mp, (-lp).exp()))
        .collect();
    // Welford accumulation of the per-sample log ratio.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n_samples {
        let mut log_ratio = 0.0;
        for &(mq, lq, mp, inv_sp) in &params {
            let eps = rng.normal();
            let z = mq + lq.exp() * eps;
            let zp = (z - mp) * inv_sp;
            // log q − log p; the ½ln2π terms cancel.
            log_ratio += -lq - 0.5 * eps * eps - inv_sp.ln() + 0.5 * zp * zp;
        }
        let delta = log_ratio - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (log_ratio - mean);
    }
    let std_error = if n_samples > 1 {
        Some((m2 / (n_samples - 1) as f64 / n_samples as f64).sqrt())
    } else {
        None
    };
    Ok(McEstimate {
        estimate: mean,
        std_error,
        n_samples,
    })
}
