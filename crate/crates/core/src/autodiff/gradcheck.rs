//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The oracle only ever evaluates the forward pass, so it stays independent
//! of every backward rule it checks.

use super::{AutodiffError, Graph, ParamStore, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor in `|a − n| / max(|a|, |n|, floor)`.
    pub rel_floor: f64,
    /// Coordinates checked per parameter (evenly strided when larger).
    pub max_coords_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_floor: 1e-6,
            max_coords_per_param: 64,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub coords: usize,
    /// Coordinates with relative error ≤ 1e-4.
    pub within_tight: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn fraction_within(&self) -> f64 {
        if self.coords == 0 {
            1.0
        } else {
            self.within_tight as f64 / self.coords as f64
        }
    }

    /// ≥ 95% of coordinates within 1e-4 and none above 1e-3.
    pub fn passes(&self) -> bool {
        self.coords > 0 && self.fraction_within() >= 0.95 && self.max_rel_err <= 1e-3
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.coords += other.coords;
        self.within_tight += other.within_tight;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients of every unfrozen parameter against
/// central differences of `loss`.
pub fn check_gradients<E, F>(
    store: &mut ParamStore,
    cfg: &GradCheckConfig,
    mut loss: F,
) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?;
    grads.accumulate_into(store);

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
    for id in ids {
        let analytic = store.grad(id);
        let n = analytic.len();
        let stride = n.div_ceil(cfg.max_coords_per_param).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + cfg.step;
            let mut gp = Graph::new();
            let vp = loss(&mut gp, store)?;
            let lp = gp.scalar(vp);
            store.value_mut(id).data_mut()[i] = orig - cfg.step;
            let mut gm = Graph::new();
            let vm = loss(&mut gm, store)?;
            let lm = gm.scalar(vm);
            store.value_mut(id).data_mut()[i] = orig;

            let numeric = (lp - lm) / (2.0 * cfg.step);
            let err = relative_error(analytic.data()[i], numeric, cfg.rel_floor);
            report.coords += 1;
            if err <= 1e-4 {
                report.within_tight += 1;
            }
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = format!(
                        "{}[{i}]: analytic {:.6e} numeric {:.6e}",
                        store.name(id),
                        analytic.data()[i],
                        numeric
                    );
                }
            }
        }
    }
    store.zero_grads();
    Ok(report)
}
