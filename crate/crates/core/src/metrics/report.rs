use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::ProsodyStd;

/// Row groups of the report, in display order within a latent dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    /// Reference tracks of the corpus itself.
    GroundTruth,
    /// FVAE with a post-hoc autoregressive prior.
    Fvae,
    /// DVAE with its jointly trained (optionally fine-tuned) prior.
    Dvae,
    Flow,
}

/// One evaluated system. Sections that were not evaluated stay `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub family: ModelFamily,
    pub dim: Option<usize>,
    pub temperature: Option<f64>,
    pub mcd_db: Option<f64>,
    pub ffe_pct: Option<f64>,
    pub expressiveness: Option<ProsodyStd>,
    pub diversity: Option<ProsodyStd>,
    pub n_utterances: usize,
    pub n_texts: usize,
    pub n_resamples: usize,
    /// Always "population".
    pub stddev: String,
}

impl MetricsReport {
    pub fn new(model: impl Into<String>, family: ModelFamily) -> Self {
        Self {
            model: model.into(),
            family,
            dim: None,
            temperature: None,
            mcd_db: None,
            ffe_pct: None,
            expressiveness: None,
            diversity: None,
            n_utterances: 0,
            n_texts: 0,
            n_resamples: 0,
            stddev: "population".into(),
        }
    }

    /// Every reported number is finite and non-negative.
    pub fn is_valid(&self) -> bool {
        let mut values: Vec<f64> = [self.mcd_db, self.ffe_pct].into_iter().flatten().collect();
        for s in [self.expressiveness, self.diversity].into_iter().flatten() {
            values.extend(s.as_array());
        }
        values.iter().all(|v| v.is_finite() && *v >= 0.0)
    }

    fn sort_key(&self) -> (u8, usize, ModelFamily, u64, String) {
        let group = u8::from(self.family != ModelFamily::GroundTruth);
        (
            group,
            self.dim.unwrap_or(0),
            self.family,
            self.temperature.map_or(0, f64::to_bits),
            self.model.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Reconstruction,
    Expressiveness,
    Diversity,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

fn label(r: &MetricsReport) -> String {
    match r.temperature {
        Some(t) => format!("{} std {t}", r.model),
        None => r.model.clone(),
    }
}

/// Sorts rows into display order: ground truth first, then per latent
/// dimension FVAE, DVAE and flow rows by increasing temperature.
pub fn sort_rows(rows: &mut [MetricsReport]) {
    rows.sort_by_key(|a| a.sort_key());
}

/// Markdown tables (one per section with data) and a single CSV.
pub fn render_tables(rows: &[MetricsReport]) -> (String, String) {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let mut md = String::new();
    for kind in [
        TableKind::Reconstruction,
        TableKind::Expressiveness,
        TableKind::Diversity,
    ] {
        let selected: Vec<&MetricsReport> = rows
            .iter()
            .filter(|r| match kind {
                TableKind::Reconstruction => r.mcd_db.is_some() || r.ffe_pct.is_some(),
                TableKind::Expressiveness => r.expressiveness.is_some(),
                TableKind::Diversity => r.diversity.is_some(),
            })
            .collect();
        if selected.is_empty() {
            continue;
        }
        match kind {
            TableKind::Reconstruction => {
                md.push_str("## Reconstruction (lower is better)\n\n| latent dim | model | MCD | FFE |\n|---|---|---|---|\n");
                for r in selected {
                    let dim = r.dim.map_or_else(String::new, |d| d.to_string());
                    let _ = writeln!(
                        md,
                        "| {dim} | {} | {} | {} |",
                        r.model,
                        fmt_opt(r.mcd_db),
                        fmt_opt(r.ffe_pct)
                    );
                }
            }
            TableKind::Expressiveness | TableKind::Diversity => {
                let (title, pick): (&str, fn(&MetricsReport) -> Option<ProsodyStd>) =
                    if kind == TableKind::Expressiveness {
                        ("Expressiveness", |r| r.expressiveness)
                    } else {
                        ("Diversity", |r| r.diversity)
                    };
                let _ = write!(
                    md,
                    "## {title} (prosody stddev)\n\n| model | E | F0 | Dur |\n|---|---|---|---|\n"
                );
                for r in selected {
                    let s = pick(r).expect("filtered");
                    let _ = writeln!(
                        md,
                        "| {} | {:.4} | {:.4} | {:.4} |",
                        label(r),
                        s.energy,
                        s.f0,
                        s.duration
                    );
                }
            }
        }
        md.push('\n');
    }

    let mut csv = String::from(
        "model,family,dim,temperature,mcd_db,ffe_pct,expr_e,expr_f0,expr_dur,div_e,div_f0,div_dur\n",
    );
    for r in &rows {
        let family = serde_json::to_value(r.family)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let triple = |s: Option<ProsodyStd>| match s {
            Some(s) => format!("{:.6},{:.6},{:.6}", s.energy, s.f0, s.duration),
            None => ",,".to_string(),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.model,
            family,
            r.dim.map_or_else(String::new, |d| d.to_string()),
            r.temperature.map_or_else(String::new, |t| t.to_string()),
            fmt_opt(r.mcd_db),
            fmt_opt(r.ffe_pct),
            triple(r.expressiveness),
            triple(r.diversity)
        );
    }
    (md, csv)
}
