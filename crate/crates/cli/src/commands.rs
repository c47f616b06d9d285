//! Command implementations. Each command validates and loads its inputs,
//! does all of its work, and only then writes the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use prosody_priors::ar_prior::{self, ArPriorConfig, ArPriorModel, PriorTrainConfig};
use prosody_priors::corpus::{
    generate_corpus, load_corpus, oracle_nll, save_corpus, save_process, tracks_from_observation,
    Corpus,
};
use prosody_priors::flow::{self, FlowConfig, FlowModel, FlowTrainConfig};
use prosody_priors::fvae::{
    self, FinetuneConfig, FvaeConfig, FvaeModel, FvaeTrainConfig, PriorMode,
};
use prosody_priors::latents::LatentDataset;
use prosody_priors::math::RngStream;
use prosody_priors::metrics::{
    diversity_stddev, expressiveness_stddev, features_from_track, ffe, mcd, render_tables,
    sort_rows, MetricsReport, ModelFamily, PhonemeFeatures,
};
use prosody_priors::pool::parallel_map;
use prosody_priors::sampling::{sample_set, PriorSampler, SampleSet, SampleText};
use prosody_priors::training::{
    smoothed_ends, term_values, write_trace_csv, Checkpoint, ModelError, ModelKind, TraceRow,
};

use crate::artifacts::{pretty_json, Artifacts};
use crate::config::{
    usage, ArPriorRunConfig, EvalConfig, ExtractConfig, FinetuneRunConfig, FlowRunConfig,
    FvaeRunConfig, GenDataConfig, ReportConfig, SampleRunConfig,
};

/// Seed of a named sub-stream of the command's master seed.
fn substream(seed: u64, name: &str) -> u64 {
    RngStream::new(seed).derive_named(name).seed()
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| usage(format!("{flag} is required for this command")))
}

fn read_corpus(path: &Path) -> anyhow::Result<Corpus> {
    load_corpus(path).with_context(|| format!("corpus {}", path.display()))
}

fn read_checkpoint(path: &Path, allowed: &[ModelKind]) -> anyhow::Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))?;
    ckpt.expect_kind(allowed)
        .with_context(|| format!("checkpoint {}", path.display()))?;
    Ok(ckpt)
}

fn write_checkpoint(out: &mut Artifacts, ckpt: &Checkpoint) -> anyhow::Result<()> {
    let id = ckpt.param_checksum(&[]);
    out.bytes("checkpoint.json", "checkpoint", Some(id), &ckpt.to_bytes())
}

fn write_trace(out: &mut Artifacts, trace: &[TraceRow]) -> anyhow::Result<()> {
    out.file("loss.csv", "loss-trace", None, |p| {
        Ok(write_trace_csv(trace, p)?)
    })
}

fn print_trend(trace: &[TraceRow], term: &str) {
    if let Some((start, end)) = smoothed_ends(&term_values(trace, term), 100) {
        println!("{term}: {start:.4} -> {end:.4} (smoothed)");
    }
}

pub fn gen_data(cfg: &GenDataConfig, out_dir: &Path) -> anyhow::Result<()> {
    let (corpus, process) = generate_corpus(&cfg.corpus)?;
    let nll = oracle_nll(&corpus, &process)?;
    let (train, heldout) = corpus.split(cfg.heldout);
    let mut out = Artifacts::create(out_dir, "gen-data", cfg)?;
    let id = Some(corpus.process_checksum.clone());
    out.file("corpus.jsonl", "corpus", id.clone(), |p| {
        Ok(save_corpus(&train, p)?)
    })?;
    if cfg.heldout > 0 {
        out.file("heldout.jsonl", "corpus", id.clone(), |p| {
            Ok(save_corpus(&heldout, p)?)
        })?;
    }
    out.file("process.json", "process", id, |p| {
        Ok(save_process(&process, p)?)
    })?;
    out.finish()?;
    println!(
        "{} training and {} held-out utterances; oracle NLL {:.4} nats/dim",
        train.utterances.len(),
        heldout.utterances.len(),
        nll.per_dim
    );
    Ok(())
}

pub fn train_vae(
    cfg: &FvaeRunConfig,
    corpus_path: &Option<PathBuf>,
    prior: PriorMode,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let corpus_path = required(corpus_path, "--corpus")?;
    let corpus = read_corpus(corpus_path)?;
    let model_cfg = FvaeConfig {
        embed_dim: cfg.embed_dim,
        text_hidden: cfg.text_hidden,
        enc_hidden: cfg.enc_hidden,
        dec_hidden: cfg.dec_hidden,
        prior_hidden: cfg.prior_hidden,
        ..FvaeConfig::for_corpus(&corpus.config, cfg.latent_dim, prior)
    };
    let mut model = FvaeModel::new(model_cfg, substream(cfg.seed, "init"))?;
    let train_cfg = FvaeTrainConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        beta: cfg.beta,
        warmup_fraction: cfg.warmup_fraction,
        seed: substream(cfg.seed, "train"),
        clip_norm: cfg.clip_norm,
    };
    let trace = fvae::train(&mut model, &corpus, &train_cfg)?;
    let mse = fvae::reconstruction_mse(&model, &corpus)?;
    let ckpt = model.checkpoint(&RngStream::new(cfg.seed));

    let kind = model.kind().as_str();
    let mut out = Artifacts::create(out_dir, &format!("train {kind}"), cfg)?;
    out.input("corpus", corpus_path)?;
    write_checkpoint(&mut out, &ckpt)?;
    write_trace(&mut out, &trace)?;
    out.finish()?;
    print_trend(&trace, "loss");
    println!("posterior reconstruction MSE {mse:.5}");
    Ok(())
}

fn read_latents(path: &Path) -> anyhow::Result<LatentDataset> {
    LatentDataset::load(path).with_context(|| format!("latents {}", path.display()))
}

pub fn train_ar_prior(
    cfg: &ArPriorRunConfig,
    latents_path: &Option<PathBuf>,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let latents_path = required(latents_path, "--latents")?;
    let data = read_latents(latents_path)?;
    let model_cfg = ArPriorConfig {
        hidden: cfg.hidden,
        dur_hidden: cfg.dur_hidden,
        ..ArPriorConfig::new(data.latent_dim, data.context_dim)
    };
    let mut model = ArPriorModel::new(model_cfg, substream(cfg.seed, "init"))?;
    let train_cfg = PriorTrainConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: substream(cfg.seed, "train"),
        clip_norm: cfg.clip_norm,
        teacher: cfg.teacher,
    };
    let trace = ar_prior::train_posthoc(&mut model, &data, &train_cfg)?;
    let nll = ar_prior::nll_per_dim(&model.store, &model.net, &data)?;
    let ckpt = model.checkpoint(&RngStream::new(cfg.seed));

    let mut out = Artifacts::create(out_dir, "train ar-prior", cfg)?;
    out.input("latents", latents_path)?;
    write_checkpoint(&mut out, &ckpt)?;
    write_trace(&mut out, &trace)?;
    out.finish()?;
    print_trend(&trace, "kl");
    println!("NLL of posterior means {:.4} nats/dim", nll.per_dim);
    Ok(())
}

pub fn train_flow(
    cfg: &FlowRunConfig,
    latents_path: &Option<PathBuf>,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let latents_path = required(latents_path, "--latents")?;
    let data = read_latents(latents_path)?;
    let model_cfg = FlowConfig {
        blocks: cfg.blocks,
        coupling_hidden: cfg.coupling_hidden,
        base_hidden: cfg.base_hidden,
        linear_init: cfg.linear_init,
        ..FlowConfig::new(data.latent_dim, data.context_dim, cfg.include_duration)
    };
    let mut model = FlowModel::new(model_cfg, substream(cfg.seed, "init"))?;
    let train_cfg = FlowTrainConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: substream(cfg.seed, "train"),
        clip_norm: cfg.clip_norm,
    };
    let trace = flow::train_flow(&mut model, &data, &train_cfg)?;
    let nll = flow::nll_per_dim(&model, &data, substream(cfg.seed, "eval"))?;
    let ckpt = model.checkpoint(&RngStream::new(cfg.seed));

    let mut out = Artifacts::create(out_dir, "train flow", cfg)?;
    out.input("latents", latents_path)?;
    write_checkpoint(&mut out, &ckpt)?;
    write_trace(&mut out, &trace)?;
    out.finish()?;
    print_trend(&trace, "nll");
    println!("NLL {:.4} nats/dim", nll.per_dim);
    Ok(())
}

pub fn finetune_prior(
    cfg: &FinetuneRunConfig,
    checkpoint: &Option<PathBuf>,
    corpus_path: &Option<PathBuf>,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let ckpt_path = required(checkpoint, "--checkpoint")?;
    let corpus_path = required(corpus_path, "--corpus")?;
    let ckpt = read_checkpoint(ckpt_path, &[ModelKind::Dvae])?;
    let mut model = FvaeModel::from_checkpoint(&ckpt)?;
    let corpus = read_corpus(corpus_path)?;
    let eval_seed = substream(cfg.seed, "eval");
    let before = fvae::mean_kl(&model, &corpus, eval_seed)?;
    let ft = FinetuneConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: substream(cfg.seed, "train"),
        clip_norm: cfg.clip_norm,
        validation_fraction: cfg.validation_fraction,
        eval_every: cfg.eval_every,
    };
    let trace = fvae::finetune_prior(&mut model, &corpus, &ft)?;
    let after = fvae::mean_kl(&model, &corpus, eval_seed)?;
    let tuned = model.checkpoint(&RngStream::new(cfg.seed));

    let mut out = Artifacts::create(out_dir, "finetune-prior", cfg)?;
    out.input("checkpoint", ckpt_path)?;
    out.input("corpus", corpus_path)?;
    write_checkpoint(&mut out, &tuned)?;
    write_trace(&mut out, &trace)?;
    out.finish()?;
    println!("KL(q||p) on the corpus: {before:.5} -> {after:.5} nats/dim");
    Ok(())
}

pub fn extract_latents(
    cfg: &ExtractConfig,
    checkpoint: &Option<PathBuf>,
    corpus_path: &Option<PathBuf>,
    workers: usize,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let ckpt_path = required(checkpoint, "--checkpoint")?;
    let corpus_path = required(corpus_path, "--corpus")?;
    let ckpt = read_checkpoint(ckpt_path, &[ModelKind::Fvae, ModelKind::Dvae])?;
    let model = FvaeModel::from_checkpoint(&ckpt)?;
    let corpus = read_corpus(corpus_path)?;
    let source = ckpt.param_checksum(&[]);
    let data = fvae::extract_posteriors(&model, &corpus, cfg.seed, &source, workers)?;

    let mut out = Artifacts::create(out_dir, "extract-latents", cfg)?;
    out.input("checkpoint", ckpt_path)?;
    out.input("corpus", corpus_path)?;
    out.file("latents.jsonl", "latents", Some(source), |p| {
        Ok(data.save(p)?)
    })?;
    out.finish()?;
    println!(
        "{} utterances, mean posterior std {:.4}",
        data.len(),
        data.mean_posterior_std()
    );
    Ok(())
}

fn check_prior_dims(
    fvae: &FvaeModel,
    latent_dim: usize,
    context_dim: usize,
) -> Result<(), ModelError> {
    for (what, expected, found) in [
        ("prior latent dim", fvae.config.latent_dim, latent_dim),
        ("prior context dim", fvae.context_dim(), context_dim),
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

pub struct SampleInputs<'a> {
    pub checkpoint: &'a Option<PathBuf>,
    pub fvae: &'a Option<PathBuf>,
    pub corpus: &'a Option<PathBuf>,
}

pub fn sample(
    cfg: &SampleRunConfig,
    inputs: SampleInputs<'_>,
    workers: usize,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let ckpt_path = required(inputs.checkpoint, "--checkpoint")?;
    let corpus_path = required(inputs.corpus, "--corpus")?;
    let ckpt = read_checkpoint(
        ckpt_path,
        &[ModelKind::ArPrior, ModelKind::Flow, ModelKind::Dvae],
    )?;
    let corpus = read_corpus(corpus_path)?;
    let texts: Vec<SampleText> = corpus
        .utterances
        .iter()
        .take(cfg.texts)
        .map(|u| SampleText {
            id: u.id.clone(),
            symbols: u.symbols.clone(),
        })
        .collect();
    if texts.len() < cfg.texts {
        eprintln!(
            "note: corpus has {} utterances, sampling {} texts",
            texts.len(),
            texts.len()
        );
    }

    let decoder_path = match (ckpt.kind, inputs.fvae) {
        (ModelKind::Dvae, None) => ckpt_path,
        (ModelKind::Dvae, Some(_)) => {
            return Err(usage("--fvae does not apply to a dvae checkpoint"))
        }
        (_, other) => required(other, "--fvae")?,
    };
    let decoder_ckpt = if ckpt.kind == ModelKind::Dvae {
        ckpt.clone()
    } else {
        read_checkpoint(decoder_path, &[ModelKind::Fvae, ModelKind::Dvae])?
    };
    let decoder = FvaeModel::from_checkpoint(&decoder_ckpt)?;
    decoder.check_corpus(&corpus.config)?;
    let n_cep = corpus.config.n_cep;
    let run = |prior: PriorSampler<'_>| {
        sample_set(
            &decoder,
            prior,
            &texts,
            &cfg.temperatures,
            cfg.resamples,
            n_cep,
            cfg.seed,
            workers,
        )
    };
    let set = match ckpt.kind {
        ModelKind::ArPrior => {
            let m = ArPriorModel::from_checkpoint(&ckpt)?;
            check_prior_dims(&decoder, m.config.latent_dim, m.config.context_dim)?;
            run(PriorSampler::Ar(&m))?
        }
        ModelKind::Flow => {
            let m = FlowModel::from_checkpoint(&ckpt)?;
            check_prior_dims(&decoder, m.config.latent_dim, m.config.context_dim)?;
            run(PriorSampler::Flow(&m))?
        }
        _ => run(PriorSampler::Dvae)?,
    };

    let mut out = Artifacts::create(out_dir, "sample", cfg)?;
    out.input("checkpoint", ckpt_path)?;
    if decoder_path != ckpt_path {
        out.input("fvae", decoder_path)?;
    }
    out.input("corpus", corpus_path)?;
    out.file("samples.jsonl", "samples", None, |p| Ok(set.save(p)?))?;
    out.finish()?;
    println!(
        "{} draws: {} texts x {} temperatures x {} resamples",
        set.records.len(),
        texts.len(),
        cfg.temperatures.len(),
        cfg.resamples
    );
    Ok(())
}

fn family_of(kind: ModelKind) -> (&'static str, ModelFamily) {
    match kind {
        ModelKind::Fvae | ModelKind::ArPrior => ("FVAE", ModelFamily::Fvae),
        ModelKind::Dvae => ("DVAE", ModelFamily::Dvae),
        ModelKind::Flow => ("Flow", ModelFamily::Flow),
    }
}

/// Sample files named directly, or every `*.jsonl` file inside a directory.
fn sample_files(paths: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("cannot list {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            if found.is_empty() {
                bail!("no sample files (*.jsonl) in {}", p.display());
            }
            found.sort();
            files.extend(found);
        } else if p.exists() {
            files.push(p.clone());
        } else {
            bail!("missing sample file {}", p.display());
        }
    }
    Ok(files)
}

fn load_sample_sets(paths: &[PathBuf]) -> anyhow::Result<Vec<(PathBuf, SampleSet)>> {
    sample_files(paths)?
        .into_iter()
        .map(|f| {
            let set = SampleSet::load(&f).with_context(|| format!("samples {}", f.display()))?;
            Ok((f, set))
        })
        .collect()
}

fn sample_row(cfg: &EvalConfig, set: &SampleSet, temperature: f64) -> MetricsReport {
    let (name, family) = family_of(set.model);
    let mut row = MetricsReport::new(cfg.name.as_deref().unwrap_or(name), family);
    row.dim = Some(set.latent_dim);
    row.temperature = Some(temperature);
    row
}

fn grouped_features(set: &SampleSet, t: f64) -> anyhow::Result<Vec<Vec<Vec<PhonemeFeatures>>>> {
    set.by_text(t)
        .iter()
        .map(|g| g.iter().map(|r| Ok(r.features()?)).collect())
        .collect()
}

pub struct EvalInputs<'a> {
    pub checkpoint: &'a Option<PathBuf>,
    pub corpus: &'a Option<PathBuf>,
    pub samples: &'a [PathBuf],
}

pub fn eval_recon(
    cfg: &EvalConfig,
    inputs: EvalInputs<'_>,
    workers: usize,
    out_dir: &Path,
) -> anyhow::Result<()> {
    if !inputs.samples.is_empty() {
        return Err(usage("--samples does not apply to eval recon"));
    }
    let ckpt_path = required(inputs.checkpoint, "--checkpoint")?;
    let corpus_path = required(inputs.corpus, "--corpus")?;
    let ckpt = read_checkpoint(ckpt_path, &[ModelKind::Fvae, ModelKind::Dvae])?;
    let model = FvaeModel::from_checkpoint(&ckpt)?;
    let corpus = read_corpus(corpus_path)?;
    model.check_corpus(&corpus.config)?;
    let n_cep = corpus.config.n_cep;
    let scores = parallel_map(&corpus.utterances, workers, |_, u| {
        let x = model.reconstruct(u)?;
        let track = tracks_from_observation(&x, n_cep)?;
        Ok::<_, anyhow::Error>((mcd(&u.tracks, &track)?, ffe(&u.tracks, &track)?))
    })
    .into_iter()
    .collect::<anyhow::Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    let (name, family) = family_of(model.kind());
    let mut row = MetricsReport::new(cfg.name.as_deref().unwrap_or(name), family);
    row.dim = Some(model.config.latent_dim);
    row.mcd_db = Some(scores.iter().map(|s| s.0).sum::<f64>() / n);
    row.ffe_pct = Some(scores.iter().map(|s| s.1).sum::<f64>() / n);
    row.n_utterances = scores.len();

    let mut out = Artifacts::create(out_dir, "eval recon", cfg)?;
    out.input("checkpoint", ckpt_path)?;
    out.input("corpus", corpus_path)?;
    write_metrics(out, "metrics", vec![row])
}

pub fn eval_express(
    cfg: &EvalConfig,
    inputs: EvalInputs<'_>,
    out_dir: &Path,
) -> anyhow::Result<()> {
    if inputs.checkpoint.is_some() {
        return Err(usage("--checkpoint does not apply to eval express"));
    }
    if inputs.samples.is_empty() && inputs.corpus.is_none() {
        return Err(usage("eval express needs --samples and/or --corpus"));
    }
    let mut rows = Vec::new();
    let corpus = inputs.corpus.as_deref().map(read_corpus).transpose()?;
    if let Some(c) = &corpus {
        let utts = c
            .utterances
            .iter()
            .map(|u| {
                Ok((
                    u.symbols.clone(),
                    features_from_track(&u.tracks, &u.durations)?,
                ))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let mut row = MetricsReport::new(
            cfg.name.as_deref().unwrap_or("Real"),
            ModelFamily::GroundTruth,
        );
        row.expressiveness = Some(expressiveness_stddev(&utts)?);
        row.n_utterances = utts.len();
        rows.push(row);
    }
    let sets = load_sample_sets(inputs.samples)?;
    for (_, set) in &sets {
        for &t in &set.temperatures {
            let utts = set
                .records
                .iter()
                .filter(|r| r.temperature.to_bits() == t.to_bits())
                .map(|r| Ok((r.symbols.clone(), r.features()?)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let mut row = sample_row(cfg, set, t);
            row.expressiveness = Some(expressiveness_stddev(&utts)?);
            row.n_utterances = utts.len();
            rows.push(row);
        }
    }

    let mut out = Artifacts::create(out_dir, "eval express", cfg)?;
    if let Some(p) = inputs.corpus {
        out.input("corpus", p)?;
    }
    for (p, _) in &sets {
        out.input("samples", p)?;
    }
    write_metrics(out, "metrics", rows)
}

pub fn eval_diversity(
    cfg: &EvalConfig,
    inputs: EvalInputs<'_>,
    out_dir: &Path,
) -> anyhow::Result<()> {
    if inputs.checkpoint.is_some() || inputs.corpus.is_some() {
        return Err(usage("eval diversity takes only --samples"));
    }
    if inputs.samples.is_empty() {
        return Err(usage("--samples is required for eval diversity"));
    }
    let sets = load_sample_sets(inputs.samples)?;
    let mut rows = Vec::new();
    for (_, set) in &sets {
        for &t in &set.temperatures {
            let texts = grouped_features(set, t)?;
            let mut row = sample_row(cfg, set, t);
            row.diversity = Some(diversity_stddev(&texts)?);
            row.n_texts = texts.len();
            row.n_resamples = set.n_resamples;
            row.n_utterances = texts.iter().map(Vec::len).sum();
            rows.push(row);
        }
    }

    let mut out = Artifacts::create(out_dir, "eval diversity", cfg)?;
    for (p, _) in &sets {
        out.input("samples", p)?;
    }
    write_metrics(out, "metrics", rows)
}

fn write_metrics(
    mut out: Artifacts,
    stem: &str,
    mut rows: Vec<MetricsReport>,
) -> anyhow::Result<()> {
    sort_rows(&mut rows);
    if let Some(bad) = rows.iter().find(|r| !r.is_valid()) {
        bail!("metrics for {} are not finite and non-negative", bad.model);
    }
    let (md, csv) = render_tables(&rows);
    out.bytes(
        &format!("{stem}.json"),
        "metrics",
        None,
        &pretty_json(&rows),
    )?;
    out.bytes(&format!("{stem}.md"), "table", None, md.as_bytes())?;
    out.bytes(&format!("{stem}.csv"), "table", None, csv.as_bytes())?;
    out.finish()?;
    for r in &rows {
        println!("{}", summary_line(r));
    }
    Ok(())
}

fn summary_line(r: &MetricsReport) -> String {
    let mut line = r.model.clone();
    if let Some(d) = r.dim {
        line.push_str(&format!(" D={d}"));
    }
    if let Some(t) = r.temperature {
        line.push_str(&format!(" T={t}"));
    }
    if let (Some(m), Some(f)) = (r.mcd_db, r.ffe_pct) {
        line.push_str(&format!(" MCD {m:.3} dB, FFE {f:.2}%"));
    }
    for (label, s) in [
        ("expressiveness", r.expressiveness),
        ("diversity", r.diversity),
    ] {
        if let Some(s) = s {
            line.push_str(&format!(
                " {label} E {:.4} F0 {:.4} Dur {:.4}",
                s.energy, s.f0, s.duration
            ));
        }
    }
    line
}

fn same_row(a: &MetricsReport, b: &MetricsReport) -> bool {
    a.model == b.model
        && a.family == b.family
        && a.dim == b.dim
        && a.temperature.map(f64::to_bits) == b.temperature.map(f64::to_bits)
}

fn merge_field<T: PartialEq + Copy>(
    into: &mut Option<T>,
    from: Option<T>,
    row: &str,
) -> anyhow::Result<()> {
    match (*into, from) {
        (Some(a), Some(b)) if a != b => bail!("conflicting values for row {row}"),
        (None, Some(b)) => *into = Some(b),
        _ => {}
    }
    Ok(())
}

/// Rows describing the same system are merged into one.
fn merge_rows(rows: Vec<MetricsReport>) -> anyhow::Result<Vec<MetricsReport>> {
    let mut merged: Vec<MetricsReport> = Vec::new();
    for r in rows {
        match merged.iter_mut().find(|m| same_row(m, &r)) {
            None => merged.push(r),
            Some(m) => {
                let label = r.model.clone();
                merge_field(&mut m.mcd_db, r.mcd_db, &label)?;
                merge_field(&mut m.ffe_pct, r.ffe_pct, &label)?;
                merge_field(&mut m.expressiveness, r.expressiveness, &label)?;
                merge_field(&mut m.diversity, r.diversity, &label)?;
                m.n_utterances = m.n_utterances.max(r.n_utterances);
                m.n_texts = m.n_texts.max(r.n_texts);
                m.n_resamples = m.n_resamples.max(r.n_resamples);
            }
        }
    }
    Ok(merged)
}

pub fn report(cfg: &ReportConfig, inputs: &[PathBuf], out_dir: &Path) -> anyhow::Result<()> {
    if inputs.is_empty() {
        return Err(usage("report needs at least one --input"));
    }
    let mut files = Vec::new();
    let mut rows = Vec::new();
    for p in inputs {
        let file = if p.is_dir() {
            p.join("metrics.json")
        } else {
            p.clone()
        };
        let bytes =
            fs::read(&file).with_context(|| format!("missing metrics file {}", file.display()))?;
        let part: Vec<MetricsReport> = serde_json::from_slice(&bytes)
            .with_context(|| format!("metrics file {}", file.display()))?;
        rows.extend(part);
        files.push(file);
    }
    if rows.is_empty() {
        bail!("the metrics inputs contain no rows");
    }
    let rows = merge_rows(rows)?;
    let mut out = Artifacts::create(out_dir, "report", cfg)?;
    for f in &files {
        out.input("metrics", f)?;
    }
    write_metrics(out, "report", rows)
}
