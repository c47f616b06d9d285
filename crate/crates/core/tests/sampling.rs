//! Latent datasets and prior sample sets: persistence and reproducibility.

use prosody_priors::ar_prior::{ArPriorConfig, ArPriorModel};
use prosody_priors::corpus::{generate_corpus, Corpus, CorpusConfig, CorpusError};
use prosody_priors::flow::{FlowConfig, FlowModel};
use prosody_priors::fvae::{extract_posteriors, FvaeConfig, FvaeModel, PriorMode};
use prosody_priors::latents::{LatentDataset, ORACLE_STD};
use prosody_priors::sampling::{sample_set, PriorSampler, SampleSet, SampleText};
use prosody_priors::training::{ModelError, ModelKind};

fn corpus(n: usize) -> Corpus {
    let cfg = CorpusConfig {
        n_utterances: n,
        vocab_size: 10,
        obs_dim: 20,
        n_cep: 8,
        latent_dim: 4,
        min_len: 4,
        max_len: 8,
        max_duration: 6,
        ..CorpusConfig::default()
    };
    generate_corpus(&cfg).unwrap().0
}

fn fvae(c: &Corpus, prior: PriorMode) -> FvaeModel {
    let cfg = FvaeConfig {
        embed_dim: 4,
        text_hidden: 5,
        enc_hidden: 6,
        dec_hidden: 6,
        prior_hidden: 5,
        ..FvaeConfig::for_corpus(&c.config, 3, prior)
    };
    FvaeModel::new(cfg, 0).unwrap()
}

fn texts(c: &Corpus) -> Vec<SampleText> {
    c.utterances
        .iter()
        .map(|u| SampleText {
            id: u.id.clone(),
            symbols: u.symbols.clone(),
        })
        .collect()
}

#[test]
fn latent_datasets_round_trip() {
    let c = corpus(4);
    let dir = tempfile::tempdir().unwrap();
    let oracle = LatentDataset::from_oracle(&c);
    assert!(oracle
        .records
        .iter()
        .all(|r| r.stds.data().iter().all(|&s| s == ORACLE_STD)));
    let path = dir.path().join("oracle.jsonl");
    oracle.save(&path).unwrap();
    assert_eq!(LatentDataset::load(&path).unwrap(), oracle);

    let post = extract_posteriors(&fvae(&c, PriorMode::StandardNormal), &c, 1, "m", 2).unwrap();
    post.save(&path).unwrap();
    assert_eq!(LatentDataset::load(&path).unwrap(), post);

    let (a, b) = post.split(1);
    assert_eq!((a.len(), b.len()), (3, 1));
    assert_eq!(a.total_steps() + b.total_steps(), post.total_steps());
}

#[test]
fn latent_files_reject_other_kinds() {
    let c = corpus(2);
    let m = fvae(&c, PriorMode::StandardNormal);
    let set = sample_set(
        &m,
        PriorSampler::Ar(&ArPriorModel::new(ArPriorConfig::new(3, 5), 0).unwrap()),
        &texts(&c),
        &[0.5],
        1,
        c.config.n_cep,
        0,
        1,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    set.save(&path).unwrap();
    assert!(matches!(
        LatentDataset::load(&path),
        Err(CorpusError::Malformed { .. })
    ));
}

#[test]
fn sample_sets_are_reproducible_and_independent_of_workers() {
    let c = corpus(5);
    let m = fvae(&c, PriorMode::StandardNormal);
    let ctx = m.context_of(&c.utterances[0].symbols).unwrap().cols();
    let flow = FlowModel::new(FlowConfig::new(3, ctx, true), 2).unwrap();
    let t = texts(&c);
    let temps = [0.33, 0.8];
    let run = |texts: &[SampleText], workers| {
        sample_set(
            &m,
            PriorSampler::Flow(&flow),
            texts,
            &temps,
            3,
            c.config.n_cep,
            9,
            workers,
        )
        .unwrap()
    };
    let one = run(&t, 1);
    assert_eq!(one.model, ModelKind::Flow);
    assert_eq!(one.records.len(), 2 * 5 * 3);
    assert_eq!(one, run(&t, 4));

    let prefix = run(&t[..2], 3);
    for temp in temps {
        assert_eq!(prefix.by_text(temp)[..], one.by_text(temp)[..2]);
    }
    let groups = one.by_text(0.8);
    assert_eq!(groups.len(), 5);
    assert!(groups.iter().all(|g| g.len() == 3));
    assert_ne!(groups[0][0].latents, groups[0][1].latents);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.jsonl");
    one.save(&path).unwrap();
    assert_eq!(SampleSet::load(&path).unwrap(), one);
    for r in &one.records {
        let f = r.features().unwrap();
        assert_eq!(f.len(), r.symbols.len());
    }
}

#[test]
fn zero_temperature_resamples_coincide() {
    let c = corpus(2);
    let m = fvae(&c, PriorMode::Autoregressive);
    let set = sample_set(
        &m,
        PriorSampler::Dvae,
        &texts(&c),
        &[0.0],
        4,
        c.config.n_cep,
        1,
        2,
    )
    .unwrap();
    for g in set.by_text(0.0) {
        assert!(g.iter().all(|r| r.latents == g[0].latents));
        assert!(g.iter().all(|r| r.track == g[0].track));
    }
}

#[test]
fn sampling_errors_are_reported() {
    let c = corpus(2);
    let m = fvae(&c, PriorMode::StandardNormal);
    let t = texts(&c);
    let n_cep = c.config.n_cep;
    assert!(matches!(
        sample_set(&m, PriorSampler::Dvae, &t, &[0.5], 1, n_cep, 0, 1),
        Err(ModelError::MissingPrior)
    ));
    let no_dur = FlowModel::new(FlowConfig::new(3, 5, false), 0).unwrap();
    assert!(matches!(
        sample_set(&m, PriorSampler::Flow(&no_dur), &t, &[0.5], 1, n_cep, 0, 1),
        Err(ModelError::InvalidConfig(_))
    ));
    let ar = ArPriorModel::new(ArPriorConfig::new(3, 5), 0).unwrap();
    assert!(matches!(
        sample_set(&m, PriorSampler::Ar(&ar), &t, &[-1.0], 1, n_cep, 0, 1),
        Err(ModelError::InvalidTemperature(_))
    ));
    assert!(matches!(
        sample_set(&m, PriorSampler::Ar(&ar), &[], &[0.5], 1, n_cep, 0, 1),
        Err(ModelError::InvalidConfig(_))
    ));
}
