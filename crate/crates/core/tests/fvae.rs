//! FVAE / DVAE objectives, gradients, freezing and persistence.

use prosody_priors::autodiff::gradcheck::{check_gradients, GradCheckConfig};
use prosody_priors::autodiff::Graph;
use prosody_priors::corpus::{generate_corpus, Corpus, CorpusConfig};
use prosody_priors::fvae::{
    extract_posteriors, finetune_prior, mean_kl, reconstruction_mse, train, FinetuneConfig,
    FvaeBatch, FvaeConfig, FvaeModel, FvaeTrainConfig, PriorMode,
};
use prosody_priors::math::{gaussian_kl, GaussianSeq, RngStream, SeqTensor, HALF_LN_2PI};
use prosody_priors::training::{smoothed_ends, term_values, ModelError, ModelKind};

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

fn small_config(corpus: &Corpus, d: usize, prior: PriorMode) -> FvaeConfig {
    FvaeConfig {
        embed_dim: 4,
        text_hidden: 5,
        enc_hidden: 6,
        dec_hidden: 6,
        prior_hidden: 5,
        ..FvaeConfig::for_corpus(&corpus.config, d, prior)
    }
}

/// Gives zero-initialized parameters small random values.
fn activate(model: &mut FvaeModel, seed: u64) {
    let mut rng = RngStream::new(seed);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        if model.store.value(id).data().iter().all(|&v| v == 0.0) {
            for v in model.store.value_mut(id).data_mut() {
                *v = 0.1 * rng.normal();
            }
        }
    }
}

#[test]
fn kl_vanishes_when_posterior_equals_prior() {
    let c = corpus(3);
    let mut m = FvaeModel::new(small_config(&c, 3, PriorMode::StandardNormal), 0).unwrap();
    for name in ["enc.out.w", "enc.out.b"] {
        let id = m.store.id(name).unwrap();
        m.store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let terms = m
        .elbo(&c.utterances[0], 1.0, &mut RngStream::new(1))
        .unwrap();
    assert_eq!(terms.kl, 0.0);
    assert_eq!(terms.total, terms.recon);
}

#[test]
fn elbo_decomposes_into_independent_terms() {
    let c = corpus(3);
    for mode in [PriorMode::StandardNormal, PriorMode::Autoregressive] {
        let mut m = FvaeModel::new(small_config(&c, 3, mode), 2).unwrap();
        activate(&mut m, 3);
        let u = &c.utterances[1];
        let beta = 0.7;
        let terms = m.elbo(u, beta, &mut RngStream::new(4)).unwrap();

        let (post, context) = m.posterior(u).unwrap();
        let eps = RngStream::new(4).normals(u.len() * 3);
        let z = SeqTensor::new(
            u.len(),
            3,
            (0..eps.len())
                .map(|i| post.mean().data()[i] + post.log_std().data()[i].exp() * eps[i])
                .collect(),
        )
        .unwrap();
        let x_hat = m.decode_latents(&u.symbols, &z, &u.durations).unwrap();
        let se: f64 = x_hat
            .data()
            .iter()
            .zip(u.observation.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let recon = -0.5 * se - HALF_LN_2PI * u.observation.len() as f64;
        let prior = match &m.prior {
            None => GaussianSeq::standard(u.len(), 3),
            Some(net) => net.prior_forward(&m.store, &context, &z).unwrap(),
        };
        let kl = gaussian_kl(&post, &prior).unwrap().total;

        assert!(
            (terms.recon - recon).abs() < 1e-9 * recon.abs().max(1.0),
            "{mode:?}"
        );
        assert!(
            (terms.kl - kl).abs() < 1e-10 * kl.abs().max(1.0),
            "{mode:?}"
        );
        assert!((terms.total - (recon - beta * kl)).abs() < 1e-9 * recon.abs().max(1.0));
        assert!((terms.kl_per_step - kl / u.len() as f64).abs() < 1e-12 * kl.abs().max(1.0));
    }
}

#[test]
fn fresh_dvae_reduces_to_fvae() {
    let c = corpus(3);
    let f = FvaeModel::new(small_config(&c, 3, PriorMode::StandardNormal), 5).unwrap();
    let mut d = f.clone();
    d.convert_to_autoregressive(6).unwrap();
    assert_eq!(d.kind(), ModelKind::Dvae);
    for u in &c.utterances {
        let a = f.elbo(u, 1.0, &mut RngStream::new(7)).unwrap();
        let b = d.elbo(u, 1.0, &mut RngStream::new(7)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn elbo_gradients_match_finite_differences() {
    let c = corpus(3);
    for mode in [PriorMode::StandardNormal, PriorMode::Autoregressive] {
        let mut m = FvaeModel::new(small_config(&c, 3, mode), 8).unwrap();
        activate(&mut m, 9);
        let batch = FvaeBatch::from_corpus(&c, &[0, 2]).unwrap();
        let n = batch.layout.total();
        let eps = SeqTensor::new(n, 3, RngStream::new(10).normals(n * 3)).unwrap();
        let mut store = m.store.clone();
        let report = check_gradients::<ModelError, _>(
            &mut store,
            &GradCheckConfig::default(),
            |g: &mut Graph, s| {
                let mut local = m.clone();
                local.store = s.clone();
                let v = local.forward(g, &batch, Some(&eps))?;
                Ok(g.sub(v.kl, v.recon)?)
            },
        )
        .unwrap();
        assert!(report.passes(), "{mode:?}: {report:?}");
    }
}

#[test]
fn beta_warmup_is_linear() {
    let cfg = FvaeTrainConfig {
        steps: 100,
        beta: 0.5,
        warmup_fraction: 0.1,
        ..Default::default()
    };
    assert_eq!(cfg.beta_at(1), 0.05);
    assert_eq!(cfg.beta_at(5), 0.25);
    assert_eq!(cfg.beta_at(10), 0.5);
    assert_eq!(cfg.beta_at(80), 0.5);
    let none = FvaeTrainConfig {
        warmup_fraction: 0.0,
        ..cfg
    };
    assert_eq!(none.beta_at(1), 0.5);
}

#[test]
fn training_lowers_loss_and_is_deterministic() {
    let c = corpus(24);
    let cfg = FvaeTrainConfig {
        steps: 120,
        batch_size: 6,
        lr: 5e-3,
        ..Default::default()
    };
    let run = || {
        let mut m = FvaeModel::new(small_config(&c, 3, PriorMode::StandardNormal), 0).unwrap();
        let before = reconstruction_mse(&m, &c).unwrap();
        let trace = train(&mut m, &c, &cfg).unwrap();
        (m, before, trace)
    };
    let (m, before, trace) = run();
    let loss = term_values(&trace, "loss");
    let (first, last) = smoothed_ends(&loss, 15).unwrap();
    assert!(last < first, "{first} -> {last}");
    assert!(reconstruction_mse(&m, &c).unwrap() < before);
    assert_eq!(term_values(&trace, "beta")[11], 1.0);
    let (m2, _, trace2) = run();
    assert_eq!(trace, trace2);
    let rng = RngStream::new(0);
    assert_eq!(
        m.checkpoint(&rng).to_bytes(),
        m2.checkpoint(&rng).to_bytes()
    );
}

#[test]
fn finetune_touches_only_the_prior_and_lowers_kl() {
    let c = corpus(24);
    let mut m = FvaeModel::new(small_config(&c, 3, PriorMode::Autoregressive), 1).unwrap();
    let train_c = c.clone();
    let tc = FvaeTrainConfig {
        steps: 60,
        batch_size: 6,
        lr: 5e-3,
        ..Default::default()
    };
    train(&mut m, &train_c, &tc).unwrap();
    let rng = RngStream::new(0);
    let before = m.checkpoint(&rng);
    let kl_before = mean_kl(&m, &train_c, 3).unwrap();
    let trace = finetune_prior(
        &mut m,
        &train_c,
        &FinetuneConfig {
            steps: 80,
            batch_size: 6,
            lr: 5e-3,
            validation_fraction: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(term_values(&trace, "kl").len(), 80);
    let after = m.checkpoint(&rng);
    for (name, p) in &before.params {
        let q = &after.params[name];
        if name.starts_with("prior.") {
            continue;
        }
        assert_eq!(p, q, "{name} changed");
    }
    assert_ne!(
        before.param_checksum(&["prior."]),
        after.param_checksum(&["prior."])
    );
    assert!(m.store.ids().all(|id| !m.store.is_frozen(id)));
    assert!(mean_kl(&m, &train_c, 3).unwrap() < kl_before);

    let mut f = FvaeModel::new(small_config(&c, 3, PriorMode::StandardNormal), 1).unwrap();
    assert!(matches!(
        finetune_prior(&mut f, &train_c, &FinetuneConfig::default()),
        Err(ModelError::MissingPrior)
    ));
}

#[test]
fn finetune_keeps_the_prior_with_lowest_validation_kl() {
    let c = corpus(24);
    let mut m = FvaeModel::new(small_config(&c, 3, PriorMode::Autoregressive), 1).unwrap();
    train(
        &mut m,
        &c,
        &FvaeTrainConfig {
            steps: 60,
            batch_size: 6,
            lr: 5e-3,
            ..Default::default()
        },
    )
    .unwrap();
    let cfg = FinetuneConfig {
        steps: 60,
        batch_size: 6,
        lr: 5e-3,
        seed: 4,
        validation_fraction: 0.25,
        eval_every: 10,
        ..Default::default()
    };
    let (_, val) = c.split(6);
    let val_seed = RngStream::new(4).derive_named("validation").seed();
    let start = mean_kl(&m, &val, val_seed).unwrap();
    let trace = finetune_prior(&mut m, &c, &cfg).unwrap();
    let vals = term_values(&trace, "val_kl");
    assert_eq!(vals.len(), 6);
    let best = vals.iter().copied().fold(start, f64::min);
    assert_eq!(mean_kl(&m, &val, val_seed).unwrap(), best);

    let bad = FinetuneConfig {
        validation_fraction: 1.0,
        ..cfg
    };
    assert!(matches!(
        finetune_prior(&mut m, &c, &bad),
        Err(ModelError::InvalidConfig(_))
    ));
}

#[test]
fn extraction_is_deterministic_and_consistent() {
    let c = corpus(5);
    let mut m = FvaeModel::new(small_config(&c, 3, PriorMode::StandardNormal), 2).unwrap();
    activate(&mut m, 4);
    let a = extract_posteriors(&m, &c, 7, "test", 1).unwrap();
    let b = extract_posteriors(&m, &c, 7, "test", 3).unwrap();
    let other = extract_posteriors(&m, &c, 8, "test", 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.context_dim, 5);
    for ((r, o), u) in a.records.iter().zip(&other.records).zip(&c.utterances) {
        assert_eq!(r.means, o.means);
        assert_ne!(r.sample, o.sample);
        let (post, context) = m.posterior(u).unwrap();
        assert_eq!(&r.means, post.mean());
        assert_eq!(r.context, context);
        assert_eq!(r.context, m.context_of(&u.symbols).unwrap());
        assert_eq!(r.durations, u.durations);
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let c = corpus(3);
    for mode in [PriorMode::StandardNormal, PriorMode::Autoregressive] {
        let mut m = FvaeModel::new(small_config(&c, 3, mode), 3).unwrap();
        activate(&mut m, 5);
        let ckpt = m.checkpoint(&RngStream::new(1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ckpt.save(&path).unwrap();
        let back =
            FvaeModel::from_checkpoint(&prosody_priors::training::Checkpoint::load(&path).unwrap())
                .unwrap();
        assert_eq!(back.kind(), m.kind());
        for u in &c.utterances {
            assert_eq!(back.reconstruct(u).unwrap(), m.reconstruct(u).unwrap());
            assert_eq!(
                back.elbo(u, 1.0, &mut RngStream::new(2)).unwrap(),
                m.elbo(u, 1.0, &mut RngStream::new(2)).unwrap()
            );
        }
    }
}

#[test]
fn mismatches_are_reported() {
    let c = corpus(3);
    let m = FvaeModel::new(small_config(&c, 3, PriorMode::StandardNormal), 0).unwrap();
    let other = generate_corpus(&CorpusConfig {
        n_utterances: 2,
        ..CorpusConfig::default()
    })
    .unwrap()
    .0;
    assert!(matches!(
        train(&mut m.clone(), &other, &FvaeTrainConfig::default()),
        Err(ModelError::DimensionMismatch { .. })
    ));
    assert!(matches!(
        m.context_of(&[0, 10]),
        Err(ModelError::DimensionMismatch { found: 10, .. })
    ));
    let u = &c.utterances[0];
    assert!(matches!(
        m.decode_latents(&u.symbols, &SeqTensor::zeros(u.len(), 2), &u.durations),
        Err(ModelError::DimensionMismatch {
            expected: 3,
            found: 2,
            ..
        })
    ));
    assert!(matches!(
        m.decode_latents(&u.symbols, &SeqTensor::zeros(u.len() + 1, 3), &u.durations),
        Err(ModelError::StepMismatch { .. })
    ));
    let mut bad = small_config(&c, 3, PriorMode::StandardNormal);
    bad.latent_dim = 0;
    assert!(matches!(
        FvaeModel::new(bad, 0),
        Err(ModelError::InvalidConfig(_))
    ));
    let flow =
        prosody_priors::flow::FlowModel::new(prosody_priors::flow::FlowConfig::new(3, 2, false), 0)
            .unwrap()
            .checkpoint(&RngStream::new(0));
    assert!(matches!(
        FvaeModel::from_checkpoint(&flow),
        Err(ModelError::WrongKind { .. })
    ));
}
