//! Autoregressive prior: causality, sampling consistency and training.

use prosody_priors::ar_prior::{
    batch_kl, mean_kl, nll_per_dim, train_posthoc, ArPriorConfig, ArPriorModel, PriorTrainConfig,
    TeacherInput,
};
use prosody_priors::autodiff::gradcheck::{check_gradients, GradCheckConfig};
use prosody_priors::corpus::{generate_corpus, CorpusConfig};
use prosody_priors::latents::{LatentBatch, LatentDataset, LatentRecord};
use prosody_priors::math::{log_prob_term, RngStream, SeqTensor};
use prosody_priors::training::{smoothed_ends, term_values, ModelError};

fn random(rows: usize, cols: usize, rng: &mut RngStream) -> SeqTensor {
    SeqTensor::new(rows, cols, rng.normals(rows * cols)).unwrap()
}

fn perturbed(d: usize, c: usize, seed: u64) -> ArPriorModel {
    let mut cfg = ArPriorConfig::new(d, c);
    cfg.hidden = 8;
    cfg.dur_hidden = 4;
    let mut m = ArPriorModel::new(cfg, seed).unwrap();
    let mut rng = RngStream::new(seed + 1);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        for v in m.store.value_mut(id).data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    m
}

/// Random-init blocks stay as initialized; zero-initialized parameters
/// (heads, biases, `z0`) get small random values so every path carries
/// gradient.
fn activated(d: usize, c: usize, seed: u64) -> ArPriorModel {
    let mut cfg = ArPriorConfig::new(d, c);
    cfg.hidden = 8;
    cfg.dur_hidden = 4;
    let mut m = ArPriorModel::new(cfg, seed).unwrap();
    let mut rng = RngStream::new(seed + 1);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        if m.store.value(id).data().iter().all(|&v| v == 0.0) {
            for v in m.store.value_mut(id).data_mut() {
                *v = 0.1 * rng.normal();
            }
        }
    }
    m
}

fn dataset(n: usize) -> LatentDataset {
    let cfg = CorpusConfig {
        n_utterances: n,
        latent_dim: 3,
        vocab_size: 10,
        ..CorpusConfig::default()
    };
    LatentDataset::from_oracle(&generate_corpus(&cfg).unwrap().0)
}

#[test]
fn fresh_prior_is_standard_normal() {
    let m = ArPriorModel::new(ArPriorConfig::new(4, 3), 0).unwrap();
    let mut rng = RngStream::new(1);
    let p = m
        .net
        .prior_forward(&m.store, &random(6, 3, &mut rng), &random(6, 4, &mut rng))
        .unwrap();
    assert!(p.mean().data().iter().all(|&v| v == 0.0));
    assert!(p.log_std().data().iter().all(|&v| v == 0.0));
}

#[test]
fn prior_is_causal_in_teacher_and_context() {
    let m = perturbed(3, 2, 2);
    let mut rng = RngStream::new(3);
    let c = random(7, 2, &mut rng);
    let t = random(7, 3, &mut rng);
    let base = m.net.prior_forward(&m.store, &c, &t).unwrap();
    for k in 0..7 {
        let mut t2 = t.clone();
        t2.set(k, 1, t.get(k, 1) + 1.0);
        let p = m.net.prior_forward(&m.store, &c, &t2).unwrap();
        let mut c2 = c.clone();
        c2.set(k, 0, c.get(k, 0) + 1.0);
        let q = m.net.prior_forward(&m.store, &c2, &t).unwrap();
        for n in 0..7 {
            let same_t = p.mean().row(n) == base.mean().row(n)
                && p.log_std().row(n) == base.log_std().row(n);
            let same_c = q.mean().row(n) == base.mean().row(n)
                && q.log_std().row(n) == base.log_std().row(n);
            assert_eq!(same_t, n <= k, "teacher change at {k} seen at {n}");
            assert_eq!(same_c, n < k, "context change at {k} seen at {n}");
        }
    }
}

#[test]
fn sampling_agrees_with_teacher_forced_prior() {
    let m = perturbed(3, 2, 4);
    let c = random(6, 2, &mut RngStream::new(5));
    let (mean_rollout, _) = m
        .net
        .sample(&m.store, &c, 0.0, &mut RngStream::new(0))
        .unwrap();
    let p = m.net.prior_forward(&m.store, &c, &mean_rollout).unwrap();
    assert!(p.mean().max_abs_diff(&mean_rollout).unwrap() < 1e-12);

    let t = 0.7;
    let (z, durations) = m
        .net
        .sample(&m.store, &c, t, &mut RngStream::new(6))
        .unwrap();
    assert_eq!(durations.len(), 6);
    assert!(durations.iter().all(|&d| d >= 1));
    let p = m.net.prior_forward(&m.store, &c, &z).unwrap();
    let mut draws = RngStream::new(6);
    for i in 0..z.len() {
        let eps = draws.normal();
        let want = p.mean().data()[i] + t * p.log_std().data()[i].exp() * eps;
        assert!((z.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn sample_spread_grows_with_temperature() {
    let m = perturbed(2, 2, 7);
    let c = random(5, 2, &mut RngStream::new(8));
    let spread = |t: f64| {
        let mut rng = RngStream::new(9);
        let draws: Vec<SeqTensor> = (0..200)
            .map(|_| m.net.sample(&m.store, &c, t, &mut rng).unwrap().0)
            .collect();
        let mut total = 0.0;
        for i in 0..draws[0].len() {
            let mean = draws.iter().map(|d| d.data()[i]).sum::<f64>() / 200.0;
            total += (draws
                .iter()
                .map(|d| (d.data()[i] - mean).powi(2))
                .sum::<f64>()
                / 199.0)
                .sqrt();
        }
        total
    };
    let (a, b, c3) = (spread(0.33), spread(0.5), spread(0.8));
    assert!(spread(0.0) < 1e-12);
    assert!(0.0 < a && a < b && b < c3, "{a} {b} {c3}");
}

#[test]
fn kl_and_duration_gradients_match_finite_differences() {
    let m = activated(3, 10, 10);
    let data = dataset(4);
    // six steps over two utterances, with broad posteriors
    let mut rng = RngStream::new(14);
    let records: Vec<LatentRecord> = data.records[..2]
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.symbols.truncate(3);
            r.durations.truncate(3);
            r.means = r.means.slice_rows(0, 3).unwrap();
            r.sample = r.sample.slice_rows(0, 3).unwrap();
            r.context = r.context.slice_rows(0, 3).unwrap();
            r.stds = SeqTensor::new(3, 3, (0..9).map(|_| 0.3 + rng.uniform()).collect()).unwrap();
            r
        })
        .collect();
    let small = LatentBatch::new(&records.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(small.layout.total(), 6);
    let teacher = small.draw(&mut RngStream::new(11));
    let mut store = m.store.clone();
    let report =
        check_gradients::<ModelError, _>(&mut store, &GradCheckConfig::default(), |g, s| {
            let kl = batch_kl(g, s, &m.net, &small, teacher.clone())?;
            let c = g.constant(small.context.clone());
            let dur = m.net.duration.loss(g, s, c, &small.durations)?;
            Ok(g.add(kl, dur)?)
        })
        .unwrap();
    assert!(report.passes(), "{report:?}");
}

#[test]
fn nll_matches_brute_force() {
    let m = perturbed(3, 10, 12);
    let data = dataset(5);
    let est = nll_per_dim(&m.store, &m.net, &data).unwrap();
    let mut total = 0.0;
    let mut count = 0.0;
    for r in &data.records {
        let p = m.net.prior_forward(&m.store, &r.context, &r.means).unwrap();
        for n in 0..r.means.rows() {
            for j in 0..3 {
                total -=
                    log_prob_term(r.means.get(n, j), p.mean().get(n, j), p.log_std().get(n, j));
                count += 1.0;
            }
        }
    }
    assert!((est.per_dim - total / count).abs() < 1e-12);
}

#[test]
fn training_is_deterministic_and_lowers_kl() {
    let data = dataset(40);
    let (train, held) = data.split(8);
    let mut cfg = ArPriorConfig::new(3, data.context_dim);
    cfg.hidden = 16;
    let run = |teacher| {
        let mut m = ArPriorModel::new(cfg.clone(), 0).unwrap();
        let before = mean_kl(&m.store, &m.net, &held, 1).unwrap();
        let tc = PriorTrainConfig {
            steps: 150,
            batch_size: 8,
            teacher,
            ..Default::default()
        };
        let trace = train_posthoc(&mut m, &train, &tc).unwrap();
        (m, before, trace)
    };
    let (m, before, trace) = run(TeacherInput::Samples);
    let kl = term_values(&trace, "kl");
    let (first, last) = smoothed_ends(&kl, 20).unwrap();
    assert!(last < first);
    let dur = term_values(&trace, "dur_mse");
    let (df, dl) = smoothed_ends(&dur, 20).unwrap();
    assert!(dl < df);
    assert!(mean_kl(&m.store, &m.net, &held, 1).unwrap() < before);

    let (m2, _, trace2) = run(TeacherInput::Samples);
    assert_eq!(trace, trace2);
    let rng = RngStream::new(5);
    assert_eq!(
        m.checkpoint(&rng).to_bytes(),
        m2.checkpoint(&rng).to_bytes()
    );
    let (m3, _, _) = run(TeacherInput::Means);
    assert_ne!(
        m.checkpoint(&rng).param_checksum(&[]),
        m3.checkpoint(&rng).param_checksum(&[])
    );

    let back = ArPriorModel::from_checkpoint(&m.checkpoint(&rng)).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(
        nll_per_dim(&back.store, &back.net, &held).unwrap(),
        nll_per_dim(&m.store, &m.net, &held).unwrap()
    );
}

#[test]
fn errors_are_reported() {
    let m = perturbed(3, 2, 13);
    let c = SeqTensor::zeros(4, 2);
    for bad in [-0.1, f64::INFINITY, f64::NAN] {
        assert!(matches!(
            m.net.sample(&m.store, &c, bad, &mut RngStream::new(0)),
            Err(ModelError::InvalidTemperature(_))
        ));
    }
    assert!(matches!(
        m.net.sample(
            &m.store,
            &SeqTensor::zeros(4, 5),
            0.5,
            &mut RngStream::new(0)
        ),
        Err(ModelError::DimensionMismatch {
            expected: 2,
            found: 5,
            ..
        })
    ));
    assert!(matches!(
        m.net.prior_forward(&m.store, &c, &SeqTensor::zeros(3, 3)),
        Err(ModelError::StepMismatch {
            context: 4,
            latents: 3
        })
    ));
    assert!(matches!(
        m.net.prior_forward(&m.store, &c, &SeqTensor::zeros(4, 2)),
        Err(ModelError::DimensionMismatch {
            expected: 3,
            found: 2,
            ..
        })
    ));
    let mut wrong = m.clone();
    assert!(matches!(
        train_posthoc(&mut wrong, &dataset(3), &PriorTrainConfig::default()),
        Err(ModelError::DimensionMismatch { .. })
    ));
    assert!(matches!(
        train_posthoc(
            &mut wrong,
            &dataset(3),
            &PriorTrainConfig {
                steps: 0,
                ..Default::default()
            }
        ),
        Err(ModelError::InvalidConfig(_))
    ));
    let flow_ckpt =
        prosody_priors::flow::FlowModel::new(prosody_priors::flow::FlowConfig::new(3, 2, false), 0)
            .unwrap()
            .checkpoint(&RngStream::new(0));
    assert!(matches!(
        ArPriorModel::from_checkpoint(&flow_ckpt),
        Err(ModelError::WrongKind { .. })
    ));
}
