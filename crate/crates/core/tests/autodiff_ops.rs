//! Finite-difference checks for every op in the autodiff op set.

use prosody_priors::autodiff::gradcheck::{check_gradients, GradCheckConfig};
use prosody_priors::autodiff::{AdamConfig, AutodiffError, Graph, ParamStore, Var};
use prosody_priors::math::{RngStream, SeqTensor};
use prosody_priors::nn::{BatchLayout, GruCell};

fn rand_tensor(rows: usize, cols: usize, rng: &mut RngStream) -> SeqTensor {
    SeqTensor::new(rows, cols, rng.normals(rows * cols)).unwrap()
}

/// Contracts an arbitrary-shaped output with fixed random weights so every
/// output element carries a distinct upstream gradient.
fn contract(g: &mut Graph, out: Var, seed: u64) -> Result<Var, AutodiffError> {
    let (r, c) = g.shape(out);
    let w = g.constant(rand_tensor(r, c, &mut RngStream::new(seed)));
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn check<F>(name: &str, shapes: &[(usize, usize)], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut rng = RngStream::new(1234);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            store
                .add(&format!("x{i}"), rand_tensor(r, c, &mut rng))
                .unwrap()
        })
        .collect();
    let report =
        check_gradients::<AutodiffError, _>(&mut store, &GradCheckConfig::default(), |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let out = f(g, &vars)?;
            contract(g, out, 99)
        })
        .unwrap();
    assert!(report.passes(), "{name}: {report:?}");
}

#[test]
fn matmul() {
    check("matmul", &[(3, 4), (4, 2)], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn add_sub_mul() {
    check("add", &[(3, 2), (3, 2)], |g, v| g.add(v[0], v[1]));
    check("sub", &[(3, 2), (3, 2)], |g, v| g.sub(v[0], v[1]));
    check("mul", &[(3, 2), (3, 2)], |g, v| g.mul(v[0], v[1]));
    check("mul_self", &[(3, 2)], |g, v| g.mul(v[0], v[0]));
}

#[test]
fn row_broadcasts() {
    check("add_row", &[(4, 3), (1, 3)], |g, v| g.add_row(v[0], v[1]));
    check("mul_row", &[(4, 3), (1, 3)], |g, v| g.mul_row(v[0], v[1]));
}

#[test]
fn elementwise_unary() {
    check("scale", &[(3, 3)], |g, v| g.scale(v[0], -1.7));
    check("add_scalar", &[(3, 3)], |g, v| g.add_scalar(v[0], 0.4));
    check("tanh", &[(3, 3)], |g, v| g.tanh(v[0]));
    check("sigmoid", &[(3, 3)], |g, v| g.sigmoid(v[0]));
    check("exp", &[(3, 3)], |g, v| g.exp(v[0]));
    check("softplus", &[(3, 3)], |g, v| g.softplus(v[0]));
    check("log", &[(3, 3)], |g, v| {
        let e = g.exp(v[0])?;
        g.log(e)
    });
}

#[test]
fn structural_ops() {
    check("concat_cols", &[(3, 2), (3, 1)], |g, v| {
        g.concat_cols(&[v[0], v[1], v[0]])
    });
    check("slice_cols", &[(3, 5)], |g, v| g.slice_cols(v[0], 1, 4));
    check("concat_rows", &[(2, 3), (1, 3)], |g, v| {
        g.concat_rows(&[v[0], v[1]])
    });
    check("slice_rows", &[(5, 2)], |g, v| g.slice_rows(v[0], 1, 3));
    check("gather_rows", &[(4, 2)], |g, v| {
        g.gather_rows(v[0], &[Some(3), None, Some(0), Some(3)])
    });
    check("segment_mean", &[(6, 2)], |g, v| {
        g.segment_mean(v[0], &[1, 3, 2])
    });
    check("segment_sum", &[(6, 2)], |g, v| {
        g.segment_sum(v[0], &[4, 2])
    });
}

#[test]
fn reductions() {
    check("sum", &[(3, 2)], |g, v| g.sum(v[0]));
    check("mean", &[(3, 2)], |g, v| g.mean(v[0]));
    check("row_sum", &[(3, 2)], |g, v| g.row_sum(v[0]));
    check("squared_error", &[(3, 2), (3, 2)], |g, v| {
        g.squared_error(v[0], v[1])
    });
}

#[test]
fn gaussian_ops() {
    check("gaussian_kl", &[(3, 2), (3, 2), (3, 2), (3, 2)], |g, v| {
        g.gaussian_kl(v[0], v[1], v[2], v[3])
    });
    check("gaussian_log_prob", &[(3, 2), (3, 2), (3, 2)], |g, v| {
        g.gaussian_log_prob(v[0], v[1], v[2])
    });
}

#[test]
fn gru_over_five_steps() {
    let mut rng = RngStream::new(5);
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng).unwrap();
    let x = store.add("x", rand_tensor(5, 3, &mut rng)).unwrap();
    let layout = BatchLayout::new(vec![5]).unwrap();
    let report =
        check_gradients::<AutodiffError, _>(&mut store, &GradCheckConfig::default(), |g, s| {
            let xv = g.param(s, x);
            let h = cell.run(g, s, xv, &layout)?;
            contract(g, h, 7)
        })
        .unwrap();
    assert!(report.passes(), "{report:?}");
}

#[test]
fn tanh_derivative_at_zero_is_one() {
    let mut g = Graph::new();
    let x = g.input(SeqTensor::scalar(0.0));
    let y = g.tanh(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
}

#[test]
fn half_squared_norm_gradient_is_identity() {
    let mut rng = RngStream::new(2);
    let v = rand_tensor(4, 3, &mut rng);
    let mut g = Graph::new();
    let x = g.input(v.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    let grads = g.backward(half).unwrap();
    assert!(grads.get(x).unwrap().max_abs_diff(&v).unwrap() < 1e-15);
}

#[test]
fn kl_gradient_wrt_prior_mean_vanishes_at_match() {
    let mut rng = RngStream::new(3);
    let m = rand_tensor(2, 3, &mut rng);
    let mut g = Graph::new();
    let mq = g.constant(m.clone());
    let lq = g.constant(rand_tensor(2, 3, &mut rng));
    let mp = g.input(m);
    let lp = g.input(rand_tensor(2, 3, &mut rng));
    let kl = g.gaussian_kl(mq, lq, mp, lp).unwrap();
    let total = g.sum(kl).unwrap();
    let grads = g.backward(total).unwrap();
    assert!(grads.get(mp).unwrap().data().iter().all(|&d| d == 0.0));
}

#[test]
fn zero_loss_gives_zero_gradients() {
    let mut g = Graph::new();
    let x = g.input(SeqTensor::filled(2, 2, 3.0));
    let z = g.scale(x, 0.0).unwrap();
    let s = g.sum(z).unwrap();
    assert_eq!(g.scalar(s), 0.0);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&d| d == 0.0));
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::new();
    let x = g.input(SeqTensor::scalar(1.0));
    let y = g.exp(x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.backward(y).unwrap_err(), AutodiffError::DoubleBackward);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.input(SeqTensor::zeros(2, 1));
    assert_eq!(
        g.backward(x).unwrap_err(),
        AutodiffError::NonScalarLoss((2, 1))
    );
}

#[test]
fn non_finite_intermediate_names_the_op() {
    let mut g = Graph::new();
    let x = g.input(SeqTensor::scalar(1000.0));
    match g.exp(x) {
        Err(AutodiffError::NonFinite { op, .. }) => assert_eq!(op, "exp"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
    let z = g.input(SeqTensor::scalar(0.0));
    assert!(matches!(
        g.log(z),
        Err(AutodiffError::NonFinite { op: "log", .. })
    ));
}

#[test]
fn shape_mismatch_is_structured() {
    let mut g = Graph::new();
    let a = g.input(SeqTensor::zeros(2, 3));
    let b = g.input(SeqTensor::zeros(2, 3));
    assert_eq!(
        g.matmul(a, b).unwrap_err(),
        AutodiffError::ShapeMismatch {
            op: "matmul",
            left: (2, 3),
            right: (2, 3)
        }
    );
}

#[test]
fn gradient_accumulation_is_linear() {
    let mut rng = RngStream::new(8);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(3, 2, &mut rng)).unwrap();
    let x = rand_tensor(4, 3, &mut rng);
    let l1 = |g: &mut Graph, s: &ParamStore| -> Var {
        let xv = g.constant(x.clone());
        let wv = g.param(s, w);
        let y = g.matmul(xv, wv).unwrap();
        let t = g.tanh(y).unwrap();
        g.sum(t).unwrap()
    };
    let l2 = |g: &mut Graph, s: &ParamStore| -> Var {
        let wv = g.param(s, w);
        let e = g.exp(wv).unwrap();
        g.mean(e).unwrap()
    };
    let grad_of = |store: &mut ParamStore, f: &dyn Fn(&mut Graph, &ParamStore) -> Var| {
        store.zero_grads();
        let mut g = Graph::new();
        let out = f(&mut g, store);
        g.backward(out).unwrap().accumulate_into(store);
        store.grad(w)
    };
    let (a, b) = (0.7, -2.3);
    let g1 = grad_of(&mut store, &l1);
    let g2 = grad_of(&mut store, &l2);
    let combined = grad_of(&mut store, &|g: &mut Graph, s: &ParamStore| {
        let x1 = l1(g, s);
        let x2 = l2(g, s);
        let s1 = g.scale(x1, a).unwrap();
        let s2 = g.scale(x2, b).unwrap();
        g.add(s1, s2).unwrap()
    });
    for i in 0..combined.len() {
        let expected = a * g1.data()[i] + b * g2.data()[i];
        assert!((combined.data()[i] - expected).abs() < 1e-10);
    }
}

#[test]
fn adam_minimizes_quadratic() {
    let mut store = ParamStore::new();
    let w = store
        .add("w", SeqTensor::new(1, 3, vec![3.0, -2.0, 1.0]).unwrap())
        .unwrap();
    let target = SeqTensor::new(1, 3, vec![0.5, 0.25, -1.0]).unwrap();
    let cfg = AdamConfig::with_lr(0.05);
    for _ in 0..2000 {
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let t = g.constant(target.clone());
        let loss = g.squared_error(wv, t).unwrap();
        g.backward(loss).unwrap().accumulate_into(&mut store);
        store.adam_step(&cfg).unwrap();
    }
    assert!(store.value(w).max_abs_diff(&target).unwrap() < 1e-3);
}
