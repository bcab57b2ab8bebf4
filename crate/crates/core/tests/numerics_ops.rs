use anysat_core::numerics::{eval_op, grad_check, GradCheckOptions, Graph, Op, ParamStore, Tensor, Var};
use anysat_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Grad-checks `f` where parameters `x0, x1, ...` have the given shapes.
fn check(shapes: &[&[usize]], lo: f64, hi: f64, seed: u64, mut f: impl FnMut(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.insert(format!("x{i}"), rand_tensor(&mut rng, s, lo, hi)).unwrap();
    }
    let n = shapes.len();
    let report = grad_check(
        &mut store,
        |g| {
            let xs: Vec<Var> = (0..n).map(|i| g.param(&format!("x{i}")).unwrap()).collect();
            let y = f(g, &xs)?;
            let shape = g.shape(y).to_vec();
            // Fixed random projection so every output coordinate matters.
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let w = g.constant(rand_tensor(&mut r, &shape, -1.0, 1.0));
            let z = g.mul(y, w)?;
            g.sum_all(z)
        },
        1e-5,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "flagged {:?}", &report.flagged[..report.flagged.len().min(5)]);
    report.max_rel_error
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    let out = eval_op(&Op::MatMul, &[&Tensor::eye(3), &a]).unwrap();
    assert_eq!(out, a);
}

#[test]
fn softmax_uniform() {
    let out = eval_op(&Op::Softmax(0), &[&Tensor::from_vec(vec![0.0; 4])]).unwrap();
    assert_eq!(out.data(), &[0.25; 4]);
}

#[test]
fn cosine_scale_invariant() {
    let v = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
    let out = eval_op(&Op::CosineSimilarity(0), &[&v, &v.map(|x| 2.0 * x)]).unwrap();
    assert!((out.item() - 1.0).abs() < 1e-15);
}

#[test]
fn shape_errors_name_the_op() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let err = eval_op(&Op::MatMul, &[&a, &b]).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let err = eval_op(&Op::Softmax(2), &[&a]).unwrap_err().to_string();
    assert!(err.contains("axis 2"), "{err}");
}

#[test]
fn backward_of_sum_of_squares() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
    let mut g = Graph::new(&store, true);
    let p = g.param("p").unwrap();
    let sq = g.mul(p, p).unwrap();
    let root = g.sum_all(sq).unwrap();
    let grads = g.backward(root).unwrap();
    drop(g);
    store.zero_grad();
    store.accumulate(&grads, 1.0);
    assert_eq!(store.by_name("p").unwrap().grad.as_ref().unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn constant_root_gives_zero_grads() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let mut g = Graph::new(&store, true);
    let _p = g.param("p").unwrap();
    let c = g.constant(Tensor::scalar(3.0));
    let root = g.exp(c).unwrap();
    let grads = g.backward(root).unwrap();
    drop(g);
    store.zero_grad();
    store.accumulate(&grads, 1.0);
    assert_eq!(store.by_name("p").unwrap().grad.as_ref().unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_root_rejected() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, true);
    let c = g.constant(Tensor::zeros(&[2]));
    assert!(g.backward(c).is_err());
}

#[test]
fn grad_elementwise_broadcast() {
    check(&[&[2, 3, 4], &[3, 1]], -1.0, 1.0, 1, |g, x| g.add(x[0], x[1]));
    check(&[&[2, 3, 4], &[4]], -1.0, 1.0, 2, |g, x| g.sub(x[0], x[1]));
    check(&[&[2, 1, 4], &[3, 1]], -1.0, 1.0, 3, |g, x| g.mul(x[0], x[1]));
    check(&[&[3, 4], &[3, 4]], 0.5, 2.0, 4, |g, x| g.div(x[0], x[1]));
    check(&[&[3, 4]], -1.0, 1.0, 5, |g, x| g.scale(x[0], -2.5));
}

#[test]
fn grad_matmul_variants() {
    check(&[&[2, 3, 4], &[4, 5]], -1.0, 1.0, 10, |g, x| g.matmul(x[0], x[1]));
    check(&[&[2, 3, 4], &[2, 4, 5]], -1.0, 1.0, 11, |g, x| g.matmul(x[0], x[1]));
}

#[test]
fn grad_shape_ops() {
    check(&[&[2, 3, 4]], -1.0, 1.0, 20, |g, x| g.transpose(x[0]));
    check(&[&[2, 3, 4]], -1.0, 1.0, 21, |g, x| g.permute(x[0], &[2, 0, 1]));
    check(&[&[2, 3, 4]], -1.0, 1.0, 22, |g, x| g.reshape(x[0], &[6, 4]));
    check(&[&[2, 3], &[2, 5]], -1.0, 1.0, 23, |g, x| g.concat(&[x[0], x[1]], 1));
    check(&[&[4, 5]], -1.0, 1.0, 24, |g, x| g.slice(x[0], 1, 1, 4));
    check(&[&[4, 3]], -1.0, 1.0, 25, |g, x| g.index_select(x[0], &[3, 0, 3, 1]));
}

#[test]
fn grad_reductions() {
    check(&[&[3, 4, 2]], -1.0, 1.0, 30, |g, x| g.sum(x[0], 1));
    check(&[&[3, 4, 2]], -1.0, 1.0, 31, |g, x| g.mean(x[0], 0));
    check(&[&[3, 4]], -1.0, 1.0, 32, |g, x| g.mean_all(x[0]));
    check(&[&[3, 4, 2]], -2.0, 2.0, 33, |g, x| g.softmax(x[0], 1));
    check(&[&[3, 5]], -2.0, 2.0, 34, |g, x| g.log_softmax(x[0], 1));
    check(&[&[3, 6]], -2.0, 2.0, 35, |g, x| g.layer_norm(x[0], 1));
    check(&[&[3, 4]], -2.0, 2.0, 36, |g, x| g.l2_norm(x[0], 1));
    check(&[&[3, 4], &[3, 4]], -2.0, 2.0, 37, |g, x| g.cosine_similarity(x[0], x[1], 1));
}

#[test]
fn grad_pointwise() {
    check(&[&[3, 4]], -3.0, 3.0, 40, |g, x| g.gelu(x[0]));
    check(&[&[3, 4]], -3.0, 3.0, 41, |g, x| g.sin(x[0]));
    check(&[&[3, 4]], -2.0, 2.0, 42, |g, x| g.exp(x[0]));
    check(&[&[3, 4]], 0.2, 3.0, 43, |g, x| g.log(x[0]));
    check(&[&[3, 4]], 0.2, 3.0, 44, |g, x| g.sqrt(x[0]));
    check(&[&[3, 4]], -4.0, 4.0, 45, |g, x| g.sigmoid(x[0]));
    check(&[&[3, 4]], -4.0, 4.0, 46, |g, x| g.softplus(x[0]));
}

#[test]
fn grad_pad_channels() {
    check(&[&[2, 3, 2], &[]], -1.0, 1.0, 50, |g, x| g.pad_channels(x[0], x[1], &[0, 2], 4));
}

#[test]
fn linear_function_is_exact() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::from_vec(vec![0.3, -0.7, 1.1, 2.0])).unwrap();
    let w = Tensor::from_vec(vec![0.5, -1.5, 0.25, 1.0]);
    let report = grad_check(
        &mut store,
        |g| {
            let p = g.param("p")?;
            let w = g.constant(w.clone());
            let z = g.mul(p, w)?;
            g.sum_all(z)
        },
        1e-5,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-10, "{}", report.max_rel_error);
}

#[test]
fn wrong_gradient_is_flagged() {
    use anysat_core::numerics::{analytic_grads, compare_grads};
    let mut store = ParamStore::new();
    store.insert("p", Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
    let mut f = |g: &mut Graph| {
        let p = g.param("p")?;
        let sq = g.mul(p, p)?;
        g.sum_all(sq)
    };
    let mut grads = analytic_grads(&store, &mut f).unwrap();
    grads.get_mut("p").unwrap().data_mut()[1] += 0.5;
    let report = compare_grads(&mut store, &grads, f, 1e-5, &GradCheckOptions::default()).unwrap();
    assert_eq!(report.flagged.len(), 1);
    assert_eq!(report.flagged[0].1, 1);
    assert_eq!(report.worst, Some(("p".into(), 1)));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-15.0f64..15.0, 12)) {
        let t = Tensor::new(vec![3, 4], v).unwrap();
        let s = eval_op(&Op::Softmax(1), &[&t]).unwrap();
        for r in 0..3 {
            let row = s.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn layer_norm_standardises(v in proptest::collection::vec(-10.0f64..10.0, 16)) {
        let t = Tensor::new(vec![2, 8], v).unwrap();
        prop_assume!((0..2).all(|r| {
            let row = t.row(r);
            let mu = row.iter().sum::<f64>() / 8.0;
            row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 8.0 > 0.1
        }));
        let y = eval_op(&Op::LayerNorm { axis: 1, eps: anysat_core::numerics::ops::LAYER_NORM_EPS }, &[&t]).unwrap();
        for r in 0..2 {
            let row = y.row(r);
            let mu = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mu.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn pad_channels_preserves_present(v in proptest::collection::vec(-5.0f64..5.0, 9), pad in -3.0f64..3.0) {
        let x = Tensor::new(vec![3, 3], v).unwrap();
        let y = eval_op(&Op::PadChannels { present: vec![0, 1, 3], expected: 4 }, &[&x, &Tensor::scalar(pad)]).unwrap();
        for r in 0..3 {
            prop_assert_eq!(y.row(r)[0].to_bits(), x.row(r)[0].to_bits());
            prop_assert_eq!(y.row(r)[1].to_bits(), x.row(r)[1].to_bits());
            prop_assert_eq!(y.row(r)[3].to_bits(), x.row(r)[2].to_bits());
            prop_assert_eq!(y.row(r)[2], pad);
        }
    }

    #[test]
    fn deterministic_eval(v in proptest::collection::vec(-5.0f64..5.0, 12)) {
        let a = Tensor::new(vec![3, 4], v).unwrap();
        let w = Tensor::new(vec![4, 2], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let y1 = eval_op(&Op::MatMul, &[&a, &w]).unwrap();
        let y2 = eval_op(&Op::MatMul, &[&a, &w]).unwrap();
        prop_assert!(y1.data().iter().zip(y2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
