//! Per-operation gradient checks and tensor-level invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use latent_vqa::gradcheck::{grad_check, GradCheckOptions, TapeObjective};
use latent_vqa::parallel::Execution;
use latent_vqa::params::normal_tensor;
use latent_vqa::{ParamId, ParamStore, Result, Tape, Tensor, Var};

fn opts() -> GradCheckOptions {
    GradCheckOptions {
        tol: 1e-6,
        exec: Execution::Sequential,
        ..Default::default()
    }
}

/// Checks `f` against central differences with every parameter drawn from N(0, 1).
fn check(shapes: &[(usize, usize)], seed: u64, f: impl for<'s> Fn(&mut Tape<'s>, &[Var]) -> Result<Var> + Sync) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| store.add(format!("p{i}"), normal_tensor(r, c, 1.0, &mut rng)))
        .collect();
    let obj = TapeObjective(|tape: &mut Tape| {
        let vars = ids.iter().map(|&id| tape.param(id)).collect::<Result<Vec<_>>>()?;
        f(tape, &vars)
    });
    let report = grad_check(&obj, &store, &ids, opts()).unwrap();
    assert!(report.passed, "max rel err {:.3e}: {:?}", report.max_rel_err, report.params);
}

/// Reduces a matrix to a scalar with fixed, uneven weights so every entry matters.
fn reduce(tape: &mut Tape, x: Var) -> Result<Var> {
    let (r, c) = tape.value(x).dims2()?;
    let w = Tensor::matrix(r, c, (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect())?;
    let w = tape.constant(w)?;
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

#[test]
fn matmul_variants() {
    check(&[(3, 4), (4, 2)], 1, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        reduce(t, y)
    });
    check(&[(3, 4), (5, 4)], 2, |t, v| {
        let y = t.matmul_bt(v[0], v[1])?;
        reduce(t, y)
    });
    check(&[(3, 4)], 3, |t, v| {
        let y = t.transpose(v[0])?;
        reduce(t, y)
    });
}

#[test]
fn elementwise() {
    check(&[(2, 3), (2, 3)], 4, |t, v| {
        let a = t.add(v[0], v[1])?;
        let s = t.sub(a, v[1])?;
        let m = t.mul(s, v[1])?;
        let k = t.scale(m, -1.7)?;
        reduce(t, k)
    });
    check(&[(3, 4), (1, 4)], 5, |t, v| {
        let y = t.add_row(v[0], v[1])?;
        reduce(t, y)
    });
    check(&[(3, 1), (1, 5)], 6, |t, v| {
        let y = t.add_outer(v[0], v[1])?;
        reduce(t, y)
    });
}

#[test]
fn activations() {
    check(&[(3, 4)], 7, |t, v| {
        let y = t.gelu(v[0])?;
        reduce(t, y)
    });
    check(&[(3, 4)], 8, |t, v| {
        let y = t.elu(v[0])?;
        reduce(t, y)
    });
    check(&[(3, 4)], 9, |t, v| {
        let y = t.leaky_relu(v[0], 0.2)?;
        reduce(t, y)
    });
    check(&[(3, 5)], 10, |t, v| {
        let y = t.softmax_rows(v[0])?;
        reduce(t, y)
    });
}

#[test]
fn layer_norm() {
    check(&[(3, 5), (1, 5), (1, 5)], 11, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        reduce(t, y)
    });
}

#[test]
fn structural() {
    check(&[(2, 3), (3, 3)], 12, |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        reduce(t, y)
    });
    check(&[(2, 3), (2, 2)], 13, |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        reduce(t, y)
    });
    check(&[(3, 6)], 14, |t, v| {
        let y = t.slice_cols(v[0], 2, 3)?;
        reduce(t, y)
    });
    check(&[(4, 3)], 15, |t, v| {
        let y = t.mean_rows(v[0], Some(&[true, false, true, true]))?;
        reduce(t, y)
    });
    check(&[(5, 3)], 16, |t, v| {
        let y = t.embedding(v[0], &[4, 0, 4, 2])?;
        reduce(t, y)
    });
}

#[test]
fn losses() {
    check(&[(1, 6)], 17, |t, v| t.bce_with_logits(v[0], &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]));
    check(&[(2, 3), (2, 3)], 18, |t, v| t.cosine_similarity(v[0], v[1]));
}

#[test]
fn reused_node_accumulates() {
    check(&[(3, 3)], 19, |t, v| {
        let sq = t.matmul(v[0], v[0])?;
        let y = t.mul(sq, v[0])?;
        reduce(t, y)
    });
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::row_vector(vec![1.0, 2.0]).unwrap()).unwrap();
    let x = tape.input(Tensor::row_vector(vec![3.0, -1.0]).unwrap()).unwrap();
    let y = tape.mul(c, x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::row_vector(vec![1.0, 2.0]).unwrap()).unwrap();
    assert!(tape.backward(x).is_err());
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::zeros(2, 3)).unwrap();
    let b = tape.input(Tensor::zeros(2, 3)).unwrap();
    assert!(tape.matmul(a, b).is_err());
    let r = tape.input(Tensor::zeros(1, 4)).unwrap();
    assert!(tape.add(a, r).is_err());
}

#[test]
fn non_finite_inputs_are_refused() {
    let mut tape = Tape::new();
    assert!(tape.input(Tensor::row_vector(vec![f64::NAN]).unwrap()).is_err());
    assert!(tape.constant(Tensor::row_vector(vec![f64::INFINITY]).unwrap()).is_err());
}

fn matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f64..50.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix(5, 7)) {
        let mut tape = Tape::new();
        let v = tape.constant(x).unwrap();
        let s = tape.softmax_rows(v).unwrap();
        let s = tape.value(s);
        for i in 0..s.rows() {
            let row = s.row(i);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_row_shift(x in matrix(4, 6), shift in -100.0f64..100.0) {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone()).unwrap();
        let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + shift).collect()).unwrap();
        let b = tape.constant(shifted).unwrap();
        let sa = tape.softmax_rows(a).unwrap();
        let sb = tape.softmax_rows(b).unwrap();
        prop_assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes(x in matrix(4, 8)) {
        prop_assume!(x.cols() >= 2);
        let spread = (0..x.rows()).all(|i| {
            let r = x.row(i);
            r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - r.iter().cloned().fold(f64::INFINITY, f64::min) > 1e-3
        });
        prop_assume!(spread);
        let mut tape = Tape::new();
        let c = x.cols();
        let v = tape.constant(x).unwrap();
        let g = tape.constant(Tensor::full(1, c, 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(1, c)).unwrap();
        let y = tape.layer_norm(v, g, b).unwrap();
        let y = tape.value(y);
        for i in 0..y.rows() {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / c as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!(var <= 1.0 + 1e-12 && var > 0.5);
        }
    }

    #[test]
    fn matmul_matches_naive(a in matrix(4, 5), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = normal_tensor(a.cols(), 3, 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        for i in 0..a.rows() {
            for j in 0..3 {
                let want: f64 = (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum();
                prop_assert!((got.get(i, j) - want).abs() <= 1e-9 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn gradient_of_sum_is_ones(x in matrix(3, 4)) {
        let mut tape = Tape::new();
        let v = tape.input(x.clone()).unwrap();
        let s = tape.sum(v).unwrap();
        tape.backward(s).unwrap();
        prop_assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 1.0));
    }
}
