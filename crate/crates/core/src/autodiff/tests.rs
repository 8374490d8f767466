use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn idx(v: &[usize]) -> Index {
    Arc::from(v)
}

/// Finite-difference check of `build` with respect to every input. Non-scalar
/// outputs are reduced against a fixed random matrix so no coordinate cancels.
fn check_op<F>(inputs: Vec<Matrix<f64>>, build: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut store = ParamStore::new();
    for (i, m) in inputs.into_iter().enumerate() {
        store.insert(format!("in{i}"), m).unwrap();
    }
    let probe = std::cell::RefCell::new(None::<Matrix<f64>>);
    grad_check(&mut store, 1e-6, 1e-4, |tape, store| {
        let vars = tape.bind(store)?;
        let ins: Vec<Var> = (0..store.len()).map(|i| vars.get(&format!("in{i}")).unwrap()).collect();
        let out = build(tape, &ins)?;
        let (r, c) = tape.value(out).shape();
        if (r, c) == (1, 1) {
            return Ok(out);
        }
        let weights = probe
            .borrow_mut()
            .get_or_insert_with(|| rand_matrix(&mut ChaCha8Rng::seed_from_u64(99), r, c))
            .clone();
        let w = tape.constant(weights)?;
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    })
    .unwrap()
}

fn assert_passes(report: GradCheckReport) {
    assert!(report.passed(), "gradient check failed: {:?}", report.failures);
    assert!(report.checked > 0);
}

#[test]
fn matmul_values_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
    let x = Matrix::from_rows(&[vec![0.3, -2.0], vec![5.0, 7.5]]);
    let xv = tape.constant(x.clone()).unwrap();
    let p = tape.matmul(eye, xv).unwrap();
    assert_eq!(tape.value(p), &x);

    let a = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0]])).unwrap();
    let b = tape.constant(Matrix::from_rows(&[vec![3.0], vec![4.0]])).unwrap();
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.scalar(ab), 11.0);

    let bad = tape.matmul(a, a);
    assert!(matches!(bad, Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));

    // d sum(AB) / dA = 1 * B^T
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (am, bm) = (rand_matrix(&mut rng, 4, 3), rand_matrix(&mut rng, 3, 2));
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(am).unwrap(), tape.constant(bm.clone()).unwrap());
    let prod = tape.matmul(a, b).unwrap();
    let s = tape.sum(prod).unwrap();
    let grads = tape.gradients(s).unwrap();
    let expected = Matrix::<f64>::filled(4, 2, 1.0).matmul(&bm.transpose());
    assert!(grads.get(a).unwrap().max_abs_diff(&expected) < 1e-14);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert_passes(check_op(vec![rand_matrix(&mut rng, 4, 3), rand_matrix(&mut rng, 3, 2)], |t, v| {
        t.matmul(v[0], v[1])
    }));
}

#[test]
fn gather_rows_forward_and_scatter() {
    let mut tape = Tape::<f64>::new();
    let x = tape
        .constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]))
        .unwrap();
    let g = tape.gather_rows(x, &idx(&[2, 0])).unwrap();
    assert_eq!(tape.value(g).as_slice(), &[5.0, 6.0, 1.0, 2.0]);

    let twice = tape.gather_rows(x, &idx(&[1, 1])).unwrap();
    let s = tape.sum(twice).unwrap();
    let grads = tape.gradients(s).unwrap();
    assert_eq!(grads.get(x).unwrap().as_slice(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);

    assert!(matches!(
        tape.gather_rows(x, &idx(&[3])),
        Err(AutodiffError::IndexOutOfRange { op: "gather_rows", index: 3, len: 3 })
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = idx(&[4, 0, 0, 2, 1, 4]);
    assert_passes(check_op(vec![rand_matrix(&mut rng, 5, 3)], move |t, v| t.gather_rows(v[0], &rows)));
}

#[test]
fn leaky_relu_values_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Matrix::column(&[1.0, -1.0])).unwrap();
    let y = tape.leaky_relu(x, 0.2).unwrap();
    assert_eq!(tape.value(y).as_slice(), &[1.0, -0.2]);
    let id = tape.leaky_relu(x, 1.0).unwrap();
    assert_eq!(tape.value(id).as_slice(), &[1.0, -1.0]);

    // Subgradient 1 at zero.
    let z = tape.constant(Matrix::column(&[0.0])).unwrap();
    let yz = tape.leaky_relu(z, 0.2).unwrap();
    let s = tape.sum(yz).unwrap();
    assert_eq!(tape.gradients(s).unwrap().get(z).unwrap().as_slice(), &[1.0]);

    assert_passes(check_op(vec![Matrix::column(&[0.5, -0.5])], |t, v| t.leaky_relu(v[0], 0.2)));
}

#[test]
fn segment_softmax_values() {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Matrix::column(&[0.0, 0.0])).unwrap();
    let y = tape.segment_softmax(s, &idx(&[0, 0]), 1).unwrap();
    assert_eq!(tape.value(y).as_slice(), &[0.5, 0.5]);

    let s = tape.constant(Matrix::column(&[123.4])).unwrap();
    let y = tape.segment_softmax(s, &idx(&[0]), 3).unwrap();
    assert_eq!(tape.value(y).as_slice(), &[1.0]);

    // Oracle: exp(x - max) / sum exp(x - max), evaluated directly.
    let scores = [1.0f64, 2.0, 3.0];
    let denom: f64 = scores.iter().map(|v| (v - 3.0).exp()).sum();
    let oracle: Vec<f64> = scores.iter().map(|v| (v - 3.0).exp() / denom).collect();
    let s = tape.constant(Matrix::column(&scores)).unwrap();
    let y = tape.segment_softmax(s, &idx(&[1, 1, 1]), 2).unwrap();
    for ((got, want), frozen) in tape.value(y).as_slice().iter().zip(&oracle).zip([0.0900, 0.2447, 0.6652]) {
        assert!((got - want).abs() < 1e-15);
        assert!((got - frozen).abs() < 1e-4);
    }

    assert!(tape.segment_softmax(s, &idx(&[0, 0, 5]), 2).is_err());
}

#[test]
fn segment_softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seg = idx(&[0, 2, 0, 2, 2, 3, 0]);
    assert_passes(check_op(vec![rand_matrix(&mut rng, 7, 1)], move |t, v| {
        t.segment_softmax(v[0], &seg, 5)
    }));
}

#[test]
fn segment_weighted_sum_values() {
    let mut tape = Tape::<f64>::new();
    let w = tape.constant(Matrix::column(&[1.0, 1.0])).unwrap();
    let m = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
    let out = tape.segment_weighted_sum(w, m, &idx(&[1, 1]), 3).unwrap();
    assert_eq!(tape.value(out).as_slice(), &[0.0, 0.0, 4.0, 6.0, 0.0, 0.0]);

    let short = tape.constant(Matrix::column(&[1.0])).unwrap();
    assert!(tape.segment_weighted_sum(short, m, &idx(&[0]), 1).is_err());
}

#[test]
fn segment_weighted_sum_matches_dense_product() {
    // Dense oracle: build the n x E assignment matrix A with A[seg(e), e] = w_e
    // and multiply by the message matrix.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let n = rng.random_range(1..12);
        let e = rng.random_range(0..30);
        let d = rng.random_range(1..5);
        let seg: Vec<usize> = (0..e).map(|_| rng.random_range(0..n)).collect();
        let w = rand_matrix(&mut rng, e, 1);
        let m = rand_matrix(&mut rng, e, d);
        let mut assign = Matrix::<f64>::zeros(n, e);
        for (k, &s) in seg.iter().enumerate() {
            assign.set(s, k, w.get(k, 0));
        }
        let dense = assign.matmul(&m);

        let mut tape = Tape::new();
        let (wv, mv) = (tape.constant(w).unwrap(), tape.constant(m).unwrap());
        let out = tape.segment_weighted_sum(wv, mv, &idx(&seg), n).unwrap();
        assert!(tape.value(out).max_abs_diff(&dense) < 1e-12);
    }

    let seg = idx(&[1, 0, 1, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    assert_passes(check_op(vec![rand_matrix(&mut rng, 4, 1), rand_matrix(&mut rng, 4, 3)], move |t, v| {
        t.segment_weighted_sum(v[0], v[1], &seg, 3)
    }));
}

#[test]
fn add_and_concat() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Matrix::from_rows(&[vec![1.0, -2.0]])).unwrap();
    let z = tape.constant(Matrix::zeros(1, 2)).unwrap();
    let s = tape.add(x, z).unwrap();
    assert_eq!(tape.value(s), tape.value(x));

    let a = tape.constant(Matrix::zeros(2, 1)).unwrap();
    let b = tape.constant(Matrix::zeros(2, 2)).unwrap();
    let c = tape.concat_cols(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), (2, 3));
    assert!(tape.add(a, b).is_err());
    assert!(tape.concat_cols(a, x).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    assert_passes(check_op(vec![rand_matrix(&mut rng, 2, 1), rand_matrix(&mut rng, 2, 2)], |t, v| {
        t.concat_cols(v[0], v[1])
    }));
    assert_passes(check_op(vec![rand_matrix(&mut rng, 2, 3), rand_matrix(&mut rng, 4, 3)], |t, v| {
        t.concat_rows(v[0], v[1])
    }));
    assert_passes(check_op(vec![rand_matrix(&mut rng, 3, 3), rand_matrix(&mut rng, 3, 3)], |t, v| {
        t.add(v[0], v[1])
    }));
}

#[test]
fn concat_gradient_splits_by_shape() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Matrix::zeros(2, 1)).unwrap();
    let b = tape.constant(Matrix::zeros(2, 2)).unwrap();
    let c = tape.concat_cols(a, b).unwrap();
    let s = tape.sum(c).unwrap();
    let g = tape.gradients(s).unwrap();
    assert_eq!(g.get(a).unwrap().shape(), (2, 1));
    assert_eq!(g.get(b).unwrap().shape(), (2, 2));
}

#[test]
fn remaining_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    assert_passes(check_op(vec![rand_matrix(&mut rng, 3, 2), rand_matrix(&mut rng, 3, 2)], |t, v| {
        t.mul(v[0], v[1])
    }));
    assert_passes(check_op(vec![rand_matrix(&mut rng, 3, 2), rand_matrix(&mut rng, 1, 2)], |t, v| {
        t.add_row(v[0], v[1])
    }));
    assert_passes(check_op(vec![rand_matrix(&mut rng, 6, 2)], |t, v| t.slice_rows(v[0], 2, 3)));
    assert_passes(check_op(vec![rand_matrix(&mut rng, 4, 3)], |t, v| t.sigmoid(v[0])));
    assert_passes(check_op(vec![rand_matrix(&mut rng, 4, 3)], |t, v| t.softmax_rows(v[0])));
    assert_passes(check_op(vec![rand_matrix(&mut rng, 4, 3)], |t, v| t.scale(v[0], -1.7)));
    assert_passes(check_op(vec![rand_matrix(&mut rng, 4, 3)], |t, v| t.mean(v[0])));
    assert_passes(check_op(vec![rand_matrix(&mut rng, 4, 3)], |t, v| {
        let p = t.sigmoid(v[0])?;
        t.binary_entropy(p)
    }));
}

#[test]
fn cross_entropy_values_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Matrix::from_rows(&[vec![0.0, 0.0]])).unwrap();
    let loss = tape.softmax_cross_entropy(l, &idx(&[0]), &[1.0, 1.0]).unwrap();
    assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-15);

    // Oracle: -log softmax = log(1 + e^-20).
    let l = tape.constant(Matrix::from_rows(&[vec![10.0, -10.0]])).unwrap();
    let loss = tape.softmax_cross_entropy(l, &idx(&[0]), &[1.0, 1.0]).unwrap();
    let oracle = (-20.0f64).exp().ln_1p();
    assert!((tape.scalar(loss) - oracle).abs() < 1e-12 * oracle);
    assert!((tape.scalar(loss) - 2.06e-9).abs() < 0.01e-9);

    assert!(matches!(
        tape.softmax_cross_entropy(l, &idx(&[2]), &[1.0, 1.0]),
        Err(AutodiffError::LabelOutOfRange { label: 2, classes: 2 })
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels = idx(&[1, 0, 1]);
    assert_passes(check_op(vec![rand_matrix(&mut rng, 3, 2)], move |t, v| {
        t.softmax_cross_entropy(v[0], &labels, &[0.7, 2.5])
    }));
}

#[test]
fn backward_into_store() {
    let mut store = ParamStore::<f64>::new();
    store.insert("W", Matrix::from_rows(&[vec![1.0, -3.0], vec![2.0, 0.5]])).unwrap();
    let mut tape = Tape::new();
    let p = tape.bind(&store).unwrap();
    let s = tape.sum(p.get("W").unwrap()).unwrap();
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.grad("W").unwrap().as_slice(), &[1.0; 4]);

    store.zero_grad();
    let mut tape = Tape::new();
    let p = tape.bind(&store).unwrap();
    let w = p.get("W").unwrap();
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq).unwrap();
    let zero = tape.scale(s, 0.0).unwrap();
    tape.backward(zero, &mut store).unwrap();
    assert!(store.grad("W").unwrap().as_slice().iter().all(|&g| g == 0.0));

    assert!(matches!(tape.backward(w, &mut store), Err(AutodiffError::NotScalar { shape: (2, 2) })));
}

#[test]
fn backward_ignores_other_stores_and_frozen_leaves() {
    let mut a = ParamStore::<f64>::new();
    a.insert("x", Matrix::scalar(2.0)).unwrap();
    let mut b = ParamStore::<f64>::new();
    b.insert("y", Matrix::scalar(3.0)).unwrap();
    let mut tape = Tape::new();
    let pa = tape.bind(&a).unwrap();
    let pb = tape.bind_frozen(&b).unwrap();
    let prod = tape.mul(pa.get("x").unwrap(), pb.get("y").unwrap()).unwrap();
    tape.backward(prod, &mut b).unwrap();
    assert_eq!(b.grad("y").unwrap().as_slice(), &[0.0]);
    tape.backward(prod, &mut a).unwrap();
    assert_eq!(a.grad("x").unwrap().as_slice(), &[3.0]);
}

#[test]
fn non_finite_values_are_reported() {
    let mut tape = Tape::<f64>::new();
    assert!(matches!(
        tape.constant(Matrix::column(&[f64::NAN])),
        Err(AutodiffError::NonFinite { op: "constant" })
    ));
    let x = tape.constant(Matrix::column(&[1e300])).unwrap();
    assert!(matches!(tape.scale(x, 1e300), Err(AutodiffError::NonFinite { op: "scale" })));
}

#[test]
fn foreign_vars_are_rejected() {
    let mut a = Tape::<f64>::new();
    let mut b = Tape::<f64>::new();
    let x = a.constant(Matrix::scalar(1.0)).unwrap();
    assert_eq!(b.sum(x), Err(AutodiffError::ForeignVar));
}

#[test]
fn grad_check_linear_is_near_exact() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Matrix::from_rows(&[vec![0.3, -1.2, 2.0]])).unwrap();
    let coef = Matrix::from_rows(&[vec![1.5], vec![-0.25], vec![4.0]]);
    let report = grad_check(&mut store, 1e-6, 1e-4, |tape, store| {
        let p = tape.bind(store)?;
        let c = tape.constant(coef.clone())?;
        tape.matmul(p.get("w")?, c)
    })
    .unwrap();
    assert!(report.passed());
    assert!(report.max_abs_error < 1e-9, "{}", report.max_abs_error);
}

#[test]
fn grad_check_flags_a_corrupted_rule() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Matrix::from_rows(&[vec![0.5, -1.0]])).unwrap();
    let report = grad_check(&mut store, 1e-6, 1e-4, |tape, store| {
        let p = tape.bind(store)?;
        let w = p.get("w")?;
        let value = tape.value(w).map(|v| v * v);
        // d(w^2)/dw is 2w; this rule claims 3w.
        let sq = tape.custom(
            &[w],
            value,
            Box::new(|ins, _out, g| {
                let data = ins[0].as_slice().iter().zip(g.as_slice()).map(|(x, g)| 3.0 * x * g).collect();
                vec![Matrix::from_vec(1, 2, data)]
            }),
        )?;
        tape.sum(sq)
    })
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.failures.len(), 2);
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_matrix(&mut rng, 20, 8);
    let b = rand_matrix(&mut rng, 8, 1);
    let seg: Index = (0..20).map(|i| i % 7).collect::<Vec<_>>().into();
    let run = || {
        let mut t = Tape::<f64>::new();
        let (av, bv) = (t.constant(a.clone()).unwrap(), t.constant(b.clone()).unwrap());
        let h = t.matmul(av, bv).unwrap();
        let h = t.leaky_relu(h, 0.2).unwrap();
        let w = t.segment_softmax(h, &seg, 7).unwrap();
        let out = t.segment_weighted_sum(w, av, &seg, 7).unwrap();
        t.value(out).as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn segment_softmax_normalizes(
        scores in proptest::collection::vec(-1e3f64..1e3, 1..60),
        nseg in 1usize..8,
        salt in any::<u64>(),
    ) {
        let seg: Vec<usize> = (0..scores.len()).map(|e| ((e as u64).wrapping_mul(2654435761) ^ salt) as usize % nseg).collect();
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Matrix::column(&scores)).unwrap();
        let y = tape.segment_softmax(s, &idx(&seg), nseg).unwrap();
        let mut sums = vec![0.0; nseg];
        let mut seen = vec![false; nseg];
        for (&k, &v) in seg.iter().zip(tape.value(y).as_slice()) {
            sums[k] += v;
            seen[k] = true;
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for k in 0..nseg {
            if seen[k] {
                prop_assert!((sums[k] - 1.0).abs() < 1e-9);
            }
        }
    }
}
