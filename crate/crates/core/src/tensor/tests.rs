use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

/// Scalar projection `Σ out ⊙ w` used to check non-scalar ops.
fn project<'t>(out: Var<'t>, seed: u64) -> crate::Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &out.shape());
    out.mul(out.tape().constant(w)).map(Var::sum)
}

#[test]
fn matmul_identity_returns_other_operand() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random(&mut rng, &[3, 4]);
    let mut eye = Tensor::zeros([3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let out = tape.constant(eye).matmul(tape.constant(b.clone())).unwrap();
    assert_eq!(*out.value(), b);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let a = random(&mut rng, &[2, 3]);
        let b = random(&mut rng, &[3, 2]);
        let tape = Tape::new();
        let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
        for (x, y) in out.value().data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let err = a.matmul(b).unwrap_err().to_string();
    assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape = Tape::new();
    let out = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).softmax(1.0).unwrap();
    for &p in out.value().data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[4, 6]);
    let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + 17.5).collect()).unwrap();
    let tape = Tape::new();
    let a = tape.constant(x).softmax(0.7).unwrap().value();
    let b = tape.constant(shifted).softmax(0.7).unwrap().value();
    assert!(a.max_abs_diff(&b) < 1e-14);
}

#[test]
fn softmax_matches_direct_evaluation() {
    let tape = Tape::new();
    let out = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).softmax(1.0).unwrap();
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    // 0.09003057317038046, 0.24472847105479767, 0.6652409557748219
    for (p, ei) in out.value().data().iter().zip(&e) {
        assert!((p - ei / z).abs() < 1e-15);
    }
    assert!((out.value().data()[2] - 0.665_240_955_774_821_9).abs() < 1e-15);
}

#[test]
fn softmax_rejects_bad_temperature_and_non_finite_input() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
    assert!(x.softmax(0.0).is_err());
    assert!(x.softmax(-1.0).is_err());
    let bad = tape.constant(Tensor::matrix(1, 2, vec![0.0, f64::NAN]).unwrap());
    assert!(bad.softmax(1.0).is_err());
}

#[test]
fn cross_entropy_reference_values() {
    let tape = Tape::new();
    // Large margins make every target probability round to exactly one.
    let mut confident = Tensor::zeros([3, 4]);
    for (r, t) in [2usize, 0, 3].iter().enumerate() {
        confident.data_mut()[r * 4 + t] = 1000.0;
    }
    let loss = tape.constant(confident).cross_entropy(&[2, 0, 3]).unwrap();
    assert_eq!(loss.value().item(), 0.0);

    let uniform = tape.constant(Tensor::zeros([5, 8])).cross_entropy(&[0, 1, 2, 3, 7]).unwrap();
    assert!((uniform.value().item() - 8f64.ln()).abs() < 1e-15);

    let err = tape.constant(Tensor::zeros([1, 8])).cross_entropy(&[8]).unwrap_err();
    assert!(matches!(err, crate::Error::TokenOutOfRange { id: 8, vocab: 8 }));
}

#[test]
fn cross_entropy_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random(&mut rng, &[3, 5]);
    let targets = [4usize, 0, 2];
    let mut expected = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let z: f64 = logits.row(r).iter().map(|v| v.exp()).sum();
        expected -= (logits.at(r, t).exp() / z).ln();
    }
    expected /= 3.0;
    let tape = Tape::new();
    let got = tape.constant(logits).cross_entropy(&targets).unwrap().value().item();
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn dropout_contract() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = tape.constant(random(&mut rng, &[4, 16]));
    let same = x.dropout(0.0, &mut rng).unwrap();
    assert_eq!(same.id(), x.id());
    assert!(x.dropout(1.0, &mut rng).is_err());
    assert!(x.dropout(-0.1, &mut rng).is_err());

    let a = x.dropout(0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().value();
    let b = x.dropout(0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().value();
    assert_eq!(a, b);
    for (o, i) in a.data().iter().zip(x.value().data()) {
        assert!(*o == 0.0 || (o - i / 0.7).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full([2, 5], 3.25));
    let g = tape.constant(Tensor::full([5], 1.0));
    let b = tape.constant(Tensor::zeros([5]));
    let out = x.layer_norm(g, b, 1e-5).unwrap().value();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let x: f64 = rng.gen_range(-4.0..4.0);
        let tape = Tape::new();
        let v = tape.leaf(Tensor::scalar(x), true);
        tape.backward(v.gelu()).unwrap();
        let analytic = v.grad().unwrap().item();
        let h = 1e-5;
        let numeric = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
        assert!((analytic - numeric).abs() < 1e-6, "x={x}");
    }
}

#[test]
fn embedding_mix_reference_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let table = random(&mut rng, &[5, 3]);
    let tape = Tape::new();
    let t = tape.constant(table.clone());

    let mut one_hot = Tensor::zeros([1, 5]);
    one_hot.data_mut()[2] = 1.0;
    let row = tape.constant(one_hot).embedding_mix(t).unwrap().value();
    assert_eq!(row.data(), table.row(2));

    let uniform = tape.constant(Tensor::full([1, 5], 0.2)).embedding_mix(t).unwrap().value();
    for c in 0..3 {
        let mean = (0..5).map(|r| table.at(r, c)).sum::<f64>() / 5.0;
        assert!((uniform.data()[c] - mean).abs() < 1e-15);
    }

    let mut dist = random(&mut rng, &[4, 5]);
    for r in 0..4 {
        let row: Vec<f64> = dist.row(r).iter().map(|v| v.exp()).collect();
        let z: f64 = row.iter().sum();
        dist.data_mut()[r * 5..(r + 1) * 5].copy_from_slice(&row.iter().map(|v| v / z).collect::<Vec<_>>());
    }
    let mixed = tape.constant(dist.clone()).embedding_mix(t).unwrap().value();
    for r in 0..4 {
        for c in 0..3 {
            let expect: f64 = (0..5).map(|v| dist.at(r, v) * table.at(v, c)).sum();
            assert!((mixed.at(r, c) - expect).abs() < 1e-12);
        }
    }

    let bad = tape.constant(Tensor::full([1, 5], 0.3));
    assert!(matches!(bad.embedding_mix(t), Err(crate::Error::NotNormalized { .. })));
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::full([3, 2], 0.5), true);
    tape.backward(x.sum()).unwrap();
    assert!(x.grad().unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::full([3], 0.5), true);
    assert!(tape.backward(x.scale(2.0)).is_err());
}

#[test]
fn repeated_backward_accumulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tape = Tape::new();
    let x = tape.leaf(random(&mut rng, &[2, 3]), true);
    let w = tape.leaf(random(&mut rng, &[3, 4]), true);
    let loss = x.matmul(w).unwrap().softmax(1.0).unwrap().cross_entropy(&[1, 3]).unwrap();
    tape.backward(loss).unwrap();
    let once = w.grad().unwrap();
    tape.backward(loss).unwrap();
    let twice = w.grad().unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
    tape.zero_grad();
    assert!(w.grad().is_none());
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4, 5])];
    let report = gradcheck::check(&inputs, 1e-5, 64, |_, v| {
        v[0].matmul(v[1])?.softmax(1.0)?.cross_entropy(&[0, 4, 2])
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

/// Every differentiable op against central differences on random shapes.
#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = gradcheck::GradCheck::default();
    for trial in 0..20u64 {
        let m = rng.gen_range(1..4);
        let k = rng.gen_range(1..5);
        let n = rng.gen_range(2..5);
        let seed = 100 + trial;
        let mut run = |inputs: Vec<Tensor>, f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> crate::Result<Var<'t>>| {
            let r = gradcheck::check(&inputs, 1e-5, 64, f).unwrap();
            assert!(r.max_rel_error < 1e-4, "trial {trial}: {r:?}");
            worst = worst.merge(r);
        };
        run(vec![random(&mut rng, &[m, k]), random(&mut rng, &[k, n])], &|_, v| project(v[0].matmul(v[1])?, seed));
        run(vec![random(&mut rng, &[m, n]), random(&mut rng, &[m, n])], &|_, v| project(v[0].add(v[1])?, seed));
        run(vec![random(&mut rng, &[m, n]), random(&mut rng, &[n])], &|_, v| project(v[0].add_row(v[1])?, seed));
        run(vec![random(&mut rng, &[m, n]), random(&mut rng, &[m, n])], &|_, v| project(v[0].mul(v[1])?, seed));
        run(vec![random(&mut rng, &[m, n])], &|_, v| project(v[0].scale(-1.7), seed));
        run(vec![random(&mut rng, &[m, n])], &|_, v| Ok(v[0].mean()));
        run(vec![random(&mut rng, &[m, n])], &|_, v| project(v[0].gelu(), seed));
        run(vec![random(&mut rng, &[m, n])], &|_, v| project(v[0].reshape([m * n])?, seed));
        run(
            vec![random(&mut rng, &[m, n]), random(&mut rng, &[n]), random(&mut rng, &[n])],
            &|_, v| project(v[0].layer_norm(v[1], v[2], 1e-5)?, seed),
        );
        for t in [0.5, 1.0, 2.0] {
            run(vec![random(&mut rng, &[m, n])], &move |_, v| project(v[0].softmax(t)?, seed));
        }
        let targets: Vec<Option<usize>> = (0..m).map(|r| if r == 1 { None } else { Some(r % n) }).collect();
        run(vec![random(&mut rng, &[m, n])], &|_, v| v[0].nll(&targets, 0.5));
        run(vec![random(&mut rng, &[m, n]), random(&mut rng, &[2, n])], &|tape, v| {
            project(tape.gather_rows(&[v[0], v[1]], &[(1, 1), (0, m - 1), (1, 0), (0, 0), (1, 1)])?, seed)
        });
        run(vec![random(&mut rng, &[k + 1, n])], &|tape, v| {
            project(tape.embedding_lookup(v[0], &[k, 0, k])?, seed)
        });
        // Perturbing a distribution directly would break its normalization.
        run(vec![random(&mut rng, &[m, k]), random(&mut rng, &[k, n])], &|_, v| {
            project(v[0].softmax(1.0)?.embedding_mix(v[1])?, seed)
        });
        run(vec![random(&mut rng, &[m, n])], &|_, v| {
            project(v[0].dropout(0.4, &mut ChaCha8Rng::seed_from_u64(seed))?, seed)
        });

        let heads = if trial % 2 == 0 { 1 } else { 2 };
        let d = 2 * heads;
        let (batch, lq, lk) = (2, rng.gen_range(1..4), rng.gen_range(1..4));
        let mask = Arc::new(AttentionMask::key_padding(lq, lk, &[lk, 1]));
        run(
            vec![
                random(&mut rng, &[batch * lq, d]),
                random(&mut rng, &[batch * lk, d]),
                random(&mut rng, &[batch * lk, d]),
            ],
            &|tape, v| project(tape.attention(v[0], v[1], v[2], Arc::clone(&mask), heads)?, seed),
        );
        let causal = Arc::new(AttentionMask::causal(lq, &[lq, 1]));
        run(
            vec![
                random(&mut rng, &[batch * lq, d]),
                random(&mut rng, &[batch * lq, d]),
                random(&mut rng, &[batch * lq, d]),
            ],
            &|tape, v| project(tape.attention(v[0], v[1], v[2], Arc::clone(&causal), heads)?, seed),
        );
    }
    assert!(worst.checked > 1000);
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[3, 4]), true);
        let w = tape.leaf(random(&mut rng, &[4, 4]), true);
        let h = x.matmul(w).unwrap().gelu().dropout(0.2, &mut rng).unwrap();
        let loss = h.softmax(1.3).unwrap().cross_entropy(&[0, 1, 3]).unwrap();
        tape.backward(loss).unwrap();
        (loss.value().item().to_bits(), w.grad().unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn attention_rejects_mask_shape_mismatch() {
    let tape = Tape::new();
    let q = tape.constant(Tensor::zeros([2, 4]));
    let kv = tape.constant(Tensor::zeros([3, 4]));
    let mask = Arc::new(AttentionMask::full(1, 2, 2));
    assert!(tape.attention(q, kv, kv, mask, 2).is_err());
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            values in prop::collection::vec(-50.0f64..50.0, 1..40),
            t_index in 0usize..3,
        ) {
            let t = [0.5, 1.0, 2.0][t_index];
            let tape = Tape::new();
            let x = tape.constant(Tensor::matrix(1, values.len(), values).unwrap());
            let sum: f64 = x.softmax(t).unwrap().value().data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn tensor_numel_matches_shape(rows in 1usize..6, cols in 1usize..6) {
            let t = Tensor::zeros([rows, cols]);
            prop_assert_eq!(t.numel(), rows * cols);
            prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols + 1]).is_err());
        }
    }
}
