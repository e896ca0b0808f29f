use super::*;
use crate::gradcheck::{check_gradients, FD_STEP, FD_TOL};
use crate::rng::Rng;
use proptest::prelude::*;

fn tape_with(t: Tensor) -> (Tape, TensorId) {
    let mut tape = Tape::new();
    let id = tape.leaf(t);
    (tape, id)
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let eye = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let out = tape.matmul(eye, eye).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn matmul_hand_case() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_zero_case() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::matrix(3, 4, (0..12).map(f64::from).collect()).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 4]);
    assert!(tape.value(c).data().iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::zeros(vec![4, 2]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
}

#[test]
fn relu_values_and_gradient() {
    let (mut tape, x) = tape_with(Tensor::vector(vec![-1.0, 0.0, 2.0]).with_grad());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    // subgradient at 0 is 0; positive branch passes 1
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn relu_all_negative() {
    let (mut tape, x) = tape_with(Tensor::vector(vec![-3.0, -0.5, -1e9]));
    let y = tape.relu(x);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_positive_branch_is_one() {
    let (mut tape, x) = tape_with(Tensor::scalar(3.0).with_grad());
    let y = tape.relu(x);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0]);
}

#[test]
fn log_softmax_uniform_two_logits() {
    let (mut tape, x) = tape_with(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let y = tape.log_softmax(x).unwrap();
    let expect = 0.5f64.ln();
    for &v in tape.value(y).data() {
        assert!((v - expect).abs() < 1e-15);
    }
}

#[test]
fn log_softmax_survives_huge_logits() {
    let (mut tape, x) = tape_with(Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap());
    let y = tape.log_softmax(x).unwrap();
    let out = tape.value(y).data();
    assert!(out.iter().all(|v| v.is_finite()));
    assert!(out[0].abs() < 1e-9);
    assert!((out[1] + 1000.0).abs() < 1e-9);
}

#[test]
fn log_softmax_rows_exp_to_one() {
    let (mut tape, x) = tape_with(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.log_softmax(x).unwrap();
    let sum: f64 = tape.value(y).data().iter().map(|v| v.exp()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn log_softmax_needs_two_classes() {
    let (mut tape, x) = tape_with(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
    assert!(matches!(tape.log_softmax(x), Err(Error::Shape(_))));
}

#[test]
fn backward_sum_gives_ones() {
    let (mut tape, w) = tape_with(Tensor::vector(vec![1.0, -2.0, 0.5]).with_grad());
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_squared_norm_gives_two_w() {
    let (mut tape, w) = tape_with(Tensor::vector(vec![1.0, -2.0, 0.5]).with_grad());
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let (mut tape, w) = tape_with(Tensor::vector(vec![1.0, 2.0]).with_grad());
    assert!(matches!(tape.backward(w), Err(Error::Tape(_))));
}

#[test]
fn backward_rejects_second_pass() {
    let (mut tape, w) = tape_with(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
}

#[test]
fn l2_normalize_three_four_five() {
    let (mut tape, v) = tape_with(Tensor::vector(vec![3.0, 4.0]));
    let u = tape.l2_normalize(v);
    assert_eq!(tape.value(u).data(), &[0.6, 0.8]);
    assert!(tape.degenerate_rows(u).is_empty());
}

#[test]
fn l2_normalize_unit_vector_unchanged() {
    let (mut tape, v) = tape_with(Tensor::vector(vec![0.0, 1.0, 0.0]));
    let u = tape.l2_normalize(v);
    assert_eq!(tape.value(u).data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn l2_normalize_zero_vector_flags_degeneracy() {
    let (mut tape, v) = tape_with(Tensor::vector(vec![0.0, 0.0, 0.0]).with_grad());
    let u = tape.l2_normalize(v);
    assert_eq!(tape.value(u).data(), &[0.0, 0.0, 0.0]);
    assert_eq!(tape.degenerate_rows(u), &[0]);
    // gradient through the degenerate row is zero, not NaN
    let s = tape.sum(u);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn select_per_row_rejects_bad_index() {
    let (mut tape, a) = tape_with(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    assert!(matches!(
        tape.select_per_row(a, &[0, 2]),
        Err(Error::Data(_))
    ));
}

#[test]
fn gather_rows_accumulates_gradient_for_repeats() {
    let (mut tape, w) = tape_with(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
    let g = tape.gather_rows(w, &[0, 0, 1]).unwrap();
    let s = tape.sum(g);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
}

#[test]
fn add_bias_gradient_sums_over_rows() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![3, 2]).with_grad());
    let b = tape.leaf(Tensor::vector(vec![1.0, -1.0]).with_grad());
    let y = tape.add_bias(a, b).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(b).unwrap(), &[3.0, 3.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = Rng::seed_from(99);
        let a = Tensor::matrix(17, 13, (0..17 * 13).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::matrix(13, 9, (0..13 * 9).map(|_| rng.normal()).collect()).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(a), tape.leaf(b));
        let c = tape.matmul(a, b).unwrap();
        let r = tape.relu(c);
        let n = tape.l2_normalize(r);
        tape.value(n).data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn op_gradients_match_finite_differences() {
    // a randomized sweep over composed ops, checked against the fd oracle
    let mut rng = Rng::seed_from(17);
    for trial in 0..5 {
        let d = 2 + rng.index(30);
        let x = Tensor::matrix(3, d, (0..3 * d).map(|_| rng.normal()).collect()).unwrap();
        let y = Tensor::matrix(3, d, (0..3 * d).map(|_| rng.normal()).collect()).unwrap();
        let report = check_gradients(
            "composed_ops",
            &[x, y],
            |tape, ids| {
                let u = tape.l2_normalize(ids[0]);
                let s = tape.sub(u, ids[1])?;
                let a = tape.abs(s);
                let m = tape.mean(a);
                Ok(m)
            },
            FD_STEP,
            FD_TOL,
        )
        .unwrap();
        assert!(
            report.passed(),
            "trial {trial}: max rel err {}",
            report.max_rel_err
        );
    }
}

proptest! {
    #[test]
    fn log_softmax_rows_sum_to_one_and_shift_invariant(
        rows in prop::collection::vec(
            prop::collection::vec(-30.0f64..30.0, 4), 1..6),
        shift in -50.0f64..50.0,
    ) {
        let t = Tensor::from_rows(&rows).unwrap();
        let (mut tape, x) = tape_with(t);
        let y = tape.log_softmax(x).unwrap();
        for i in 0..rows.len() {
            let sum: f64 = tape.value(y).row(i).iter().map(|v| v.exp()).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        let shifted: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v + shift).collect())
            .collect();
        let (mut tape2, x2) = tape_with(Tensor::from_rows(&shifted).unwrap());
        let y2 = tape2.log_softmax(x2).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape2.value(y2).data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_yields_unit_rows(
        rows in prop::collection::vec(
            prop::collection::vec(-10.0f64..10.0, 5), 1..5),
    ) {
        let t = Tensor::from_rows(&rows).unwrap();
        let (mut tape, x) = tape_with(t);
        let u = tape.l2_normalize(x);
        for (i, row) in rows.iter().enumerate() {
            let input_norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let out_norm: f64 = tape.value(u).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if input_norm > NORM_EPS {
                prop_assert!((out_norm - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(out_norm, 0.0);
            }
        }
    }
}
