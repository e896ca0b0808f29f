use super::*;
use crate::gradcheck::{check_gradients, FD_STEP, FD_TOL};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// Scalar-loop oracle: normalize rows by hand, average |dot| over all
/// (feature, weight) pairs. Independent of the tape ops.
fn orth_loss_naive(features: &Tensor, weights: &Tensor) -> f64 {
    let normalize = |row: &[f64]| -> Vec<f64> {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            vec![0.0; row.len()]
        } else {
            row.iter().map(|x| x / norm).collect()
        }
    };
    let m = features.rows();
    let c = weights.rows();
    let mut acc = 0.0;
    for i in 0..m {
        let z = normalize(features.row(i));
        for j in 0..c {
            let w = normalize(weights.row(j));
            let dot: f64 = z.iter().zip(&w).map(|(a, b)| a * b).sum();
            acc += dot.abs();
        }
    }
    acc / (m as f64 * c as f64)
}

fn eval_orth(features: &Tensor, weights: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let w = tape.leaf(weights.clone());
    let loss = orth_loss(&mut tape, f, w).unwrap();
    tape.scalar(loss)
}

#[test]
fn ce_uniform_logits_is_ln_c() {
    for c in 2..=5 {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::matrix(2, c, vec![0.7; 2 * c]).unwrap());
        let loss = ce_loss(&mut tape, logits, &[0, c - 1]).unwrap();
        assert!((tape.scalar(loss) - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn ce_confident_correct_is_near_zero() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::matrix(1, 3, vec![0.0, 1000.0, 0.0]).unwrap());
    let loss = ce_loss(&mut tape, logits, &[1]).unwrap();
    assert!(tape.scalar(loss).abs() < 1e-9);
}

#[test]
fn ce_direct_formula() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let loss = ce_loss(&mut tape, logits, &[2]).unwrap();
    let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
    assert!((tape.scalar(loss) - (lse - 3.0)).abs() < 1e-12);
}

#[test]
fn ce_rejects_out_of_range_label() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    assert!(ce_loss(&mut tape, logits, &[3]).is_err());
}

#[test]
fn oe_uniform_logits_attains_ln_c() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::matrix(3, 4, vec![-2.5; 12]).unwrap());
    let loss = oe_loss(&mut tape, logits).unwrap();
    assert!((tape.scalar(loss) - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn oe_extreme_logits() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap());
    let loss = oe_loss(&mut tape, logits).unwrap();
    assert!((tape.scalar(loss) - 500.0).abs() < 1e-6);
}

#[test]
fn orth_zero_for_orthogonal_feature() {
    // weights span e1..e3 in d=6; feature lives on e5
    let mut w = vec![0.0; 3 * 6];
    w[0] = 1.0;
    w[7] = 1.0;
    w[14] = 1.0;
    let weights = Tensor::matrix(3, 6, w).unwrap();
    let mut z = vec![0.0; 6];
    z[4] = 2.5;
    let features = Tensor::matrix(1, 6, z).unwrap();
    assert_eq!(eval_orth(&features, &weights), 0.0);
}

#[test]
fn orth_feature_equal_to_weight_gives_one_over_c() {
    // orthonormal rows e1, e2; z = w_1
    let weights = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let features = Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(eval_orth(&features, &weights), 0.5);
}

#[test]
fn orth_matches_naive_loop() {
    let mut rng = Rng::seed_from(21);
    for _ in 0..10 {
        let features = random_matrix(&mut rng, 4, 8);
        let weights = random_matrix(&mut rng, 3, 8);
        let got = eval_orth(&features, &weights);
        let want = orth_loss_naive(&features, &weights);
        assert!((got - want).abs() < 1e-12, "got {got} want {want}");
    }
}

#[test]
fn orth_scale_invariant_under_positive_row_rescaling() {
    let mut rng = Rng::seed_from(22);
    let features = random_matrix(&mut rng, 4, 8);
    let weights = random_matrix(&mut rng, 3, 8);
    let base = eval_orth(&features, &weights);

    let mut scaled_f = features.clone();
    for (i, row) in scaled_f.data_mut().chunks_mut(8).enumerate() {
        let k = 0.1 + 3.0 * i as f64;
        row.iter_mut().for_each(|x| *x *= k);
    }
    let mut scaled_w = weights.clone();
    for (i, row) in scaled_w.data_mut().chunks_mut(8).enumerate() {
        let k = 7.5 / (1.0 + i as f64);
        row.iter_mut().for_each(|x| *x *= k);
    }
    assert!((eval_orth(&scaled_f, &scaled_w) - base).abs() < 1e-9);
}

#[test]
fn orth_zero_iff_orthogonal_complement() {
    // forward direction: rows in the complement give exactly zero
    let weights = Tensor::matrix(2, 5, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
        .unwrap();
    let inside = Tensor::matrix(2, 5, vec![0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0])
        .unwrap();
    assert_eq!(eval_orth(&inside, &weights), 0.0);

    // converse: any feature with a component in span(W) gives > 0
    let leaking =
        Tensor::matrix(1, 5, vec![1e-3, 0.0, 1.0, 0.0, 0.0]).unwrap();
    assert!(eval_orth(&leaking, &weights) > 0.0);
}

#[test]
fn nc_alignment_extremes() {
    let weights = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let eval = |features: &Tensor, labels: &[usize]| {
        let mut tape = Tape::new();
        let f = tape.leaf(features.clone());
        let w = tape.leaf(weights.clone());
        let loss = nc_loss(&mut tape, f, labels, w).unwrap();
        tape.scalar(loss)
    };

    // z equals its class weight: -1
    let aligned = Tensor::matrix(1, 4, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
    assert!((eval(&aligned, &[0]) + 1.0).abs() < 1e-12);

    // orthogonal: 0
    let orth = Tensor::matrix(1, 4, vec![0.0, 0.0, 3.0, 0.0]).unwrap();
    assert_eq!(eval(&orth, &[0]), 0.0);

    // anti-aligned: +1
    let anti = Tensor::matrix(1, 4, vec![-0.5, 0.0, 0.0, 0.0]).unwrap();
    assert!((eval(&anti, &[0]) - 1.0).abs() < 1e-12);
}

#[test]
fn euclid_id_term_vanishes_when_feature_equals_weight() {
    let weights = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
    let id = Tensor::matrix(1, 3, vec![4.0, 0.0, 0.0]).unwrap(); // normalizes to w_0
    let far_ood = Tensor::matrix(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let (ood, idf, w) = (
        tape.leaf(far_ood),
        tape.leaf(id),
        tape.leaf(weights),
    );
    let loss = euclidean_ablation_loss(&mut tape, ood, idf, &[0], w).unwrap();
    // distance ood->w is sqrt(2); total should be exactly the ood term
    let expect = 1.0 / (2f64.sqrt() + EUCLID_EPS);
    assert!((tape.scalar(loss) - expect).abs() < 1e-12);
}

#[test]
fn euclid_antipodal_reciprocal() {
    // single class, ood feature antipodal to the weight: distance 2
    let weights = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
    let ood = Tensor::matrix(1, 3, vec![-2.0, 0.0, 0.0]).unwrap();
    let id = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let (o, i, w) = (tape.leaf(ood), tape.leaf(id), tape.leaf(weights));
    let loss = euclidean_ablation_loss(&mut tape, o, i, &[0], w).unwrap();
    // id term is 0, ood term is 1/(2 + eps)
    assert!((tape.scalar(loss) - 0.5).abs() < 1e-5);
}

#[test]
fn euclid_gradient_matches_finite_differences() {
    let mut rng = Rng::seed_from(23);
    let ood = random_matrix(&mut rng, 3, 6);
    let id = random_matrix(&mut rng, 4, 6);
    let w = random_matrix(&mut rng, 2, 6);
    let labels = vec![0, 1, 1, 0];
    let report = check_gradients(
        "euclid",
        &[ood, id, w],
        move |tape, ids| euclidean_ablation_loss(tape, ids[0], ids[1], &labels, ids[2]),
        FD_STEP,
        FD_TOL,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

struct CompositeFixture {
    id_logits: Tensor,
    id_features: Tensor,
    labels: Vec<usize>,
    ood_logits: Tensor,
    ood_features: Tensor,
    weights: Tensor,
}

fn fixture(seed: u64) -> CompositeFixture {
    let mut rng = Rng::seed_from(seed);
    CompositeFixture {
        id_logits: random_matrix(&mut rng, 5, 3),
        id_features: random_matrix(&mut rng, 5, 7),
        labels: (0..5).map(|_| rng.index(3)).collect(),
        ood_logits: random_matrix(&mut rng, 4, 3),
        ood_features: random_matrix(&mut rng, 4, 7),
        weights: random_matrix(&mut rng, 3, 7),
    }
}

fn run_composite(
    fx: &CompositeFixture,
    stage: Stage,
    variant: LossVariant,
    weights: &LossWeights,
) -> (f64, LossBreakdown) {
    let mut tape = Tape::new();
    let il = tape.leaf(fx.id_logits.clone());
    let ifeat = tape.leaf(fx.id_features.clone());
    let ol = tape.leaf(fx.ood_logits.clone());
    let ofeat = tape.leaf(fx.ood_features.clone());
    let w = tape.leaf(fx.weights.clone());
    let out = composite_loss(
        &mut tape, stage, variant, il, ifeat, &fx.labels, ol, ofeat, w, weights,
    )
    .unwrap();
    (tape.scalar(out.total), out.breakdown)
}

#[test]
fn stage_one_equals_stage_two_with_zero_separation_weights() {
    let fx = fixture(31);
    let (stage1, _) = run_composite(&fx, Stage::One, LossVariant::Ours, &LossWeights::default());
    let zeroed = LossWeights {
        lambda: 0.5,
        alpha: 0.0,
        beta: 0.0,
    };
    let (stage2, _) = run_composite(&fx, Stage::Two, LossVariant::Ours, &zeroed);
    assert_eq!(stage1, stage2);
}

#[test]
fn all_weights_zero_reduces_to_ce() {
    let fx = fixture(32);
    let zero = LossWeights {
        lambda: 0.0,
        alpha: 0.0,
        beta: 0.0,
    };
    let (total, bd) = run_composite(&fx, Stage::Two, LossVariant::Ours, &zero);
    let mut tape = Tape::new();
    let il = tape.leaf(fx.id_logits.clone());
    let ce = ce_loss(&mut tape, il, &fx.labels).unwrap();
    assert_eq!(total, tape.scalar(ce));
    assert_eq!(bd.ce, total);
}

#[test]
fn breakdown_components_sum_to_total() {
    let fx = fixture(33);
    let w = LossWeights {
        lambda: 0.4,
        alpha: 1.3,
        beta: 0.8,
    };
    for variant in [
        LossVariant::Ours,
        LossVariant::OeOnly,
        LossVariant::V1,
        LossVariant::V2,
        LossVariant::V3,
        LossVariant::Euclidean,
    ] {
        for stage in [Stage::One, Stage::Two] {
            let (total, bd) = run_composite(&fx, stage, variant, &w);
            let recomputed =
                bd.ce + w.lambda * bd.oe + w.alpha * bd.nc + w.beta * bd.orth + bd.euclid;
            assert!(
                (total - recomputed).abs() < 1e-12,
                "{variant:?} {stage:?}: total {total} recomputed {recomputed}"
            );
            assert_eq!(bd.total, total);
        }
    }
}

#[test]
fn oe_only_reports_inactive_components_as_zero() {
    let fx = fixture(34);
    let (_, bd) = run_composite(
        &fx,
        Stage::Two,
        LossVariant::OeOnly,
        &LossWeights::default(),
    );
    assert_eq!(bd.nc, 0.0);
    assert_eq!(bd.orth, 0.0);
    assert_eq!(bd.euclid, 0.0);
    assert!(bd.oe != 0.0);
}

#[test]
fn variant_masks_match_the_ablation_table() {
    let cases: [(LossVariant, (bool, bool, bool, bool)); 6] = [
        (LossVariant::OeOnly, (true, false, false, false)),
        (LossVariant::V1, (false, true, true, false)),
        (LossVariant::V2, (true, true, false, false)),
        (LossVariant::V3, (true, false, true, false)),
        (LossVariant::Ours, (true, true, true, false)),
        (LossVariant::Euclidean, (true, false, false, true)),
    ];
    for (variant, (oe, nc, orth, euclid)) in cases {
        let m = variant.mask();
        assert_eq!((m.oe, m.nc, m.orth, m.euclid), (oe, nc, orth, euclid), "{variant:?}");
        // stage one keeps only OE of the mask
        let s1 = variant.active(Stage::One);
        assert_eq!((s1.oe, s1.nc, s1.orth, s1.euclid), (oe, false, false, false));
    }
}

#[test]
fn stage_plan_switches_inclusively() {
    let plan = StagePlan::halved(50);
    assert_eq!(plan.switch_epoch, 25);
    assert_eq!(plan.stage_for(0), Stage::One);
    assert_eq!(plan.stage_for(24), Stage::One);
    assert_eq!(plan.stage_for(25), Stage::Two);
    assert_eq!(plan.stage_for(49), Stage::Two);

    let all_two = StagePlan {
        total_epochs: 10,
        switch_epoch: 0,
    };
    assert_eq!(all_two.stage_for(0), Stage::Two);
}

proptest! {
    #[test]
    fn loss_ranges_hold_on_random_inputs(seed in 0u64..500) {
        let mut rng = Rng::seed_from(seed);
        let features = random_matrix(&mut rng, 3, 6);
        let weights = random_matrix(&mut rng, 2, 6);
        let logits = random_matrix(&mut rng, 3, 4);
        let labels: Vec<usize> = (0..3).map(|_| rng.index(2)).collect();

        let orth = eval_orth(&features, &weights);
        prop_assert!((0.0..=1.0).contains(&orth));

        let mut tape = Tape::new();
        let f = tape.leaf(features.clone());
        let w = tape.leaf(weights.clone());
        let nc = nc_loss(&mut tape, f, &labels, w).unwrap();
        let nc_val = tape.scalar(nc);
        prop_assert!((-1.0..=1.0).contains(&nc_val));

        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone());
        let oe = oe_loss(&mut tape, l).unwrap();
        prop_assert!(tape.scalar(oe) >= 4f64.ln() - 1e-12);
    }
}
