use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{check_gradients, GradCheckOptions, Tape};

/// Every matching of size `min(n, g)`, as sorted pair lists.
fn all_matchings(n: usize, g: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(p: usize, n: usize, g: usize, want: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if cur.len() == want {
            out.push(cur.clone());
            return;
        }
        if p == n || n - p < want - cur.len() {
            return;
        }
        for gt in 0..g {
            if !used[gt] {
                used[gt] = true;
                cur.push((p, gt));
                rec(p + 1, n, g, want, used, cur, out);
                cur.pop();
                used[gt] = false;
            }
        }
        rec(p + 1, n, g, want, used, cur, out);
    }
    let mut out = Vec::new();
    rec(0, n, g, n.min(g), &mut vec![false; g], &mut Vec::new(), &mut out);
    out
}

/// Brute-force optimum: minimal total (summed in pair order), smallest pair
/// list among the minimal ones.
fn brute_force(cost: &[f64], n: usize, g: usize) -> (Vec<(usize, usize)>, f64) {
    all_matchings(n, g)
        .into_iter()
        .map(|pairs| {
            let total: f64 = pairs.iter().map(|&(p, gt)| cost[p * g + gt]).sum();
            (pairs, total)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)))
        .expect("at least the empty matching")
}

#[test]
fn diagonal_costs_give_diagonal_matching() {
    let n = 5;
    let cost: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 }).collect();
    let m = hungarian_match(&cost, n, n).unwrap();
    assert_eq!(m.pairs, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
    assert!(m.unmatched.is_empty());
}

#[test]
fn single_entry() {
    let m = hungarian_match(&[3.5], 1, 1).unwrap();
    assert_eq!(m.pairs, vec![(0, 0)]);
    assert_eq!(m.total_cost, 3.5);
}

#[test]
fn random_six_by_five_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cost: Vec<f64> = (0..30).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let m = hungarian_match(&cost, 6, 5).unwrap();
    let (pairs, total) = brute_force(&cost, 6, 5);
    assert_eq!(m.pairs, pairs);
    assert_eq!(m.total_cost, total);
    assert_eq!(m.unmatched.len(), 1);
}

#[test]
fn all_small_shapes_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 1..=6 {
        for g in 0..=6 {
            for _ in 0..8 {
                let cost: Vec<f64> = (0..n * g).map(|_| rng.gen_range(0.0..10.0)).collect();
                let m = hungarian_match(&cost, n, g).unwrap();
                let (pairs, total) = brute_force(&cost, n, g);
                assert_eq!(m.pairs, pairs, "{n}×{g}");
                assert_eq!(m.total_cost, total);
            }
        }
    }
}

#[test]
fn ties_resolve_to_smallest_pair_list() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..400 {
        let n = rng.gen_range(1..=6);
        let g = rng.gen_range(1..=6);
        let cost: Vec<f64> = (0..n * g).map(|_| rng.gen_range(0..3) as f64).collect();
        let m = hungarian_match(&cost, n, g).unwrap();
        let (pairs, total) = brute_force(&cost, n, g);
        assert_eq!(m.total_cost, total, "{cost:?}");
        assert_eq!(m.pairs, pairs, "{n}×{g} {cost:?}");
    }
}

#[test]
fn non_finite_cost_is_rejected() {
    assert!(matches!(hungarian_match(&[1.0, f64::NAN], 1, 2), Err(Error::Numeric(_))));
}

#[test]
fn empty_ground_truth_leaves_everything_unmatched() {
    let m = hungarian_match(&[], 3, 0).unwrap();
    assert!(m.pairs.is_empty());
    assert_eq!(m.unmatched, vec![0, 1, 2]);
}

proptest! {
    #[test]
    fn positive_scaling_keeps_assignment(seed in 0u64..10_000, factor in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=8);
        let g = rng.gen_range(1..=8);
        let cost: Vec<f64> = (0..n * g).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let scaled: Vec<f64> = cost.iter().map(|c| c * factor).collect();
        prop_assert_eq!(hungarian_match(&cost, n, g).unwrap().pairs, hungarian_match(&scaled, n, g).unwrap().pairs);
    }

    #[test]
    fn giou_is_bounded(a in prop::array::uniform4(0.01f64..1.0), b in prop::array::uniform4(0.01f64..1.0)) {
        let v = giou(&a, &b);
        prop_assert!(v > -1.0 && v <= 1.0 + 1e-12);
    }

    #[test]
    fn matching_is_injective(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=12);
        let g = rng.gen_range(0..=12);
        let cost: Vec<f64> = (0..n * g).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = hungarian_match(&cost, n, g).unwrap();
        prop_assert_eq!(m.pairs.len(), n.min(g));
        let mut ps: Vec<_> = m.pairs.iter().map(|p| p.0).collect();
        let mut gs: Vec<_> = m.pairs.iter().map(|p| p.1).collect();
        ps.dedup();
        gs.sort_unstable();
        gs.dedup();
        prop_assert_eq!(ps.len(), m.pairs.len());
        prop_assert_eq!(gs.len(), m.pairs.len());
        prop_assert_eq!(m.unmatched.len() + m.pairs.len(), n);
    }
}

#[test]
fn giou_of_identical_boxes_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let b = [rng.gen(), rng.gen(), rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0)];
        assert!((giou(&b, &b) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn disjoint_boxes_in_a_large_hull_approach_minus_one() {
    let a = [0.01, 0.01, 0.01, 0.01];
    let b = [0.99, 0.99, 0.01, 0.01];
    let v = giou(&a, &b);
    assert!(v < -0.99 && v > -1.0, "{v}");
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3)]
}

#[test]
fn exact_confident_prediction_is_cheapest_in_its_row() {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let g = rng.gen_range(2..6);
        let targets = Targets {
            boxes: (0..g).map(|_| random_box(&mut rng)).collect(),
            classes: (0..g).map(|_| rng.gen_range(0..3)).collect(),
        };
        let pick = rng.gen_range(0..g);
        let mut logits: Vec<f64> = (0..3).map(|_| rng.gen_range(-4.0..0.0)).collect();
        logits[targets.classes[pick]] = 7.0;
        let logits = Tensor::new(vec![1, 3], logits).unwrap();
        let boxes = Tensor::new(vec![1, 4], targets.boxes[pick].to_vec()).unwrap();
        let cost = match_cost(&logits, &boxes, &targets, &w).unwrap();
        for (j, &c) in cost.iter().enumerate() {
            if j != pick {
                assert!(cost[pick] < c, "{cost:?}");
            }
        }
    }
}

#[test]
fn degenerate_ground_truth_is_a_data_error() {
    let targets = Targets {
        boxes: vec![[0.5, 0.5, 0.0, 0.2]],
        classes: vec![0],
    };
    let logits = Tensor::zeros(vec![2, 3]);
    let boxes = Tensor::full(vec![2, 4], 0.5);
    assert!(matches!(
        match_cost(&logits, &boxes, &targets, &LossWeights::default()),
        Err(Error::Data(_))
    ));
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Predictions equal to the targets with the given confidence on the true
/// class, plus `extra` background queries.
fn perfect_predictions(targets: &Targets, conf: f64, extra: usize) -> (Tensor<f64>, Tensor<f64>) {
    let n = targets.len() + extra;
    let mut logits = vec![logit(1.0 - conf); n * 3];
    let mut boxes = vec![0.5; n * 4];
    for (i, (b, &c)) in targets.boxes.iter().zip(&targets.classes).enumerate() {
        logits[i * 3 + c] = logit(conf);
        boxes[i * 4..i * 4 + 4].copy_from_slice(b);
    }
    (Tensor::new(vec![n, 3], logits).unwrap(), Tensor::new(vec![n, 4], boxes).unwrap())
}

fn loss_value(logits: &Tensor<f64>, boxes: &Tensor<f64>, targets: &Targets) -> (f64, f64, f64, f64) {
    let tape = Tape::new();
    let pred = Predictions {
        class_logits: tape.constant(logits.clone()),
        boxes: tape.constant(boxes.clone()),
    };
    let w = LossWeights::default();
    let m = match_stage(&pred, targets, &w).unwrap();
    let l = stage_loss(&pred, targets, &m, &w).unwrap();
    (l.total.item(), l.class, l.l1, l.giou)
}

fn sample_targets(rng: &mut ChaCha8Rng, g: usize) -> Targets {
    Targets {
        boxes: (0..g).map(|_| random_box(rng)).collect(),
        classes: (0..g).map(|_| rng.gen_range(0..3)).collect(),
    }
}

#[test]
fn perfect_predictions_have_vanishing_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let targets = sample_targets(&mut rng, 3);
    let (logits, boxes) = perfect_predictions(&targets, 0.999, 4);
    let (_, class, l1, giou_term) = loss_value(&logits, &boxes, &targets);
    assert_eq!(l1, 0.0);
    assert!(giou_term.abs() < 1e-12);
    assert!(class < 1e-3, "{class}");
}

#[test]
fn empty_ground_truth_gives_pure_negative_focal_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = Tensor::from_fn(vec![4, 3], |_| rng.gen_range(-2.0..2.0));
    let boxes = Tensor::full(vec![4, 4], 0.3);
    let (total, class, l1, g) = loss_value(&logits, &boxes, &Targets::default());
    let w = LossWeights::default();
    let expected: f64 = logits
        .data()
        .iter()
        .map(|&x| {
            let p = 1.0 / (1.0 + (-x).exp());
            (1.0 - w.focal_alpha) * p * p * -(1.0 - p).ln()
        })
        .sum();
    assert!((class - expected).abs() < 1e-12);
    assert_eq!((l1, g), (0.0, 0.0));
    assert!((total - w.class * expected).abs() < 1e-12);
}

#[test]
fn loss_drops_below_tenth_when_predictions_become_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let g = rng.gen_range(1..5);
        let targets = sample_targets(&mut rng, g);
        let logits = Tensor::from_fn(vec![8, 3], |_| rng.gen_range(-3.0..1.0));
        let boxes = Tensor::from_fn(vec![8, 4], |i| if i % 4 < 2 { rng.gen_range(0.2..0.8) } else { rng.gen_range(0.05..0.4) });
        let initial = loss_value(&logits, &boxes, &targets).0;
        let (logits, boxes) = perfect_predictions(&targets, 0.9999, 8 - g);
        let fin = loss_value(&logits, &boxes, &targets).0;
        assert!(initial.is_finite() && fin.is_finite());
        assert!(fin < 0.1 * initial, "{fin} vs {initial}");
    }
}

#[test]
fn focal_loss_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Tensor<f64> = Tensor::from_fn(vec![5, 3], |_| rng.gen_range(-6.0..6.0));
    let t: Tensor<f64> = Tensor::from_fn(vec![5, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let tape = Tape::new();
    let got = focal_loss(tape.constant(x.clone()), &t, 0.25, 2.0).unwrap().item();
    let want: f64 = x
        .data()
        .iter()
        .zip(t.data())
        .map(|(&x, &t): (&f64, &f64)| {
            let p = 1.0 / (1.0 + (-x).exp());
            let pt = if t == 1.0 { p } else { 1.0 - p };
            let at = if t == 1.0 { 0.25 } else { 0.75 };
            at * (1.0 - pt).powi(2) * -pt.ln()
        })
        .sum();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn stage_loss_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let targets = sample_targets(&mut rng, 3);
    let logits = Tensor::from_fn(vec![6, 3], |_| rng.gen_range(-3.0..3.0));
    let boxes = Tensor::from_fn(vec![6, 4], |i| if i % 4 < 2 { rng.gen_range(0.3..0.7) } else { rng.gen_range(0.1..0.4) });
    let w = LossWeights::default();
    let report = check_gradients(
        |_, v| {
            let pred = Predictions {
                class_logits: v[0],
                boxes: v[1],
            };
            let m = match_stage(&pred, &targets, &w)?;
            Ok(stage_loss(&pred, &targets, &m, &w)?.total)
        },
        &[logits, boxes],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn giou_rows_agrees_with_scalar_giou() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<[f64; 4]> = (0..10).map(|_| random_box(&mut rng)).collect();
    let b: Vec<[f64; 4]> = (0..10).map(|_| random_box(&mut rng)).collect();
    let tape = Tape::new();
    let ta = tape.constant(Tensor::new(vec![10, 4], a.concat()).unwrap());
    let tb = tape.constant(Tensor::new(vec![10, 4], b.concat()).unwrap());
    let rows = giou_rows(ta, tb).unwrap();
    for i in 0..10 {
        assert!((rows.value().data()[i] - giou(&a[i], &b[i])).abs() < 1e-12);
    }
}

#[test]
fn deep_supervision_sums_stage_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let targets = sample_targets(&mut rng, 2);
    let tape = Tape::new();
    let preds: Vec<Predictions<'_, f64>> = (0..3)
        .map(|_| Predictions {
            class_logits: tape.constant(Tensor::from_fn(vec![5, 3], |_| rng.gen_range(-3.0..3.0))),
            boxes: tape.constant(Tensor::from_fn(vec![5, 4], |i| if i % 4 < 2 { rng.gen_range(0.3..0.7) } else { rng.gen_range(0.1..0.4) })),
        })
        .collect();
    let w = LossWeights::default();
    let all = deep_supervision(&preds, &targets, &w).unwrap();
    let manual = all.stages.iter().map(|s| s.total.item()).fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a + v)));
    assert_eq!(all.total.item(), manual.unwrap());

    let one = deep_supervision(&preds[..1], &targets, &w).unwrap();
    let m = match_stage(&preds[0], &targets, &w).unwrap();
    assert_eq!(one.total.item(), stage_loss(&preds[0], &targets, &m, &w).unwrap().total.item());
}
