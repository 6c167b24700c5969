use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::segmenter::{FeatureMap, Layout};

fn dist(p: &[f64]) -> ClassDistribution {
    ClassDistribution { probs: p.to_vec() }
}

fn close(a: f64, b: f64) {
    assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
}

fn params(values: Vec<f64>) -> ParameterVector {
    let mut l = Layout::default();
    l.push("w", &[values.len()]);
    ParameterVector::from_values(Arc::new(l), values).unwrap()
}

#[test]
fn ema_examples() {
    let student = params(vec![0.0, 2.5, -1.0]);
    let mut t = params(vec![1.0, 1.0, 1.0]);
    ema_update(&mut t, &student, 0.0).unwrap();
    assert_eq!(t, student);

    let mut t = params(vec![1.0, 4.0, 7.0]);
    let before = t.clone();
    ema_update(&mut t, &student, 1.0).unwrap();
    assert_eq!(t, before);

    let mut t = params(vec![1.0]);
    ema_update(&mut t, &params(vec![0.0]), 0.99).unwrap();
    close(t.values()[0], 0.99);
}

#[test]
fn ema_rejects_bad_inputs() {
    let mut t = params(vec![1.0]);
    assert!(ema_update(&mut t, &params(vec![0.0]), 1.5).is_err());
    assert!(ema_update(&mut t, &params(vec![0.0, 1.0]), 0.5).is_err());
}

#[test]
fn ema_gap_decays_geometrically() {
    let student = params(vec![0.3, -0.7, 1.1, 0.0]);
    for alpha in [0.5, 0.9, 0.99] {
        let mut t = params(vec![1.3, 0.2, -0.4, 2.0]);
        let gap0 = t.max_abs_diff(&student);
        for _ in 0..50 {
            ema_update(&mut t, &student, alpha).unwrap();
        }
        assert!((t.max_abs_diff(&student) - alpha.powi(50) * gap0).abs() <= 1e-12);
    }
}

#[test]
fn alpha_examples() {
    close(alpha_schedule(991).unwrap(), 0.0);
    close(alpha_schedule(1090).unwrap(), 0.99);
    close(alpha_schedule(10_000).unwrap(), 0.99);
    close(alpha_schedule(992).unwrap(), 0.5);
    assert!(alpha_schedule(990).is_err());
    assert!(alpha_schedule(0).is_err());
}

#[test]
fn ensemble_examples() {
    let a = vec![dist(&[0.2, 0.3, 0.5]), dist(&[0.1, 0.1, 0.8])];
    let same = ensemble_pseudo_label(&[a.clone(), a.clone(), a.clone()]).unwrap();
    assert_eq!(same, a);

    let m = ensemble_pseudo_label(&[vec![dist(&[1.0, 0.0, 0.0])], vec![dist(&[0.0, 1.0, 0.0])]]).unwrap();
    assert_eq!(m[0].probs, vec![0.5, 0.5, 0.0]);

    assert!(ensemble_pseudo_label(&[vec![dist(&[1.0])], vec![]]).is_err());
}

#[test]
fn sharpen_examples() {
    let u = dist(&[1.0 / 3.0; 3]);
    for t in [0.25, 0.5, 2.0] {
        for p in sharpen(&u, t).unwrap().probs {
            close(p, 1.0 / 3.0);
        }
    }
    let d = dist(&[0.64, 0.36]);
    assert_eq!(sharpen(&d, 1.0).unwrap(), d);
    let s = sharpen(&d, 0.5).unwrap();
    close(s.probs[0], 0.8 / 1.4);
    close(s.probs[1], 0.6 / 1.4);
    assert!(sharpen(&d, 0.0).is_err());
    assert!(sharpen(&d, -1.0).is_err());
}

#[test]
fn variance_examples() {
    let v = vec![dist(&[0.2, 0.8])];
    assert_eq!(perturbation_variance(&[v.clone(), v.clone()], &v).unwrap(), vec![0.0]);

    let views = [vec![dist(&[1.0, 0.0])], vec![dist(&[0.0, 1.0])]];
    let mean = ensemble_pseudo_label(&views).unwrap();
    close(perturbation_variance(&views, &mean).unwrap()[0], 0.5);

    assert!(perturbation_variance(&views[..1], &mean).is_err());
}

fn pseudo_from(labels: &[usize], variance: &[f64]) -> PseudoLabelSet {
    let n = labels.len();
    PseudoLabelSet {
        mean_dist: vec![dist(&[1.0, 0.0, 0.0]); n],
        sharpened_dist: vec![dist(&[1.0, 0.0, 0.0]); n],
        hard_label: labels.to_vec(),
        variance: variance.to_vec(),
        proposals: ProposalBatch {
            boxes: vec![BBox::new(0.0, 0.0, 1.0, 1.0); n],
            scores: vec![0.0; n],
        },
    }
}

#[test]
fn mining_examples() {
    let all_fg = mine_samples(&pseudo_from(&[1, 2, 1], &[0.3, 0.1, 0.2]));
    assert_eq!(all_fg.kept_indices, vec![0, 1, 2]);
    assert_eq!(all_fg.s_foreground, 3);

    let none = mine_samples(&pseudo_from(&[0, 0, 0], &[0.3, 0.1, 0.2]));
    assert!(none.kept_indices.is_empty());
    assert_eq!(none.s_foreground, 0);

    // foreground at 0 and 1; background variances .1 .4 .2 .3 .05 at 2..7
    let sel = mine_samples(&pseudo_from(
        &[1, 2, 0, 0, 0, 0, 0],
        &[0.9, 0.9, 0.1, 0.4, 0.2, 0.3, 0.05],
    ));
    assert_eq!(sel.kept_indices, vec![0, 1, 3, 5]);
    assert_eq!(sel.s_foreground, 2);
}

#[test]
fn mining_breaks_variance_ties_by_index() {
    let sel = mine_samples(&pseudo_from(&[0, 1, 0, 0], &[0.2, 0.0, 0.2, 0.2]));
    assert_eq!(sel.kept_indices, vec![0, 1]);
}

#[test]
fn psm_examples() {
    let w = [1.5, 1.0, 1.0];
    let one_hot = dist(&[0.0, 1.0, 0.0]);
    assert_eq!(
        psm_loss(&[vec![one_hot.clone()]], std::slice::from_ref(&one_hot), &[1], &w).unwrap(),
        0.0
    );

    let uniform = dist(&[1.0 / 3.0; 3]);
    close(
        psm_loss(&[vec![uniform.clone()]], &[one_hot], &[1], &w).unwrap(),
        3f64.ln(),
    );
    close(
        psm_loss(&[vec![uniform.clone()]], &[dist(&[1.0, 0.0, 0.0])], &[0], &w).unwrap(),
        1.5 * 3f64.ln(),
    );
    close(1.5 * 3f64.ln(), 1.647_918_433_002_164_5);

    // degenerate prediction stays finite
    let v = psm_loss(&[vec![dist(&[1.0, 0.0, 0.0])]], &[dist(&[0.0, 0.0, 1.0])], &[2], &w).unwrap();
    close(v, -(1e-12f64).ln());

    assert!(psm_loss(&[vec![uniform.clone()]], &[uniform.clone(), uniform], &[0, 0], &w).is_err());
    assert_eq!(psm_loss(&[vec![]], &[], &[], &w).unwrap(), 0.0);
}

#[test]
fn psm_averages_over_proposals_then_views() {
    let w = [1.0; 3];
    let u = dist(&[1.0 / 3.0; 3]);
    let hit = dist(&[0.0, 1.0, 0.0]);
    let targets = [hit.clone(), hit.clone()];
    // view 0: both perfect; view 1: one uniform, one perfect
    let v = psm_loss(&[vec![hit.clone(), hit.clone()], vec![u, hit]], &targets, &[1, 1], &w).unwrap();
    close(v, 0.5 * (0.0 + 0.5 * 3f64.ln()));
}

#[test]
fn logit_gradient_matches_finite_differences() {
    let z = [0.3, -1.1, 0.7];
    let t = dist(&[0.2, 0.5, 0.3]);
    let f = |z: &[f64]| weighted_cross_entropy(&ClassDistribution::from_logits(z), &t, 1.5);
    let g = weighted_cross_entropy_logit_grad(&ClassDistribution::from_logits(&z), &t, 1.5);
    for i in 0..3 {
        let (mut zp, mut zm) = (z, z);
        zp[i] += 1e-5;
        zm[i] -= 1e-5;
        let num = (f(&zp) - f(&zm)) / 2e-5;
        assert!((num - g[i]).abs() < 1e-8, "{i}: {num} vs {}", g[i]);
    }
}

#[test]
fn semantic_mask_examples() {
    let stages = [(24, 24, 4), (12, 12, 8)];
    let none = semantic_mask(&[], 14, 96, 96, &stages);
    assert!(none.iter().all(Mask::is_empty));

    let whole = semantic_mask(
        &[(BBox::new(0.0, 0.0, 96.0, 96.0), vec![1.0; 196])],
        14,
        96,
        96,
        &stages,
    );
    assert!(whole.iter().all(|m| m.area() == m.height() * m.width()));

    let corner = semantic_mask(
        &[(BBox::new(0.0, 0.0, 8.0, 8.0), vec![1.0; 196])],
        14,
        96,
        96,
        &stages[..1],
    );
    let set: Vec<(usize, usize)> = (0..24)
        .flat_map(|y| (0..24).map(move |x| (y, x)))
        .filter(|&(y, x)| corner[0].get(y, x))
        .collect();
    assert_eq!(set, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
}

#[test]
fn mask_threshold_is_inclusive() {
    let m = union_of_masks(&[(BBox::new(0.0, 0.0, 2.0, 1.0), vec![0.5, 0.4999])], 1, 1, 2);
    assert!(m.get(0, 0) && m.get(0, 1));
    let m = union_of_masks(&[(BBox::new(0.0, 0.0, 2.0, 2.0), vec![0.5, 0.4999, 0.0, 1.0])], 2, 2, 2);
    assert_eq!(m.area(), 2);
}

fn stage(channels: usize, h: usize, w: usize, data: Vec<f64>) -> FeaturePyramid {
    FeaturePyramid {
        stages: vec![FeatureMap {
            channels,
            height: h,
            width: w,
            stride: 4,
            data,
        }],
    }
}

#[test]
fn mgd_examples() {
    let a = stage(2, 2, 2, vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.0, 3.0, -2.0]);
    let full = Mask::from_fn(2, 2, |_, _| true);
    assert_eq!(mgd_loss(&a, &a, &[full]).unwrap(), 0.0);

    let mut b = a.clone();
    b.stages[0].data[0] += 1.0;
    assert_eq!(mgd_loss(&a, &b, &[Mask::empty(2, 2)]).unwrap(), 0.0);

    // one masked cell (0,1) with difference (1, 2) across the two channels
    let mut s = a.clone();
    s.stages[0].data[1] += 1.0;
    s.stages[0].data[4 + 1] += 2.0;
    s.stages[0].data[3] += 9.0; // unmasked cell
    let m = Mask::from_fn(2, 2, |y, x| (y, x) == (0, 1));
    close(mgd_loss(&a, &s, &[m]).unwrap(), 2.5);
}

#[test]
fn mgd_rejects_shape_mismatch() {
    let a = stage(2, 2, 2, vec![0.0; 8]);
    let b = stage(2, 2, 1, vec![0.0; 4]);
    assert!(mgd_loss(&a, &b, &[Mask::empty(2, 2)]).is_err());
    assert!(mgd_loss(&a, &a, &[Mask::empty(2, 1)]).is_err());
}

#[test]
fn mgd_gradient_matches_finite_differences() {
    let t = stage(2, 2, 3, (0..12).map(|i| (i as f64 * 0.7).sin()).collect());
    let s = stage(2, 2, 3, (0..12).map(|i| (i as f64 * 1.3).cos()).collect());
    let m = vec![Mask::from_fn(2, 3, |y, x| (y + x) % 2 == 0)];
    let (_, g) = mgd_loss_and_grad(&t, &s, &m, true).unwrap();
    let g = g.unwrap();
    for i in 0..12 {
        let (mut sp, mut sm) = (s.clone(), s.clone());
        sp.stages[0].data[i] += 1e-5;
        sm.stages[0].data[i] -= 1e-5;
        let num = (mgd_loss(&t, &sp, &m).unwrap() - mgd_loss(&t, &sm, &m).unwrap()) / 2e-5;
        assert!((num - g.stages[0].data[i]).abs() < 1e-8);
    }
}

#[test]
fn lambda_examples() {
    close(lambda_schedule(1250, 2000).unwrap(), 1.0);
    close(lambda_schedule(1000, 2000).unwrap(), (-5.0f64).exp());
    close(lambda_schedule(1000, 2000).unwrap(), 0.006_737_946_999_085_467);
    close(lambda_schedule(1125, 2000).unwrap(), (-1.25f64).exp());
    close(lambda_schedule(1125, 2000).unwrap(), 0.286_504_796_860_190_1);
    assert_eq!(lambda_schedule(999, 2000).unwrap(), 0.0);
    assert_eq!(lambda_schedule(0, 2000).unwrap(), 0.0);
    assert_eq!(lambda_schedule(1500, 2000).unwrap(), 1.0);
    close(lambda_schedule(1750, 2000).unwrap(), 1.0);
    close(lambda_schedule(2000, 2000).unwrap(), (-12.0f64).exp());
    close(lambda_schedule(1250, 1500).unwrap(), 1.0);
    assert!(lambda_schedule(100, 1499).is_err());
    assert!(lambda_schedule(2001, 2000).is_err());
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_loss(0.731, 5.0, 9.0, 999, 2000, 5.0).unwrap(), 0.731);
    close(total_loss(1.0, 0.2, 0.1, 1250, 2000, 5.0).unwrap(), 1.7);
    for t in [0, 1000, 1100, 1250, 1600, 1900, 2000] {
        assert_eq!(total_loss(0.42, 0.0, 0.0, t, 2000, 5.0).unwrap(), 0.42);
    }
    assert!(matches!(
        total_loss(f64::NAN, 0.0, 0.0, 5, 2000, 5.0),
        Err(Error::NonFinite { .. })
    ));
    assert!(total_loss(1.0, f64::INFINITY, 0.0, 5, 2000, 5.0).is_err());
}

fn arb_dist(classes: usize) -> impl Strategy<Value = ClassDistribution> {
    prop::collection::vec(0.0f64..1.0, classes).prop_filter_map("all zero", |raw| {
        let sum: f64 = raw.iter().sum();
        (sum > 1e-6).then(|| ClassDistribution {
            probs: raw.iter().map(|v| v / sum).collect(),
        })
    })
}

fn entropy(d: &ClassDistribution) -> f64 {
    -d.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

proptest! {
    #[test]
    fn sharpen_preserves_argmax_and_normalisation(d in arb_dist(3), t in 0.05f64..4.0) {
        let s = sharpen(&d, t).unwrap();
        prop_assert!((s.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert_eq!(s.argmax(), d.argmax());
    }

    // The power map pᵗ flattens for t < 1 and concentrates for t > 1.
    #[test]
    fn sharpen_moves_entropy_monotonically(d in arb_dist(3), t in 0.05f64..4.0) {
        let (h0, h1) = (entropy(&d), entropy(&sharpen(&d, t).unwrap()));
        if t <= 1.0 {
            prop_assert!(h1 >= h0 - 1e-12);
        } else {
            prop_assert!(h1 <= h0 + 1e-12);
        }
    }

    #[test]
    fn ensemble_mean_is_a_distribution(views in prop::collection::vec(prop::collection::vec(arb_dist(3), 4), 2..6)) {
        for m in ensemble_pseudo_label(&views).unwrap() {
            prop_assert!((m.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn variance_is_zero_iff_views_agree(views in prop::collection::vec(prop::collection::vec(arb_dist(3), 1), 2..6)) {
        let mean = ensemble_pseudo_label(&views).unwrap();
        let var = perturbation_variance(&views, &mean).unwrap()[0];
        prop_assert!(var >= 0.0);
        let all_equal = views.iter().all(|v| v[0] == views[0][0]);
        prop_assert_eq!(var == 0.0, all_equal);

        let copies = vec![views[0].clone(); views.len()];
        let mean = ensemble_pseudo_label(&copies).unwrap();
        prop_assert_eq!(perturbation_variance(&copies, &mean).unwrap()[0], 0.0);
    }

    #[test]
    fn variance_ignores_view_order(mut views in prop::collection::vec(prop::collection::vec(arb_dist(3), 2), 2..6)) {
        let mean = ensemble_pseudo_label(&views).unwrap();
        let a = perturbation_variance(&views, &mean).unwrap();
        views.reverse();
        let mean = ensemble_pseudo_label(&views).unwrap();
        let b = perturbation_variance(&views, &mean).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn mining_keeps_the_most_sensitive_background(
        rows in prop::collection::vec((0usize..3, 0u8..6), 0..40),
    ) {
        let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let variance: Vec<f64> = rows.iter().map(|r| f64::from(r.1) * 0.1).collect();
        let sel = mine_samples(&pseudo_from(&labels, &variance));
        let fg = labels.iter().filter(|&&l| l != 0).count();
        let bg = labels.len() - fg;
        prop_assert_eq!(sel.s_foreground, fg);
        prop_assert_eq!(sel.kept_indices.len(), fg + fg.min(bg));
        let kept_bg: Vec<usize> = sel.kept_indices.iter().copied().filter(|&i| labels[i] == 0).collect();
        let min_kept = kept_bg.iter().map(|&i| variance[i]).fold(f64::INFINITY, f64::min);
        for i in (0..labels.len()).filter(|&i| labels[i] == 0 && !kept_bg.contains(&i)) {
            prop_assert!(variance[i] <= min_kept);
        }
    }
}
