mod support;

use lcau_tensor::Tensor;
use lcaunet::supervision::{
    bce_loss, confusion, dice_loss, edge_map_loss, ConfusionCounts, EdgeLossParams, MetricReport, MetricRow, Metrics, Reduction,
};
use proptest::prelude::*;
use support::checks;

#[test]
fn losses_and_metrics_match_scalar_oracles() {
    let r = checks::loss_metric_oracles(60, 5);
    assert!(r.loss_diff < 1e-9, "{r:?}");
    assert!(r.metric_diff < 1e-12, "{r:?}");
}

#[test]
fn worked_confusion_example() {
    let m = checks::worked_example();
    assert_eq!((m.dice, m.iou, m.se, m.sp, m.acc), (2.0 / 3.0, 0.5, 2.0 / 3.0, 0.0, 0.5));
}

#[test]
fn single_pixel_edge_terms() {
    let one = |p: f64, g: f64, beta: f64| {
        let params = EdgeLossParams { beta: Some(beta), ..Default::default() };
        let pt = Tensor::<f64>::from_vec(vec![p], (1, 1, 1, 1)).unwrap();
        let gt = Tensor::<f64>::from_vec(vec![g], (1, 1, 1, 1)).unwrap();
        edge_map_loss(&pt, &gt, &params, Reduction::Sum).unwrap().to_scalar().unwrap()
    };
    assert!((one(0.8, 1.0, 0.9) - 0.9 * -(0.8f64.ln())).abs() < 1e-12);
    assert!((one(0.8, 1.0, 0.9) - 0.2008).abs() < 1e-4);
    assert!((one(0.5, 0.0, 0.9) - 0.11 * 2f64.ln()).abs() < 1e-12);
    assert_eq!(one(0.3, 0.1, 0.9), 0.0);
}

#[test]
fn reports_serialize_one_row_per_image() {
    let rows = vec![
        MetricRow::new("a", Metrics { acc: 1.0, dice: 0.5, iou: 0.25, se: 1.0, sp: 0.0 }),
        MetricRow::new("b", Metrics { acc: 0.0, dice: 1.0, iou: 0.75, se: 0.0, sp: 1.0 }),
    ];
    let rep = MetricReport::new(rows);
    let m = rep.aggregate.metrics();
    assert_eq!((m.acc, m.dice, m.iou, m.se, m.sp), (0.5, 0.75, 0.5, 0.5, 0.5));
    let dir = tempfile::tempdir().unwrap();
    rep.write_csv(&dir.path().join("m.csv")).unwrap();
    rep.write_json_lines(&dir.path().join("m.jsonl")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    assert!(csv.lines().next().unwrap().starts_with("image_id"));
    let jl = std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
    assert_eq!(jl.lines().count(), 3);
}

fn mask_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), n),
            prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_bounded_and_consistent((p, g) in mask_pair()) {
        let c = confusion(&p, &g).unwrap();
        prop_assert_eq!(c.total() as usize, p.len());
        let m = Metrics::from_counts(&c);
        for v in [m.acc, m.dice, m.iou, m.se, m.sp] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        // Dice and IoU determine each other
        prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        prop_assert!(m.iou <= m.dice + 1e-15);
    }

    #[test]
    fn accuracy_splits_into_sensitivity_and_specificity((p, g) in mask_pair()) {
        let c = confusion(&p, &g).unwrap();
        let m = Metrics::from_counts(&c);
        let lhs = m.acc * c.total() as f64;
        let rhs = m.se * (c.tp + c.fn_) as f64 + m.sp * (c.tn + c.fp) as f64;
        prop_assert!((lhs - rhs).abs() < 1e-9, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn perfect_prediction_scores_one(g in prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), 1..200)) {
        let m = Metrics::from_counts(&confusion(&g, &g).unwrap());
        prop_assert_eq!([m.acc, m.dice, m.iou, m.se, m.sp], [1.0; 5]);
    }

    #[test]
    fn swapping_roles_swaps_sensitivity_and_specificity((p, g) in mask_pair()) {
        let flip = |v: &[f64]| v.iter().map(|x| 1.0 - x).collect::<Vec<_>>();
        let a = Metrics::from_counts(&confusion(&p, &g).unwrap());
        let b = Metrics::from_counts(&confusion(&flip(&p), &flip(&g)).unwrap());
        prop_assert_eq!(a.se, b.sp);
        prop_assert_eq!(a.sp, b.se);
        prop_assert_eq!(a.acc, b.acc);
    }

    #[test]
    fn counts_add_over_concatenation((p, g) in mask_pair(), (q, h) in mask_pair()) {
        let joined = confusion(&[p.clone(), q.clone()].concat(), &[g.clone(), h.clone()].concat()).unwrap();
        let summed: ConfusionCounts = confusion(&p, &g).unwrap() + confusion(&q, &h).unwrap();
        prop_assert_eq!(joined, summed);
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_at_truth(g in prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), 16), p in prop::collection::vec(0.0f64..1.0, 16)) {
        let gt = Tensor::<f64>::from_vec(g.clone(), (1, 1, 4, 4)).unwrap();
        let pt = Tensor::<f64>::from_vec(p, (1, 1, 4, 4)).unwrap();
        let s = |t: Tensor<f64>| t.to_scalar().unwrap();
        prop_assert!(s(bce_loss(&pt, &gt, Reduction::Mean).unwrap()) >= 0.0);
        let d = s(dice_loss(&pt, &gt, 1.0, Reduction::Mean).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(s(bce_loss(&gt, &gt, Reduction::Mean).unwrap()) < 1e-6);
        prop_assert!(s(dice_loss(&gt, &gt, 1.0, Reduction::Mean).unwrap()).abs() < 1e-12);
        let e = s(edge_map_loss(&gt, &gt, &EdgeLossParams::default(), Reduction::Mean).unwrap());
        prop_assert!((0.0..1e-6).contains(&e));
    }

    #[test]
    fn ignored_edge_labels_carry_no_gradient(p in prop::collection::vec(0.05f64..0.95, 9), soft in 0.01f64..0.29) {
        let mut g = vec![0.0, 1.0, 0.0, 1.0, soft, 0.0, 1.0, 0.0, 1.0];
        g[4] = soft;
        let gt = Tensor::<f64>::from_vec(g, (1, 1, 3, 3)).unwrap();
        let pt = Tensor::<f64>::from_vec(p, (1, 1, 3, 3)).unwrap().into_var();
        let loss = edge_map_loss(&pt, &gt, &EdgeLossParams::default(), Reduction::Sum).unwrap();
        let grad = loss.backward().unwrap().get(&pt).unwrap().to_vec();
        prop_assert_eq!(grad[4], 0.0);
    }
}
