mod support;

use lcau_tensor::Tensor;
use lcaunet::attention::{attention_cost, window_partition, window_reverse, AttentionScope, WindowLayout};
use lcaunet::edge_encoder::{pdc_conv2d, pdc_to_vanilla_kernel};
use proptest::prelude::*;
use support::checks;

#[test]
fn pdc_matches_vanilla_and_direct_sum() {
    let r = checks::pdc_equivalence(30, 7);
    assert!(r.transform_diff < 1e-10, "{r:?}");
    assert!(r.oracle_diff < 1e-10, "{r:?}");
    assert!(r.constant_response < 1e-12, "{r:?}");
}

#[test]
fn full_map_windows_are_dense_attention() {
    assert!(checks::full_window_attention_vs_dense(3) < 1e-10);
    let (g, o) = checks::lca_vs_gca(4);
    assert!(g < 1e-10 && o < 1e-10, "{g} {o}");
}

#[test]
fn cost_ratio_at_stage_one() {
    let g = attention_cost(56, 56, 96, 7, 7, AttentionScope::Global) as f64;
    let l = attention_cost(56, 56, 96, 7, 7, AttentionScope::Local) as f64;
    let hw = 3136.0f64;
    let want = (4.0 * hw * 96.0 * 96.0 + 2.0 * hw * hw * 96.0) / (4.0 * hw * 96.0 * 96.0 + 2.0 * 49.0 * hw * 96.0);
    assert!((g / l - want).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partition_round_trips(b in 1usize..3, gh in 1usize..4, gw in 1usize..4, wh in 1usize..4, ww in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let (h, w) = (gh * wh, gw * ww);
        let x = support::rand_t(&[b, c, h, w], seed);
        let win = window_partition(&x, wh, ww).unwrap();
        prop_assert_eq!(win.dims(), &[b * gh * gw, wh * ww, c]);
        let back = window_reverse(&win, b, h, w, wh, ww).unwrap();
        prop_assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn shifted_layout_is_a_permutation(g in 2usize..4, win in 2usize..4, c in 1usize..3, seed in 0u64..1000) {
        let n = g * win;
        let layout = WindowLayout::new(1, n, n, win, win, win / 2).unwrap();
        let x = support::rand_t(&[1, n * n, c], seed);
        let back = layout.reverse(&layout.partition(&x).unwrap()).unwrap();
        prop_assert_eq!(back.to_vec(), x.to_vec());
        let mut seen = layout.gather.to_vec();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n * n).collect::<Vec<_>>());
    }

    #[test]
    fn pdc_is_linear_and_blind_to_offsets(seed in 0u64..1000, level in -5.0f64..5.0, a in -2.0f64..2.0) {
        let x = support::rand_t(&[1, 2, 6, 6], seed);
        let w = support::rand_t(&[3, 2, 3, 3], seed + 1);
        let y = pdc_conv2d(&x, &w, 1, 0, 1).unwrap().to_vec();
        let shifted = pdc_conv2d(&x.add_scalar(level), &w, 1, 0, 1).unwrap().to_vec();
        prop_assert!(support::max_abs_diff(&y, &shifted) < 1e-9);
        let scaled = pdc_conv2d(&x.scale(a), &w, 1, 0, 1).unwrap().to_vec();
        let want: Vec<f64> = y.iter().map(|v| a * v).collect();
        prop_assert!(support::max_abs_diff(&scaled, &want) < 1e-9);
    }

    #[test]
    fn transformed_kernel_center_balances(seed in 0u64..1000) {
        let w = support::rand_vec(2 * 3 * 9, seed);
        let v = pdc_to_vanilla_kernel(&w, [2, 3, 3, 3]);
        for k in v.chunks(9) {
            prop_assert!(k.iter().sum::<f64>().abs() < 1e-12);
        }
        let _ = Tensor::<f64>::from_vec(v, (2, 3, 3, 3)).unwrap();
    }

    #[test]
    fn local_cost_is_linear_in_tokens(g in 1u64..20, c in 1u64..128, win in 1u64..8) {
        let side = g * win;
        let one = attention_cost(side, side, c, win, win, AttentionScope::Local);
        let four = attention_cost(2 * side, 2 * side, c, win, win, AttentionScope::Local);
        prop_assert_eq!(four, 4 * one);
        prop_assert!(attention_cost(side, side, c, win, win, AttentionScope::Global) >= one);
    }
}
