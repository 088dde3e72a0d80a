mod common;

use moe_lens::model::ModelConfig;
use moe_lens::profile::FrequencyMatrix;
use moe_lens::prune::{
    estimate_flops, mask_by_threshold, mask_by_top_percent, mask_random_like, top_percent_count, PruneMask, Provenance,
};
use proptest::prelude::*;

#[test]
fn frequency_equal_to_tau_is_kept() {
    // 5/20 = 0.25 exactly.
    let f = FrequencyMatrix::new(1, 3, vec![4, 5, 6], 20, 1, "la", "m").unwrap();
    let m = mask_by_threshold(&f, 0.25).unwrap();
    assert_eq!(m.keep(), &[false, true, true]);
    assert_eq!(mask_by_threshold(&f, 0.0).unwrap().kept_proportion(), 1.0);
}

#[test]
fn top_percent_rounds_half_up_and_prefers_lower_index() {
    assert_eq!(top_percent_count(50.0, 5), 3);
    assert_eq!(top_percent_count(80.0, 256), 205);
    let f = FrequencyMatrix::new(1, 4, vec![3, 7, 3, 3], 10, 1, "la", "m").unwrap();
    assert_eq!(mask_by_top_percent(&f, 50.0).unwrap().keep(), &[true, true, false, false]);
}

#[test]
fn random_masks_match_layer_counts_and_round_trip() {
    let mut rng = common::rng(3);
    let f = common::random_freq(&mut rng, 4, 32, 100, "la");
    let reference = mask_by_threshold(&f, 0.4).unwrap();
    for seed in 1..=3 {
        let r = mask_random_like(&reference, seed).unwrap();
        assert_eq!(r.layer_keep_counts(), reference.layer_keep_counts());
        assert_eq!(r, mask_random_like(&reference, seed).unwrap());
        let back = PruneMask::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(matches!(back.provenance(), Provenance::Random { seed: s, .. } if *s == seed));
    }
    assert_ne!(mask_random_like(&reference, 1).unwrap().keep(), mask_random_like(&reference, 2).unwrap().keep());
}

fn uniform_mask(layers: usize, experts: usize, removed: usize) -> PruneMask {
    let keep = (0..layers * experts).map(|i| i % experts >= removed).collect();
    PruneMask::new(layers, experts, keep, Provenance::Threshold { tau: 0.0 }, "uniform").unwrap()
}

#[test]
fn flops_anchor_llama2_7b() {
    let cfg = ModelConfig::new(32, 4096, 11008, 32, 32000, 4096);
    let est = estimate_flops(&cfg, &uniform_mask(32, 256, 64), 200).unwrap();
    assert!((est.ffn_param_reduction - 0.25).abs() < 1e-12);
    let pct = est.total_flops_reduction * 100.0;
    assert!((pct - 18.0).abs() <= 3.0, "{pct}");
}

#[test]
fn flops_anchor_70b_dims() {
    let cfg = ModelConfig::new(80, 8192, 28672, 64, 128256, 4096);
    let est = estimate_flops(&cfg, &uniform_mask(80, 256, 33), 200).unwrap();
    assert!((est.ffn_param_reduction * 100.0 - 12.9).abs() < 0.1);
    let pct = est.total_flops_reduction * 100.0;
    assert!((pct - 9.0).abs() <= 3.0, "{pct}");
}

#[test]
fn flops_hand_count_on_tiny_config() {
    // d=2, d_ff=4, one layer, vocab 3, seq 5, half of the FFN kept:
    // attention 8·4 + 4·5·2 = 72, FFN 6·2·4 = 48, head 2·2·3 = 12.
    let cfg = ModelConfig::new(1, 2, 4, 1, 3, 8);
    let est = estimate_flops(&cfg, &uniform_mask(1, 2, 1), 5).unwrap();
    assert_eq!(est.dense_flops_per_token, 132.0);
    assert_eq!(est.pruned_flops_per_token, 108.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn higher_tau_keeps_a_subset(seed in 0u64..10_000, t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let f = common::random_freq(&mut common::rng(seed), 3, 16, 40, "la");
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (a, b) = (mask_by_threshold(&f, lo).unwrap(), mask_by_threshold(&f, hi).unwrap());
        prop_assert!(b.keep().iter().zip(a.keep()).all(|(&h, &l)| !h || l));
        prop_assert!(b.kept_proportion() <= a.kept_proportion());
    }
}
