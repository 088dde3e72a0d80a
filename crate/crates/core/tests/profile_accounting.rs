mod common;

use moe_lens::corpus::bilingual_pair;
use moe_lens::profile::{profile_corpus, profile_tokenized, select_top_k, zscore_per_layer, FrequencyMatrix, ProfileConfig};
use moe_lens::split::{split_model, ClusterConfig};
use moe_lens::tensor::Matrix;
use moe_lens::tokenizer::Tokenizer;
use proptest::prelude::*;

fn corpus() -> Vec<String> {
    let (a, _) = bilingual_pair(3);
    a.corpus(30, 3..=9, 4)
}

#[test]
fn counts_sum_to_topk_times_tokens() {
    let model = common::small_model(1);
    let partition = split_model(&model, &ClusterConfig::new(8, 0)).unwrap();
    for k in [1, 3, 16] {
        let mut cfg = ProfileConfig::new(2, 8, "la", "small");
        cfg.top_k = k;
        cfg.max_tokens_per_sample = 20;
        let f = profile_corpus(&model, &partition, &corpus(), &Tokenizer::byte_level(), &cfg).unwrap();
        assert_eq!(f.counts().iter().sum::<u64>(), k as u64 * f.total_tokens());
        assert!(f.frequencies().as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        if k == 16 {
            assert!(f.counts().iter().all(|&c| c == f.total_tokens()));
        }
        let back = FrequencyMatrix::from_text(&f.to_text()).unwrap();
        assert_eq!(back.to_text(), f.to_text());
    }
}

#[test]
fn shards_merge_to_single_pass() {
    let model = common::small_model(2);
    let partition = split_model(&model, &ClusterConfig::new(8, 0)).unwrap();
    let tok = Tokenizer::byte_level();
    let samples: Vec<Vec<u32>> = corpus().iter().map(|t| tok.encode_sample(t, 24)).collect();
    let mut cfg = ProfileConfig::new(2, 8, "la", "small");
    cfg.top_k = 3;
    let single = profile_tokenized(&model, &partition, &samples, &cfg).unwrap();
    for workers in [2, 3, 7] {
        cfg.workers = workers;
        let sharded = profile_tokenized(&model, &partition, &samples, &cfg).unwrap();
        assert_eq!(sharded.to_text(), single.to_text());
    }
    cfg.workers = 1;
    let (a, b) = samples.split_at(11);
    let merged = profile_tokenized(&model, &partition, a, &cfg)
        .unwrap()
        .merge(&profile_tokenized(&model, &partition, b, &cfg).unwrap())
        .unwrap();
    assert_eq!(merged.counts(), single.counts());
    assert_eq!(merged.total_tokens(), single.total_tokens());
}

/// Sort every (score, layer, expert) and take the first k.
fn brute_top_k(z: &Matrix<f64>, k: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, usize, usize)> =
        (0..z.rows()).flat_map(|l| (0..z.cols()).map(move |e| (l, e))).map(|(l, e)| (z.get(l, e), l, e)).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut picked: Vec<(usize, usize)> = all[..k].iter().map(|t| (t.1, t.2)).collect();
    picked.sort();
    picked
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    // Coarse values so that ties actually occur.
    prop::collection::vec((-8i32..8).prop_map(|v| v as f64 * 0.5), 3 * 5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn top_k_matches_sorting(raw in scores(), k in 1usize..=15) {
        let z = Matrix::from_vec(3, 5, raw);
        let mut got = select_top_k(&z, k).unwrap();
        got.sort();
        prop_assert_eq!(got, brute_top_k(&z, k));
    }

    #[test]
    fn zscore_is_affine_invariant(raw in prop::collection::vec(-10.0f64..10.0, 3 * 5), scale in 0.1f64..20.0, shift in -50.0f64..50.0) {
        let x = Matrix::from_vec(3, 5, raw.clone());
        let y = Matrix::from_vec(3, 5, raw.iter().map(|v| v * scale + shift).collect());
        let (zx, zy) = (zscore_per_layer(&x), zscore_per_layer(&y));
        prop_assert!(zx.max_abs_diff(&zy) < 1e-8);
        for r in 0..3 {
            let mean: f64 = zx.row(r).iter().sum::<f64>() / 5.0;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}
