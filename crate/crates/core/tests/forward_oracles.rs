mod common;

use moe_lens::model::{forward, forward_masked, random_model, ActivationTap, CompactModel, ModelConfig};
use moe_lens::prune::{PruneMask, Provenance};
use moe_lens::split::{split_model, ClusterConfig};
use moe_lens::Model64;
use rand::Rng;

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn rms(x: &[f64], w: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    x.iter().zip(w).map(|(v, g)| v / (ms + eps).sqrt() * g).collect()
}

fn matvec(m: &moe_lens::tensor::Matrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.get(r, c) * x[c]).sum()).collect()
}

/// First-position FFN activation, computed with scalar loops: at position 0
/// attention returns the token's own value vector.
fn first_position_tap(m: &Model64, token: u32) -> Vec<f64> {
    let l = &m.layers[0];
    let eps = m.config.norm_eps;
    let mut h: Vec<f64> = m.token_embedding.row(token as usize).to_vec();
    let v = matvec(&l.wv, &rms(&h, &l.attn_norm, eps));
    let o = matvec(&l.wo, &v);
    h.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
    let x = rms(&h, &l.ffn_norm, eps);
    let (up, gate) = (matvec(&l.up_proj, &x), matvec(&l.gate_proj, &x));
    up.iter().zip(&gate).map(|(u, g)| silu(*g) * u).collect()
}

#[test]
fn tap_matches_scalar_ffn() {
    let m: Model64 = common::small_model(3).cast();
    for token in [0u32, 65, 256] {
        let mut taps: Vec<ActivationTap<f64>> = Vec::new();
        forward(&m, &[token], Some(&mut taps)).unwrap();
        let expected = first_position_tap(&m, token);
        for (a, b) in taps[0].values.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn full_mask_is_bitwise_dense_and_compact_agrees() {
    let model = common::toy_model(11);
    let partition = split_model(&model, &ClusterConfig::new(16, 0)).unwrap();
    let tokens = common::random_tokens(&mut common::rng(4), 40);
    let dense = forward(&model, &tokens, None).unwrap();
    let full = PruneMask::full(4, 16);
    assert_eq!(forward_masked(&model, &tokens, &partition, &full, None).unwrap(), dense);
    let compact = CompactModel::new(&model, &partition, &full).unwrap();
    assert!(compact.forward(&tokens).unwrap().max_abs_diff(&dense) <= 1e-5);
}

#[test]
fn compact_path_matches_masked_for_partial_masks() {
    let model = common::toy_model(12);
    let partition = split_model(&model, &ClusterConfig::new(16, 1)).unwrap();
    let mut rng = common::rng(8);
    let tokens = common::random_tokens(&mut rng, 32);
    let keep: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.7)).collect();
    let mask = PruneMask::new(4, 16, keep, Provenance::Threshold { tau: 0.5 }, "t").unwrap();
    let masked = forward_masked(&model, &tokens, &partition, &mask, None).unwrap();
    let compact = CompactModel::new(&model, &partition, &mask).unwrap();
    assert!(compact.forward(&tokens).unwrap().max_abs_diff(&masked) <= 1e-5);
    let kept_neurons: usize = compact.kept_neurons().iter().map(Vec::len).sum();
    assert_eq!(kept_neurons, mask.keep().iter().filter(|&&k| k).count() * 16);
}

#[test]
fn single_expert_mask_equals_restricted_down_projection() {
    let model: Model64 = random_model(&ModelConfig::new(2, 16, 64, 2, 259, 32), 5).unwrap().cast();
    let partition = split_model(&model, &ClusterConfig::new(8, 2)).unwrap();
    let tokens = common::random_tokens(&mut common::rng(1), 20);
    for layer in 0..2 {
        for expert in [0, 5] {
            // Only `expert` survives in `layer`; every other layer is untouched.
            let keep: Vec<bool> = (0..16).map(|i| i / 8 != layer || i % 8 == expert).collect();
            let mask = PruneMask::new(2, 8, keep, Provenance::Threshold { tau: 0.0 }, "t").unwrap();
            let mut restricted = model.clone();
            let down = &mut restricted.layers[layer].down_proj;
            for n in 0..64 {
                if partition.layer(layer)[n] != expert {
                    for r in 0..16 {
                        down.set(r, n, 0.0);
                    }
                }
            }
            let a = forward_masked(&model, &tokens, &partition, &mask, None).unwrap();
            let b = forward(&restricted, &tokens, None).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-6);
        }
    }
}

#[test]
fn masking_a_layer_leaves_earlier_taps_alone() {
    let model = common::toy_model(13);
    let partition = split_model(&model, &ClusterConfig::new(16, 3)).unwrap();
    let tokens = common::random_tokens(&mut common::rng(2), 12);
    let keep: Vec<bool> = (0..64).map(|i| i / 16 != 2 || i % 2 == 0).collect();
    let mask = PruneMask::new(4, 16, keep, Provenance::Threshold { tau: 0.1 }, "t").unwrap();
    let (mut dense, mut masked) = (Vec::new(), Vec::new());
    forward(&model, &tokens, Some(&mut dense)).unwrap();
    forward_masked(&model, &tokens, &partition, &mask, Some(&mut masked)).unwrap();
    assert_eq!(dense.len(), 4 * 12);
    assert_eq!(masked.len(), dense.len());
    for (d, m) in dense.iter().zip(&masked) {
        assert_eq!((d.layer, d.token_position), (m.layer, m.token_position));
        match d.layer {
            0 | 1 => assert_eq!(d.values, m.values),
            2 => {
                for (n, (&dv, &mv)) in d.values.iter().zip(&m.values).enumerate() {
                    let kept = partition.layer(2)[n] % 2 == 0;
                    assert_eq!(mv, if kept { dv } else { 0.0 });
                }
            }
            _ => {}
        }
    }
}
