#![allow(dead_code)]

use moe_lens::model::{random_model, ModelConfig};
use moe_lens::profile::FrequencyMatrix;
use moe_lens::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The 4-layer toy used by the equivalence checks.
pub fn toy_model(seed: u64) -> Model {
    random_model(&ModelConfig::new(4, 64, 256, 4, 259, 64), seed).unwrap()
}

pub fn small_model(seed: u64) -> Model {
    random_model(&ModelConfig::new(2, 16, 32, 2, 259, 32), seed).unwrap()
}

pub fn random_tokens(rng: &mut impl Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..259)).collect()
}

/// Counts drawn uniformly in `0..=tokens`.
pub fn random_freq(rng: &mut impl Rng, layers: usize, experts: usize, tokens: u64, lang: &str) -> FrequencyMatrix {
    let counts = (0..layers * experts).map(|_| rng.gen_range(0..=tokens)).collect();
    FrequencyMatrix::new(layers, experts, counts, tokens, 1, lang, "m").unwrap()
}
