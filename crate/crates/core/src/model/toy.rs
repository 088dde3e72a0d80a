use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerWeights, ModelBundle, ModelConfig};
use crate::error::Result;
use crate::tensor::Matrix;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix<f32> {
    // Unit-variance-preserving uniform init: U(-a, a) with a = sqrt(3 / fan_in).
    let a = (3.0 / fan_in as f32).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

/// Seeded random model; identical `(config, seed)` pairs give identical weights.
pub fn random_model(config: &ModelConfig, seed: u64) -> Result<ModelBundle<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let token_embedding = uniform(&mut rng, config.vocab_size, d, 1);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![1.0; d],
            wq: uniform(&mut rng, d, d, d),
            wk: uniform(&mut rng, d, d, d),
            wv: uniform(&mut rng, d, d, d),
            wo: uniform(&mut rng, d, d, d),
            ffn_norm: vec![1.0; d],
            up_proj: uniform(&mut rng, config.d_ff, d, d),
            gate_proj: uniform(&mut rng, config.d_ff, d, d),
            down_proj: uniform(&mut rng, d, config.d_ff, config.d_ff),
        })
        .collect();
    let output_head = (!config.tie_embeddings).then(|| uniform(&mut rng, d, config.vocab_size, d));
    let model = ModelBundle { config: config.clone(), token_embedding, layers, final_norm: vec![1.0; d], output_head };
    model.validate()?;
    Ok(model)
}
