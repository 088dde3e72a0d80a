//! Minimal Llama-style decoder: weights, the MLTB container and the forward pass.
//!
//! Pre-norm RMSNorm blocks, rotary positions, causal multi-head attention and a
//! gated-silu FFN `down(silu(gate(x)) ⊙ up(x))`. No biases.

mod container;
mod forward;
mod toy;

pub use container::{load_model, read_model, save_model, write_model, MLTB_MAGIC};
pub(crate) use forward::{apply_rope, check_tokens, neuron_keep, rms_norm, rope_tables};
pub use forward::{forward, forward_masked, ActivationSink, ActivationTap, CompactModel, FnSink};
pub use toy::random_model;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

fn default_rope_theta() -> f64 {
    10000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// FFN intermediate width.
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// When set the output head is the transposed token embedding and is not stored.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn new(n_layers: usize, d_model: usize, d_ff: usize, n_heads: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers,
            d_model,
            d_ff,
            n_heads,
            vocab_size,
            max_seq_len,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            tie_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::InvalidConfig(format!("head_dim {} must be even for rotary encoding", self.head_dim())));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::InvalidConfig("rope_theta must be positive".into()));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return Err(Error::InvalidConfig("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Total parameter count of a bundle with this config.
    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 3 * d * self.d_ff;
        let head = if self.tie_embeddings { 0 } else { d * self.vocab_size };
        self.vocab_size * d + self.n_layers * per_layer + d + head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    /// `d_model × d_model`, output-major.
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_norm: Vec<T>,
    /// `d_ff × d_model`.
    pub up_proj: Matrix<T>,
    /// `d_ff × d_model`.
    pub gate_proj: Matrix<T>,
    /// `d_model × d_ff`.
    pub down_proj: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    /// `vocab_size × d_model`.
    pub token_embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    /// `d_model × vocab_size`; `None` when tied to the embedding.
    pub output_head: Option<Matrix<T>>,
}

impl<T: Scalar> ModelBundle<T> {
    /// All tensors in canonical container order as `(name, dims, values)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        out.push(("token_embedding".into(), dims(&self.token_embedding), self.token_embedding.as_slice()));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm"), vec![l.attn_norm.len()], &l.attn_norm));
            out.push((format!("layer{i}.wq"), dims(&l.wq), l.wq.as_slice()));
            out.push((format!("layer{i}.wk"), dims(&l.wk), l.wk.as_slice()));
            out.push((format!("layer{i}.wv"), dims(&l.wv), l.wv.as_slice()));
            out.push((format!("layer{i}.wo"), dims(&l.wo), l.wo.as_slice()));
            out.push((format!("layer{i}.ffn_norm"), vec![l.ffn_norm.len()], &l.ffn_norm));
            out.push((format!("layer{i}.up_proj"), dims(&l.up_proj), l.up_proj.as_slice()));
            out.push((format!("layer{i}.gate_proj"), dims(&l.gate_proj), l.gate_proj.as_slice()));
            out.push((format!("layer{i}.down_proj"), dims(&l.down_proj), l.down_proj.as_slice()));
        }
        out.push(("final_norm".into(), vec![self.final_norm.len()], &self.final_norm));
        if let Some(h) = &self.output_head {
            out.push(("output_head".into(), dims(h), h.as_slice()));
        }
        out
    }

    /// Checks tensor shapes against the config and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::InvalidConfig(format!(
                "bundle has {} layers, config declares {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        if self.output_head.is_some() == self.config.tie_embeddings {
            return Err(Error::InvalidConfig("output_head presence disagrees with tie_embeddings".into()));
        }
        for ((name, expected), (found_name, found, values)) in expected_tensors(&self.config).into_iter().zip(self.tensors()) {
            debug_assert_eq!(name, found_name);
            if expected != found {
                return Err(Error::ShapeMismatch { name, expected, found });
            }
            if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { name, offset: (pos * std::mem::size_of::<T>()) as u64 });
            }
        }
        Ok(())
    }

    /// Output head as `d_model × vocab` regardless of tying.
    pub fn head(&self) -> std::borrow::Cow<'_, Matrix<T>> {
        match &self.output_head {
            Some(h) => std::borrow::Cow::Borrowed(h),
            None => std::borrow::Cow::Owned(self.token_embedding.transpose()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        let c = |m: &Matrix<T>| m.map(|v| U::of(v.as_f64()));
        let v = |x: &[T]| x.iter().map(|&a| U::of(a.as_f64())).collect::<Vec<U>>();
        ModelBundle {
            config: self.config.clone(),
            token_embedding: c(&self.token_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: v(&l.attn_norm),
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    ffn_norm: v(&l.ffn_norm),
                    up_proj: c(&l.up_proj),
                    gate_proj: c(&l.gate_proj),
                    down_proj: c(&l.down_proj),
                })
                .collect(),
            final_norm: v(&self.final_norm),
            output_head: self.output_head.as_ref().map(c),
        }
    }

    /// Bundle with every tensor set to zero and unit norm weights.
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.d_model;
        let layer = LayerWeights {
            attn_norm: vec![T::one(); d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: vec![T::one(); d],
            up_proj: Matrix::zeros(config.d_ff, d),
            gate_proj: Matrix::zeros(config.d_ff, d),
            down_proj: Matrix::zeros(d, config.d_ff),
        };
        Self {
            token_embedding: Matrix::zeros(config.vocab_size, d),
            layers: vec![layer; config.n_layers],
            final_norm: vec![T::one(); d],
            output_head: (!config.tie_embeddings).then(|| Matrix::zeros(d, config.vocab_size)),
            config,
        }
    }
}

fn dims<T: Scalar>(m: &Matrix<T>) -> Vec<usize> {
    vec![m.rows(), m.cols()]
}

/// Canonical `(name, dims)` list for a config.
pub fn expected_tensors(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![("token_embedding".to_string(), vec![config.vocab_size, d])];
    for i in 0..config.n_layers {
        out.push((format!("layer{i}.attn_norm"), vec![d]));
        for p in ["wq", "wk", "wv", "wo"] {
            out.push((format!("layer{i}.{p}"), vec![d, d]));
        }
        out.push((format!("layer{i}.ffn_norm"), vec![d]));
        out.push((format!("layer{i}.up_proj"), vec![config.d_ff, d]));
        out.push((format!("layer{i}.gate_proj"), vec![config.d_ff, d]));
        out.push((format!("layer{i}.down_proj"), vec![d, config.d_ff]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    if !config.tie_embeddings {
        out.push(("output_head".to_string(), vec![d, config.vocab_size]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(1, 8, 16, 2, 32, 16).validate().is_ok());
        assert!(ModelConfig::new(1, 9, 16, 2, 32, 16).validate().is_err());
        assert!(ModelConfig::new(0, 8, 16, 2, 32, 16).validate().is_err());
        assert!(ModelConfig::new(1, 6, 16, 2, 32, 16).validate().is_err(), "odd head dim");
    }

    #[test]
    fn param_count_matches_tensors() {
        let cfg = ModelConfig::new(2, 8, 16, 2, 32, 16);
        let m = ModelBundle::<f32>::zeros(cfg.clone());
        let n: usize = m.tensors().iter().map(|t| t.2.len()).sum();
        assert_eq!(n, cfg.n_params());
        m.validate().unwrap();
    }
}
