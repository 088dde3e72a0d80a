//! Expert keep-masks derived from activation frequencies, matched random
//! baselines and FLOPs accounting.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::profile::FrequencyMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Threshold { tau: f64 },
    TopPercent { percent: f64 },
    Random { seed: u64, per_layer_counts: Vec<usize> },
}

/// Per-layer boolean keep flags over experts.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    n_layers: usize,
    n_experts: usize,
    keep: Vec<bool>,
    provenance: Provenance,
    source: String,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    version: u32,
    n_layers: usize,
    n_experts: usize,
    provenance: Provenance,
    source: String,
    kept_proportion: f64,
    keep: String,
}

impl PruneMask {
    pub fn new(n_layers: usize, n_experts: usize, keep: Vec<bool>, provenance: Provenance, source: &str) -> Result<Self> {
        if n_layers == 0 || n_experts == 0 {
            return Err(Error::Empty("mask needs at least one layer and expert".into()));
        }
        if keep.len() != n_layers * n_experts {
            return Err(Error::DimMismatch(format!("{} flags for a {n_layers}x{n_experts} mask", keep.len())));
        }
        let mask = Self { n_layers, n_experts, keep, provenance, source: source.to_string() };
        if let Provenance::Random { per_layer_counts, .. } = &mask.provenance {
            if per_layer_counts.as_slice() != mask.layer_keep_counts().as_slice() {
                return Err(Error::MetadataMismatch("random mask keep counts disagree with provenance".into()));
            }
        }
        Ok(mask)
    }

    /// A mask keeping every expert.
    pub fn full(n_layers: usize, n_experts: usize) -> Self {
        Self::new(n_layers, n_experts, vec![true; n_layers * n_experts], Provenance::Threshold { tau: 0.0 }, "origin")
            .expect("non-empty dims")
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    #[inline]
    pub fn is_kept(&self, layer: usize, expert: usize) -> bool {
        self.keep[layer * self.n_experts + expert]
    }

    pub fn layer_keep_counts(&self) -> Vec<usize> {
        self.keep.chunks(self.n_experts).map(|r| r.iter().filter(|&&k| k).count()).collect()
    }

    /// Fraction of all `(layer, expert)` units that are kept.
    pub fn kept_proportion(&self) -> f64 {
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len() as f64
    }

    pub fn label(&self) -> String {
        match &self.provenance {
            Provenance::Threshold { tau } => format!("threshold(tau={tau})"),
            Provenance::TopPercent { percent } => format!("top_percent(p={percent})"),
            Provenance::Random { seed, .. } => format!("random(seed={seed})"),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MaskFile {
            version: 1,
            n_layers: self.n_layers,
            n_experts: self.n_experts,
            provenance: self.provenance.clone(),
            source: self.source.clone(),
            kept_proportion: self.kept_proportion(),
            keep: encode_bits(&self.keep),
        };
        Ok(serde_json::to_string(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MaskFile = serde_json::from_str(text)?;
        if file.version != 1 {
            return Err(Error::Parse(format!("unsupported mask version {}", file.version)));
        }
        let keep = decode_bits(&file.keep, file.n_layers * file.n_experts)?;
        Self::new(file.n_layers, file.n_experts, keep, file.provenance, &file.source)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Row-major bits, most significant bit first, zero-padded to whole bytes.
fn encode_bits(bits: &[bool]) -> String {
    let bytes: Vec<u8> = bits
        .chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i))))
        .collect();
    hex::encode(bytes)
}

fn decode_bits(text: &str, n: usize) -> Result<Vec<bool>> {
    let bytes = hex::decode(text).map_err(|e| Error::Parse(format!("keep bitstring: {e}")))?;
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Parse(format!("keep bitstring has {} bytes, expected {}", bytes.len(), n.div_ceil(8))));
    }
    Ok((0..n).map(|i| bytes[i / 8] >> (7 - i % 8) & 1 == 1).collect())
}

fn source_id(freq: &FrequencyMatrix) -> String {
    format!("{}/{}", freq.model_id(), freq.language_tag())
}

/// Keeps experts whose frequency is at least `tau`.
pub fn mask_by_threshold(freq: &FrequencyMatrix, tau: f64) -> Result<PruneMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::OutOfRange(format!("tau {tau} not in [0, 1]")));
    }
    let (l, e) = (freq.n_layers(), freq.n_experts());
    let keep = (0..l * e).map(|i| freq.frequency(i / e, i % e) >= tau).collect();
    PruneMask::new(l, e, keep, Provenance::Threshold { tau }, &source_id(freq))
}

/// `round(p · E / 100)` with halves rounded up.
pub fn top_percent_count(percent: f64, n_experts: usize) -> usize {
    (percent * n_experts as f64 / 100.0 + 0.5).floor() as usize
}

/// Keeps the `round(p · E / 100)` most frequent experts of every layer,
/// lower expert index first on ties.
pub fn mask_by_top_percent(freq: &FrequencyMatrix, percent: f64) -> Result<PruneMask> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::OutOfRange(format!("percent {percent} not in (0, 100]")));
    }
    let (l, e) = (freq.n_layers(), freq.n_experts());
    let n_keep = top_percent_count(percent, e);
    let mut keep = vec![false; l * e];
    for layer in 0..l {
        let mut order: Vec<usize> = (0..e).collect();
        // Counts share a denominator, so ranking by count ranks by frequency exactly.
        order.sort_by(|&a, &b| freq.count(layer, b).cmp(&freq.count(layer, a)).then(a.cmp(&b)));
        for &ex in &order[..n_keep] {
            keep[layer * e + ex] = true;
        }
    }
    PruneMask::new(l, e, keep, Provenance::TopPercent { percent }, &source_id(freq))
}

/// Random mask keeping, in every layer, as many experts as `reference` does.
pub fn mask_random_like(reference: &PruneMask, seed: u64) -> Result<PruneMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = reference.n_experts;
    let counts = reference.layer_keep_counts();
    let mut keep = vec![false; reference.keep.len()];
    for (layer, &count) in counts.iter().enumerate() {
        for ex in index::sample(&mut rng, e, count) {
            keep[layer * e + ex] = true;
        }
    }
    PruneMask::new(
        reference.n_layers,
        e,
        keep,
        Provenance::Random { seed, per_layer_counts: counts },
        &reference.source,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub dense_flops_per_token: f64,
    pub pruned_flops_per_token: f64,
    pub ffn_param_reduction: f64,
    pub total_flops_reduction: f64,
}

/// Per-token FLOPs, counting each multiply-accumulate as two operations.
///
/// Per layer: attention projections `8·d²` plus scores and mixing
/// `4·seq_len·d`; FFN `6·d·d_ff`, scaled by the layer's kept fraction.
/// Output head `2·d·vocab`. Norms, softmax and rotary costs are ignored.
pub fn estimate_flops(config: &ModelConfig, mask: &PruneMask, seq_len: usize) -> Result<FlopsEstimate> {
    if mask.n_layers != config.n_layers {
        return Err(Error::DimMismatch(format!("mask has {} layers, model {}", mask.n_layers, config.n_layers)));
    }
    if config.d_ff % mask.n_experts != 0 {
        return Err(Error::NotDivisible { d_ff: config.d_ff, n_experts: mask.n_experts });
    }
    let d = config.d_model as f64;
    let attn = 8.0 * d * d + 4.0 * seq_len as f64 * d;
    let ffn = 6.0 * d * config.d_ff as f64;
    let head = 2.0 * d * config.vocab_size as f64;
    let layers = config.n_layers as f64;
    let dense = layers * (attn + ffn) + head;
    let kept_ffn: f64 = mask.layer_keep_counts().iter().map(|&k| ffn * k as f64 / mask.n_experts as f64).sum();
    let pruned = layers * attn + kept_ffn + head;
    let ffn_param_reduction = 1.0 - kept_ffn / (layers * ffn);
    Ok(FlopsEstimate {
        dense_flops_per_token: dense,
        pruned_flops_per_token: pruned,
        ffn_param_reduction,
        total_flops_reduction: 1.0 - pruned / dense,
    })
}
