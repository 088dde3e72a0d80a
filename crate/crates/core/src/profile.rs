//! Cross-layer expert selection and activation-frequency counting.
//!
//! For each token: sum the pre-down-projection activations over each
//! expert's neurons, Z-score those sums within every layer, then take the
//! global top-K `(layer, expert)` pairs across all layers and count them.
//!
//! Every token fed to the model is counted, BOS included: a sample is
//! `BOS + text`, cut to `min(max_tokens_per_sample, max_seq_len)` tokens.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward, ActivationTap, FnSink, ModelBundle};
use crate::scalar::Scalar;
use crate::split::ExpertPartition;
use crate::tensor::Matrix;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileConfig {
    pub top_k: usize,
    /// Samples are truncated to this many tokens (and to the model's `max_seq_len`).
    pub max_tokens_per_sample: usize,
    pub max_samples: usize,
    pub language_tag: String,
    pub model_id: String,
    /// Number of corpus shards profiled concurrently. Output does not depend on it.
    pub workers: usize,
}

impl ProfileConfig {
    /// Defaults: top-K at 10% of all experts, 200 tokens per sample, 10 000 samples.
    pub fn new(n_layers: usize, n_experts: usize, language_tag: &str, model_id: &str) -> Self {
        Self {
            top_k: default_top_k(n_layers, n_experts),
            max_tokens_per_sample: 200,
            max_samples: 10_000,
            language_tag: language_tag.to_string(),
            model_id: model_id.to_string(),
            workers: 1,
        }
    }
}

/// `round(0.1 · n_layers · n_experts)`, at least 1.
pub fn default_top_k(n_layers: usize, n_experts: usize) -> usize {
    ((n_layers * n_experts) as f64 * 0.1).round().max(1.0) as usize
}

/// Per-(layer, expert) selection counts for one model and language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyMatrix {
    n_layers: usize,
    n_experts: usize,
    counts: Vec<u64>,
    total_tokens: u64,
    top_k: usize,
    language_tag: String,
    model_id: String,
    /// Digest of the partition used; not part of the file format.
    partition_id: Option<String>,
}

fn check_label(kind: &str, v: &str) -> Result<()> {
    if v.is_empty() || v.chars().any(char::is_whitespace) {
        return Err(Error::InvalidConfig(format!("{kind} must be a non-empty token without whitespace, got {v:?}")));
    }
    Ok(())
}

impl FrequencyMatrix {
    pub fn new(
        n_layers: usize,
        n_experts: usize,
        counts: Vec<u64>,
        total_tokens: u64,
        top_k: usize,
        language_tag: &str,
        model_id: &str,
    ) -> Result<Self> {
        check_label("language tag", language_tag)?;
        check_label("model id", model_id)?;
        if n_layers == 0 || n_experts == 0 {
            return Err(Error::Empty("frequency matrix needs at least one layer and expert".into()));
        }
        if counts.len() != n_layers * n_experts {
            return Err(Error::DimMismatch(format!("{} counts for a {n_layers}x{n_experts} matrix", counts.len())));
        }
        if let Some(c) = counts.iter().find(|&&c| c > total_tokens) {
            return Err(Error::OutOfRange(format!("count {c} exceeds total tokens {total_tokens}")));
        }
        Ok(Self {
            n_layers,
            n_experts,
            counts,
            total_tokens,
            top_k,
            language_tag: language_tag.to_string(),
            model_id: model_id.to_string(),
            partition_id: None,
        })
    }

    /// An all-zero matrix with no tokens.
    pub fn empty(n_layers: usize, n_experts: usize, top_k: usize, language_tag: &str, model_id: &str) -> Result<Self> {
        Self::new(n_layers, n_experts, vec![0; n_layers * n_experts], 0, top_k, language_tag, model_id)
    }

    pub fn with_partition_id(mut self, id: impl Into<String>) -> Self {
        self.partition_id = Some(id.into());
        self
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn language_tag(&self) -> &str {
        &self.language_tag
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn partition_id(&self) -> Option<&str> {
        self.partition_id.as_deref()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, layer: usize, expert: usize) -> u64 {
        self.counts[layer * self.n_experts + expert]
    }

    /// `count / total_tokens`; zero when no tokens were profiled.
    pub fn frequency(&self, layer: usize, expert: usize) -> f64 {
        if self.total_tokens == 0 {
            0.0
        } else {
            self.count(layer, expert) as f64 / self.total_tokens as f64
        }
    }

    pub fn frequencies(&self) -> Matrix<f64> {
        Matrix::from_fn(self.n_layers, self.n_experts, |l, e| self.frequency(l, e))
    }

    /// Whether `Σ counts = top_k · total_tokens`.
    pub fn is_conserved(&self) -> bool {
        self.counts.iter().sum::<u64>() == self.top_k as u64 * self.total_tokens
    }

    /// Adds counts and token totals of two matrices with equal metadata.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if (self.n_layers, self.n_experts) != (other.n_layers, other.n_experts) {
            return Err(Error::DimMismatch(format!(
                "{}x{} vs {}x{}",
                self.n_layers, self.n_experts, other.n_layers, other.n_experts
            )));
        }
        if self.model_id != other.model_id || self.language_tag != other.language_tag || self.top_k != other.top_k {
            return Err(Error::MetadataMismatch(format!(
                "({}, {}, k={}) vs ({}, {}, k={})",
                self.model_id, self.language_tag, self.top_k, other.model_id, other.language_tag, other.top_k
            )));
        }
        if let (Some(a), Some(b)) = (&self.partition_id, &other.partition_id) {
            if a != b {
                return Err(Error::MetadataMismatch(format!("partition {a} vs {b}")));
            }
        }
        Ok(Self {
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
            total_tokens: self.total_tokens + other.total_tokens,
            partition_id: self.partition_id.clone().or_else(|| other.partition_id.clone()),
            ..self.clone()
        })
    }

    /// MOEFREQ text: a header line then one CSV row of counts per layer.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "MOEFREQ v1 layers={} experts={} tokens={} topk={} lang={} model={}\n",
            self.n_layers, self.n_experts, self.total_tokens, self.top_k, self.language_tag, self.model_id
        );
        for row in self.counts.chunks(self.n_experts) {
            let line: Vec<String> = row.iter().map(u64::to_string).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty frequency file".into()))?;
        let fields = parse_header(header, &["layers", "experts", "tokens", "topk", "lang", "model"])?;
        let num = |i: usize| -> Result<u64> {
            fields[i].parse().map_err(|_| Error::Parse(format!("bad numeric header field {:?}", fields[i])))
        };
        let (n_layers, n_experts, tokens, top_k) = (num(0)? as usize, num(1)? as usize, num(2)?, num(3)? as usize);
        let mut counts = Vec::with_capacity(n_layers * n_experts);
        for (l, line) in lines.by_ref().take(n_layers).enumerate() {
            let row: Vec<u64> = line
                .split(',')
                .map(|c| c.parse().map_err(|_| Error::Parse(format!("row {l}: bad count {c:?}"))))
                .collect::<Result<_>>()?;
            if row.len() != n_experts {
                return Err(Error::Parse(format!("row {l}: {} counts, expected {n_experts}", row.len())));
            }
            counts.extend(row);
        }
        if counts.len() != n_layers * n_experts {
            return Err(Error::Parse(format!("expected {n_layers} rows")));
        }
        if lines.any(|l| !l.is_empty()) {
            return Err(Error::Parse("trailing data after count rows".into()));
        }
        Self::new(n_layers, n_experts, counts, tokens, top_k, &fields[4], &fields[5])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Parses `MOEFREQ v1 key=value ...` requiring `keys` in this exact order.
fn parse_header(line: &str, keys: &[&str]) -> Result<Vec<String>> {
    let mut parts = line.split(' ');
    if parts.next() != Some("MOEFREQ") || parts.next() != Some("v1") {
        return Err(Error::Parse(format!("not a MOEFREQ v1 header: {line:?}")));
    }
    let rest: Vec<&str> = parts.collect();
    if rest.len() != keys.len() {
        return Err(Error::Parse(format!("expected {} header fields, found {}", keys.len(), rest.len())));
    }
    rest.iter()
        .zip(keys)
        .map(|(field, key)| {
            field
                .strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("expected header field {key}=, found {field:?}")))
        })
        .collect()
}

/// Sum of one layer's activations over each expert's neurons.
pub fn score_layer<T: Scalar>(values: &[T], assignment: &[usize], n_experts: usize) -> Vec<T> {
    let mut scores = vec![T::zero(); n_experts];
    for (&v, &e) in values.iter().zip(assignment) {
        scores[e] += v;
    }
    scores
}

/// Signed per-expert activation sums for one token; `taps` holds one entry per layer.
pub fn score_experts<T: Scalar>(taps: &[ActivationTap<T>], partition: &ExpertPartition) -> Result<Matrix<T>> {
    let e = partition.n_experts();
    let mut scores = Matrix::zeros(partition.n_layers(), e);
    let mut seen = vec![false; partition.n_layers()];
    for tap in taps {
        if tap.layer >= partition.n_layers() || tap.values.len() != partition.d_ff() {
            return Err(Error::DimMismatch(format!(
                "tap for layer {} with {} values does not fit the partition",
                tap.layer,
                tap.values.len()
            )));
        }
        seen[tap.layer] = true;
        scores.row_mut(tap.layer).copy_from_slice(&score_layer(&tap.values, partition.layer(tap.layer), e));
    }
    if let Some(l) = seen.iter().position(|s| !s) {
        return Err(Error::Empty(format!("missing activation tap for layer {l}")));
    }
    Ok(scores)
}

/// Row-wise standardization with population std; a zero-variance row becomes all zeros.
pub fn zscore_per_layer<T: Scalar>(scores: &Matrix<T>) -> Matrix<T> {
    let mut out = scores.clone();
    for r in 0..out.rows() {
        zscore_in_place(out.row_mut(r));
    }
    out
}

fn zscore_in_place<T: Scalar>(row: &mut [T]) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if std > T::zero() {
        row.iter_mut().for_each(|v| *v = (*v - mean) / std);
    } else {
        row.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// The `k` highest-scoring `(layer, expert)` pairs in rank order; ties go to
/// the lower layer, then the lower expert.
pub fn select_top_k<T: Scalar>(z: &Matrix<T>, k: usize) -> Result<Vec<(usize, usize)>> {
    let n = z.rows() * z.cols();
    if k == 0 || k > n {
        return Err(Error::OutOfRange(format!("top_k {k} not in 1..={n}")));
    }
    let values = z.as_slice();
    let mut idx: Vec<usize> = (0..n).collect();
    // Flat index order equals (layer, expert) order.
    let cmp = |a: &usize, b: &usize| values[*b].partial_cmp(&values[*a]).expect("finite z").then(a.cmp(b));
    if k < n {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    Ok(idx.into_iter().map(|i| (i / z.cols(), i % z.cols())).collect())
}

/// Profiles one tokenized sample, adding into `counts` (row-major `n_layers × E`).
fn profile_tokens<T: Scalar>(
    model: &ModelBundle<T>,
    partition: &ExpertPartition,
    tokens: &[u32],
    top_k: usize,
    counts: &mut [u64],
) -> Result<()> {
    let (n_layers, e) = (partition.n_layers(), partition.n_experts());
    let mut scores = vec![Matrix::<T>::zeros(n_layers, e); tokens.len()];
    let mut sink = FnSink(|layer: usize, pos: usize, values: &[T]| {
        scores[pos].row_mut(layer).copy_from_slice(&score_layer(values, partition.layer(layer), e));
    });
    forward(model, tokens, Some(&mut sink))?;
    for token_scores in &scores {
        for (l, ex) in select_top_k(&zscore_per_layer(token_scores), top_k)? {
            counts[l * e + ex] += 1;
        }
    }
    Ok(())
}

/// Profiles a corpus of raw texts.
pub fn profile_corpus<T: Scalar>(
    model: &ModelBundle<T>,
    partition: &ExpertPartition,
    corpus: &[String],
    tokenizer: &Tokenizer,
    cfg: &ProfileConfig,
) -> Result<FrequencyMatrix> {
    tokenizer.check_model_vocab(model.config.vocab_size)?;
    let max_len = cfg.max_tokens_per_sample.min(model.config.max_seq_len);
    let samples: Vec<Vec<u32>> =
        corpus.iter().take(cfg.max_samples).map(|t| tokenizer.encode_sample(t, max_len)).collect();
    profile_tokenized(model, partition, &samples, cfg)
}

/// Profiles pre-tokenized samples, splitting them into `cfg.workers` shards.
pub fn profile_tokenized<T: Scalar>(
    model: &ModelBundle<T>,
    partition: &ExpertPartition,
    samples: &[Vec<u32>],
    cfg: &ProfileConfig,
) -> Result<FrequencyMatrix> {
    partition.check_model(&model.config)?;
    let samples = &samples[..samples.len().min(cfg.max_samples)];
    if samples.is_empty() || samples.iter().all(Vec::is_empty) {
        return Err(Error::Empty("corpus has no tokens".into()));
    }
    let (n_layers, e) = (partition.n_layers(), partition.n_experts());
    if cfg.top_k == 0 || cfg.top_k > n_layers * e {
        return Err(Error::OutOfRange(format!("top_k {} not in 1..={}", cfg.top_k, n_layers * e)));
    }
    let shard_len = samples.len().div_ceil(cfg.workers.max(1));
    let profile_shard = |shard: &[Vec<u32>]| -> Result<FrequencyMatrix> {
        let mut counts = vec![0u64; n_layers * e];
        let mut tokens = 0u64;
        for s in shard.iter().filter(|s| !s.is_empty()) {
            profile_tokens(model, partition, s, cfg.top_k, &mut counts)?;
            tokens += s.len() as u64;
        }
        FrequencyMatrix::new(n_layers, e, counts, tokens, cfg.top_k, &cfg.language_tag, &cfg.model_id)
            .map(|m| m.with_partition_id(partition.digest()))
    };
    let shards: Vec<FrequencyMatrix> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
        pool.install(|| samples.par_chunks(shard_len).map(profile_shard).collect::<Result<_>>())?
    } else {
        vec![profile_shard(samples)?]
    };
    let mut iter = shards.into_iter();
    let first = iter.next().expect("at least one shard");
    let merged = iter.try_fold(first, |acc, m| acc.merge(&m))?;
    assert!(merged.is_conserved(), "count conservation violated");
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_sum_scores() {
        let p = ExpertPartition::new(vec![vec![0, 0, 1, 1]], 2, 0).unwrap();
        let tap = ActivationTap { layer: 0, token_position: 0, values: vec![1.0f64, 2.0, 3.0, 4.0] };
        let s = score_experts(&[tap.clone()], &p).unwrap();
        assert_eq!(s.as_slice(), &[3.0, 7.0]);
        let zero = ActivationTap { values: vec![0.0; 4], ..tap };
        assert!(score_experts(&[zero], &p).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_layer_tap() {
        let p = ExpertPartition::new(vec![vec![0, 1], vec![1, 0]], 2, 0).unwrap();
        let tap = ActivationTap { layer: 0, token_position: 0, values: vec![1.0f32, 2.0] };
        assert!(matches!(score_experts(&[tap], &p), Err(Error::Empty(_))));
    }

    #[test]
    fn zscore_known_row() {
        let z = zscore_per_layer(&Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 5.0, 5.0, 5.0]));
        let expected = 1.5f64.sqrt();
        assert!((z.get(0, 0) + expected).abs() < 1e-12);
        assert_eq!(z.get(0, 1), 0.0);
        assert!((z.get(0, 2) - expected).abs() < 1e-12);
        assert_eq!(z.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn top_k_tie_rule() {
        let z = Matrix::from_vec(2, 3, vec![3.0f64, 1.0, 2.0, 2.0, 2.0, 0.0]);
        assert_eq!(select_top_k(&z, 3).unwrap(), vec![(0, 0), (0, 2), (1, 0)]);
        assert_eq!(select_top_k(&z, 6).unwrap().len(), 6);
        assert_eq!(select_top_k(&z, 1).unwrap(), vec![(0, 0)]);
        assert!(select_top_k(&z, 7).is_err());
        assert!(select_top_k(&z, 0).is_err());
    }

    #[test]
    fn frequency_counting() {
        let mut counts = vec![0u64; 4];
        counts[1] = 3;
        let m = FrequencyMatrix::new(2, 2, counts, 10, 1, "en", "toy").unwrap();
        assert!((m.frequency(0, 1) - 0.3).abs() < 1e-15);
        assert!(FrequencyMatrix::new(1, 2, vec![11, 0], 10, 1, "en", "toy").is_err());
        assert!(FrequencyMatrix::new(1, 2, vec![1, 0], 10, 1, "e n", "toy").is_err());
    }

    #[test]
    fn merge_identity_and_metadata() {
        let a = FrequencyMatrix::new(1, 3, vec![2, 1, 0], 3, 1, "en", "m").unwrap();
        let z = FrequencyMatrix::empty(1, 3, 1, "en", "m").unwrap();
        assert_eq!(a.merge(&z).unwrap(), a);
        let other_lang = FrequencyMatrix::empty(1, 3, 1, "fr", "m").unwrap();
        assert!(matches!(a.merge(&other_lang), Err(Error::MetadataMismatch(_))));
        let other_dims = FrequencyMatrix::empty(1, 2, 1, "en", "m").unwrap();
        assert!(matches!(a.merge(&other_dims), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn text_format() {
        let a = FrequencyMatrix::new(2, 3, vec![2, 1, 0, 0, 1, 2], 3, 2, "en", "toy-1").unwrap();
        let text = a.to_text();
        assert_eq!(text, "MOEFREQ v1 layers=2 experts=3 tokens=3 topk=2 lang=en model=toy-1\n2,1,0\n0,1,2\n");
        assert_eq!(FrequencyMatrix::from_text(&text).unwrap(), a);
        assert!(FrequencyMatrix::from_text("MOEFREQ v1 layers=2 experts=3\n").is_err());
        assert!(FrequencyMatrix::from_text(&text.replace("2,1,0", "2,1")).is_err());
    }

    #[test]
    fn default_top_k_is_ten_percent() {
        assert_eq!(default_top_k(32, 256), 819);
        assert_eq!(default_top_k(4, 16), 6);
    }
}
