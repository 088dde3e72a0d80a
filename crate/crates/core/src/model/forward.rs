use super::{LayerWeights, ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::prune::PruneMask;
use crate::scalar::{dot, silu, Scalar};
use crate::split::ExpertPartition;
use crate::tensor::Matrix;

/// Hidden FFN representation before the down-projection for one `(layer, position)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTap<T> {
    pub layer: usize,
    pub token_position: usize,
    pub values: Vec<T>,
}

/// Receives pre-down-projection activations during a forward pass.
pub trait ActivationSink<T> {
    fn record(&mut self, layer: usize, position: usize, values: &[T]);
}

impl<T: Scalar> ActivationSink<T> for Vec<ActivationTap<T>> {
    fn record(&mut self, layer: usize, position: usize, values: &[T]) {
        self.push(ActivationTap { layer, token_position: position, values: values.to_vec() });
    }
}

/// Adapts a closure into an [`ActivationSink`].
pub struct FnSink<F>(pub F);

impl<T, F: FnMut(usize, usize, &[T])> ActivationSink<T> for FnSink<F> {
    fn record(&mut self, layer: usize, position: usize, values: &[T]) {
        (self.0)(layer, position, values)
    }
}

/// Logits (`seq_len × vocab_size`) for every position.
pub fn forward<T: Scalar>(
    model: &ModelBundle<T>,
    tokens: &[u32],
    sink: Option<&mut dyn ActivationSink<T>>,
) -> Result<Matrix<T>> {
    let head = model.head();
    run(&model.config, &model.token_embedding, &model.layers, &model.final_norm, &head, tokens, sink, None)
}

/// Forward pass in which every FFN neuron of a dropped expert contributes zero.
pub fn forward_masked<T: Scalar>(
    model: &ModelBundle<T>,
    tokens: &[u32],
    partition: &ExpertPartition,
    mask: &PruneMask,
    sink: Option<&mut dyn ActivationSink<T>>,
) -> Result<Matrix<T>> {
    let keep = neuron_keep(&model.config, partition, mask)?;
    let head = model.head();
    run(&model.config, &model.token_embedding, &model.layers, &model.final_norm, &head, tokens, sink, Some(&keep))
}

/// Per-layer neuron keep flags derived from an expert mask.
pub(crate) fn neuron_keep(config: &ModelConfig, partition: &ExpertPartition, mask: &PruneMask) -> Result<Vec<Vec<bool>>> {
    partition.check_model(config)?;
    if mask.n_layers() != partition.n_layers() || mask.n_experts() != partition.n_experts() {
        return Err(Error::DimMismatch(format!(
            "mask is {}x{}, partition is {}x{}",
            mask.n_layers(),
            mask.n_experts(),
            partition.n_layers(),
            partition.n_experts()
        )));
    }
    Ok((0..partition.n_layers())
        .map(|l| partition.layer(l).iter().map(|&e| mask.is_kept(l, e)).collect())
        .collect())
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong { len: tokens.len(), max: config.max_seq_len });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange { id, vocab: config.vocab_size });
    }
    Ok(())
}

/// Rotary tables indexed `[position][pair]`.
pub(crate) fn rope_tables<T: Scalar>(config: &ModelConfig, seq_len: usize) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
    let hd = config.head_dim();
    let pairs = hd / 2;
    let mut cos = Vec::with_capacity(seq_len);
    let mut sin = Vec::with_capacity(seq_len);
    for pos in 0..seq_len {
        let (c, s): (Vec<T>, Vec<T>) = (0..pairs)
            .map(|i| {
                let freq = config.rope_theta.powf(-2.0 * i as f64 / hd as f64);
                let angle = pos as f64 * freq;
                (T::of(angle.cos()), T::of(angle.sin()))
            })
            .unzip();
        cos.push(c);
        sin.push(s);
    }
    (cos, sin)
}

/// Rotates every head of `x` in place for one position.
pub(crate) fn apply_rope<T: Scalar>(x: &mut [T], head_dim: usize, cos: &[T], sin: &[T]) {
    for head in x.chunks_exact_mut(head_dim) {
        for i in 0..head_dim / 2 {
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * cos[i] - b * sin[i];
            head[2 * i + 1] = a * sin[i] + b * cos[i];
        }
    }
}

/// `x / rms(x) * w`, also returning the inverse rms.
pub(crate) fn rms_norm<T: Scalar>(x: &[T], w: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::of(x.len() as f64);
    let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
    let inv = T::one() / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(w) {
        *o = v * inv * g;
    }
    inv
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run<T: Scalar>(
    config: &ModelConfig,
    embedding: &Matrix<T>,
    layers: &[LayerWeights<T>],
    final_norm: &[T],
    head: &Matrix<T>,
    tokens: &[u32],
    mut sink: Option<&mut dyn ActivationSink<T>>,
    keep: Option<&[Vec<bool>]>,
) -> Result<Matrix<T>> {
    check_tokens(config, tokens)?;
    let seq = tokens.len();
    let d = config.d_model;
    let hd = config.head_dim();
    let eps = T::of(config.norm_eps);
    let scale = T::one() / T::of(hd as f64).sqrt();
    let (cos, sin) = rope_tables::<T>(config, seq);

    let mut x = Matrix::from_fn(seq, d, |t, c| embedding.get(tokens[t] as usize, c));
    let mut h = vec![T::zero(); d];
    let mut q = Matrix::zeros(seq, d);
    let mut k = Matrix::zeros(seq, d);
    let mut v = Matrix::zeros(seq, d);
    let mut attn = vec![T::zero(); d];
    let mut proj = vec![T::zero(); d];
    let mut weights = vec![T::zero(); seq];

    for (li, layer) in layers.iter().enumerate() {
        for t in 0..seq {
            rms_norm(x.row(t), &layer.attn_norm, eps, &mut h);
            layer.wq.matvec_into(&h, q.row_mut(t));
            layer.wk.matvec_into(&h, k.row_mut(t));
            layer.wv.matvec_into(&h, v.row_mut(t));
            apply_rope(q.row_mut(t), hd, &cos[t], &sin[t]);
            apply_rope(k.row_mut(t), hd, &cos[t], &sin[t]);
        }
        for t in 0..seq {
            attn.iter_mut().for_each(|a| *a = T::zero());
            for hh in 0..config.n_heads {
                let span = hh * hd..(hh + 1) * hd;
                let qt = &q.row(t)[span.clone()];
                let mut max = T::neg_infinity();
                for s in 0..=t {
                    let w = dot(qt, &k.row(s)[span.clone()]) * scale;
                    weights[s] = w;
                    max = max.max(w);
                }
                let mut total = T::zero();
                for w in &mut weights[..=t] {
                    *w = (*w - max).exp();
                    total += *w;
                }
                let out = &mut attn[span.clone()];
                for s in 0..=t {
                    let p = weights[s] / total;
                    for (o, &vv) in out.iter_mut().zip(&v.row(s)[span.clone()]) {
                        *o += p * vv;
                    }
                }
            }
            layer.wo.matvec_into(&attn, &mut proj);
            for (xv, &p) in x.row_mut(t).iter_mut().zip(&proj) {
                *xv += p;
            }
        }

        let width = layer.up_proj.rows();
        let mut up = vec![T::zero(); width];
        let mut gate = vec![T::zero(); width];
        let layer_keep = keep.map(|k| &k[li]);
        for t in 0..seq {
            rms_norm(x.row(t), &layer.ffn_norm, eps, &mut h);
            layer.up_proj.matvec_into(&h, &mut up);
            layer.gate_proj.matvec_into(&h, &mut gate);
            for (u, &g) in up.iter_mut().zip(&gate) {
                *u = silu(g) * *u;
            }
            if let Some(kp) = layer_keep {
                for (u, &on) in up.iter_mut().zip(kp) {
                    if !on {
                        *u = T::zero();
                    }
                }
            }
            if let Some(s) = sink.as_deref_mut() {
                s.record(li, t, &up);
            }
            layer.down_proj.matvec_into(&up, &mut proj);
            for (xv, &p) in x.row_mut(t).iter_mut().zip(&proj) {
                *xv += p;
            }
        }
    }

    let mut logits = Matrix::zeros(seq, config.vocab_size);
    for t in 0..seq {
        rms_norm(x.row(t), final_norm, eps, &mut h);
        head.vecmat_into(&h, logits.row_mut(t));
    }
    Ok(logits)
}

/// Model whose FFN matrices have been physically shrunk to the kept neurons.
#[derive(Debug, Clone)]
pub struct CompactModel<T> {
    model: ModelBundle<T>,
    kept: Vec<Vec<usize>>,
}

impl<T: Scalar> CompactModel<T> {
    pub fn new(model: &ModelBundle<T>, partition: &ExpertPartition, mask: &PruneMask) -> Result<Self> {
        let keep = neuron_keep(&model.config, partition, mask)?;
        let kept: Vec<Vec<usize>> = keep
            .iter()
            .map(|k| k.iter().enumerate().filter(|(_, &on)| on).map(|(i, _)| i).collect())
            .collect();
        let mut compact = model.clone();
        for (layer, idx) in compact.layers.iter_mut().zip(&kept) {
            layer.up_proj = layer.up_proj.select_rows(idx);
            layer.gate_proj = layer.gate_proj.select_rows(idx);
            layer.down_proj = layer.down_proj.select_cols(idx);
        }
        Ok(Self { model: compact, kept })
    }

    /// Original neuron indices retained in each layer.
    pub fn kept_neurons(&self) -> &[Vec<usize>] {
        &self.kept
    }

    pub fn ffn_params(&self) -> usize {
        self.kept.iter().map(|k| 3 * k.len() * self.model.config.d_model).sum()
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        let m = &self.model;
        let head = m.head();
        run(&m.config, &m.token_embedding, &m.layers, &m.final_norm, &head, tokens, None, None)
    }
}
