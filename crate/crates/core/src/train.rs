//! Next-token training for toy models: manual backpropagation through the
//! decoder and an Adam optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{apply_rope, check_tokens, rms_norm, rope_tables};
use crate::model::{LayerWeights, ModelBundle};
use crate::scalar::{dot, sigmoid, silu, Scalar};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Training windows are at most this long.
    pub seq_len: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            seq_len: 48,
            learning_rate: 3e-3,
            warmup_steps: 20,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

struct LayerCache<T> {
    x_in: Matrix<T>,
    h1: Matrix<T>,
    inv1: Vec<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// `probs[head][t]` has `t + 1` attention weights.
    probs: Vec<Vec<Vec<T>>>,
    attn: Matrix<T>,
    x_mid: Matrix<T>,
    h2: Matrix<T>,
    inv2: Vec<T>,
    up: Matrix<T>,
    gate: Matrix<T>,
    act: Matrix<T>,
}

/// Mean next-token cross-entropy of one sequence and its parameter gradient.
pub fn loss_and_grad<T: Scalar>(model: &ModelBundle<T>, tokens: &[u32]) -> Result<(T, ModelBundle<T>)> {
    let mut grad = ModelBundle::zeros(model.config.clone());
    zero_norms(&mut grad);
    let loss = accumulate_grad(model, tokens, T::one(), &mut grad)?;
    Ok((loss, grad))
}

fn zero_norms<T: Scalar>(g: &mut ModelBundle<T>) {
    for l in &mut g.layers {
        l.attn_norm.iter_mut().for_each(|v| *v = T::zero());
        l.ffn_norm.iter_mut().for_each(|v| *v = T::zero());
    }
    g.final_norm.iter_mut().for_each(|v| *v = T::zero());
}

/// Adds `weight · ∂loss/∂θ` into `grad` and returns the loss.
fn accumulate_grad<T: Scalar>(model: &ModelBundle<T>, tokens: &[u32], weight: T, grad: &mut ModelBundle<T>) -> Result<T> {
    check_tokens(&model.config, tokens)?;
    if tokens.len() < 2 {
        return Err(Error::Empty("training sequence needs at least two tokens".into()));
    }
    let cfg = &model.config;
    let seq = tokens.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let n_heads = cfg.n_heads;
    let eps = T::of(cfg.norm_eps);
    let scale = T::one() / T::of(hd as f64).sqrt();
    let (cos, sin) = rope_tables::<T>(cfg, seq);
    let head = model.head().into_owned();

    // Forward with caches.
    let mut x = Matrix::from_fn(seq, d, |t, c| model.token_embedding.get(tokens[t] as usize, c));
    let mut caches: Vec<LayerCache<T>> = Vec::with_capacity(cfg.n_layers);
    for layer in &model.layers {
        let w = layer.up_proj.rows();
        let x_in = x.clone();
        let mut h1 = Matrix::zeros(seq, d);
        let mut inv1 = vec![T::zero(); seq];
        let mut q = Matrix::zeros(seq, d);
        let mut k = Matrix::zeros(seq, d);
        let mut v = Matrix::zeros(seq, d);
        for t in 0..seq {
            inv1[t] = rms_norm(x_in.row(t), &layer.attn_norm, eps, h1.row_mut(t));
            layer.wq.matvec_into(h1.row(t), q.row_mut(t));
            layer.wk.matvec_into(h1.row(t), k.row_mut(t));
            layer.wv.matvec_into(h1.row(t), v.row_mut(t));
            apply_rope(q.row_mut(t), hd, &cos[t], &sin[t]);
            apply_rope(k.row_mut(t), hd, &cos[t], &sin[t]);
        }
        let mut probs = vec![Vec::with_capacity(seq); n_heads];
        let mut attn = Matrix::zeros(seq, d);
        for (hh, head_probs) in probs.iter_mut().enumerate() {
            let span = hh * hd..(hh + 1) * hd;
            for t in 0..seq {
                let qt = &q.row(t)[span.clone()];
                let mut p: Vec<T> = (0..=t).map(|s| dot(qt, &k.row(s)[span.clone()]) * scale).collect();
                let max = p.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for w in &mut p {
                    *w = (*w - max).exp();
                    total += *w;
                }
                p.iter_mut().for_each(|w| *w /= total);
                let out = &mut attn.row_mut(t)[span.clone()];
                for (s, &ps) in p.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(&v.row(s)[span.clone()]) {
                        *o += ps * vv;
                    }
                }
                head_probs.push(p);
            }
        }
        let mut x_mid = x_in.clone();
        let mut proj = vec![T::zero(); d];
        for t in 0..seq {
            layer.wo.matvec_into(attn.row(t), &mut proj);
            for (xv, &p) in x_mid.row_mut(t).iter_mut().zip(&proj) {
                *xv += p;
            }
        }
        let mut h2 = Matrix::zeros(seq, d);
        let mut inv2 = vec![T::zero(); seq];
        let mut up = Matrix::zeros(seq, w);
        let mut gate = Matrix::zeros(seq, w);
        let mut act = Matrix::zeros(seq, w);
        let mut x_out = x_mid.clone();
        for t in 0..seq {
            inv2[t] = rms_norm(x_mid.row(t), &layer.ffn_norm, eps, h2.row_mut(t));
            layer.up_proj.matvec_into(h2.row(t), up.row_mut(t));
            layer.gate_proj.matvec_into(h2.row(t), gate.row_mut(t));
            for i in 0..w {
                act.set(t, i, silu(gate.get(t, i)) * up.get(t, i));
            }
            layer.down_proj.matvec_into(act.row(t), &mut proj);
            for (xv, &p) in x_out.row_mut(t).iter_mut().zip(&proj) {
                *xv += p;
            }
        }
        caches.push(LayerCache { x_in, h1, inv1, q, k, v, probs, attn, x_mid, h2, inv2, up, gate, act });
        x = x_out;
    }
    let mut hf = Matrix::zeros(seq, d);
    let mut invf = vec![T::zero(); seq];
    for t in 0..seq {
        invf[t] = rms_norm(x.row(t), &model.final_norm, eps, hf.row_mut(t));
    }

    // Loss and output-head gradient.
    let n_pred = T::of((seq - 1) as f64);
    let mut loss = T::zero();
    let mut dx = Matrix::<T>::zeros(seq, d);
    let mut logits = vec![T::zero(); cfg.vocab_size];
    let mut dhf = vec![T::zero(); d];
    for t in 0..seq - 1 {
        head.vecmat_into(hf.row(t), &mut logits);
        let target = tokens[t + 1] as usize;
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for l in &mut logits {
            *l = (*l - max).exp();
            total += *l;
        }
        loss -= (logits[target] / total).ln();
        // logits now holds unnormalized probabilities; turn into dL/dlogits.
        for l in &mut logits {
            *l = *l / total / n_pred;
        }
        logits[target] -= T::one() / n_pred;
        for (i, g) in dhf.iter_mut().enumerate() {
            *g = dot(head.row(i), &logits);
        }
        let hrow = hf.row(t);
        match grad.output_head.as_mut() {
            Some(gh) => {
                for (i, &hv) in hrow.iter().enumerate() {
                    let hv = hv * weight;
                    for (g, &dl) in gh.row_mut(i).iter_mut().zip(&logits) {
                        *g += hv * dl;
                    }
                }
            }
            None => {
                for (j, &dl) in logits.iter().enumerate() {
                    let dl = dl * weight;
                    for (g, &hv) in grad.token_embedding.row_mut(j).iter_mut().zip(hrow) {
                        *g += dl * hv;
                    }
                }
            }
        }
        rms_norm_backward(x.row(t), &model.final_norm, invf[t], &dhf, weight, dx.row_mut(t), &mut grad.final_norm);
    }
    loss /= n_pred;

    // Backward through layers.
    for (li, layer) in model.layers.iter().enumerate().rev() {
        let c = &caches[li];
        let g = &mut grad.layers[li];
        let w = layer.up_proj.rows();

        // FFN.
        let mut dx_mid = dx.clone();
        let mut dact = vec![T::zero(); w];
        let mut du = vec![T::zero(); w];
        let mut dg = vec![T::zero(); w];
        let mut dh2 = vec![T::zero(); d];
        for t in 0..seq {
            let dout = dx.row(t);
            outer_add(&mut g.down_proj, dout, c.act.row(t), weight);
            layer.down_proj.vecmat_into(dout, &mut dact);
            for i in 0..w {
                let gv = c.gate.get(t, i);
                let sg = sigmoid(gv);
                du[i] = dact[i] * silu(gv);
                dg[i] = dact[i] * c.up.get(t, i) * sg * (T::one() + gv * (T::one() - sg));
            }
            outer_add(&mut g.up_proj, &du, c.h2.row(t), weight);
            outer_add(&mut g.gate_proj, &dg, c.h2.row(t), weight);
            layer.up_proj.vecmat_into(&du, &mut dh2);
            let mut tmp = vec![T::zero(); d];
            layer.gate_proj.vecmat_into(&dg, &mut tmp);
            for (a, b) in dh2.iter_mut().zip(&tmp) {
                *a += *b;
            }
            rms_norm_backward(c.x_mid.row(t), &layer.ffn_norm, c.inv2[t], &dh2, weight, dx_mid.row_mut(t), &mut g.ffn_norm);
        }

        // Attention output projection.
        let mut dattn = Matrix::zeros(seq, d);
        for t in 0..seq {
            outer_add(&mut g.wo, dx_mid.row(t), c.attn.row(t), weight);
            layer.wo.vecmat_into(dx_mid.row(t), dattn.row_mut(t));
        }
        let mut dq = Matrix::zeros(seq, d);
        let mut dk = Matrix::zeros(seq, d);
        let mut dv = Matrix::zeros(seq, d);
        for hh in 0..n_heads {
            let span = hh * hd..(hh + 1) * hd;
            for t in 0..seq {
                let p = &c.probs[hh][t];
                let da = &dattn.row(t)[span.clone()];
                let dp: Vec<T> = (0..=t).map(|s| dot(da, &c.v.row(s)[span.clone()])).collect();
                let inner: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                for s in 0..=t {
                    for (o, &a) in dv.row_mut(s)[span.clone()].iter_mut().zip(da) {
                        *o += p[s] * a;
                    }
                    let ds = p[s] * (dp[s] - inner) * scale;
                    for j in span.clone() {
                        let qj = c.q.get(t, j);
                        let kj = c.k.get(s, j);
                        dq.row_mut(t)[j] += ds * kj;
                        dk.row_mut(s)[j] += ds * qj;
                    }
                }
            }
        }
        let mut dx_in = dx_mid.clone();
        let mut dh1 = vec![T::zero(); d];
        let mut tmp = vec![T::zero(); d];
        for t in 0..seq {
            rope_backward(dq.row_mut(t), hd, &cos[t], &sin[t]);
            rope_backward(dk.row_mut(t), hd, &cos[t], &sin[t]);
            let h1 = c.h1.row(t);
            outer_add(&mut g.wq, dq.row(t), h1, weight);
            outer_add(&mut g.wk, dk.row(t), h1, weight);
            outer_add(&mut g.wv, dv.row(t), h1, weight);
            layer.wq.vecmat_into(dq.row(t), &mut dh1);
            layer.wk.vecmat_into(dk.row(t), &mut tmp);
            dh1.iter_mut().zip(&tmp).for_each(|(a, b)| *a += *b);
            layer.wv.vecmat_into(dv.row(t), &mut tmp);
            dh1.iter_mut().zip(&tmp).for_each(|(a, b)| *a += *b);
            rms_norm_backward(c.x_in.row(t), &layer.attn_norm, c.inv1[t], &dh1, weight, dx_in.row_mut(t), &mut g.attn_norm);
        }
        dx = dx_in;
    }

    for (t, &tok) in tokens.iter().enumerate() {
        for (g, &v) in grad.token_embedding.row_mut(tok as usize).iter_mut().zip(dx.row(t)) {
            *g += weight * v;
        }
    }
    Ok(loss)
}

/// `m += weight · a ⊗ b`.
fn outer_add<T: Scalar>(m: &mut Matrix<T>, a: &[T], b: &[T], weight: T) {
    for (r, &av) in a.iter().enumerate() {
        let av = av * weight;
        if av == T::zero() {
            continue;
        }
        for (o, &bv) in m.row_mut(r).iter_mut().zip(b) {
            *o += av * bv;
        }
    }
}

/// Adds the input gradient into `dx` (unweighted) and `weight ·` the gain gradient into `dw`.
fn rms_norm_backward<T: Scalar>(x: &[T], w: &[T], inv: T, dy: &[T], weight: T, dx: &mut [T], dw: &mut [T]) {
    let n = T::of(x.len() as f64);
    let mut s = T::zero();
    for i in 0..x.len() {
        dw[i] += weight * dy[i] * x[i] * inv;
        s += dy[i] * w[i] * x[i];
    }
    let coef = inv * inv * inv * s / n;
    for i in 0..x.len() {
        dx[i] += inv * dy[i] * w[i] - x[i] * coef;
    }
}

fn rope_backward<T: Scalar>(g: &mut [T], head_dim: usize, cos: &[T], sin: &[T]) {
    for head in g.chunks_exact_mut(head_dim) {
        for i in 0..head_dim / 2 {
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * cos[i] + b * sin[i];
            head[2 * i + 1] = -a * sin[i] + b * cos[i];
        }
    }
}

fn params_mut<T: Scalar>(m: &mut ModelBundle<T>) -> Vec<&mut [T]> {
    let mut out: Vec<&mut [T]> = vec![m.token_embedding.as_mut_slice()];
    for l in &mut m.layers {
        let LayerWeights { attn_norm, wq, wk, wv, wo, ffn_norm, up_proj, gate_proj, down_proj } = l;
        out.push(attn_norm);
        out.push(wq.as_mut_slice());
        out.push(wk.as_mut_slice());
        out.push(wv.as_mut_slice());
        out.push(wo.as_mut_slice());
        out.push(ffn_norm);
        out.push(up_proj.as_mut_slice());
        out.push(gate_proj.as_mut_slice());
        out.push(down_proj.as_mut_slice());
    }
    out.push(&mut m.final_norm);
    if let Some(h) = m.output_head.as_mut() {
        out.push(h.as_mut_slice());
    }
    out
}

/// Trains `model` in place on random windows of `data`.
pub fn train<T: Scalar>(model: &mut ModelBundle<T>, data: &[Vec<u32>], cfg: &TrainConfig) -> Result<TrainReport> {
    let usable: Vec<&Vec<u32>> = data.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Empty("no training sequences with at least two tokens".into()));
    }
    let window = cfg.seq_len.min(model.config.max_seq_len).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m1 = ModelBundle::<T>::zeros(model.config.clone());
    let mut m2 = ModelBundle::<T>::zeros(model.config.clone());
    zero_norms(&mut m1);
    zero_norms(&mut m2);
    let mut report = TrainReport::default();
    let inv_batch = T::one() / T::of(cfg.batch_size.max(1) as f64);

    for step in 0..cfg.steps {
        let mut grad = ModelBundle::<T>::zeros(model.config.clone());
        zero_norms(&mut grad);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size.max(1) {
            let sample = usable[rng.gen_range(0..usable.len())];
            let start = if sample.len() > window { rng.gen_range(0..=sample.len() - window) } else { 0 };
            let end = (start + window).min(sample.len());
            batch_loss += accumulate_grad(model, &sample[start..end], inv_batch, &mut grad)?.as_f64();
        }
        report.losses.push(batch_loss / cfg.batch_size.max(1) as f64);

        let mut grads = params_mut(&mut grad);
        let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if norm > cfg.max_grad_norm {
            let s = T::of(cfg.max_grad_norm / norm);
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
        }
        let warm = if cfg.warmup_steps > 0 { ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0) } else { 1.0 };
        let lr = cfg.learning_rate * warm;
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (lr_t, eps) = (T::of(lr / bc1), T::of(cfg.adam_eps));
        let sqrt_bc2 = T::of(bc2.sqrt());
        for (((p, g), a), b) in params_mut(model).into_iter().zip(grads).zip(params_mut(&mut m1)).zip(params_mut(&mut m2)) {
            for i in 0..p.len() {
                a[i] = b1 * a[i] + (T::one() - b1) * g[i];
                b[i] = b2 * b[i] + (T::one() - b2) * g[i] * g[i];
                p[i] -= lr_t * a[i] / (b[i].sqrt() / sqrt_bc2 + eps);
            }
        }
    }
    model.validate()?;
    Ok(report)
}
