//! Forward pass with caching for the manual backward pass.
//!
//! Rows 0..P of every layer input are the prefix slice for that layer, rows
//! P.. are the content stream. Queries exist only for content rows; keys and
//! values cover prefix and content alike, and attention is causal on
//! absolute positions, so content position `t` sees every prefix row and
//! content rows up to itself. Prefix rows are never produced by the layer:
//! the next layer's prefix rows come from the next prefix slice.

use crate::matrix::Matrix;

use super::params::LayerParams;
use super::{PrefixError, PrefixLmModel, LN_EPS};

/// Per-row layer-norm cache: the normalized rows before gain and shift, and
/// the reciprocal standard deviations.
pub(crate) struct LnCache {
    pub normed: Matrix,
    pub rstd: Vec<f64>,
}

impl LnCache {
    /// Re-applies gain and shift to the cached normalized rows.
    pub fn scaled(&self, gamma: &[f64], beta: &[f64]) -> Matrix {
        let mut out = self.normed.clone();
        for r in 0..out.rows() {
            for (v, (g, b)) in out.row_mut(r).iter_mut().zip(gamma.iter().zip(beta)) {
                *v = *v * g + b;
            }
        }
        out
    }
}

/// Everything one layer's backward pass needs.
pub(crate) struct LayerCache {
    /// All `P + m` rows.
    pub ln1: LnCache,
    /// Content rows only, `m x d`.
    pub q: Matrix,
    /// All rows, `(P + m) x d`.
    pub k: Matrix,
    pub v: Matrix,
    /// Per head, `m x (P + m)`; masked slots stay zero.
    pub probs: Vec<Matrix>,
    /// Head outputs concatenated, `m x d`, before the output projection.
    pub attn_concat: Matrix,
    /// Content rows after the attention residual.
    pub ln2: LnCache,
    /// Feed-forward tanh activations, `m x ff`.
    pub mlp_act: Matrix,
}

/// Forward activations for one content sequence.
pub(crate) struct ForwardCache {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerCache>,
    pub lnf: LnCache,
    /// Final layer-normed content states, `m x d`; these are the sentence
    /// representation rows.
    pub h_final: Matrix,
    pub logits: Matrix,
    /// Per-row log-sum-exp of the logits.
    pub lse: Vec<f64>,
}

/// A content position whose next-token prediction is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TargetSpec {
    /// Content row whose logits score the target.
    pub position: usize,
    pub token: usize,
}

/// Scored positions for a context/target split: each target token is
/// predicted from the content position before it.
pub(crate) fn lm_targets(context_len: usize, tokens: &[usize]) -> Vec<TargetSpec> {
    (context_len..tokens.len())
        .map(|t| TargetSpec {
            position: t - 1,
            token: tokens[t],
        })
        .collect()
}

/// Sum of negative log-likelihoods over the scored positions.
pub(crate) fn sequence_nll(cache: &ForwardCache, targets: &[TargetSpec]) -> f64 {
    targets
        .iter()
        .map(|t| cache.lse[t.position] - cache.logits.get(t.position, t.token))
        .sum()
}

/// Softmax probabilities of one cached logit row.
pub(crate) fn prob_row(cache: &ForwardCache, position: usize) -> Vec<f64> {
    cache
        .logits
        .row(position)
        .iter()
        .map(|&l| (l - cache.lse[position]).exp())
        .collect()
}

pub(crate) fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, LnCache) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut normed = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for c in 0..cols {
            let n = (row[c] - mean) * rs;
            normed.set(r, c, n);
            out.set(r, c, n * gamma[c] + beta[c]);
        }
    }
    (out, LnCache { normed, rstd })
}

/// `x * w` plus a broadcast row bias.
pub(crate) fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = x.matmul(w);
    for r in 0..out.rows() {
        for (v, bias) in out.row_mut(r).iter_mut().zip(b) {
            *v += bias;
        }
    }
    out
}

/// Runs the model over one content token sequence.
pub(crate) fn forward(
    model: &PrefixLmModel,
    tokens: &[usize],
) -> Result<ForwardCache, PrefixError> {
    let config = &model.config;
    let (p, d) = (config.prefix_len, config.d_model);
    let m = tokens.len();
    if m == 0 {
        return Err(PrefixError::EmptyData("token sequence is empty".into()));
    }
    if p + m > config.max_seq_len {
        return Err(PrefixError::SequenceTooLong {
            length: p + m,
            max: config.max_seq_len,
        });
    }
    for &t in tokens {
        if t >= config.vocab_size {
            return Err(PrefixError::TokenOutOfVocab {
                id: t,
                vocab_size: config.vocab_size,
            });
        }
    }

    // Content stream entering layer 0: token embedding plus the embedding of
    // the absolute position behind the prefix slots.
    let mut content = Matrix::zeros(m, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = content.row_mut(t);
        for (c, v) in row.iter_mut().enumerate() {
            *v = model.base.token_emb.get(tok, c) + model.base.pos_emb.get(p + t, c);
        }
    }

    let mut layers = Vec::with_capacity(config.n_layers);
    for (l, params) in model.base.layers.iter().enumerate() {
        let (cache, next) = forward_layer(model, params, l, &content);
        layers.push(cache);
        content = next;
    }

    let (h_final, lnf) = layer_norm(&content, &model.base.lnf_gamma, &model.base.lnf_beta);
    let logits = affine(&h_final, &model.base.w_out, &model.base.b_out);
    let mut lse = Vec::with_capacity(m);
    for r in 0..m {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        lse.push(max + sum.ln());
    }

    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        layers,
        lnf,
        h_final,
        logits,
        lse,
    })
}

/// One layer over `content` (`m x d`); returns its cache and the next
/// content stream.
fn forward_layer(
    model: &PrefixLmModel,
    params: &LayerParams,
    layer: usize,
    content: &Matrix,
) -> (LayerCache, Matrix) {
    let config = &model.config;
    let (p, d, m) = (config.prefix_len, config.d_model, content.rows());
    let n_rows = p + m;
    let heads = config.n_heads;
    let dh = d / heads;
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    // Full layer input: this layer's prefix slice stacked over the content.
    let mut full = Matrix::zeros(n_rows, d);
    for r in 0..p {
        full.row_mut(r)
            .copy_from_slice(&model.prefix.row(r)[layer * d..(layer + 1) * d]);
    }
    for t in 0..m {
        full.row_mut(p + t).copy_from_slice(content.row(t));
    }

    let (a_full, ln1) = layer_norm(&full, &params.ln1_gamma, &params.ln1_beta);
    let k = affine(&a_full, &params.wk, &params.bk);
    let v = affine(&a_full, &params.wv, &params.bv);
    let mut a_content = Matrix::zeros(m, d);
    for t in 0..m {
        a_content.row_mut(t).copy_from_slice(a_full.row(p + t));
    }
    let q = affine(&a_content, &params.wq, &params.bq);

    let mut probs = Vec::with_capacity(heads);
    let mut attn_concat = Matrix::zeros(m, d);
    for h in 0..heads {
        let offset = h * dh;
        let mut head_probs = Matrix::zeros(m, n_rows);
        for t in 0..m {
            // Causal window on absolute positions: all prefix rows plus
            // content rows up to t.
            let visible = p + t + 1;
            let mut scores = Vec::with_capacity(visible);
            let q_row = &q.row(t)[offset..offset + dh];
            for s in 0..visible {
                let k_row = &k.row(s)[offset..offset + dh];
                let dot: f64 = q_row.iter().zip(k_row).map(|(a, b)| a * b).sum();
                scores.push(dot * inv_sqrt_dh);
            }
            let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for s in &mut scores {
                *s = (*s - max).exp();
                sum += *s;
            }
            for (s, score) in scores.iter().enumerate() {
                let prob = score / sum;
                head_probs.set(t, s, prob);
                let v_row = &v.row(s)[offset..offset + dh];
                for (c, &vc) in v_row.iter().enumerate() {
                    let slot = attn_concat.get(t, offset + c) + prob * vc;
                    attn_concat.set(t, offset + c, slot);
                }
            }
        }
        probs.push(head_probs);
    }

    let attn_out = affine(&attn_concat, &params.wo, &params.bo);
    let mut h_mid = content.clone();
    for (a, b) in h_mid.data_mut().iter_mut().zip(attn_out.data()) {
        *a += b;
    }

    let (b_mid, ln2) = layer_norm(&h_mid, &params.ln2_gamma, &params.ln2_beta);
    let mut mlp_act = affine(&b_mid, &params.w1, &params.b1);
    for v in mlp_act.data_mut() {
        *v = v.tanh();
    }
    let mlp_out = affine(&mlp_act, &params.w2, &params.b2);
    let mut next = h_mid;
    for (a, b) in next.data_mut().iter_mut().zip(mlp_out.data()) {
        *a += b;
    }

    (
        LayerCache {
            ln1,
            q,
            k,
            v,
            probs,
            attn_concat,
            ln2,
            mlp_act,
        },
        next,
    )
}
