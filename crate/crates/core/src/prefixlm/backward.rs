//! Manual reverse-mode pass.
//!
//! The pass mirrors the forward computation exactly, layer by layer in
//! reverse. Two invariants define prefix tuning here:
//!
//! * when base gradients are not collected (`Gradients::base` is `None`) no
//!   base weight gradient is ever formed, only activation gradients, and
//! * prefix rows feed a layer solely through its first layer norm into the
//!   key and value projections, so their gradient lands in the matching
//!   prefix slice and never propagates to the layer below.

use crate::matrix::Matrix;

use super::forward::{ForwardCache, LnCache};
use super::params::BaseParams;
use super::{ModelConfig, PrefixLmModel};

/// Gradient container mirroring the parameter layout.
///
/// `base` is `None` in prefix mode: the absence of the buffers is what
/// guarantees frozen base weights.
pub(crate) struct Gradients {
    pub base: Option<BaseParams>,
    pub prefix: Matrix,
}

impl Gradients {
    pub fn zeros(config: &ModelConfig, collect_base: bool) -> Gradients {
        Gradients {
            base: collect_base.then(|| BaseParams::zeros(config)),
            prefix: Matrix::zeros(config.prefix_len, config.n_layers * config.d_model),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        if let (Some(a), Some(b)) = (self.base.as_mut(), other.base.as_ref()) {
            for ((_, _, dst), (_, _, src)) in a.tensors_mut().into_iter().zip(b.tensors()) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for (d, s) in self.prefix.data_mut().iter_mut().zip(other.prefix.data()) {
            *d += s;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        if let Some(base) = self.base.as_mut() {
            for (_, _, data) in base.tensors_mut() {
                for v in data {
                    *v *= factor;
                }
            }
        }
        for v in self.prefix.data_mut() {
            *v *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        let base_ok = self.base.as_ref().is_none_or(|b| {
            b.tensors()
                .iter()
                .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
        });
        base_ok && self.prefix.is_finite()
    }
}

/// Where the loss gradient enters the network.
pub(crate) enum SeedGrad<'a> {
    /// `d loss / d logits`, `m x vocab_size`.
    Logits(&'a Matrix),
    /// `d loss / d h_final`, `m x d_model`; used by heads that consume the
    /// final hidden states directly.
    HiddenStates(&'a Matrix),
}

/// Accumulates gradients for one cached forward pass into `grads`.
pub(crate) fn backward(
    model: &PrefixLmModel,
    cache: &ForwardCache,
    seed: SeedGrad,
    grads: &mut Gradients,
) {
    let config = &model.config;
    let (p, d, heads) = (config.prefix_len, config.d_model, config.n_heads);
    let m = cache.h_final.rows();
    let dh = d / heads;
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    let d_h_final = match seed {
        SeedGrad::Logits(dlogits) => {
            if let Some(base) = grads.base.as_mut() {
                accumulate_xt_y(&cache.h_final, dlogits, &mut base.w_out);
                colsum_into(dlogits, &mut base.b_out);
            }
            matmul_bt(dlogits, &model.base.w_out)
        }
        SeedGrad::HiddenStates(d_ext) => d_ext.clone(),
    };

    let collect_f = grads
        .base
        .as_mut()
        .map(|b| (b.lnf_gamma.as_mut_slice(), b.lnf_beta.as_mut_slice()));
    let mut d_next = ln_backward(&d_h_final, &cache.lnf, &model.base.lnf_gamma, collect_f);

    for l in (0..config.n_layers).rev() {
        let params = &model.base.layers[l];
        let lc = &cache.layers[l];

        // Feed-forward block: d_next is the gradient at the layer output,
        // which splits into the residual and the MLP branch.
        let mut d_pre = matmul_bt(&d_next, &params.w2);
        for (g, a) in d_pre.data_mut().iter_mut().zip(lc.mlp_act.data()) {
            *g *= 1.0 - a * a;
        }
        if let Some(base) = grads.base.as_mut() {
            let bl = &mut base.layers[l];
            accumulate_xt_y(&lc.mlp_act, &d_next, &mut bl.w2);
            colsum_into(&d_next, &mut bl.b2);
            let b_mid = lc.ln2.scaled(&params.ln2_gamma, &params.ln2_beta);
            accumulate_xt_y(&b_mid, &d_pre, &mut bl.w1);
            colsum_into(&d_pre, &mut bl.b1);
        }
        let d_b = matmul_bt(&d_pre, &params.w1);
        let collect2 = grads.base.as_mut().map(|b| {
            let bl = &mut b.layers[l];
            (bl.ln2_gamma.as_mut_slice(), bl.ln2_beta.as_mut_slice())
        });
        let d_ln2 = ln_backward(&d_b, &lc.ln2, &params.ln2_gamma, collect2);
        let mut d_h_mid = d_next;
        add_into(&mut d_h_mid, &d_ln2);

        // Attention output projection.
        if let Some(base) = grads.base.as_mut() {
            let bl = &mut base.layers[l];
            accumulate_xt_y(&lc.attn_concat, &d_h_mid, &mut bl.wo);
            colsum_into(&d_h_mid, &mut bl.bo);
        }
        let d_attn = matmul_bt(&d_h_mid, &params.wo);

        // Heads: softmax Jacobian, then the query/key/value chains.
        let mut d_q = Matrix::zeros(m, d);
        let mut d_k = Matrix::zeros(p + m, d);
        let mut d_v = Matrix::zeros(p + m, d);
        for h in 0..heads {
            let offset = h * dh;
            let head_probs = &lc.probs[h];
            for t in 0..m {
                let visible = p + t + 1;
                let d_ctx = &d_attn.row(t)[offset..offset + dh];
                let mut d_probs = vec![0.0; visible];
                let mut dot_pd = 0.0;
                for (s, dp) in d_probs.iter_mut().enumerate() {
                    let v_row = &lc.v.row(s)[offset..offset + dh];
                    *dp = d_ctx.iter().zip(v_row).map(|(a, b)| a * b).sum();
                    dot_pd += head_probs.get(t, s) * *dp;
                }
                for (s, dp) in d_probs.iter().enumerate() {
                    let prob = head_probs.get(t, s);
                    let d_score = prob * (dp - dot_pd) * inv_sqrt_dh;
                    let k_row = &lc.k.row(s)[offset..offset + dh];
                    let q_row = &lc.q.row(t)[offset..offset + dh];
                    {
                        let dq_row = &mut d_q.row_mut(t)[offset..offset + dh];
                        for (g, kv) in dq_row.iter_mut().zip(k_row) {
                            *g += d_score * kv;
                        }
                    }
                    let dk_row = &mut d_k.row_mut(s)[offset..offset + dh];
                    for (g, qv) in dk_row.iter_mut().zip(q_row) {
                        *g += d_score * qv;
                    }
                    let dv_row = &mut d_v.row_mut(s)[offset..offset + dh];
                    for (g, cv) in dv_row.iter_mut().zip(d_ctx) {
                        *g += prob * cv;
                    }
                }
            }
        }

        // Projections back onto the first layer-norm output.
        if let Some(base) = grads.base.as_mut() {
            let bl = &mut base.layers[l];
            let a_full = lc.ln1.scaled(&params.ln1_gamma, &params.ln1_beta);
            let a_content = a_full.select_rows(&(p..p + m).collect::<Vec<_>>());
            accumulate_xt_y(&a_content, &d_q, &mut bl.wq);
            colsum_into(&d_q, &mut bl.bq);
            accumulate_xt_y(&a_full, &d_k, &mut bl.wk);
            colsum_into(&d_k, &mut bl.bk);
            accumulate_xt_y(&a_full, &d_v, &mut bl.wv);
            colsum_into(&d_v, &mut bl.bv);
        }
        let mut d_a_full = matmul_bt(&d_k, &params.wk);
        add_into(&mut d_a_full, &matmul_bt(&d_v, &params.wv));
        let d_a_q = matmul_bt(&d_q, &params.wq);
        for t in 0..m {
            for (g, v) in d_a_full.row_mut(p + t).iter_mut().zip(d_a_q.row(t)) {
                *g += v;
            }
        }

        let collect1 = grads.base.as_mut().map(|b| {
            let bl = &mut b.layers[l];
            (bl.ln1_gamma.as_mut_slice(), bl.ln1_beta.as_mut_slice())
        });
        let d_full = ln_backward(&d_a_full, &lc.ln1, &params.ln1_gamma, collect1);

        // Prefix rows stop here: their gradient belongs to slice l.
        for r in 0..p {
            let dst = &mut grads.prefix.row_mut(r)[l * d..(l + 1) * d];
            for (g, v) in dst.iter_mut().zip(d_full.row(r)) {
                *g += v;
            }
        }

        // Content rows: residual skip plus the layer-norm path.
        let mut d_in = d_h_mid;
        for t in 0..m {
            for (g, v) in d_in.row_mut(t).iter_mut().zip(d_full.row(p + t)) {
                *g += v;
            }
        }
        d_next = d_in;
    }

    if let Some(base) = grads.base.as_mut() {
        for (t, &tok) in cache.tokens.iter().enumerate() {
            let src = d_next.row(t);
            for (g, v) in base.token_emb.row_mut(tok).iter_mut().zip(src) {
                *g += v;
            }
            for (g, v) in base.pos_emb.row_mut(p + t).iter_mut().zip(src) {
                *g += v;
            }
        }
    }
}

/// Backward of `y = gamma * xhat + beta` for every cached row; optionally
/// accumulates the gain and shift gradients.
fn ln_backward(
    dy: &Matrix,
    cache: &LnCache,
    gamma: &[f64],
    mut collect: Option<(&mut [f64], &mut [f64])>,
) -> Matrix {
    let (rows, cols) = (dy.rows(), dy.cols());
    let mut dx = Matrix::zeros(rows, cols);
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xhat = cache.normed.row(r);
        if let Some((dgamma, dbeta)) = collect.as_mut() {
            for c in 0..cols {
                dgamma[c] += dyr[c] * xhat[c];
                dbeta[c] += dyr[c];
            }
        }
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..cols {
            dxhat[c] = dyr[c] * gamma[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xhat[c];
        }
        m1 /= cols as f64;
        m2 /= cols as f64;
        let rs = cache.rstd[r];
        for c in 0..cols {
            dx.set(r, c, rs * (dxhat[c] - m1 - xhat[c] * m2));
        }
    }
    dx
}

/// `out += x^T * dy`.
fn accumulate_xt_y(x: &Matrix, dy: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(x.rows(), dy.rows());
    debug_assert_eq!(out.rows(), x.cols());
    debug_assert_eq!(out.cols(), dy.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let orow = out.row_mut(i);
            for (o, &dv) in orow.iter_mut().zip(dy.row(r)) {
                *o += xv * dv;
            }
        }
    }
}

/// `x * w^T` without materializing the transpose.
fn matmul_bt(x: &Matrix, w: &Matrix) -> Matrix {
    debug_assert_eq!(x.cols(), w.cols());
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let orow = out.row_mut(r);
        for (i, o) in orow.iter_mut().enumerate() {
            *o = xr.iter().zip(w.row(i)).map(|(a, b)| a * b).sum();
        }
    }
    out
}

fn colsum_into(dy: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(dy.cols(), out.len());
    for r in 0..dy.rows() {
        for (o, v) in out.iter_mut().zip(dy.row(r)) {
            *o += v;
        }
    }
}

fn add_into(a: &mut Matrix, b: &Matrix) {
    debug_assert_eq!(a.rows(), b.rows());
    debug_assert_eq!(a.cols(), b.cols());
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::super::forward::{forward, lm_targets, prob_row};
    use super::super::test_config;
    use super::*;

    fn lm_dlogits(cache: &ForwardCache, context_len: usize) -> Matrix {
        let targets = lm_targets(context_len, &cache.tokens);
        let mut dlogits = Matrix::zeros(cache.tokens.len(), cache.logits.cols());
        for t in &targets {
            let probs = prob_row(cache, t.position);
            let row = dlogits.row_mut(t.position);
            for (dst, p) in row.iter_mut().zip(&probs) {
                *dst += p;
            }
            row[t.token] -= 1.0;
        }
        dlogits
    }

    #[test]
    fn prefix_mode_produces_only_prefix_gradients() {
        let model = PrefixLmModel::build(test_config()).unwrap();
        let cache = forward(&model, &[1, 2, 3, 4]).unwrap();
        let dlogits = lm_dlogits(&cache, 2);
        let mut grads = Gradients::zeros(&model.config, false);
        backward(&model, &cache, SeedGrad::Logits(&dlogits), &mut grads);
        assert!(grads.base.is_none());
        assert!(grads.is_finite());
        let norm: f64 = grads.prefix.data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "prefix gradient must be live");
    }

    #[test]
    fn finetune_mode_reaches_every_tensor_on_the_path() {
        let model = PrefixLmModel::build(test_config()).unwrap();
        let cache = forward(&model, &[1, 2, 3, 4]).unwrap();
        let dlogits = lm_dlogits(&cache, 2);
        let mut grads = Gradients::zeros(&model.config, true);
        backward(&model, &cache, SeedGrad::Logits(&dlogits), &mut grads);
        let base = grads.base.as_ref().unwrap();
        for (name, _, data) in base.tensors() {
            if name == "token_emb" || name == "pos_emb" {
                continue;
            }
            let norm: f64 = data.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "{name} should receive gradient");
        }
        let used = cache.tokens[0];
        let norm: f64 = base.token_emb.row(used).iter().map(|v| v * v).sum();
        assert!(norm > 0.0);
        let unused = model.config.vocab_size - 1;
        let norm: f64 = base.token_emb.row(unused).iter().map(|v| v * v).sum();
        assert_eq!(norm, 0.0, "unused token rows get no gradient");
    }

    #[test]
    fn accumulation_is_additive_over_sequences() {
        let model = PrefixLmModel::build(test_config()).unwrap();
        let cache_a = forward(&model, &[1, 2, 3]).unwrap();
        let cache_b = forward(&model, &[4, 5, 6, 7]).unwrap();
        let da = lm_dlogits(&cache_a, 1);
        let db = lm_dlogits(&cache_b, 2);

        let mut joint = Gradients::zeros(&model.config, true);
        backward(&model, &cache_a, SeedGrad::Logits(&da), &mut joint);
        backward(&model, &cache_b, SeedGrad::Logits(&db), &mut joint);

        let mut ga = Gradients::zeros(&model.config, true);
        backward(&model, &cache_a, SeedGrad::Logits(&da), &mut ga);
        let mut gb = Gradients::zeros(&model.config, true);
        backward(&model, &cache_b, SeedGrad::Logits(&db), &mut gb);
        ga.add_assign(&gb);

        // The two groupings round differently, so compare with a tolerance.
        let close = |x: &[f64], y: &[f64]| {
            x.iter()
                .zip(y)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
        };
        assert!(close(joint.prefix.data(), ga.prefix.data()));
        for ((_, _, a), (_, _, b)) in joint
            .base
            .as_ref()
            .unwrap()
            .tensors()
            .into_iter()
            .zip(ga.base.as_ref().unwrap().tensors())
        {
            assert!(close(a, b));
        }
    }
}
