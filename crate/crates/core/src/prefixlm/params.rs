//! Base parameter storage with a fixed enumeration order.
//!
//! Initialization, gradient accumulation, parameter updates, flattening and
//! checkpointing all walk the tensors through `tensors()` / `tensors_mut()`,
//! so the order established here is the single source of truth. Changing it
//! changes every checkpoint and every seeded initialization.

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::matrix::Matrix;

/// How a tensor initializes: weights draw from the RNG, biases start at
/// zero, gains at one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ParamKind {
    Weight,
    Bias,
    Gain,
}

/// Parameters of one transformer layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct LayerParams {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Every parameter of the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct BaseParams {
    /// `vocab_size x d_model`.
    pub token_emb: Matrix,
    /// `max_seq_len x d_model`, indexed by absolute position including
    /// prefix slots.
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_gamma: Vec<f64>,
    pub lnf_beta: Vec<f64>,
    /// `d_model x vocab_size`.
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl BaseParams {
    pub fn zeros(config: &ModelConfig) -> BaseParams {
        let d = config.d_model;
        let ff = config.ff_dim();
        let layer = || LayerParams {
            ln1_gamma: vec![0.0; d],
            ln1_beta: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            bq: vec![0.0; d],
            wk: Matrix::zeros(d, d),
            bk: vec![0.0; d],
            wv: Matrix::zeros(d, d),
            bv: vec![0.0; d],
            wo: Matrix::zeros(d, d),
            bo: vec![0.0; d],
            ln2_gamma: vec![0.0; d],
            ln2_beta: vec![0.0; d],
            w1: Matrix::zeros(d, ff),
            b1: vec![0.0; ff],
            w2: Matrix::zeros(ff, d),
            b2: vec![0.0; d],
        };
        BaseParams {
            token_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.max_seq_len, d),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            lnf_gamma: vec![0.0; d],
            lnf_beta: vec![0.0; d],
            w_out: Matrix::zeros(d, config.vocab_size),
            b_out: vec![0.0; config.vocab_size],
        }
    }

    /// Tensors in the canonical order with read-only access.
    pub fn tensors(&self) -> Vec<(String, ParamKind, &[f64])> {
        use ParamKind::*;
        let mut out: Vec<(String, ParamKind, &[f64])> = Vec::new();
        out.push(("token_emb".into(), Weight, self.token_emb.data()));
        out.push(("pos_emb".into(), Weight, self.pos_emb.data()));
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1_gamma"), Gain, &layer.ln1_gamma));
            out.push((format!("layers.{i}.ln1_beta"), Bias, &layer.ln1_beta));
            out.push((format!("layers.{i}.wq"), Weight, layer.wq.data()));
            out.push((format!("layers.{i}.bq"), Bias, &layer.bq));
            out.push((format!("layers.{i}.wk"), Weight, layer.wk.data()));
            out.push((format!("layers.{i}.bk"), Bias, &layer.bk));
            out.push((format!("layers.{i}.wv"), Weight, layer.wv.data()));
            out.push((format!("layers.{i}.bv"), Bias, &layer.bv));
            out.push((format!("layers.{i}.wo"), Weight, layer.wo.data()));
            out.push((format!("layers.{i}.bo"), Bias, &layer.bo));
            out.push((format!("layers.{i}.ln2_gamma"), Gain, &layer.ln2_gamma));
            out.push((format!("layers.{i}.ln2_beta"), Bias, &layer.ln2_beta));
            out.push((format!("layers.{i}.w1"), Weight, layer.w1.data()));
            out.push((format!("layers.{i}.b1"), Bias, &layer.b1));
            out.push((format!("layers.{i}.w2"), Weight, layer.w2.data()));
            out.push((format!("layers.{i}.b2"), Bias, &layer.b2));
        }
        out.push(("lnf_gamma".into(), Gain, &self.lnf_gamma));
        out.push(("lnf_beta".into(), Bias, &self.lnf_beta));
        out.push(("w_out".into(), Weight, self.w_out.data()));
        out.push(("b_out".into(), Bias, &self.b_out));
        out
    }

    /// Tensors in the canonical order with mutable access.
    pub fn tensors_mut(&mut self) -> Vec<(String, ParamKind, &mut [f64])> {
        use ParamKind::*;
        let mut out: Vec<(String, ParamKind, &mut [f64])> = Vec::new();
        out.push(("token_emb".into(), Weight, self.token_emb.data_mut()));
        out.push(("pos_emb".into(), Weight, self.pos_emb.data_mut()));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((
                format!("layers.{i}.ln1_gamma"),
                Gain,
                layer.ln1_gamma.as_mut_slice(),
            ));
            out.push((
                format!("layers.{i}.ln1_beta"),
                Bias,
                layer.ln1_beta.as_mut_slice(),
            ));
            out.push((format!("layers.{i}.wq"), Weight, layer.wq.data_mut()));
            out.push((format!("layers.{i}.bq"), Bias, layer.bq.as_mut_slice()));
            out.push((format!("layers.{i}.wk"), Weight, layer.wk.data_mut()));
            out.push((format!("layers.{i}.bk"), Bias, layer.bk.as_mut_slice()));
            out.push((format!("layers.{i}.wv"), Weight, layer.wv.data_mut()));
            out.push((format!("layers.{i}.bv"), Bias, layer.bv.as_mut_slice()));
            out.push((format!("layers.{i}.wo"), Weight, layer.wo.data_mut()));
            out.push((format!("layers.{i}.bo"), Bias, layer.bo.as_mut_slice()));
            out.push((
                format!("layers.{i}.ln2_gamma"),
                Gain,
                layer.ln2_gamma.as_mut_slice(),
            ));
            out.push((
                format!("layers.{i}.ln2_beta"),
                Bias,
                layer.ln2_beta.as_mut_slice(),
            ));
            out.push((format!("layers.{i}.w1"), Weight, layer.w1.data_mut()));
            out.push((format!("layers.{i}.b1"), Bias, layer.b1.as_mut_slice()));
            out.push((format!("layers.{i}.w2"), Weight, layer.w2.data_mut()));
            out.push((format!("layers.{i}.b2"), Bias, layer.b2.as_mut_slice()));
        }
        out.push(("lnf_gamma".into(), Gain, self.lnf_gamma.as_mut_slice()));
        out.push(("lnf_beta".into(), Bias, self.lnf_beta.as_mut_slice()));
        out.push(("w_out".into(), Weight, self.w_out.data_mut()));
        out.push(("b_out".into(), Bias, self.b_out.as_mut_slice()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_config;
    use super::*;

    #[test]
    fn enumeration_orders_agree_and_cover_everything() {
        let mut params = BaseParams::zeros(&test_config());
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
        let names_mut: Vec<String> = params
            .tensors_mut()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect();
        assert_eq!(names, names_mut);
        assert_eq!(names.len(), 2 + 16 * 2 + 4);
        assert_eq!(names[2], "layers.0.ln1_gamma");
        assert_eq!(names[names.len() - 1], "b_out");
    }
}
