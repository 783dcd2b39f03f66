//! Toy causal language model with prefix tuning.
//!
//! The model is a small pre-layer-norm transformer over `f64` with learned
//! positional embeddings, a tanh feed-forward block and a tied training
//! budget: either every base parameter trains (fine-tuning) or only a
//! per-layer prefix matrix trains while the base stays bitwise frozen
//! (prefix tuning).
//!
//! The prefix is a `prefix_len x (n_layers * d_model)` matrix. Slice `l`
//! (columns `l*d_model .. (l+1)*d_model`) is written verbatim into the first
//! `prefix_len` rows of layer `l`'s input, so prefix rows act as extra
//! key/value positions every content token can attend to while never being
//! produced by the network itself. The final layer's prefix outputs are
//! discarded.
//!
//! Everything here is written out by hand, forward and backward, because the
//! frozen-base invariant and the gradient checks are the whole point: the
//! backward pass must provably skip base weight gradients in prefix mode and
//! still match central finite differences on what it does compute.

mod backward;
mod forward;
mod params;
mod tokenizer;
mod train;

pub use tokenizer::{Tokenizer, BYTE_TOKENS};
pub use train::{
    batch_loss, grad_check, train, train_classifier, train_with, ClassifierHead, ClsExample,
    GradCheckEntry, GradCheckReport, LossTrace, TrainOptions,
};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, EmbeddingSet, NamedMatrix, StimulusSet};
use crate::exec::{self, ExecMode};
use crate::matrix::Matrix;
use crate::rng;

use params::BaseParams;

/// Feed-forward width as a multiple of the model width.
pub const FF_MULT: usize = 4;
/// Standard deviation for weight and prefix initialization.
pub(crate) const INIT_STD: f64 = 0.02;
/// Layer-norm variance floor.
pub(crate) const LN_EPS: f64 = 1e-5;

/// Errors raised by model construction, training and serialization.
#[derive(Debug, Error)]
pub enum PrefixError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {length} positions exceeds the maximum of {max}")]
    SequenceTooLong { length: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfVocab { id: usize, vocab_size: usize },
    #[error("label {label} outside {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("empty training data: {0}")]
    EmptyData(String),
    #[error("sentence produced no tokens: {0:?}")]
    EmptySentence(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite model output: {0}")]
    NonFiniteOutput(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("malformed vocabulary file: {0}")]
    MalformedVocab(String),
}

fn checkpoint_err(e: CorpusError) -> PrefixError {
    match e {
        CorpusError::IoFailure(io) => PrefixError::IoFailure(io),
        other => PrefixError::MalformedCheckpoint(other.to_string()),
    }
}

/// Which parameter set a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningMode {
    /// Only the prefix matrix trains; the base is bitwise frozen.
    Prefix,
    /// Every parameter trains, including any prefix rows present.
    Finetune,
}

impl TuningMode {
    pub fn label(&self) -> &'static str {
        match self {
            TuningMode::Prefix => "prefix",
            TuningMode::Finetune => "finetune",
        }
    }
}

/// Model hyperparameters.
///
/// `max_seq_len` counts prefix rows and content tokens together; the
/// feed-forward width is always [`FF_MULT`] times `d_model`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub prefix_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PrefixError> {
        let fail = |msg: String| Err(PrefixError::InvalidConfig(msg));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return fail("d_model and n_heads must be at least 1".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2".into());
        }
        if self.max_seq_len < self.prefix_len + 2 {
            return fail(format!(
                "max_seq_len {} leaves no room for a context and a target after \
                 {} prefix rows",
                self.max_seq_len, self.prefix_len
            ));
        }
        Ok(())
    }

    pub fn ff_dim(&self) -> usize {
        FF_MULT * self.d_model
    }
}

/// One training sequence: the context is conditioned on, the targets are
/// scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TrainExample {
    /// Context and targets as a single content sequence.
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.context.len() + self.targets.len());
        t.extend_from_slice(&self.context);
        t.extend_from_slice(&self.targets);
        t
    }
}

/// A batch of language-model training sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub examples: Vec<TrainExample>,
}

/// The model: frozen-or-trainable base plus the prefix matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixLmModel {
    pub config: ModelConfig,
    pub(crate) base: BaseParams,
    /// `prefix_len x (n_layers * d_model)`.
    pub(crate) prefix: Matrix,
}

impl PrefixLmModel {
    /// Initializes a model from its config seed.
    ///
    /// Weights and prefix entries are drawn from one dedicated RNG stream in
    /// a fixed tensor order; biases start at zero and layer-norm gains at
    /// one without consuming draws. The prefix is drawn after every base
    /// tensor, so models that differ only in `prefix_len` share the same
    /// base realization.
    pub fn build(config: ModelConfig) -> Result<PrefixLmModel, PrefixError> {
        config.validate()?;
        let mut base = BaseParams::zeros(&config);
        let mut rng = rng::stream(config.seed, rng::STREAM_MODEL);
        for (_, kind, data) in base.tensors_mut() {
            match kind {
                params::ParamKind::Weight => {
                    for v in data {
                        *v = INIT_STD * rng::next_normal(&mut rng);
                    }
                }
                params::ParamKind::Gain => data.fill(1.0),
                params::ParamKind::Bias => {}
            }
        }
        let mut prefix = Matrix::zeros(config.prefix_len, config.n_layers * config.d_model);
        for v in prefix.data_mut() {
            *v = INIT_STD * rng::next_normal(&mut rng);
        }
        Ok(PrefixLmModel {
            config,
            base,
            prefix,
        })
    }

    /// Every base parameter flattened in the fixed tensor order.
    ///
    /// The flattening is stable across runs, which makes it usable as a
    /// frozen-base fingerprint.
    pub fn base_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.base_param_count());
        for (_, _, data) in self.base.tensors() {
            out.extend_from_slice(data);
        }
        out
    }

    pub fn prefix_parameters(&self) -> &Matrix {
        &self.prefix
    }

    pub fn base_param_count(&self) -> usize {
        base_param_count(&self.config)
    }

    pub fn prefix_param_count(&self) -> usize {
        self.config.prefix_len * self.config.n_layers * self.config.d_model
    }
}

fn base_param_count(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let ff = config.ff_dim();
    let per_layer = 2 * d          // first layer norm
        + 4 * (d * d + d)          // q, k, v, o projections
        + 2 * d                    // second layer norm
        + (d * ff + ff)            // feed-forward in
        + (ff * d + d); // feed-forward out
    config.vocab_size * d          // token embeddings
        + config.max_seq_len * d   // positional embeddings
        + config.n_layers * per_layer
        + 2 * d                    // final layer norm
        + d * config.vocab_size + config.vocab_size // output head
}

/// Number of parameters a training run in `mode` may change.
pub fn trainable_param_count(config: &ModelConfig, mode: TuningMode) -> usize {
    let prefix = config.prefix_len * config.n_layers * config.d_model;
    match mode {
        TuningMode::Prefix => prefix,
        TuningMode::Finetune => base_param_count(config) + prefix,
    }
}

/// Sentence embeddings: mean over content positions of the final
/// layer-normed hidden states.
pub fn embed_sentences(
    model: &PrefixLmModel,
    stimulus: &StimulusSet,
    tokenizer: &Tokenizer,
    name: &str,
) -> Result<EmbeddingSet, PrefixError> {
    embed_sentences_exec(model, stimulus, tokenizer, name, ExecMode::default())
}

/// [`embed_sentences`] with an explicit execution mode.
pub fn embed_sentences_exec(
    model: &PrefixLmModel,
    stimulus: &StimulusSet,
    tokenizer: &Tokenizer,
    name: &str,
    exec_mode: ExecMode,
) -> Result<EmbeddingSet, PrefixError> {
    if stimulus.is_empty() {
        return Err(PrefixError::EmptyData(
            "stimulus set has no sentences".into(),
        ));
    }
    let rows = exec::map_range(
        exec_mode,
        stimulus.len(),
        |i| -> Result<Vec<f64>, PrefixError> {
            let text = &stimulus.sentences()[i].text;
            let tokens = tokenizer.encode(text)?;
            let cache = forward::forward(model, &tokens)?;
            let m = cache.h_final.rows();
            let mut pooled = vec![0.0; model.config.d_model];
            for t in 0..m {
                for (p, v) in pooled.iter_mut().zip(cache.h_final.row(t)) {
                    *p += v;
                }
            }
            for p in &mut pooled {
                *p /= m as f64;
            }
            Ok(pooled)
        },
    );
    let mut data = Matrix::zeros(stimulus.len(), model.config.d_model);
    for (i, row) in rows.into_iter().enumerate() {
        data.row_mut(i).copy_from_slice(&row?);
    }
    EmbeddingSet::new(name.to_string(), data)
        .map_err(|e| PrefixError::NonFiniteOutput(e.to_string()))
}

/// Writes `config.json` plus the parameter payload into `dir`.
///
/// Parameters travel through the shared matrix container, so they are
/// rounded to `f32` on disk; checkpoints are for hand-off and inspection,
/// not for resuming bitwise-identical training.
pub fn store_model(dir: &Path, model: &PrefixLmModel) -> Result<(), PrefixError> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&model.config)
        .map_err(|e| PrefixError::MalformedCheckpoint(e.to_string()))?;
    std::fs::write(dir.join("config.json"), manifest)?;

    let total = model.base_param_count() + model.prefix_param_count();
    let mut flat = Vec::with_capacity(total);
    flat.extend_from_slice(&model.base_parameters());
    flat.extend_from_slice(model.prefix.data());
    let named = NamedMatrix {
        name: "model-params".into(),
        role: "model-params".into(),
        subject: None,
        matrix: Matrix::from_vec(1, total, flat),
    };
    corpus::store_matrix(&dir.join("params.json"), &named).map_err(checkpoint_err)
}

/// Loads a model stored by [`store_model`].
pub fn load_model(dir: &Path) -> Result<PrefixLmModel, PrefixError> {
    let manifest = std::fs::read_to_string(dir.join("config.json"))?;
    let config: ModelConfig = serde_json::from_str(&manifest)
        .map_err(|e| PrefixError::MalformedCheckpoint(e.to_string()))?;
    config.validate()?;

    let named = corpus::load_matrix(&dir.join("params.json")).map_err(checkpoint_err)?;
    let flat = named.matrix.data();
    let base_count = base_param_count(&config);
    let prefix_count = config.prefix_len * config.n_layers * config.d_model;
    if flat.len() != base_count + prefix_count {
        return Err(PrefixError::MalformedCheckpoint(format!(
            "parameter payload holds {} values, config requires {}",
            flat.len(),
            base_count + prefix_count
        )));
    }

    let mut base = BaseParams::zeros(&config);
    let mut cursor = 0;
    for (_, _, data) in base.tensors_mut() {
        data.copy_from_slice(&flat[cursor..cursor + data.len()]);
        cursor += data.len();
    }
    let prefix = Matrix::from_vec(
        config.prefix_len,
        config.n_layers * config.d_model,
        flat[cursor..].to_vec(),
    );
    Ok(PrefixLmModel {
        config,
        base,
        prefix,
    })
}

#[cfg(test)]
pub(crate) fn test_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        vocab_size: 40,
        max_seq_len: 16,
        prefix_len: 4,
        seed: 7,
    }
}
