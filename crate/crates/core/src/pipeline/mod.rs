//! End-to-end orchestration: configuration, staged execution, artifacts.
//!
//! A run reads one JSON configuration, executes the stage graph
//! data -> tuning -> embedding -> decoding -> evaluation -> rsa -> render,
//! and writes every intermediate product under the output directory. Runs
//! are pure functions of the configuration: reruns with the same config and
//! seed produce byte-identical numeric artifacts, which is why no artifact
//! carries a timestamp.

mod render;
mod run;

pub use render::render_report;
pub use run::{run_pipeline, run_pipeline_until, RUN_REPORT_FILE};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::CvConfig;
use crate::eval::{MatchMode, ScoreTable, TestResult};
use crate::prefixlm::TuningMode;
use crate::repsim::{Dendrogram, Linkage, RepCorrelationMatrix, RsaMode, VarianceReport};

/// Errors surfaced by configuration handling and staged execution.
#[derive(Debug, Error)]
pub enum PipelineError {
    /// Every violation found during validation, with field paths.
    #[error("configuration invalid:\n  {}", .0.join("\n  "))]
    InvalidConfig(Vec<String>),
    #[error("could not parse configuration: {0}")]
    ParseError(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("nothing to render: {0}")]
    EmptyReport(String),
    #[error("{stage} stage failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

/// Tags an error with the pipeline stage it occurred in.
pub(crate) fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Builds a stage-tagged error from a plain message.
pub(crate) fn stage_fail(stage: &'static str, message: String) -> PipelineError {
    PipelineError::Stage { stage, message }
}

/// How far [`run_pipeline_until`] executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PipelineStage {
    Data,
    Tuning,
    Embedding,
    Decoding,
    Evaluation,
    Rsa,
    Render,
}

/// Top-level run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; every random stream in the run derives from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for parallel stages; 0 keeps the library default.
    #[serde(default)]
    pub threads: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub embeddings: EmbeddingsConfig,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// Exactly one data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ingest: Option<IngestData>,
}

/// Multi-subject synthetic generator: a shared ground-truth embedding
/// matrix drives every subject's voxels through a per-subject linear map
/// plus noise. The ground truth is available as the embedding set "truth".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub subjects: usize,
    pub sentences: usize,
    pub voxels: usize,
    pub dims: usize,
    #[serde(default = "default_signal_scale")]
    pub signal_scale: f64,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
}

fn default_signal_scale() -> f64 {
    1.0
}

fn default_noise_scale() -> f64 {
    0.5
}

/// Pre-existing data: a stimulus manifest, an atlas, and one voxel matrix
/// manifest per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestData {
    pub stimulus: PathBuf,
    pub atlas: PathBuf,
    pub subjects: Vec<PathBuf>,
}

/// Which embedding sets enter decoding and RSA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingsConfig {
    /// Embed the stimulus with the untuned base model.
    #[serde(default = "default_true")]
    pub include_untuned: bool,
    /// For synthetic data, include the generator's ground truth.
    #[serde(default = "default_true")]
    pub include_truth: bool,
    /// Pre-computed embedding matrix manifests.
    #[serde(default)]
    pub files: Vec<PathBuf>,
    /// Toy tuning jobs producing one embedding set per (task, mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<TuningJobs>,
}

impl Default for EmbeddingsConfig {
    fn default() -> Self {
        EmbeddingsConfig {
            include_untuned: true,
            include_truth: true,
            files: Vec::new(),
            tuning: None,
        }
    }
}

/// Synthetic classification tasks used to tune the toy model.
///
/// Each task draws seeded random labels over the stimulus sentences; every
/// requested mode trains from the same base model and the same initial head,
/// so the modes differ only in which parameters may move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningJobs {
    pub tasks: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<TuningMode>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default)]
    pub model: ToyModelConfig,
}

fn default_modes() -> Vec<TuningMode> {
    vec![TuningMode::Prefix, TuningMode::Finetune]
}

fn default_classes() -> usize {
    3
}

fn default_steps() -> usize {
    60
}

fn default_step_size() -> f64 {
    0.5
}

/// Architecture of the toy model; the vocabulary size comes from the
/// tokenizer built over the stimulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub prefix_len: usize,
    /// Word tokens kept on top of the mandatory byte tokens.
    pub word_tokens: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            max_seq_len: 32,
            prefix_len: 4,
            word_tokens: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub matching: MatchMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub rsa_mode: RsaMode,
    pub linkage: Linkage,
    /// Regress decoding accuracy on correlation-to-untuned when possible.
    pub variance_explained: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            rsa_mode: RsaMode::Rdm,
            linkage: Linkage::Average,
            variance_explained: true,
        }
    }
}

fn default_true() -> bool {
    true
}

/// Reads, parses, and validates a configuration file.
///
/// Parsing fails on the first malformed construct; validation then gathers
/// every remaining violation at once, each prefixed with its field path.
pub fn validate_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let raw = std::fs::read_to_string(path)?;
    let config: PipelineConfig =
        serde_json::from_str(&raw).map_err(|e| PipelineError::ParseError(e.to_string()))?;
    check_config(&config)?;
    Ok(config)
}

/// Validates an already-parsed configuration.
pub fn check_config(config: &PipelineConfig) -> Result<(), PipelineError> {
    let mut problems = Vec::new();
    let mut fail = |field: &str, msg: String| problems.push(format!("{field}: {msg}"));

    match (&config.data.synthetic, &config.data.ingest) {
        (None, None) => fail(
            "data",
            "exactly one data source is required, none given".into(),
        ),
        (Some(_), Some(_)) => fail(
            "data",
            "exactly one data source is required, both given".into(),
        ),
        (Some(synth), None) => {
            if synth.subjects == 0 {
                fail("data.synthetic.subjects", "must be at least 1".into());
            }
            if synth.sentences < 2 * config.cv.n_folds.max(1) {
                fail(
                    "data.synthetic.sentences",
                    format!(
                        "needs at least {} sentences for {} folds",
                        2 * config.cv.n_folds,
                        config.cv.n_folds
                    ),
                );
            }
            if synth.voxels < 4 {
                fail(
                    "data.synthetic.voxels",
                    "needs at least 4 voxels for the default atlas".into(),
                );
            }
            if synth.dims < 2 {
                fail(
                    "data.synthetic.dims",
                    "pairwise matching needs at least 2 dimensions".into(),
                );
            }
            for (name, v) in [
                ("signal_scale", synth.signal_scale),
                ("noise_scale", synth.noise_scale),
            ] {
                if !v.is_finite() || v < 0.0 {
                    fail(
                        &format!("data.synthetic.{name}"),
                        format!("{v} is not a non-negative finite number"),
                    );
                }
            }
        }
        (None, Some(ingest)) => {
            for (field, p) in [
                ("data.ingest.stimulus", &ingest.stimulus),
                ("data.ingest.atlas", &ingest.atlas),
            ] {
                if !p.exists() {
                    fail(field, format!("path {} does not exist", p.display()));
                }
            }
            if ingest.subjects.is_empty() {
                fail(
                    "data.ingest.subjects",
                    "at least one subject manifest is required".into(),
                );
            }
            for (i, p) in ingest.subjects.iter().enumerate() {
                if !p.exists() {
                    fail(
                        &format!("data.ingest.subjects[{i}]"),
                        format!("path {} does not exist", p.display()),
                    );
                }
            }
        }
    }

    let e = &config.embeddings;
    let truth_available = e.include_truth && config.data.synthetic.is_some();
    let tuned = e.tuning.as_ref().map_or(0, |t| t.tasks * t.modes.len());
    if !e.include_untuned && !truth_available && e.files.is_empty() && tuned == 0 {
        fail("embeddings", "no embedding source is enabled".into());
    }
    for (i, p) in e.files.iter().enumerate() {
        if !p.exists() {
            fail(
                &format!("embeddings.files[{i}]"),
                format!("path {} does not exist", p.display()),
            );
        }
    }
    if let Some(t) = &e.tuning {
        if t.tasks == 0 {
            fail("embeddings.tuning.tasks", "must be at least 1".into());
        }
        if t.modes.is_empty() {
            fail(
                "embeddings.tuning.modes",
                "at least one tuning mode is required".into(),
            );
        }
        let mut seen = Vec::new();
        for mode in &t.modes {
            if seen.contains(mode) {
                fail(
                    "embeddings.tuning.modes",
                    format!("mode {} listed twice", mode.label()),
                );
            }
            seen.push(*mode);
        }
        if t.classes < 2 {
            fail(
                "embeddings.tuning.classes",
                "classification needs at least 2 classes".into(),
            );
        }
        if t.steps == 0 {
            fail("embeddings.tuning.steps", "must be at least 1".into());
        }
        if !t.step_size.is_finite() || t.step_size <= 0.0 {
            fail(
                "embeddings.tuning.step_size",
                format!("{} is not a positive finite number", t.step_size),
            );
        }
        let m = &t.model;
        if m.n_layers == 0 || m.d_model == 0 || m.n_heads == 0 {
            fail(
                "embeddings.tuning.model",
                "layer, width and head counts must be positive".into(),
            );
        } else if m.d_model < 2 {
            fail(
                "embeddings.tuning.model.d_model",
                "pairwise matching needs at least 2 dimensions".into(),
            );
        } else if m.d_model % m.n_heads != 0 {
            fail(
                "embeddings.tuning.model.d_model",
                format!("{} is not divisible by n_heads {}", m.d_model, m.n_heads),
            );
        }
        if m.max_seq_len < m.prefix_len + 2 {
            fail(
                "embeddings.tuning.model.max_seq_len",
                format!(
                    "{} leaves no room for content after {} prefix rows",
                    m.max_seq_len, m.prefix_len
                ),
            );
        }
        if m.prefix_len == 0 && t.modes.contains(&TuningMode::Prefix) {
            fail(
                "embeddings.tuning.model.prefix_len",
                "prefix mode requires prefix_len of at least 1".into(),
            );
        }
        if m.word_tokens == 0 {
            fail(
                "embeddings.tuning.model.word_tokens",
                "must be at least 1".into(),
            );
        }
    }

    if config.cv.n_folds < 2 {
        fail(
            "cv.n_folds",
            format!("{} is below the minimum of 2", config.cv.n_folds),
        );
    }
    if config.cv.lambda_grid.is_empty() {
        fail("cv.lambda_grid", "must not be empty".into());
    }
    for (i, l) in config.cv.lambda_grid.iter().enumerate() {
        if !l.is_finite() || *l <= 0.0 {
            fail(
                &format!("cv.lambda_grid[{i}]"),
                format!("{l} is not a positive finite number"),
            );
        }
    }
    if config.cv.lambda_grid.len() > 1 && config.cv.inner_folds < 2 {
        fail(
            "cv.inner_folds",
            format!("{} is below the minimum of 2", config.cv.inner_folds),
        );
    }

    if problems.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::InvalidConfig(problems))
    }
}

/// Reproducibility block: everything needed to regenerate the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the resolved configuration JSON.
    pub config_hash: String,
    pub seed: u64,
    pub toolkit_version: String,
    pub subjects: Vec<String>,
    pub embedding_names: Vec<String>,
}

/// One decoding job's evaluation, keyed by subject, ROI and embedding set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub subject: String,
    pub roi: String,
    pub embedding: String,
    pub accuracy: f64,
    pub n_pairs: usize,
    pub ties: usize,
    pub mse: f64,
}

/// Paired comparison of the two tuning modes on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceEntry {
    pub task: String,
    /// Accuracy difference tested: finetune minus prefix, paired over
    /// (subject, ROI) cells.
    pub result: TestResult,
}

/// Everything a finished run reports; each field is also serialized on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub scores: ScoreTable,
    pub matches: Vec<MatchSummary>,
    pub significance: Vec<SignificanceEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rep_correlations: Option<RepCorrelationMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dendrogram: Option<Dendrogram>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<VarianceReport>,
    /// Stages or analyses skipped, with the reason.
    pub skipped: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config(dir: &Path) -> PipelineConfig {
        PipelineConfig {
            seed: 1,
            output_dir: dir.join("out"),
            threads: 0,
            data: DataConfig {
                synthetic: Some(SyntheticData {
                    subjects: 1,
                    sentences: 24,
                    voxels: 8,
                    dims: 4,
                    signal_scale: 1.0,
                    noise_scale: 0.1,
                }),
                ingest: None,
            },
            embeddings: EmbeddingsConfig {
                include_untuned: false,
                include_truth: true,
                files: Vec::new(),
                tuning: None,
            },
            cv: CvConfig::default(),
            evaluation: EvaluationConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }

    #[test]
    fn minimal_synthetic_config_gets_documented_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{
                "seed": 7,
                "output_dir": "out",
                "data": { "synthetic": { "subjects": 1, "sentences": 24, "voxels": 8, "dims": 4 } }
            }"#,
        )
        .unwrap();
        let config = validate_config(&path).unwrap();
        assert_eq!(config.cv.n_folds, 5);
        assert_eq!(config.analysis.linkage, Linkage::Average);
        assert_eq!(config.evaluation.matching, MatchMode::AllPairs);
        assert_eq!(config.analysis.rsa_mode, RsaMode::Rdm);
        assert!(config.embeddings.include_untuned);
        assert_eq!(config.data.synthetic.unwrap().signal_scale, 1.0);
    }

    #[test]
    fn violations_are_collected_with_field_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = minimal_config(dir.path());
        config.cv.n_folds = 1;
        config.data.synthetic.as_mut().unwrap().dims = 1;
        let err = check_config(&config).unwrap_err();
        match err {
            PipelineError::InvalidConfig(problems) => {
                assert!(
                    problems.iter().any(|p| p.starts_with("cv.n_folds:")),
                    "{problems:?}"
                );
                assert!(
                    problems
                        .iter()
                        .any(|p| p.starts_with("data.synthetic.dims:")),
                    "{problems:?}"
                );
            }
            other => panic!("expected InvalidConfig, got {other}"),
        }
    }

    #[test]
    fn dangling_embedding_paths_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = minimal_config(dir.path());
        config
            .embeddings
            .files
            .push(dir.path().join("missing.json"));
        let err = check_config(&config).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("embeddings.files[0]"), "{text}");
        assert!(text.contains("missing.json"), "{text}");
    }

    #[test]
    fn both_or_neither_data_source_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = minimal_config(dir.path());
        config.data.ingest = Some(IngestData {
            stimulus: dir.path().join("stim.json"),
            atlas: dir.path().join("atlas.json"),
            subjects: vec![],
        });
        assert!(matches!(
            check_config(&config),
            Err(PipelineError::InvalidConfig(_))
        ));
        config.data.synthetic = None;
        config.data.ingest = None;
        assert!(matches!(
            check_config(&config),
            Err(PipelineError::InvalidConfig(_))
        ));
    }

    #[test]
    fn unknown_fields_fail_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{ "seed": 1, "output_dir": "out", "data": {}, "typo_field": 3 }"#,
        )
        .unwrap();
        assert!(matches!(
            validate_config(&path),
            Err(PipelineError::ParseError(_))
        ));
    }
}
