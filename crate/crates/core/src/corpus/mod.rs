//! Corpus types: stimulus sentences, voxel response matrices, ROI atlases,
//! sentence embeddings, and the synthetic data generator.
//!
//! Conventions shared by every consumer downstream:
//! * voxel matrices are `N_E x N_V` (sentences by voxels),
//! * embedding matrices are `N_E x N_D` (sentences by dimensions),
//! * row `i` everywhere corresponds to sentence id `i`,
//! * all stored values are finite.

mod io;
mod synth;

pub use io::{
    load_atlas, load_embedding, load_matrix, load_stimulus, load_voxels, store_atlas,
    store_embedding, store_matrix, store_stimulus, store_voxels, NamedMatrix,
};
pub use synth::{synth_cohort, synth_dataset, CohortOutput, CohortSpec, SynthOutput};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

/// Errors for corpus construction, slicing, and interchange I/O.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("malformed payload: expected {expected} bytes, found {actual}")]
    MalformedPayload { expected: usize, actual: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("cannot store an empty matrix")]
    EmptyMatrix,
    #[error("unknown roi: {0}")]
    UnknownRoi(String),
    #[error("roi {roi} references voxel {index} but the dataset has {n_voxels} voxels")]
    IndexOutOfRange {
        roi: String,
        index: usize,
        n_voxels: usize,
    },
    #[error("roi {0} selects no voxels")]
    EmptyRoi(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {context} (expected {expected}, found {actual})")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
}

/// One stimulus sentence with its position in the passage/topic hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sentence_id: usize,
    pub text: String,
    pub passage_id: usize,
    pub topic_id: usize,
    pub experiment_id: usize,
}

/// Ordered collection of sentences.
///
/// Sentence ids are dense and positional: `sentences[i].sentence_id == i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusSet {
    sentences: Vec<Sentence>,
}

impl StimulusSet {
    /// Validates that ids are `0..n` in order and texts are non-empty.
    pub fn new(sentences: Vec<Sentence>) -> Result<StimulusSet, CorpusError> {
        for (i, s) in sentences.iter().enumerate() {
            if s.sentence_id != i {
                return Err(CorpusError::InvalidSpec(format!(
                    "sentence at position {i} has id {}, ids must be 0..n in order",
                    s.sentence_id
                )));
            }
            if s.text.is_empty() {
                return Err(CorpusError::InvalidSpec(format!(
                    "sentence {i} has empty text"
                )));
            }
        }
        Ok(StimulusSet { sentences })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn texts(&self) -> Vec<&str> {
        self.sentences.iter().map(|s| s.text.as_str()).collect()
    }
}

/// Voxel responses for one subject: row `i` is the response to sentence `i`.
#[derive(Debug, Clone)]
pub struct VoxelDataset {
    pub subject_id: String,
    pub data: Matrix,
    pub stimulus: Arc<StimulusSet>,
}

impl VoxelDataset {
    /// Validates row count against the stimulus and rejects non-finite data.
    pub fn new(
        subject_id: String,
        data: Matrix,
        stimulus: Arc<StimulusSet>,
    ) -> Result<VoxelDataset, CorpusError> {
        if data.rows() != stimulus.len() {
            return Err(CorpusError::ShapeMismatch {
                context: "voxel rows vs stimulus sentences",
                expected: stimulus.len(),
                actual: data.rows(),
            });
        }
        if let Some((row, col)) = data.first_non_finite() {
            return Err(CorpusError::NonFiniteValue { row, col });
        }
        Ok(VoxelDataset {
            subject_id,
            data,
            stimulus,
        })
    }

    pub fn n_sentences(&self) -> usize {
        self.data.rows()
    }

    pub fn n_voxels(&self) -> usize {
        self.data.cols()
    }
}

/// One region of interest: a named, sorted set of voxel column indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub name: String,
    pub network: String,
    pub voxel_indices: Vec<usize>,
}

/// Named voxel groupings, each assigned to a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiAtlas {
    rois: Vec<Roi>,
}

impl RoiAtlas {
    /// Validates that names are unique and index lists are non-empty,
    /// strictly ascending, and duplicate-free.
    pub fn new(rois: Vec<Roi>) -> Result<RoiAtlas, CorpusError> {
        for (i, roi) in rois.iter().enumerate() {
            if roi.name.is_empty() {
                return Err(CorpusError::InvalidSpec(format!(
                    "roi at position {i} has empty name"
                )));
            }
            if rois[..i].iter().any(|r| r.name == roi.name) {
                return Err(CorpusError::InvalidSpec(format!(
                    "duplicate roi name {}",
                    roi.name
                )));
            }
            if roi.voxel_indices.is_empty() {
                return Err(CorpusError::EmptyRoi(roi.name.clone()));
            }
            if !roi.voxel_indices.windows(2).all(|w| w[0] < w[1]) {
                return Err(CorpusError::InvalidSpec(format!(
                    "roi {} indices must be strictly ascending",
                    roi.name
                )));
            }
        }
        Ok(RoiAtlas { rois })
    }

    pub fn rois(&self) -> &[Roi] {
        &self.rois
    }

    pub fn get(&self, name: &str) -> Option<&Roi> {
        self.rois.iter().find(|r| r.name == name)
    }
}

/// Named sentence embedding matrix (`N_E x N_D`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub name: String,
    pub data: Matrix,
}

impl EmbeddingSet {
    /// Rejects empty names and non-finite data.
    pub fn new(name: String, data: Matrix) -> Result<EmbeddingSet, CorpusError> {
        if name.is_empty() {
            return Err(CorpusError::InvalidSpec(
                "embedding set name is empty".into(),
            ));
        }
        if let Some((row, col)) = data.first_non_finite() {
            return Err(CorpusError::NonFiniteValue { row, col });
        }
        Ok(EmbeddingSet { name, data })
    }

    pub fn n_sentences(&self) -> usize {
        self.data.rows()
    }

    pub fn n_dims(&self) -> usize {
        self.data.cols()
    }
}

/// Parameters of the synthetic data generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_sentences: usize,
    pub n_voxels: usize,
    pub n_dims: usize,
    /// Scale of the decodable component `V * W`.
    pub signal_scale: f64,
    /// Scale of the additive noise component.
    pub noise_scale: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub(crate) fn validate(&self) -> Result<(), CorpusError> {
        if self.n_sentences == 0 || self.n_voxels == 0 || self.n_dims == 0 {
            return Err(CorpusError::InvalidSpec(
                "n_sentences, n_voxels, and n_dims must all be positive".into(),
            ));
        }
        for (label, v) in [
            ("signal_scale", self.signal_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CorpusError::InvalidSpec(format!(
                    "{label} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Restricts a dataset to the voxel columns of one ROI.
///
/// The returned dataset shares the stimulus and keeps the subject id; columns
/// appear in the ROI's (ascending) index order.
pub fn roi_slice(
    dataset: &VoxelDataset,
    atlas: &RoiAtlas,
    roi_name: &str,
) -> Result<VoxelDataset, CorpusError> {
    let roi = atlas
        .get(roi_name)
        .ok_or_else(|| CorpusError::UnknownRoi(roi_name.to_string()))?;
    if roi.voxel_indices.is_empty() {
        return Err(CorpusError::EmptyRoi(roi.name.clone()));
    }
    let n_voxels = dataset.n_voxels();
    if let Some(&bad) = roi.voxel_indices.iter().find(|&&i| i >= n_voxels) {
        return Err(CorpusError::IndexOutOfRange {
            roi: roi.name.clone(),
            index: bad,
            n_voxels,
        });
    }
    Ok(VoxelDataset {
        subject_id: dataset.subject_id.clone(),
        data: dataset.data.select_cols(&roi.voxel_indices),
        stimulus: Arc::clone(&dataset.stimulus),
    })
}
