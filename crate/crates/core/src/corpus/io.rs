//! Interchange formats.
//!
//! Matrices travel as a pair of files: a small JSON manifest describing the
//! shape and role, and a raw payload of 32-bit little-endian floats in
//! row-major order (`rows * cols * 4` bytes). The manifest references the
//! payload by file name, resolved relative to the manifest's directory.
//! Atlases and stimulus sets are plain JSON documents.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{CorpusError, EmbeddingSet, Roi, RoiAtlas, StimulusSet, VoxelDataset};
use crate::matrix::Matrix;

/// A matrix together with the metadata carried by its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub name: String,
    /// What the rows/columns mean, e.g. "voxels", "embedding", "decoded".
    pub role: String,
    pub subject: Option<String>,
    pub matrix: Matrix,
}

#[derive(Serialize, Deserialize)]
struct MatrixManifest {
    name: String,
    role: String,
    rows: usize,
    cols: usize,
    payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject: Option<String>,
}

/// Writes `named` as a manifest at `manifest_path` plus a sibling payload.
///
/// The payload file name is the manifest file name with extension `f32`.
pub fn store_matrix(manifest_path: &Path, named: &NamedMatrix) -> Result<(), CorpusError> {
    let m = &named.matrix;
    if m.rows() == 0 || m.cols() == 0 {
        return Err(CorpusError::EmptyMatrix);
    }
    if let Some((row, col)) = m.first_non_finite() {
        return Err(CorpusError::NonFiniteValue { row, col });
    }
    let payload_name = payload_name(manifest_path)?;
    let manifest = MatrixManifest {
        name: named.name.clone(),
        role: named.role.clone(),
        rows: m.rows(),
        cols: m.cols(),
        payload: payload_name.clone(),
        subject: named.subject.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CorpusError::MalformedManifest(e.to_string()))?;
    fs::write(manifest_path, json)?;

    let mut bytes = Vec::with_capacity(m.rows() * m.cols() * 4);
    for v in m.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(manifest_path.with_file_name(payload_name), bytes)?;
    Ok(())
}

/// Loads a manifest-plus-payload pair written by [`store_matrix`].
pub fn load_matrix(manifest_path: &Path) -> Result<NamedMatrix, CorpusError> {
    let json = fs::read_to_string(manifest_path)?;
    let manifest: MatrixManifest =
        serde_json::from_str(&json).map_err(|e| CorpusError::MalformedManifest(e.to_string()))?;
    if manifest.rows == 0 || manifest.cols == 0 {
        return Err(CorpusError::MalformedManifest(format!(
            "manifest declares degenerate shape {}x{}",
            manifest.rows, manifest.cols
        )));
    }
    let expected = manifest
        .rows
        .checked_mul(manifest.cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CorpusError::MalformedManifest("shape overflows".into()))?;
    let payload_path = manifest_path.with_file_name(&manifest.payload);
    let bytes = fs::read(payload_path)?;
    if bytes.len() != expected {
        return Err(CorpusError::MalformedPayload {
            expected,
            actual: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(manifest.rows * manifest.cols);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let matrix = Matrix::from_vec(manifest.rows, manifest.cols, data);
    if let Some((row, col)) = matrix.first_non_finite() {
        return Err(CorpusError::NonFiniteValue { row, col });
    }
    Ok(NamedMatrix {
        name: manifest.name,
        role: manifest.role,
        subject: manifest.subject,
        matrix,
    })
}

fn payload_name(manifest_path: &Path) -> Result<String, CorpusError> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CorpusError::MalformedManifest("manifest path has no file name".into()))?;
    Ok(format!("{stem}.f32"))
}

/// Stores an embedding set with role `"embedding"`.
pub fn store_embedding(manifest_path: &Path, set: &EmbeddingSet) -> Result<(), CorpusError> {
    store_matrix(
        manifest_path,
        &NamedMatrix {
            name: set.name.clone(),
            role: "embedding".into(),
            subject: None,
            matrix: set.data.clone(),
        },
    )
}

/// Loads an embedding set stored by [`store_embedding`].
pub fn load_embedding(manifest_path: &Path) -> Result<EmbeddingSet, CorpusError> {
    let named = load_matrix(manifest_path)?;
    EmbeddingSet::new(named.name, named.matrix)
}

/// Stores voxel responses with role `"voxels"` and the subject id.
pub fn store_voxels(manifest_path: &Path, dataset: &VoxelDataset) -> Result<(), CorpusError> {
    store_matrix(
        manifest_path,
        &NamedMatrix {
            name: format!("voxels-{}", dataset.subject_id),
            role: "voxels".into(),
            subject: Some(dataset.subject_id.clone()),
            matrix: dataset.data.clone(),
        },
    )
}

/// Loads voxel responses and attaches them to an already loaded stimulus.
pub fn load_voxels(
    manifest_path: &Path,
    stimulus: Arc<StimulusSet>,
) -> Result<VoxelDataset, CorpusError> {
    let named = load_matrix(manifest_path)?;
    let subject = named.subject.ok_or_else(|| {
        CorpusError::MalformedManifest("voxel manifest is missing the subject field".into())
    })?;
    VoxelDataset::new(subject, named.matrix, stimulus)
}

#[derive(Serialize, Deserialize)]
struct AtlasManifest {
    rois: Vec<AtlasRoi>,
}

#[derive(Serialize, Deserialize)]
struct AtlasRoi {
    roi: String,
    network: String,
    indices: Vec<usize>,
}

/// Stores an atlas as a JSON list of `{roi, network, indices}` entries.
pub fn store_atlas(path: &Path, atlas: &RoiAtlas) -> Result<(), CorpusError> {
    let manifest = AtlasManifest {
        rois: atlas
            .rois()
            .iter()
            .map(|r| AtlasRoi {
                roi: r.name.clone(),
                network: r.network.clone(),
                indices: r.voxel_indices.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CorpusError::MalformedManifest(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

/// Loads an atlas stored by [`store_atlas`], revalidating its invariants.
pub fn load_atlas(path: &Path) -> Result<RoiAtlas, CorpusError> {
    let json = fs::read_to_string(path)?;
    let manifest: AtlasManifest =
        serde_json::from_str(&json).map_err(|e| CorpusError::MalformedManifest(e.to_string()))?;
    RoiAtlas::new(
        manifest
            .rois
            .into_iter()
            .map(|r| Roi {
                name: r.roi,
                network: r.network,
                voxel_indices: r.indices,
            })
            .collect(),
    )
}

#[derive(Serialize, Deserialize)]
struct StimulusManifest {
    sentences: Vec<super::Sentence>,
}

/// Stores a stimulus set as JSON.
pub fn store_stimulus(path: &Path, stimulus: &StimulusSet) -> Result<(), CorpusError> {
    let manifest = StimulusManifest {
        sentences: stimulus.sentences().to_vec(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CorpusError::MalformedManifest(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

/// Loads a stimulus set stored by [`store_stimulus`], revalidating ids.
pub fn load_stimulus(path: &Path) -> Result<StimulusSet, CorpusError> {
    let json = fs::read_to_string(path)?;
    let manifest: StimulusManifest =
        serde_json::from_str(&json).map_err(|e| CorpusError::MalformedManifest(e.to_string()))?;
    StimulusSet::new(manifest.sentences)
}
