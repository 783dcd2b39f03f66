//! Synthetic single-subject data generator.
//!
//! The generator draws a voxel response matrix `V`, a mixing matrix `W`, and
//! a noise matrix `E`, then builds target embeddings as
//! `Z = signal_scale * V W + noise_scale * E`. With `signal_scale = 0` the
//! targets carry no decodable signal, so downstream matching accuracy sits
//! at chance; with `noise_scale = 0` the targets are an exact linear readout
//! of the voxels and a decoder can recover them perfectly.
//!
//! Each ingredient draws from its own seeded stream
//! ([`STREAM_VOXELS`](crate::rng::STREAM_VOXELS),
//! [`STREAM_WEIGHTS`](crate::rng::STREAM_WEIGHTS),
//! [`STREAM_NOISE`](crate::rng::STREAM_NOISE),
//! [`STREAM_STIMULUS`](crate::rng::STREAM_STIMULUS)), filled in row-major
//! order, so the same spec always produces the same dataset.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{CorpusError, EmbeddingSet, Sentence, StimulusSet, SynthSpec, VoxelDataset};
use crate::matrix::Matrix;
use crate::rng;

/// Number of distinct words in generated sentence texts.
const SYNTH_VOCAB_WORDS: usize = 30;
/// Sentence length range in words.
const SYNTH_MIN_WORDS: usize = 5;
const SYNTH_MAX_WORDS: usize = 9;
/// Sentences per passage and passages per topic in the generated hierarchy.
const SENTENCES_PER_PASSAGE: usize = 4;
const PASSAGES_PER_TOPIC: usize = 4;

/// Parameters of the multi-subject generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub n_sentences: usize,
    pub n_voxels: usize,
    pub n_dims: usize,
    /// Scale of the decodable component `Z B_k`.
    pub signal_scale: f64,
    /// Scale of the additive voxel noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl CohortSpec {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.n_subjects == 0 {
            return Err(CorpusError::InvalidSpec(
                "n_subjects must be positive".into(),
            ));
        }
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

/// Everything [`synth_cohort`] produces.
#[derive(Debug, Clone)]
pub struct CohortOutput {
    pub stimulus: Arc<StimulusSet>,
    /// Shared target embeddings `Z`, named `"truth"`.
    pub truth: EmbeddingSet,
    /// One dataset per subject, ids `"s01"`, `"s02"`, ...
    pub subjects: Vec<VoxelDataset>,
}

/// Generates a cohort of subjects sharing one stimulus and target matrix.
///
/// Subject `k` responds with `V_k = signal_scale * Z B_k + noise_scale *
/// E_k`, where `Z` is the shared target matrix, `B_k` a per-subject mixing
/// matrix (`n_dims x n_voxels`), and `E_k` voxel noise. Mixing and noise
/// draws each advance one stream across subjects in order, so raising
/// `n_subjects` never changes the data of earlier subjects.
pub fn synth_cohort(spec: &CohortSpec) -> Result<CohortOutput, CorpusError> {
    spec.validate()?;

    let truth = normal_matrix(
        spec.seed,
        rng::STREAM_TARGETS,
        spec.n_sentences,
        spec.n_dims,
    );
    let stimulus = Arc::new(synth_stimulus(spec.seed, spec.n_sentences));

    let mut mix_rng = rng::stream(spec.seed, rng::STREAM_WEIGHTS);
    let mut noise_rng = rng::stream(spec.seed, rng::STREAM_NOISE);
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for k in 0..spec.n_subjects {
        let mut mixing = Matrix::zeros(spec.n_dims, spec.n_voxels);
        rng::fill_normal(&mut mix_rng, mixing.data_mut());
        let mut voxels = Matrix::zeros(spec.n_sentences, spec.n_voxels);
        rng::fill_normal(&mut noise_rng, voxels.data_mut());

        let signal = truth.matmul(&mixing);
        for (v, s) in voxels.data_mut().iter_mut().zip(signal.data()) {
            *v = spec.signal_scale * s + spec.noise_scale * *v;
        }
        subjects.push(VoxelDataset::new(
            format!("s{:02}", k + 1),
            voxels,
            Arc::clone(&stimulus),
        )?);
    }

    Ok(CohortOutput {
        stimulus,
        truth: EmbeddingSet::new("truth".into(), truth)?,
        subjects,
    })
}

/// Everything [`synth_dataset`] produces.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: VoxelDataset,
    /// Target embeddings `Z`, named `"truth"`.
    pub embeddings: EmbeddingSet,
    /// The mixing matrix `W` used to build the signal component.
    pub ground_truth: Matrix,
}

/// Generates a synthetic subject: voxels, target embeddings, and stimulus.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthOutput, CorpusError> {
    spec.validate()?;

    let voxels = normal_matrix(
        spec.seed,
        rng::STREAM_VOXELS,
        spec.n_sentences,
        spec.n_voxels,
    );
    let weights = normal_matrix(spec.seed, rng::STREAM_WEIGHTS, spec.n_voxels, spec.n_dims);
    let noise = normal_matrix(spec.seed, rng::STREAM_NOISE, spec.n_sentences, spec.n_dims);

    let signal = voxels.matmul(&weights);
    let mut targets = Matrix::zeros(spec.n_sentences, spec.n_dims);
    for (t, (s, e)) in targets
        .data_mut()
        .iter_mut()
        .zip(signal.data().iter().zip(noise.data()))
    {
        *t = spec.signal_scale * s + spec.noise_scale * e;
    }

    let stimulus = Arc::new(synth_stimulus(spec.seed, spec.n_sentences));
    let dataset = VoxelDataset::new(format!("synth-{}", spec.seed), voxels, stimulus)?;
    let embeddings = EmbeddingSet::new("truth".into(), targets)?;
    Ok(SynthOutput {
        dataset,
        embeddings,
        ground_truth: weights,
    })
}

/// Generates deterministic sentence texts over a small closed vocabulary.
///
/// Sentences are grouped four to a passage and passages four to a topic,
/// mirroring a typical reading-experiment layout.
pub(crate) fn synth_stimulus(seed: u64, n_sentences: usize) -> StimulusSet {
    let mut text_rng = rng::stream(seed, rng::STREAM_STIMULUS);
    let sentences = (0..n_sentences)
        .map(|i| {
            let n_words = SYNTH_MIN_WORDS
                + rng::next_below(
                    &mut text_rng,
                    (SYNTH_MAX_WORDS - SYNTH_MIN_WORDS + 1) as u64,
                ) as usize;
            let words: Vec<String> = (0..n_words)
                .map(|_| {
                    format!(
                        "w{:02}",
                        rng::next_below(&mut text_rng, SYNTH_VOCAB_WORDS as u64)
                    )
                })
                .collect();
            Sentence {
                sentence_id: i,
                text: words.join(" "),
                passage_id: i / SENTENCES_PER_PASSAGE,
                topic_id: i / (SENTENCES_PER_PASSAGE * PASSAGES_PER_TOPIC),
                experiment_id: 0,
            }
        })
        .collect();
    StimulusSet::new(sentences).expect("generated ids are dense by construction")
}

fn normal_matrix(seed: u64, stream_id: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = rng::stream(seed, stream_id);
    let mut m = Matrix::zeros(rows, cols);
    rng::fill_normal(&mut rng, m.data_mut());
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(signal: f64, noise: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            n_sentences: 12,
            n_voxels: 5,
            n_dims: 3,
            signal_scale: signal,
            noise_scale: noise,
            seed,
        }
    }

    #[test]
    fn output_shapes_follow_the_spec() {
        let out = synth_dataset(&spec(1.0, 0.5, 7)).unwrap();
        assert_eq!(out.dataset.data.rows(), 12);
        assert_eq!(out.dataset.data.cols(), 5);
        assert_eq!(out.embeddings.data.rows(), 12);
        assert_eq!(out.embeddings.data.cols(), 3);
        assert_eq!(out.ground_truth.rows(), 5);
        assert_eq!(out.ground_truth.cols(), 3);
        assert_eq!(out.dataset.stimulus.len(), 12);
    }

    #[test]
    fn same_seed_reproduces_bitwise_identical_output() {
        let a = synth_dataset(&spec(1.0, 0.5, 7)).unwrap();
        let b = synth_dataset(&spec(1.0, 0.5, 7)).unwrap();
        assert_eq!(a.dataset.data, b.dataset.data);
        assert_eq!(a.embeddings.data, b.embeddings.data);
        assert_eq!(a.ground_truth, b.ground_truth);
        assert_eq!(
            a.dataset.stimulus.sentences(),
            b.dataset.stimulus.sentences()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let a = synth_dataset(&spec(1.0, 0.5, 7)).unwrap();
        let b = synth_dataset(&spec(1.0, 0.5, 8)).unwrap();
        assert_ne!(a.dataset.data, b.dataset.data);
    }

    #[test]
    fn noiseless_targets_are_an_exact_linear_readout() {
        let out = synth_dataset(&spec(1.0, 0.0, 3)).unwrap();
        let expected = out.dataset.data.matmul(&out.ground_truth);
        assert_eq!(out.embeddings.data, expected);
    }

    #[test]
    fn zero_signal_targets_ignore_the_voxels() {
        // Only the signal term involves V and W; with signal_scale = 0 the
        // targets must match the pure-noise draw of the same seed.
        let with_signal = synth_dataset(&spec(0.0, 2.0, 9)).unwrap();
        let mut noise_rng = rng::stream(9, rng::STREAM_NOISE);
        let mut expected = Matrix::zeros(12, 3);
        rng::fill_normal(&mut noise_rng, expected.data_mut());
        for v in expected.data_mut() {
            *v *= 2.0;
        }
        assert_eq!(with_signal.embeddings.data, expected);
    }

    fn cohort_spec(n_subjects: usize, signal: f64, noise: f64, seed: u64) -> CohortSpec {
        CohortSpec {
            n_subjects,
            n_sentences: 10,
            n_voxels: 6,
            n_dims: 3,
            signal_scale: signal,
            noise_scale: noise,
            seed,
        }
    }

    #[test]
    fn cohort_shares_stimulus_and_truth_across_subjects() {
        let out = synth_cohort(&cohort_spec(3, 1.0, 0.5, 5)).unwrap();
        assert_eq!(out.subjects.len(), 3);
        assert_eq!(out.truth.data.rows(), 10);
        assert_eq!(out.truth.data.cols(), 3);
        assert_eq!(out.truth.name, "truth");
        let ids: Vec<&str> = out.subjects.iter().map(|d| d.subject_id.as_str()).collect();
        assert_eq!(ids, ["s01", "s02", "s03"]);
        for d in &out.subjects {
            assert_eq!(d.data.rows(), 10);
            assert_eq!(d.data.cols(), 6);
            assert!(Arc::ptr_eq(&d.stimulus, &out.stimulus));
        }
        assert_ne!(out.subjects[0].data, out.subjects[1].data);
    }

    #[test]
    fn adding_subjects_preserves_earlier_subjects() {
        let small = synth_cohort(&cohort_spec(2, 1.0, 0.5, 6)).unwrap();
        let large = synth_cohort(&cohort_spec(4, 1.0, 0.5, 6)).unwrap();
        assert_eq!(small.truth.data, large.truth.data);
        for k in 0..2 {
            assert_eq!(small.subjects[k].data, large.subjects[k].data);
        }
    }

    #[test]
    fn zero_signal_cohort_voxels_are_pure_scaled_noise() {
        let quiet = synth_cohort(&cohort_spec(1, 0.0, 2.0, 8)).unwrap();
        let mut noise_rng = rng::stream(8, rng::STREAM_NOISE);
        let mut expected = Matrix::zeros(10, 6);
        rng::fill_normal(&mut noise_rng, expected.data_mut());
        for v in expected.data_mut() {
            *v *= 2.0;
        }
        assert_eq!(quiet.subjects[0].data, expected);
    }

    #[test]
    fn degenerate_cohort_specs_are_rejected() {
        assert!(matches!(
            synth_cohort(&cohort_spec(0, 1.0, 1.0, 1)),
            Err(CorpusError::InvalidSpec(_))
        ));
        let mut s = cohort_spec(1, 1.0, 1.0, 1);
        s.noise_scale = -0.5;
        assert!(matches!(synth_cohort(&s), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn passage_and_topic_grouping_is_hierarchical() {
        let stim = synth_stimulus(1, 40);
        for s in stim.sentences() {
            assert_eq!(s.passage_id, s.sentence_id / 4);
            assert_eq!(s.topic_id, s.sentence_id / 16);
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut s = spec(1.0, 1.0, 0);
        s.n_voxels = 0;
        assert!(matches!(
            synth_dataset(&s),
            Err(CorpusError::InvalidSpec(_))
        ));
        let mut s = spec(1.0, 1.0, 0);
        s.signal_scale = -1.0;
        assert!(matches!(
            synth_dataset(&s),
            Err(CorpusError::InvalidSpec(_))
        ));
        let mut s = spec(1.0, 1.0, 0);
        s.noise_scale = f64::NAN;
        assert!(matches!(
            synth_dataset(&s),
            Err(CorpusError::InvalidSpec(_))
        ));
    }
}
