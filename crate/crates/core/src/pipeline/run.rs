//! Stage execution and artifact writing.
//!
//! Artifact layout under the output directory:
//!
//! ```text
//! config.resolved.json      the configuration the run actually used
//! provenance.json           config hash, seed, version, subject/set names
//! run_report.json           the full serialized RunReport
//! data/                     stimulus, atlas, per-subject voxel matrices
//! models/                   vocabulary and model checkpoints per tuning job
//! embeddings/               one matrix per embedding set
//! decode/<job>/             decoded matrix and fold summary per job
//! eval/                     score tables, aggregates, significance
//! rsa/                      correlation matrix, dendrogram, newick tree
//! report/                   rendered markdown and SVG figures
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{
    check_config, render_report, stage_err, stage_fail, MatchSummary, PipelineConfig,
    PipelineError, PipelineStage, Provenance, RunReport, SignificanceEntry,
};
use crate::corpus::{
    load_atlas, load_embedding, load_stimulus, load_voxels, roi_slice, store_atlas,
    store_embedding, store_matrix, store_stimulus, store_voxels, synth_cohort, CohortSpec,
    EmbeddingSet, NamedMatrix, Roi, RoiAtlas, StimulusSet, VoxelDataset,
};
use crate::decoder::{run_cv_full, CvOutcome, LambdaChoice};
use crate::eval::{
    aggregate_scores, mse_metric, paired_test, pairwise_match_exec, AggregateLevel, ScoreEntry,
    ScoreTable,
};
use crate::exec::{self, ExecMode};
use crate::prefixlm::{
    embed_sentences_exec, store_model, train_classifier, ClassifierHead, ClsExample, ModelConfig,
    PrefixLmModel, Tokenizer, TrainOptions, TuningMode,
};
use crate::repsim::{correlation_matrix_exec, hcluster, variance_explained};
use crate::rng;

/// File name of the serialized [`RunReport`] in the output directory.
pub const RUN_REPORT_FILE: &str = "run_report.json";

const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Runs every stage, writes all artifacts, and renders the report.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport, PipelineError> {
    run_pipeline_until(config, PipelineStage::Render)
}

/// Runs stages up to and including `last`.
///
/// Stages not reached leave their report fields empty; the partial report is
/// still written to disk so later stages can be inspected or re-rendered.
pub fn run_pipeline_until(
    config: &PipelineConfig,
    last: PipelineStage,
) -> Result<RunReport, PipelineError> {
    check_config(config)?;
    exec::with_thread_count(config.threads, || run_stages(config, last))
}

fn run_stages(config: &PipelineConfig, last: PipelineStage) -> Result<RunReport, PipelineError> {
    let exec_mode = ExecMode::default();
    let out = config.output_dir.clone();
    fs::create_dir_all(&out)?;
    let resolved = to_pretty_json(config)?;
    fs::write(out.join("config.resolved.json"), &resolved)?;

    let data = stage_data(config, &out)?;
    let mut report = RunReport {
        provenance: Provenance {
            config_hash: sha256_hex(resolved.as_bytes()),
            seed: config.seed,
            toolkit_version: TOOLKIT_VERSION.into(),
            subjects: data.subjects.iter().map(|d| d.subject_id.clone()).collect(),
            embedding_names: Vec::new(),
        },
        scores: ScoreTable::default(),
        matches: Vec::new(),
        significance: Vec::new(),
        rep_correlations: None,
        dendrogram: None,
        variance: None,
        skipped: Vec::new(),
    };
    if last < PipelineStage::Tuning {
        return finish(&out, report);
    }

    let tuning = stage_tuning(config, &data, &out, exec_mode)?;
    if last < PipelineStage::Embedding {
        return finish(&out, report);
    }

    let records = stage_embedding(config, &data, &tuning, &out, exec_mode)?;
    report.provenance.embedding_names = records.iter().map(|r| r.set.name.clone()).collect();
    if last < PipelineStage::Decoding {
        return finish(&out, report);
    }

    let jobs = stage_decoding(config, &data, &records, &out, exec_mode)?;
    if last < PipelineStage::Evaluation {
        return finish(&out, report);
    }

    stage_evaluation(config, &records, &jobs, &out, exec_mode, &mut report)?;
    if last < PipelineStage::Rsa {
        return finish(&out, report);
    }

    stage_rsa(config, &records, &out, exec_mode, &mut report)?;
    if last < PipelineStage::Render {
        return finish(&out, report);
    }

    render_report(&report, &out.join("report"))?;
    finish(&out, report)
}

/// Writes the provenance block and the full report, then hands it back.
fn finish(out: &Path, report: RunReport) -> Result<RunReport, PipelineError> {
    write_json(&out.join("provenance.json"), &report.provenance)?;
    write_json(&out.join(RUN_REPORT_FILE), &report)?;
    Ok(report)
}

struct DataBundle {
    stimulus: Arc<StimulusSet>,
    atlas: RoiAtlas,
    subjects: Vec<VoxelDataset>,
    /// Ground-truth embeddings; present only for synthetic data.
    truth: Option<EmbeddingSet>,
}

fn stage_data(config: &PipelineConfig, out: &Path) -> Result<DataBundle, PipelineError> {
    let err = stage_err("data");
    let dir = out.join("data");
    fs::create_dir_all(&dir)?;

    let bundle = if let Some(synth) = &config.data.synthetic {
        let cohort = synth_cohort(&CohortSpec {
            n_subjects: synth.subjects,
            n_sentences: synth.sentences,
            n_voxels: synth.voxels,
            n_dims: synth.dims,
            signal_scale: synth.signal_scale,
            noise_scale: synth.noise_scale,
            seed: config.seed,
        })
        .map_err(&err)?;
        DataBundle {
            stimulus: cohort.stimulus,
            atlas: default_atlas(synth.voxels).map_err(&err)?,
            subjects: cohort.subjects,
            truth: Some(cohort.truth),
        }
    } else {
        let ingest = config
            .data
            .ingest
            .as_ref()
            .expect("validation requires a source");
        let stimulus = Arc::new(load_stimulus(&ingest.stimulus).map_err(&err)?);
        let atlas = load_atlas(&ingest.atlas).map_err(&err)?;
        let mut subjects = Vec::with_capacity(ingest.subjects.len());
        for path in &ingest.subjects {
            let dataset = load_voxels(path, Arc::clone(&stimulus)).map_err(&err)?;
            if subjects
                .iter()
                .any(|d: &VoxelDataset| d.subject_id == dataset.subject_id)
            {
                return Err(stage_fail(
                    "data",
                    format!("duplicate subject id {}", dataset.subject_id),
                ));
            }
            subjects.push(dataset);
        }
        DataBundle {
            stimulus,
            atlas,
            subjects,
            truth: None,
        }
    };

    for d in &bundle.subjects {
        check_file_safe("data", "subject id", &d.subject_id)?;
        for roi in bundle.atlas.rois() {
            let max = *roi.voxel_indices.last().expect("atlas rois are non-empty");
            if max >= d.n_voxels() {
                return Err(stage_fail(
                    "data",
                    format!(
                        "roi {} references voxel {max} but subject {} has {} voxels",
                        roi.name,
                        d.subject_id,
                        d.n_voxels()
                    ),
                ));
            }
        }
    }
    for roi in bundle.atlas.rois() {
        check_file_safe("data", "roi name", &roi.name)?;
    }

    store_stimulus(&dir.join("stimulus.json"), &bundle.stimulus).map_err(&err)?;
    store_atlas(&dir.join("atlas.json"), &bundle.atlas).map_err(&err)?;
    for d in &bundle.subjects {
        store_voxels(&dir.join(format!("voxels-{}.json", d.subject_id)), d).map_err(&err)?;
    }
    Ok(bundle)
}

/// Four contiguous voxel blocks of near-equal size, two per network.
fn default_atlas(n_voxels: usize) -> Result<RoiAtlas, crate::corpus::CorpusError> {
    let k = 4;
    let rois = (0..k)
        .map(|r| Roi {
            name: format!("roi-{}", r + 1),
            network: if r < k / 2 { "net-a" } else { "net-b" }.into(),
            voxel_indices: (r * n_voxels / k..(r + 1) * n_voxels / k).collect(),
        })
        .collect();
    RoiAtlas::new(rois)
}

struct TunedModel {
    task: String,
    mode: TuningMode,
    /// Embedding set name, `"<task>-<mode>"`.
    name: String,
    model: PrefixLmModel,
}

struct TuningBundle {
    tokenizer: Option<Tokenizer>,
    untuned: Option<PrefixLmModel>,
    tuned: Vec<TunedModel>,
}

#[derive(Serialize)]
struct TrainingRecord<'a> {
    task: &'a str,
    mode: &'a str,
    steps: usize,
    step_size: f64,
    initial_loss: f64,
    final_loss: f64,
    losses: &'a [f64],
}

fn stage_tuning(
    config: &PipelineConfig,
    data: &DataBundle,
    out: &Path,
    exec_mode: ExecMode,
) -> Result<TuningBundle, PipelineError> {
    let err = stage_err("tuning");
    let e = &config.embeddings;
    if !e.include_untuned && e.tuning.is_none() {
        return Ok(TuningBundle {
            tokenizer: None,
            untuned: None,
            tuned: Vec::new(),
        });
    }

    let arch = e
        .tuning
        .as_ref()
        .map(|t| t.model.clone())
        .unwrap_or_default();
    let texts = data.stimulus.texts();
    let tokenizer = Tokenizer::build(&texts, arch.word_tokens);
    let model_config = ModelConfig {
        n_layers: arch.n_layers,
        d_model: arch.d_model,
        n_heads: arch.n_heads,
        vocab_size: tokenizer.vocab_size(),
        max_seq_len: arch.max_seq_len,
        prefix_len: arch.prefix_len,
        seed: config.seed,
    };
    let encoded: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| tokenizer.encode(t))
        .collect::<Result<_, _>>()
        .map_err(&err)?;
    let budget = model_config.max_seq_len - model_config.prefix_len;
    for (i, tokens) in encoded.iter().enumerate() {
        if tokens.len() > budget {
            return Err(stage_fail(
                "tuning",
                format!(
                    "sentence {i} encodes to {} tokens, exceeding the {budget} content \
                     positions left by the prefix; raise max_seq_len or word_tokens",
                    tokens.len()
                ),
            ));
        }
    }

    let models_dir = out.join("models");
    fs::create_dir_all(&models_dir)?;
    tokenizer
        .store(&models_dir.join("vocab.json"))
        .map_err(&err)?;

    let untuned = PrefixLmModel::build(model_config).map_err(&err)?;
    store_model(&models_dir.join("untuned"), &untuned).map_err(&err)?;

    let mut tuned = Vec::new();
    if let Some(t) = &e.tuning {
        // One label stream covers all tasks in order, so task k's labels do
        // not depend on which other tasks are configured after it.
        let mut label_rng = rng::stream(config.seed, rng::STREAM_TASK);
        let mut tasks: Vec<(String, Vec<ClsExample>, ClassifierHead)> = Vec::new();
        for ti in 0..t.tasks {
            let examples = encoded
                .iter()
                .map(|tokens| ClsExample {
                    tokens: tokens.clone(),
                    label: rng::next_below(&mut label_rng, t.classes as u64) as usize,
                })
                .collect();
            // Both modes of a task start from the same head, so they differ
            // only in which model parameters may move.
            let head = ClassifierHead::init(
                model_config.d_model,
                t.classes,
                rng::derive(config.seed, ti as u64 + 1),
            );
            tasks.push((format!("task-{}", ti + 1), examples, head));
        }

        let jobs: Vec<(usize, TuningMode)> = (0..t.tasks)
            .flat_map(|ti| t.modes.iter().map(move |m| (ti, *m)))
            .collect();
        let results = exec::map_range(exec_mode, jobs.len(), |k| {
            let (ti, mode) = jobs[k];
            let (_, examples, head) = &tasks[ti];
            let mut model = untuned.clone();
            let mut head = head.clone();
            let options = TrainOptions {
                steps: t.steps,
                step_size: t.step_size,
                momentum: 0.0,
                exec: ExecMode::Sequential,
            };
            train_classifier(&mut model, &mut head, examples, mode, options)
                .map(|trace| (model, trace))
        });

        for (k, result) in results.into_iter().enumerate() {
            let (ti, mode) = jobs[k];
            let task = tasks[ti].0.clone();
            let (model, trace) = result.map_err(|e| {
                stage_fail("tuning", format!("{task} in {} mode: {e}", mode.label()))
            })?;
            let name = format!("{task}-{}", mode.label());
            let dir = models_dir.join(&name);
            store_model(&dir, &model).map_err(&err)?;
            write_json(
                &dir.join("training.json"),
                &TrainingRecord {
                    task: &task,
                    mode: mode.label(),
                    steps: t.steps,
                    step_size: t.step_size,
                    initial_loss: trace.initial(),
                    final_loss: trace.final_loss(),
                    losses: &trace.losses,
                },
            )?;
            tuned.push(TunedModel {
                task,
                mode,
                name,
                model,
            });
        }
    }
    Ok(TuningBundle {
        tokenizer: Some(tokenizer),
        untuned: Some(untuned),
        tuned,
    })
}

struct EmbeddingRecord {
    set: EmbeddingSet,
    /// `"prefix"`, `"finetune"`, `"untuned"`, or `"none"` for reference sets.
    mode_label: String,
    task: Option<String>,
}

fn stage_embedding(
    config: &PipelineConfig,
    data: &DataBundle,
    tuning: &TuningBundle,
    out: &Path,
    exec_mode: ExecMode,
) -> Result<Vec<EmbeddingRecord>, PipelineError> {
    let e = &config.embeddings;
    let mut records = Vec::new();

    if e.include_truth {
        if let Some(truth) = &data.truth {
            records.push(EmbeddingRecord {
                set: truth.clone(),
                mode_label: "none".into(),
                task: None,
            });
        }
    }
    if e.include_untuned {
        let model = tuning
            .untuned
            .as_ref()
            .expect("tuning stage built the base model");
        let tokenizer = tuning
            .tokenizer
            .as_ref()
            .expect("tuning stage built the tokenizer");
        let set = embed_sentences_exec(model, &data.stimulus, tokenizer, "untuned", exec_mode)
            .map_err(stage_err("embedding"))?;
        records.push(EmbeddingRecord {
            set,
            mode_label: "untuned".into(),
            task: None,
        });
    }
    for tm in &tuning.tuned {
        let tokenizer = tuning
            .tokenizer
            .as_ref()
            .expect("tuning stage built the tokenizer");
        let set = embed_sentences_exec(&tm.model, &data.stimulus, tokenizer, &tm.name, exec_mode)
            .map_err(stage_err("embedding"))?;
        records.push(EmbeddingRecord {
            set,
            mode_label: tm.mode.label().into(),
            task: Some(tm.task.clone()),
        });
    }
    for path in &e.files {
        let set = load_embedding(path).map_err(stage_err("embedding"))?;
        records.push(EmbeddingRecord {
            set,
            mode_label: "none".into(),
            task: None,
        });
    }

    for (i, r) in records.iter().enumerate() {
        check_file_safe("embedding", "embedding set name", &r.set.name)?;
        if r.set.n_sentences() != data.stimulus.len() {
            return Err(stage_fail(
                "embedding",
                format!(
                    "embedding set {} covers {} sentences, stimulus has {}",
                    r.set.name,
                    r.set.n_sentences(),
                    data.stimulus.len()
                ),
            ));
        }
        if r.set.n_dims() < 2 {
            return Err(stage_fail(
                "embedding",
                format!(
                    "embedding set {} has {} dimension(s); pairwise matching needs at least 2",
                    r.set.name,
                    r.set.n_dims()
                ),
            ));
        }
        if records[..i].iter().any(|p| p.set.name == r.set.name) {
            return Err(stage_fail(
                "embedding",
                format!("duplicate embedding set name {}", r.set.name),
            ));
        }
    }

    let dir = out.join("embeddings");
    fs::create_dir_all(&dir)?;
    for r in &records {
        store_embedding(&dir.join(format!("{}.json", r.set.name)), &r.set)
            .map_err(stage_err("embedding"))?;
    }
    Ok(records)
}

struct DecodeJob {
    subject: String,
    roi: String,
    network: String,
    /// Index into the embedding records.
    record: usize,
    outcome: CvOutcome,
}

#[derive(Serialize)]
struct FoldSummary<'a> {
    test_rows: &'a [usize],
    lambda: &'a LambdaChoice,
}

#[derive(Serialize)]
struct JobRecord<'a> {
    subject: &'a str,
    roi: &'a str,
    embedding: &'a str,
    folds: Vec<FoldSummary<'a>>,
}

fn stage_decoding(
    config: &PipelineConfig,
    data: &DataBundle,
    records: &[EmbeddingRecord],
    out: &Path,
    exec_mode: ExecMode,
) -> Result<Vec<DecodeJob>, PipelineError> {
    let dir = out.join("decode");
    fs::create_dir_all(&dir)?;

    // Deterministic fan-out: subjects, then rois, then embedding sets.
    let mut keys = Vec::new();
    for si in 0..data.subjects.len() {
        for ri in 0..data.atlas.rois().len() {
            for ei in 0..records.len() {
                keys.push((si, ri, ei));
            }
        }
    }

    // Jobs run in parallel; each job decodes sequentially inside.
    let outcomes = exec::map_range(exec_mode, keys.len(), |k| -> Result<CvOutcome, String> {
        let (si, ri, ei) = keys[k];
        let roi = &data.atlas.rois()[ri];
        let sliced =
            roi_slice(&data.subjects[si], &data.atlas, &roi.name).map_err(|e| e.to_string())?;
        run_cv_full(&sliced, &records[ei].set, &config.cv, ExecMode::Sequential)
            .map_err(|e| e.to_string())
    });

    let mut jobs = Vec::with_capacity(keys.len());
    for (k, outcome) in outcomes.into_iter().enumerate() {
        let (si, ri, ei) = keys[k];
        let subject = data.subjects[si].subject_id.clone();
        let roi = data.atlas.rois()[ri].name.clone();
        let embedding = records[ei].set.name.clone();
        let outcome = outcome.map_err(|e| PipelineError::Stage {
            stage: "decoding",
            message: format!("job {subject}-{roi}-{embedding}: {e}"),
        })?;

        let job_dir = dir.join(format!("{subject}-{roi}-{embedding}"));
        fs::create_dir_all(&job_dir)?;
        store_matrix(
            &job_dir.join("decoded.json"),
            &NamedMatrix {
                name: format!("{subject}-{roi}-{embedding}"),
                role: "decoded".into(),
                subject: Some(subject.clone()),
                matrix: outcome.decoded.data.clone(),
            },
        )
        .map_err(stage_err("decoding"))?;
        write_json(
            &job_dir.join("fit.json"),
            &JobRecord {
                subject: &subject,
                roi: &roi,
                embedding: &embedding,
                folds: outcome
                    .folds
                    .iter()
                    .map(|f| FoldSummary {
                        test_rows: &f.test_rows,
                        lambda: &f.weights.lambda,
                    })
                    .collect(),
            },
        )?;

        jobs.push(DecodeJob {
            subject,
            roi,
            network: data.atlas.rois()[ri].network.clone(),
            record: ei,
            outcome,
        });
    }
    Ok(jobs)
}

fn stage_evaluation(
    config: &PipelineConfig,
    records: &[EmbeddingRecord],
    jobs: &[DecodeJob],
    out: &Path,
    exec_mode: ExecMode,
    report: &mut RunReport,
) -> Result<(), PipelineError> {
    let err = stage_err("evaluation");
    let dir = out.join("eval");
    fs::create_dir_all(&dir)?;

    let mut summaries = Vec::with_capacity(jobs.len());
    let mut entries = Vec::with_capacity(jobs.len());
    for job in jobs {
        let record = &records[job.record];
        let matching = pairwise_match_exec(
            &job.outcome.decoded,
            &record.set,
            config.evaluation.matching,
            exec_mode,
            false,
        )
        .map_err(&err)?;
        let mse = mse_metric(&job.outcome.decoded, &record.set).map_err(&err)?;
        summaries.push(MatchSummary {
            subject: job.subject.clone(),
            roi: job.roi.clone(),
            embedding: record.set.name.clone(),
            accuracy: matching.accuracy,
            n_pairs: matching.n_pairs,
            ties: matching.ties,
            mse: mse.mean,
        });
        entries.push(ScoreEntry {
            subject: job.subject.clone(),
            roi: job.roi.clone(),
            network: job.network.clone(),
            embedding_name: record.set.name.clone(),
            tuning_mode: record.mode_label.clone(),
            accuracy: matching.accuracy,
            mse: mse.mean,
            count: 1,
        });
    }
    let scores = ScoreTable::new(entries).map_err(&err)?;

    fs::write(dir.join("score_table.csv"), scores.to_csv())?;
    for (level, file) in [
        (AggregateLevel::Roi, "by-roi.csv"),
        (AggregateLevel::Network, "by-network.csv"),
        (AggregateLevel::SubjectMean, "by-embedding.csv"),
        (AggregateLevel::TuningModeMean, "by-mode.csv"),
    ] {
        let table = aggregate_scores(&scores, level).map_err(&err)?;
        fs::write(dir.join(file), table.to_csv())?;
    }
    write_json(&dir.join("matches.json"), &summaries)?;

    // Paired finetune-vs-prefix test per task over (subject, roi) cells.
    // Summaries sit in job order, so the two modes of a task list the same
    // (subject, roi) cells in the same order.
    let mut testable: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    if let Some(t) = &config.embeddings.tuning {
        for ti in 0..t.tasks {
            let task = format!("task-{}", ti + 1);
            let cells = |mode: &str| -> Vec<f64> {
                jobs.iter()
                    .zip(&summaries)
                    .filter(|(job, _)| {
                        let r = &records[job.record];
                        r.task.as_deref() == Some(task.as_str()) && r.mode_label == mode
                    })
                    .map(|(_, s)| s.accuracy)
                    .collect()
            };
            let finetune = cells("finetune");
            let prefix = cells("prefix");
            if finetune.is_empty() || prefix.is_empty() {
                report.skipped.push(format!(
                    "significance: {task} was not trained in both modes"
                ));
                continue;
            }
            if finetune.len() < 2 {
                report.skipped.push(format!(
                    "significance: {task} has {} paired cells, needs at least 2",
                    finetune.len()
                ));
                continue;
            }
            testable.push((task, finetune, prefix));
        }
    }
    let family = testable.len();
    for (task, finetune, prefix) in testable {
        let result = paired_test(&finetune, &prefix, family).map_err(&err)?;
        report.significance.push(SignificanceEntry { task, result });
    }
    write_json(&dir.join("significance.json"), &report.significance)?;

    report.scores = scores;
    report.matches = summaries;
    Ok(())
}

#[derive(Serialize)]
struct RsaRecord<'a> {
    mode: crate::repsim::RsaMode,
    linkage: crate::repsim::Linkage,
    names: &'a [String],
    newick: &'a str,
}

fn stage_rsa(
    config: &PipelineConfig,
    records: &[EmbeddingRecord],
    out: &Path,
    exec_mode: ExecMode,
    report: &mut RunReport,
) -> Result<(), PipelineError> {
    if records.len() < 2 {
        report.skipped.push(format!(
            "rsa: needs at least 2 embedding sets, have {}",
            records.len()
        ));
        return Ok(());
    }
    let dir = out.join("rsa");
    fs::create_dir_all(&dir)?;

    let sets: Vec<EmbeddingSet> = records.iter().map(|r| r.set.clone()).collect();
    let corr = correlation_matrix_exec(&sets, config.analysis.rsa_mode, exec_mode)
        .map_err(stage_err("rsa"))?;
    let dendrogram = hcluster(&corr, config.analysis.linkage).map_err(stage_err("rsa"))?;
    let newick = dendrogram.to_newick();

    store_matrix(
        &dir.join("correlations.json"),
        &NamedMatrix {
            name: "rep-correlation".into(),
            role: "rep-correlation".into(),
            subject: None,
            matrix: corr.values.clone(),
        },
    )
    .map_err(stage_err("rsa"))?;
    write_json(
        &dir.join("rsa.json"),
        &RsaRecord {
            mode: config.analysis.rsa_mode,
            linkage: config.analysis.linkage,
            names: &corr.names,
            newick: &newick,
        },
    )?;
    write_json(&dir.join("dendrogram.json"), &dendrogram)?;
    fs::write(dir.join("tree.newick"), format!("{newick}\n"))?;

    if config.analysis.variance_explained {
        if let Some((accuracies, correlations)) = variance_points(records, &corr, report) {
            match variance_explained(&accuracies, &correlations) {
                Ok(v) => {
                    write_json(&dir.join("variance.json"), &v)?;
                    report.variance = Some(v);
                }
                Err(e) => report.skipped.push(format!("variance: {e}")),
            }
        }
    }

    report.rep_correlations = Some(corr);
    report.dendrogram = Some(dendrogram);
    Ok(())
}

/// Gathers (accuracy, correlation-to-untuned) points for every embedding set
/// other than `untuned` itself; records a skip reason when too few exist.
fn variance_points(
    records: &[EmbeddingRecord],
    corr: &crate::repsim::RepCorrelationMatrix,
    report: &mut RunReport,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let untuned = match corr.names.iter().position(|n| n == "untuned") {
        Some(u) => u,
        None => {
            report
                .skipped
                .push("variance: no untuned embedding set to correlate against".into());
            return None;
        }
    };
    let mut accuracies = Vec::new();
    let mut correlations = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if i == untuned {
            continue;
        }
        let scored: Vec<f64> = report
            .scores
            .entries
            .iter()
            .filter(|e| e.embedding_name == r.set.name)
            .map(|e| e.accuracy)
            .collect();
        if scored.is_empty() {
            continue;
        }
        accuracies.push(scored.iter().sum::<f64>() / scored.len() as f64);
        correlations.push(corr.values.get(i, untuned));
    }
    if accuracies.len() < 3 {
        report.skipped.push(format!(
            "variance: needs at least 3 embedding sets beyond untuned, have {}",
            accuracies.len()
        ));
        return None;
    }
    Some((accuracies, correlations))
}

/// Rejects names that would not survive as file names or CSV fields.
fn check_file_safe(stage: &'static str, what: &str, name: &str) -> Result<(), PipelineError> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && name
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphanumeric());
    if ok {
        Ok(())
    } else {
        Err(stage_fail(
            stage,
            format!(
                "{what} {name:?} must be ASCII letters, digits, '-', '_' or '.', \
                 starting with a letter or digit"
            ),
        ))
    }
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<String, PipelineError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Stage {
        stage: "artifacts",
        message: e.to_string(),
    })?;
    Ok(format!("{json}\n"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    fs::write(path, to_pretty_json(value)?)?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
