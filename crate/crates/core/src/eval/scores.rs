//! Score tables and aggregation.
//!
//! A [`ScoreTable`] holds one row per decoding job, keyed by subject, ROI,
//! and embedding set. [`aggregate_scores`] collapses the table to coarser
//! summaries; each [`AggregateLevel`] names the granularity of the result,
//! and everything finer is averaged out with a flat (unweighted) mean over
//! the input entries.

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Placeholder written into key fields that an aggregation averaged away.
const COLLAPSED: &str = "mean";
/// Placeholder for spatial fields pooled across all values.
const POOLED: &str = "all";

/// One decoding result: a subject's ROI decoded toward one embedding set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub subject: String,
    pub roi: String,
    pub network: String,
    pub embedding_name: String,
    /// How the embedding's source model was adapted, e.g. "prefix",
    /// "finetune", or "untuned".
    pub tuning_mode: String,
    pub accuracy: f64,
    pub mse: f64,
    /// Number of raw results averaged into this entry; 1 for raw rows.
    pub count: usize,
}

/// Collection of score entries with unique (subject, roi, embedding) keys.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreTable {
    pub entries: Vec<ScoreEntry>,
}

/// Result granularity of [`aggregate_scores`]. Levels form a ladder from
/// fine to coarse; each keeps the named keys and averages over the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateLevel {
    /// One entry per (roi, network, embedding, mode): averages subjects.
    Roi,
    /// One entry per (network, embedding, mode): averages subjects and ROIs.
    Network,
    /// One entry per (embedding, mode): the per-task grand mean.
    SubjectMean,
    /// One entry per tuning mode: the per-mode grand mean.
    TuningModeMean,
}

impl ScoreTable {
    /// Validates key fields and uniqueness of (subject, roi, embedding).
    pub fn new(entries: Vec<ScoreEntry>) -> Result<ScoreTable, EvalError> {
        for (i, e) in entries.iter().enumerate() {
            validate_fields(e)?;
            let dup = entries[..i].iter().any(|p| {
                p.subject == e.subject && p.roi == e.roi && p.embedding_name == e.embedding_name
            });
            if dup {
                return Err(EvalError::InvalidField(format!(
                    "duplicate score key ({}, {}, {})",
                    e.subject, e.roi, e.embedding_name
                )));
            }
        }
        Ok(ScoreTable { entries })
    }

    /// Renders the table as CSV with a fixed column order.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("subject,roi,network,embedding,tuning_mode,accuracy,mse,count\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.subject,
                e.roi,
                e.network,
                e.embedding_name,
                e.tuning_mode,
                e.accuracy,
                e.mse,
                e.count
            ));
        }
        out
    }

    /// Parses a table written by [`ScoreTable::to_csv`].
    pub fn from_csv(text: &str) -> Result<ScoreTable, EvalError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| EvalError::ParseError("empty table".into()))?;
        if header != "subject,roi,network,embedding,tuning_mode,accuracy,mse,count" {
            return Err(EvalError::ParseError(format!(
                "unexpected header: {header}"
            )));
        }
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(EvalError::ParseError(format!(
                    "line {}: expected 8 fields, found {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let parse_f64 = |s: &str, what: &str| {
                s.parse::<f64>().map_err(|_| {
                    EvalError::ParseError(format!("line {}: bad {what}: {s}", lineno + 2))
                })
            };
            entries.push(ScoreEntry {
                subject: fields[0].to_string(),
                roi: fields[1].to_string(),
                network: fields[2].to_string(),
                embedding_name: fields[3].to_string(),
                tuning_mode: fields[4].to_string(),
                accuracy: parse_f64(fields[5], "accuracy")?,
                mse: parse_f64(fields[6], "mse")?,
                count: fields[7].parse().map_err(|_| {
                    EvalError::ParseError(format!("line {}: bad count: {}", lineno + 2, fields[7]))
                })?,
            });
        }
        ScoreTable::new(entries)
    }
}

fn validate_fields(e: &ScoreEntry) -> Result<(), EvalError> {
    for (field, value) in [
        ("subject", &e.subject),
        ("roi", &e.roi),
        ("network", &e.network),
        ("embedding_name", &e.embedding_name),
        ("tuning_mode", &e.tuning_mode),
    ] {
        if value.is_empty() {
            return Err(EvalError::MissingKey(field.into()));
        }
        if value.contains(',') || value.contains('\n') {
            return Err(EvalError::InvalidField(format!(
                "{field} value {value:?} contains a delimiter"
            )));
        }
    }
    Ok(())
}

/// Collapses a score table to the given granularity.
///
/// Accuracies and errors are averaged with equal weight per input entry;
/// `count` sums the source counts. Output entries are sorted by key.
pub fn aggregate_scores(
    table: &ScoreTable,
    level: AggregateLevel,
) -> Result<ScoreTable, EvalError> {
    if table.entries.is_empty() {
        return Err(EvalError::EmptyGroup("score table has no entries".into()));
    }
    for e in &table.entries {
        validate_fields(e)?;
    }

    let key_of = |e: &ScoreEntry| -> Vec<String> {
        match level {
            AggregateLevel::Roi => vec![
                e.roi.clone(),
                e.network.clone(),
                e.embedding_name.clone(),
                e.tuning_mode.clone(),
            ],
            AggregateLevel::Network => {
                vec![
                    e.network.clone(),
                    e.embedding_name.clone(),
                    e.tuning_mode.clone(),
                ]
            }
            AggregateLevel::SubjectMean => vec![e.embedding_name.clone(), e.tuning_mode.clone()],
            AggregateLevel::TuningModeMean => vec![e.tuning_mode.clone()],
        }
    };

    let mut keys: Vec<Vec<String>> = Vec::new();
    for e in &table.entries {
        let key = key_of(e);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.sort();

    let mut entries = Vec::with_capacity(keys.len());
    for key in keys {
        let members: Vec<&ScoreEntry> = table.entries.iter().filter(|e| key_of(e) == key).collect();
        let n = members.len() as f64;
        let accuracy = members.iter().map(|e| e.accuracy).sum::<f64>() / n;
        let mse = members.iter().map(|e| e.mse).sum::<f64>() / n;
        let count = members.iter().map(|e| e.count).sum();
        let entry = match level {
            AggregateLevel::Roi => ScoreEntry {
                subject: COLLAPSED.into(),
                roi: key[0].clone(),
                network: key[1].clone(),
                embedding_name: key[2].clone(),
                tuning_mode: key[3].clone(),
                accuracy,
                mse,
                count,
            },
            AggregateLevel::Network => ScoreEntry {
                subject: COLLAPSED.into(),
                // The network becomes the spatial unit, so it stands in for
                // the ROI key to keep (subject, roi, embedding) unique.
                roi: key[0].clone(),
                network: key[0].clone(),
                embedding_name: key[1].clone(),
                tuning_mode: key[2].clone(),
                accuracy,
                mse,
                count,
            },
            AggregateLevel::SubjectMean => ScoreEntry {
                subject: COLLAPSED.into(),
                roi: POOLED.into(),
                network: POOLED.into(),
                embedding_name: key[0].clone(),
                tuning_mode: key[1].clone(),
                accuracy,
                mse,
                count,
            },
            AggregateLevel::TuningModeMean => ScoreEntry {
                subject: COLLAPSED.into(),
                roi: POOLED.into(),
                network: POOLED.into(),
                // The mode becomes the entity being scored, so it stands in
                // for the embedding key to keep (subject, roi, embedding)
                // unique.
                embedding_name: key[0].clone(),
                tuning_mode: key[0].clone(),
                accuracy,
                mse,
                count,
            },
        };
        entries.push(entry);
    }
    ScoreTable::new(entries)
}
