//! Cross-validation fold construction.
//!
//! All strategies produce balanced folds whose sizes differ by at most one:
//! with `n = q*k + r` rows and `k` folds, the first `r` folds get `q + 1`
//! rows. Indices inside each fold are sorted ascending; the randomness (when
//! any) lies entirely in which rows land in which fold.

use crate::corpus::StimulusSet;
use crate::rng;

use super::{CvConfig, DecoderError, FoldStrategy};

/// Splits rows `0..n` into `config.n_folds` disjoint test folds.
pub(crate) fn partition(
    n: usize,
    config: &CvConfig,
    stimulus: &StimulusSet,
) -> Result<Vec<Vec<usize>>, DecoderError> {
    if config.n_folds < 2 || config.n_folds > n {
        return Err(DecoderError::InvalidConfig(format!(
            "n_folds must be in 2..={n}, got {}",
            config.n_folds
        )));
    }
    let mut folds = match config.fold_strategy {
        FoldStrategy::SeededShuffle => {
            let mut order: Vec<usize> = (0..n).collect();
            let mut fold_rng = rng::stream(config.fold_seed, rng::STREAM_FOLDS);
            rng::shuffle(&mut fold_rng, &mut order);
            chunk_balanced(&order, config.n_folds)
        }
        FoldStrategy::Contiguous => {
            let order: Vec<usize> = (0..n).collect();
            chunk_balanced(&order, config.n_folds)
        }
        FoldStrategy::ByPassage => by_passage(n, config, stimulus)?,
    };
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// Rows of the complement of `fold`, ascending.
pub fn complement(n: usize, fold: &[usize]) -> Vec<usize> {
    let mut in_fold = vec![false; n];
    for &i in fold {
        in_fold[i] = true;
    }
    (0..n).filter(|&i| !in_fold[i]).collect()
}

fn chunk_balanced(order: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n = order.len();
    let base = n / k;
    let remainder = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < remainder);
        folds.push(order[start..start + size].to_vec());
        start += size;
    }
    folds
}

/// Deals whole passages to folds so no passage straddles a fold boundary.
///
/// Passages are shuffled by the fold seed and then dealt to the currently
/// smallest fold (ties broken by fold index), which keeps row counts balanced
/// even when passages have unequal sizes.
fn by_passage(
    n: usize,
    config: &CvConfig,
    stimulus: &StimulusSet,
) -> Result<Vec<Vec<usize>>, DecoderError> {
    if stimulus.len() != n {
        return Err(DecoderError::ShapeMismatch {
            context: "stimulus sentences vs data rows",
            expected: n,
            actual: stimulus.len(),
        });
    }
    let mut passage_ids: Vec<usize> = Vec::new();
    for s in stimulus.sentences() {
        if !passage_ids.contains(&s.passage_id) {
            passage_ids.push(s.passage_id);
        }
    }
    if passage_ids.len() < config.n_folds {
        return Err(DecoderError::InvalidConfig(format!(
            "by-passage folding needs at least {} passages, found {}",
            config.n_folds,
            passage_ids.len()
        )));
    }
    let mut fold_rng = rng::stream(config.fold_seed, rng::STREAM_FOLDS);
    rng::shuffle(&mut fold_rng, &mut passage_ids);

    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); config.n_folds];
    for pid in passage_ids {
        let target = (0..config.n_folds)
            .min_by_key(|&f| (folds[f].len(), f))
            .expect("n_folds >= 2");
        folds[target].extend(
            stimulus
                .sentences()
                .iter()
                .filter(|s| s.passage_id == pid)
                .map(|s| s.sentence_id),
        );
    }
    Ok(folds)
}
