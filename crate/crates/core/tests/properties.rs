//! Randomized property checks over the library's core guarantees: exact
//! interchange round-trips, ridge optimality and solver equivalences,
//! leakage-free fold handling, the invariances of pairwise matching and RDM
//! comparison, and dendrogram height monotonicity.
//!
//! Matrices are built from a proptest-chosen seed through the library's own
//! deterministic generator, so failures shrink to a small seed and shape
//! instead of an unreadable value dump.

use std::sync::Arc;

use proptest::prelude::*;

use neurodec::corpus::{
    load_matrix, roi_slice, store_matrix, synth_dataset, EmbeddingSet, NamedMatrix, Roi, RoiAtlas,
    Sentence, StimulusSet, SynthSpec, VoxelDataset,
};
use neurodec::decoder::{
    fit_ridge, run_cv_full, CvConfig, DecodedVectors, FoldStrategy, LambdaMode, Solver,
};
use neurodec::eval::{mse_metric, pairwise_match, pearson, MatchMode};
use neurodec::exec::ExecMode;
use neurodec::matrix::Matrix;
use neurodec::repsim::{
    hcluster, rep_correlation, variance_explained, Linkage, RepCorrelationMatrix, RsaMode,
};
use neurodec::rng;

fn normal_matrix(seed: u64, stream: u64, rows: usize, cols: usize) -> Matrix {
    let mut r = rng::stream(seed, stream);
    let mut m = Matrix::zeros(rows, cols);
    rng::fill_normal(&mut r, m.data_mut());
    m
}

fn stimulus(n: usize) -> Arc<StimulusSet> {
    let sentences = (0..n)
        .map(|i| Sentence {
            sentence_id: i,
            text: format!("sentence {i}"),
            passage_id: i / 4,
            topic_id: i / 16,
            experiment_id: 0,
        })
        .collect();
    Arc::new(StimulusSet::new(sentences).unwrap())
}

/// Ridge objective on raw inputs, matching the closed form's stationarity
/// condition.
fn ridge_objective(v: &Matrix, z: &Matrix, w: &Matrix, lambda: f64) -> f64 {
    let residual = v.matmul(w);
    let mut obj = 0.0;
    for (p, t) in residual.data().iter().zip(z.data()) {
        obj += (p - t) * (p - t);
    }
    for x in w.data() {
        obj += lambda * x * x;
    }
    obj
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Values representable in 32 bits survive the manifest + payload round
    /// trip bit-exactly.
    #[test]
    fn matrix_round_trip_is_bit_exact(
        rows in 1usize..6,
        cols in 1usize..6,
        values in prop::collection::vec(-1e6f32..1e6f32, 25),
    ) {
        let data: Vec<f64> = values.iter().take(rows * cols).map(|&v| v as f64).collect();
        let named = NamedMatrix {
            name: "probe".into(),
            role: "embedding".into(),
            subject: Some("s01".into()),
            matrix: Matrix::from_vec(rows, cols, data),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.json");
        store_matrix(&path, &named).unwrap();
        let back = load_matrix(&path).unwrap();
        prop_assert_eq!(back.matrix.data(), named.matrix.data());
        prop_assert_eq!(back.name, named.name);
        prop_assert_eq!(back.role, named.role);
        prop_assert_eq!(back.subject, named.subject);
    }

    /// Slicing by ROI reorders columns exactly as the index list dictates.
    #[test]
    fn roi_slice_selects_exact_columns(
        seed in any::<u64>(),
        n_e in 2usize..10,
        n_v in 3usize..12,
        picks in prop::collection::btree_set(0usize..12, 1..6),
    ) {
        let indices: Vec<usize> = picks.into_iter().filter(|&i| i < n_v).collect();
        prop_assume!(!indices.is_empty());
        let data = normal_matrix(seed, 0, n_e, n_v);
        let dataset = VoxelDataset::new("s01".into(), data.clone(), stimulus(n_e)).unwrap();
        let atlas = RoiAtlas::new(vec![Roi {
            name: "probe".into(),
            network: "net".into(),
            voxel_indices: indices.clone(),
        }])
        .unwrap();
        let sliced = roi_slice(&dataset, &atlas, "probe").unwrap();
        prop_assert_eq!(sliced.data.cols(), indices.len());
        for r in 0..n_e {
            for (j, &col) in indices.iter().enumerate() {
                prop_assert_eq!(sliced.data.get(r, j), data.get(r, col));
            }
        }
    }

    /// The generator is a pure function of its spec, and with zero noise the
    /// targets are exactly the linear readout of the voxels.
    #[test]
    fn synthesis_is_pure_and_noiseless_targets_are_exact(
        seed in any::<u64>(),
        n_e in 2usize..12,
        n_v in 1usize..8,
        n_d in 1usize..6,
    ) {
        let spec = SynthSpec {
            n_sentences: n_e,
            n_voxels: n_v,
            n_dims: n_d,
            signal_scale: 1.0,
            noise_scale: 0.0,
            seed,
        };
        let a = synth_dataset(&spec).unwrap();
        let b = synth_dataset(&spec).unwrap();
        prop_assert_eq!(a.dataset.data.data(), b.dataset.data.data());
        prop_assert_eq!(a.embeddings.data.data(), b.embeddings.data.data());

        let readout = a.dataset.data.matmul(&a.ground_truth);
        prop_assert_eq!(a.embeddings.data.data(), readout.data());
    }

    /// Heavier penalties never grow the coefficients.
    #[test]
    fn ridge_weight_norm_is_non_increasing_in_lambda(
        seed in any::<u64>(),
        n_e in 4usize..24,
        n_v in 2usize..10,
        n_d in 1usize..5,
    ) {
        let v = normal_matrix(seed, 0, n_e, n_v);
        let z = normal_matrix(seed, 1, n_e, n_d);
        let mut previous = f64::INFINITY;
        for lambda in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let fit = fit_ridge(&v, &z, lambda, Solver::Auto).unwrap();
            let norm = fit.weights.frobenius_norm();
            prop_assert!(
                norm <= previous * (1.0 + 1e-12),
                "norm grew from {previous} to {norm} at lambda {lambda}"
            );
            previous = norm;
        }
    }

    /// Primal and dual routes solve the same normal equations.
    #[test]
    fn primal_and_dual_ridge_agree(
        seed in any::<u64>(),
        n_e in 2usize..24,
        n_v in 1usize..12,
        n_d in 1usize..5,
        log_lambda in -2.0f64..2.0,
    ) {
        let v = normal_matrix(seed, 0, n_e, n_v);
        let z = normal_matrix(seed, 1, n_e, n_d);
        let lambda = 10f64.powf(log_lambda);
        let primal = fit_ridge(&v, &z, lambda, Solver::Primal).unwrap();
        let dual = fit_ridge(&v, &z, lambda, Solver::Dual).unwrap();
        let mut num = 0.0;
        for (a, b) in primal.weights.data().iter().zip(dual.weights.data()) {
            num += (a - b) * (a - b);
        }
        let rel = num.sqrt() / primal.weights.frobenius_norm().max(1e-12);
        prop_assert!(rel <= 1e-8, "primal and dual differ by {rel:.2e}");
    }

    /// No bounded perturbation of the fitted weights improves the objective
    /// beyond rounding.
    #[test]
    fn fitted_ridge_weights_are_first_order_optimal(
        seed in any::<u64>(),
        n_e in 4usize..20,
        n_v in 2usize..8,
        n_d in 1usize..4,
        lambda in prop::sample::select(vec![0.01, 1.0, 100.0]),
    ) {
        let v = normal_matrix(seed, 0, n_e, n_v);
        let z = normal_matrix(seed, 1, n_e, n_d);
        let fit = fit_ridge(&v, &z, lambda, Solver::Auto).unwrap();
        let base = ridge_objective(&v, &z, &fit.weights, lambda);

        let mut delta = normal_matrix(seed, 2, n_v, n_d);
        let scale = 1e-3 / delta.frobenius_norm().max(1e-12);
        for x in delta.data_mut() {
            *x *= scale;
        }
        let mut perturbed = fit.weights.clone();
        for (w, d) in perturbed.data_mut().iter_mut().zip(delta.data()) {
            *w += d;
        }
        let moved = ridge_objective(&v, &z, &perturbed, lambda);
        prop_assert!(
            moved >= base - 1e-9,
            "objective improved from {base} to {moved} under a small perturbation"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Outer folds partition the sentences: every row held out exactly once,
    /// sizes balanced to within one.
    #[test]
    fn cv_folds_partition_the_rows(
        seed in any::<u64>(),
        fold_seed in any::<u64>(),
        n_e in 10usize..40,
        n_folds in 2usize..6,
        strategy in prop::sample::select(vec![
            FoldStrategy::SeededShuffle,
            FoldStrategy::ByPassage,
            FoldStrategy::Contiguous,
        ]),
    ) {
        prop_assume!(n_folds * 2 <= n_e);
        // The stimulus helper packs four sentences per passage; by-passage
        // folding needs at least one passage per fold.
        prop_assume!(strategy != FoldStrategy::ByPassage || n_e.div_ceil(4) >= n_folds);
        let v = normal_matrix(seed, 0, n_e, 6);
        let z = normal_matrix(seed, 1, n_e, 3);
        let dataset = VoxelDataset::new("s01".into(), v, stimulus(n_e)).unwrap();
        let embeddings = EmbeddingSet::new("probe".into(), z).unwrap();
        let config = CvConfig {
            n_folds,
            fold_seed,
            fold_strategy: strategy,
            lambda_grid: vec![1.0],
            lambda_mode: LambdaMode::Shared,
            inner_folds: 2,
        };
        let outcome = run_cv_full(&dataset, &embeddings, &config, ExecMode::Sequential).unwrap();

        prop_assert_eq!(outcome.folds.len(), n_folds);
        let mut seen = vec![usize::MAX; n_e];
        for (f, fold) in outcome.folds.iter().enumerate() {
            for &row in &fold.test_rows {
                prop_assert_eq!(seen[row], usize::MAX, "row held out twice");
                seen[row] = f;
            }
        }
        prop_assert!(seen.iter().all(|&f| f != usize::MAX), "some row was never held out");
        prop_assert_eq!(&seen, &outcome.decoded.fold_assignment);

        if strategy != FoldStrategy::ByPassage {
            let sizes: Vec<usize> = outcome.folds.iter().map(|f| f.test_rows.len()).collect();
            let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(max - min <= 1, "unbalanced folds: {sizes:?}");
        }
    }

    /// A fold's fitted decoder (preprocessing, selected lambda, weights) is a
    /// function of its training rows only: corrupting the held-out rows
    /// changes nothing about the fit.
    #[test]
    fn held_out_rows_never_reach_the_fit(
        seed in any::<u64>(),
        n_e in 12usize..30,
    ) {
        let v = normal_matrix(seed, 0, n_e, 5);
        let z = normal_matrix(seed, 1, n_e, 3);
        let config = CvConfig {
            n_folds: 3,
            lambda_grid: vec![0.1, 10.0],
            inner_folds: 2,
            ..CvConfig::default()
        };
        let stim = stimulus(n_e);
        let dataset = VoxelDataset::new("s01".into(), v.clone(), Arc::clone(&stim)).unwrap();
        let embeddings = EmbeddingSet::new("probe".into(), z.clone()).unwrap();
        let clean = run_cv_full(&dataset, &embeddings, &config, ExecMode::Sequential).unwrap();

        let mut v2 = v;
        let mut z2 = z;
        for &row in &clean.folds[0].test_rows {
            for x in v2.row_mut(row) {
                *x = *x * 7.5 + 3.0;
            }
            for x in z2.row_mut(row) {
                *x = -*x + 11.0;
            }
        }
        let dataset2 = VoxelDataset::new("s01".into(), v2, stim).unwrap();
        let embeddings2 = EmbeddingSet::new("probe".into(), z2).unwrap();
        let dirty = run_cv_full(&dataset2, &embeddings2, &config, ExecMode::Sequential).unwrap();

        prop_assert_eq!(&dirty.folds[0].test_rows, &clean.folds[0].test_rows);
        prop_assert_eq!(&dirty.folds[0].weights, &clean.folds[0].weights);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Relabeling sentences consistently on both sides cannot change the
    /// score.
    #[test]
    fn matching_is_invariant_under_common_permutation(
        seed in any::<u64>(),
        n in 3usize..20,
        d in 3usize..8,
        perm_seed in any::<u64>(),
    ) {
        let decoded = normal_matrix(seed, 0, n, d);
        let truth = normal_matrix(seed, 1, n, d);
        let mut order: Vec<usize> = (0..n).collect();
        let mut perm_rng = rng::stream(perm_seed, 0);
        rng::shuffle(&mut perm_rng, &mut order);

        let original = pairwise_match(
            &DecodedVectors::unfolded(decoded.clone()),
            &EmbeddingSet::new("t".into(), truth.clone()).unwrap(),
            MatchMode::AllPairs,
        )
        .unwrap();
        let permuted = pairwise_match(
            &DecodedVectors::unfolded(decoded.select_rows(&order)),
            &EmbeddingSet::new("t".into(), truth.select_rows(&order)).unwrap(),
            MatchMode::AllPairs,
        )
        .unwrap();

        prop_assert_eq!(original.wins, permuted.wins);
        prop_assert_eq!(original.ties, permuted.ties);
        prop_assert_eq!(original.accuracy, permuted.accuracy);
    }

    /// Correlation ignores positive per-row affine maps of the decoded rows,
    /// so matching must too.
    #[test]
    fn matching_is_invariant_under_positive_row_affine_maps(
        seed in any::<u64>(),
        n in 3usize..20,
        d in 3usize..8,
        gains in prop::collection::vec(0.2f64..5.0, 20),
        shifts in prop::collection::vec(-3.0f64..3.0, 20),
    ) {
        let decoded = normal_matrix(seed, 0, n, d);
        let truth = EmbeddingSet::new("t".into(), normal_matrix(seed, 1, n, d)).unwrap();

        let mut mapped = decoded.clone();
        for i in 0..n {
            for x in mapped.row_mut(i) {
                *x = gains[i] * *x + shifts[i];
            }
        }

        let original = pairwise_match(
            &DecodedVectors::unfolded(decoded),
            &truth,
            MatchMode::AllPairs,
        )
        .unwrap();
        let transformed = pairwise_match(
            &DecodedVectors::unfolded(mapped),
            &truth,
            MatchMode::AllPairs,
        )
        .unwrap();

        prop_assert_eq!(original.wins, transformed.wins);
        prop_assert_eq!(original.ties, transformed.ties);
    }

    /// Decoding the truth itself scores perfectly when rows are distinct.
    #[test]
    fn perfect_decoding_scores_one(
        seed in any::<u64>(),
        n in 3usize..25,
        d in 3usize..8,
    ) {
        let z = normal_matrix(seed, 0, n, d);
        let truth = EmbeddingSet::new("t".into(), z.clone()).unwrap();
        let report =
            pairwise_match(&DecodedVectors::unfolded(z), &truth, MatchMode::AllPairs).unwrap();
        prop_assert_eq!(report.accuracy, 1.0);
        prop_assert_eq!(report.ties, 0);

        let mse = mse_metric(&DecodedVectors::unfolded(truth.data.clone()), &truth).unwrap();
        prop_assert_eq!(mse.mean, 0.0);
    }

    /// Any real disagreement produces a strictly positive error.
    #[test]
    fn mse_is_positive_for_any_disagreement(
        seed in any::<u64>(),
        n in 2usize..15,
        d in 2usize..8,
        row in 0usize..15,
        col in 0usize..8,
    ) {
        let z = normal_matrix(seed, 0, n, d);
        let truth = EmbeddingSet::new("t".into(), z.clone()).unwrap();
        let mut decoded = z;
        let (r, c) = (row % n, col % d);
        decoded.set(r, c, decoded.get(r, c) + 0.5);
        let report = mse_metric(&DecodedVectors::unfolded(decoded), &truth).unwrap();
        prop_assert!(report.mean > 0.0);
        prop_assert!(report.per_sentence.iter().all(|&e| e >= 0.0));
    }

    /// RDM comparison sees through a global positive affine map of either
    /// representation.
    #[test]
    fn rdm_correlation_ignores_global_affine_maps(
        seed in any::<u64>(),
        n in 3usize..15,
        d_a in 3usize..8,
        d_b in 3usize..8,
        gain in 0.1f64..8.0,
        shift in -4.0f64..4.0,
    ) {
        let a = normal_matrix(seed, 0, n, d_a);
        let b = EmbeddingSet::new("b".into(), normal_matrix(seed, 1, n, d_b)).unwrap();
        let mut mapped = a.clone();
        for x in mapped.data_mut() {
            *x = gain * *x + shift;
        }
        let set_a = EmbeddingSet::new("a".into(), a).unwrap();
        let set_mapped = EmbeddingSet::new("a2".into(), mapped).unwrap();

        let before = rep_correlation(&set_a, &b, RsaMode::Rdm).unwrap();
        let after = rep_correlation(&set_mapped, &b, RsaMode::Rdm).unwrap();
        prop_assert!(
            (before - after).abs() <= 1e-9,
            "correlation moved from {before} to {after} under an affine map"
        );
    }

    /// Merge heights never decrease under average or complete linkage.
    #[test]
    fn dendrogram_heights_are_monotone(
        seed in any::<u64>(),
        k in 2usize..8,
        linkage in prop::sample::select(vec![Linkage::Average, Linkage::Complete]),
    ) {
        let mut corr_rng = rng::stream(seed, 0);
        let mut values = Matrix::identity(k);
        for i in 0..k {
            for j in (i + 1)..k {
                let r = 2.0 * rng::next_unit(&mut corr_rng) - 1.0;
                values.set(i, j, r);
                values.set(j, i, r);
            }
        }
        let corr = RepCorrelationMatrix {
            names: (0..k).map(|i| format!("m{i}")).collect(),
            values,
        };
        let tree = hcluster(&corr, linkage).unwrap();
        prop_assert_eq!(tree.merges.len(), k - 1);
        for pair in tree.merges.windows(2) {
            prop_assert!(
                pair[1].height >= pair[0].height - 1e-12,
                "height dropped from {} to {}",
                pair[0].height,
                pair[1].height
            );
        }
    }

    /// The variance fit reports exactly the squared correlation of its
    /// inputs.
    #[test]
    fn variance_fit_r_squared_is_squared_pearson(
        seed in any::<u64>(),
        n in 3usize..20,
    ) {
        let mut value_rng = rng::stream(seed, 0);
        // An index-proportional ramp keeps both inputs non-constant.
        let x: Vec<f64> = (0..n)
            .map(|i| 0.1 * i as f64 + rng::next_normal(&mut value_rng))
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 0.05 * i as f64 + rng::next_normal(&mut value_rng))
            .collect();
        let fit = variance_explained(&y, &x).unwrap();
        let r = pearson(&y, &x).unwrap();
        prop_assert!(
            (fit.r_squared - r * r).abs() <= 1e-12,
            "r_squared {} vs pearson^2 {}",
            fit.r_squared,
            r * r
        );
        prop_assert_eq!(fit.n_points, n);
    }
}
