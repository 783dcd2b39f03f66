//! Gradient-descent training for both tuning modes, plus the finite
//! difference gradient check that keeps the manual backward pass honest.
//!
//! Batch gradients are computed per example from a zeroed buffer and folded
//! in example order, so sequential and parallel execution produce bitwise
//! identical updates.

use serde::{Deserialize, Serialize};

use crate::exec::{self, ExecMode};
use crate::matrix::Matrix;
use crate::rng;

use super::backward::{backward, Gradients, SeedGrad};
use super::forward::{forward, lm_targets, prob_row, sequence_nll, ForwardCache};
use super::{PrefixError, PrefixLmModel, TokenBatch, TuningMode, INIT_STD};

/// Coordinates with analytic gradients below this magnitude are not worth
/// comparing against finite differences.
const MIN_CHECKED_GRAD: f64 = 1e-6;
/// Relative-error denominator floor for the gradient check.
const REL_FLOOR: f64 = 1e-8;
/// Coordinates checked per tensor, picked by gradient magnitude.
const CHECKS_PER_TENSOR: usize = 3;

/// Knobs for [`train_with`] and [`train_classifier`].
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub steps: usize,
    pub step_size: f64,
    /// Heavy-ball coefficient; 0 gives plain gradient descent.
    pub momentum: f64,
    pub exec: ExecMode,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 100,
            step_size: 0.1,
            momentum: 0.0,
            exec: ExecMode::default(),
        }
    }
}

/// Loss before every update plus the final loss, `steps + 1` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trace is never empty")
    }

    pub fn is_strictly_decreasing(&self) -> bool {
        self.losses.windows(2).all(|w| w[1] < w[0])
    }
}

/// Linear head over mean-pooled final hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `d_model x n_classes`.
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl ClassifierHead {
    pub fn init(d_model: usize, n_classes: usize, seed: u64) -> ClassifierHead {
        let mut rng = rng::stream(seed, rng::STREAM_MODEL);
        let mut w = Matrix::zeros(d_model, n_classes);
        for v in w.data_mut() {
            *v = INIT_STD * rng::next_normal(&mut rng);
        }
        ClassifierHead {
            w,
            b: vec![0.0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.w.cols()
    }
}

/// One classification example: a token sequence and its class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClsExample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Mean negative log-likelihood per target token over the batch.
pub fn batch_loss(model: &PrefixLmModel, data: &TokenBatch) -> Result<f64, PrefixError> {
    validate_batch(data)?;
    batch_loss_unchecked(model, data)
}

fn batch_loss_unchecked(model: &PrefixLmModel, data: &TokenBatch) -> Result<f64, PrefixError> {
    let mut total = 0.0;
    let mut n_targets = 0usize;
    for ex in &data.examples {
        let tokens = ex.tokens();
        let cache = forward(model, &tokens)?;
        let targets = lm_targets(ex.context.len(), &tokens);
        total += sequence_nll(&cache, &targets);
        n_targets += targets.len();
    }
    Ok(total / n_targets as f64)
}

/// Language-model training with plain gradient descent.
pub fn train(
    model: &mut PrefixLmModel,
    data: &TokenBatch,
    mode: TuningMode,
    steps: usize,
    step_size: f64,
) -> Result<LossTrace, PrefixError> {
    train_with(
        model,
        data,
        mode,
        TrainOptions {
            steps,
            step_size,
            ..TrainOptions::default()
        },
    )
}

/// Language-model training with explicit options.
pub fn train_with(
    model: &mut PrefixLmModel,
    data: &TokenBatch,
    mode: TuningMode,
    options: TrainOptions,
) -> Result<LossTrace, PrefixError> {
    validate_batch(data)?;
    check_mode(model, mode)?;
    let collect_base = mode == TuningMode::Finetune;
    let mut velocity = Gradients::zeros(&model.config, collect_base);
    let mut losses = Vec::with_capacity(options.steps + 1);
    for step in 0..options.steps {
        let (loss, grads) = batch_grads(model, data, collect_base, options.exec)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(PrefixError::NonFiniteLoss { step });
        }
        losses.push(loss);
        apply_update(model, &mut velocity, &grads, mode, &options);
    }
    let final_loss = batch_loss_unchecked(model, data)?;
    if !final_loss.is_finite() {
        return Err(PrefixError::NonFiniteLoss {
            step: options.steps,
        });
    }
    losses.push(final_loss);
    Ok(LossTrace { losses })
}

/// Classifier training: the head always trains, the backbone trains
/// according to the tuning mode.
pub fn train_classifier(
    model: &mut PrefixLmModel,
    head: &mut ClassifierHead,
    data: &[ClsExample],
    mode: TuningMode,
    options: TrainOptions,
) -> Result<LossTrace, PrefixError> {
    if data.is_empty() {
        return Err(PrefixError::EmptyData(
            "classification batch has no examples".into(),
        ));
    }
    for (i, ex) in data.iter().enumerate() {
        if ex.label >= head.n_classes() {
            return Err(PrefixError::LabelOutOfRange {
                label: ex.label,
                n_classes: head.n_classes(),
            });
        }
        if ex.tokens.is_empty() {
            return Err(PrefixError::EmptyData(format!(
                "classification example {i} is empty"
            )));
        }
    }
    check_mode(model, mode)?;
    let collect_base = mode == TuningMode::Finetune;
    let mut velocity = Gradients::zeros(&model.config, collect_base);
    let mut head_vel_w = Matrix::zeros(head.w.rows(), head.w.cols());
    let mut head_vel_b = vec![0.0; head.b.len()];
    let mut losses = Vec::with_capacity(options.steps + 1);

    for step in 0..options.steps {
        let per = exec::map_range(options.exec, data.len(), |i| {
            cls_grads(model, head, &data[i], collect_base)
        });
        let mut total = 0.0;
        let mut grads = Gradients::zeros(&model.config, collect_base);
        let mut d_w = Matrix::zeros(head.w.rows(), head.w.cols());
        let mut d_b = vec![0.0; head.b.len()];
        for r in per {
            let one = r?;
            total += one.loss;
            grads.add_assign(&one.model);
            for (a, b) in d_w.data_mut().iter_mut().zip(one.head_w.data()) {
                *a += b;
            }
            for (a, b) in d_b.iter_mut().zip(&one.head_b) {
                *a += b;
            }
        }
        let scale = 1.0 / data.len() as f64;
        total *= scale;
        grads.scale(scale);
        for v in d_w.data_mut() {
            *v *= scale;
        }
        for v in &mut d_b {
            *v *= scale;
        }
        if !total.is_finite() || !grads.is_finite() || !d_w.is_finite() {
            return Err(PrefixError::NonFiniteLoss { step });
        }
        losses.push(total);

        apply_update(model, &mut velocity, &grads, mode, &options);
        for ((w, v), g) in head
            .w
            .data_mut()
            .iter_mut()
            .zip(head_vel_w.data_mut())
            .zip(d_w.data())
        {
            *v = options.momentum * *v + g;
            *w -= options.step_size * *v;
        }
        for ((b, v), g) in head.b.iter_mut().zip(&mut head_vel_b).zip(&d_b) {
            *v = options.momentum * *v + g;
            *b -= options.step_size * *v;
        }
    }

    let mut total = 0.0;
    for ex in data {
        total += cls_loss(model, head, ex)?;
    }
    let final_loss = total / data.len() as f64;
    if !final_loss.is_finite() {
        return Err(PrefixError::NonFiniteLoss {
            step: options.steps,
        });
    }
    losses.push(final_loss);
    Ok(LossTrace { losses })
}

struct ClsGrads {
    loss: f64,
    model: Gradients,
    head_w: Matrix,
    head_b: Vec<f64>,
}

fn cls_forward(
    model: &PrefixLmModel,
    head: &ClassifierHead,
    ex: &ClsExample,
) -> Result<(ForwardCache, Vec<f64>, Vec<f64>, f64), PrefixError> {
    let cache = forward(model, &ex.tokens)?;
    let m = cache.h_final.rows();
    let d = model.config.d_model;
    let mut pooled = vec![0.0; d];
    for t in 0..m {
        for (p, v) in pooled.iter_mut().zip(cache.h_final.row(t)) {
            *p += v;
        }
    }
    for p in &mut pooled {
        *p /= m as f64;
    }
    let n_classes = head.n_classes();
    let mut logits = head.b.clone();
    for (r, &x) in pooled.iter().enumerate() {
        for (logit, w) in logits.iter_mut().zip(head.w.row(r)) {
            *logit += x * w;
        }
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[ex.label];
    let probs: Vec<f64> = logits.iter().map(|&l| (l - lse).exp()).collect();
    debug_assert_eq!(probs.len(), n_classes);
    Ok((cache, pooled, probs, loss))
}

fn cls_loss(
    model: &PrefixLmModel,
    head: &ClassifierHead,
    ex: &ClsExample,
) -> Result<f64, PrefixError> {
    cls_forward(model, head, ex).map(|(_, _, _, loss)| loss)
}

fn cls_grads(
    model: &PrefixLmModel,
    head: &ClassifierHead,
    ex: &ClsExample,
    collect_base: bool,
) -> Result<ClsGrads, PrefixError> {
    let (cache, pooled, probs, loss) = cls_forward(model, head, ex)?;
    let mut dlogits = probs;
    dlogits[ex.label] -= 1.0;

    let d = model.config.d_model;
    let mut head_w = Matrix::zeros(d, head.n_classes());
    for (r, &x) in pooled.iter().enumerate() {
        for (g, dl) in head_w.row_mut(r).iter_mut().zip(&dlogits) {
            *g = x * dl;
        }
    }
    let head_b = dlogits.clone();

    let mut d_pooled = vec![0.0; d];
    for (r, dp) in d_pooled.iter_mut().enumerate() {
        *dp = head
            .w
            .row(r)
            .iter()
            .zip(&dlogits)
            .map(|(w, dl)| w * dl)
            .sum();
    }
    let m = cache.h_final.rows();
    let mut d_h_final = Matrix::zeros(m, d);
    for t in 0..m {
        for (g, dp) in d_h_final.row_mut(t).iter_mut().zip(&d_pooled) {
            *g = dp / m as f64;
        }
    }

    let mut grads = Gradients::zeros(&model.config, collect_base);
    backward(
        model,
        &cache,
        SeedGrad::HiddenStates(&d_h_final),
        &mut grads,
    );
    Ok(ClsGrads {
        loss,
        model: grads,
        head_w,
        head_b,
    })
}

fn validate_batch(data: &TokenBatch) -> Result<(), PrefixError> {
    if data.examples.is_empty() {
        return Err(PrefixError::EmptyData("batch has no examples".into()));
    }
    for (i, ex) in data.examples.iter().enumerate() {
        if ex.context.is_empty() {
            return Err(PrefixError::EmptyData(format!(
                "example {i} has an empty context"
            )));
        }
        if ex.targets.is_empty() {
            return Err(PrefixError::EmptyData(format!(
                "example {i} has no targets"
            )));
        }
    }
    Ok(())
}

fn check_mode(model: &PrefixLmModel, mode: TuningMode) -> Result<(), PrefixError> {
    if mode == TuningMode::Prefix && model.config.prefix_len == 0 {
        return Err(PrefixError::InvalidConfig(
            "prefix tuning needs prefix_len of at least 1".into(),
        ));
    }
    Ok(())
}

/// Loss and parameter gradients over the batch, both normalized by the
/// total target count.
fn batch_grads(
    model: &PrefixLmModel,
    data: &TokenBatch,
    collect_base: bool,
    exec_mode: ExecMode,
) -> Result<(f64, Gradients), PrefixError> {
    let per = exec::map_range(exec_mode, data.examples.len(), |i| {
        let ex = &data.examples[i];
        let tokens = ex.tokens();
        let cache = forward(model, &tokens)?;
        let targets = lm_targets(ex.context.len(), &tokens);
        let loss = sequence_nll(&cache, &targets);
        let mut dlogits = Matrix::zeros(tokens.len(), model.config.vocab_size);
        for t in &targets {
            let probs = prob_row(&cache, t.position);
            let row = dlogits.row_mut(t.position);
            for (dst, p) in row.iter_mut().zip(&probs) {
                *dst += p;
            }
            row[t.token] -= 1.0;
        }
        let mut g = Gradients::zeros(&model.config, collect_base);
        backward(model, &cache, SeedGrad::Logits(&dlogits), &mut g);
        Ok::<_, PrefixError>((loss, targets.len(), g))
    });

    let mut total_loss = 0.0;
    let mut total_targets = 0usize;
    let mut grads = Gradients::zeros(&model.config, collect_base);
    for r in per {
        let (loss, n, g) = r?;
        total_loss += loss;
        total_targets += n;
        grads.add_assign(&g);
    }
    let scale = 1.0 / total_targets as f64;
    grads.scale(scale);
    Ok((total_loss * scale, grads))
}

fn apply_update(
    model: &mut PrefixLmModel,
    velocity: &mut Gradients,
    grads: &Gradients,
    mode: TuningMode,
    options: &TrainOptions,
) {
    if mode == TuningMode::Finetune {
        let vb = velocity
            .base
            .as_mut()
            .expect("finetune velocity carries base buffers");
        let gb = grads
            .base
            .as_ref()
            .expect("finetune gradients carry base buffers");
        for (((_, _, p), (_, _, v)), (_, _, g)) in model
            .base
            .tensors_mut()
            .into_iter()
            .zip(vb.tensors_mut())
            .zip(gb.tensors())
        {
            for ((pp, vv), gg) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = options.momentum * *vv + gg;
                *pp -= options.step_size * *vv;
            }
        }
    }
    // The prefix trains in both modes whenever it exists.
    for ((pp, vv), gg) in model
        .prefix
        .data_mut()
        .iter_mut()
        .zip(velocity.prefix.data_mut())
        .zip(grads.prefix.data())
    {
        *vv = options.momentum * *vv + gg;
        *pp -= options.step_size * *vv;
    }
}

/// One coordinate comparison between analytic and central-difference
/// gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
}

/// Verifies the analytic batch gradient against central finite differences.
///
/// For each tensor the gradient reaches in `mode`, the largest-magnitude
/// coordinates are re-derived from two loss evaluations at `p +- epsilon`.
/// Coordinates with negligible analytic gradient are skipped; the step must
/// lie in `[1e-6, 1e-3]`, where truncation and cancellation errors are both
/// small for this loss.
pub fn grad_check(
    model: &PrefixLmModel,
    data: &TokenBatch,
    epsilon: f64,
    mode: TuningMode,
) -> Result<GradCheckReport, PrefixError> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(PrefixError::InvalidConfig(format!(
            "finite-difference step {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    validate_batch(data)?;
    check_mode(model, mode)?;
    let collect_base = mode == TuningMode::Finetune;
    let (_, grads) = batch_grads(model, data, collect_base, ExecMode::Sequential)?;

    let mut tensor_grads: Vec<(String, Vec<f64>)> = Vec::new();
    if let Some(base) = grads.base.as_ref() {
        for (name, _, g) in base.tensors() {
            tensor_grads.push((name, g.to_vec()));
        }
    }
    if model.config.prefix_len > 0 {
        tensor_grads.push(("prefix".into(), grads.prefix.data().to_vec()));
    }

    let mut entries = Vec::new();
    for (name, g) in &tensor_grads {
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| {
            g[b].abs()
                .partial_cmp(&g[a].abs())
                .expect("finite gradients")
                .then(a.cmp(&b))
        });
        for &i in order.iter().take(CHECKS_PER_TENSOR) {
            let analytic = g[i];
            if analytic.abs() < MIN_CHECKED_GRAD {
                break;
            }
            let plus = perturbed_loss(model, data, name, i, epsilon)?;
            let minus = perturbed_loss(model, data, name, i, -epsilon)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let rel_error =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            entries.push(GradCheckEntry {
                tensor: name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    if entries.is_empty() {
        return Err(PrefixError::EmptyData(
            "no gradient coordinate was large enough to check".into(),
        ));
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        entries,
    })
}

fn perturbed_loss(
    model: &PrefixLmModel,
    data: &TokenBatch,
    tensor: &str,
    index: usize,
    delta: f64,
) -> Result<f64, PrefixError> {
    let mut probe = model.clone();
    if tensor == "prefix" {
        probe.prefix.data_mut()[index] += delta;
    } else {
        for (name, _, d) in probe.base.tensors_mut() {
            if name == tensor {
                d[index] += delta;
                break;
            }
        }
    }
    batch_loss_unchecked(&probe, data)
}
