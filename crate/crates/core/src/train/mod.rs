//! Weighted multi-task training: loss, learning-rate program, optimizer loop.

mod gradcheck;
pub mod loss;
mod optim;
mod schedule;

pub use gradcheck::{grad_check, GradCheckReport, GroupError};
pub use loss::{weighted_ce_loss, LossReport, LossStats};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::{lr_at_step, AnnealSpec, Phase, TrainSchedule};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward_row, forward_row, ModelState, Params};
use crate::sequence::{LossRegion, PackedRow, TrainExample};
use crate::tensor::Scalar;
use crate::vocab::TokenId;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub phase: Phase,
    pub region: LossRegion,
    pub lr: f64,
    pub total_loss: f64,
    pub loss_text: f64,
    pub loss_semantic: f64,
    pub loss_acoustic: f64,
    pub token_acc: f64,
    pub grad_norm: f64,
    pub frames: usize,
    pub wall_ms: u64,
}

fn row_inputs(examples: &[TrainExample], row: &PackedRow, region: LossRegion) -> (Vec<TokenId>, Vec<f32>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut weights = Vec::new();
    let mut segs = Vec::new();
    for &i in &row.segments {
        let ex = &examples[i];
        ids.extend_from_slice(ex.delayed.tokens());
        weights.extend_from_slice(ex.weights(region));
        segs.push(ex.len());
    }
    (ids, weights, segs)
}

/// Loss statistics of a set of packed rows without gradients.
pub fn batch_loss<F: Scalar>(
    state: &ModelState<F>,
    examples: &[TrainExample],
    rows: &[PackedRow],
    region: LossRegion,
) -> LossStats {
    let mut total = LossStats::default();
    for row in rows {
        let (ids, weights, segs) = row_inputs(examples, row, region);
        let (logits, _) = forward_row(state, &ids, &segs, false);
        total.merge(&loss::row_loss(&state.vocab, &logits, &ids, &weights, &segs, 1.0, None));
    }
    total
}

/// Loss statistics and the gradient of the normalized batch loss.
///
/// Rows are processed in parallel, each into its own gradient buffer; the
/// buffers are summed in row order so the result does not depend on the
/// number of threads.
pub fn batch_gradients<F: Scalar>(
    state: &ModelState<F>,
    examples: &[TrainExample],
    rows: &[PackedRow],
    region: LossRegion,
) -> Result<(LossStats, Params<F>)> {
    let ns = state.n_streams();
    let inputs: Vec<_> = rows.iter().map(|r| row_inputs(examples, r, region)).collect();
    let normalizer: f64 = inputs.iter().map(|(_, w, s)| loss::supervised_weight(w, s, ns)).sum();
    if normalizer <= 0.0 {
        return Err(Error::EmptyMask);
    }
    let parts: Vec<(LossStats, Params<F>)> = inputs
        .par_iter()
        .map(|(ids, weights, segs)| {
            let (logits, trace) = forward_row(state, ids, segs, true);
            let mut dlogits = vec![F::zero(); logits.len()];
            let stats = loss::row_loss(&state.vocab, &logits, ids, weights, segs, normalizer, Some(&mut dlogits));
            let mut grads = Params::zeros(&state.config, &state.vocab);
            backward_row(state, &trace.expect("trace requested"), &dlogits, &mut grads);
            (stats, grads)
        })
        .collect();
    let mut parts = parts.into_iter();
    let (mut stats, mut grads) = parts.next().ok_or(Error::EmptyMask)?;
    for (s, g) in parts {
        stats.merge(&s);
        for (a, b) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x += y);
        }
    }
    Ok((stats, grads))
}

/// Region used by an update: the override if given, else the pre-training
/// switch rule; annealing keeps the target region.
pub fn region_for(schedule: &TrainSchedule, phase: Phase, step: u64, region_override: Option<LossRegion>) -> LossRegion {
    region_override.unwrap_or(match phase {
        Phase::Pretrain => schedule.region_at_step(step),
        Phase::Anneal => LossRegion::Target,
    })
}

/// Applies update number `step` (1-based within `phase`) on one batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    state: &mut ModelState<f32>,
    opt: &mut AdamW<f32>,
    examples: &[TrainExample],
    rows: &[PackedRow],
    schedule: &TrainSchedule,
    phase: Phase,
    step: u64,
    region_override: Option<LossRegion>,
) -> Result<TrainLogRecord> {
    let start = Instant::now();
    let lr = lr_at_step(schedule, step, phase)?;
    let region = region_for(schedule, phase, step, region_override);
    let (stats, grads) = batch_gradients(state, examples, rows, region)?;
    let report = stats.report()?;
    if !report.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            batch: step,
            loss: report.loss,
        });
    }
    let grad_norm = opt.step(&mut state.params, &grads, lr);
    let frames = rows.iter().map(|r| r.len).sum();
    Ok(TrainLogRecord {
        step,
        phase,
        region,
        lr,
        total_loss: report.loss,
        loss_text: report.per_class[0],
        loss_semantic: report.per_class[1],
        loss_acoustic: report.per_class[2],
        token_acc: report.accuracy,
        grad_norm,
        frames,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}
