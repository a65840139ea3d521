//! Training objectives: subtask grounding, edge reconstruction,
//! query-to-tool SFT and on-policy distillation against a privileged
//! teacher.

pub mod check;
pub mod distill;
pub mod edge;
pub mod grounding;
pub mod prompts;
pub mod sft;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::nn::{ForwardTrace, ModelGradients, OutputSeed, PolicyModel};
use crate::vocab::TokenId;

pub use distill::{kl_divergence, opd_loss, opd_loss_on_rollout, restricted_distribution, rollout, OpdOutput};
pub use edge::{
    build_candidate_set, candidates_for_path, edge_loss_with_candidates, edge_reconstruction_loss,
    edge_scores, CandidateSet, EdgeLossOutput,
    EdgeObjectiveConfig, EdgeProjections,
};
pub use grounding::{subtask_grounding_loss, GroundingOutput, SubtaskPair};
pub use prompts::{build_student_prompt, build_teacher_prompt};
pub use sft::{sft_batch_loss, sft_loss};

/// `L = L_sft + λ · L_opd`.
pub fn combined_loss(sft: f64, opd: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(sft + lambda * opd)
}

/// Numerically stable softmax of a logit row.
pub fn softmax(row: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Sum of `-log softmax(logits[pos - offset])[target]` over `targets`, and
/// the gradient with respect to `logits`.
pub(crate) fn cross_entropy_rows(
    logits: &Array2<f64>,
    offset: usize,
    targets: &[(usize, TokenId)],
) -> (f64, Array2<f64>) {
    let mut d = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for &(pos, target) in targets {
        let row = logits.row(pos - offset);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += log_z - row[target];
        let p = softmax(row);
        let mut row = d.row_mut(pos - offset);
        for (g, pv) in row.iter_mut().zip(&p) {
            *g += pv;
        }
        row[target] -= 1.0;
    }
    (loss, d)
}

pub(crate) fn cross_entropy(
    trace: &ForwardTrace,
    targets: &[(usize, TokenId)],
) -> (f64, Array2<f64>) {
    cross_entropy_rows(&trace.logits, trace.logits_from, targets)
}

/// Forward, cross-entropy at the given positions, backward.
pub(crate) fn cross_entropy_step(
    model: &PolicyModel,
    ids: &[TokenId],
    logits_from: usize,
    targets: &[(usize, TokenId)],
) -> Result<ModelGradients> {
    let trace = model.forward_with(
        ids,
        crate::nn::ForwardOptions {
            logits_from,
            record: true,
        },
    )?;
    let (loss, d_logits) = cross_entropy(&trace, targets);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite cross-entropy {loss}")));
    }
    let mut seed = OutputSeed::new(model.config.num_layers);
    seed.d_logits = Some(d_logits);
    let grads = model.backward(&trace, &seed)?;
    Ok(ModelGradients { grads, loss })
}
