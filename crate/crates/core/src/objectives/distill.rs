//! On-policy distillation from a teacher that sees the reference solution.
//!
//! The student samples a rollout from its own prompt; at every visited
//! state both models' next-token distributions are truncated to the
//! restricted output set and the student is pulled toward the teacher by
//! `KL(p_S ‖ p_T)`. The teacher is never updated and no gradient flows
//! through the sampling.

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use super::prompts::{build_student_prompt, build_teacher_prompt};
use crate::datagen::TaskSample;
use crate::error::{Error, Result};
use crate::nn::{generate, DecodeMode, ForwardOptions, ModelGradients, OutputSeed, PolicyModel};
use crate::vocab::{TokenId, ToolVocabulary};

const KL_SMOOTHING: f64 = 1e-12;

/// Softmax over `restricted` entries of `logits`, in `restricted` order.
pub fn restricted_distribution(logits: ArrayView1<'_, f64>, restricted: &[TokenId]) -> Vec<f64> {
    let max = restricted
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = restricted.iter().map(|&i| (logits[i] - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Smoothed `Σ p log(p / q)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * ((pi + KL_SMOOTHING).ln() - (qi + KL_SMOOTHING).ln()))
        .sum()
}

/// Samples a student rollout from `prompt` over the restricted set.
pub fn rollout<R: Rng + ?Sized>(
    student: &PolicyModel,
    prompt: &[TokenId],
    vocab: &ToolVocabulary,
    temperature: f64,
    max_steps: usize,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    generate(
        student,
        prompt,
        vocab,
        DecodeMode::Sample { temperature },
        max_steps,
        rng,
    )
}

#[derive(Debug, Clone)]
pub struct OpdOutput {
    /// Student gradients; `loss` is the step-averaged KL.
    pub gradients: ModelGradients,
    pub rollout: Vec<TokenId>,
    pub per_step_kl: Vec<f64>,
}

/// KL loss along a fixed rollout. Steps are the rollout tokens, so a
/// terminating eos counts as a step; an empty rollout scores the single
/// first step.
pub fn opd_loss_on_rollout(
    student: &PolicyModel,
    teacher: &PolicyModel,
    vocab: &ToolVocabulary,
    student_prompt: &[TokenId],
    teacher_prompt: &[TokenId],
    rollout: &[TokenId],
) -> Result<OpdOutput> {
    if student_prompt.is_empty() || teacher_prompt.is_empty() {
        return Err(Error::Argument("empty prompt".into()));
    }
    let restricted = vocab.restricted_output_ids();
    if let Some(&bad) = rollout.iter().find(|t| !restricted.contains(t)) {
        return Err(Error::Argument(format!("rollout token {bad} outside the restricted set")));
    }
    if student.config.vocab_size != teacher.config.vocab_size {
        return Err(Error::Argument("student and teacher vocabularies differ".into()));
    }
    let eos = vocab.eos_id();
    let steps = rollout.len().max(1);
    // Tokens fed back as context: everything except a trailing eos.
    let context: &[TokenId] = match rollout.last() {
        Some(&t) if t == eos => &rollout[..rollout.len() - 1],
        _ => rollout,
    };
    let context = &context[..context.len().min(steps - 1)];

    let mut s_ids = student_prompt.to_vec();
    s_ids.extend_from_slice(context);
    let mut t_ids = teacher_prompt.to_vec();
    t_ids.extend_from_slice(context);
    let s_from = student_prompt.len() - 1;
    let t_from = teacher_prompt.len() - 1;

    let s_trace = student.forward_with(
        &s_ids,
        ForwardOptions {
            logits_from: s_from,
            record: true,
        },
    )?;
    let t_trace = teacher.forward_with(
        &t_ids,
        ForwardOptions {
            logits_from: t_from,
            record: false,
        },
    )?;

    let mut d_logits = Array2::<f64>::zeros(s_trace.logits.dim());
    let mut per_step = Vec::with_capacity(steps);
    let scale = 1.0 / steps as f64;
    for k in 0..steps {
        let p = restricted_distribution(s_trace.logits.row(k), &restricted);
        let q = restricted_distribution(t_trace.logits.row(k), &restricted);
        per_step.push(kl_divergence(&p, &q));
        let g: Vec<f64> = p
            .iter()
            .zip(&q)
            .map(|(&pi, &qi)| {
                (pi + KL_SMOOTHING).ln() - (qi + KL_SMOOTHING).ln() + pi / (pi + KL_SMOOTHING)
            })
            .collect();
        let mean_g: f64 = p.iter().zip(&g).map(|(pi, gi)| pi * gi).sum();
        let mut row = d_logits.row_mut(k);
        for (j, &id) in restricted.iter().enumerate() {
            row[id] = scale * p[j] * (g[j] - mean_g);
        }
    }
    let loss = per_step.iter().sum::<f64>() * scale;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite distillation loss {loss}")));
    }
    let mut seed = OutputSeed::new(student.config.num_layers);
    seed.d_logits = Some(d_logits);
    let grads = student.backward(&s_trace, &seed)?;
    Ok(OpdOutput {
        gradients: ModelGradients { grads, loss },
        rollout: rollout.to_vec(),
        per_step_kl: per_step,
    })
}

/// Samples one rollout and evaluates the distillation loss on it.
pub fn opd_loss<R: Rng + ?Sized>(
    student: &PolicyModel,
    teacher: &PolicyModel,
    vocab: &ToolVocabulary,
    sample: &TaskSample,
    rollout_temperature: f64,
    max_steps: usize,
    rng: &mut R,
) -> Result<OpdOutput> {
    let s_prompt = build_student_prompt(vocab, sample);
    let t_prompt = build_teacher_prompt(vocab, sample)?;
    let z = rollout(student, &s_prompt, vocab, rollout_temperature, max_steps, rng)?;
    opd_loss_on_rollout(student, teacher, vocab, &s_prompt, &t_prompt, &z)
}
