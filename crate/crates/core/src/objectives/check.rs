//! Finite-difference checks of every objective on a small reference model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::distill::opd_loss_on_rollout;
use super::edge::{candidates_for_path, edge_loss_with_candidates};
use super::grounding::subtask_grounding_loss;
use super::prompts::{build_student_prompt, build_teacher_prompt};
use super::sft::sft_loss;
use super::{EdgeObjectiveConfig, EdgeProjections, SubtaskPair};
use crate::datagen::{build_lexicon, generate_synthetic_graph, generate_task_corpus, CorpusSpec, TaskSample};
use crate::error::Result;
use crate::graph::{DirectedPath, ToolGraph};
use crate::nn::{finite_difference_check, GradCheckReport, ModelConfig, ParamSet, Params, PolicyModel};
use crate::vocab::ToolVocabulary;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_COORDS: usize = 120;

/// Two layers, hidden 32, four heads over an 8-tool graph.
pub struct ReferenceSetup {
    pub graph: ToolGraph,
    pub vocab: ToolVocabulary,
    pub samples: Vec<TaskSample>,
    pub model: PolicyModel,
    pub teacher: PolicyModel,
    pub projections: EdgeProjections,
}

pub fn reference_setup(seed: u64) -> Result<ReferenceSetup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = generate_synthetic_graph(8, 24, &mut rng)?;
    let spec = CorpusSpec {
        n_train: 3,
        n_val: 0,
        n_test: 0,
        length_distribution: vec![0.0, 0.5, 0.5],
        ..Default::default()
    };
    let samples = generate_task_corpus(&graph, &spec, &mut rng)?.train;
    let vocab = ToolVocabulary::build(&build_lexicon(&graph, &samples), &graph)?;
    let config = ModelConfig {
        vocab_size: vocab.total_size(),
        hidden_dim: 32,
        num_layers: 2,
        num_heads: 4,
        max_context: 256,
        seed,
    };
    let model = PolicyModel::init(config.clone(), &graph, &vocab)?;
    let teacher = PolicyModel::init(ModelConfig { seed: seed ^ 0x5eed, ..config }, &graph, &vocab)?;
    let projections = EdgeProjections::init(32, 16, &mut rng);
    Ok(ReferenceSetup {
        graph,
        vocab,
        samples,
        model,
        teacher,
        projections,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NamedCheck {
    pub loss: String,
    pub report: GradCheckReport,
}

fn with(model: &PolicyModel, p: &Params) -> PolicyModel {
    PolicyModel::from_params(model.config.clone(), p.clone())
}

/// Checks `L_sub`, `L_edge`, `L_sft` and `L_opd` in that order.
pub fn gradcheck_all(seed: u64, epsilon: f64, coords: usize) -> Result<Vec<NamedCheck>> {
    let r = reference_setup(seed)?;
    let m = &r.model;
    let v = &r.vocab;
    let mut out = Vec::new();

    let pairs: Vec<SubtaskPair> = r.samples[0]
        .subtasks
        .iter()
        .zip(&r.samples[0].trajectory)
        .map(|(s, &t)| Ok(SubtaskPair { subtask: s.clone(), tool_token: v.tool_token(t)? }))
        .collect::<Result<_>>()?;
    let g = subtask_grounding_loss(m, v, &pairs)?.gradients;
    let rep = finite_difference_check(
        &m.params,
        &g.grads,
        |p| Ok(subtask_grounding_loss(&with(m, p), v, &pairs)?.gradients.loss),
        epsilon,
        coords,
        seed,
    )?;
    out.push(NamedCheck { loss: "subtask".into(), report: rep });

    let path = DirectedPath { nodes: r.samples[1].trajectory.clone() };
    let cfg = EdgeObjectiveConfig { neg_ratio: 2, ..Default::default() };
    let cands = candidates_for_path(&r.graph, &path, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let e = edge_loss_with_candidates(m, &r.projections, v, &path, &cands, cfg.temperature)?;
    let joint = (m.params.clone(), r.projections.clone());
    let grads = (e.model_grads.clone(), e.proj_grads.clone());
    let rep = finite_difference_check(
        &joint,
        &grads,
        |(p, proj)| Ok(edge_loss_with_candidates(&with(m, p), proj, v, &path, &cands, cfg.temperature)?.loss),
        epsilon,
        coords,
        seed,
    )?;
    out.push(NamedCheck { loss: "edge".into(), report: rep });

    let sample = &r.samples[2];
    let g = sft_loss(m, v, sample)?;
    let rep = finite_difference_check(
        &m.params,
        &g.grads,
        |p| Ok(sft_loss(&with(m, p), v, sample)?.loss),
        epsilon,
        coords,
        seed,
    )?;
    out.push(NamedCheck { loss: "sft".into(), report: rep });

    let sp = build_student_prompt(v, sample);
    let tp = build_teacher_prompt(v, sample)?;
    let mut z = v.encode_trajectory(&sample.trajectory)?.token_ids;
    z.truncate(2);
    z.push(v.eos_id());
    let o = opd_loss_on_rollout(m, &r.teacher, v, &sp, &tp, &z)?;
    let rep = finite_difference_check(
        &m.params,
        &o.gradients.grads,
        |p| Ok(opd_loss_on_rollout(&with(m, p), &r.teacher, v, &sp, &tp, &z)?.gradients.loss),
        epsilon,
        coords,
        seed,
    )?;
    out.push(NamedCheck { loss: "distill".into(), report: rep });
    debug_assert!(o.gradients.grads.all_finite());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_objectives_pass_finite_differences() {
        for c in gradcheck_all(3, DEFAULT_EPSILON, 40).unwrap() {
            assert!(
                c.report.max_relative_error < 1e-4,
                "{}: {:?}",
                c.loss,
                c.report
            );
        }
    }
}
