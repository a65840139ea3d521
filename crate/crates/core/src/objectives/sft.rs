//! Query-to-tool supervised loss.
//!
//! Input is the student prompt followed by the gold tool tokens; the loss
//! sums `-log π(z_k | q, z_<k)` over every tool and one final eos target.

use super::cross_entropy_step;
use super::prompts::build_student_prompt;
use crate::datagen::TaskSample;
use crate::error::{Error, Result};
use crate::nn::{ModelGradients, PolicyModel};
use crate::vocab::{TokenId, ToolVocabulary};

/// Input ids, first scored position and `(position, target)` pairs.
pub(crate) fn sft_targets(
    vocab: &ToolVocabulary,
    prompt: &[TokenId],
    sample: &TaskSample,
) -> Result<(Vec<TokenId>, usize, Vec<(usize, TokenId)>)> {
    if sample.trajectory.is_empty() {
        return Err(Error::Data(format!("sample {}: empty trajectory", sample.id)));
    }
    let z = vocab
        .encode_trajectory(&sample.trajectory)
        .map_err(|e| Error::Data(format!("sample {}: {e}", sample.id)))?
        .token_ids;
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(&z);
    let start = prompt.len() - 1;
    let targets = z
        .iter()
        .copied()
        .chain(std::iter::once(vocab.eos_id()))
        .enumerate()
        .map(|(k, t)| (start + k, t))
        .collect();
    Ok((ids, start, targets))
}

/// Per-sample SFT loss (a sum over steps, eos included) and its gradients.
pub fn sft_loss(
    model: &PolicyModel,
    vocab: &ToolVocabulary,
    sample: &TaskSample,
) -> Result<ModelGradients> {
    let prompt = build_student_prompt(vocab, sample);
    let (ids, start, targets) = sft_targets(vocab, &prompt, sample)?;
    cross_entropy_step(model, &ids, start, &targets)
}

/// Batch mean of [`sft_loss`].
pub fn sft_batch_loss(
    model: &PolicyModel,
    vocab: &ToolVocabulary,
    samples: &[&TaskSample],
) -> Result<ModelGradients> {
    let mut total = ModelGradients::zeros(&model.params);
    for s in samples {
        total.accumulate(1.0, &sft_loss(model, vocab, s)?);
    }
    if !samples.is_empty() {
        total.scale(1.0 / samples.len() as f64);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ToolGraph;
    use crate::nn::ModelConfig;
    use crate::objectives::prompts::template_texts;
    use crate::objectives::softmax;
    use crate::vocab::lexicon_from_texts;

    fn setup() -> (ToolVocabulary, PolicyModel, TaskSample) {
        let graph = ToolGraph::new(
            vec![
                ("A".into(), "first".into()),
                ("B".into(), "second".into()),
                ("C".into(), "third".into()),
            ],
            [(0, 1), (1, 2)],
        )
        .unwrap();
        let mut texts = template_texts().to_vec();
        texts.push("please use a then b first second third");
        let vocab = ToolVocabulary::build(&lexicon_from_texts(texts), &graph).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.total_size(),
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_context: 96,
            seed: 5,
        };
        let model = PolicyModel::init(cfg, &graph, &vocab).unwrap();
        let sample = TaskSample {
            id: "s0".into(),
            query: "please use a then b".into(),
            subtasks: vec!["first".into(), "second".into()],
            trajectory: vec![0, 1],
        };
        (vocab, model, sample)
    }

    #[test]
    fn uniform_logits_give_l_plus_one_log_v() {
        let (vocab, mut model, sample) = setup();
        model.params.head_w.fill(0.0);
        model.params.head_b.fill(0.0);
        let g = sft_loss(&model, &vocab, &sample).unwrap();
        let expected = 3.0 * (vocab.total_size() as f64).ln();
        assert!((g.loss - expected).abs() < 1e-9);
    }

    #[test]
    fn matches_manual_log_softmax_sum() {
        let (vocab, model, sample) = setup();
        let g = sft_loss(&model, &vocab, &sample).unwrap();
        let prompt = build_student_prompt(&vocab, &sample);
        let a = vocab.tool_token(0).unwrap();
        let b = vocab.tool_token(1).unwrap();
        let mut ids = prompt.clone();
        ids.extend([a, b]);
        let tr = model.forward(&ids).unwrap();
        let p = prompt.len();
        let expected = -softmax(tr.logits.row(p - 1))[a].ln()
            - softmax(tr.logits.row(p))[b].ln()
            - softmax(tr.logits.row(p + 1))[vocab.eos_id()].ln();
        assert!((g.loss - expected).abs() < 1e-9);
    }

    #[test]
    fn empty_trajectory_is_a_data_error() {
        let (vocab, model, mut sample) = setup();
        sample.trajectory.clear();
        assert!(matches!(sft_loss(&model, &vocab, &sample), Err(Error::Data(_))));
        sample.trajectory = vec![9];
        assert!(matches!(sft_loss(&model, &vocab, &sample), Err(Error::Data(_))));
    }
}
