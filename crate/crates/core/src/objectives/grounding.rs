//! Subtask-to-tool grounding: `-log π(z_k | s_k)` averaged over pairs.

use super::cross_entropy_step;
use crate::error::{Error, Result};
use crate::nn::{ModelGradients, PolicyModel};
use crate::vocab::{TokenId, ToolVocabulary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubtaskPair {
    pub subtask: String,
    pub tool_token: TokenId,
}

#[derive(Debug, Clone)]
pub struct GroundingOutput {
    pub gradients: ModelGradients,
    /// Pairs skipped because their subtask text encodes to nothing.
    pub skipped: usize,
}

/// Mean cross-entropy of each pair's tool token at the position after the
/// encoded subtask.
pub fn subtask_grounding_loss(
    model: &PolicyModel,
    vocab: &ToolVocabulary,
    pairs: &[SubtaskPair],
) -> Result<GroundingOutput> {
    if pairs.is_empty() {
        return Err(Error::Argument("no subtask pairs".into()));
    }
    let mut total = ModelGradients::zeros(&model.params);
    let mut used = 0usize;
    let mut skipped = 0usize;
    for pair in pairs {
        let ids = vocab.encode_text(&pair.subtask);
        if ids.is_empty() {
            skipped += 1;
            continue;
        }
        let last = ids.len() - 1;
        let g = cross_entropy_step(model, &ids, last, &[(last, pair.tool_token)])?;
        total.accumulate(1.0, &g);
        used += 1;
    }
    if skipped > 0 {
        log::warn!("{skipped} subtask pairs with empty text skipped");
    }
    if used > 0 {
        total.scale(1.0 / used as f64);
    }
    Ok(GroundingOutput {
        gradients: total,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ToolGraph;
    use crate::nn::ModelConfig;
    use crate::objectives::softmax;
    use crate::vocab::lexicon_from_texts;

    fn setup() -> (ToolVocabulary, PolicyModel) {
        let graph = ToolGraph::new(
            vec![("A".into(), "first".into()), ("B".into(), "second".into())],
            [(0, 1)],
        )
        .unwrap();
        let vocab =
            ToolVocabulary::build(&lexicon_from_texts(["first second third ."]), &graph).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.total_size(),
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_context: 12,
            seed: 1,
        };
        let model = PolicyModel::init(cfg, &graph, &vocab).unwrap();
        (vocab, model)
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let (vocab, mut model) = setup();
        model.params.head_w.fill(0.0);
        model.params.head_b.fill(0.0);
        let pairs = vec![SubtaskPair {
            subtask: "first second".into(),
            tool_token: vocab.tool_token(1).unwrap(),
        }];
        let out = subtask_grounding_loss(&model, &vocab, &pairs).unwrap();
        let v = vocab.total_size() as f64;
        assert!((out.gradients.loss - v.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_softmax_oracle() {
        let (vocab, model) = setup();
        let pairs: Vec<SubtaskPair> = [("first", 0), ("second third", 1), ("third .", 0)]
            .iter()
            .map(|&(s, t)| SubtaskPair {
                subtask: s.into(),
                tool_token: vocab.tool_token(t).unwrap(),
            })
            .collect();
        let out = subtask_grounding_loss(&model, &vocab, &pairs).unwrap();
        let mut expected = 0.0;
        for p in &pairs {
            let ids = vocab.encode_text(&p.subtask);
            let tr = model.forward(&ids).unwrap();
            let probs = softmax(tr.logits.row(ids.len() - 1));
            expected += -probs[p.tool_token].ln();
        }
        expected /= 3.0;
        assert!((out.gradients.loss - expected).abs() < 1e-9);
    }

    #[test]
    fn confident_model_has_near_zero_loss() {
        let (vocab, mut model) = setup();
        let target = vocab.tool_token(0).unwrap();
        model.params.head_b[target] = 60.0;
        let pairs = vec![SubtaskPair {
            subtask: "second".into(),
            tool_token: target,
        }];
        let out = subtask_grounding_loss(&model, &vocab, &pairs).unwrap();
        assert!(out.gradients.loss < 1e-20);
    }

    #[test]
    fn empty_text_is_skipped() {
        let (vocab, model) = setup();
        let pairs = vec![
            SubtaskPair {
                subtask: "   ".into(),
                tool_token: vocab.tool_token(0).unwrap(),
            },
            SubtaskPair {
                subtask: "first".into(),
                tool_token: vocab.tool_token(0).unwrap(),
            },
        ];
        let out = subtask_grounding_loss(&model, &vocab, &pairs).unwrap();
        assert_eq!(out.skipped, 1);
        assert!(out.gradients.loss > 0.0);
        assert!(subtask_grounding_loss(&model, &vocab, &[]).is_err());
    }
}
