//! Autoregressive decoding over the restricted tool-token space.

use rand::Rng;

use super::model::PolicyModel;
use crate::error::{Error, Result};
use crate::graph::{draw_categorical, ToolGraph};
use crate::vocab::{TokenId, ToolVocabulary};

#[derive(Debug, Clone, Copy)]
pub enum DecodeMode<'g> {
    Greedy,
    Sample { temperature: f64 },
    /// Greedy, with candidates after the first tool limited to the
    /// previous tool's successors plus eos.
    GraphMasked(&'g ToolGraph),
}

/// Highest-logit candidate; ties go to the lowest token id.
fn argmax(logits: &[f64], candidates: &[TokenId]) -> TokenId {
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        let (lc, lb) = (logits[c], logits[best]);
        if lc > lb || (lc == lb && c < best) {
            best = c;
        }
    }
    best
}

/// Draws from `softmax(logits[c] / temperature)` over `candidates`.
pub fn sample_restricted<R: Rng + ?Sized>(
    logits: &[f64],
    candidates: &[TokenId],
    temperature: f64,
    rng: &mut R,
) -> TokenId {
    let scaled: Vec<f64> = candidates.iter().map(|&c| logits[c] / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    candidates[draw_categorical(&weights, rng)]
}

/// Generates up to `max_steps` tokens after `prompt`. Output contains only
/// tool tokens and, if generation stopped by choice, a final eos.
pub fn generate<R: Rng + ?Sized>(
    model: &PolicyModel,
    prompt: &[TokenId],
    vocab: &ToolVocabulary,
    mode: DecodeMode<'_>,
    max_steps: usize,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::Argument("empty prompt".into()));
    }
    if let DecodeMode::Sample { temperature } = mode {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Argument(format!("invalid temperature {temperature}")));
        }
    }
    let restricted = vocab.restricted_output_ids();
    let eos = vocab.eos_id();
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_steps {
        let candidates: Vec<TokenId> = match (mode, out.last().and_then(|&t| vocab.tool_of(t))) {
            (DecodeMode::GraphMasked(graph), Some(prev)) => {
                let mut c = graph
                    .successors(prev)?
                    .iter()
                    .map(|&s| vocab.tool_token(s))
                    .collect::<Result<Vec<_>>>()?;
                c.push(eos);
                c
            }
            _ => restricted.clone(),
        };
        if candidates.len() == 1 {
            out.push(eos);
            break;
        }
        let logits = model.next_logits(&seq)?;
        let logits = logits.as_slice().expect("contiguous");
        let next = match mode {
            DecodeMode::Sample { temperature } => {
                sample_restricted(logits, &candidates, temperature, rng)
            }
            DecodeMode::Greedy | DecodeMode::GraphMasked(_) => argmax(logits, &candidates),
        };
        out.push(next);
        if next == eos {
            break;
        }
        seq.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_pick_lowest_id() {
        let logits = [0.0, 2.0, 2.0, 1.0];
        assert_eq!(argmax(&logits, &[3, 2, 1]), 1);
        assert_eq!(argmax(&logits, &[0, 3]), 3);
    }

    #[test]
    fn sampling_respects_candidates() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let logits = [100.0, 0.0, 0.0, 0.0];
        for _ in 0..100 {
            let t = sample_restricted(&logits, &[1, 2], 1.0, &mut rng);
            assert!(t == 1 || t == 2);
        }
    }
}
