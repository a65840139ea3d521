//! Contrastive reconstruction of graph successors from tool-token states.
//!
//! For every path position whose tool has outgoing edges, the penultimate
//! hidden state is projected and scored against the projected embeddings
//! of a candidate set (successors, sampled negatives and reverse-edge
//! negatives) by temperature-scaled cosine similarity. Each successor is
//! a softmax target over the whole candidate set.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DirectedPath, ToolGraph, ToolId};
use crate::nn::params::{ParamSet, TensorView};
use crate::nn::{ForwardOptions, OutputSeed, Params, PolicyModel};
use crate::vocab::ToolVocabulary;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeObjectiveConfig {
    pub neg_ratio: usize,
    pub temperature: f64,
    pub projection_dim: usize,
    pub include_reverse_negatives: bool,
    pub seed: u64,
}

impl Default for EdgeObjectiveConfig {
    fn default() -> Self {
        Self {
            neg_ratio: 10,
            temperature: 0.1,
            projection_dim: 32,
            include_reverse_negatives: true,
            seed: 0,
        }
    }
}

impl EdgeObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neg_ratio == 0 {
            return Err(Error::Config("neg_ratio must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("edge temperature must be > 0".into()));
        }
        if self.projection_dim == 0 {
            return Err(Error::Config("projection_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Trainable projections of hidden states (`w_h`) and tool embeddings
/// (`w_e`), both `[projection_dim, hidden_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeProjections {
    pub w_h: Array2<f64>,
    pub w_e: Array2<f64>,
}

impl EdgeProjections {
    pub fn init(hidden_dim: usize, projection_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (hidden_dim as f64).sqrt();
        let mut draw = || {
            Array2::from_shape_fn((projection_dim, hidden_dim), |_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
        };
        let w_h = draw();
        let w_e = draw();
        Self { w_h, w_e }
    }
}

impl ParamSet for EdgeProjections {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            TensorView {
                name: "edge.w_h".into(),
                shape: self.w_h.shape().to_vec(),
                data: self.w_h.as_slice().expect("contiguous"),
            },
            TensorView {
                name: "edge.w_e".into(),
                shape: self.w_e.shape().to_vec(),
                data: self.w_e.as_slice().expect("contiguous"),
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_h.as_slice_mut().expect("contiguous"),
            self.w_e.as_slice_mut().expect("contiguous"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub anchor: ToolId,
    pub positives: Vec<ToolId>,
    pub negatives: Vec<ToolId>,
    pub reverse_negatives: Vec<ToolId>,
}

impl CandidateSet {
    /// Positives first, then negatives, then reverse negatives.
    pub fn members(&self) -> Vec<ToolId> {
        let mut all = self.positives.clone();
        all.extend(&self.negatives);
        all.extend(&self.reverse_negatives);
        all
    }
}

pub fn build_candidate_set<R: Rng + ?Sized>(
    graph: &ToolGraph,
    anchor: ToolId,
    config: &EdgeObjectiveConfig,
    rng: &mut R,
) -> Result<CandidateSet> {
    let positives = graph.successors(anchor)?.to_vec();
    let reverse_negatives: Vec<ToolId> = if config.include_reverse_negatives {
        graph
            .predecessors(anchor)?
            .iter()
            .copied()
            .filter(|&j| !graph.has_edge(anchor, j))
            .collect()
    } else {
        Vec::new()
    };
    let pool: Vec<ToolId> = (0..graph.num_tools())
        .filter(|&j| j != anchor && !positives.contains(&j) && !reverse_negatives.contains(&j))
        .collect();
    let want = config.neg_ratio * positives.len();
    let negatives: Vec<ToolId> = if want >= pool.len() {
        pool
    } else {
        pool.choose_multiple(rng, want).copied().collect()
    };
    Ok(CandidateSet {
        anchor,
        positives,
        negatives,
        reverse_negatives,
    })
}

struct Projected {
    a: Array1<f64>,
    a_norm: f64,
    b: Vec<Array1<f64>>,
    b_norm: Vec<f64>,
    cos: Vec<f64>,
}

fn cosine(a: ArrayView1<'_, f64>, a_norm: f64, b: ArrayView1<'_, f64>, b_norm: f64) -> f64 {
    if a_norm < NORM_FLOOR || b_norm < NORM_FLOOR {
        0.0
    } else {
        a.dot(&b) / (a_norm * b_norm)
    }
}

fn project(
    hidden: ArrayView1<'_, f64>,
    members: &[ToolId],
    embeddings: &Array2<f64>,
    vocab: &ToolVocabulary,
    proj: &EdgeProjections,
) -> Result<Projected> {
    let a = proj.w_h.dot(&hidden);
    let a_norm = a.dot(&a).sqrt();
    let mut b = Vec::with_capacity(members.len());
    let mut b_norm = Vec::with_capacity(members.len());
    let mut cos = Vec::with_capacity(members.len());
    for &j in members {
        let e = embeddings.row(vocab.tool_token(j)?);
        let bj = proj.w_e.dot(&e);
        let n = bj.dot(&bj).sqrt();
        cos.push(cosine(a.view(), a_norm, bj.view(), n));
        b.push(bj);
        b_norm.push(n);
    }
    Ok(Projected {
        a,
        a_norm,
        b,
        b_norm,
        cos,
    })
}

/// `cos(W_h h, W_e e_j) / γ` for every member of `candidates`, in
/// [`CandidateSet::members`] order.
pub fn edge_scores(
    hidden: ArrayView1<'_, f64>,
    candidates: &CandidateSet,
    embeddings: &Array2<f64>,
    vocab: &ToolVocabulary,
    proj: &EdgeProjections,
    gamma: f64,
) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::Argument("edge temperature must be > 0".into()));
    }
    let p = project(hidden, &candidates.members(), embeddings, vocab, proj)?;
    Ok(p.cos.iter().map(|c| c / gamma).collect())
}

#[derive(Debug, Clone)]
pub struct EdgeLossOutput {
    pub loss: f64,
    pub model_grads: Params,
    pub proj_grads: EdgeProjections,
    /// Number of positions with at least one successor.
    pub active_positions: usize,
}

/// Candidate sets for every position of `path`; `None` at sinks.
pub fn candidates_for_path<R: Rng + ?Sized>(
    graph: &ToolGraph,
    path: &DirectedPath,
    config: &EdgeObjectiveConfig,
    rng: &mut R,
) -> Result<Vec<Option<CandidateSet>>> {
    path.nodes
        .iter()
        .map(|&u| {
            let c = build_candidate_set(graph, u, config, rng)?;
            Ok((!c.positives.is_empty()).then_some(c))
        })
        .collect()
}

/// Edge loss of one path with fixed candidate sets.
pub fn edge_loss_with_candidates(
    model: &PolicyModel,
    proj: &EdgeProjections,
    vocab: &ToolVocabulary,
    path: &DirectedPath,
    candidates: &[Option<CandidateSet>],
    gamma: f64,
) -> Result<EdgeLossOutput> {
    if candidates.len() != path.len() {
        return Err(Error::Argument("one candidate slot per path position required".into()));
    }
    let active = candidates.iter().filter(|c| c.is_some()).count();
    let mut proj_grads = proj.zeros_like();
    if active == 0 {
        return Ok(EdgeLossOutput {
            loss: 0.0,
            model_grads: model.params.zeros_like(),
            proj_grads,
            active_positions: 0,
        });
    }
    let ids = vocab.encode_trajectory(&path.nodes)?.token_ids;
    let trace = model.forward_with(
        &ids,
        ForwardOptions {
            logits_from: ids.len() - 1,
            record: true,
        },
    )?;
    let layer = model.config.penultimate_layer();
    let hidden = &trace.hidden_by_layer[layer];
    let embeddings = &model.params.tok_emb;
    let mut d_hidden = Array2::<f64>::zeros(hidden.dim());
    let mut d_emb: Vec<(usize, Array1<f64>)> = Vec::new();
    let weight = 1.0 / active as f64;
    let mut loss = 0.0;

    for (r, slot) in candidates.iter().enumerate() {
        let Some(cset) = slot else { continue };
        let members = cset.members();
        let h = hidden.row(r);
        let p = project(h, &members, embeddings, vocab, proj)?;
        let scores: Vec<f64> = p.cos.iter().map(|c| c / gamma).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let npos = cset.positives.len();
        let pos_term: f64 = scores[..npos].iter().map(|s| log_z - s).sum::<f64>() / npos as f64;
        loss += weight * pos_term;

        // dL/ds_j = softmax_j - [j positive] / |N+|, scaled by the position weight.
        let mut da = Array1::<f64>::zeros(p.a.len());
        for (j, &tool) in members.iter().enumerate() {
            let mut ds = (scores[j] - log_z).exp();
            if j < npos {
                ds -= 1.0 / npos as f64;
            }
            let dcos = weight * ds / gamma;
            if dcos == 0.0 || p.a_norm < NORM_FLOOR || p.b_norm[j] < NORM_FLOOR {
                continue;
            }
            let inv = 1.0 / (p.a_norm * p.b_norm[j]);
            let c = p.cos[j];
            // d cos / d a and d cos / d b
            let ga = &p.b[j] * inv - &p.a * (c / (p.a_norm * p.a_norm));
            let gb = &p.a * inv - &p.b[j] * (c / (p.b_norm[j] * p.b_norm[j]));
            da.scaled_add(dcos, &ga);
            let db = gb * dcos;
            let e = embeddings.row(vocab.tool_token(tool)?);
            proj_grads
                .w_e
                .scaled_add(1.0, &outer(db.view(), e));
            d_emb.push((vocab.tool_token(tool)?, proj.w_e.t().dot(&db)));
        }
        proj_grads.w_h.scaled_add(1.0, &outer(da.view(), h));
        let dh = proj.w_h.t().dot(&da);
        d_hidden.row_mut(r).scaled_add(1.0, &dh);
    }

    let mut seed = OutputSeed::new(model.config.num_layers);
    seed.d_hidden[layer] = Some(d_hidden);
    let mut model_grads = model.backward(&trace, &seed)?;
    for (row, g) in d_emb {
        model_grads.tok_emb.row_mut(row).scaled_add(1.0, &g);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite edge loss {loss}")));
    }
    Ok(EdgeLossOutput {
        loss,
        model_grads,
        proj_grads,
        active_positions: active,
    })
}

fn outer(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Samples candidate sets with `rng`, then evaluates the edge loss.
pub fn edge_reconstruction_loss<R: Rng + ?Sized>(
    model: &PolicyModel,
    proj: &EdgeProjections,
    graph: &ToolGraph,
    vocab: &ToolVocabulary,
    path: &DirectedPath,
    config: &EdgeObjectiveConfig,
    rng: &mut R,
) -> Result<EdgeLossOutput> {
    if !graph.validate_trajectory(&path.nodes)? {
        return Err(Error::Argument("path is not legal under the graph".into()));
    }
    let candidates = candidates_for_path(graph, path, config, rng)?;
    edge_loss_with_candidates(model, proj, vocab, path, &candidates, config.temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::vocab::lexicon_from_texts;
    use rand::SeedableRng;

    fn five_node() -> (ToolGraph, ToolVocabulary, PolicyModel, EdgeProjections) {
        let graph = ToolGraph::new(
            (0..5)
                .map(|i| (format!("T{i}"), format!("word{i} shared")))
                .collect(),
            [(0, 1), (1, 2), (2, 3), (0, 3), (3, 0), (4, 1), (2, 4)],
        )
        .unwrap();
        let lex = lexicon_from_texts(["word0 word1 word2 word3 word4 shared"]);
        let vocab = ToolVocabulary::build(&lex, &graph).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.total_size(),
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_context: 10,
            seed: 3,
        };
        let model = PolicyModel::init(cfg, &graph, &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let proj = EdgeProjections::init(8, 6, &mut rng);
        (graph, vocab, model, proj)
    }

    #[test]
    fn candidate_set_definitions() {
        let g = ToolGraph::new(
            vec![("A".into(), "a".into()), ("B".into(), "b".into())],
            [(0, 1)],
        )
        .unwrap();
        let cfg = EdgeObjectiveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = build_candidate_set(&g, 1, &cfg, &mut rng).unwrap();
        assert!(c.positives.is_empty());
        assert_eq!(c.reverse_negatives, vec![0]);
        assert!(c.negatives.is_empty());
    }

    #[test]
    fn scores_for_aligned_and_orthogonal_vectors() {
        let (graph, vocab, model, _) = five_node();
        let d = 8;
        let mut proj = EdgeProjections {
            w_h: Array2::eye(d),
            w_e: Array2::eye(d),
        };
        let e0 = model.params.tok_emb.row(vocab.tool_token(3).unwrap()).to_owned();
        let cset = CandidateSet {
            anchor: 0,
            positives: vec![3],
            negatives: vec![],
            reverse_negatives: vec![],
        };
        let s = edge_scores(e0.view(), &cset, &model.params.tok_emb, &vocab, &proj, 0.1).unwrap();
        assert!((s[0] - 10.0).abs() < 1e-12);
        // Project everything onto disjoint coordinates.
        proj.w_h = Array2::zeros((2, d));
        proj.w_h[[0, 0]] = 1.0;
        proj.w_e = Array2::zeros((2, d));
        proj.w_e[[1, 1]] = 1.0;
        let s = edge_scores(e0.view(), &cset, &model.params.tok_emb, &vocab, &proj, 0.1).unwrap();
        assert_eq!(s[0], 0.0);
        let _ = graph;
    }

    #[test]
    fn scores_match_direct_recomputation() {
        let (graph, vocab, model, proj) = five_node();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Array1::from_shape_fn(8, |i| (i as f64 * 0.7).sin());
        let cset = build_candidate_set(&graph, 2, &EdgeObjectiveConfig::default(), &mut rng).unwrap();
        let s = edge_scores(h.view(), &cset, &model.params.tok_emb, &vocab, &proj, 0.1).unwrap();
        assert_eq!(s.len(), 5 - 1 - 0);
        for (k, &j) in cset.members().iter().enumerate() {
            let e = model.params.tok_emb.row(vocab.tool_token(j).unwrap());
            let mut a = vec![0.0; 6];
            let mut b = vec![0.0; 6];
            for r in 0..6 {
                for c in 0..8 {
                    a[r] += proj.w_h[[r, c]] * h[c];
                    b[r] += proj.w_e[[r, c]] * e[c];
                }
            }
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((s[k] - dot / (na * nb) / 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_scores_give_log_candidate_count() {
        let (graph, vocab, model, _) = five_node();
        // Zero projections make every cosine 0.
        let proj = EdgeProjections {
            w_h: Array2::zeros((4, 8)),
            w_e: Array2::zeros((4, 8)),
        };
        let path = DirectedPath { nodes: vec![0, 1, 2] };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cands = candidates_for_path(&graph, &path, &EdgeObjectiveConfig::default(), &mut rng).unwrap();
        let out = edge_loss_with_candidates(&model, &proj, &vocab, &path, &cands, 0.1).unwrap();
        let expected: f64 = cands
            .iter()
            .flatten()
            .map(|c| (c.members().len() as f64).ln())
            .sum::<f64>()
            / 3.0;
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn sinks_only_contribute_nothing() {
        let g = ToolGraph::new(vec![("A".into(), "word0".into())], std::iter::empty()).unwrap();
        let vocab = ToolVocabulary::build(&lexicon_from_texts(["word0"]), &g).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.total_size(),
            hidden_dim: 4,
            num_layers: 2,
            num_heads: 1,
            max_context: 4,
            seed: 0,
        };
        let model = PolicyModel::init(cfg, &g, &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = EdgeProjections::init(4, 3, &mut rng);
        let out = edge_reconstruction_loss(
            &model,
            &proj,
            &g,
            &vocab,
            &DirectedPath { nodes: vec![0] },
            &EdgeObjectiveConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!((out.loss, out.active_positions), (0.0, 0));
    }

    #[test]
    fn matches_loop_oracle() {
        let (graph, vocab, model, proj) = five_node();
        let path = DirectedPath { nodes: vec![0, 1, 2] };
        let cfg = EdgeObjectiveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cands = candidates_for_path(&graph, &path, &cfg, &mut rng).unwrap();
        let out = edge_loss_with_candidates(&model, &proj, &vocab, &path, &cands, cfg.temperature).unwrap();

        // Independent reimplementation with explicit loops.
        let ids = vocab.encode_trajectory(&path.nodes).unwrap().token_ids;
        let tr = model.forward(&ids).unwrap();
        let hid = &tr.hidden_by_layer[0];
        let emb = &model.params.tok_emb;
        let matvec = |w: &Array2<f64>, x: ArrayView1<'_, f64>| -> Vec<f64> {
            (0..w.nrows()).map(|r| (0..w.ncols()).map(|c| w[[r, c]] * x[c]).sum()).collect()
        };
        let mut total = 0.0;
        let mut active = 0;
        for (r, &u) in path.nodes.iter().enumerate() {
            let succ = graph.successors(u).unwrap();
            if succ.is_empty() {
                continue;
            }
            active += 1;
            let c = cands[r].as_ref().unwrap();
            let a = matvec(&proj.w_h, hid.row(r));
            let sc: Vec<f64> = c
                .members()
                .iter()
                .map(|&j| {
                    let b = matvec(&proj.w_e, emb.row(vocab.tool_token(j).unwrap()));
                    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    dot / (na * nb) / 0.1
                })
                .collect();
            let denom: f64 = sc.iter().map(|s| s.exp()).sum();
            let mut inner = 0.0;
            for (k, &j) in c.members().iter().enumerate() {
                if succ.contains(&j) {
                    inner += (sc[k].exp() / denom).ln();
                }
            }
            total += -inner / succ.len() as f64;
        }
        let expected = total / active as f64;
        assert!((out.loss - expected).abs() < 1e-9, "{} vs {}", out.loss, expected);
    }

    #[test]
    fn order_of_negatives_does_not_matter() {
        let (graph, vocab, model, proj) = five_node();
        let path = DirectedPath { nodes: vec![3, 0] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cands = candidates_for_path(&graph, &path, &EdgeObjectiveConfig::default(), &mut rng).unwrap();
        let mut flipped = cands.clone();
        for c in flipped.iter_mut().flatten() {
            c.negatives.reverse();
        }
        let a = edge_loss_with_candidates(&model, &proj, &vocab, &path, &cands, 0.1).unwrap();
        let b = edge_loss_with_candidates(&model, &proj, &vocab, &path, &flipped, 0.1).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn positives_never_overlap_negatives(seed in 0u64..1000, anchor in 0usize..5) {
            let (graph, _, _, _) = five_node();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = EdgeObjectiveConfig { neg_ratio: 1, ..Default::default() };
            let c = build_candidate_set(&graph, anchor, &cfg, &mut rng).unwrap();
            for p in &c.positives {
                proptest::prop_assert!(!c.negatives.contains(p));
                proptest::prop_assert!(!c.reverse_negatives.contains(p));
            }
            proptest::prop_assert!(c.negatives.len() <= c.positives.len());
            proptest::prop_assert!(!c.negatives.contains(&anchor));
        }
    }
}
