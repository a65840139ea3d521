//! Small causal transformer with an explicit reverse pass.
//!
//! Pre-norm blocks (causal multi-head self-attention, then a GELU MLP),
//! sinusoidal positions, a final layer norm and an untied output head.
//! `forward` records every intermediate needed by `backward`, which maps
//! upstream gradients on logits and on per-layer hidden states back to
//! every parameter.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::{BlockParams, GradientSet, LayerNormParams, ParamSet, Params};
use crate::error::{Error, Result};
use crate::graph::ToolGraph;
use crate::vocab::{TokenId, ToolVocabulary};

const LN_EPS: f64 = 1e-5;
const FF_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_layers < 2 {
            return Err(Error::Config("num_layers must be at least 2".into()));
        }
        if self.max_context == 0 || self.vocab_size == 0 {
            return Err(Error::Config("vocab_size and max_context must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn ff_dim(&self) -> usize {
        FF_MULT * self.hidden_dim
    }

    /// Index into `hidden_by_layer` of the penultimate block output.
    pub fn penultimate_layer(&self) -> usize {
        self.num_layers - 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub config: ModelConfig,
    pub params: Params,
    positions: Array2<f64>,
}

pub type ModelGradients = GradientSet<Params>;

/// Upstream gradients entering the reverse pass.
#[derive(Debug, Clone)]
pub struct OutputSeed {
    /// Same rows as `ForwardTrace::logits`.
    pub d_logits: Option<Array2<f64>>,
    /// Per layer, `T x hidden` gradient on that block's output.
    pub d_hidden: Vec<Option<Array2<f64>>>,
}

impl OutputSeed {
    pub fn new(num_layers: usize) -> Self {
        Self {
            d_logits: None,
            d_hidden: vec![None; num_layers],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// First position for which logits are computed.
    pub logits_from: usize,
    /// Keep intermediates for `backward`.
    pub record: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            logits_from: 0,
            record: true,
        }
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    act: Array2<f64>,
}

#[derive(Debug, Clone)]
struct Tape {
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    normed: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input_ids: Vec<TokenId>,
    pub logits_from: usize,
    /// Rows `logits_from..len`, one per position.
    pub logits: Array2<f64>,
    /// Output of every block after its residual sum.
    pub hidden_by_layer: Vec<Array2<f64>>,
    tape: Option<Tape>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Logit row at absolute position `pos`.
    pub fn logits_at(&self, pos: usize) -> ndarray::ArrayView1<'_, f64> {
        self.logits.row(pos - self.logits_from)
    }
}

fn sinusoidal(max_len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((max_len, dim));
    for pos in 0..max_len {
        for i in (0..dim).step_by(2) {
            let freq = 1.0 / 10000f64.powf(i as f64 / dim as f64);
            let angle = pos as f64 * freq;
            pe[[pos, i]] = angle.sin();
            if i + 1 < dim {
                pe[[pos, i + 1]] = angle.cos();
            }
        }
    }
    pe
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn layer_norm(x: &Array2<f64>, p: &LayerNormParams) -> (Array2<f64>, LnCache) {
    let dim = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / dim;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let i = *inv;
        row.mapv_inplace(|v| (v - mean) * i);
    }
    let out = &xhat * &p.gain + &p.bias;
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dout: &Array2<f64>,
    cache: &LnCache,
    p: &LayerNormParams,
    grad: &mut LayerNormParams,
) -> Array2<f64> {
    grad.gain += &(dout * &cache.xhat).sum_axis(Axis(0));
    grad.bias += &dout.sum_axis(Axis(0));
    let dim = dout.ncols() as f64;
    let mut dx = dout * &p.gain;
    for ((mut row, xhat), &inv) in dx
        .outer_iter_mut()
        .zip(cache.xhat.outer_iter())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / dim;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / dim;
        for (d, &xh) in row.iter_mut().zip(xhat.iter()) {
            *d = inv * (*d - mean_d - xh * mean_dx);
        }
    }
    dx
}

fn causal_softmax(scores: &mut Array2<f64>) {
    for (i, mut row) in scores.outer_iter_mut().enumerate() {
        let max = row
            .slice(s![..=i])
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / total);
    }
}

impl PolicyModel {
    /// Seeded initialization. Tool-token rows start at the mean embedding
    /// of the known words in the tool's description.
    pub fn init(config: ModelConfig, graph: &ToolGraph, vocab: &ToolVocabulary) -> Result<Self> {
        config.validate()?;
        if vocab.total_size() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocab_size {} does not match vocabulary size {}",
                config.vocab_size,
                vocab.total_size()
            )));
        }
        if graph.num_tools() != vocab.num_tools() {
            return Err(Error::Config("graph and vocabulary tool counts differ".into()));
        }
        let d = config.hidden_dim;
        let ff = config.ff_dim();
        let v = config.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let residual_scale = inv_sqrt_d / (2.0 * config.num_layers as f64).sqrt();

        let mut tok_emb = normal_matrix(&mut rng, v, d, inv_sqrt_d);
        let blocks = (0..config.num_layers)
            .map(|_| BlockParams {
                ln1: LayerNormParams::new(d),
                wq: normal_matrix(&mut rng, d, d, inv_sqrt_d),
                wk: normal_matrix(&mut rng, d, d, inv_sqrt_d),
                wv: normal_matrix(&mut rng, d, d, inv_sqrt_d),
                wo: normal_matrix(&mut rng, d, d, residual_scale),
                ln2: LayerNormParams::new(d),
                w1: normal_matrix(&mut rng, ff, d, inv_sqrt_d),
                b1: Array1::zeros(ff),
                w2: normal_matrix(&mut rng, d, ff, 1.0 / (ff as f64).sqrt() / (2.0 * config.num_layers as f64).sqrt()),
                b2: Array1::zeros(d),
            })
            .collect();
        let head_w = normal_matrix(&mut rng, v, d, inv_sqrt_d);

        for tool in graph.tools() {
            let words: Vec<TokenId> = vocab
                .encode_text(&tool.description)
                .into_iter()
                .filter(|&id| id < vocab.num_base())
                .collect();
            if words.is_empty() {
                continue;
            }
            let mut mean = Array1::<f64>::zeros(d);
            for &w in &words {
                mean += &tok_emb.row(w);
            }
            mean /= words.len() as f64;
            let row = vocab.tool_token(tool.id)?;
            tok_emb.row_mut(row).assign(&mean);
        }

        let params = Params {
            tok_emb,
            blocks,
            ln_f: LayerNormParams::new(d),
            head_w,
            head_b: Array1::zeros(v),
        };
        Ok(Self::from_params(config, params))
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Self {
        let positions = sinusoidal(config.max_context, config.hidden_dim);
        Self {
            config,
            params,
            positions,
        }
    }

    /// All-zero parameters with the shapes implied by `config`.
    pub fn init_zeroed(config: ModelConfig) -> Self {
        let d = config.hidden_dim;
        let ff = config.ff_dim();
        let v = config.vocab_size;
        let blocks = (0..config.num_layers)
            .map(|_| BlockParams {
                ln1: LayerNormParams::new(d),
                wq: Array2::zeros((d, d)),
                wk: Array2::zeros((d, d)),
                wv: Array2::zeros((d, d)),
                wo: Array2::zeros((d, d)),
                ln2: LayerNormParams::new(d),
                w1: Array2::zeros((ff, d)),
                b1: Array1::zeros(ff),
                w2: Array2::zeros((d, ff)),
                b2: Array1::zeros(d),
            })
            .collect();
        let params = Params {
            tok_emb: Array2::zeros((v, d)),
            blocks,
            ln_f: LayerNormParams::new(d),
            head_w: Array2::zeros((v, d)),
            head_b: Array1::zeros(v),
        };
        Self::from_params(config, params)
    }

    pub fn forward(&self, ids: &[TokenId]) -> Result<ForwardTrace> {
        self.forward_with(ids, ForwardOptions::default())
    }

    pub fn forward_with(&self, ids: &[TokenId], opts: ForwardOptions) -> Result<ForwardTrace> {
        let t = ids.len();
        if t > self.config.max_context {
            return Err(Error::Context {
                len: t,
                max: self.config.max_context,
            });
        }
        if t == 0 {
            return Err(Error::Argument("empty input sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Range {
                id: bad,
                size: self.config.vocab_size,
            });
        }
        let logits_from = opts.logits_from.min(t - 1);
        let d = self.config.hidden_dim;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Array2::zeros((t, d));
        for (pos, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(pos);
            row.assign(&self.params.tok_emb.row(id));
            row += &self.positions.row(pos);
        }

        let mut hidden_by_layer = Vec::with_capacity(self.config.num_layers);
        let mut caches = Vec::new();
        for block in &self.params.blocks {
            let (h1, ln1) = layer_norm(&x, &block.ln1);
            let q = h1.dot(&block.wq.t());
            let k = h1.dot(&block.wk.t());
            let v = h1.dot(&block.wv.t());
            let mut o = Array2::zeros((t, d));
            let mut probs = Vec::with_capacity(self.config.num_heads);
            for h in 0..self.config.num_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut p = q.slice(cols).dot(&k.slice(cols).t());
                p *= scale;
                causal_softmax(&mut p);
                o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
                if opts.record {
                    probs.push(p);
                }
            }
            let a = &x + &o.dot(&block.wo.t());
            let (h2, ln2) = layer_norm(&a, &block.ln2);
            let u = h2.dot(&block.w1.t()) + &block.b1;
            let act = u.mapv(gelu);
            let y = &a + &(act.dot(&block.w2.t()) + &block.b2);
            if opts.record {
                caches.push(BlockCache {
                    ln1,
                    h1,
                    q,
                    k,
                    v,
                    probs,
                    o,
                    ln2,
                    h2,
                    u,
                    act,
                });
            }
            hidden_by_layer.push(y.clone());
            x = y;
        }

        let (normed, ln_f) = layer_norm(&x, &self.params.ln_f);
        let logits =
            normed.slice(s![logits_from.., ..]).dot(&self.params.head_w.t()) + &self.params.head_b;
        let tape = opts.record.then(|| Tape {
            blocks: caches,
            ln_f,
            normed,
        });
        Ok(ForwardTrace {
            input_ids: ids.to_vec(),
            logits_from,
            logits,
            hidden_by_layer,
            tape,
        })
    }

    /// Logits for the last position only.
    pub fn next_logits(&self, ids: &[TokenId]) -> Result<Array1<f64>> {
        let trace = self.forward_with(
            ids,
            ForwardOptions {
                logits_from: ids.len().saturating_sub(1),
                record: false,
            },
        )?;
        Ok(trace.logits.row(0).to_owned())
    }

    /// Reverse pass: gradient of a scalar loss whose partial derivatives
    /// with respect to the trace outputs are given by `seed`.
    pub fn backward(&self, trace: &ForwardTrace, seed: &OutputSeed) -> Result<Params> {
        let tape = trace
            .tape
            .as_ref()
            .ok_or_else(|| Error::Argument("trace was recorded without a tape".into()))?;
        let t = trace.len();
        let d = self.config.hidden_dim;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = self.params.zeros_like();

        let mut dx = Array2::<f64>::zeros((t, d));
        if let Some(dl) = &seed.d_logits {
            if dl.nrows() != trace.logits.nrows() || dl.ncols() != self.config.vocab_size {
                return Err(Error::Argument("logit seed shape mismatch".into()));
            }
            let rows = s![trace.logits_from.., ..];
            grads.head_w += &dl.t().dot(&tape.normed.slice(rows));
            grads.head_b += &dl.sum_axis(Axis(0));
            let dnormed_tail = dl.dot(&self.params.head_w);
            let mut dnormed = Array2::zeros((t, d));
            dnormed.slice_mut(rows).assign(&dnormed_tail);
            dx = layer_norm_backward(&dnormed, &tape.ln_f, &self.params.ln_f, &mut grads.ln_f);
        }

        for li in (0..self.config.num_layers).rev() {
            if let Some(extra) = seed.d_hidden.get(li).and_then(Option::as_ref) {
                dx += extra;
            }
            let block = &self.params.blocks[li];
            let cache = &tape.blocks[li];
            let g = &mut grads.blocks[li];

            // MLP branch: y = a + act(h2 W1^T + b1) W2^T + b2
            let dm = &dx;
            g.w2 += &dm.t().dot(&cache.act);
            g.b2 += &dm.sum_axis(Axis(0));
            let mut du = dm.dot(&block.w2);
            du.zip_mut_with(&cache.u, |d, &u| *d *= gelu_grad(u));
            g.w1 += &du.t().dot(&cache.h2);
            g.b1 += &du.sum_axis(Axis(0));
            let dh2 = du.dot(&block.w1);
            let da = &dx + &layer_norm_backward(&dh2, &cache.ln2, &block.ln2, &mut g.ln2);

            // Attention branch: a = x + O Wo^T
            g.wo += &da.t().dot(&cache.o);
            let d_o = da.dot(&block.wo);
            let mut dq = Array2::zeros((t, d));
            let mut dk = Array2::zeros((t, d));
            let mut dv = Array2::zeros((t, d));
            for h in 0..self.config.num_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let p = &cache.probs[h];
                let do_h = d_o.slice(cols);
                let v_h = cache.v.slice(cols);
                dv.slice_mut(cols).assign(&p.t().dot(&do_h));
                let dp = do_h.dot(&v_h.t());
                let ds = softmax_backward(p, &dp.view()) * scale;
                dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
            }
            g.wq += &dq.t().dot(&cache.h1);
            g.wk += &dk.t().dot(&cache.h1);
            g.wv += &dv.t().dot(&cache.h1);
            let dh1 = dq.dot(&block.wq) + dk.dot(&block.wk) + dv.dot(&block.wv);
            dx = &da + &layer_norm_backward(&dh1, &cache.ln1, &block.ln1, &mut g.ln1);
        }

        for (pos, &id) in trace.input_ids.iter().enumerate() {
            let mut row = grads.tok_emb.row_mut(id);
            row += &dx.row(pos);
        }
        Ok(grads)
    }
}

fn softmax_backward(p: &Array2<f64>, dp: &ArrayView2<'_, f64>) -> Array2<f64> {
    let mut ds = p * dp;
    for (mut row, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
        let dot = row.sum();
        row.zip_mut_with(&prow, |v, &pv| *v -= pv * dot);
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::lexicon_from_texts;

    pub(crate) fn tiny() -> (ToolGraph, ToolVocabulary, PolicyModel) {
        let graph = ToolGraph::new(
            vec![
                ("A".into(), "alpha tool".into()),
                ("B".into(), "beta".into()),
                ("C".into(), "beta".into()),
            ],
            [(0, 1), (1, 2)],
        )
        .unwrap();
        let lex = lexicon_from_texts(["alpha beta gamma delta tool ."]);
        let vocab = ToolVocabulary::build(&lex, &graph).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.total_size(),
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_context: 16,
            seed: 7,
        };
        let model = PolicyModel::init(cfg, &graph, &vocab).unwrap();
        (graph, vocab, model)
    }

    #[test]
    fn tool_rows_follow_descriptions() {
        let (_, vocab, model) = tiny();
        let e = &model.params.tok_emb;
        let beta = vocab.word_id("beta").unwrap();
        let b = vocab.tool_token(1).unwrap();
        let c = vocab.tool_token(2).unwrap();
        assert_eq!(e.row(b), e.row(beta));
        assert_eq!(e.row(b), e.row(c));
        let a = vocab.tool_token(0).unwrap();
        let mean = (&e.row(vocab.word_id("alpha").unwrap()) + &e.row(vocab.word_id("tool").unwrap())) / 2.0;
        assert_eq!(e.row(a), mean);
    }

    #[test]
    fn init_is_deterministic_and_checks_size() {
        let (graph, vocab, model) = tiny();
        let again = PolicyModel::init(model.config.clone(), &graph, &vocab).unwrap();
        assert_eq!(model.params, again.params);
        let mut bad = model.config.clone();
        bad.vocab_size += 1;
        assert!(matches!(PolicyModel::init(bad, &graph, &vocab), Err(Error::Config(_))));
        let mut bad = model.config.clone();
        bad.num_layers = 1;
        assert!(PolicyModel::init(bad, &graph, &vocab).is_err());
    }

    #[test]
    fn causal_prefix_stability() {
        let (_, _, model) = tiny();
        let long = [0, 3, 1, 5, 2, 7, 4];
        let full = model.forward(&long).unwrap();
        for cut in 1..long.len() {
            let pre = model.forward(&long[..cut]).unwrap();
            for pos in 0..cut {
                for (a, b) in pre.logits.row(pos).iter().zip(full.logits.row(pos)) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn shapes_and_normalization() {
        let (_, _, model) = tiny();
        let tr = model.forward(&[1, 2, 3]).unwrap();
        assert_eq!(tr.logits.dim(), (3, model.config.vocab_size));
        assert_eq!(tr.hidden_by_layer.len(), 2);
        for row in tr.logits.outer_iter() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn context_limit() {
        let (_, _, model) = tiny();
        let ids = vec![0; 17];
        assert!(matches!(model.forward(&ids), Err(Error::Context { .. })));
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let (_, _, model) = tiny();
        let tr = model.forward(&[0, 1, 2]).unwrap();
        let mut seed = OutputSeed::new(2);
        seed.d_logits = Some(Array2::zeros(tr.logits.dim()));
        let g = model.backward(&tr, &seed).unwrap();
        assert!(g.tensors().iter().all(|t| t.data.iter().all(|&x| x == 0.0)));
    }
}
