//! Four-stage training: subtask grounding, edge reconstruction,
//! query-to-tool SFT, then SFT plus on-policy distillation against a
//! frozen copy of the SFT model.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerSnapshot};
use crate::datagen::{empirical_length_distribution, TaskSample};
use crate::error::{Error, Result};
use crate::graph::{DirectedPath, PathSamplerConfig, ToolGraph};
use crate::metrics::{evaluate_corpus, MetricsReport, PredictionRecord, DEFAULT_K};
use crate::nn::{generate, AdamState, DecodeMode, ModelConfig, ModelGradients, ParamSet, PolicyModel};
use crate::objectives::{
    edge_reconstruction_loss, opd_loss, sft_loss, subtask_grounding_loss, build_student_prompt,
    EdgeObjectiveConfig, EdgeProjections, SubtaskPair,
};
use crate::vocab::ToolVocabulary;

pub const STAGE_NAMES: [&str; 4] = ["subtask", "edge", "sft", "distill"];

macro_rules! per_stage {
    ($name:ident, $ty:ty, $a:expr, $b:expr, $c:expr, $d:expr) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name {
            pub subtask: $ty,
            pub edge: $ty,
            pub sft: $ty,
            pub distill: $ty,
        }

        impl Default for $name {
            fn default() -> Self {
                Self {
                    subtask: $a,
                    edge: $b,
                    sft: $c,
                    distill: $d,
                }
            }
        }

        impl $name {
            pub fn get(&self, stage: usize) -> $ty {
                [self.subtask, self.edge, self.sft, self.distill][stage]
            }
        }
    };
}

per_stage!(StageEpochs, usize, 2, 2, 10, 2);
per_stage!(StageBatchSizes, usize, 32, 16, 16, 16);
per_stage!(StageLearningRates, f64, 3e-4, 3e-4, 3e-4, 1e-4);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_context: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 4,
            max_context: 384,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub temperature: f64,
    pub rollouts_per_sample: usize,
    /// Defaults to the longest training trajectory plus 2.
    pub max_steps: Option<usize>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            rollouts_per_sample: 1,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelSettings,
    pub epochs: StageEpochs,
    pub batch_size: StageBatchSizes,
    pub learning_rate: StageLearningRates,
    pub lambda: f64,
    /// Paths sampled per edge-stage epoch.
    pub path_corpus_size: usize,
    /// Defaults to the empirical training length distribution.
    pub path_length_distribution: Option<Vec<f64>>,
    pub edge: EdgeObjectiveConfig,
    pub rollout: RolloutConfig,
    /// Validation every N epochs within a stage; 0 evaluates only at
    /// stage ends.
    pub eval_every: usize,
    /// Validation samples used per evaluation; 0 disables evaluation.
    pub eval_samples: usize,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSettings::default(),
            epochs: StageEpochs::default(),
            batch_size: StageBatchSizes::default(),
            learning_rate: StageLearningRates::default(),
            lambda: 0.7,
            path_corpus_size: 2000,
            path_length_distribution: None,
            edge: EdgeObjectiveConfig::default(),
            rollout: RolloutConfig::default(),
            eval_every: 0,
            eval_samples: 100,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for s in 0..4 {
            if self.batch_size.get(s) == 0 {
                return Err(Error::Config(format!("{} batch size must be >= 1", STAGE_NAMES[s])));
            }
            let lr = self.learning_rate.get(s);
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{} learning rate invalid", STAGE_NAMES[s])));
            }
        }
        if !(self.rollout.temperature > 0.0) || self.rollout.rollouts_per_sample == 0 {
            return Err(Error::Config("rollout temperature must be > 0 and count >= 1".into()));
        }
        self.edge.validate()
    }

    pub fn model_config(&self, vocab: &ToolVocabulary) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.total_size(),
            hidden_dim: self.model.hidden_dim,
            num_layers: self.model.num_layers,
            num_heads: self.model.num_heads,
            max_context: self.model.max_context,
            seed: derive_seed(self.seed, 0, 0, 0),
        }
    }
}

/// Mixes a global seed with stage, epoch and stream indices.
pub fn derive_seed(seed: u64, stage: u64, epoch: u64, stream: u64) -> u64 {
    let mut x = seed;
    for v in [stage, epoch, stream] {
        x = splitmix(x ^ splitmix(v.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_SAMPLING: u64 = 2;
const STREAM_PATHS: u64 = 3;
const STREAM_EVAL: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub epochs: usize,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub final_loss: Option<f64>,
    pub checkpoint: Option<String>,
    pub eval: Vec<EvalSnapshot>,
    /// Kept out of serialized reports so they stay byte-reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: PolicyModel,
    /// The frozen stage-4 teacher as it stood when the stage finished.
    pub teacher: Option<PolicyModel>,
    pub reports: Vec<StageReport>,
}

/// Where a resumed run picks up: the checkpoint of the last finished stage
/// (1-based).
#[derive(Debug, Clone)]
pub struct ResumePoint {
    pub completed_stage: usize,
    pub checkpoint: Checkpoint,
}

/// Flattens every `(subtask, tool token)` pair of the corpus.
pub fn build_subtask_pairs(
    corpus: &[TaskSample],
    vocab: &ToolVocabulary,
) -> Result<Vec<SubtaskPair>> {
    let mut out = Vec::new();
    for s in corpus {
        if s.subtasks.len() != s.trajectory.len() {
            return Err(Error::Data(format!(
                "sample {}: {} subtasks for {} tools",
                s.id,
                s.subtasks.len(),
                s.trajectory.len()
            )));
        }
        for (text, &tool) in s.subtasks.iter().zip(&s.trajectory) {
            out.push(SubtaskPair {
                subtask: text.clone(),
                tool_token: vocab.tool_token(tool)?,
            });
        }
    }
    Ok(out)
}

/// Greedy (or masked / sampled) decoding of one sample into a record.
pub fn predict_sample(
    model: &PolicyModel,
    vocab: &ToolVocabulary,
    sample: &TaskSample,
    mode: DecodeMode<'_>,
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PredictionRecord> {
    let prompt = build_student_prompt(vocab, sample);
    let out = generate(model, &prompt, vocab, mode, max_steps, rng)?;
    let d = vocab.decode_tokens(&out);
    Ok(PredictionRecord {
        sample_id: sample.id.clone(),
        pred: d.tools,
        gold: sample.trajectory.clone(),
        hallucinated: d.hallucinated,
        generated: d.generated,
    })
}

pub fn predict_corpus(
    model: &PolicyModel,
    vocab: &ToolVocabulary,
    samples: &[TaskSample],
    mode: DecodeMode<'_>,
    max_steps: usize,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, i as u64, STREAM_EVAL));
            predict_sample(model, vocab, s, mode, max_steps, &mut rng)
        })
        .collect()
}

struct Ctx<'a> {
    graph: &'a ToolGraph,
    vocab: &'a ToolVocabulary,
    train: &'a [TaskSample],
    val: &'a [TaskSample],
    config: &'a TrainConfig,
    out_dir: Option<&'a Path>,
    max_steps: usize,
}

impl Ctx<'_> {
    fn check(&self, stage: usize, step: usize, g: &ModelGradients) -> Result<()> {
        if !g.loss.is_finite() || g.loss > self.config.divergence_threshold || !g.grads.all_finite()
        {
            return Err(Error::Numeric(format!(
                "stage {} ({}) diverged at step {}: loss {}",
                stage + 1,
                STAGE_NAMES[stage],
                step,
                g.loss
            )));
        }
        Ok(())
    }

    fn evaluate(&self, model: &PolicyModel) -> Result<Option<MetricsReport>> {
        let n = self.config.eval_samples.min(self.val.len());
        if n == 0 {
            return Ok(None);
        }
        let recs = predict_corpus(
            model,
            self.vocab,
            &self.val[..n],
            DecodeMode::Greedy,
            self.max_steps,
            self.config.seed,
        )?;
        Ok(Some(evaluate_corpus(self.graph, &recs, &DEFAULT_K)?.report))
    }

    fn maybe_eval(&self, model: &PolicyModel, epoch: usize, epochs: usize, report: &mut StageReport) -> Result<()> {
        let every = self.config.eval_every;
        let due = epoch + 1 == epochs || (every > 0 && (epoch + 1) % every == 0);
        if due {
            if let Some(r) = self.evaluate(model)? {
                log::info!("{} epoch {}: val EM {:.4}", report.stage, epoch + 1, r.em);
                report.eval.push(EvalSnapshot { epoch: epoch + 1, report: r });
            }
        }
        Ok(())
    }

    fn save(
        &self,
        stage: usize,
        model: &PolicyModel,
        projections: Option<&EdgeProjections>,
        optimizer: Option<OptimizerSnapshot>,
        report: &mut StageReport,
    ) -> Result<()> {
        let Some(dir) = self.out_dir else { return Ok(()) };
        let rel = PathBuf::from(format!("stage{}", stage + 1)).join("final.ckpt");
        let mut ck = Checkpoint::new(model.clone(), self.vocab);
        ck.projections = projections.cloned();
        ck.optimizer = optimizer;
        ck.meta.insert("stage".into(), STAGE_NAMES[stage].into());
        ck.meta.insert("steps".into(), report.steps.to_string());
        ck.save(dir.join(&rel))?;
        report.checkpoint = Some(rel.to_string_lossy().replace('\\', "/"));
        Ok(())
    }
}

fn batches<T>(items: &[T], size: usize) -> impl Iterator<Item = &[T]> {
    items.chunks(size)
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn new_report(stage: usize, epochs: usize) -> StageReport {
    StageReport {
        stage: STAGE_NAMES[stage].into(),
        epochs,
        steps: 0,
        epoch_losses: Vec::new(),
        final_loss: None,
        checkpoint: None,
        eval: Vec::new(),
        wall_time_s: 0.0,
    }
}

fn stage_subtask(ctx: &Ctx<'_>, model: &mut PolicyModel) -> Result<StageReport> {
    const S: usize = 0;
    let cfg = ctx.config;
    let epochs = cfg.epochs.get(S);
    let mut report = new_report(S, epochs);
    let pairs = build_subtask_pairs(ctx.train, ctx.vocab)?;
    let mut adam = AdamState::new(&model.params);
    for epoch in 0..epochs {
        let order = shuffled_indices(pairs.len(), derive_seed(cfg.seed, 1, epoch as u64, STREAM_SHUFFLE));
        let mut total = 0.0;
        let mut count = 0;
        for chunk in batches(&order, cfg.batch_size.get(S)) {
            let batch: Vec<SubtaskPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let out = subtask_grounding_loss(model, ctx.vocab, &batch)?;
            ctx.check(S, report.steps, &out.gradients)?;
            adam.step(&mut model.params, &out.gradients.grads, cfg.learning_rate.get(S))?;
            report.steps += 1;
            total += out.gradients.loss;
            count += 1;
        }
        report.epoch_losses.push(if count > 0 { total / count as f64 } else { 0.0 });
        ctx.maybe_eval(model, epoch, epochs, &mut report)?;
    }
    report.final_loss = report.epoch_losses.last().copied();
    ctx.save(S, model, None, Some(OptimizerSnapshot::capture(&adam)), &mut report)?;
    Ok(report)
}

fn path_sampler(ctx: &Ctx<'_>, epoch: usize) -> Result<PathSamplerConfig> {
    let dist = match &ctx.config.path_length_distribution {
        Some(d) => d.clone(),
        None => empirical_length_distribution(ctx.train)?,
    };
    PathSamplerConfig::new(dist, derive_seed(ctx.config.seed, 2, epoch as u64, STREAM_PATHS))
}

fn stage_edge(
    ctx: &Ctx<'_>,
    model: &mut PolicyModel,
    projections: &mut EdgeProjections,
) -> Result<StageReport> {
    const S: usize = 1;
    let cfg = ctx.config;
    let epochs = cfg.epochs.get(S);
    let mut report = new_report(S, epochs);
    let mut joint = (model.params.clone(), projections.clone());
    let mut adam = AdamState::new(&joint);
    for epoch in 0..epochs {
        let sampler = path_sampler(ctx, epoch)?;
        let mut path_rng = ChaCha8Rng::seed_from_u64(sampler.seed);
        let paths: Vec<DirectedPath> = (0..cfg.path_corpus_size)
            .map(|_| ctx.graph.sample_path(&sampler, &mut path_rng))
            .collect::<Result<_>>()?;
        let mut neg_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed ^ cfg.edge.seed,
            2,
            epoch as u64,
            STREAM_SAMPLING,
        ));
        let mut total = 0.0;
        let mut count = 0;
        for chunk in batches(&paths, cfg.batch_size.get(S)) {
            let current = PolicyModel::from_params(model.config.clone(), joint.0.clone());
            let mut grads = joint.zeros_like();
            let mut loss = 0.0;
            let mut active = 0usize;
            for path in chunk {
                let out = edge_reconstruction_loss(
                    &current,
                    &joint.1,
                    ctx.graph,
                    ctx.vocab,
                    path,
                    &cfg.edge,
                    &mut neg_rng,
                )?;
                if out.active_positions == 0 {
                    continue;
                }
                active += 1;
                loss += out.loss;
                grads.0.add_scaled(1.0, &out.model_grads);
                grads.1.add_scaled(1.0, &out.proj_grads);
            }
            if active == 0 {
                continue;
            }
            let inv = 1.0 / active as f64;
            grads.scale(inv);
            loss *= inv;
            let probe = ModelGradients { grads: grads.0.clone(), loss };
            ctx.check(S, report.steps, &probe)?;
            if !grads.1.all_finite() {
                return Err(Error::Numeric(format!("edge projections diverged at step {}", report.steps)));
            }
            adam.step(&mut joint, &grads, cfg.learning_rate.get(S))?;
            report.steps += 1;
            total += loss;
            count += 1;
        }
        model.params = joint.0.clone();
        report.epoch_losses.push(if count > 0 { total / count as f64 } else { 0.0 });
        ctx.maybe_eval(model, epoch, epochs, &mut report)?;
    }
    model.params = joint.0;
    *projections = joint.1;
    report.final_loss = report.epoch_losses.last().copied();
    ctx.save(S, model, Some(projections), Some(OptimizerSnapshot::capture(&adam)), &mut report)?;
    Ok(report)
}

/// Stages 3 and 4 share this loop. With a teacher each sample's loss is
/// `L_sft + λ L_opd`; rollouts draw from their own stream so the shuffle
/// order is the same with or without distillation.
fn stage_sequence(
    ctx: &Ctx<'_>,
    stage: usize,
    model: &mut PolicyModel,
    teacher: Option<&PolicyModel>,
) -> Result<StageReport> {
    let cfg = ctx.config;
    let epochs = cfg.epochs.get(stage);
    let mut report = new_report(stage, epochs);
    let mut adam = AdamState::new(&model.params);
    let lambda = cfg.lambda;
    for epoch in 0..epochs {
        let seed_stage = stage as u64 + 1;
        let order = shuffled_indices(ctx.train.len(), derive_seed(cfg.seed, seed_stage, epoch as u64, STREAM_SHUFFLE));
        let mut rollout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, seed_stage, epoch as u64, STREAM_SAMPLING));
        let mut total = 0.0;
        let mut count = 0;
        for chunk in batches(&order, cfg.batch_size.get(stage)) {
            let mut g = ModelGradients::zeros(&model.params);
            for &i in chunk {
                let sample = &ctx.train[i];
                let s = sft_loss(model, ctx.vocab, sample)?;
                g.accumulate(1.0, &s);
                if let Some(t) = teacher {
                    let n = cfg.rollout.rollouts_per_sample;
                    for _ in 0..n {
                        let o = opd_loss(
                            model,
                            t,
                            ctx.vocab,
                            sample,
                            cfg.rollout.temperature,
                            ctx.max_steps,
                            &mut rollout_rng,
                        )?;
                        g.accumulate(lambda / n as f64, &o.gradients);
                    }
                }
            }
            g.scale(1.0 / chunk.len() as f64);
            ctx.check(stage, report.steps, &g)?;
            adam.step(&mut model.params, &g.grads, cfg.learning_rate.get(stage))?;
            report.steps += 1;
            total += g.loss;
            count += 1;
        }
        report.epoch_losses.push(if count > 0 { total / count as f64 } else { 0.0 });
        ctx.maybe_eval(model, epoch, epochs, &mut report)?;
    }
    report.final_loss = report.epoch_losses.last().copied();
    ctx.save(stage, model, None, Some(OptimizerSnapshot::capture(&adam)), &mut report)?;
    Ok(report)
}

/// SFT-only continuation with stage-4 seeds and settings; with `λ = 0`
/// stage 4 must reproduce it bit for bit.
pub fn sft_continuation(
    graph: &ToolGraph,
    vocab: &ToolVocabulary,
    train: &[TaskSample],
    config: &TrainConfig,
    model: &mut PolicyModel,
) -> Result<StageReport> {
    let ctx = Ctx {
        graph,
        vocab,
        train,
        val: &[],
        config,
        out_dir: None,
        max_steps: max_steps(train, config),
    };
    stage_sequence(&ctx, 3, model, None)
}

fn max_steps(train: &[TaskSample], config: &TrainConfig) -> usize {
    config.rollout.max_steps.unwrap_or_else(|| {
        let longest = train.iter().map(TaskSample::len).max().unwrap_or(0);
        let dist = config.path_length_distribution.as_ref().map_or(0, Vec::len);
        longest.max(dist) + 2
    })
}

/// Runs every stage after `resume.completed_stage` (all four when `None`).
/// With an `out_dir`, checkpoints land in `stage{n}/final.ckpt` and the
/// stage reports in `stage_reports.jsonl`.
pub fn train_pipeline(
    graph: &ToolGraph,
    vocab: &ToolVocabulary,
    train: &[TaskSample],
    val: &[TaskSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<ResumePoint>,
) -> Result<PipelineOutput> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    if vocab.num_tools() != graph.num_tools() {
        return Err(Error::Config("vocabulary was not built from this graph".into()));
    }
    let ctx = Ctx {
        graph,
        vocab,
        train,
        val,
        config,
        out_dir,
        max_steps: max_steps(train, config),
    };
    let (start, mut model, mut projections) = match resume {
        Some(r) => {
            if r.checkpoint.vocab_hash != vocab.hash() {
                return Err(Error::Checkpoint("resume checkpoint vocabulary mismatch".into()));
            }
            let proj = r.checkpoint.projections.clone();
            (r.completed_stage, r.checkpoint.model, proj)
        }
        None => (0, PolicyModel::init(config.model_config(vocab), graph, vocab)?, None),
    };
    if start > 4 {
        return Err(Error::Argument(format!("no stage after {start}")));
    }
    let mut reports = Vec::new();
    let mut frozen = None;
    for stage in start..4 {
        let t0 = Instant::now();
        log::info!("stage {} ({})", stage + 1, STAGE_NAMES[stage]);
        let mut report = match stage {
            0 => stage_subtask(&ctx, &mut model)?,
            1 => {
                let mut p = projections.take().unwrap_or_else(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed ^ config.edge.seed, 2, 0, 0));
                    EdgeProjections::init(model.config.hidden_dim, config.edge.projection_dim, &mut rng)
                });
                let r = stage_edge(&ctx, &mut model, &mut p)?;
                projections = Some(p);
                r
            }
            2 => stage_sequence(&ctx, 2, &mut model, None)?,
            _ => {
                let teacher = model.clone();
                let r = stage_sequence(&ctx, 3, &mut model, Some(&teacher))?;
                frozen = Some(teacher);
                r
            }
        };
        report.wall_time_s = t0.elapsed().as_secs_f64();
        reports.push(report);
    }
    if let Some(dir) = out_dir {
        write_reports(dir, &reports)?;
    }
    Ok(PipelineOutput { model, teacher: frozen, reports })
}

fn write_reports(dir: &Path, reports: &[StageReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut lines = String::new();
    let mut timings = serde_json::Map::new();
    for r in reports {
        lines.push_str(&serde_json::to_string(r).map_err(|e| Error::Schema(e.to_string()))?);
        lines.push('\n');
        timings.insert(r.stage.clone(), serde_json::json!(r.wall_time_s));
    }
    std::fs::write(dir.join("stage_reports.jsonl"), lines)?;
    let mut t = serde_json::to_string_pretty(&timings).map_err(|e| Error::Schema(e.to_string()))?;
    t.push('\n');
    std::fs::write(dir.join("timings.json"), t)?;
    Ok(())
}

/// Latest `stage{n}/final.ckpt` under `dir`, if any.
pub fn find_resume_point(dir: &Path, vocab: &ToolVocabulary) -> Result<Option<ResumePoint>> {
    for stage in (1..=4).rev() {
        let p = dir.join(format!("stage{stage}")).join("final.ckpt");
        if p.exists() {
            return Ok(Some(ResumePoint {
                completed_stage: stage,
                checkpoint: Checkpoint::load(&p, vocab)?,
            }));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_lexicon, generate_synthetic_graph, generate_task_corpus, CorpusSpec};

    fn tiny() -> (ToolGraph, ToolVocabulary, Vec<TaskSample>, TrainConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let graph = generate_synthetic_graph(5, 10, &mut rng).unwrap();
        let spec = CorpusSpec {
            n_train: 6,
            n_val: 2,
            n_test: 0,
            length_distribution: vec![0.5, 0.5],
            ..Default::default()
        };
        let c = generate_task_corpus(&graph, &spec, &mut rng).unwrap();
        let vocab = ToolVocabulary::build(&build_lexicon(&graph, &c.train), &graph).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.model = ModelSettings { hidden_dim: 8, num_layers: 2, num_heads: 2, max_context: 256 };
        cfg.epochs = StageEpochs { subtask: 1, edge: 1, sft: 1, distill: 1 };
        cfg.batch_size = StageBatchSizes { subtask: 4, edge: 4, sft: 4, distill: 4 };
        cfg.path_corpus_size = 6;
        cfg.eval_samples = 0;
        (graph, vocab, c.train, cfg)
    }

    #[test]
    fn subtask_pairs_flatten_corpus() {
        let (_, vocab, train, _) = tiny();
        let pairs = build_subtask_pairs(&train, &vocab).unwrap();
        assert_eq!(pairs.len(), train.iter().map(TaskSample::len).sum::<usize>());
        assert!(build_subtask_pairs(&[], &vocab).unwrap().is_empty());
        let mut bad = train[0].clone();
        bad.subtasks.push("extra".into());
        match build_subtask_pairs(&[bad], &vocab) {
            Err(Error::Data(m)) => assert!(m.contains(&train[0].id)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn step_counts_follow_batches() {
        let (graph, vocab, train, cfg) = tiny();
        let out = train_pipeline(&graph, &vocab, &train, &[], &cfg, None, None).unwrap();
        let pairs = build_subtask_pairs(&train, &vocab).unwrap().len();
        assert_eq!(out.reports[0].steps, pairs.div_ceil(4));
        assert_eq!(out.reports[2].steps, 2);
        assert_eq!(out.reports[3].steps, 2);
        assert!(out.reports.iter().all(|r| r.final_loss.map_or(true, f64::is_finite)));
    }

    #[test]
    fn zero_epochs_skip_a_stage() {
        let (graph, vocab, train, mut cfg) = tiny();
        cfg.epochs.distill = 0;
        let a = train_pipeline(&graph, &vocab, &train, &[], &cfg, None, None).unwrap();
        cfg.epochs.distill = 1;
        cfg.learning_rate.distill = 0.0;
        let b = train_pipeline(&graph, &vocab, &train, &[], &cfg, None, None).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.reports[3].steps, 0);
    }

    #[test]
    fn divergence_is_reported_with_stage() {
        let (graph, vocab, train, mut cfg) = tiny();
        cfg.divergence_threshold = 1e-9;
        match train_pipeline(&graph, &vocab, &train, &[], &cfg, None, None) {
            Err(Error::Numeric(m)) => assert!(m.contains("stage 1") && m.contains("step 0")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(matches!(TrainConfig::from_json(r#"{"lamda": 1}"#), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_json(r#"{"lambda": -1}"#), Err(Error::Config(_))));
        let c = TrainConfig::from_json(r#"{"epochs": {"edge": 0}}"#).unwrap();
        assert_eq!((c.epochs.edge, c.epochs.sft), (0, 10));
    }

    #[test]
    fn derived_seeds_differ_per_component() {
        let a = derive_seed(1, 2, 3, 4);
        assert_eq!(a, derive_seed(1, 2, 3, 4));
        assert_ne!(a, derive_seed(1, 2, 3, 5));
        assert_ne!(a, derive_seed(1, 3, 2, 4));
    }
}
