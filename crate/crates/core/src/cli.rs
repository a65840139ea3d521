//! Command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::datagen::{
    build_lexicon, generate_synthetic_graph, generate_task_corpus, read_corpus, write_corpus,
    CorpusSpec, TaskSample,
};
use crate::error::{Error, Result};
use crate::graph::{PathSamplerConfig, ToolGraph};
use crate::metrics::{evaluate_corpus, predictions_to_jsonl, DEFAULT_K};
use crate::nn::DecodeMode;
use crate::objectives::check::{gradcheck_all, DEFAULT_COORDS, DEFAULT_EPSILON};
use crate::objectives::prompts::TEMPLATE_VERSION;
use crate::pipeline::{find_resume_point, predict_corpus, predict_sample, train_pipeline, TrainConfig};
use crate::vocab::ToolVocabulary;

#[derive(Debug, Parser)]
#[command(name = "toolplan", version, about = "Graph-tokenized tool planning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Greedy,
    Sample,
    GraphMasked,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Random tool graph.
    GenGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 23)]
        tools: usize,
        #[arg(long, default_value_t = 225)]
        edges: usize,
    },
    /// Train/val/test corpora for a graph.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
    },
    /// Four-stage training.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Continue after the last stage checkpoint found in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a corpus and score it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        /// Training output directory (vocab.json, stage4/final.ckpt).
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Greedy)]
        mode: Mode,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 10)]
        max_steps: usize,
    },
    /// Print the tool sequence for one query.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long, value_enum, default_value_t = Mode::Greedy)]
        mode: Mode,
        #[arg(long, default_value_t = 10)]
        max_steps: usize,
    },
    /// Dump sampled graph paths as JSONL.
    SamplePaths {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Comma-separated length probabilities for 1..=R_max.
        #[arg(long)]
        lengths: Option<String>,
    },
    /// Finite-difference check of every loss on the reference model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_COORDS)]
        coords: usize,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Parses `raw` as JSON when possible, else as a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override. Every key on the path must already
/// exist so typos are rejected rather than ignored.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside an object")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = parse_value(raw);
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

/// Defaults, then the config file (merged key by key), then overrides,
/// then `--seed`.
pub fn effective_config<T>(common: &Common, defaults: &T) -> Result<(T, Value)>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut value = serde_json::to_value(defaults).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, file, "")?;
    }
    for o in &common.overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(seed) = common.seed {
        if let Some(obj) = value.as_object_mut() {
            if obj.contains_key("seed") {
                obj.insert("seed".into(), Value::from(seed));
            }
        }
    }
    let cfg: T = serde_json::from_value(value.clone()).map_err(|e| Error::Config(e.to_string()))?;
    let canonical = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    Ok((cfg, canonical))
}

fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &path)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a Value,
    config_hash: String,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    artifact_versions: BTreeMap<&'static str, String>,
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: &Value,
    seed: Option<u64>,
    inputs: &[&Path],
) -> Result<()> {
    let canonical = serde_json::to_vec(config).map_err(|e| Error::Schema(e.to_string()))?;
    let mut hashes = BTreeMap::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), sha256_hex(&std::fs::read(p)?));
    }
    let versions = BTreeMap::from([
        ("toolplan", env!("CARGO_PKG_VERSION").to_string()),
        ("prompt_templates", TEMPLATE_VERSION.to_string()),
        ("corpus_templates", crate::datagen::CorpusTemplates::builtin().version),
        ("checkpoint_format", FORMAT_VERSION.to_string()),
    ]);
    let m = Manifest {
        command,
        config,
        config_hash: sha256_hex(&canonical),
        seed,
        inputs: hashes,
        artifact_versions: versions,
    };
    write_json(&out.join("manifest.json"), &m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::Argument("--out is required".into()))?;
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphGenConfig {
    n_tools: usize,
    n_edges: usize,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedOnly {
    seed: u64,
}

fn load_run(run: &Path, checkpoint: Option<&PathBuf>) -> Result<(ToolVocabulary, Checkpoint, PathBuf)> {
    let vocab = ToolVocabulary::from_json(&std::fs::read_to_string(run.join("vocab.json"))?)?;
    let ck_path = checkpoint
        .cloned()
        .unwrap_or_else(|| run.join("stage4").join("final.ckpt"));
    let ck = Checkpoint::load(&ck_path, &vocab)?;
    Ok((vocab, ck, ck_path))
}

fn decode_mode(mode: Mode, temperature: f64, graph: &ToolGraph) -> DecodeMode<'_> {
    match mode {
        Mode::Greedy => DecodeMode::Greedy,
        Mode::Sample => DecodeMode::Sample { temperature },
        Mode::GraphMasked => DecodeMode::GraphMasked(graph),
    }
}

/// Runs one parsed command and returns its exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenGraph { common, tools, edges } => {
            let defaults = GraphGenConfig { n_tools: tools, n_edges: edges, seed: 0 };
            let (cfg, value) = effective_config(&common, &defaults)?;
            let out = out_dir(&common)?;
            let g = generate_synthetic_graph(cfg.n_tools, cfg.n_edges, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            std::fs::write(out.join("graph.json"), g.to_json())?;
            write_manifest(&out, "gen-graph", &value, Some(cfg.seed), &[])?;
            println!("{} tools, {} edges -> {}", g.num_tools(), g.num_edges(), out.join("graph.json").display());
        }
        Command::GenData { common, graph } => {
            let g = ToolGraph::load(&graph)?;
            let (spec, value) = effective_config(&common, &CorpusSpec::default())?;
            let out = out_dir(&common)?;
            let c = generate_task_corpus(&g, &spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))?;
            for (name, split) in [("train", &c.train), ("val", &c.val), ("test", &c.test)] {
                write_corpus(split, &g, out.join(format!("{name}.jsonl")))?;
            }
            write_manifest(&out, "gen-data", &value, Some(spec.seed), &[&graph])?;
            println!("{} / {} / {} samples -> {}", c.train.len(), c.val.len(), c.test.len(), out.display());
        }
        Command::Train { common, graph, train, val, resume } => {
            let g = ToolGraph::load(&graph)?;
            let (cfg, value) = effective_config(&common, &TrainConfig::default())?;
            cfg.validate()?;
            let out = out_dir(&common)?;
            let train_set = read_corpus(&train, &g)?;
            let val_set: Vec<TaskSample> = match &val {
                Some(p) => read_corpus(p, &g)?,
                None => Vec::new(),
            };
            let vocab = ToolVocabulary::build(&build_lexicon(&g, &train_set), &g)?;
            std::fs::write(out.join("vocab.json"), vocab.to_json())?;
            let point = if resume { find_resume_point(&out, &vocab)? } else { None };
            if let Some(p) = &point {
                log::info!("resuming after stage {}", p.completed_stage);
            }
            write_json(&out.join("config.json"), &value)?;
            let mut inputs: Vec<&Path> = vec![&graph, &train];
            if let Some(v) = &val {
                inputs.push(v);
            }
            write_manifest(&out, "train", &value, Some(cfg.seed), &inputs)?;
            let res = train_pipeline(&g, &vocab, &train_set, &val_set, &cfg, Some(&out), point)?;
            for r in &res.reports {
                println!(
                    "{:<8} epochs {:>3} steps {:>6} loss {}",
                    r.stage,
                    r.epochs,
                    r.steps,
                    r.final_loss.map_or("-".into(), |l| format!("{l:.6}"))
                );
            }
        }
        Command::Eval { common, graph, run, checkpoint, data, mode, temperature, max_steps } => {
            let g = ToolGraph::load(&graph)?;
            let (cfg, value) = effective_config(&common, &SeedOnly { seed: 0 })?;
            let out = out_dir(&common)?;
            let (vocab, ck, ck_path) = load_run(&run, checkpoint.as_ref())?;
            let samples = read_corpus(&data, &g)?;
            let recs = predict_corpus(&ck.model, &vocab, &samples, decode_mode(mode, temperature, &g), max_steps, cfg.seed)?;
            let eval = evaluate_corpus(&g, &recs, &DEFAULT_K)?;
            std::fs::write(out.join("predictions.jsonl"), predictions_to_jsonl(&recs, &g)?)?;
            write_json(&out.join("report.json"), &eval.report)?;
            write_json(&out.join("per_sample.json"), &eval.per_sample)?;
            let table = eval.report.to_table();
            std::fs::write(out.join("report.txt"), &table)?;
            let mut value = value;
            if let Value::Object(o) = &mut value {
                o.insert("mode".into(), serde_json::to_value(mode).expect("mode serializes"));
                o.insert("temperature".into(), Value::from(temperature));
                o.insert("max_steps".into(), Value::from(max_steps));
            }
            write_manifest(&out, "eval", &value, Some(cfg.seed), &[&graph, &data, &ck_path, &run.join("vocab.json")])?;
            print!("{table}");
        }
        Command::Plan { common, graph, run, checkpoint, query, mode, max_steps } => {
            let g = ToolGraph::load(&graph)?;
            let (vocab, ck, _) = load_run(&run, checkpoint.as_ref())?;
            let sample = TaskSample { id: "query".into(), query, subtasks: vec![], trajectory: vec![] };
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
            let rec = predict_sample(&ck.model, &vocab, &sample, decode_mode(mode, 1.0, &g), max_steps, &mut rng)?;
            println!("{}", vocab.render_tools(&rec.pred)?);
        }
        Command::SamplePaths { common, graph, n, lengths } => {
            let g = ToolGraph::load(&graph)?;
            let (cfg, value) = effective_config(&common, &SeedOnly { seed: 0 })?;
            let out = out_dir(&common)?;
            let dist: Vec<f64> = match &lengths {
                Some(s) => s
                    .split(',')
                    .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Argument(format!("--lengths: {e}"))))
                    .collect::<Result<_>>()?,
                None => crate::datagen::DEFAULT_LENGTH_DISTRIBUTION.to_vec(),
            };
            let sampler = PathSamplerConfig::new(dist, cfg.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut text = String::new();
            for _ in 0..n {
                let p = g.sample_path(&sampler, &mut rng)?;
                let names: Vec<&str> = p.nodes.iter().map(|&t| g.tools()[t].name.as_str()).collect();
                text.push_str(&serde_json::to_string(&names).map_err(|e| Error::Schema(e.to_string()))?);
                text.push('\n');
            }
            std::fs::write(out.join("paths.jsonl"), text)?;
            let mut value = value;
            if let Value::Object(o) = &mut value {
                o.insert("n".into(), Value::from(n));
                o.insert("length_distribution".into(), serde_json::json!(sampler.length_distribution));
            }
            write_manifest(&out, "sample-paths", &value, Some(cfg.seed), &[&graph])?;
        }
        Command::Gradcheck { common, coords, epsilon, tolerance } => {
            let seed = common.seed.unwrap_or(0);
            let checks = gradcheck_all(seed, epsilon, coords)?;
            let mut worst: f64 = 0.0;
            for c in &checks {
                println!("{:<8} max rel err {:.3e} over {} coords", c.loss, c.report.max_relative_error, c.report.coords_checked);
                worst = worst.max(c.report.max_relative_error);
            }
            println!("max rel err {worst:.3e}");
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                write_json(&out.join("gradcheck.json"), &checks)?;
                let value = serde_json::json!({ "coords": coords, "epsilon": epsilon, "tolerance": tolerance, "seed": seed });
                write_manifest(out, "gradcheck", &value, Some(seed), &[])?;
            }
            if !(worst < tolerance) {
                return Err(Error::Numeric(format!("gradient check failed: {worst:.3e} >= {tolerance:.1e}")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_replace_known_keys_only() {
        let mut v = json!({"epochs": {"sft": 10}, "lambda": 0.7});
        apply_override(&mut v, "epochs.sft=3").unwrap();
        apply_override(&mut v, "lambda=0").unwrap();
        assert_eq!(v, json!({"epochs": {"sft": 3}, "lambda": 0}));
        assert!(matches!(apply_override(&mut v, "epochs.sf=3"), Err(Error::Config(_))));
        assert!(matches!(apply_override(&mut v, "lambda"), Err(Error::Config(_))));
    }

    #[test]
    fn effective_config_layers_sources() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epochs": {"edge": 0}, "lambda": 0.2}"#).unwrap();
        let common = Common {
            config: Some(path.clone()),
            overrides: vec!["lambda=0.5".into()],
            out: None,
            seed: Some(9),
        };
        let (cfg, _) = effective_config(&common, &TrainConfig::default()).unwrap();
        assert_eq!((cfg.epochs.edge, cfg.epochs.sft, cfg.lambda, cfg.seed), (0, 10, 0.5, 9));
        std::fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        assert!(effective_config(&common, &TrainConfig::default()).is_err());
    }

    #[test]
    fn config_errors_exit_with_two() {
        let cli = Cli::parse_from(["toolplan", "gen-graph", "--out", "/nonexistent-dir-for-test/x", "--set", "nope=1"]);
        assert_eq!(run(cli), 2);
    }
}
