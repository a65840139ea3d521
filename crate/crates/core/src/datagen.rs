//! Synthetic tool graphs and task corpora, plus corpus file I/O.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{draw_categorical, ToolGraph, ToolId};
use crate::objectives::prompts::template_texts;
use crate::vocab::lexicon_from_texts;

pub const CORPUS_TEMPLATES: &str = include_str!("../assets/corpus_templates_v1.json");

/// Length distribution over `1..=8` used when none is configured.
pub const DEFAULT_LENGTH_DISTRIBUTION: [f64; 8] = [0.10, 0.25, 0.22, 0.16, 0.11, 0.08, 0.05, 0.03];

const MAX_PATH_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub id: String,
    pub query: String,
    pub subtasks: Vec<String>,
    pub trajectory: Vec<ToolId>,
}

impl TaskSample {
    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusTemplates {
    pub version: String,
    pub description_words: Vec<String>,
    pub subtask_templates: Vec<String>,
    pub verbatim_first: String,
    pub verbatim_connectives: Vec<String>,
    pub paraphrase_first: String,
    pub paraphrase_connectives: Vec<String>,
    pub separator: String,
    pub closing: String,
}

impl CorpusTemplates {
    pub fn builtin() -> Self {
        serde_json::from_str(CORPUS_TEMPLATES).expect("bundled corpus templates parse")
    }

    /// Every fixed word in the templates.
    pub fn texts(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.description_words.iter().map(String::as_str).collect();
        out.extend(self.subtask_templates.iter().map(String::as_str));
        out.push(&self.verbatim_first);
        out.extend(self.verbatim_connectives.iter().map(String::as_str));
        out.push(&self.paraphrase_first);
        out.extend(self.paraphrase_connectives.iter().map(String::as_str));
        out.push(&self.separator);
        out.push(&self.closing);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryStyle {
    Verbatim,
    Paraphrase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Probability of each trajectory length `1..=len`.
    pub length_distribution: Vec<f64>,
    pub query_style: QueryStyle,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            length_distribution: DEFAULT_LENGTH_DISTRIBUTION.to_vec(),
            query_style: QueryStyle::Verbatim,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let d = &self.length_distribution;
        if d.is_empty() || d.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("length distribution must be non-empty and non-negative".into()));
        }
        if (d.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("length distribution must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplits {
    pub train: Vec<TaskSample>,
    pub val: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

/// Random graph with names `Tool_000..`. A random arborescence over all
/// tools is threaded first so the graph is weakly connected; the remaining
/// edges are drawn uniformly from the unused ordered pairs.
pub fn generate_synthetic_graph<R: Rng + ?Sized>(
    n_tools: usize,
    n_edges: usize,
    rng: &mut R,
) -> Result<ToolGraph> {
    if n_tools == 0 {
        return Err(Error::Argument("n_tools must be at least 1".into()));
    }
    let max_edges = n_tools * (n_tools - 1);
    if n_edges > max_edges {
        return Err(Error::Argument(format!(
            "{n_edges} edges requested but only {max_edges} ordered pairs exist for {n_tools} tools"
        )));
    }
    if n_edges + 1 < n_tools {
        return Err(Error::Argument(format!(
            "{n_edges} edges cannot connect {n_tools} tools"
        )));
    }
    let templates = CorpusTemplates::builtin();
    let tools: Vec<(String, String)> = (0..n_tools)
        .map(|i| {
            let k = rng.gen_range(3..=6);
            let words: Vec<&str> = templates
                .description_words
                .choose_multiple(rng, k)
                .map(String::as_str)
                .collect();
            (format!("Tool_{i:03}"), words.join(" "))
        })
        .collect();

    let mut order: Vec<ToolId> = (0..n_tools).collect();
    order.shuffle(rng);
    let mut edges = BTreeSet::new();
    for i in 1..n_tools {
        let parent = order[rng.gen_range(0..i)];
        edges.insert((parent, order[i]));
    }
    let mut rest: Vec<(ToolId, ToolId)> = (0..n_tools)
        .flat_map(|a| (0..n_tools).map(move |b| (a, b)))
        .filter(|&(a, b)| a != b && !edges.contains(&(a, b)))
        .collect();
    rest.shuffle(rng);
    let need = n_edges - edges.len();
    edges.extend(rest.into_iter().take(need));
    ToolGraph::new(tools, edges)
}

/// A uniformly random simple path (no repeated tool) of exactly `len` nodes.
fn sample_simple_path<R: Rng + ?Sized>(
    graph: &ToolGraph,
    len: usize,
    rng: &mut R,
) -> Result<Vec<ToolId>> {
    for _ in 0..MAX_PATH_ATTEMPTS {
        let mut path = vec![rng.gen_range(0..graph.num_tools())];
        while path.len() < len {
            let last = *path.last().expect("non-empty");
            let open: Vec<ToolId> = graph
                .successors(last)?
                .iter()
                .copied()
                .filter(|s| !path.contains(s))
                .collect();
            let Some(&next) = open.choose(rng) else { break };
            path.push(next);
        }
        if path.len() == len {
            return Ok(path);
        }
    }
    Err(Error::Data(format!(
        "no simple path of length {len} found after {MAX_PATH_ATTEMPTS} attempts"
    )))
}

fn fill(template: &str, slot: &str, value: &str) -> String {
    template.replace(slot, value)
}

fn compose_sample<R: Rng + ?Sized>(
    graph: &ToolGraph,
    templates: &CorpusTemplates,
    style: QueryStyle,
    id: String,
    trajectory: Vec<ToolId>,
    rng: &mut R,
) -> Result<TaskSample> {
    let mut subtasks = Vec::with_capacity(trajectory.len());
    let mut query = String::new();
    for (k, &t) in trajectory.iter().enumerate() {
        let tool = graph.tool(t)?;
        let st = templates.subtask_templates.choose(rng).expect("templates present");
        let subtask = fill(st, "{description}", &tool.description);
        let (first, connectives) = match style {
            QueryStyle::Verbatim => (&templates.verbatim_first, &templates.verbatim_connectives),
            QueryStyle::Paraphrase => {
                (&templates.paraphrase_first, &templates.paraphrase_connectives)
            }
        };
        let body = match style {
            QueryStyle::Verbatim => tool.name.clone(),
            QueryStyle::Paraphrase => tool.description.clone(),
        };
        if k == 0 {
            query.push_str(&fill(
                &fill(first, "{tool}", &body),
                "{description}",
                &body,
            ));
        } else {
            let conn = connectives.choose(rng).expect("connectives present");
            query.push_str(&format!(" {} {} {}", templates.separator, conn, body));
        }
        subtasks.push(subtask);
    }
    query.push(' ');
    query.push_str(&templates.closing);
    Ok(TaskSample {
        id,
        query,
        subtasks,
        trajectory,
    })
}

/// Train/val/test corpora of templated queries over sampled simple paths.
pub fn generate_task_corpus<R: Rng + ?Sized>(
    graph: &ToolGraph,
    spec: &CorpusSpec,
    rng: &mut R,
) -> Result<CorpusSplits> {
    spec.validate()?;
    if graph.num_tools() == 0 {
        return Err(Error::Argument("empty graph".into()));
    }
    let templates = CorpusTemplates::builtin();
    let mut make = |prefix: &str, n: usize| -> Result<Vec<TaskSample>> {
        (0..n)
            .map(|i| {
                let len = draw_categorical(&spec.length_distribution, rng) + 1;
                let path = sample_simple_path(graph, len, rng)?;
                compose_sample(
                    graph,
                    &templates,
                    spec.query_style,
                    format!("{prefix}-{i:05}"),
                    path,
                    rng,
                )
            })
            .collect()
    };
    let train = make("train", spec.n_train)?;
    let val = make("val", spec.n_val)?;
    let test = make("test", spec.n_test)?;
    Ok(CorpusSplits { train, val, test })
}

/// Base lexicon covering prompt templates, corpus templates, the graph's
/// names and descriptions and every given sample, in first-appearance order.
pub fn build_lexicon<'a>(
    graph: &'a ToolGraph,
    samples: impl IntoIterator<Item = &'a TaskSample>,
) -> Vec<String> {
    let templates = CorpusTemplates::builtin();
    let mut texts: Vec<&str> = template_texts().to_vec();
    texts.extend(templates.texts());
    for t in graph.tools() {
        texts.push(&t.name);
        texts.push(&t.description);
    }
    for s in samples {
        texts.push(&s.query);
        texts.extend(s.subtasks.iter().map(String::as_str));
    }
    lexicon_from_texts(texts)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: String,
    query: String,
    subtasks: Vec<String>,
    tool_sequence: Vec<String>,
}

/// One JSON object per line, tool sequences by name.
pub fn corpus_to_jsonl(samples: &[TaskSample], graph: &ToolGraph) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        let rec = CorpusRecord {
            id: s.id.clone(),
            query: s.query.clone(),
            subtasks: s.subtasks.clone(),
            tool_sequence: s
                .trajectory
                .iter()
                .map(|&t| graph.tool(t).map(|t| t.name.clone()))
                .collect::<Result<_>>()?,
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Schema(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn corpus_from_jsonl(reader: impl BufRead, graph: &ToolGraph) -> Result<Vec<TaskSample>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("line {}: {e}", n + 1)))?;
        let trajectory = rec
            .tool_sequence
            .iter()
            .map(|name| {
                graph.tool_id(name).ok_or_else(|| {
                    Error::Data(format!("sample {}: unknown tool {name:?}", rec.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if trajectory.is_empty() {
            return Err(Error::Data(format!("sample {}: empty tool sequence", rec.id)));
        }
        if !rec.subtasks.is_empty() && rec.subtasks.len() != trajectory.len() {
            return Err(Error::Data(format!(
                "sample {}: {} subtasks for {} tools",
                rec.id,
                rec.subtasks.len(),
                trajectory.len()
            )));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Data(format!("duplicate sample id {}", rec.id)));
        }
        out.push(TaskSample {
            id: rec.id,
            query: rec.query,
            subtasks: rec.subtasks,
            trajectory,
        });
    }
    Ok(out)
}

pub fn write_corpus(samples: &[TaskSample], graph: &ToolGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(corpus_to_jsonl(samples, graph)?.as_bytes())?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>, graph: &ToolGraph) -> Result<Vec<TaskSample>> {
    let f = std::fs::File::open(path)?;
    corpus_from_jsonl(std::io::BufReader::new(f), graph)
}

/// Normalized histogram of trajectory lengths; entry `i` is length `i + 1`.
pub fn empirical_length_distribution(samples: &[TaskSample]) -> Result<Vec<f64>> {
    let max = samples
        .iter()
        .map(TaskSample::len)
        .max()
        .ok_or_else(|| Error::Argument("no samples".into()))?;
    if max == 0 {
        return Err(Error::Data("all trajectories are empty".into()));
    }
    let mut hist = vec![0.0; max];
    for s in samples {
        if s.len() > 0 {
            hist[s.len() - 1] += 1.0;
        }
    }
    let total: f64 = hist.iter().sum();
    Ok(hist.into_iter().map(|c| c / total).collect())
}

/// Total-variation distance between two distributions, padding the
/// shorter with zeros.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len().max(q.len());
    (0..n)
        .map(|i| (p.get(i).unwrap_or(&0.0) - q.get(i).unwrap_or(&0.0)).abs())
        .sum::<f64>()
        / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph23() -> ToolGraph {
        generate_synthetic_graph(23, 225, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn synthetic_graph_scale_and_names() {
        let g = graph23();
        assert_eq!((g.num_tools(), g.num_edges()), (23, 225));
        assert_eq!(g.tools()[7].name, "Tool_007");
        for t in g.tools() {
            let n = t.description.split(' ').count();
            assert!((3..=6).contains(&n));
        }
        assert!(g.edges().all(|(a, b)| a != b));
        let back = ToolGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back.to_json(), g.to_json());
    }

    #[test]
    fn two_tools_two_edges_is_complete() {
        let g = generate_synthetic_graph(2, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(g.has_edge(0, 1) && g.has_edge(1, 0));
        assert!(generate_synthetic_graph(2, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn synthetic_graph_is_weakly_connected() {
        let g = generate_synthetic_graph(12, 11, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut seen = vec![false; 12];
        let mut stack = vec![0];
        while let Some(u) = stack.pop() {
            if std::mem::replace(&mut seen[u], true) {
                continue;
            }
            stack.extend(g.successors(u).unwrap());
            stack.extend(g.predecessors(u).unwrap());
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn verbatim_query_names_tools_in_order() {
        let g = graph23();
        let t = CorpusTemplates::builtin();
        let path = sample_simple_path(&g, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s = compose_sample(&g, &t, QueryStyle::Verbatim, "x".into(), path.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a = s.query.find(&g.tool(path[0]).unwrap().name).unwrap();
        let b = s.query.find(&g.tool(path[1]).unwrap().name).unwrap();
        assert!(a < b);
        assert!(s.subtasks[1].contains(&g.tool(path[1]).unwrap().description));
        let p = compose_sample(&g, &t, QueryStyle::Paraphrase, "y".into(), path, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(!p.query.contains("Tool_"));
    }

    #[test]
    fn corpus_is_legal_disjoint_and_deterministic() {
        let g = graph23();
        let spec = CorpusSpec { n_train: 200, n_val: 50, n_test: 50, ..Default::default() };
        let a = generate_task_corpus(&g, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate_task_corpus(&g, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let mut ids = HashSet::new();
        for s in a.train.iter().chain(&a.val).chain(&a.test) {
            assert!(g.validate_trajectory(&s.trajectory).unwrap());
            assert_eq!(s.subtasks.len(), s.trajectory.len());
            assert!(ids.insert(s.id.clone()));
        }
    }

    #[test]
    fn corpus_length_histogram_tracks_spec() {
        let g = graph23();
        let spec = CorpusSpec { n_train: 2000, n_val: 0, n_test: 0, ..Default::default() };
        let c = generate_task_corpus(&g, &spec, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let emp = empirical_length_distribution(&c.train).unwrap();
        assert!(total_variation(&emp, &spec.length_distribution) < 0.05);
    }

    #[test]
    fn empirical_distribution_of_small_sample() {
        let mk = |n: usize| TaskSample {
            id: n.to_string(),
            query: String::new(),
            subtasks: vec![],
            trajectory: vec![0; n],
        };
        let d = empirical_length_distribution(&[mk(2), mk(2), mk(4)]).unwrap();
        assert_eq!(d.len(), 4);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-12 && (d[3] - 1.0 / 3.0).abs() < 1e-12);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(empirical_length_distribution(&[]).is_err());
    }

    #[test]
    fn jsonl_schema_errors() {
        let g = ToolGraph::new(vec![("A".into(), "a".into())], std::iter::empty()).unwrap();
        let missing = r#"{"id":"1","query":"q","tool_sequence":["A"]}"#;
        assert!(matches!(corpus_from_jsonl(missing.as_bytes(), &g), Err(Error::Schema(_))));
        let unknown = r#"{"id":"7","query":"q","subtasks":["s"],"tool_sequence":["Z"]}"#;
        match corpus_from_jsonl(unknown.as_bytes(), &g) {
            Err(Error::Data(m)) => assert!(m.contains('7')),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn four_step_record_parses() {
        let g = ToolGraph::new(
            ["Video-to-Audio", "Voice-Changer", "Audio-to-Image", "Image-Colorizer"]
                .iter()
                .map(|n| (n.to_string(), format!("{n} tool")))
                .collect(),
            [(0, 1), (1, 2), (2, 3)],
        )
        .unwrap();
        let line = r#"{"id":"25717055","query":"I have a video file named 'example.mp4' ...","subtasks":["Extract the audio track from the input video.","Modify the extracted audio's characteristics according to the user's instruction.","Generate a visual representation of the modified audio track.","Add color to the visual representation using deep learning techniques."],"tool_sequence":["Video-to-Audio","Voice-Changer","Audio-to-Image","Image-Colorizer"]}"#;
        let s = corpus_from_jsonl(line.as_bytes(), &g).unwrap();
        assert_eq!(s[0].len(), 4);
        assert_eq!(s[0].trajectory, vec![0, 1, 2, 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn jsonl_round_trip(seed in 0u64..1000) {
            let g = graph23();
            let spec = CorpusSpec { n_train: 125, n_val: 0, n_test: 0, query_style: QueryStyle::Paraphrase, seed, ..Default::default() };
            let c = generate_task_corpus(&g, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let text = corpus_to_jsonl(&c.train, &g).unwrap();
            let back = corpus_from_jsonl(text.as_bytes(), &g).unwrap();
            prop_assert_eq!(back, c.train);
        }
    }
}
