//! Directed tool-dependency graph.
//!
//! A [`ToolGraph`] holds the tool pool and the set of directed edges
//! `(src, dst)`, where `dst` may legally run right after `src`. Edge
//! membership is exact: `(a, b)` never implies `(b, a)`.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ToolId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub id: ToolId,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolGraph {
    tools: Vec<ToolSpec>,
    edges: BTreeSet<(ToolId, ToolId)>,
    successors: Vec<Vec<ToolId>>,
    predecessors: Vec<Vec<ToolId>>,
    by_name: HashMap<String, ToolId>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    tools: Vec<ToolRecord>,
    edges: Vec<(String, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToolRecord {
    name: String,
    description: String,
}

impl ToolGraph {
    /// Builds a graph from `(name, description)` pairs and edges given by id.
    pub fn new(
        tools: Vec<(String, String)>,
        edges: impl IntoIterator<Item = (ToolId, ToolId)>,
    ) -> Result<Self> {
        let mut by_name = HashMap::with_capacity(tools.len());
        let mut specs = Vec::with_capacity(tools.len());
        for (id, (name, description)) in tools.into_iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Validation(format!("tools[{id}]: empty name")));
            }
            if description.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "tools[{id}] ({name}): empty description"
                )));
            }
            if by_name.insert(name.clone(), id).is_some() {
                return Err(Error::Validation(format!(
                    "tools[{id}]: duplicate tool name {name:?}"
                )));
            }
            specs.push(ToolSpec {
                id,
                name,
                description,
            });
        }
        let m = specs.len();
        let mut edge_set = BTreeSet::new();
        for (i, (src, dst)) in edges.into_iter().enumerate() {
            if src >= m || dst >= m {
                return Err(Error::Validation(format!(
                    "edges[{i}]: endpoint ({src}, {dst}) outside 0..{m}"
                )));
            }
            edge_set.insert((src, dst));
        }
        let mut successors = vec![Vec::new(); m];
        let mut predecessors = vec![Vec::new(); m];
        for &(s, d) in &edge_set {
            successors[s].push(d);
            predecessors[d].push(s);
        }
        for p in &mut predecessors {
            p.sort_unstable();
        }
        Ok(Self {
            tools: specs,
            edges: edge_set,
            successors,
            predecessors,
            by_name,
        })
    }

    /// Parses the JSON graph file. Ids follow the order of the `tools` list.
    pub fn from_json(source: &str) -> Result<Self> {
        let file: GraphFile =
            serde_json::from_str(source).map_err(|e| Error::Parse(format!("graph file: {e}")))?;
        let mut index = HashMap::new();
        for (i, t) in file.tools.iter().enumerate() {
            index.entry(t.name.as_str()).or_insert(i);
        }
        let mut edges = Vec::with_capacity(file.edges.len());
        for (i, (src, dst)) in file.edges.iter().enumerate() {
            let lookup = |n: &str| {
                index.get(n).copied().ok_or_else(|| {
                    Error::Validation(format!("edges[{i}]: unknown tool {n:?}"))
                })
            };
            edges.push((lookup(src)?, lookup(dst)?));
        }
        let tools = file
            .tools
            .into_iter()
            .map(|t| (t.name, t.description))
            .collect();
        Self::new(tools, edges)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Canonical JSON form; edges are written in ascending id order.
    pub fn to_json(&self) -> String {
        let file = GraphFile {
            tools: self
                .tools
                .iter()
                .map(|t| ToolRecord {
                    name: t.name.clone(),
                    description: t.description.clone(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|&(s, d)| (self.tools[s].name.clone(), self.tools[d].name.clone()))
                .collect(),
        };
        let mut out = serde_json::to_string_pretty(&file).expect("graph serializes");
        out.push('\n');
        out
    }

    pub fn num_tools(&self) -> usize {
        self.tools.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn tools(&self) -> &[ToolSpec] {
        &self.tools
    }

    pub fn tool(&self, id: ToolId) -> Result<&ToolSpec> {
        self.tools.get(id).ok_or(Error::Range {
            id,
            size: self.tools.len(),
        })
    }

    pub fn tool_id(&self, name: &str) -> Option<ToolId> {
        self.by_name.get(name).copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (ToolId, ToolId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, src: ToolId, dst: ToolId) -> bool {
        self.edges.contains(&(src, dst))
    }

    /// Outgoing neighbours of `tool`, ascending.
    pub fn successors(&self, tool: ToolId) -> Result<&[ToolId]> {
        self.check(tool)?;
        Ok(&self.successors[tool])
    }

    /// Incoming neighbours of `tool`, ascending.
    pub fn predecessors(&self, tool: ToolId) -> Result<&[ToolId]> {
        self.check(tool)?;
        Ok(&self.predecessors[tool])
    }

    fn check(&self, tool: ToolId) -> Result<()> {
        if tool < self.tools.len() {
            Ok(())
        } else {
            Err(Error::Range {
                id: tool,
                size: self.tools.len(),
            })
        }
    }

    /// True iff every consecutive pair of `seq` is an edge.
    pub fn validate_trajectory(&self, seq: &[ToolId]) -> Result<bool> {
        if seq.is_empty() {
            return Err(Error::Argument("empty trajectory".into()));
        }
        for &t in seq {
            self.check(t)?;
        }
        Ok(seq.windows(2).all(|w| self.has_edge(w[0], w[1])))
    }

    /// Samples a directed walk. The target length comes from the
    /// configured distribution; a walk that hits a sink early is returned
    /// truncated.
    pub fn sample_path<R: Rng + ?Sized>(
        &self,
        config: &PathSamplerConfig,
        rng: &mut R,
    ) -> Result<DirectedPath> {
        if self.tools.is_empty() {
            return Err(Error::Argument("cannot sample from an empty graph".into()));
        }
        let target = config.draw_length(rng);
        let mut nodes = Vec::with_capacity(target);
        let mut current = rng.gen_range(0..self.tools.len());
        nodes.push(current);
        while nodes.len() < target {
            let next = &self.successors[current];
            if next.is_empty() {
                break;
            }
            current = next[rng.gen_range(0..next.len())];
            nodes.push(current);
        }
        Ok(DirectedPath { nodes })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectedPath {
    pub nodes: Vec<ToolId>,
}

impl DirectedPath {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSamplerConfig {
    pub r_max: usize,
    /// Probability of each length `1..=r_max`.
    pub length_distribution: Vec<f64>,
    pub seed: u64,
}

impl PathSamplerConfig {
    pub fn new(length_distribution: Vec<f64>, seed: u64) -> Result<Self> {
        let cfg = Self {
            r_max: length_distribution.len(),
            length_distribution,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn uniform(r_max: usize, seed: u64) -> Result<Self> {
        if r_max == 0 {
            return Err(Error::Argument("r_max must be at least 1".into()));
        }
        Self::new(vec![1.0 / r_max as f64; r_max], seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_max == 0 {
            return Err(Error::Argument("r_max must be at least 1".into()));
        }
        if self.length_distribution.len() != self.r_max {
            return Err(Error::Argument(format!(
                "length distribution has {} entries, expected r_max = {}",
                self.length_distribution.len(),
                self.r_max
            )));
        }
        if self
            .length_distribution
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0)
        {
            return Err(Error::Argument("length probabilities must be finite and >= 0".into()));
        }
        let total: f64 = self.length_distribution.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "length distribution sums to {total}, expected 1"
            )));
        }
        Ok(())
    }

    pub(crate) fn draw_length<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        draw_categorical(&self.length_distribution, rng) + 1
    }
}

/// Inverse-CDF draw of an index from unnormalized non-negative weights.
pub(crate) fn draw_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}
