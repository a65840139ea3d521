//! Python bindings: graphs, path sampling, metrics, planning from a
//! trained run directory, and the gradient check.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use toolplan::checkpoint::Checkpoint;
use toolplan::datagen::{generate_synthetic_graph, TaskSample};
use toolplan::metrics;
use toolplan::nn::DecodeMode;
use toolplan::objectives::check::gradcheck_all;
use toolplan::pipeline::predict_sample;
use toolplan::{Error, PathSamplerConfig, ToolId, ToolVocabulary};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Parse(_) | Error::Validation(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pyclass(name = "ToolGraph", module = "toolplan_py")]
pub struct PyToolGraph {
    inner: toolplan::ToolGraph,
}

#[pymethods]
impl PyToolGraph {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        toolplan::ToolGraph::from_json(text)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        toolplan::ToolGraph::load(path)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (n_tools, n_edges, seed=0))]
    fn generate(n_tools: usize, n_edges: usize, seed: u64) -> PyResult<Self> {
        generate_synthetic_graph(n_tools, n_edges, &mut ChaCha8Rng::seed_from_u64(seed))
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn num_tools(&self) -> usize {
        self.inner.num_tools()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    fn tool_names(&self) -> Vec<String> {
        self.inner.tools().iter().map(|t| t.name.clone()).collect()
    }

    fn has_edge(&self, src: ToolId, dst: ToolId) -> bool {
        self.inner.has_edge(src, dst)
    }

    fn successors(&self, tool: ToolId) -> PyResult<Vec<ToolId>> {
        self.inner.successors(tool).map(<[_]>::to_vec).map_err(py_err)
    }

    fn validate_trajectory(&self, seq: Vec<ToolId>) -> PyResult<bool> {
        self.inner.validate_trajectory(&seq).map_err(py_err)
    }

    /// `n` paths with lengths drawn from `lengths` (probabilities of
    /// 1..=len).
    #[pyo3(signature = (n, lengths, seed=0))]
    fn sample_paths(&self, n: usize, lengths: Vec<f64>, seed: u64) -> PyResult<Vec<Vec<ToolId>>> {
        let cfg = PathSamplerConfig::new(lengths, seed).map_err(py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| self.inner.sample_path(&cfg, &mut rng).map(|p| p.nodes))
            .collect::<Result<_, _>>()
            .map_err(py_err)
    }

    fn edge_legality_rate(&self, pred: Vec<ToolId>) -> f64 {
        metrics::edge_legality_rate(&self.inner, &pred)
    }
}

/// A trained model loaded from a run directory.
#[pyclass(name = "Planner", module = "toolplan_py")]
pub struct PyPlanner {
    graph: toolplan::ToolGraph,
    vocab: ToolVocabulary,
    checkpoint: Checkpoint,
}

#[pymethods]
impl PyPlanner {
    #[new]
    #[pyo3(signature = (graph, run_dir, checkpoint=None))]
    fn new(graph: &PyToolGraph, run_dir: PathBuf, checkpoint: Option<PathBuf>) -> PyResult<Self> {
        let text = std::fs::read_to_string(run_dir.join("vocab.json"))
            .map_err(|e| py_err(Error::Io(e)))?;
        let vocab = ToolVocabulary::from_json(&text).map_err(py_err)?;
        let path = checkpoint.unwrap_or_else(|| run_dir.join("stage4").join("final.ckpt"));
        let checkpoint = Checkpoint::load(path, &vocab).map_err(py_err)?;
        Ok(Self {
            graph: graph.inner.clone(),
            vocab,
            checkpoint,
        })
    }

    /// Tool names for `query`; `mode` is "greedy" or "graph-masked".
    #[pyo3(signature = (query, mode="greedy", max_steps=10))]
    fn plan(&self, query: String, mode: &str, max_steps: usize) -> PyResult<Vec<String>> {
        let mode = match mode {
            "greedy" => DecodeMode::Greedy,
            "graph-masked" => DecodeMode::GraphMasked(&self.graph),
            other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
        };
        let sample = TaskSample {
            id: "query".into(),
            query,
            subtasks: vec![],
            trajectory: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = predict_sample(&self.checkpoint.model, &self.vocab, &sample, mode, max_steps, &mut rng)
            .map_err(py_err)?;
        Ok(rec
            .pred
            .iter()
            .map(|&t| self.graph.tools()[t].name.clone())
            .collect())
    }
}

#[pyfunction]
fn exact_match(pred: Vec<ToolId>, gold: Vec<ToolId>) -> f64 {
    metrics::exact_match(&pred, &gold)
}

#[pyfunction]
fn acpl(pred: Vec<ToolId>, gold: Vec<ToolId>) -> usize {
    metrics::acpl(&pred, &gold)
}

#[pyfunction]
fn tool_f1(pred: Vec<ToolId>, gold: Vec<ToolId>) -> f64 {
    metrics::tool_f1(&pred, &gold)
}

#[pyfunction]
fn ned(pred: Vec<ToolId>, gold: Vec<ToolId>) -> f64 {
    metrics::ned(&pred, &gold)
}

/// `{loss name: max relative error}` on the reference model.
#[pyfunction]
#[pyo3(signature = (seed=0, epsilon=1e-5, coords=40))]
fn gradcheck(seed: u64, epsilon: f64, coords: usize) -> PyResult<Vec<(String, f64)>> {
    let checks = gradcheck_all(seed, epsilon, coords).map_err(py_err)?;
    Ok(checks
        .into_iter()
        .map(|c| (c.loss, c.report.max_relative_error))
        .collect())
}

#[pymodule]
fn toolplan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyToolGraph>()?;
    m.add_class::<PyPlanner>()?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(acpl, m)?)?;
    m.add_function(wrap_pyfunction!(tool_f1, m)?)?;
    m.add_function(wrap_pyfunction!(ned, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
