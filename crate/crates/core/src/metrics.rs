//! Planning metrics: EM, ELR, ACPL, Tool F1, NED, PA@K and hallucination
//! ratio, per sample and aggregated over a corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ToolGraph, ToolId};

pub const DEFAULT_K: [usize; 2] = [1, 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub pred: Vec<ToolId>,
    pub gold: Vec<ToolId>,
    pub hallucinated: usize,
    pub generated: usize,
}

pub fn exact_match(pred: &[ToolId], gold: &[ToolId]) -> f64 {
    if pred == gold {
        1.0
    } else {
        0.0
    }
}

/// Fraction of adjacent pairs that are edges; 1 for length 0 or 1.
pub fn edge_legality_rate(graph: &ToolGraph, pred: &[ToolId]) -> f64 {
    if pred.len() <= 1 {
        return 1.0;
    }
    let legal = pred.windows(2).filter(|w| graph.has_edge(w[0], w[1])).count();
    legal as f64 / (pred.len() - 1) as f64
}

/// Length of the longest common prefix.
pub fn acpl(pred: &[ToolId], gold: &[ToolId]) -> usize {
    pred.iter().zip(gold).take_while(|(a, b)| a == b).count()
}

pub fn tool_f1(pred: &[ToolId], gold: &[ToolId]) -> f64 {
    let p: BTreeSet<_> = pred.iter().collect();
    let g: BTreeSet<_> = gold.iter().collect();
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let hit = p.intersection(&g).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let precision = hit / p.len() as f64;
    let recall = hit / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn levenshtein(a: &[ToolId], b: &[ToolId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance over `max(len)`; 1 for an empty prediction.
pub fn ned(pred: &[ToolId], gold: &[ToolId]) -> f64 {
    let n = pred.len().max(gold.len());
    if pred.is_empty() || n == 0 {
        return if n == 0 { 0.0 } else { 1.0 };
    }
    levenshtein(pred, gold) as f64 / n as f64
}

/// Over records with gold length ≥ k, the fraction whose first k tools are
/// correct. `None` when no record is long enough.
pub fn prefix_accuracy_at_k(records: &[PredictionRecord], k: usize) -> Option<f64> {
    let admissible: Vec<_> = records.iter().filter(|r| r.gold.len() >= k).collect();
    if admissible.is_empty() || k == 0 {
        return None;
    }
    let hits = admissible.iter().filter(|r| acpl(&r.pred, &r.gold) >= k).count();
    Some(hits as f64 / admissible.len() as f64)
}

pub fn hallucination_ratio(records: &[PredictionRecord]) -> f64 {
    let h: usize = records.iter().map(|r| r.hallucinated).sum();
    let g: usize = records.iter().map(|r| r.generated).sum();
    if g == 0 {
        0.0
    } else {
        h as f64 / g as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub em: f64,
    pub elr: f64,
    pub acpl: usize,
    pub tool_f1: f64,
    pub ned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub em: f64,
    pub elr: f64,
    pub acpl: f64,
    pub tool_f1: f64,
    pub ned: f64,
    /// Keyed by K; absent K had no admissible samples.
    pub pa_at_k: BTreeMap<usize, f64>,
    pub hallucination_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_sample: Vec<SampleMetrics>,
}

pub fn sample_metrics(graph: &ToolGraph, r: &PredictionRecord) -> SampleMetrics {
    SampleMetrics {
        sample_id: r.sample_id.clone(),
        em: exact_match(&r.pred, &r.gold),
        elr: edge_legality_rate(graph, &r.pred),
        acpl: acpl(&r.pred, &r.gold),
        tool_f1: tool_f1(&r.pred, &r.gold),
        ned: ned(&r.pred, &r.gold),
    }
}

/// Aggregates are reduced in sample-id order so any permutation of
/// `records` gives identical bits.
pub fn evaluate_corpus(
    graph: &ToolGraph,
    records: &[PredictionRecord],
    k_list: &[usize],
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Argument("no prediction records".into()));
    }
    if let Some(r) = records.iter().find(|r| r.gold.is_empty()) {
        return Err(Error::Data(format!("sample {}: empty gold trajectory", r.sample_id)));
    }
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let per: Vec<SampleMetrics> = sorted.iter().map(|r| sample_metrics(graph, r)).collect();
    let n = per.len() as f64;
    let mean = |f: &dyn Fn(&SampleMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
    let owned: Vec<PredictionRecord> = sorted.iter().map(|r| (*r).clone()).collect();
    let pa_at_k = k_list
        .iter()
        .filter_map(|&k| prefix_accuracy_at_k(&owned, k).map(|v| (k, v)))
        .collect();
    let report = MetricsReport {
        n_samples: per.len(),
        em: mean(&|m| m.em),
        elr: mean(&|m| m.elr),
        acpl: mean(&|m| m.acpl as f64),
        tool_f1: mean(&|m| m.tool_f1),
        ned: mean(&|m| m.ned),
        pa_at_k,
        hallucination_ratio: hallucination_ratio(&owned),
    };
    // Per-sample rows keep the caller's order.
    let per_sample = records.iter().map(|r| sample_metrics(graph, r)).collect();
    Ok(Evaluation { report, per_sample })
}

impl MetricsReport {
    /// Aligned two-column plain-text table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("n_samples".into(), self.n_samples.to_string()),
            ("EM".into(), format!("{:.4}", self.em)),
            ("ELR".into(), format!("{:.4}", self.elr)),
            ("ACPL".into(), format!("{:.4}", self.acpl)),
            ("Tool F1".into(), format!("{:.4}", self.tool_f1)),
            ("NED".into(), format!("{:.4}", self.ned)),
        ];
        for (k, v) in &self.pa_at_k {
            rows.push((format!("PA@{k}"), format!("{v:.4}")));
        }
        rows.push(("Halluc.".into(), format!("{:.4}", self.hallucination_ratio)));
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v:>10}");
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    id: String,
    pred: Vec<String>,
    gold: Vec<String>,
    halluc: usize,
    gen: usize,
}

pub fn predictions_to_jsonl(records: &[PredictionRecord], graph: &ToolGraph) -> Result<String> {
    let names = |ids: &[ToolId]| -> Result<Vec<String>> {
        ids.iter().map(|&t| graph.tool(t).map(|s| s.name.clone())).collect()
    };
    let mut out = String::new();
    for r in records {
        let line = PredictionLine {
            id: r.sample_id.clone(),
            pred: names(&r.pred)?,
            gold: names(&r.gold)?,
            halluc: r.hallucinated,
            gen: r.generated,
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Schema(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn predictions_from_jsonl(text: &str, graph: &ToolGraph) -> Result<Vec<PredictionRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: PredictionLine =
                serde_json::from_str(l).map_err(|e| Error::Schema(e.to_string()))?;
            let ids = |names: &[String]| -> Result<Vec<ToolId>> {
                names
                    .iter()
                    .map(|n| {
                        graph.tool_id(n).ok_or_else(|| {
                            Error::Data(format!("sample {}: unknown tool {n:?}", line.id))
                        })
                    })
                    .collect()
            };
            Ok(PredictionRecord {
                pred: ids(&line.pred)?,
                gold: ids(&line.gold)?,
                sample_id: line.id,
                hallucinated: line.halluc,
                generated: line.gen,
            })
        })
        .collect()
}
