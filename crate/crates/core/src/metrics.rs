//! Retrieval metrics: NDCG@5, Recall@1, Recall@5.
//!
//! Metrics are computed per run and aggregated two ways: by rephrasing level
//! (one cell per level, the table most results are read from) and by
//! evidence type (text / table / visual, NDCG@5 only). All values live in
//! [0, 1] internally and are rendered ×100 with one decimal, the table-cell
//! convention used throughout retrieval papers.
//!
//! NDCG uses binary gains with the standard 1/log2(rank+1) discount, and
//! the ideal DCG places min(|relevant|, k) positives at the top. For the
//! finalized single-positive benchmark this collapses to a lookup of the
//! positive's rank: NDCG@5 ∈ {0} ∪ {1/log2(r+1) : r ∈ 1..=5}.
//!
//! A query with an empty relevant set makes every metric undefined, so it
//! aborts the report instead of being skipped — silent skips would inflate
//! the means.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::labeling::{EvidenceType, Qrels};
use crate::rephrase::QueryRecord;
use crate::retrievers::RetrievalRun;

/// Cutoff for the primary ranking metric.
pub const NDCG_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("metric cutoff k must be ≥ 1")]
    ZeroK,

    #[error("relevant set is empty; the metric is undefined")]
    EmptyRelevant,

    #[error("query `{query_id}` has no qrels positives; finalized benchmarks guarantee exactly one")]
    NoPositives { query_id: String },

    #[error("run queries missing from qrels: {}", orphans.join(", "))]
    OrphanQueries { orphans: Vec<String> },

    #[error("run holds no queries; nothing to evaluate")]
    EmptyRun,

    #[error("cannot merge reports for different retrievers: `{left}` vs `{right}`")]
    RetrieverMismatch { left: String, right: String },

    #[error("duplicate level {level} when merging reports")]
    DuplicateLevel { level: u8 },
}

/// Discounted cumulative gain of `ranked` against binary relevance,
/// normalized by the ideal ranking's gain.
///
/// Gain is 1 for a relevant page, 0 otherwise; the discount at 1-based rank
/// r is 1/log2(r+1). The ideal DCG places min(|relevant|, k) positives at
/// ranks 1..; a ranking whose top-k holds no positives scores 0.
pub fn ndcg_at_k<S: AsRef<str>>(
    ranked: &[S],
    relevant: &std::collections::BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if relevant.is_empty() {
        return Err(MetricsError::EmptyRelevant);
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, page)| relevant.contains(page.as_ref()))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..relevant.len().min(k))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    Ok(dcg / idcg)
}

/// Share of the relevant set found in the top k: |top-k ∩ relevant| / |relevant|.
pub fn recall_at_k<S: AsRef<str>>(
    ranked: &[S],
    relevant: &std::collections::BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if relevant.is_empty() {
        return Err(MetricsError::EmptyRelevant);
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|page| relevant.contains(page.as_ref()))
        .count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// One table cell: the three metrics averaged over a query slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub ndcg5: f64,
    pub recall1: f64,
    pub recall5: f64,
}

/// Metrics for one retriever, sliced by rephrasing level and evidence type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub retriever_name: String,
    /// Rephrasing level → averaged metrics.
    pub per_level: BTreeMap<u8, MetricCell>,
    /// Evidence type → averaged NDCG@5, over the queries carrying that label.
    pub per_evidence: BTreeMap<EvidenceType, f64>,
    /// Queries evaluated per cell, keyed `level_{n}` / `evidence_{name}`.
    pub counts: BTreeMap<String, usize>,
}

fn level_key(level: u8) -> String {
    format!("level_{level}")
}

fn evidence_key(evidence: EvidenceType) -> String {
    format!("evidence_{}", evidence.name())
}

/// Evaluates one run against the qrels.
///
/// `queries` supplies evidence labels for the per-evidence slice; run
/// queries without a label simply don't contribute to it. Every run query
/// must be present in the qrels (orphans are an error), and every one must
/// have at least one positive. Means are accumulated in query-id order, so
/// the report is a pure, permutation-invariant function of its inputs.
pub fn evaluate(
    run: &RetrievalRun,
    qrels: &Qrels,
    queries: &[QueryRecord],
) -> Result<MetricReport, MetricsError> {
    if run.results.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let orphans: Vec<String> = run
        .results
        .keys()
        .filter(|query_id| qrels.positives(query_id).is_none())
        .cloned()
        .collect();
    if !orphans.is_empty() {
        return Err(MetricsError::OrphanQueries { orphans });
    }

    let evidence_of: BTreeMap<&str, EvidenceType> = queries
        .iter()
        .filter_map(|q| q.evidence.map(|e| (q.query_id.as_str(), e)))
        .collect();

    let mut level_sums = MetricCell { ndcg5: 0.0, recall1: 0.0, recall5: 0.0 };
    let mut evidence_sums: BTreeMap<EvidenceType, (f64, usize)> = BTreeMap::new();
    for (query_id, ranking) in &run.results {
        let relevant = qrels.positives(query_id).expect("orphans checked above");
        if relevant.is_empty() {
            return Err(MetricsError::NoPositives { query_id: query_id.clone() });
        }
        let pages: Vec<&str> = ranking.iter().map(|(page, _)| page.as_str()).collect();
        let ndcg5 = ndcg_at_k(&pages, relevant, NDCG_K)?;
        level_sums.ndcg5 += ndcg5;
        level_sums.recall1 += recall_at_k(&pages, relevant, 1)?;
        level_sums.recall5 += recall_at_k(&pages, relevant, 5)?;
        if let Some(evidence) = evidence_of.get(query_id.as_str()) {
            let slot = evidence_sums.entry(*evidence).or_insert((0.0, 0));
            slot.0 += ndcg5;
            slot.1 += 1;
        }
    }

    let n = run.results.len() as f64;
    let mut counts = BTreeMap::new();
    counts.insert(level_key(run.level), run.results.len());
    let mut per_evidence = BTreeMap::new();
    for (evidence, (sum, count)) in evidence_sums {
        per_evidence.insert(evidence, sum / count as f64);
        counts.insert(evidence_key(evidence), count);
    }
    let mut per_level = BTreeMap::new();
    per_level.insert(
        run.level,
        MetricCell {
            ndcg5: level_sums.ndcg5 / n,
            recall1: level_sums.recall1 / n,
            recall5: level_sums.recall5 / n,
        },
    );
    Ok(MetricReport {
        retriever_name: run.retriever_name.clone(),
        per_level,
        per_evidence,
        counts,
    })
}

/// Merges per-level reports for one retriever into a single table row set.
///
/// Levels must be distinct across the inputs. The evidence slice of the
/// lowest level present is kept (evidence tables are conventionally read
/// against original queries); the others are dropped.
pub fn merge_reports(reports: Vec<MetricReport>) -> Result<MetricReport, MetricsError> {
    let mut iter = reports.into_iter();
    let mut merged = iter.next().ok_or(MetricsError::EmptyRun)?;
    let mut evidence_level = merged.per_level.keys().next().copied().unwrap_or(u8::MAX);
    for report in iter {
        if report.retriever_name != merged.retriever_name {
            return Err(MetricsError::RetrieverMismatch {
                left: merged.retriever_name,
                right: report.retriever_name,
            });
        }
        let report_level = report.per_level.keys().next().copied().unwrap_or(u8::MAX);
        for (level, cell) in &report.per_level {
            if merged.per_level.insert(*level, *cell).is_some() {
                return Err(MetricsError::DuplicateLevel { level: *level });
            }
            if let Some(count) = report.counts.get(&level_key(*level)) {
                merged.counts.insert(level_key(*level), *count);
            }
        }
        if report_level < evidence_level {
            evidence_level = report_level;
            merged.counts.retain(|key, _| !key.starts_with("evidence_"));
            for evidence in report.per_evidence.keys() {
                if let Some(count) = report.counts.get(&evidence_key(*evidence)) {
                    merged.counts.insert(evidence_key(*evidence), *count);
                }
            }
            merged.per_evidence = report.per_evidence;
        }
    }
    Ok(merged)
}

/// One machine-readable report cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub retriever: String,
    /// `level` or `evidence`.
    pub slice: String,
    /// The level number or evidence name.
    pub key: String,
    /// `ndcg5`, `recall1`, or `recall5`.
    pub metric: String,
    /// In [0, 1]; multiply by 100 for the table convention.
    pub value: f64,
    pub count: usize,
}

impl MetricReport {
    /// Flattens the report to one record per cell, for line-delimited output.
    pub fn to_cells(&self) -> Vec<CellRecord> {
        let mut cells = Vec::new();
        for (level, cell) in &self.per_level {
            let count = self.counts.get(&level_key(*level)).copied().unwrap_or(0);
            for (metric, value) in [
                ("ndcg5", cell.ndcg5),
                ("recall1", cell.recall1),
                ("recall5", cell.recall5),
            ] {
                cells.push(CellRecord {
                    retriever: self.retriever_name.clone(),
                    slice: "level".to_string(),
                    key: level.to_string(),
                    metric: metric.to_string(),
                    value,
                    count,
                });
            }
        }
        for (evidence, value) in &self.per_evidence {
            cells.push(CellRecord {
                retriever: self.retriever_name.clone(),
                slice: "evidence".to_string(),
                key: evidence.name().to_string(),
                metric: "ndcg5".to_string(),
                value: *value,
                count: self.counts.get(&evidence_key(*evidence)).copied().unwrap_or(0),
            });
        }
        cells
    }
}

/// Table-cell convention: ×100, one decimal.
pub fn format_metric(value: f64) -> String {
    format!("{:.1}", value * 100.0)
}

/// Renders merged reports (one per retriever) as aligned text tables:
/// one section per metric with levels as columns, then the NDCG@5 evidence
/// breakdown, then the query counts behind each column.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut levels: Vec<u8> = reports
        .iter()
        .flat_map(|r| r.per_level.keys().copied())
        .collect();
    levels.sort_unstable();
    levels.dedup();
    let name_width = reports
        .iter()
        .map(|r| r.retriever_name.len())
        .chain(std::iter::once("retriever".len()))
        .max()
        .unwrap_or(0);
    const CELL: usize = 7;

    type Selector = fn(&MetricCell) -> f64;
    let mut out = String::new();
    let selectors: [(&str, Selector); 3] = [
        ("NDCG@5", |c| c.ndcg5),
        ("Recall@1", |c| c.recall1),
        ("Recall@5", |c| c.recall5),
    ];
    for (title, select) in selectors {
        out.push_str(title);
        out.push('\n');
        out.push_str(&format!("{:<name_width$}", "retriever"));
        for level in &levels {
            out.push_str(&format!("{:>CELL$}", format!("L{level}")));
        }
        out.push('\n');
        for report in reports {
            out.push_str(&format!("{:<name_width$}", report.retriever_name));
            for level in &levels {
                match report.per_level.get(level) {
                    Some(cell) => out.push_str(&format!("{:>CELL$}", format_metric(select(cell)))),
                    None => out.push_str(&format!("{:>CELL$}", "-")),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }

    let evidence_types: Vec<EvidenceType> = {
        let mut seen: Vec<EvidenceType> = reports
            .iter()
            .flat_map(|r| r.per_evidence.keys().copied())
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    };
    if !evidence_types.is_empty() {
        out.push_str("NDCG@5 by evidence\n");
        out.push_str(&format!("{:<name_width$}", "retriever"));
        for evidence in &evidence_types {
            out.push_str(&format!("{:>CELL$}", evidence.name()));
        }
        out.push('\n');
        for report in reports {
            out.push_str(&format!("{:<name_width$}", report.retriever_name));
            for evidence in &evidence_types {
                match report.per_evidence.get(evidence) {
                    Some(value) => out.push_str(&format!("{:>CELL$}", format_metric(*value))),
                    None => out.push_str(&format!("{:>CELL$}", "-")),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }

    if let Some(first) = reports.first() {
        let parts: Vec<String> = first
            .counts
            .iter()
            .map(|(key, count)| format!("{key}={count}"))
            .collect();
        out.push_str(&format!("queries per cell: {}\n", parts.join(" ")));
    }
    out
}
