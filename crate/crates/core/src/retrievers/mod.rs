//! Scoring backends for evaluation: Okapi BM25 over chunks, single-vector
//! dense scoring, and multi-vector late-interaction (MaxSim) scoring, each
//! with chunk→page max pooling.
//!
//! The toolkit never runs vision towers or embedding models itself — BM25
//! indexes chunk text directly, while dense and MaxSim retrievers score
//! vectors produced by external encoders (loaded from [`EmbeddingSet`] files
//! or an embedding endpoint). Every retriever reduces to one shape: score
//! candidates for a query text, pool chunk scores up to pages where needed,
//! and emit a ranked page list. Indexes and embedding sets are immutable
//! after construction, so [`run_retrieval`] scores queries in parallel.

pub mod bm25;
pub mod embeddings;
pub mod scoring;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

pub use bm25::{tokenize, Bm25Index, DEFAULT_B, DEFAULT_K1};
pub use embeddings::{EmbedUnit, EmbeddingSet};
pub use scoring::{dense_score, maxsim};

use crate::corpus::CorpusIndex;
use crate::rephrase::QueryRecord;

/// Default candidate-list depth; far beyond the @5 metric cutoffs.
pub const DEFAULT_K: usize = 100;

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("vector dimensionality mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("{side} vector list is empty")]
    EmptyVectors { side: &'static str },
    #[error("chunk `{chunk_id}` is not mapped to any page")]
    UnmappedChunk { chunk_id: String },
    #[error("query `{query_id}` has no level-{level} version")]
    MissingLevel { query_id: String, level: u8 },
    #[error("missing embeddings for {} page(s): {}", ids.len(), ids.join(", "))]
    MissingEmbeddings { ids: Vec<String> },
    #[error("embedding data error: {0}")]
    Embedding(String),
    #[error("query embedding failed: {0}")]
    QueryEmbedding(String),
    #[error("{path}: {source}", path = path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}", path = path.display())]
    RunFile { path: PathBuf, line: usize, message: String },
}

/// Max-pools chunk scores up to their pages.
///
/// Each page's score is the maximum over its scored chunks; pages with no
/// scored chunk are omitted. Output is ordered by descending score, ties by
/// ascending page id, so the result is invariant to input permutations.
pub fn pool_to_pages(
    chunk_scores: &[(String, f64)],
    chunk_to_page: &HashMap<String, String>,
) -> Result<Vec<(String, f64)>, RetrieverError> {
    let mut pooled: BTreeMap<&str, f64> = BTreeMap::new();
    for (chunk_id, score) in chunk_scores {
        let page_id = chunk_to_page
            .get(chunk_id)
            .ok_or_else(|| RetrieverError::UnmappedChunk { chunk_id: chunk_id.clone() })?;
        pooled
            .entry(page_id.as_str())
            .and_modify(|best| *best = best.max(*score))
            .or_insert(*score);
    }
    let mut pages: Vec<(String, f64)> =
        pooled.into_iter().map(|(page, score)| (page.to_string(), score)).collect();
    order_ranking(&mut pages);
    Ok(pages)
}

/// Sorts a scored list into canonical rank order: descending score, ties
/// broken by ascending id so runs are byte-reproducible.
fn order_ranking(scores: &mut [(String, f64)]) {
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// A ready-to-score retrieval backend.
///
/// Implementations are immutable once constructed; `score_pages` is
/// read-only and called from many threads at once.
pub trait Retriever: Sync {
    fn name(&self) -> &str;

    /// Scores candidate pages for a query text, in no particular order.
    /// Pages the backend assigns no score (e.g. no term overlap for BM25)
    /// may be omitted.
    fn score_pages(&self, query: &str) -> Result<Vec<(String, f64)>, RetrieverError>;
}

/// Per-query ranked page lists produced by one retriever at one rephrasing
/// level.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub retriever_name: String,
    pub level: u8,
    /// query_id → ranked (page_id, score), scores non-increasing, page ids
    /// distinct, length ≤ k.
    pub results: BTreeMap<String, Vec<(String, f64)>>,
}

/// Scores every query's level-`level` text and returns top-`k` page lists.
///
/// Ties break by ascending page id; queries are scored in parallel.
pub fn run_retrieval(
    retriever: &(impl Retriever + ?Sized),
    queries: &[QueryRecord],
    level: u8,
    k: usize,
) -> Result<RetrievalRun, RetrieverError> {
    let results = queries
        .par_iter()
        .map(|query| {
            let text = query.versions.get(&level).ok_or_else(|| {
                RetrieverError::MissingLevel { query_id: query.query_id.clone(), level }
            })?;
            let mut pages = retriever.score_pages(text)?;
            order_ranking(&mut pages);
            pages.truncate(k);
            Ok((query.query_id.clone(), pages))
        })
        .collect::<Result<BTreeMap<_, _>, RetrieverError>>()?;
    Ok(RetrievalRun { retriever_name: retriever.name().to_string(), level, results })
}

impl RetrievalRun {
    /// Writes `query_id page_id rank score retriever_name` lines
    /// (TREC-run-like, no header). Scores use the shortest round-tripping
    /// decimal form, so write→read is exact.
    pub fn write(&self, path: &Path) -> Result<(), RetrieverError> {
        let io_err = |source| RetrieverError::Io { path: path.to_path_buf(), source };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut out = std::io::BufWriter::new(file);
        for (query_id, pages) in &self.results {
            for (rank, (page_id, score)) in pages.iter().enumerate() {
                writeln!(out, "{query_id} {page_id} {} {score} {}", rank + 1, self.retriever_name)
                    .map_err(io_err)?;
            }
        }
        out.flush().map_err(io_err)
    }

    /// Reads a run file written by [`RetrievalRun::write`]. The level is not
    /// part of the line format, so the caller supplies it (it is encoded in
    /// the file name by the pipeline).
    pub fn read(path: &Path, level: u8) -> Result<Self, RetrieverError> {
        let io_err = |source| RetrieverError::Io { path: path.to_path_buf(), source };
        let bad = |line: usize, message: String| RetrieverError::RunFile {
            path: path.to_path_buf(),
            line,
            message,
        };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let reader = BufReader::new(file);

        let mut retriever_name: Option<String> = None;
        let mut results: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        let mut seen: HashMap<String, HashSet<String>> = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [query_id, page_id, rank, score, name] = fields[..] else {
                return Err(bad(lineno, format!("expected 5 fields, got {}", fields.len())));
            };
            let rank: usize =
                rank.parse().map_err(|_| bad(lineno, format!("bad rank `{rank}`")))?;
            let score: f64 =
                score.parse().map_err(|_| bad(lineno, format!("bad score `{score}`")))?;
            match &retriever_name {
                None => retriever_name = Some(name.to_string()),
                Some(expected) if expected != name => {
                    return Err(bad(
                        lineno,
                        format!("retriever `{name}` conflicts with earlier `{expected}`"),
                    ));
                }
                Some(_) => {}
            }
            let list = results.entry(query_id.to_string()).or_default();
            if rank != list.len() + 1 {
                return Err(bad(
                    lineno,
                    format!("rank {rank} out of sequence (expected {})", list.len() + 1),
                ));
            }
            if let Some((_, prev)) = list.last() {
                if score > *prev {
                    return Err(bad(lineno, format!("score {score} increases over {prev}")));
                }
            }
            if !seen.entry(query_id.to_string()).or_default().insert(page_id.to_string()) {
                return Err(bad(lineno, format!("page `{page_id}` repeated for `{query_id}`")));
            }
            list.push((page_id.to_string(), score));
        }
        let retriever_name =
            retriever_name.ok_or_else(|| bad(0, "run file has no result lines".into()))?;
        Ok(Self { retriever_name, level, results })
    }
}

/// Okapi BM25 over chunk text, max-pooled to pages.
pub struct Bm25Retriever {
    index: Bm25Index,
    chunk_to_page: HashMap<String, String>,
}

impl Bm25Retriever {
    pub fn new(index: Bm25Index, chunk_to_page: HashMap<String, String>) -> Self {
        Self { index, chunk_to_page }
    }

    /// Indexes every chunk of `corpus`.
    pub fn from_corpus(corpus: &CorpusIndex, k1: f64, b: f64) -> Result<Self, RetrieverError> {
        let pairs: Vec<(&str, &str)> = corpus
            .chunks()
            .map(|chunk| (chunk.chunk_id.as_str(), chunk.content.as_str()))
            .collect();
        let index = Bm25Index::build(pairs, k1, b)?;
        let chunk_to_page = corpus
            .chunks()
            .map(|chunk| (chunk.chunk_id.clone(), chunk.page_id.clone()))
            .collect();
        Ok(Self { index, chunk_to_page })
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }
}

impl Retriever for Bm25Retriever {
    fn name(&self) -> &str {
        "bm25"
    }

    fn score_pages(&self, query: &str) -> Result<Vec<(String, f64)>, RetrieverError> {
        pool_to_pages(&self.index.score(query), &self.chunk_to_page)
    }
}

/// Validates that an embedding set covers every expected page, returning the
/// sorted list of uncovered page ids otherwise.
fn check_page_coverage(
    embeddings: &EmbeddingSet,
    chunk_to_page: Option<&HashMap<String, String>>,
    expected_pages: &[String],
) -> Result<(), RetrieverError> {
    let covered: BTreeSet<&str> = match embeddings.unit {
        EmbedUnit::Page => embeddings.ids().map(String::as_str).collect(),
        EmbedUnit::Chunk => {
            let map = chunk_to_page.ok_or_else(|| {
                RetrieverError::Embedding(
                    "chunk-unit embeddings require a chunk→page map".to_string(),
                )
            })?;
            let mut pages = BTreeSet::new();
            for chunk_id in embeddings.ids() {
                let page = map
                    .get(chunk_id)
                    .ok_or_else(|| RetrieverError::UnmappedChunk { chunk_id: chunk_id.clone() })?;
                pages.insert(page.as_str());
            }
            pages
        }
    };
    let mut missing: Vec<String> = expected_pages
        .iter()
        .filter(|page| !covered.contains(page.as_str()))
        .cloned()
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        missing.sort();
        missing.dedup();
        Err(RetrieverError::MissingEmbeddings { ids: missing })
    }
}

/// Single-vector dense retrieval: dot product against one vector per page
/// (or per chunk, max-pooled to pages).
pub struct DenseRetriever<F>
where
    F: Fn(&str) -> Result<Vec<f32>, RetrieverError> + Sync,
{
    embeddings: EmbeddingSet,
    chunk_to_page: Option<HashMap<String, String>>,
    embed_query: F,
}

impl<F> DenseRetriever<F>
where
    F: Fn(&str) -> Result<Vec<f32>, RetrieverError> + Sync,
{
    /// `expected_pages` is the full corpus page list; construction fails if
    /// any page would be unscoreable.
    pub fn new(
        embeddings: EmbeddingSet,
        chunk_to_page: Option<HashMap<String, String>>,
        expected_pages: &[String],
        embed_query: F,
    ) -> Result<Self, RetrieverError> {
        if embeddings.multi {
            return Err(RetrieverError::Embedding(
                "dense retrieval requires single-vector embeddings".to_string(),
            ));
        }
        check_page_coverage(&embeddings, chunk_to_page.as_ref(), expected_pages)?;
        Ok(Self { embeddings, chunk_to_page, embed_query })
    }
}

impl<F> Retriever for DenseRetriever<F>
where
    F: Fn(&str) -> Result<Vec<f32>, RetrieverError> + Sync,
{
    fn name(&self) -> &str {
        "dense"
    }

    fn score_pages(&self, query: &str) -> Result<Vec<(String, f64)>, RetrieverError> {
        let query_vec = (self.embed_query)(query)?;
        let mut scores = Vec::with_capacity(self.embeddings.len());
        for (id, vectors) in self.embeddings.iter() {
            let score = dense_score(&query_vec, &vectors[0])?;
            scores.push((id.clone(), f64::from(score)));
        }
        match self.embeddings.unit {
            EmbedUnit::Page => Ok(scores),
            EmbedUnit::Chunk => pool_to_pages(
                &scores,
                self.chunk_to_page.as_ref().expect("validated at construction"),
            ),
        }
    }
}

/// Multi-vector late-interaction retrieval: MaxSim against each page's (or
/// chunk's) vector list.
pub struct MaxSimRetriever<F>
where
    F: Fn(&str) -> Result<Vec<Vec<f32>>, RetrieverError> + Sync,
{
    embeddings: EmbeddingSet,
    chunk_to_page: Option<HashMap<String, String>>,
    embed_query: F,
}

impl<F> MaxSimRetriever<F>
where
    F: Fn(&str) -> Result<Vec<Vec<f32>>, RetrieverError> + Sync,
{
    pub fn new(
        embeddings: EmbeddingSet,
        chunk_to_page: Option<HashMap<String, String>>,
        expected_pages: &[String],
        embed_query: F,
    ) -> Result<Self, RetrieverError> {
        check_page_coverage(&embeddings, chunk_to_page.as_ref(), expected_pages)?;
        Ok(Self { embeddings, chunk_to_page, embed_query })
    }
}

impl<F> Retriever for MaxSimRetriever<F>
where
    F: Fn(&str) -> Result<Vec<Vec<f32>>, RetrieverError> + Sync,
{
    fn name(&self) -> &str {
        "maxsim"
    }

    fn score_pages(&self, query: &str) -> Result<Vec<(String, f64)>, RetrieverError> {
        let query_vecs = (self.embed_query)(query)?;
        let mut scores = Vec::with_capacity(self.embeddings.len());
        for (id, vectors) in self.embeddings.iter() {
            let score = maxsim(&query_vecs, vectors)?;
            scores.push((id.clone(), f64::from(score)));
        }
        match self.embeddings.unit {
            EmbedUnit::Page => Ok(scores),
            EmbedUnit::Chunk => pool_to_pages(
                &scores,
                self.chunk_to_page.as_ref().expect("validated at construction"),
            ),
        }
    }
}
