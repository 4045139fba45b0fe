//! Benchmark bundle serialization and the two training-set products.
//!
//! A finished benchmark is a directory of five files — `corpus.jsonl`,
//! `queries.jsonl`, `qrels.txt`, `evidence.jsonl`, `meta.json` — that
//! together are self-describing: the metadata records which endpoints and
//! prompt templates produced the labels, so a bundle is attributable to the
//! exact configuration that built it. Line-delimited files open with a
//! versioned header line.
//!
//! Writing refuses bundles that violate the benchmark invariants (every
//! query resolves to a corpus page, has exactly one qrels positive, and
//! carries all four query versions), naming the violated invariant: a
//! benchmark with a multi-positive query would make single-positive metric
//! assumptions silently wrong downstream.
//!
//! The training products are (1) one query–answer–page triplet per
//! finalized query, and (2) an augmented copy of a triplet set in which a
//! seeded random half of the queries is replaced by a verified rephrasing
//! at a uniformly chosen level — queries whose rephrasing fails
//! verification keep their original text.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    check_header, header_line, lexical_normalize, portable_path, relative_to, CorpusIndex,
};
use crate::labeling::{EvidenceType, Qrels};
use crate::rephrase::{QueryRecord, QueryStatus, Rephraser};
use crate::stage::StageError;

pub const QUERIES_FORMAT: &str = "ragbench/queries";
pub const EVIDENCE_FORMAT: &str = "ragbench/evidence";
pub const TRIPLETS_FORMAT: &str = "ragbench/triplets";

/// Share of a triplet set rephrased by the augmentation product.
pub const DEFAULT_REPHRASE_FRACTION: f64 = 0.5;

/// Build metadata: everything needed to attribute a benchmark to the run
/// that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub toolkit_version: String,
    pub seed: u64,
    pub document_count: usize,
    pub page_count: usize,
    pub query_count: usize,
    /// Endpoint role → model identity.
    pub endpoints: BTreeMap<String, String>,
    /// Prompt template name → content digest.
    pub prompt_digests: BTreeMap<String, String>,
}

impl BundleMeta {
    /// Captures metadata with the counts taken from the data itself.
    pub fn capture(
        corpus: &CorpusIndex,
        queries: &[QueryRecord],
        seed: u64,
        endpoints: BTreeMap<String, String>,
        prompt_digests: BTreeMap<String, String>,
    ) -> Self {
        Self {
            toolkit_version: crate::TOOLKIT_VERSION.to_string(),
            seed,
            document_count: corpus.document_count(),
            page_count: corpus.page_count(),
            query_count: queries.len(),
            endpoints,
            prompt_digests,
        }
    }
}

/// A complete benchmark: corpus, finalized queries, labels, metadata.
#[derive(Debug, Clone)]
pub struct BenchmarkBundle {
    pub corpus: CorpusIndex,
    pub queries: Vec<QueryRecord>,
    pub qrels: Qrels,
    pub meta: BundleMeta,
}

/// Bundle identity deliberately excludes qrels provenance: how a positive
/// entered the labels is sweep-side metadata that `write_bundle` does not
/// serialize, so a written-and-reread bundle equals its source.
impl PartialEq for BenchmarkBundle {
    fn eq(&self, other: &Self) -> bool {
        self.corpus == other.corpus
            && self.queries == other.queries
            && self.qrels.entries() == other.qrels.entries()
            && self.meta == other.meta
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EvidenceLine {
    query_id: String,
    evidence: EvidenceType,
}

fn invariant(name: &'static str, detail: String) -> StageError {
    StageError::Failed {
        stage: "build",
        message: format!("bundle invariant `{name}` violated: {detail}"),
    }
}

impl BenchmarkBundle {
    /// Checks every bundle invariant, reporting the first violation by name.
    pub fn validate(&self) -> Result<(), StageError> {
        let mut seen = std::collections::BTreeSet::new();
        for query in &self.queries {
            if !seen.insert(query.query_id.as_str()) {
                return Err(invariant(
                    "distinct-query-ids",
                    format!("query id `{}` appears twice", query.query_id),
                ));
            }
            if query.status != QueryStatus::Final {
                return Err(invariant(
                    "finalized",
                    format!(
                        "query `{}` has status {:?}, expected final",
                        query.query_id, query.status
                    ),
                ));
            }
            let missing: Vec<u8> = (0..=3u8)
                .filter(|level| !query.versions.contains_key(level))
                .collect();
            if !missing.is_empty() {
                return Err(invariant(
                    "four-versions",
                    format!("query `{}` lacks rephrasing levels {missing:?}", query.query_id),
                ));
            }
            if self.corpus.page(&query.page_id).is_none() {
                return Err(invariant(
                    "page-resolvable",
                    format!(
                        "query `{}` references page `{}`, absent from the corpus",
                        query.query_id, query.page_id
                    ),
                ));
            }
            match self.qrels.positives(&query.query_id) {
                Some(positives) if positives.len() == 1 => {
                    if !positives.contains(&query.page_id) {
                        return Err(invariant(
                            "single-positive",
                            format!(
                                "query `{}`: its one positive `{}` is not its source page `{}`",
                                query.query_id,
                                positives.iter().next().expect("len checked"),
                                query.page_id
                            ),
                        ));
                    }
                }
                Some(positives) => {
                    return Err(invariant(
                        "single-positive",
                        format!(
                            "query `{}` has {} qrels positives, expected exactly one",
                            query.query_id,
                            positives.len()
                        ),
                    ));
                }
                None => {
                    return Err(invariant(
                        "single-positive",
                        format!("query `{}` has no qrels entry", query.query_id),
                    ));
                }
            }
        }
        if self.meta.page_count != self.corpus.page_count()
            || self.meta.document_count != self.corpus.document_count()
            || self.meta.query_count != self.queries.len()
        {
            return Err(invariant(
                "meta-consistency",
                format!(
                    "metadata reports {} docs / {} pages / {} queries, data holds {} / {} / {}",
                    self.meta.document_count,
                    self.meta.page_count,
                    self.meta.query_count,
                    self.corpus.document_count(),
                    self.corpus.page_count(),
                    self.queries.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Writes a validated bundle into `dir` (created if needed).
///
/// Evidence labels live in `evidence.jsonl` alone; the query records on
/// disk carry the four versions but not the label, so each fact has one
/// authoritative file. Relevance provenance is a pipeline-side artifact and
/// is not part of the bundle — `qrels.txt` holds the bare labels. Output is
/// byte-stable for identical inputs.
pub fn write_bundle(bundle: &BenchmarkBundle, dir: &Path) -> Result<(), StageError> {
    bundle.validate()?;
    std::fs::create_dir_all(dir)
        .map_err(|source| StageError::io("create bundle dir", dir, source))?;

    bundle
        .corpus
        .save(&dir.join("corpus.jsonl"))
        .map_err(|err| StageError::Failed {
            stage: "build",
            message: format!("failed to write bundle corpus: {err}"),
        })?;

    let queries_path = dir.join("queries.jsonl");
    let mut out = String::new();
    out.push_str(&header_line(QUERIES_FORMAT));
    out.push('\n');
    for query in &bundle.queries {
        let mut stripped = query.clone();
        stripped.evidence = None;
        out.push_str(&serde_json::to_string(&stripped).map_err(|source| {
            StageError::json("serialize query record", &queries_path, source)
        })?);
        out.push('\n');
    }
    std::fs::write(&queries_path, out)
        .map_err(|source| StageError::io("write bundle queries", &queries_path, source))?;

    let qrels_path = dir.join("qrels.txt");
    let mut out = String::new();
    for (query_id, pages) in bundle.qrels.entries() {
        for page_id in pages {
            out.push_str(&format!("{query_id} {page_id} 1\n"));
        }
    }
    std::fs::write(&qrels_path, out)
        .map_err(|source| StageError::io("write bundle qrels", &qrels_path, source))?;

    let evidence_path = dir.join("evidence.jsonl");
    let mut out = String::new();
    out.push_str(&header_line(EVIDENCE_FORMAT));
    out.push('\n');
    for query in &bundle.queries {
        if let Some(evidence) = query.evidence {
            let line = EvidenceLine { query_id: query.query_id.clone(), evidence };
            out.push_str(
                &serde_json::to_string(&line).map_err(|source| {
                    StageError::json("serialize evidence", &evidence_path, source)
                })?,
            );
            out.push('\n');
        }
    }
    std::fs::write(&evidence_path, out)
        .map_err(|source| StageError::io("write bundle evidence", &evidence_path, source))?;

    let meta_path = dir.join("meta.json");
    let mut text = serde_json::to_string_pretty(&bundle.meta)
        .map_err(|source| StageError::json("serialize bundle meta", &meta_path, source))?;
    text.push('\n');
    std::fs::write(&meta_path, text)
        .map_err(|source| StageError::io("write bundle meta", &meta_path, source))
}

/// Reads a bundle directory back and re-validates it.
pub fn read_bundle(dir: &Path) -> Result<BenchmarkBundle, StageError> {
    let corpus_path = dir.join("corpus.jsonl");
    let corpus = CorpusIndex::load(&corpus_path).map_err(|err| StageError::Failed {
        stage: "build",
        message: format!("failed to read bundle corpus: {err}"),
    })?;

    let queries_path = dir.join("queries.jsonl");
    let text = std::fs::read_to_string(&queries_path)
        .map_err(|source| StageError::io("read bundle queries", &queries_path, source))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| StageError::Record {
        path: queries_path.clone(),
        line: 1,
        message: "empty queries file".into(),
    })?;
    check_header(header, QUERIES_FORMAT).map_err(|message| StageError::Record {
        path: queries_path.clone(),
        line: 1,
        message,
    })?;
    let mut queries = Vec::new();
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record: QueryRecord = serde_json::from_str(line).map_err(|err| StageError::Record {
            path: queries_path.clone(),
            line: lineno + 1,
            message: format!("bad query record: {err}"),
        })?;
        by_id.insert(record.query_id.clone(), queries.len());
        queries.push(record);
    }

    let qrels = Qrels::read(&dir.join("qrels.txt"), None)?;

    let evidence_path = dir.join("evidence.jsonl");
    let text = std::fs::read_to_string(&evidence_path)
        .map_err(|source| StageError::io("read bundle evidence", &evidence_path, source))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| StageError::Record {
        path: evidence_path.clone(),
        line: 1,
        message: "empty evidence file".into(),
    })?;
    check_header(header, EVIDENCE_FORMAT).map_err(|message| StageError::Record {
        path: evidence_path.clone(),
        line: 1,
        message,
    })?;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record: EvidenceLine = serde_json::from_str(line).map_err(|err| StageError::Record {
            path: evidence_path.clone(),
            line: lineno + 1,
            message: format!("bad evidence record: {err}"),
        })?;
        let index = by_id.get(&record.query_id).ok_or_else(|| StageError::Record {
            path: evidence_path.clone(),
            line: lineno + 1,
            message: format!("evidence label for unknown query `{}`", record.query_id),
        })?;
        queries[*index].evidence = Some(record.evidence);
    }

    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|source| StageError::io("read bundle meta", &meta_path, source))?;
    let meta: BundleMeta = serde_json::from_str(&text)
        .map_err(|source| StageError::json("parse bundle meta", &meta_path, source))?;

    let bundle = BenchmarkBundle { corpus, queries, qrels, meta };
    bundle.validate()?;
    Ok(bundle)
}

/// One fine-tuning record: a page image, a query it answers, and the answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTriplet {
    pub query_id: String,
    pub page_id: String,
    /// Page image path; absolute in memory, relative on disk.
    pub image_ref: PathBuf,
    pub query: String,
    pub answer: String,
    /// 0 = original text; 1–3 = which rephrasing level replaced it.
    pub rephrase_level_applied: u8,
}

fn validate_triplet(triplet: &TrainingTriplet) -> Result<(), String> {
    for (field, value) in [
        ("query_id", &triplet.query_id),
        ("page_id", &triplet.page_id),
        ("query", &triplet.query),
        ("answer", &triplet.answer),
    ] {
        if value.trim().is_empty() {
            return Err(format!("triplet field `{field}` is empty"));
        }
    }
    if triplet.image_ref.as_os_str().is_empty() {
        return Err("triplet image_ref is empty".into());
    }
    if triplet.rephrase_level_applied > 3 {
        return Err(format!(
            "rephrase_level_applied {} out of range 0–3",
            triplet.rephrase_level_applied
        ));
    }
    Ok(())
}

/// One triplet per finalized query: level-0 text, its answer, its page.
pub fn emit_triplets(bundle: &BenchmarkBundle) -> Result<Vec<TrainingTriplet>, StageError> {
    bundle.validate()?;
    Ok(bundle
        .queries
        .iter()
        .map(|query| {
            let page = bundle.corpus.page(&query.page_id).expect("validate checked pages");
            TrainingTriplet {
                query_id: query.query_id.clone(),
                page_id: query.page_id.clone(),
                image_ref: page.image_ref.clone(),
                query: query.original().to_string(),
                answer: query.answer.clone(),
                rephrase_level_applied: 0,
            }
        })
        .collect())
}

/// Writes triplets as a line-delimited artifact with image paths stored
/// relative to the file's directory.
pub fn write_triplets(path: &Path, triplets: &[TrainingTriplet]) -> Result<(), StageError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path)
            .map_err(|source| StageError::io("write triplets", path, source))?,
    );
    let io_err = |source| StageError::io("write triplets", path, source);
    writeln!(out, "{}", header_line(TRIPLETS_FORMAT)).map_err(io_err)?;
    for triplet in triplets {
        validate_triplet(triplet).map_err(|message| StageError::Failed {
            stage: "triplets",
            message,
        })?;
        let mut portable = triplet.clone();
        portable.image_ref =
            PathBuf::from(portable_path(&relative_to(dir, &triplet.image_ref)));
        let line = serde_json::to_string(&portable)
            .map_err(|source| StageError::json("serialize triplet", path, source))?;
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Loads a triplets artifact, re-validating every record.
pub fn read_triplets(path: &Path) -> Result<Vec<TrainingTriplet>, StageError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let text = std::fs::read_to_string(path)
        .map_err(|source| StageError::io("read triplets", path, source))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| StageError::Record {
        path: path.to_path_buf(),
        line: 1,
        message: "empty triplets file".into(),
    })?;
    check_header(header, TRIPLETS_FORMAT).map_err(|message| StageError::Record {
        path: path.to_path_buf(),
        line: 1,
        message,
    })?;
    let mut triplets = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut triplet: TrainingTriplet =
            serde_json::from_str(line).map_err(|err| StageError::Record {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("bad triplet record: {err}"),
            })?;
        validate_triplet(&triplet).map_err(|message| StageError::Record {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        })?;
        if triplet.image_ref.is_relative() {
            triplet.image_ref = lexical_normalize(&dir.join(&triplet.image_ref));
        }
        triplets.push(triplet);
    }
    Ok(triplets)
}

/// The rephrased-training-set product: a copy of `triplets` in which a
/// seeded random ⌊fraction·N⌉-sized subset has its query text replaced by a
/// verified rephrasing at a uniformly chosen level 1–3.
///
/// Selection and level choice come from one ChaCha8 stream seeded with
/// `seed`, so the product is reproducible. A selected query whose
/// rephrasings all fail verification (or echo the input) keeps its original
/// text with `rephrase_level_applied` 0. Answers, page references, order,
/// and cardinality are never changed.
pub fn rephrase_training_set(
    triplets: &[TrainingTriplet],
    fraction: f64,
    rephraser: &Rephraser,
    seed: u64,
) -> Result<Vec<TrainingTriplet>, StageError> {
    if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
        return Err(StageError::Config(format!(
            "rephrase fraction must be in [0, 1], got {fraction}"
        )));
    }
    let count = (fraction * triplets.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, triplets.len(), count).into_vec();
    chosen.sort_unstable();
    let jobs: Vec<(usize, u8)> = chosen
        .into_iter()
        .map(|index| (index, rng.random_range(1..=3u8)))
        .collect();

    // Each job is an independent (rephrase, verify) pair; under the mock
    // and under a production backend alike the result depends only on the
    // inputs, so parallel order doesn't affect the output.
    let rephrased: Vec<(usize, Option<(String, u8)>)> = jobs
        .par_iter()
        .map(|&(index, level)| {
            let triplet = &triplets[index];
            let replacement = match rephraser.rephrase_query(&triplet.query, level) {
                Ok(candidate) => rephraser
                    .verify_rephrase(&triplet.query, &candidate, &triplet.answer)?
                    .then_some((candidate, level)),
                // The model kept echoing the input: retain the original.
                Err(StageError::Failed { stage: "rephrase", .. }) => None,
                Err(other) => return Err(other),
            };
            Ok((index, replacement))
        })
        .collect::<Result<_, StageError>>()?;

    let mut out = triplets.to_vec();
    for (index, replacement) in rephrased {
        match replacement {
            Some((query, level)) => {
                out[index].query = query;
                out[index].rephrase_level_applied = level;
            }
            None => out[index].rephrase_level_applied = 0,
        }
    }
    Ok(out)
}
