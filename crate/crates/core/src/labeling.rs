//! Step 4: exhaustive false-negative verification.
//!
//! Every (query, page) pair in the corpus is judged by a vision model —
//! "does this page answer this query?" — so that relevance labels never
//! depend on what a retriever happened to rank. Judging uses the level-0
//! query text only; rephrased levels inherit the label, which rephrase
//! verification justifies. Judgments are written to a content-addressed
//! cache directory as they complete, one record per pair, so an interrupted
//! sweep resumes without re-querying finished pairs.
//!
//! After the sweep, `finalize` keeps only queries whose single verified
//! positive is their own source page: a query answered by several pages
//! would make every metric ambiguous, and a query whose own page fails
//! verification was mislabeled from the start. Finalized queries then get
//! an evidence-type label (text / table / visual).
//!
//! Unparseable relevance answers count as not-relevant but are flagged; a
//! flag rate above the configured limit fails the run, because silent parse
//! drift would corrupt labels.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufReader, Write as _};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusIndex, PageRecord};
use crate::digest::sha256_fields;
use crate::modelgate::{tags, EndpointSpec, Gateway, ModelRequest};
use crate::rephrase::{QueryRecord, QueryStatus};
use crate::retrievers::{run_retrieval, Bm25Retriever, DEFAULT_B, DEFAULT_K1};
use crate::stage::StageError;
use crate::template::{defaults, PromptTemplate};
use crate::template_values;

/// Maximum tolerated share of unparseable relevance answers.
pub const DEFAULT_FLAG_RATE_LIMIT: f64 = 0.02;
/// Pages per query when the BM25 prescreen is enabled.
pub const DEFAULT_PRESCREEN_K: usize = 200;

/// Where a query's answer lives on the page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceType {
    Text,
    Table,
    Visual,
}

impl EvidenceType {
    pub fn name(self) -> &'static str {
        match self {
            Self::Text => "text",
            Self::Table => "table",
            Self::Visual => "visual",
        }
    }

    /// Parses the classifier vocabulary, case-insensitively.
    pub fn parse(word: &str) -> Option<Self> {
        match word.to_ascii_lowercase().as_str() {
            "text" => Some(Self::Text),
            "table" => Some(Self::Table),
            "visual" => Some(Self::Visual),
            _ => None,
        }
    }
}

/// How a positive entered the qrels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// The page the query was generated from.
    SourcePage,
    /// Any other page the exhaustive sweep verified as answering.
    SweepVerified,
}

/// Relevance labels: query → set of relevant pages, with per-pair
/// provenance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Qrels {
    entries: BTreeMap<String, BTreeSet<String>>,
    provenance: BTreeMap<(String, String), Provenance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProvenanceLine {
    query_id: String,
    page_id: String,
    provenance: Provenance,
}

impl Qrels {
    pub fn add(&mut self, query_id: &str, page_id: &str, provenance: Provenance) {
        self.entries.entry(query_id.to_string()).or_default().insert(page_id.to_string());
        self.provenance.insert((query_id.to_string(), page_id.to_string()), provenance);
    }

    /// Registers a query with no positives yet (so it still appears in the
    /// entries map).
    pub fn touch(&mut self, query_id: &str) {
        self.entries.entry(query_id.to_string()).or_default();
    }

    pub fn positives(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(query_id)
    }

    pub fn entries(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.entries
    }

    pub fn provenance_of(&self, query_id: &str, page_id: &str) -> Option<Provenance> {
        self.provenance.get(&(query_id.to_string(), page_id.to_string())).copied()
    }

    pub fn query_count(&self) -> usize {
        self.entries.len()
    }

    /// The qrels restricted to the given queries (used when bundling: the
    /// sweep judges every rephrased query, but dropped queries must not
    /// leave entries behind in the benchmark).
    pub fn subset<'a>(&self, query_ids: impl IntoIterator<Item = &'a str>) -> Self {
        let keep: std::collections::BTreeSet<&str> = query_ids.into_iter().collect();
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(query_id, _)| keep.contains(query_id.as_str()))
                .map(|(query_id, pages)| (query_id.clone(), pages.clone()))
                .collect(),
            provenance: self
                .provenance
                .iter()
                .filter(|((query_id, _), _)| keep.contains(query_id.as_str()))
                .map(|(key, value)| (key.clone(), *value))
                .collect(),
        }
    }

    /// Writes `query_id page_id 1` lines (TREC-qrels-like) plus a
    /// line-delimited JSON provenance sidecar.
    pub fn write(&self, qrels_path: &Path, provenance_path: &Path) -> Result<(), StageError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StageError::Io { context: "write qrels", path: path.clone(), source }
        };
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(qrels_path).map_err(io_err(qrels_path))?,
        );
        for (query_id, pages) in &self.entries {
            for page_id in pages {
                writeln!(out, "{query_id} {page_id} 1").map_err(io_err(qrels_path))?;
            }
        }
        out.flush().map_err(io_err(qrels_path))?;

        let mut side = std::io::BufWriter::new(
            std::fs::File::create(provenance_path).map_err(io_err(provenance_path))?,
        );
        for ((query_id, page_id), provenance) in &self.provenance {
            let line = ProvenanceLine {
                query_id: query_id.clone(),
                page_id: page_id.clone(),
                provenance: *provenance,
            };
            serde_json::to_writer(&mut side, &line).map_err(|err| StageError::Json {
                context: "write qrels provenance",
                path: provenance_path.to_path_buf(),
                source: err,
            })?;
            side.write_all(b"\n").map_err(io_err(provenance_path))?;
        }
        side.flush().map_err(io_err(provenance_path))
    }

    /// Reads a qrels file; the provenance sidecar is optional (metrics only
    /// need the entries).
    pub fn read(qrels_path: &Path, provenance_path: Option<&Path>) -> Result<Self, StageError> {
        let text = std::fs::read_to_string(qrels_path).map_err(|source| StageError::Io {
            context: "read qrels",
            path: qrels_path.to_path_buf(),
            source,
        })?;
        let mut qrels = Self::default();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [query_id, page_id, relevance] = fields[..] else {
                return Err(StageError::Record {
                    path: qrels_path.to_path_buf(),
                    line: idx + 1,
                    message: format!("expected 3 fields, got {}", fields.len()),
                });
            };
            if relevance != "1" {
                return Err(StageError::Record {
                    path: qrels_path.to_path_buf(),
                    line: idx + 1,
                    message: format!("binary qrels expect relevance 1, got `{relevance}`"),
                });
            }
            qrels
                .entries
                .entry(query_id.to_string())
                .or_default()
                .insert(page_id.to_string());
        }
        if let Some(provenance_path) = provenance_path {
            let text =
                std::fs::read_to_string(provenance_path).map_err(|source| StageError::Io {
                    context: "read qrels provenance",
                    path: provenance_path.to_path_buf(),
                    source,
                })?;
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: ProvenanceLine =
                    serde_json::from_str(line).map_err(|err| StageError::Record {
                        path: provenance_path.to_path_buf(),
                        line: idx + 1,
                        message: format!("bad provenance record: {err}"),
                    })?;
                qrels.provenance.insert((record.query_id, record.page_id), record.provenance);
            }
        }
        Ok(qrels)
    }
}

/// One relevance decision, kept verbatim for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub query_id: String,
    pub page_id: String,
    pub relevant: bool,
    /// The model's answer text.
    pub raw: String,
    /// True when the answer fit neither YES nor NO and was conservatively
    /// treated as not-relevant.
    pub flagged: bool,
}

/// Sweep tuning.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    /// Judgment cache directory; one JSON record per (query, page) pair.
    pub judgment_dir: PathBuf,
    /// When set, judge only the top-K BM25 pages per query (plus the source
    /// page, which the single-positive rule always needs). Default off: the
    /// benchmark contract is an exhaustive sweep.
    pub prescreen_k: Option<usize>,
    /// Fail the run when flagged judgments exceed this share.
    pub flag_rate_limit: f64,
}

impl SweepConfig {
    pub fn new(judgment_dir: impl Into<PathBuf>) -> Self {
        Self {
            judgment_dir: judgment_dir.into(),
            prescreen_k: None,
            flag_rate_limit: DEFAULT_FLAG_RATE_LIMIT,
        }
    }
}

/// Everything the sweep produced.
#[derive(Debug)]
pub struct SweepReport {
    pub qrels: Qrels,
    pub judgment_count: usize,
    pub flagged_count: usize,
}

/// Why finalize dropped a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// The source page itself was not judged relevant.
    SourceNotVerified,
    /// More than one page was verified relevant.
    MultiPositive,
}

/// A finalize rejection, kept for the drop log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DroppedQuery {
    pub record: QueryRecord,
    pub reason: DropReason,
    /// The verified positives that triggered the drop.
    pub positives: Vec<String>,
}

/// Evidence classification outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvidenceOutcome {
    Label(EvidenceType),
    /// Out-of-vocabulary answer: no label stored, query flagged for a
    /// manual pass.
    Withheld { raw: String },
}

/// Step-4 engine: relevance judging, the exhaustive sweep, finalization,
/// and evidence classification.
pub struct Labeler<'a> {
    gateway: &'a Gateway,
    relevance_endpoint: &'a EndpointSpec,
    evidence_endpoint: &'a EndpointSpec,
    relevance_template: PromptTemplate,
    evidence_template: PromptTemplate,
}

impl<'a> Labeler<'a> {
    /// Builds a labeler with the built-in prompt templates. Relevance runs
    /// against the relevance endpoint; evidence classification runs against
    /// the caption endpoint (both vision tasks).
    pub fn new(
        gateway: &'a Gateway,
        relevance_endpoint: &'a EndpointSpec,
        evidence_endpoint: &'a EndpointSpec,
    ) -> Result<Self, StageError> {
        Ok(Self {
            gateway,
            relevance_endpoint,
            evidence_endpoint,
            relevance_template: PromptTemplate::parse(defaults::RELEVANCE)?,
            evidence_template: PromptTemplate::parse(defaults::EVIDENCE)?,
        })
    }

    /// Replaces the relevance template (`{document_title}`, `{query}`).
    pub fn with_relevance_template(mut self, template: PromptTemplate) -> Self {
        self.relevance_template = template;
        self
    }

    /// Replaces the evidence template (`{query}`, `{answer}`).
    pub fn with_evidence_template(mut self, template: PromptTemplate) -> Self {
        self.evidence_template = template;
        self
    }

    /// Judges whether one page answers one query. The model sees the page
    /// image and must answer YES or NO; anything else is conservatively
    /// not-relevant and flagged.
    pub fn judge_relevance(
        &self,
        query_id: &str,
        query_text: &str,
        page: &PageRecord,
        document_title: &str,
    ) -> Result<RelevanceJudgment, StageError> {
        let image = std::fs::read(&page.image_ref).map_err(|source| StageError::Io {
            context: "read page image",
            path: page.image_ref.clone(),
            source,
        })?;
        let prompt = self.relevance_template.render(&template_values!(
            ("document_title", document_title),
            ("query", query_text),
        ))?;
        let request = ModelRequest::with_image(tags::RELEVANCE, prompt, image);
        let response = self.gateway.complete(self.relevance_endpoint, &request)?;
        let (relevant, flagged) = parse_yes_no(&response.text);
        Ok(RelevanceJudgment {
            query_id: query_id.to_string(),
            page_id: page.page_id.clone(),
            relevant,
            raw: response.text,
            flagged,
        })
    }

    /// Judges every (query, page) pair and assembles the qrels.
    ///
    /// Pairs already present in the judgment cache are not re-queried, so an
    /// interrupted sweep resumes where it stopped. Writes are
    /// keyed-idempotent (temp file + rename), making concurrent resume safe.
    pub fn sweep(
        &self,
        queries: &[QueryRecord],
        corpus: &CorpusIndex,
        config: &SweepConfig,
    ) -> Result<SweepReport, StageError> {
        for query in queries {
            if query.status != QueryStatus::Rephrased {
                return Err(StageError::Failed {
                    stage: "label",
                    message: format!(
                        "query `{}` has status {:?}; the sweep requires rephrased records",
                        query.query_id, query.status
                    ),
                });
            }
        }
        std::fs::create_dir_all(&config.judgment_dir).map_err(|source| StageError::Io {
            context: "create judgment cache",
            path: config.judgment_dir.clone(),
            source,
        })?;

        let candidates = self.candidate_pages(queries, corpus, config)?;
        let mut grid = Vec::new();
        for (query, pages) in queries.iter().zip(&candidates) {
            for page_id in pages {
                grid.push((query, page_id.clone()));
            }
        }

        let judgments: Vec<RelevanceJudgment> = grid
            .par_iter()
            .map(|(query, page_id)| {
                let page = corpus.page(page_id).ok_or_else(|| StageError::Failed {
                    stage: "label",
                    message: format!("page `{page_id}` vanished from the corpus mid-sweep"),
                })?;
                self.judge_pair_cached(query, page, corpus.title_of(page), config)
            })
            .collect::<Result<_, _>>()?;

        let flagged_count = judgments.iter().filter(|j| j.flagged).count();
        let rate = flagged_count as f64 / judgments.len().max(1) as f64;
        if rate > config.flag_rate_limit {
            return Err(StageError::Failed {
                stage: "label",
                message: format!(
                    "{flagged_count} of {} relevance answers ({:.1}%) were unparseable, above the {:.1}% limit — the judge prompt or model is drifting",
                    judgments.len(),
                    rate * 100.0,
                    config.flag_rate_limit * 100.0
                ),
            });
        }

        let source_pages: BTreeMap<&str, &str> = queries
            .iter()
            .map(|q| (q.query_id.as_str(), q.page_id.as_str()))
            .collect();
        let mut qrels = Qrels::default();
        for query in queries {
            qrels.touch(&query.query_id);
        }
        for judgment in &judgments {
            if !judgment.relevant {
                continue;
            }
            let provenance = if source_pages.get(judgment.query_id.as_str()).copied()
                == Some(judgment.page_id.as_str())
            {
                Provenance::SourcePage
            } else {
                Provenance::SweepVerified
            };
            qrels.add(&judgment.query_id, &judgment.page_id, provenance);
        }
        Ok(SweepReport { qrels, judgment_count: judgments.len(), flagged_count })
    }

    /// The pages each query is judged against: the whole corpus, or under
    /// prescreen the top-K BM25 pages plus the query's source page (the
    /// single-positive rule is meaningless if the source is never judged).
    fn candidate_pages(
        &self,
        queries: &[QueryRecord],
        corpus: &CorpusIndex,
        config: &SweepConfig,
    ) -> Result<Vec<Vec<String>>, StageError> {
        let Some(k) = config.prescreen_k else {
            let all: Vec<String> = corpus.pages().iter().map(|p| p.page_id.clone()).collect();
            return Ok(vec![all; queries.len()]);
        };
        let retriever = Bm25Retriever::from_corpus(corpus, DEFAULT_K1, DEFAULT_B)
            .map_err(|err| StageError::Failed {
                stage: "label",
                message: format!("prescreen index build failed: {err}"),
            })?;
        let run = run_retrieval(&retriever, queries, 0, k).map_err(|err| StageError::Failed {
            stage: "label",
            message: format!("prescreen retrieval failed: {err}"),
        })?;
        Ok(queries
            .iter()
            .map(|query| {
                let mut pages: BTreeSet<String> = run
                    .results
                    .get(&query.query_id)
                    .map(|ranked| ranked.iter().map(|(p, _)| p.clone()).collect())
                    .unwrap_or_default();
                pages.insert(query.page_id.clone());
                pages.into_iter().collect()
            })
            .collect())
    }

    /// One pair through the judgment cache: load if present, else judge and
    /// store.
    fn judge_pair_cached(
        &self,
        query: &QueryRecord,
        page: &PageRecord,
        document_title: &str,
        config: &SweepConfig,
    ) -> Result<RelevanceJudgment, StageError> {
        let key = sha256_fields(&[query.query_id.as_bytes(), page.page_id.as_bytes()]);
        let path = config.judgment_dir.join(format!("{key}.json"));
        if path.exists() {
            let file = std::fs::File::open(&path).map_err(|source| StageError::Io {
                context: "read cached judgment",
                path: path.clone(),
                source,
            })?;
            let judgment: RelevanceJudgment = serde_json::from_reader(BufReader::new(file))
                .map_err(|err| StageError::Json {
                    context: "read cached judgment",
                    path: path.clone(),
                    source: err,
                })?;
            if judgment.query_id == query.query_id && judgment.page_id == page.page_id {
                return Ok(judgment);
            }
            return Err(StageError::Failed {
                stage: "label",
                message: format!(
                    "judgment cache entry {} holds ({}, {}), expected ({}, {})",
                    path.display(),
                    judgment.query_id,
                    judgment.page_id,
                    query.query_id,
                    page.page_id
                ),
            });
        }
        let judgment =
            self.judge_relevance(&query.query_id, query.original(), page, document_title)?;
        let tmp = config.judgment_dir.join(format!(".{key}.{}.tmp", std::process::id()));
        let payload = serde_json::to_vec(&judgment).map_err(|err| StageError::Json {
            context: "write judgment",
            path: path.clone(),
            source: err,
        })?;
        std::fs::write(&tmp, payload).map_err(|source| StageError::Io {
            context: "write judgment",
            path: tmp.clone(),
            source,
        })?;
        std::fs::rename(&tmp, &path).map_err(|source| StageError::Io {
            context: "store judgment",
            path: path.clone(),
            source,
        })?;
        Ok(judgment)
    }

    /// Classifies where the answer of a finalized query lives on its page.
    pub fn assign_evidence(
        &self,
        record: &QueryRecord,
        page: &PageRecord,
    ) -> Result<EvidenceOutcome, StageError> {
        if record.status < QueryStatus::LabelVerified {
            return Err(StageError::Failed {
                stage: "label",
                message: format!(
                    "query `{}` has status {:?}; evidence labels apply to finalized queries",
                    record.query_id, record.status
                ),
            });
        }
        let image = std::fs::read(&page.image_ref).map_err(|source| StageError::Io {
            context: "read page image",
            path: page.image_ref.clone(),
            source,
        })?;
        let prompt = self.evidence_template.render(&template_values!(
            ("query", record.original()),
            ("answer", &record.answer),
        ))?;
        let request = ModelRequest::with_image(tags::EVIDENCE, prompt, image);
        let response = self.gateway.complete(self.evidence_endpoint, &request)?;
        let word = response
            .text
            .lines()
            .map(str::trim)
            .find(|line| !line.is_empty())
            .unwrap_or_default()
            .split_whitespace()
            .next()
            .unwrap_or_default()
            .trim_matches(|c: char| !c.is_ascii_alphabetic());
        Ok(match EvidenceType::parse(word) {
            Some(label) => EvidenceOutcome::Label(label),
            None => EvidenceOutcome::Withheld { raw: response.text },
        })
    }
}

/// Keeps only queries whose verified positives are exactly their own source
/// page, promoting them to `LabelVerified`. Everything else lands in the
/// drop log with its reason. Pure function of its inputs: deterministic and
/// idempotent.
pub fn finalize(
    queries: Vec<QueryRecord>,
    qrels: &Qrels,
) -> (Vec<QueryRecord>, Vec<DroppedQuery>) {
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    for mut record in queries {
        let positives: Vec<String> = qrels
            .positives(&record.query_id)
            .map(|set| set.iter().cloned().collect())
            .unwrap_or_default();
        if !positives.contains(&record.page_id) {
            dropped.push(DroppedQuery {
                record,
                reason: DropReason::SourceNotVerified,
                positives,
            });
        } else if positives.len() > 1 {
            dropped.push(DroppedQuery { record, reason: DropReason::MultiPositive, positives });
        } else {
            record.status = QueryStatus::LabelVerified;
            retained.push(record);
        }
    }
    (retained, dropped)
}

/// YES/NO from the first meaningful line; anything else → (false, flagged).
fn parse_yes_no(text: &str) -> (bool, bool) {
    let word = text
        .lines()
        .map(str::trim)
        .find(|line| !line.is_empty())
        .unwrap_or_default()
        .split_whitespace()
        .next()
        .unwrap_or_default()
        .trim_matches(|c: char| !c.is_ascii_alphabetic());
    match word.to_ascii_uppercase().as_str() {
        "YES" => (true, false),
        "NO" => (false, false),
        _ => (false, true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelgate::mock::{page_token, MockBackend, MockScript};
    use crate::modelgate::EndpointKind;

    fn gateway(script: MockScript) -> Gateway {
        Gateway::new(Box::new(MockBackend::with_script(script)))
    }

    fn vlm() -> EndpointSpec {
        EndpointSpec::mock("mock-vlm", EndpointKind::Vlm)
    }

    /// A corpus whose chunk text embeds each page's mock indicator token, so
    /// BM25 can find source pages and the mock relevance judge stays
    /// consistent with hand-built queries.
    fn token_corpus(dir: &Path, docs: usize, pages_per_doc: usize) -> CorpusIndex {
        let manifest = dir.join("manifest.jsonl");
        let mut out = std::fs::File::create(&manifest).unwrap();
        for d in 0..docs {
            for p in 1..=pages_per_doc {
                let bytes = format!("corpus-image-{d}-{p}");
                let image = dir.join(format!("d{d}_p{p}.png"));
                std::fs::write(&image, &bytes).unwrap();
                let token = page_token(bytes.as_bytes());
                let chunks = dir.join(format!("d{d}_p{p}.chunks.jsonl"));
                let mut cf = std::fs::File::create(&chunks).unwrap();
                writeln!(
                    cf,
                    "{}",
                    serde_json::json!({"kind": "text",
                        "content": format!("Indicator {token}-0 has value 1234."),
                        "source": "ocr"})
                )
                .unwrap();
                writeln!(
                    out,
                    "{}",
                    serde_json::json!({
                        "doc_id": format!("doc-{d}"),
                        "title": format!("Document {d}"),
                        "collection": "test",
                        "page_number": p,
                        "image_path": format!("d{d}_p{p}.png"),
                        "chunks_path": format!("d{d}_p{p}.chunks.jsonl"),
                    })
                )
                .unwrap();
            }
        }
        CorpusIndex::ingest(&manifest).unwrap()
    }

    /// A rephrased-status query asking for one page's indicator.
    fn token_query(corpus: &CorpusIndex, n: usize, page_index: usize) -> QueryRecord {
        let page = &corpus.pages()[page_index];
        let bytes = std::fs::read(&page.image_ref).unwrap();
        let token = page_token(&bytes);
        let text = format!("What is the value of indicator {token}-0 in the report?");
        let mut record = QueryRecord::new(
            &format!("query-{n}"),
            &page.page_id,
            &text,
            &format!("Indicator {token}-0 has value 1234."),
        );
        for level in 1..=3u8 {
            record.versions.insert(level, format!("Variant {level}: {text}"));
        }
        record.status = QueryStatus::Rephrased;
        record
    }

    fn no_extras() -> MockScript {
        MockScript { extra_positive_byte: None, ..MockScript::default() }
    }

    #[test]
    fn source_page_judges_relevant_and_others_do_not() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = token_corpus(dir.path(), 1, 2);
        let gw = gateway(no_extras());
        let endpoint = vlm();
        let labeler = Labeler::new(&gw, &endpoint, &endpoint).unwrap();
        let query = token_query(&corpus, 0, 0);

        let on_source = labeler
            .judge_relevance("q", query.original(), &corpus.pages()[0], "Document 0")
            .unwrap();
        assert!(on_source.relevant);
        assert!(!on_source.flagged);

        let elsewhere = labeler
            .judge_relevance("q", query.original(), &corpus.pages()[1], "Document 0")
            .unwrap();
        assert!(!elsewhere.relevant);
    }

    #[test]
    fn unparseable_answers_are_flagged_not_relevant() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = token_corpus(dir.path(), 1, 1);
        let mut backend = MockBackend::new();
        let prompt = PromptTemplate::parse(defaults::RELEVANCE)
            .unwrap()
            .render(&template_values!(
                ("document_title", "Document 0"),
                ("query", "Is this page relevant?"),
            ))
            .unwrap();
        backend.add_fixture(&prompt, "maybe");
        let gw = Gateway::new(Box::new(backend));
        let endpoint = vlm();
        let labeler = Labeler::new(&gw, &endpoint, &endpoint).unwrap();
        let judgment = labeler
            .judge_relevance("q", "Is this page relevant?", &corpus.pages()[0], "Document 0")
            .unwrap();
        assert!(!judgment.relevant);
        assert!(judgment.flagged);
        assert_eq!(judgment.raw, "maybe");
    }

    #[test]
    fn sweep_judges_the_full_grid() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = token_corpus(dir.path(), 2, 2);
        let gw = gateway(no_extras());
        let endpoint = vlm();
        let labeler = Labeler::new(&gw, &endpoint, &endpoint).unwrap();
        let queries: Vec<QueryRecord> =
            (0..3).map(|i| token_query(&corpus, i, i % corpus.page_count())).collect();
        let config = SweepConfig::new(dir.path().join("judgments"));
        let report = labeler.sweep(&queries, &corpus, &config).unwrap();

        assert_eq!(report.judgment_count, 3 * 4);
        assert_eq!(report.flagged_count, 0);
        let cached = std::fs::read_dir(dir.path().join("judgments")).unwrap().count();
        assert_eq!(cached, 12);
        for query in &queries {
            let positives = report.qrels.positives(&query.query_id).unwrap();
            assert_eq!(positives.iter().collect::<Vec<_>>(), vec![&query.page_id]);
            assert_eq!(
                report.qrels.provenance_of(&query.query_id, &query.page_id),
                Some(Provenance::SourcePage)
            );
        }
    }

    #[test]
    fn sweep_requires_rephrased_records() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = token_corpus(dir.path(), 1, 1);
        let gw = gateway(no_extras());
        let endpoint = vlm();
        let labeler = Labeler::new(&gw, &endpoint, &endpoint).unwrap();
        let mut query = token_query(&corpus, 0, 0);
        query.status = QueryStatus::Pending;
        let config = SweepConfig::new(dir.path().join("judgments"));
        let err = labeler.sweep(&[query], &corpus, &config).unwrap_err();
        assert!(err.to_string().contains("rephrased"));
    }

    #[test]
    fn resumed_sweep_reuses_every_cached_judgment() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = token_corpus(dir.path(), 2, 2);
        let endpoint = vlm();
        let queries: Vec<QueryRecord> = (0..2).map(|i| token_query(&corpus, i, i)).collect();
        let config = SweepConfig::new(dir.path().join("judgments"));

        let first_gateway = gateway(no_extras());
        let labeler = Labeler::new(&first_gateway, &endpoint, &endpoint).unwrap();
        let first = labeler.sweep(&queries, &corpus, &config).unwrap();
        assert_eq!(first_gateway.backend_calls(), 8);

        let second_gateway = gateway(no_extras());
        let labeler = Labeler::new(&second_gateway, &endpoint, &endpoint).unwrap();
        let second = labeler.sweep(&queries, &corpus, &config).unwrap();
        assert_eq!(second_gateway.backend_calls(), 0, "resume must not re-query");
        assert_eq!(second.qrels, first.qrels);
    }

    #[test]
    fn excessive_flag_rate_fails_the_sweep() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = token_corpus(dir.path(), 1, 2);
        let query = token_query(&corpus, 0, 0);
        // Override the (title, query) relevance prompt with gibberish; both
        // pages share the title, so every judgment in the sweep is flagged.
        let mut backend = MockBackend::with_script(no_extras());
        let prompt = PromptTemplate::parse(defaults::RELEVANCE)
            .unwrap()
            .render(&template_values!(
                ("document_title", "Document 0"),
                ("query", query.original()),
            ))
            .unwrap();
        backend.add_fixture(&prompt, "It depends.");
        let gw = Gateway::new(Box::new(backend));
        let endpoint = vlm();
        let labeler = Labeler::new(&gw, &endpoint, &endpoint).unwrap();
        let config = SweepConfig::new(dir.path().join("judgments"));
        let err = labeler.sweep(&[query], &corpus, &config).unwrap_err();
        assert!(err.to_string().contains("unparseable"));
    }

    #[test]
    fn prescreen_limits_the_grid_but_keeps_the_source() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = token_corpus(dir.path(), 2, 3);
        let gw = gateway(no_extras());
        let endpoint = vlm();
        let labeler = Labeler::new(&gw, &endpoint, &endpoint).unwrap();
        let queries: Vec<QueryRecord> = (0..2).map(|i| token_query(&corpus, i, i)).collect();
        let mut config = SweepConfig::new(dir.path().join("judgments"));
        config.prescreen_k = Some(1);
        let report = labeler.sweep(&queries, &corpus, &config).unwrap();

        assert!(report.judgment_count < queries.len() * corpus.page_count());
        for query in &queries {
            assert!(report.qrels.positives(&query.query_id).unwrap().contains(&query.page_id));
        }
    }

    #[test]
    fn finalize_applies_the_single_positive_rule() {
        let queries: Vec<QueryRecord> = ["qa", "qb", "qc", "qd"]
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let mut q = QueryRecord::new(id, &format!("p{i}"), "text?", "answer");
                for level in 1..=3 {
                    q.versions.insert(level, format!("v{level}"));
                }
                q.status = QueryStatus::Rephrased;
                q
            })
            .collect();
        let mut qrels = Qrels::default();
        qrels.add("qa", "p0", Provenance::SourcePage);
        qrels.add("qb", "p1", Provenance::SourcePage);
        qrels.add("qb", "p9", Provenance::SweepVerified);
        qrels.add("qc", "p9", Provenance::SweepVerified);
        qrels.touch("qd");

        let (retained, dropped) = finalize(queries.clone(), &qrels);
        assert_eq!(retained.len(), 1);
        assert_eq!(retained[0].query_id, "qa");
        assert_eq!(retained[0].status, QueryStatus::LabelVerified);

        let reasons: BTreeMap<&str, DropReason> =
            dropped.iter().map(|d| (d.record.query_id.as_str(), d.reason)).collect();
        assert_eq!(reasons["qb"], DropReason::MultiPositive);
        assert_eq!(reasons["qc"], DropReason::SourceNotVerified);
        assert_eq!(reasons["qd"], DropReason::SourceNotVerified);

        // Deterministic and idempotent on the same inputs.
        let (retained_again, _) = finalize(queries, &qrels);
        assert_eq!(retained_again, retained);
    }

    #[test]
    fn qrels_round_trip_with_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let mut qrels = Qrels::default();
        qrels.add("q1", "p1", Provenance::SourcePage);
        qrels.add("q1", "p2", Provenance::SweepVerified);
        qrels.add("q2", "p3", Provenance::SourcePage);
        let qrels_path = dir.path().join("qrels.txt");
        let side_path = dir.path().join("qrels.provenance.jsonl");
        qrels.write(&qrels_path, &side_path).unwrap();

        let text = std::fs::read_to_string(&qrels_path).unwrap();
        assert_eq!(text, "q1 p1 1\nq1 p2 1\nq2 p3 1\n");

        let loaded = Qrels::read(&qrels_path, Some(&side_path)).unwrap();
        assert_eq!(loaded.entries(), qrels.entries());
        assert_eq!(loaded.provenance_of("q1", "p2"), Some(Provenance::SweepVerified));

        // Entries alone load fine without the sidecar.
        let bare = Qrels::read(&qrels_path, None).unwrap();
        assert_eq!(bare.entries(), qrels.entries());
        assert_eq!(bare.provenance_of("q1", "p1"), None);
    }

    #[test]
    fn qrels_reject_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qrels.txt");
        std::fs::write(&path, "q1 p1\n").unwrap();
        assert!(Qrels::read(&path, None).is_err());
        std::fs::write(&path, "q1 p1 2\n").unwrap();
        assert!(Qrels::read(&path, None).is_err());
    }

    #[test]
    fn evidence_labels_come_from_the_classifier_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = token_corpus(dir.path(), 1, 1);
        let gw = gateway(no_extras());
        let endpoint = vlm();
        let labeler = Labeler::new(&gw, &endpoint, &endpoint).unwrap();
        let mut query = token_query(&corpus, 0, 0);
        query.status = QueryStatus::LabelVerified;
        let outcome = labeler.assign_evidence(&query, &corpus.pages()[0]).unwrap();
        assert!(matches!(outcome, EvidenceOutcome::Label(_)));
    }

    #[test]
    fn out_of_vocabulary_evidence_is_withheld() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = token_corpus(dir.path(), 1, 1);
        let mut query = token_query(&corpus, 0, 0);
        query.status = QueryStatus::LabelVerified;
        let mut backend = MockBackend::new();
        let prompt = PromptTemplate::parse(defaults::EVIDENCE)
            .unwrap()
            .render(&template_values!(
                ("query", query.original()),
                ("answer", &query.answer),
            ))
            .unwrap();
        backend.add_fixture(&prompt, "CHART");
        let gw = Gateway::new(Box::new(backend));
        let endpoint = vlm();
        let labeler = Labeler::new(&gw, &endpoint, &endpoint).unwrap();
        let outcome = labeler.assign_evidence(&query, &corpus.pages()[0]).unwrap();
        assert_eq!(outcome, EvidenceOutcome::Withheld { raw: "CHART".to_string() });
    }

    #[test]
    fn evidence_requires_a_finalized_query() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = token_corpus(dir.path(), 1, 1);
        let gw = gateway(no_extras());
        let endpoint = vlm();
        let labeler = Labeler::new(&gw, &endpoint, &endpoint).unwrap();
        let query = token_query(&corpus, 0, 0); // status = Rephrased
        let err = labeler.assign_evidence(&query, &corpus.pages()[0]).unwrap_err();
        assert!(err.to_string().contains("finalized"));
    }

    #[test]
    fn yes_no_parsing_is_conservative() {
        assert_eq!(parse_yes_no("YES"), (true, false));
        assert_eq!(parse_yes_no("yes."), (true, false));
        assert_eq!(parse_yes_no("\n NO \n"), (false, false));
        assert_eq!(parse_yes_no("maybe"), (false, true));
        assert_eq!(parse_yes_no(""), (false, true));
    }
}
