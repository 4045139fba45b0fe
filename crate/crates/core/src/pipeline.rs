//! Stage orchestration: each pipeline step as a resumable, receipt-gated
//! command over one artifact directory.
//!
//! A [`Pipeline`] owns the gateway, endpoint specs, and prompt templates for
//! one run configuration. Every `run_*` method follows the same shape: take
//! the output-directory lock, check that upstream artifacts exist (an
//! out-of-order invocation is an error, not an implicit run of the missing
//! stage), skip as a no-op when the stage's receipt still matches disk, and
//! otherwise do the work and write a fresh receipt. Artifacts are plain
//! files, so any stage can be re-run or inspected with standard tools.
//!
//! Artifact map (all under the configured output directory):
//!
//! | stage     | writes |
//! |-----------|--------|
//! | ingest    | `corpus.jsonl`, `stamped/` |
//! | generate  | `candidates.jsonl`, `parse_diagnostics.jsonl` |
//! | verify    | `accepted.jsonl`, `rejections.jsonl` |
//! | rephrase  | `queries.jsonl`, `rephrase_discards.jsonl` |
//! | label     | `judgments/` (cache), `qrels.txt`, `qrels.provenance.jsonl`, `queries_final.jsonl`, `label_drops.jsonl`, `evidence_withheld.jsonl` |
//! | build     | `bundle/` |
//! | triplets  | `triplets.jsonl` |
//! | augment   | `triplets_rephrased.jsonl` |
//! | evaluate  | `runs/`, `reports/` |
//!
//! `report` and `stats` are read-only renderers over existing artifacts and
//! leave no receipts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::benchio::{
    emit_triplets, read_bundle, read_triplets, rephrase_training_set, write_bundle,
    write_triplets, BenchmarkBundle, BundleMeta, QUERIES_FORMAT,
};
use crate::config::{GatewayBackend, PipelineConfig, KNOWN_RETRIEVERS};
use crate::corpus::stamp::{stamp_title, StampOptions};
use crate::corpus::{check_header, corpus_stats, header_line, CorpusIndex};
use crate::digest::short_id;
use crate::labeling::{self, DroppedQuery, EvidenceOutcome, Labeler, Qrels, SweepConfig};
use crate::metrics::{self, merge_reports, render_table, CellRecord, MetricReport};
use crate::modelgate::http::HttpBackend;
use crate::modelgate::mock::MockBackend;
use crate::modelgate::{EndpointSpec, Gateway, ResponseCache};
use crate::querygen::{FilterVerdict, ParseDiagnostic, QAPair, QueryGenerator};
use crate::rephrase::{QueryRecord, QueryStatus, RephraseOutcome, Rephraser};
use crate::retrievers::{
    run_retrieval, tokenize, Bm25Retriever, DenseRetriever, EmbedUnit, EmbeddingSet,
    MaxSimRetriever, RetrievalRun, Retriever, RetrieverError, DEFAULT_B, DEFAULT_K1,
};
use crate::stage::{require_input, LockGuard, Receipt, StageError};
use crate::template::{defaults, PromptTemplate};

/// Artifact file names, relative to the output directory.
pub mod artifacts {
    pub const CORPUS: &str = "corpus.jsonl";
    pub const STAMPED_DIR: &str = "stamped";
    pub const CANDIDATES: &str = "candidates.jsonl";
    pub const PARSE_DIAGNOSTICS: &str = "parse_diagnostics.jsonl";
    pub const ACCEPTED: &str = "accepted.jsonl";
    pub const REJECTIONS: &str = "rejections.jsonl";
    pub const QUERIES: &str = "queries.jsonl";
    pub const REPHRASE_DISCARDS: &str = "rephrase_discards.jsonl";
    pub const JUDGMENTS_DIR: &str = "judgments";
    pub const QRELS: &str = "qrels.txt";
    pub const QRELS_PROVENANCE: &str = "qrels.provenance.jsonl";
    pub const QUERIES_FINAL: &str = "queries_final.jsonl";
    pub const LABEL_DROPS: &str = "label_drops.jsonl";
    pub const EVIDENCE_WITHHELD: &str = "evidence_withheld.jsonl";
    pub const BUNDLE_DIR: &str = "bundle";
    pub const TRIPLETS: &str = "triplets.jsonl";
    pub const TRIPLETS_REPHRASED: &str = "triplets_rephrased.jsonl";
    pub const RUNS_DIR: &str = "runs";
    pub const REPORTS_DIR: &str = "reports";
    pub const METRICS_TABLE: &str = "metrics.txt";
    pub const METRIC_CELLS: &str = "cells.jsonl";
}

const CANDIDATES_FORMAT: &str = "ragbench/candidates";
const DIAGNOSTICS_FORMAT: &str = "ragbench/diagnostics";
const ACCEPTED_FORMAT: &str = "ragbench/accepted";
const REJECTIONS_FORMAT: &str = "ragbench/rejections";
const DISCARDS_FORMAT: &str = "ragbench/discards";
const DROPS_FORMAT: &str = "ragbench/drops";
const WITHHELD_FORMAT: &str = "ragbench/withheld";
const CELLS_FORMAT: &str = "ragbench/cells";

/// How a stage invocation ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    /// The stage's receipt still matches disk; nothing was re-run.
    Skipped,
    /// The stage ran and wrote its artifacts.
    Completed,
}

/// A rejected candidate with the verdict that rejected it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rejection {
    pub pair: QAPair,
    pub verdict: FilterVerdict,
}

/// A query discarded because some level failed rephrase verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Discard {
    pub record: QueryRecord,
    pub level: u8,
    pub attempts: u32,
}

/// A query whose evidence classification was unparseable; the label is
/// withheld and the raw model output kept for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WithheldEvidence {
    pub query_id: String,
    pub raw: String,
}

/// Which retrievers and rephrasing levels an evaluation covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalScope {
    pub levels: Vec<u8>,
    pub retrievers: Vec<String>,
    /// Candidate-list depth per query.
    pub k: usize,
}

impl EvalScope {
    pub fn validate(&self) -> Result<(), StageError> {
        if self.levels.is_empty() {
            return Err(StageError::Config("evaluation needs at least one level".into()));
        }
        for &level in &self.levels {
            if level > 3 {
                return Err(StageError::Config(format!(
                    "rephrasing level must be 0–3, got {level}"
                )));
            }
        }
        let distinct: BTreeSet<u8> = self.levels.iter().copied().collect();
        if distinct.len() != self.levels.len() {
            return Err(StageError::Config("evaluation levels repeat".into()));
        }
        if self.retrievers.is_empty() {
            return Err(StageError::Config("evaluation needs at least one retriever".into()));
        }
        for name in &self.retrievers {
            if !KNOWN_RETRIEVERS.contains(&name.as_str()) {
                return Err(StageError::Config(format!(
                    "unknown retriever `{name}` (known: {})",
                    KNOWN_RETRIEVERS.join(", ")
                )));
            }
        }
        if self.k == 0 {
            return Err(StageError::Config("evaluation k must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Prompt templates for every model-facing role, override-resolved.
struct Templates {
    query_gen: PromptTemplate,
    query_verify: PromptTemplate,
    rephrase_l1: PromptTemplate,
    rephrase_l2: PromptTemplate,
    rephrase_l3: PromptTemplate,
    rephrase_verify: PromptTemplate,
    relevance: PromptTemplate,
    evidence: PromptTemplate,
}

/// Endpoint specs converted once from the config.
struct EndpointSpecs {
    query_gen: EndpointSpec,
    verify: EndpointSpec,
    rephrase: EndpointSpec,
    relevance: EndpointSpec,
    caption: EndpointSpec,
    embed: EndpointSpec,
}

/// One configured run: gateway, endpoints, templates, and the stage methods.
pub struct Pipeline {
    config: PipelineConfig,
    gateway: Gateway,
    specs: EndpointSpecs,
    templates: Templates,
}

/// Maps any displayable stage-internal error onto [`StageError::Failed`].
fn stage_fail<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> StageError {
    move |err| StageError::Failed { stage, message: err.to_string() }
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, StageError> {
        config.validate()?;
        let templates = load_templates(&config)?;
        let gateway = build_gateway(&config)?;
        let specs = EndpointSpecs {
            query_gen: config.endpoints.query_gen.to_spec(),
            verify: config.endpoints.verify.to_spec(),
            rephrase: config.endpoints.rephrase.to_spec(),
            relevance: config.endpoints.relevance.to_spec(),
            caption: config.endpoints.caption.to_spec(),
            embed: config.endpoints.embed.to_spec(),
        };
        Ok(Self { config, gateway, specs, templates })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// The shared gateway (exposed for call-count introspection).
    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Absolute path of a named artifact inside the output directory.
    pub fn artifact(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    /// The evaluation scope implied by the config alone.
    pub fn default_scope(&self) -> EvalScope {
        EvalScope {
            levels: vec![0, 1, 2, 3],
            retrievers: self.config.evaluate.retrievers.clone(),
            k: self.config.evaluate.k,
        }
    }

    /// Digests of the active prompt templates, by role; recorded in bundle
    /// metadata so result consumers can detect prompt drift.
    pub fn prompt_digests(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("query_gen".to_string(), self.templates.query_gen.digest()),
            ("query_verify".to_string(), self.templates.query_verify.digest()),
            ("rephrase_l1".to_string(), self.templates.rephrase_l1.digest()),
            ("rephrase_l2".to_string(), self.templates.rephrase_l2.digest()),
            ("rephrase_l3".to_string(), self.templates.rephrase_l3.digest()),
            ("rephrase_verify".to_string(), self.templates.rephrase_verify.digest()),
            ("relevance".to_string(), self.templates.relevance.digest()),
            ("evidence".to_string(), self.templates.evidence.digest()),
        ])
    }

    /// Shared stage harness: lock, ordering check, receipt skip, body,
    /// receipt write.
    ///
    /// `required` pairs each input artifact with the stage that produces it
    /// (for the ordering-violation message); `extra_inputs` are additional
    /// receipt inputs that need no ordering check (e.g. the external corpus
    /// manifest, whose existence config validation already guarantees).
    fn run_stage(
        &self,
        stage: &'static str,
        force: bool,
        required: &[(&'static str, &Path)],
        extra_inputs: &[&Path],
        outputs: &[&Path],
        body: impl FnOnce() -> Result<(), StageError>,
    ) -> Result<StageOutcome, StageError> {
        let out_dir = &self.config.output_dir;
        let _lock = LockGuard::acquire(out_dir)?;
        for (produced_by, artifact) in required {
            require_input(stage, produced_by, artifact)?;
        }
        let config_digest = self.config.digest();
        if !force {
            if let Some(receipt) = Receipt::load(out_dir, stage)? {
                if receipt.is_current(out_dir, &config_digest) {
                    return Ok(StageOutcome::Skipped);
                }
            }
        }
        body()?;
        let mut inputs: Vec<&Path> = required.iter().map(|(_, path)| *path).collect();
        inputs.extend_from_slice(extra_inputs);
        Receipt::capture(stage, &config_digest, out_dir, &inputs, outputs)?.write(out_dir)?;
        Ok(StageOutcome::Completed)
    }

    /// Ingest: validate the manifest, stamp every page image with its
    /// document title, and write the canonical corpus file.
    pub fn run_ingest(&self, force: bool) -> Result<StageOutcome, StageError> {
        let corpus_path = self.artifact(artifacts::CORPUS);
        let stamped_dir = self.artifact(artifacts::STAMPED_DIR);
        self.run_stage(
            "ingest",
            force,
            &[],
            &[&self.config.corpus_manifest],
            &[&corpus_path, &stamped_dir],
            || {
                let corpus =
                    CorpusIndex::ingest(&self.config.corpus_manifest).map_err(stage_fail("ingest"))?;
                fs::create_dir_all(&stamped_dir)
                    .map_err(|source| StageError::io("create stamped dir", &stamped_dir, source))?;
                let pages = corpus
                    .pages()
                    .par_iter()
                    .map(|page| {
                        if page.stamped {
                            return Ok(page.clone());
                        }
                        let options = StampOptions {
                            band_frac: self.config.ingest.band_frac,
                            output_path: stamped_dir.join(format!("{}.png", page.page_id)),
                        };
                        stamp_title(page, corpus.title_of(page), &options)
                            .map_err(stage_fail("ingest"))
                    })
                    .collect::<Result<Vec<_>, StageError>>()?;
                corpus.with_pages(pages).save(&corpus_path).map_err(stage_fail("ingest"))
            },
        )
    }

    /// Generate: ask the VLM for candidate query–answer pairs per page.
    pub fn run_generate(&self, force: bool) -> Result<StageOutcome, StageError> {
        let corpus_path = self.artifact(artifacts::CORPUS);
        let candidates_path = self.artifact(artifacts::CANDIDATES);
        let diagnostics_path = self.artifact(artifacts::PARSE_DIAGNOSTICS);
        self.run_stage(
            "generate",
            force,
            &[("ingest", &corpus_path)],
            &[],
            &[&candidates_path, &diagnostics_path],
            || {
                let corpus = CorpusIndex::load(&corpus_path).map_err(stage_fail("generate"))?;
                let generator =
                    QueryGenerator::new(&self.gateway, &self.specs.query_gen, &self.specs.verify)?
                        .with_generate_template(self.templates.query_gen.clone())
                        .with_verify_template(self.templates.query_verify.clone());
                let n = self.config.generate.queries_per_page;
                let per_page = corpus
                    .pages()
                    .par_iter()
                    .map(|page| generator.generate_queries(page, corpus.title_of(page), n))
                    .collect::<Result<Vec<_>, StageError>>()?;

                let mut candidates: Vec<QAPair> = Vec::new();
                let mut diagnostics: Vec<ParseDiagnostic> = Vec::new();
                for generated in per_page {
                    candidates.extend(generated.pairs);
                    diagnostics.extend(generated.diagnostics);
                }
                write_records(&candidates_path, CANDIDATES_FORMAT, &candidates)?;
                write_records(&diagnostics_path, DIAGNOSTICS_FORMAT, &diagnostics)
            },
        )
    }

    /// Verify: run the realism filter over every candidate, splitting the
    /// pool into accepted pairs and an audit log of rejections.
    pub fn run_verify(&self, force: bool) -> Result<StageOutcome, StageError> {
        let candidates_path = self.artifact(artifacts::CANDIDATES);
        let accepted_path = self.artifact(artifacts::ACCEPTED);
        let rejections_path = self.artifact(artifacts::REJECTIONS);
        self.run_stage(
            "verify",
            force,
            &[("generate", &candidates_path)],
            &[],
            &[&accepted_path, &rejections_path],
            || {
                let candidates: Vec<QAPair> = read_records(&candidates_path, CANDIDATES_FORMAT)?;
                let generator =
                    QueryGenerator::new(&self.gateway, &self.specs.query_gen, &self.specs.verify)?
                        .with_verify_template(self.templates.query_verify.clone());
                let (accepted, rejected) = generator.filter_pool(candidates)?;
                let rejections: Vec<Rejection> = rejected
                    .into_iter()
                    .map(|(pair, verdict)| Rejection { pair, verdict })
                    .collect();
                write_records(&accepted_path, ACCEPTED_FORMAT, &accepted)?;
                write_records(&rejections_path, REJECTIONS_FORMAT, &rejections)
            },
        )
    }

    /// Rephrase: expand every accepted pair into levels 0–3 with per-level
    /// verification, assigning content-derived query ids.
    pub fn run_rephrase(&self, force: bool) -> Result<StageOutcome, StageError> {
        let accepted_path = self.artifact(artifacts::ACCEPTED);
        let queries_path = self.artifact(artifacts::QUERIES);
        let discards_path = self.artifact(artifacts::REPHRASE_DISCARDS);
        self.run_stage(
            "rephrase",
            force,
            &[("verify", &accepted_path)],
            &[],
            &[&queries_path, &discards_path],
            || {
                let accepted: Vec<QAPair> = read_records(&accepted_path, ACCEPTED_FORMAT)?;
                let rephraser = self.rephraser()?;
                let policy = self.config.rephrase.policy;
                let outcomes = accepted
                    .par_iter()
                    .map(|pair| {
                        let query_id = short_id(&[&pair.page_id, &pair.query]);
                        let record =
                            QueryRecord::new(&query_id, &pair.page_id, &pair.query, &pair.answer);
                        rephraser.expand_query(record, policy)
                    })
                    .collect::<Result<Vec<_>, StageError>>()?;

                let mut queries: Vec<QueryRecord> = Vec::new();
                let mut discards: Vec<Discard> = Vec::new();
                for outcome in outcomes {
                    match outcome {
                        RephraseOutcome::Expanded(record) => queries.push(record),
                        RephraseOutcome::Discarded { record, level, attempts } => {
                            discards.push(Discard { record, level, attempts });
                        }
                    }
                }
                let mut ids = BTreeSet::new();
                for record in &queries {
                    if !ids.insert(record.query_id.as_str()) {
                        return Err(StageError::Failed {
                            stage: "rephrase",
                            message: format!("duplicate query id `{}`", record.query_id),
                        });
                    }
                }
                write_records(&queries_path, QUERIES_FORMAT, &queries)?;
                write_records(&discards_path, DISCARDS_FORMAT, &discards)
            },
        )
    }

    /// Label: exhaustive relevance sweep, single-positive finalization, and
    /// evidence-type classification of the survivors.
    ///
    /// The sweep's per-pair judgment cache lives in `judgments/`; it is
    /// working state rather than a deliverable, so it is deliberately left
    /// out of the receipt — an interrupted sweep resumes from it instead of
    /// re-calling the judge.
    pub fn run_label(&self, force: bool) -> Result<StageOutcome, StageError> {
        let corpus_path = self.artifact(artifacts::CORPUS);
        let queries_path = self.artifact(artifacts::QUERIES);
        let qrels_path = self.artifact(artifacts::QRELS);
        let provenance_path = self.artifact(artifacts::QRELS_PROVENANCE);
        let final_path = self.artifact(artifacts::QUERIES_FINAL);
        let drops_path = self.artifact(artifacts::LABEL_DROPS);
        let withheld_path = self.artifact(artifacts::EVIDENCE_WITHHELD);
        self.run_stage(
            "label",
            force,
            &[("rephrase", &queries_path), ("ingest", &corpus_path)],
            &[],
            &[&qrels_path, &provenance_path, &final_path, &drops_path, &withheld_path],
            || {
                let corpus = CorpusIndex::load(&corpus_path).map_err(stage_fail("label"))?;
                let queries: Vec<QueryRecord> = read_records(&queries_path, QUERIES_FORMAT)?;
                let labeler =
                    Labeler::new(&self.gateway, &self.specs.relevance, &self.specs.caption)?
                        .with_relevance_template(self.templates.relevance.clone())
                        .with_evidence_template(self.templates.evidence.clone());
                let sweep_config = SweepConfig {
                    judgment_dir: self.artifact(artifacts::JUDGMENTS_DIR),
                    prescreen_k: self
                        .config
                        .labeling
                        .prescreen
                        .then_some(self.config.labeling.prescreen_k),
                    flag_rate_limit: self.config.labeling.flag_rate_limit,
                };
                let report = labeler.sweep(&queries, &corpus, &sweep_config)?;
                let (mut retained, dropped) = labeling::finalize(queries, &report.qrels);

                let outcomes = retained
                    .par_iter()
                    .map(|record| {
                        let page = corpus.page(&record.page_id).ok_or_else(|| {
                            StageError::Failed {
                                stage: "label",
                                message: format!(
                                    "query `{}` references unknown page `{}`",
                                    record.query_id, record.page_id
                                ),
                            }
                        })?;
                        labeler.assign_evidence(record, page)
                    })
                    .collect::<Result<Vec<_>, StageError>>()?;
                let mut withheld: Vec<WithheldEvidence> = Vec::new();
                for (record, outcome) in retained.iter_mut().zip(outcomes) {
                    match outcome {
                        EvidenceOutcome::Label(label) => record.evidence = Some(label),
                        EvidenceOutcome::Withheld { raw } => withheld.push(WithheldEvidence {
                            query_id: record.query_id.clone(),
                            raw,
                        }),
                    }
                }

                let qrels = report.qrels.subset(retained.iter().map(|r| r.query_id.as_str()));
                qrels.write(&qrels_path, &provenance_path)?;
                write_records(&final_path, QUERIES_FORMAT, &retained)?;
                write_records::<DroppedQuery>(&drops_path, DROPS_FORMAT, &dropped)?;
                write_records(&withheld_path, WITHHELD_FORMAT, &withheld)
            },
        )
    }

    /// Build: assemble and validate the benchmark bundle directory.
    pub fn run_build(&self, force: bool) -> Result<StageOutcome, StageError> {
        let corpus_path = self.artifact(artifacts::CORPUS);
        let final_path = self.artifact(artifacts::QUERIES_FINAL);
        let qrels_path = self.artifact(artifacts::QRELS);
        let provenance_path = self.artifact(artifacts::QRELS_PROVENANCE);
        let bundle_dir = self.artifact(artifacts::BUNDLE_DIR);
        self.run_stage(
            "build",
            force,
            &[
                ("label", &final_path),
                ("label", &qrels_path),
                ("ingest", &corpus_path),
            ],
            &[],
            &[&bundle_dir],
            || {
                let corpus = CorpusIndex::load(&corpus_path).map_err(stage_fail("build"))?;
                let mut queries: Vec<QueryRecord> = read_records(&final_path, QUERIES_FORMAT)?;
                for record in &mut queries {
                    record.status = QueryStatus::Final;
                }
                let qrels = Qrels::read(&qrels_path, Some(&provenance_path))?;
                let meta = BundleMeta::capture(
                    &corpus,
                    &queries,
                    self.config.seed,
                    self.config.endpoints.identities(),
                    self.prompt_digests(),
                );
                let bundle = BenchmarkBundle { corpus, queries, qrels, meta };
                write_bundle(&bundle, &bundle_dir)
            },
        )
    }

    /// Triplets: emit the (query, positive page, answer) training view of
    /// the bundle.
    pub fn run_triplets(&self, force: bool) -> Result<StageOutcome, StageError> {
        let bundle_dir = self.artifact(artifacts::BUNDLE_DIR);
        let triplets_path = self.artifact(artifacts::TRIPLETS);
        self.run_stage(
            "triplets",
            force,
            &[("build", &bundle_dir)],
            &[],
            &[&triplets_path],
            || {
                let bundle = read_bundle(&bundle_dir)?;
                let triplets = emit_triplets(&bundle)?;
                write_triplets(&triplets_path, &triplets)
            },
        )
    }

    /// Augment: rephrase a seeded random share of the triplets, retaining
    /// originals whenever rephrasing or verification fails.
    pub fn run_augment(&self, force: bool) -> Result<StageOutcome, StageError> {
        let triplets_path = self.artifact(artifacts::TRIPLETS);
        let rephrased_path = self.artifact(artifacts::TRIPLETS_REPHRASED);
        self.run_stage(
            "augment",
            force,
            &[("triplets", &triplets_path)],
            &[],
            &[&rephrased_path],
            || {
                let triplets = read_triplets(&triplets_path)?;
                let rephraser = self.rephraser()?;
                let augmented = rephrase_training_set(
                    &triplets,
                    self.config.augment.fraction,
                    &rephraser,
                    self.config.seed,
                )?;
                write_triplets(&rephrased_path, &augmented)
            },
        )
    }

    /// Evaluate: score the bundle with each retriever at each level, write
    /// run files, and render the metric report.
    pub fn run_evaluate(&self, force: bool, scope: &EvalScope) -> Result<StageOutcome, StageError> {
        scope.validate()?;
        let bundle_dir = self.artifact(artifacts::BUNDLE_DIR);
        let runs_dir = self.artifact(artifacts::RUNS_DIR);
        let reports_dir = self.artifact(artifacts::REPORTS_DIR);
        self.run_stage(
            "evaluate",
            force,
            &[("build", &bundle_dir)],
            &[],
            &[&runs_dir, &reports_dir],
            || {
                let bundle = read_bundle(&bundle_dir)?;
                fs::create_dir_all(&runs_dir)
                    .map_err(|source| StageError::io("create runs dir", &runs_dir, source))?;
                fs::create_dir_all(&reports_dir)
                    .map_err(|source| StageError::io("create reports dir", &reports_dir, source))?;

                let mut reports: Vec<MetricReport> = Vec::new();
                for name in &scope.retrievers {
                    let retriever = self.build_retriever(name, &bundle.corpus)?;
                    let mut per_level: Vec<MetricReport> = Vec::new();
                    for &level in &scope.levels {
                        let run =
                            run_retrieval(retriever.as_ref(), &bundle.queries, level, scope.k)
                                .map_err(stage_fail("evaluate"))?;
                        run.write(&runs_dir.join(run_file_name(name, level)))
                            .map_err(stage_fail("evaluate"))?;
                        per_level.push(
                            metrics::evaluate(&run, &bundle.qrels, &bundle.queries)
                                .map_err(stage_fail("evaluate"))?,
                        );
                    }
                    reports.push(merge_reports(per_level).map_err(stage_fail("evaluate"))?);
                }

                let table_path = reports_dir.join(artifacts::METRICS_TABLE);
                fs::write(&table_path, render_table(&reports))
                    .map_err(|source| StageError::io("write metrics table", &table_path, source))?;
                let cells: Vec<CellRecord> =
                    reports.iter().flat_map(MetricReport::to_cells).collect();
                write_records(&reports_dir.join(artifacts::METRIC_CELLS), CELLS_FORMAT, &cells)
            },
        )
    }

    /// Renders the metric table from existing run files, optionally filtered
    /// to one level or one retriever. Read-only: no lock, no receipt.
    pub fn render_report(
        &self,
        level: Option<u8>,
        retriever: Option<&str>,
    ) -> Result<String, StageError> {
        let bundle_dir = self.artifact(artifacts::BUNDLE_DIR);
        let runs_dir = self.artifact(artifacts::RUNS_DIR);
        require_input("report", "build", &bundle_dir)?;
        require_input("report", "evaluate", &runs_dir)?;
        let bundle = read_bundle(&bundle_dir)?;

        let mut run_files: Vec<(String, u8, PathBuf)> = Vec::new();
        let entries = fs::read_dir(&runs_dir)
            .map_err(|source| StageError::io("list runs dir", &runs_dir, source))?;
        for entry in entries {
            let entry =
                entry.map_err(|source| StageError::io("list runs dir", &runs_dir, source))?;
            let path = entry.path();
            let Some((name, file_level)) = parse_run_name(&path) else { continue };
            if level.is_some_and(|wanted| wanted != file_level) {
                continue;
            }
            if retriever.is_some_and(|wanted| wanted != name) {
                continue;
            }
            run_files.push((name, file_level, path));
        }
        if run_files.is_empty() {
            return Err(StageError::Failed {
                stage: "report",
                message: format!("no run files in {} match the filters", runs_dir.display()),
            });
        }
        run_files.sort();

        let mut by_retriever: BTreeMap<String, Vec<MetricReport>> = BTreeMap::new();
        for (name, file_level, path) in run_files {
            let run = RetrievalRun::read(&path, file_level).map_err(stage_fail("report"))?;
            let report = metrics::evaluate(&run, &bundle.qrels, &bundle.queries)
                .map_err(stage_fail("report"))?;
            by_retriever.entry(name).or_default().push(report);
        }
        let merged = by_retriever
            .into_values()
            .map(|reports| merge_reports(reports).map_err(stage_fail("report")))
            .collect::<Result<Vec<_>, StageError>>()?;
        Ok(render_table(&merged))
    }

    /// Renders per-collection corpus statistics. Prefers the ingested corpus
    /// artifact; falls back to the raw manifest when ingest has not run.
    pub fn render_stats(&self) -> Result<String, StageError> {
        let corpus_path = self.artifact(artifacts::CORPUS);
        let corpus = if corpus_path.is_file() {
            CorpusIndex::load(&corpus_path).map_err(stage_fail("stats"))?
        } else {
            CorpusIndex::ingest(&self.config.corpus_manifest).map_err(stage_fail("stats"))?
        };
        Ok(corpus_stats(&corpus).render())
    }

    /// The rephrasing engine under this run's templates and retry budget.
    fn rephraser(&self) -> Result<Rephraser<'_>, StageError> {
        Ok(
            Rephraser::new(&self.gateway, &self.specs.rephrase, &self.specs.verify)?
                .with_level_templates([
                    self.templates.rephrase_l1.clone(),
                    self.templates.rephrase_l2.clone(),
                    self.templates.rephrase_l3.clone(),
                ])
                .with_verify_template(self.templates.rephrase_verify.clone())
                .with_retries(self.config.rephrase.retries),
        )
    }

    /// Constructs one retrieval backend over the bundle corpus.
    ///
    /// Embedding-based retrievers encode chunk text through the embed
    /// endpoint: dense uses one vector per chunk max-pooled to pages; maxsim
    /// treats each page as the list of its chunk vectors and each query as
    /// the list of its token vectors (late interaction). Both therefore
    /// require chunk text on every page.
    fn build_retriever<'a>(
        &'a self,
        name: &str,
        corpus: &CorpusIndex,
    ) -> Result<Box<dyn Retriever + 'a>, StageError> {
        let fail = stage_fail("evaluate");
        match name {
            "bm25" => {
                let retriever =
                    Bm25Retriever::from_corpus(corpus, DEFAULT_K1, DEFAULT_B).map_err(fail)?;
                Ok(Box::new(retriever))
            }
            "dense" => {
                let (chunk_ids, chunk_pages, vectors) = self.embed_chunks(corpus)?;
                let dim = vectors[0].len();
                let mut set = EmbeddingSet::new(EmbedUnit::Chunk, dim, false);
                for (chunk_id, vector) in chunk_ids.iter().zip(vectors) {
                    set.insert(chunk_id, vec![vector]).map_err(&fail)?;
                }
                let chunk_to_page =
                    chunk_ids.into_iter().zip(chunk_pages).collect::<std::collections::HashMap<_, _>>();
                let pages: Vec<String> =
                    corpus.pages().iter().map(|p| p.page_id.clone()).collect();
                let gateway = &self.gateway;
                let spec = &self.specs.embed;
                let retriever = DenseRetriever::new(set, Some(chunk_to_page), &pages, move |q| {
                    let mut out = gateway
                        .embed(spec, &[q.to_string()])
                        .map_err(|err| RetrieverError::QueryEmbedding(err.to_string()))?;
                    Ok(out.remove(0))
                })
                .map_err(&fail)?;
                Ok(Box::new(retriever))
            }
            "maxsim" => {
                let (_, chunk_pages, vectors) = self.embed_chunks(corpus)?;
                let dim = vectors[0].len();
                let mut by_page: BTreeMap<String, Vec<Vec<f32>>> = BTreeMap::new();
                for (page_id, vector) in chunk_pages.into_iter().zip(vectors) {
                    by_page.entry(page_id).or_default().push(vector);
                }
                let mut set = EmbeddingSet::new(EmbedUnit::Page, dim, true);
                for (page_id, page_vectors) in by_page {
                    set.insert(&page_id, page_vectors).map_err(&fail)?;
                }
                let pages: Vec<String> =
                    corpus.pages().iter().map(|p| p.page_id.clone()).collect();
                let gateway = &self.gateway;
                let spec = &self.specs.embed;
                let retriever = MaxSimRetriever::new(set, None, &pages, move |q| {
                    let tokens = tokenize(q);
                    if tokens.is_empty() {
                        return Err(RetrieverError::QueryEmbedding(format!(
                            "query `{q}` has no tokens"
                        )));
                    }
                    gateway
                        .embed(spec, &tokens)
                        .map_err(|err| RetrieverError::QueryEmbedding(err.to_string()))
                })
                .map_err(&fail)?;
                Ok(Box::new(retriever))
            }
            other => Err(StageError::Config(format!("unknown retriever `{other}`"))),
        }
    }

    /// Embeds every chunk in corpus order, failing with a clear message when
    /// any page lacks chunk text (embedding retrievers cannot cover it).
    #[allow(clippy::type_complexity)]
    fn embed_chunks(
        &self,
        corpus: &CorpusIndex,
    ) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f32>>), StageError> {
        let chunked: BTreeSet<&str> = corpus.chunks().map(|c| c.page_id.as_str()).collect();
        let missing: Vec<&str> = corpus
            .pages()
            .iter()
            .map(|p| p.page_id.as_str())
            .filter(|id| !chunked.contains(id))
            .collect();
        if !missing.is_empty() {
            return Err(StageError::Failed {
                stage: "evaluate",
                message: format!(
                    "dense/maxsim retrieval requires chunk text on every page; \
                     {} page(s) have none: {}",
                    missing.len(),
                    missing.join(", ")
                ),
            });
        }
        let mut chunk_ids = Vec::new();
        let mut chunk_pages = Vec::new();
        let mut texts = Vec::new();
        for chunk in corpus.chunks() {
            chunk_ids.push(chunk.chunk_id.clone());
            chunk_pages.push(chunk.page_id.clone());
            texts.push(chunk.content.clone());
        }
        if texts.is_empty() {
            return Err(StageError::Failed {
                stage: "evaluate",
                message: "corpus has no chunk text to embed".to_string(),
            });
        }
        let vectors = self.gateway.embed(&self.specs.embed, &texts)?;
        Ok((chunk_ids, chunk_pages, vectors))
    }
}

/// `{retriever}_l{level}.run`
fn run_file_name(retriever: &str, level: u8) -> String {
    format!("{retriever}_l{level}.run")
}

/// Inverse of [`run_file_name`]; `None` for files that are not run files.
fn parse_run_name(path: &Path) -> Option<(String, u8)> {
    let stem = path.file_name()?.to_str()?.strip_suffix(".run")?;
    let (name, level) = stem.rsplit_once("_l")?;
    if name.is_empty() {
        return None;
    }
    Some((name.to_string(), level.parse().ok()?))
}

fn build_gateway(config: &PipelineConfig) -> Result<Gateway, StageError> {
    let backend: Box<dyn crate::modelgate::Backend> = match config.gateway.backend {
        GatewayBackend::Mock => {
            let mut mock = MockBackend::with_script(config.mock.to_script());
            if let Some(path) = &config.mock.fixtures {
                mock.load_fixtures(path).map_err(StageError::Config)?;
            }
            Box::new(mock)
        }
        GatewayBackend::Http => Box::new(HttpBackend::new()),
    };
    let mut gateway = Gateway::new(backend)
        .with_in_flight(config.gateway.in_flight)
        .with_retry_base(Duration::from_millis(config.gateway.retry_base_ms));
    if let Some(dir) = &config.gateway.cache_dir {
        gateway = gateway.with_cache(ResponseCache::open(dir)?);
    }
    Ok(gateway)
}

fn load_templates(config: &PipelineConfig) -> Result<Templates, StageError> {
    let load = |path: &Option<PathBuf>, builtin: &str| -> Result<PromptTemplate, StageError> {
        match path {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|source| StageError::io("read template override", path, source))?;
                Ok(PromptTemplate::parse(&text)?)
            }
            None => Ok(PromptTemplate::parse(builtin)?),
        }
    };
    let t = &config.templates;
    Ok(Templates {
        query_gen: load(&t.query_gen, defaults::QUERY_GEN)?,
        query_verify: load(&t.query_verify, defaults::QUERY_VERIFY)?,
        rephrase_l1: load(&t.rephrase_l1, defaults::REPHRASE_L1)?,
        rephrase_l2: load(&t.rephrase_l2, defaults::REPHRASE_L2)?,
        rephrase_l3: load(&t.rephrase_l3, defaults::REPHRASE_L3)?,
        rephrase_verify: load(&t.rephrase_verify, defaults::REPHRASE_VERIFY)?,
        relevance: load(&t.relevance, defaults::RELEVANCE)?,
        evidence: load(&t.evidence, defaults::EVIDENCE)?,
    })
}

/// Writes a versioned-header JSONL artifact: one header line, then one JSON
/// record per line.
fn write_records<T: Serialize>(path: &Path, format: &str, records: &[T]) -> Result<(), StageError> {
    let file = fs::File::create(path)
        .map_err(|source| StageError::io("write artifact", path, source))?;
    let mut out = std::io::BufWriter::new(file);
    let io_err = |source| StageError::io("write artifact", path, source);
    writeln!(out, "{}", header_line(format)).map_err(io_err)?;
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|source| StageError::json("serialize artifact record", path, source))?;
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Reads a versioned-header JSONL artifact written by [`write_records`].
fn read_records<T: DeserializeOwned>(path: &Path, format: &str) -> Result<Vec<T>, StageError> {
    let text = fs::read_to_string(path)
        .map_err(|source| StageError::io("read artifact", path, source))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| StageError::Record {
        path: path.to_path_buf(),
        line: 1,
        message: "file is empty (missing header line)".to_string(),
    })?;
    check_header(header, format).map_err(|message| StageError::Record {
        path: path.to_path_buf(),
        line: 1,
        message,
    })?;
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|err| StageError::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message: err.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        AugmentConfig, EndpointConfig, EndpointsConfig, EvaluateConfig, GenerateConfig,
    };
    use crate::modelgate::EndpointKind;

    /// Writes a small PNG whose bytes differ per (doc, page) so every page
    /// has a distinct mock page token.
    fn write_png(path: &Path, seed: u8) {
        let img = image::RgbImage::from_fn(24, 18, |x, y| {
            image::Rgb([seed, (x * 9 % 251) as u8, (y * 13 % 251) as u8])
        });
        img.save(path).unwrap();
    }

    /// Builds a raw-manifest corpus: `docs` documents × `pages` pages, each
    /// page a real PNG plus one text and one table chunk.
    fn fixture_manifest(root: &Path, docs: usize, pages: usize) -> PathBuf {
        let src = root.join("src");
        fs::create_dir_all(&src).unwrap();
        let manifest_path = root.join("manifest.jsonl");
        let mut manifest = String::new();
        for d in 0..docs {
            for p in 1..=pages {
                let image = format!("src/doc{d}-p{p}.png");
                write_png(&root.join(&image), (d * 31 + p) as u8);
                let chunks = format!("src/doc{d}-p{p}.chunks.jsonl");
                fs::write(
                    root.join(&chunks),
                    format!(
                        "{}\n{}\n",
                        serde_json::json!({
                            "kind": "text",
                            "content": format!("Annual report {d} page {p} discusses revenue."),
                            "source": "ocr",
                        }),
                        serde_json::json!({
                            "kind": "table",
                            "content": format!("Quarter Q{p} value {}", 100 * (d + 1) + p),
                            "source": "ocr",
                        }),
                    ),
                )
                .unwrap();
                manifest.push_str(
                    &serde_json::json!({
                        "doc_id": format!("doc-{d}"),
                        "title": format!("Annual Report {d}"),
                        "collection": "reports",
                        "page_number": p,
                        "image_path": image,
                        "chunks_path": chunks,
                    })
                    .to_string(),
                );
                manifest.push('\n');
            }
        }
        fs::write(&manifest_path, manifest).unwrap();
        manifest_path
    }

    fn mock_endpoint(kind: EndpointKind) -> EndpointConfig {
        EndpointConfig {
            base_url: String::new(),
            model_name: "mock-model".to_string(),
            kind,
            temperature: 0.0,
            max_tokens: 1024,
            max_retries: 2,
            timeout_secs: 60,
            api_key_env: None,
        }
    }

    /// A mock-backend config over the fixture corpus: 4 candidates per page
    /// (the mock plants two rejects), everything else defaulted.
    fn test_config(manifest: PathBuf, output_dir: PathBuf) -> PipelineConfig {
        PipelineConfig {
            corpus_manifest: manifest,
            output_dir,
            seed: 41,
            endpoints: EndpointsConfig {
                query_gen: mock_endpoint(EndpointKind::Vlm),
                verify: mock_endpoint(EndpointKind::Llm),
                rephrase: mock_endpoint(EndpointKind::Llm),
                relevance: mock_endpoint(EndpointKind::Vlm),
                caption: mock_endpoint(EndpointKind::Vlm),
                embed: mock_endpoint(EndpointKind::Embedding),
            },
            templates: Default::default(),
            gateway: Default::default(),
            mock: Default::default(),
            ingest: Default::default(),
            generate: GenerateConfig { queries_per_page: 4 },
            rephrase: Default::default(),
            labeling: Default::default(),
            augment: AugmentConfig { fraction: 0.5 },
            evaluate: EvaluateConfig {
                k: 10,
                retrievers: vec!["bm25".into(), "dense".into(), "maxsim".into()],
            },
        }
    }

    fn fixture_pipeline(root: &Path) -> Pipeline {
        let manifest = fixture_manifest(root, 2, 2);
        Pipeline::new(test_config(manifest, root.join("out"))).unwrap()
    }

    fn run_all(pipeline: &Pipeline) {
        assert_eq!(pipeline.run_ingest(false).unwrap(), StageOutcome::Completed);
        assert_eq!(pipeline.run_generate(false).unwrap(), StageOutcome::Completed);
        assert_eq!(pipeline.run_verify(false).unwrap(), StageOutcome::Completed);
        assert_eq!(pipeline.run_rephrase(false).unwrap(), StageOutcome::Completed);
        assert_eq!(pipeline.run_label(false).unwrap(), StageOutcome::Completed);
        assert_eq!(pipeline.run_build(false).unwrap(), StageOutcome::Completed);
        assert_eq!(pipeline.run_triplets(false).unwrap(), StageOutcome::Completed);
        assert_eq!(pipeline.run_augment(false).unwrap(), StageOutcome::Completed);
        let scope = pipeline.default_scope();
        assert_eq!(pipeline.run_evaluate(false, &scope).unwrap(), StageOutcome::Completed);
    }

    #[test]
    fn full_pipeline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = fixture_pipeline(dir.path());
        run_all(&pipeline);

        // 4 pages × 4 candidates, two planted rejects per page.
        let candidates: Vec<QAPair> =
            read_records(&pipeline.artifact(artifacts::CANDIDATES), CANDIDATES_FORMAT).unwrap();
        assert_eq!(candidates.len(), 16);
        let accepted: Vec<QAPair> =
            read_records(&pipeline.artifact(artifacts::ACCEPTED), ACCEPTED_FORMAT).unwrap();
        assert_eq!(accepted.len(), 8);

        // Exhaustive sweep: every surviving query × every page, judged once.
        let queries: Vec<QueryRecord> =
            read_records(&pipeline.artifact(artifacts::QUERIES), QUERIES_FORMAT).unwrap();
        let judgment_files = fs::read_dir(pipeline.artifact(artifacts::JUDGMENTS_DIR))
            .unwrap()
            .count();
        assert_eq!(judgment_files, queries.len() * 4);

        // The bundle validates and every query carries four versions and a
        // single positive equal to its source page.
        let bundle = read_bundle(&pipeline.artifact(artifacts::BUNDLE_DIR)).unwrap();
        assert!(!bundle.queries.is_empty());
        for query in &bundle.queries {
            assert_eq!(query.status, QueryStatus::Final);
            assert_eq!(query.versions.len(), 4);
            let positives = bundle.qrels.positives(&query.query_id).unwrap();
            assert_eq!(positives.len(), 1);
            assert!(positives.contains(&query.page_id));
        }

        // Training products line up with the bundle.
        let triplets = read_triplets(&pipeline.artifact(artifacts::TRIPLETS)).unwrap();
        assert_eq!(triplets.len(), bundle.queries.len());
        let augmented =
            read_triplets(&pipeline.artifact(artifacts::TRIPLETS_REPHRASED)).unwrap();
        assert_eq!(augmented.len(), triplets.len());
        let rephrased = augmented.iter().filter(|t| t.rephrase_level_applied > 0).count();
        assert_eq!(rephrased, (triplets.len() as f64 * 0.5).round() as usize);

        // Evaluation artifacts: one run per retriever × level, plus reports.
        let runs = fs::read_dir(pipeline.artifact(artifacts::RUNS_DIR)).unwrap().count();
        assert_eq!(runs, 3 * 4);
        let table =
            fs::read_to_string(pipeline.artifact(artifacts::REPORTS_DIR).join("metrics.txt"))
                .unwrap();
        assert!(table.contains("NDCG@5"));
        assert!(table.contains("bm25"));
        assert!(table.contains("L0") && table.contains("L3"));
        let cells: Vec<CellRecord> = read_records(
            &pipeline.artifact(artifacts::REPORTS_DIR).join("cells.jsonl"),
            CELLS_FORMAT,
        )
        .unwrap();
        assert!(!cells.is_empty());
    }

    #[test]
    fn stages_refuse_to_run_out_of_order() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = fixture_pipeline(dir.path());
        let err = pipeline.run_generate(false).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let message = err.to_string();
        assert!(message.contains("corpus.jsonl"), "{message}");
        assert!(message.contains("ingest"), "{message}");

        // Later stages point at their own producers.
        let err = pipeline.run_build(false).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
        let err = pipeline.run_evaluate(false, &pipeline.default_scope()).unwrap_err();
        assert!(err.to_string().contains("build"), "{err}");
    }

    #[test]
    fn receipts_skip_reruns_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = fixture_pipeline(dir.path());
        assert_eq!(pipeline.run_ingest(false).unwrap(), StageOutcome::Completed);
        assert_eq!(pipeline.run_ingest(false).unwrap(), StageOutcome::Skipped);

        let before = fs::read(pipeline.artifact(artifacts::CORPUS)).unwrap();
        assert_eq!(pipeline.run_ingest(true).unwrap(), StageOutcome::Completed);
        let after = fs::read(pipeline.artifact(artifacts::CORPUS)).unwrap();
        assert_eq!(before, after, "forced re-ingest is byte-identical");
    }

    #[test]
    fn stale_artifacts_invalidate_receipts() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = fixture_pipeline(dir.path());
        pipeline.run_ingest(false).unwrap();
        pipeline.run_generate(false).unwrap();

        // Tamper with the generate output: the receipt no longer matches.
        let candidates_path = pipeline.artifact(artifacts::CANDIDATES);
        let mut text = fs::read_to_string(&candidates_path).unwrap();
        text.push('\n');
        fs::write(&candidates_path, text).unwrap();
        assert_eq!(pipeline.run_generate(false).unwrap(), StageOutcome::Completed);
    }

    #[test]
    fn config_changes_invalidate_receipts() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = fixture_manifest(dir.path(), 1, 2);
        let out = dir.path().join("out");
        let pipeline = Pipeline::new(test_config(manifest.clone(), out.clone())).unwrap();
        pipeline.run_ingest(false).unwrap();
        pipeline.run_generate(false).unwrap();

        let mut changed = test_config(manifest, out);
        changed.generate.queries_per_page = 3;
        let pipeline = Pipeline::new(changed).unwrap();
        // Ingest does not depend on the changed knob, but the receipt is
        // keyed by the whole config digest: conservative re-run.
        assert_eq!(pipeline.run_ingest(false).unwrap(), StageOutcome::Completed);
        assert_eq!(pipeline.run_generate(false).unwrap(), StageOutcome::Completed);
        let candidates: Vec<QAPair> =
            read_records(&pipeline.artifact(artifacts::CANDIDATES), CANDIDATES_FORMAT).unwrap();
        assert_eq!(candidates.len(), 2 * 3);
    }

    #[test]
    fn lock_excludes_concurrent_stage_runs() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = fixture_pipeline(dir.path());
        fs::create_dir_all(&pipeline.config().output_dir).unwrap();
        fs::write(pipeline.artifact("run.lock"), "9999\n").unwrap();
        let err = pipeline.run_ingest(false).unwrap_err();
        assert!(matches!(err, StageError::Locked(_)));
        fs::remove_file(pipeline.artifact("run.lock")).unwrap();
        pipeline.run_ingest(false).unwrap();
    }

    #[test]
    fn label_rerun_reuses_the_judgment_cache() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = fixture_pipeline(dir.path());
        pipeline.run_ingest(false).unwrap();
        pipeline.run_generate(false).unwrap();
        pipeline.run_verify(false).unwrap();
        pipeline.run_rephrase(false).unwrap();
        pipeline.run_label(false).unwrap();

        // Deleting a deliverable invalidates the receipt, but the judgment
        // cache keeps the re-run from calling the judge again.
        fs::remove_file(pipeline.artifact(artifacts::QRELS)).unwrap();
        let calls_before = pipeline.gateway().backend_calls();
        assert_eq!(pipeline.run_label(false).unwrap(), StageOutcome::Completed);
        let relabel_calls = pipeline.gateway().backend_calls() - calls_before;
        // Evidence assignment re-asks the caption endpoint (one call per
        // retained query, served from the gateway cache only when one is
        // configured); the sweep itself must add nothing.
        let finals: Vec<QueryRecord> =
            read_records(&pipeline.artifact(artifacts::QUERIES_FINAL), QUERIES_FORMAT).unwrap();
        assert!(
            relabel_calls <= finals.len() as u64,
            "sweep repeated judge calls: {relabel_calls} > {}",
            finals.len()
        );
    }

    #[test]
    fn evaluate_scope_narrows_runs_and_report_filters() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = fixture_pipeline(dir.path());
        pipeline.run_ingest(false).unwrap();
        pipeline.run_generate(false).unwrap();
        pipeline.run_verify(false).unwrap();
        pipeline.run_rephrase(false).unwrap();
        pipeline.run_label(false).unwrap();
        pipeline.run_build(false).unwrap();

        let scope = EvalScope { levels: vec![3], retrievers: vec!["bm25".into()], k: 5 };
        pipeline.run_evaluate(false, &scope).unwrap();
        let runs: Vec<String> = fs::read_dir(pipeline.artifact(artifacts::RUNS_DIR))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(runs, vec!["bm25_l3.run".to_string()]);

        let table = pipeline.render_report(Some(3), Some("bm25")).unwrap();
        assert!(table.contains("bm25"));
        assert!(table.contains("L3") && !table.contains("L0"));

        let err = pipeline.render_report(Some(0), None).unwrap_err();
        assert!(err.to_string().contains("no run files"), "{err}");
    }

    #[test]
    fn invalid_scopes_are_config_errors() {
        let scope = EvalScope { levels: vec![4], retrievers: vec!["bm25".into()], k: 5 };
        assert_eq!(scope.validate().unwrap_err().exit_code(), 3);
        let scope = EvalScope { levels: vec![0, 0], retrievers: vec!["bm25".into()], k: 5 };
        assert!(scope.validate().is_err());
        let scope = EvalScope { levels: vec![0], retrievers: vec!["b".into()], k: 5 };
        assert!(scope.validate().unwrap_err().to_string().contains("unknown retriever"));
        let scope = EvalScope { levels: vec![0], retrievers: vec!["bm25".into()], k: 0 };
        assert!(scope.validate().is_err());
    }

    #[test]
    fn stats_render_covers_collections() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = fixture_pipeline(dir.path());
        // Works pre-ingest (from the manifest)…
        let table = pipeline.render_stats().unwrap();
        assert!(table.contains("reports"), "{table}");
        // …and post-ingest (from the corpus artifact), with the same counts.
        pipeline.run_ingest(false).unwrap();
        assert_eq!(pipeline.render_stats().unwrap(), table);
    }

    #[test]
    fn run_file_names_round_trip() {
        assert_eq!(
            parse_run_name(Path::new("/x/bm25_l2.run")),
            Some(("bm25".to_string(), 2))
        );
        assert_eq!(parse_run_name(Path::new("/x/maxsim_l0.run")).unwrap().0, "maxsim");
        assert_eq!(parse_run_name(Path::new("/x/notarun.txt")), None);
        assert_eq!(parse_run_name(Path::new("/x/_l2.run")), None);
        assert_eq!(parse_run_name(Path::new("/x/bm25_lx.run")), None);
        let name = run_file_name("dense", 1);
        assert_eq!(parse_run_name(Path::new(&name)), Some(("dense".to_string(), 1)));
    }

    #[test]
    fn record_files_round_trip_and_reject_wrong_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let records = vec![
            WithheldEvidence { query_id: "q1".into(), raw: "FIGURE".into() },
            WithheldEvidence { query_id: "q2".into(), raw: "N/A".into() },
        ];
        write_records(&path, WITHHELD_FORMAT, &records).unwrap();
        let loaded: Vec<WithheldEvidence> = read_records(&path, WITHHELD_FORMAT).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[1].query_id, "q2");

        let err = read_records::<WithheldEvidence>(&path, DROPS_FORMAT).unwrap_err();
        assert!(err.to_string().contains("ragbench/drops"), "{err}");

        fs::write(&path, "").unwrap();
        let err = read_records::<WithheldEvidence>(&path, WITHHELD_FORMAT).unwrap_err();
        assert!(err.to_string().contains("missing header"), "{err}");
    }

    #[test]
    fn pipeline_is_deterministic_across_directories() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let pipeline_a = fixture_pipeline(dir_a.path());
        let pipeline_b = fixture_pipeline(dir_b.path());
        run_all(&pipeline_a);
        run_all(&pipeline_b);

        for name in [
            artifacts::CANDIDATES,
            artifacts::ACCEPTED,
            artifacts::QUERIES,
            artifacts::QRELS,
            artifacts::QUERIES_FINAL,
            artifacts::TRIPLETS,
            artifacts::TRIPLETS_REPHRASED,
        ] {
            let a = fs::read(pipeline_a.artifact(name)).unwrap();
            let b = fs::read(pipeline_b.artifact(name)).unwrap();
            assert_eq!(a, b, "artifact {name} differs between directories");
        }
        // Bundle corpus/meta lines embed absolute image paths, which differ
        // between the two directories; the query-side members are stable.
        for name in ["queries.jsonl", "qrels.txt", "evidence.jsonl"] {
            let a = fs::read(pipeline_a.artifact(artifacts::BUNDLE_DIR).join(name)).unwrap();
            let b = fs::read(pipeline_b.artifact(artifacts::BUNDLE_DIR).join(name)).unwrap();
            assert_eq!(a, b, "bundle member {name} differs");
        }
    }
}
