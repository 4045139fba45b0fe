//! Step 3: produce three escalating rephrasings per accepted query and
//! verify each preserves meaning and answerability, yielding the
//! four-version query record.
//!
//! Level 1 makes minor word changes while maintaining structure, level 2
//! modifies word choice and sentence order, level 3 rewrites significantly.
//! Every level rephrases the *original* (level-0) text, and every candidate
//! is verified against the level-0 text and the known answer before it is
//! kept. A level gets a bounded retry budget; what happens when the budget
//! runs out depends on the policy — benchmark construction discards the
//! record to protect label quality, training-set construction falls back to
//! the original text.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::labeling::EvidenceType;
use crate::modelgate::{tags, EndpointSpec, Gateway, ModelRequest};
use crate::stage::StageError;
use crate::template::{defaults, PromptTemplate};
use crate::template_values;

/// Retry budget per rephrasing level.
pub const DEFAULT_REPHRASE_RETRIES: u32 = 3;

/// Lifecycle of a query through the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    /// Accepted by the realism filter, not yet rephrased.
    Pending,
    /// All four versions present and verified.
    Rephrased,
    /// Survived exhaustive labeling with a single verified positive.
    LabelVerified,
    /// Packaged into a benchmark bundle.
    Final,
}

/// A query and its rephrased versions, tied to the page it was generated
/// from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    /// Source page the query was generated from.
    pub page_id: String,
    pub answer: String,
    /// Level → text. Level 0 (the original) is always present; a record
    /// with status ≥ `Rephrased` has exactly levels 0–3.
    pub versions: BTreeMap<u8, String>,
    pub status: QueryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<EvidenceType>,
}

impl QueryRecord {
    pub fn new(query_id: &str, page_id: &str, query: &str, answer: &str) -> Self {
        Self {
            query_id: query_id.to_string(),
            page_id: page_id.to_string(),
            answer: answer.to_string(),
            versions: BTreeMap::from([(0u8, query.to_string())]),
            status: QueryStatus::Pending,
            evidence: None,
        }
    }

    /// The text at a rephrasing level, if present.
    pub fn text(&self, level: u8) -> Option<&str> {
        self.versions.get(&level).map(String::as_str)
    }

    /// The original (level-0) text.
    pub fn original(&self) -> &str {
        self.versions.get(&0).map(String::as_str).unwrap_or_default()
    }
}

/// What to do with a level whose retry budget is exhausted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RephrasePolicy {
    /// Benchmark mode: discard the whole record, logged.
    DropOnFail,
    /// Training mode: the failed level falls back to the level-0 text.
    RetainOriginalOnFail,
}

/// Result of expanding one record.
#[derive(Debug)]
pub enum RephraseOutcome {
    /// All levels present; status is `Rephrased`.
    Expanded(QueryRecord),
    /// Benchmark mode only: `level` never produced a verified rephrasing
    /// within the retry budget. The record is returned for the discard log.
    Discarded { record: QueryRecord, level: u8, attempts: u32 },
}

/// The rephrasing engine: three level prompts, one verification prompt, and
/// the endpoints they run against.
pub struct Rephraser<'a> {
    gateway: &'a Gateway,
    rephrase_endpoint: &'a EndpointSpec,
    verify_endpoint: &'a EndpointSpec,
    levels: [PromptTemplate; 3],
    verify: PromptTemplate,
    retries: u32,
}

impl<'a> Rephraser<'a> {
    /// Builds a rephraser with the built-in prompt templates.
    pub fn new(
        gateway: &'a Gateway,
        rephrase_endpoint: &'a EndpointSpec,
        verify_endpoint: &'a EndpointSpec,
    ) -> Result<Self, StageError> {
        Ok(Self {
            gateway,
            rephrase_endpoint,
            verify_endpoint,
            levels: [
                PromptTemplate::parse(defaults::REPHRASE_L1)?,
                PromptTemplate::parse(defaults::REPHRASE_L2)?,
                PromptTemplate::parse(defaults::REPHRASE_L3)?,
            ],
            verify: PromptTemplate::parse(defaults::REPHRASE_VERIFY)?,
            retries: DEFAULT_REPHRASE_RETRIES,
        })
    }

    /// Replaces the per-level prompt templates (each must take `{query}`).
    pub fn with_level_templates(mut self, levels: [PromptTemplate; 3]) -> Self {
        self.levels = levels;
        self
    }

    /// Replaces the verification template (`{original}`, `{rephrased}`,
    /// `{answer}`).
    pub fn with_verify_template(mut self, verify: PromptTemplate) -> Self {
        self.verify = verify;
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries.max(1);
        self
    }

    /// One model call for one level; `attempt` ≥ 2 appends a retry marker so
    /// the call is not served from the response cache verbatim.
    fn rephrase_once(&self, text: &str, level: u8, attempt: u32) -> Result<String, StageError> {
        let template = &self.levels[usize::from(level - 1)];
        let mut prompt = template.render(&template_values!(("query", text)))?;
        if attempt > 1 {
            prompt.push_str(&format!("\nRETRY: {attempt}"));
        }
        let request = ModelRequest::text(tags::rephrase_level(level), prompt);
        let response = self.gateway.complete(self.rephrase_endpoint, &request)?;
        Ok(first_line(&response.text))
    }

    /// Produces a rephrasing of `text` at `level` (1–3) that differs from
    /// the input under case-folding, retrying up to the budget when the
    /// model echoes the input back.
    ///
    /// # Panics
    /// If `level` is not in 1..=3.
    pub fn rephrase_query(&self, text: &str, level: u8) -> Result<String, StageError> {
        assert!((1..=3).contains(&level), "rephrase level must be 1-3, got {level}");
        for attempt in 1..=self.retries {
            let candidate = self.rephrase_once(text, level, attempt)?;
            if !candidate.is_empty() && !folded_eq(&candidate, text) {
                return Ok(candidate);
            }
        }
        Err(StageError::Failed {
            stage: "rephrase",
            message: format!(
                "level-{level} rephrasing returned the input verbatim after {} attempts: {text}",
                self.retries
            ),
        })
    }

    /// Judges whether `rephrased` asks for the same information as
    /// `original` and is still answered by `answer`. Identical strings are
    /// trivially equivalent and short-circuit without a model call;
    /// unparseable judge output counts as non-equivalent (conservative).
    pub fn verify_rephrase(
        &self,
        original: &str,
        rephrased: &str,
        answer: &str,
    ) -> Result<bool, StageError> {
        if original == rephrased {
            return Ok(true);
        }
        let prompt = self.verify.render(&template_values!(
            ("original", original),
            ("rephrased", rephrased),
            ("answer", answer),
        ))?;
        let request = ModelRequest::text(tags::REPHRASE_VERIFY, prompt);
        let response = self.gateway.complete(self.verify_endpoint, &request)?;
        Ok(parse_equivalence(&response.text))
    }

    /// Expands a pending record to all four versions.
    ///
    /// Levels run sequentially 1→3; each gets up to the retry budget of
    /// generate-and-verify rounds (an echoed candidate or a failed
    /// verification both consume an attempt). Level 0 is never mutated.
    pub fn expand_query(
        &self,
        mut record: QueryRecord,
        policy: RephrasePolicy,
    ) -> Result<RephraseOutcome, StageError> {
        if record.status != QueryStatus::Pending {
            return Err(StageError::Failed {
                stage: "rephrase",
                message: format!(
                    "query `{}` has status {:?}, expected pending",
                    record.query_id, record.status
                ),
            });
        }
        let original = record.original().to_string();
        let mut fallback_levels = Vec::new();
        for level in 1..=3u8 {
            let mut accepted = None;
            for attempt in 1..=self.retries {
                let candidate = self.rephrase_once(&original, level, attempt)?;
                if candidate.is_empty() || folded_eq(&candidate, &original) {
                    continue;
                }
                if self.verify_rephrase(&original, &candidate, &record.answer)? {
                    accepted = Some(candidate);
                    break;
                }
            }
            match accepted {
                Some(text) => {
                    record.versions.insert(level, text);
                }
                None => match policy {
                    RephrasePolicy::DropOnFail => {
                        return Ok(RephraseOutcome::Discarded {
                            record,
                            level,
                            attempts: self.retries,
                        });
                    }
                    RephrasePolicy::RetainOriginalOnFail => {
                        record.versions.insert(level, original.clone());
                        fallback_levels.push(level);
                    }
                },
            }
        }
        record.status = QueryStatus::Rephrased;
        warn_on_collisions(&record, &fallback_levels);
        Ok(RephraseOutcome::Expanded(record))
    }
}

/// Cross-level distinctness is advisory: collisions between generated texts
/// are suspicious (the levels should read differently) but never fatal, and
/// training-mode fallbacks duplicate level 0 by design.
fn warn_on_collisions(record: &QueryRecord, fallback_levels: &[u8]) {
    let levels: Vec<(&u8, &String)> = record
        .versions
        .iter()
        .filter(|(level, _)| !fallback_levels.contains(level))
        .collect();
    for (i, (level_a, text_a)) in levels.iter().enumerate() {
        for (level_b, text_b) in &levels[i + 1..] {
            if folded_eq(text_a, text_b) {
                log::warn!(
                    "query `{}`: level-{level_a} and level-{level_b} texts coincide: {text_a}",
                    record.query_id
                );
            }
        }
    }
}

fn folded_eq(a: &str, b: &str) -> bool {
    a.to_lowercase() == b.to_lowercase()
}

/// First non-empty line, trimmed — the models are instructed to answer on a
/// single line, but stray whitespace is tolerated.
fn first_line(text: &str) -> String {
    text.lines().map(str::trim).find(|line| !line.is_empty()).unwrap_or_default().to_string()
}

/// EQUIVALENT on the first meaningful line → true; DIFFERENT or anything
/// unparseable → false.
fn parse_equivalence(text: &str) -> bool {
    first_line(text).split_whitespace().next().is_some_and(|word| {
        word.trim_matches(|c: char| !c.is_ascii_alphabetic()).eq_ignore_ascii_case("EQUIVALENT")
    })
}
