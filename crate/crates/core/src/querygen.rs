//! Steps 1 and 2 of the pipeline: generate candidate query–answer pairs per
//! page via a VLM, then classify each as realistic-or-rejected via an LLM.
//!
//! Generation asks the vision model for a machine-parseable JSON array of
//! `{query, answer}` objects; one bounded repair pass (outer-array
//! extraction, trailing-comma stripping, bracket balancing) is applied
//! before output is declared unparseable. Individual malformed items are
//! dropped with a diagnostic rather than failing the page. Verification is
//! a single LLM call per query returning a categorical keyword: a query is
//! rejected when it references the source page ("in Figure 5") or is too
//! broad to pin down an answer. Pages whose every candidate rejects simply
//! end up in the benchmark with no queries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PageRecord;
use crate::modelgate::{tags, EndpointSpec, Gateway, ModelRequest};
use crate::stage::StageError;
use crate::template::{defaults, PromptTemplate};
use crate::template_values;

/// Candidate pairs requested per page.
pub const DEFAULT_QUERIES_PER_PAGE: usize = 10;

/// A generated query–answer pair, labeled with the page it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub query: String,
    pub answer: String,
    pub page_id: String,
}

/// Outcome categories of the realism filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    /// References the source page, layout, or a numbered element.
    RejectPageReference,
    /// Too broad to answer inside a large collection.
    RejectTooGeneral,
    /// The verifier's output fit no category; rejected conservatively.
    RejectUnparseable,
}

/// One filter decision with its audit rationale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub verdict: Verdict,
    /// Non-empty for every rejection.
    pub rationale: String,
}

impl FilterVerdict {
    pub fn is_accept(&self) -> bool {
        self.verdict == Verdict::Accept
    }
}

/// A generation-output item that could not be used, kept for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostic {
    pub page_id: String,
    pub detail: String,
    /// The offending fragment, verbatim.
    pub raw: String,
}

/// Parsed output of one generation call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedQueries {
    pub pairs: Vec<QAPair>,
    pub diagnostics: Vec<ParseDiagnostic>,
}

/// Steps 1+2 engine: a VLM endpoint for generation, an LLM endpoint for
/// verification, and their prompt templates.
pub struct QueryGenerator<'a> {
    gateway: &'a Gateway,
    generate_endpoint: &'a EndpointSpec,
    verify_endpoint: &'a EndpointSpec,
    generate_template: PromptTemplate,
    verify_template: PromptTemplate,
}

impl<'a> QueryGenerator<'a> {
    /// Builds a generator with the built-in prompt templates.
    pub fn new(
        gateway: &'a Gateway,
        generate_endpoint: &'a EndpointSpec,
        verify_endpoint: &'a EndpointSpec,
    ) -> Result<Self, StageError> {
        Ok(Self {
            gateway,
            generate_endpoint,
            verify_endpoint,
            generate_template: PromptTemplate::parse(defaults::QUERY_GEN)?,
            verify_template: PromptTemplate::parse(defaults::QUERY_VERIFY)?,
        })
    }

    /// Replaces the generation template (`{document_title}`, `{n}`).
    pub fn with_generate_template(mut self, template: PromptTemplate) -> Self {
        self.generate_template = template;
        self
    }

    /// Replaces the verification template (`{query}`).
    pub fn with_verify_template(mut self, template: PromptTemplate) -> Self {
        self.verify_template = template;
        self
    }

    /// Asks the VLM for up to `n` query–answer pairs for one stamped page.
    ///
    /// Malformed items are dropped with a diagnostic; duplicate queries
    /// (case-folded exact match) are collapsed before verification ever
    /// sees them. Fully unparseable model output fails the stage with the
    /// raw text attached.
    pub fn generate_queries(
        &self,
        page: &PageRecord,
        document_title: &str,
        n: usize,
    ) -> Result<GeneratedQueries, StageError> {
        if !page.stamped {
            return Err(StageError::Failed {
                stage: "generate",
                message: format!(
                    "page `{}` is not stamped; run ingest before generation",
                    page.page_id
                ),
            });
        }
        let image = std::fs::read(&page.image_ref).map_err(|source| StageError::Io {
            context: "read page image",
            path: page.image_ref.clone(),
            source,
        })?;
        let prompt = self.generate_template.render(&template_values!(
            ("document_title", document_title),
            ("n", n),
        ))?;
        let request = ModelRequest::with_image(tags::QUERY_GEN, prompt, image);
        let response = self.gateway.complete(self.generate_endpoint, &request)?;
        parse_generation(&response.text, &page.page_id, n)
    }

    /// Classifies one candidate query with a single verifier call.
    pub fn verify_query(&self, pair: &QAPair) -> Result<FilterVerdict, StageError> {
        let prompt = self.verify_template.render(&template_values!(("query", &pair.query)))?;
        let request = ModelRequest::text(tags::QUERY_VERIFY, prompt);
        let response = self.gateway.complete(self.verify_endpoint, &request)?;
        Ok(parse_verdict(&response.text))
    }

    /// Verifies a pool of candidates, partitioning it exhaustively into
    /// accepted pairs and a rejection log. Input order is preserved on both
    /// sides; verification fans out through the gateway's in-flight limit.
    #[allow(clippy::type_complexity)]
    pub fn filter_pool(
        &self,
        pairs: Vec<QAPair>,
    ) -> Result<(Vec<QAPair>, Vec<(QAPair, FilterVerdict)>), StageError> {
        let verdicts: Vec<FilterVerdict> = pairs
            .par_iter()
            .map(|pair| self.verify_query(pair))
            .collect::<Result<_, _>>()?;
        let mut accepted = Vec::new();
        let mut rejected = Vec::new();
        for (pair, verdict) in pairs.into_iter().zip(verdicts) {
            if verdict.is_accept() {
                accepted.push(pair);
            } else {
                rejected.push((pair, verdict));
            }
        }
        Ok((accepted, rejected))
    }
}

/// Parses generation output into pairs + diagnostics, applying the repair
/// pass when the text is not already a JSON array.
fn parse_generation(
    text: &str,
    page_id: &str,
    n: usize,
) -> Result<GeneratedQueries, StageError> {
    let items = match parse_array(text) {
        Some(items) => items,
        None => repair_json(text).and_then(|fixed| parse_array(&fixed)).ok_or_else(|| {
            StageError::Failed {
                stage: "generate",
                message: format!(
                    "page `{page_id}`: model output is not a JSON array even after repair; raw output: {}",
                    text.trim()
                ),
            }
        })?,
    };

    let mut pairs: Vec<QAPair> = Vec::new();
    let mut diagnostics = Vec::new();
    for (index, item) in items.iter().enumerate() {
        match item_to_pair(item, page_id) {
            Ok(pair) => {
                let folded = pair.query.to_lowercase();
                if pairs.iter().any(|seen| seen.query.to_lowercase() == folded) {
                    diagnostics.push(ParseDiagnostic {
                        page_id: page_id.to_string(),
                        detail: format!("item {index}: duplicate of an earlier query (case-folded)"),
                        raw: pair.query,
                    });
                } else {
                    pairs.push(pair);
                }
            }
            Err(detail) => diagnostics.push(ParseDiagnostic {
                page_id: page_id.to_string(),
                detail: format!("item {index}: {detail}"),
                raw: item.to_string(),
            }),
        }
    }
    if pairs.len() > n {
        log::warn!("page `{page_id}`: model returned {} items, keeping the first {n}", pairs.len());
        pairs.truncate(n);
    }
    Ok(GeneratedQueries { pairs, diagnostics })
}

fn parse_array(text: &str) -> Option<Vec<serde_json::Value>> {
    match serde_json::from_str::<serde_json::Value>(text.trim()) {
        Ok(serde_json::Value::Array(items)) => Some(items),
        _ => None,
    }
}

fn item_to_pair(item: &serde_json::Value, page_id: &str) -> Result<QAPair, String> {
    let object = item.as_object().ok_or("not a JSON object")?;
    let field = |name: &str| -> Result<&str, String> {
        let value = object
            .get(name)
            .and_then(serde_json::Value::as_str)
            .ok_or(format!("missing string field `{name}`"))?;
        if value.trim().is_empty() {
            return Err(format!("empty `{name}`"));
        }
        Ok(value)
    };
    Ok(QAPair {
        query: field("query")?.trim().to_string(),
        answer: field("answer")?.trim().to_string(),
        page_id: page_id.to_string(),
    })
}

/// One bounded repair pass over almost-JSON model output: slice out the
/// outermost array, drop trailing commas, and close any brackets left open.
/// Returns None when there is no array to recover.
fn repair_json(text: &str) -> Option<String> {
    let start = text.find('[')?;
    let candidate = match text.rfind(']') {
        Some(end) if end > start => &text[start..=end],
        _ => &text[start..],
    };

    let mut out = String::with_capacity(candidate.len());
    let mut stack: Vec<char> = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    let chars: Vec<char> = candidate.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            '[' => {
                stack.push(']');
                out.push(c);
            }
            '{' => {
                stack.push('}');
                out.push(c);
            }
            ']' | '}' => {
                // A closer that matches nothing cannot be repaired.
                if stack.pop() != Some(c) {
                    return None;
                }
                out.push(c);
            }
            ',' => {
                // Trailing comma: next non-whitespace is a closer (or EOF).
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some(']') | Some('}') | None) {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    if in_string {
        out.push('"');
    }
    while let Some(closer) = stack.pop() {
        out.push(closer);
    }
    Some(out)
}

/// Maps the verifier's categorical answer to a verdict. The keyword is read
/// from the first meaningful line; any remaining lines become the rationale.
fn parse_verdict(text: &str) -> FilterVerdict {
    let mut lines = text.lines().map(str::trim).filter(|line| !line.is_empty());
    let first = lines.next().unwrap_or_default();
    let keyword: String = first
        .split_whitespace()
        .next()
        .unwrap_or_default()
        .trim_matches(|c: char| !c.is_ascii_alphanumeric() && c != '_')
        .to_ascii_uppercase();
    let rationale = lines.collect::<Vec<_>>().join(" ");
    let reject_rationale = |fallback: &str| {
        if rationale.trim().is_empty() {
            fallback.to_string()
        } else {
            rationale.clone()
        }
    };
    match keyword.as_str() {
        "ACCEPT" => FilterVerdict { verdict: Verdict::Accept, rationale },
        "REJECT_PAGE_REFERENCE" => FilterVerdict {
            verdict: Verdict::RejectPageReference,
            rationale: reject_rationale("references the source page or a numbered element"),
        },
        "REJECT_TOO_GENERAL" => FilterVerdict {
            verdict: Verdict::RejectTooGeneral,
            rationale: reject_rationale("too broad to pin down an answer"),
        },
        _ => FilterVerdict {
            verdict: Verdict::RejectUnparseable,
            rationale: format!("unparseable verifier output: {}", text.trim()),
        },
    }
}
