//! Prompt templates with named placeholders.
//!
//! Every model-facing prompt in the pipeline is rendered from a template so
//! that operators can swap prompts without recompiling. A template is plain
//! text containing `{name}` placeholders, where `name` is one or more
//! lowercase ASCII letters or underscores. Rendering substitutes every
//! placeholder from a key/value map and fails loudly on unknown or missing
//! keys — a prompt silently rendered with a hole in it would poison every
//! downstream artifact.
//!
//! A literal `{` that is not a placeholder is written `{{` (and `}}` for
//! `}`), the same convention as `format!`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::digest::sha256_hex;

/// Built-in prompt templates used when the run config does not override them.
pub mod defaults {
    /// Query generation from a page image (expects `document_title`, `n`).
    pub const QUERY_GEN: &str = include_str!("../templates/query_gen.txt");
    /// Query naturalness/specificity verification (expects `query`).
    pub const QUERY_VERIFY: &str = include_str!("../templates/query_verify.txt");
    /// Level-1 rephrasing: minimal wording change (expects `query`).
    pub const REPHRASE_L1: &str = include_str!("../templates/rephrase_l1.txt");
    /// Level-2 rephrasing: synonyms + reordering (expects `query`).
    pub const REPHRASE_L2: &str = include_str!("../templates/rephrase_l2.txt");
    /// Level-3 rephrasing: full rewrite (expects `query`).
    pub const REPHRASE_L3: &str = include_str!("../templates/rephrase_l3.txt");
    /// Rephrase equivalence check (expects `original`, `rephrased`, `answer`).
    pub const REPHRASE_VERIFY: &str = include_str!("../templates/rephrase_verify.txt");
    /// Query/page relevance judgment (expects `document_title`, `query`).
    pub const RELEVANCE: &str = include_str!("../templates/relevance.txt");
    /// Evidence-type classification (expects `query`, `answer`).
    pub const EVIDENCE: &str = include_str!("../templates/evidence.txt");
}

/// Errors raised while parsing or rendering a template.
#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    /// The template text itself is malformed.
    #[error("template parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    /// Rendering referenced a placeholder the caller did not supply.
    #[error("missing value for placeholder `{{{name}}}`")]
    MissingValue { name: String },
    /// The caller supplied a key the template never uses.
    #[error("unused template value `{name}`")]
    UnusedValue { name: String },
    /// The template file could not be read.
    #[error("failed to read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One parsed segment of a template.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// A parsed prompt template.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    raw: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    /// Parses template text, validating placeholder syntax.
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    literal.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    literal.push('}');
                    i += 2;
                }
                b'{' => {
                    let start = i + 1;
                    let mut end = start;
                    while end < bytes.len() && (bytes[end].is_ascii_lowercase() || bytes[end] == b'_') {
                        end += 1;
                    }
                    if end == start || bytes.get(end) != Some(&b'}') {
                        return Err(TemplateError::Parse {
                            offset: i,
                            message: "`{` must open a placeholder of lowercase letters and \
                                      underscores; write a literal brace as `{{`"
                                .into(),
                        });
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Placeholder(text[start..end].to_string()));
                    i = end + 1;
                }
                b'}' => {
                    return Err(TemplateError::Parse {
                        offset: i,
                        message: "stray `}`; write a literal brace as `}}`".into(),
                    });
                }
                _ => {
                    // Advance over one full UTF-8 scalar, not one byte.
                    let ch = text[i..].chars().next().expect("in-bounds char");
                    literal.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self { raw: text.to_string(), segments })
    }

    /// Loads and parses a template from a file.
    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// The placeholder names used by this template, deduplicated and sorted.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .segments
            .iter()
            .filter_map(|s| match s {
                Segment::Placeholder(name) => Some(name.as_str()),
                Segment::Literal(_) => None,
            })
            .collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    /// Renders the template, substituting every placeholder.
    ///
    /// Every placeholder must be present in `values` and every value must be
    /// used; both directions are errors so that template/config drift is
    /// caught at the call site instead of producing a subtly wrong prompt.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let used = self.placeholders();
        for key in values.keys() {
            if !used.contains(key) {
                return Err(TemplateError::UnusedValue { name: (*key).to_string() });
            }
        }
        let mut out = String::with_capacity(self.raw.len());
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder(name) => match values.get(name.as_str()) {
                    Some(value) => out.push_str(value),
                    None => return Err(TemplateError::MissingValue { name: name.clone() }),
                },
            }
        }
        Ok(out)
    }

    /// The raw template text as parsed.
    pub fn raw(&self) -> &str {
        &self.raw
    }

    /// Content digest of the raw template text, for cache keys and receipts.
    pub fn digest(&self) -> String {
        sha256_hex(self.raw.as_bytes())
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// Convenience constructor for render maps: `values![("query", q), ("n", n)]`.
#[macro_export]
macro_rules! template_values {
    ($(($key:expr, $value:expr)),* $(,)?) => {{
        let mut map = std::collections::BTreeMap::new();
        $(map.insert($key, $value.to_string());)*
        map
    }};
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_simple_placeholder() {
        let t = PromptTemplate::parse("Hello {name}!").unwrap();
        let out = t.render(&template_values![("name", "world")]).unwrap();
        assert_eq!(out, "Hello world!");
    }

    #[test]
    fn renders_repeated_placeholder_once_per_site() {
        let t = PromptTemplate::parse("{x} and {x}").unwrap();
        let out = t.render(&template_values![("x", "a")]).unwrap();
        assert_eq!(out, "a and a");
    }

    #[test]
    fn escaped_braces_are_literal() {
        let t = PromptTemplate::parse("json: {{\"k\": {v}}}").unwrap();
        let out = t.render(&template_values![("v", "1")]).unwrap();
        assert_eq!(out, "json: {\"k\": 1}");
    }

    #[test]
    fn missing_value_is_error() {
        let t = PromptTemplate::parse("{a} {b}").unwrap();
        let err = t.render(&template_values![("a", "1")]).unwrap_err();
        assert!(matches!(err, TemplateError::MissingValue { name } if name == "b"));
    }

    #[test]
    fn unused_value_is_error() {
        let t = PromptTemplate::parse("{a}").unwrap();
        let err = t
            .render(&template_values![("a", "1"), ("zz", "2")])
            .unwrap_err();
        assert!(matches!(err, TemplateError::UnusedValue { name } if name == "zz"));
    }

    #[test]
    fn bad_placeholder_name_is_parse_error() {
        assert!(PromptTemplate::parse("{BadName}").is_err());
        assert!(PromptTemplate::parse("{no space}").is_err());
        assert!(PromptTemplate::parse("{unterminated").is_err());
        assert!(PromptTemplate::parse("stray } brace").is_err());
    }

    #[test]
    fn multibyte_literals_survive() {
        let t = PromptTemplate::parse("prix: {v} €").unwrap();
        let out = t.render(&template_values![("v", "3")]).unwrap();
        assert_eq!(out, "prix: 3 €");
    }

    #[test]
    fn placeholders_are_sorted_and_deduped() {
        let t = PromptTemplate::parse("{b}{a}{b}").unwrap();
        assert_eq!(t.placeholders(), vec!["a", "b"]);
    }

    #[test]
    fn default_templates_parse_and_declare_expected_placeholders() {
        let cases: [(&str, &[&str]); 8] = [
            (defaults::QUERY_GEN, &["document_title", "n"]),
            (defaults::QUERY_VERIFY, &["query"]),
            (defaults::REPHRASE_L1, &["query"]),
            (defaults::REPHRASE_L2, &["query"]),
            (defaults::REPHRASE_L3, &["query"]),
            (defaults::REPHRASE_VERIFY, &["answer", "original", "rephrased"]),
            (defaults::RELEVANCE, &["document_title", "query"]),
            (defaults::EVIDENCE, &["answer", "query"]),
        ];
        for (text, expected) in cases {
            let t = PromptTemplate::parse(text).unwrap();
            assert_eq!(t.placeholders(), expected.to_vec());
        }
    }

    #[test]
    fn digest_tracks_content() {
        let a = PromptTemplate::parse("x {v}").unwrap();
        let b = PromptTemplate::parse("y {v}").unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), PromptTemplate::parse("x {v}").unwrap().digest());
    }
}
