//! Run configuration: one TOML file describing endpoints, prompts, policies,
//! and paths.
//!
//! The config is pure data — loading resolves relative paths against the
//! config file's directory and validates everything eagerly (referenced
//! files exist, endpoint kinds match their roles, numeric knobs are in
//! range), so a bad run dies before any stage starts rather than hours into
//! the labeling sweep. Stage receipts embed [`PipelineConfig::digest`], so
//! artifacts produced under one configuration are never silently reused
//! under another.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::benchio::DEFAULT_REPHRASE_FRACTION;
use crate::corpus::stamp::DEFAULT_BAND_FRAC;
use crate::digest::sha256_hex;
use crate::labeling::{DEFAULT_FLAG_RATE_LIMIT, DEFAULT_PRESCREEN_K};
use crate::modelgate::{EndpointKind, EndpointSpec};
use crate::querygen::DEFAULT_QUERIES_PER_PAGE;
use crate::rephrase::{RephrasePolicy, DEFAULT_REPHRASE_RETRIES};
use crate::retrievers::DEFAULT_K;
use crate::stage::StageError;

/// Names of the retrievers the evaluate stage can run.
pub const KNOWN_RETRIEVERS: [&str; 3] = ["bm25", "dense", "maxsim"];

/// Connection and sampling parameters for one endpoint role, as written in
/// TOML. Converted to [`EndpointSpec`] for the gateway.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    #[serde(default)]
    pub base_url: String,
    pub model_name: String,
    pub kind: EndpointKind,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_max_tokens() -> u32 {
    1024
}
fn default_max_retries() -> u32 {
    2
}
fn default_timeout_secs() -> u64 {
    60
}

impl EndpointConfig {
    pub fn to_spec(&self) -> EndpointSpec {
        EndpointSpec {
            base_url: self.base_url.clone(),
            model_name: self.model_name.clone(),
            kind: self.kind,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            max_retries: self.max_retries,
            timeout: Duration::from_secs(self.timeout_secs),
            api_key_env: self.api_key_env.clone(),
        }
    }
}

/// One endpoint per pipeline role. Rephrase verification reuses the
/// `verify` endpoint; evidence classification runs on `caption`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointsConfig {
    pub query_gen: EndpointConfig,
    pub verify: EndpointConfig,
    pub rephrase: EndpointConfig,
    pub relevance: EndpointConfig,
    pub caption: EndpointConfig,
    pub embed: EndpointConfig,
}

impl EndpointsConfig {
    /// (role name, config) pairs, in a fixed order.
    pub fn roles(&self) -> [(&'static str, &EndpointConfig); 6] {
        [
            ("query_gen", &self.query_gen),
            ("verify", &self.verify),
            ("rephrase", &self.rephrase),
            ("relevance", &self.relevance),
            ("caption", &self.caption),
            ("embed", &self.embed),
        ]
    }

    /// Role → model identity, recorded in bundle metadata.
    pub fn identities(&self) -> BTreeMap<String, String> {
        self.roles()
            .iter()
            .map(|(role, config)| (role.to_string(), config.model_name.clone()))
            .collect()
    }
}

/// Optional overrides for the built-in prompt templates, by file path.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatesConfig {
    pub query_gen: Option<PathBuf>,
    pub query_verify: Option<PathBuf>,
    pub rephrase_l1: Option<PathBuf>,
    pub rephrase_l2: Option<PathBuf>,
    pub rephrase_l3: Option<PathBuf>,
    pub rephrase_verify: Option<PathBuf>,
    pub relevance: Option<PathBuf>,
    pub evidence: Option<PathBuf>,
}

impl TemplatesConfig {
    fn paths(&self) -> [(&'static str, &Option<PathBuf>); 8] {
        [
            ("query_gen", &self.query_gen),
            ("query_verify", &self.query_verify),
            ("rephrase_l1", &self.rephrase_l1),
            ("rephrase_l2", &self.rephrase_l2),
            ("rephrase_l3", &self.rephrase_l3),
            ("rephrase_verify", &self.rephrase_verify),
            ("relevance", &self.relevance),
            ("evidence", &self.evidence),
        ]
    }
}

/// Which backend serves model calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayBackend {
    /// Deterministic offline mock (fixtures + scripted fallback).
    Mock,
    /// Hosted chat-completions endpoints over HTTP.
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    pub backend: GatewayBackend,
    /// Response cache directory; no caching when absent.
    pub cache_dir: Option<PathBuf>,
    /// Maximum concurrent backend calls.
    pub in_flight: u32,
    /// Base delay for retry backoff.
    pub retry_base_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self { backend: GatewayBackend::Mock, cache_dir: None, in_flight: 8, retry_base_ms: 250 }
    }
}

/// Knobs for the mock backend (ignored under `backend = "http"`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockConfig {
    /// Fixture file of prompt → canned-response records.
    pub fixtures: Option<PathBuf>,
    /// Whether the scripted relevance judge grants rare extra positives
    /// (exercises the multi-positive drop rule).
    pub extra_positives: bool,
    /// Digest byte selecting which pairs get the extra positive.
    pub extra_positive_byte: u8,
    /// Force every rephrase-verification verdict.
    pub rephrase_verdict: Option<bool>,
    /// Echo rephrase inputs verbatim (exercises the failure path).
    pub echo_rephrase: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            fixtures: None,
            extra_positives: true,
            extra_positive_byte: 0,
            rephrase_verdict: None,
            echo_rephrase: false,
        }
    }
}

impl MockConfig {
    /// The script equivalent of these knobs.
    pub fn to_script(&self) -> crate::modelgate::mock::MockScript {
        crate::modelgate::mock::MockScript {
            rephrase_verdict: self.rephrase_verdict,
            echo_rephrase: self.echo_rephrase,
            extra_positive_byte: self.extra_positives.then_some(self.extra_positive_byte),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Title-band height as a fraction of page height.
    pub band_frac: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { band_frac: DEFAULT_BAND_FRAC }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub queries_per_page: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { queries_per_page: DEFAULT_QUERIES_PER_PAGE }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RephraseConfig {
    /// What to do when a level fails verification: drop the query
    /// (benchmark construction) or retain the original text (training data).
    pub policy: RephrasePolicy,
    /// Generate-and-verify attempts per level.
    pub retries: u32,
}

impl Default for RephraseConfig {
    fn default() -> Self {
        Self { policy: RephrasePolicy::DropOnFail, retries: DEFAULT_REPHRASE_RETRIES }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelingConfig {
    /// Restrict the sweep to the top-K BM25 pages per query (plus the
    /// source page). Off by default: the benchmark contract is exhaustive.
    pub prescreen: bool,
    pub prescreen_k: usize,
    /// Maximum tolerated share of unparseable relevance answers.
    pub flag_rate_limit: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            prescreen: false,
            prescreen_k: DEFAULT_PRESCREEN_K,
            flag_rate_limit: DEFAULT_FLAG_RATE_LIMIT,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Share of triplets whose query is rephrased.
    pub fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { fraction: DEFAULT_REPHRASE_FRACTION }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Candidate-list depth per query.
    pub k: usize,
    /// Which retrievers to run.
    pub retrievers: Vec<String>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            retrievers: KNOWN_RETRIEVERS.iter().map(|name| name.to_string()).collect(),
        }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Page-manifest file of the source corpus.
    pub corpus_manifest: PathBuf,
    /// Where all stage artifacts land.
    pub output_dir: PathBuf,
    /// Seed for every sampling decision (currently: training augmentation).
    pub seed: u64,
    pub endpoints: EndpointsConfig,
    #[serde(default)]
    pub templates: TemplatesConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub mock: MockConfig,
    #[serde(default)]
    pub ingest: IngestConfig,
    #[serde(default)]
    pub generate: GenerateConfig,
    #[serde(default)]
    pub rephrase: RephraseConfig,
    #[serde(default)]
    pub labeling: LabelingConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

fn bad(message: impl Into<String>) -> StageError {
    StageError::Config(message.into())
}

impl PipelineConfig {
    /// Parses a TOML config, resolving relative paths against the config
    /// file's directory and validating the result.
    pub fn load(path: &Path) -> Result<Self, StageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| StageError::io("read config", path, source))?;
        let mut config: Self = toml::from_str(&text)
            .map_err(|err| bad(format!("{}: {err}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    /// Rewrites every relative path in the config to be absolute under
    /// `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |path: &mut PathBuf| {
            if path.is_relative() {
                *path = base.join(&path);
            }
        };
        resolve(&mut self.corpus_manifest);
        resolve(&mut self.output_dir);
        if let Some(dir) = &mut self.gateway.cache_dir {
            resolve(dir);
        }
        if let Some(fixtures) = &mut self.mock.fixtures {
            resolve(fixtures);
        }
        for slot in [
            &mut self.templates.query_gen,
            &mut self.templates.query_verify,
            &mut self.templates.rephrase_l1,
            &mut self.templates.rephrase_l2,
            &mut self.templates.rephrase_l3,
            &mut self.templates.rephrase_verify,
            &mut self.templates.relevance,
            &mut self.templates.evidence,
        ]
        .into_iter()
        .flatten()
        {
            resolve(slot);
        }
    }

    /// Checks referenced files, endpoint kinds, and numeric ranges.
    pub fn validate(&self) -> Result<(), StageError> {
        if !self.corpus_manifest.is_file() {
            return Err(bad(format!(
                "corpus_manifest does not exist: {}",
                self.corpus_manifest.display()
            )));
        }
        for (name, path) in self.templates.paths() {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(bad(format!(
                        "templates.{name} does not exist: {}",
                        path.display()
                    )));
                }
            }
        }
        if let Some(fixtures) = &self.mock.fixtures {
            if !fixtures.is_file() {
                return Err(bad(format!("mock.fixtures does not exist: {}", fixtures.display())));
            }
        }

        let require_kind = |role: &str, config: &EndpointConfig, kind: EndpointKind| {
            if config.kind == kind {
                Ok(())
            } else {
                Err(bad(format!(
                    "endpoints.{role} must have kind {kind:?}, got {:?}",
                    config.kind
                )))
            }
        };
        require_kind("query_gen", &self.endpoints.query_gen, EndpointKind::Vlm)?;
        require_kind("relevance", &self.endpoints.relevance, EndpointKind::Vlm)?;
        require_kind("caption", &self.endpoints.caption, EndpointKind::Vlm)?;
        require_kind("embed", &self.endpoints.embed, EndpointKind::Embedding)?;
        for (role, config) in [
            ("verify", &self.endpoints.verify),
            ("rephrase", &self.endpoints.rephrase),
        ] {
            if config.kind == EndpointKind::Embedding {
                return Err(bad(format!(
                    "endpoints.{role} is a text role and cannot use an embedding endpoint"
                )));
            }
        }
        for (role, config) in self.roles_for_validation() {
            if config.model_name.trim().is_empty() {
                return Err(bad(format!("endpoints.{role}: model_name is empty")));
            }
            if self.gateway.backend == GatewayBackend::Http && config.base_url.trim().is_empty() {
                return Err(bad(format!(
                    "endpoints.{role}: base_url is required for the http backend"
                )));
            }
            if !config.temperature.is_finite() || config.temperature < 0.0 {
                return Err(bad(format!("endpoints.{role}: temperature must be ≥ 0")));
            }
            if config.max_tokens == 0 {
                return Err(bad(format!("endpoints.{role}: max_tokens must be ≥ 1")));
            }
            if config.timeout_secs == 0 {
                return Err(bad(format!("endpoints.{role}: timeout_secs must be ≥ 1")));
            }
        }

        if self.gateway.in_flight == 0 {
            return Err(bad("gateway.in_flight must be ≥ 1"));
        }
        if !(0.001..=0.5).contains(&self.ingest.band_frac) {
            return Err(bad(format!(
                "ingest.band_frac must be in (0, 0.5], got {}",
                self.ingest.band_frac
            )));
        }
        if self.generate.queries_per_page == 0 {
            return Err(bad("generate.queries_per_page must be ≥ 1"));
        }
        if self.rephrase.retries == 0 {
            return Err(bad("rephrase.retries must be ≥ 1"));
        }
        if self.labeling.prescreen && self.labeling.prescreen_k == 0 {
            return Err(bad("labeling.prescreen_k must be ≥ 1 when prescreen is enabled"));
        }
        if !(0.0..=1.0).contains(&self.labeling.flag_rate_limit) {
            return Err(bad(format!(
                "labeling.flag_rate_limit must be in [0, 1], got {}",
                self.labeling.flag_rate_limit
            )));
        }
        if !(0.0..=1.0).contains(&self.augment.fraction) || !self.augment.fraction.is_finite() {
            return Err(bad(format!(
                "augment.fraction must be in [0, 1], got {}",
                self.augment.fraction
            )));
        }
        if self.evaluate.k == 0 {
            return Err(bad("evaluate.k must be ≥ 1"));
        }
        if self.evaluate.retrievers.is_empty() {
            return Err(bad("evaluate.retrievers must name at least one retriever"));
        }
        for name in &self.evaluate.retrievers {
            if !KNOWN_RETRIEVERS.contains(&name.as_str()) {
                return Err(bad(format!(
                    "evaluate.retrievers: unknown retriever `{name}` (known: {})",
                    KNOWN_RETRIEVERS.join(", ")
                )));
            }
        }
        Ok(())
    }

    fn roles_for_validation(&self) -> [(&'static str, &EndpointConfig); 6] {
        self.endpoints.roles()
    }

    /// Content digest of the resolved configuration, embedded in stage
    /// receipts so artifacts are never reused across config changes.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())
    }
}
