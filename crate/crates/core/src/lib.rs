//! Library for constructing and evaluating multi-modal RAG retrieval benchmarks.
//!
//! The pipeline turns a page-image document corpus into a retrieval benchmark in
//! four stages, mirroring how such benchmarks are assembled by hand, but fully
//! automated and resumable:
//!
//! 1. **Query generation** ([`querygen`]) — a vision model proposes query/answer
//!    pairs per page.
//! 2. **Query verification** ([`querygen`]) — a language model filters out pairs
//!    that are not realistic retrieval queries (page references, underspecified
//!    questions).
//! 3. **Query rephrasing** ([`rephrase`]) — three escalating rephrasings per
//!    query, each verified to preserve meaning and answerability, so every query
//!    exists in four versions (levels 0–3).
//! 4. **False-negative labeling** ([`labeling`]) — every query is judged against
//!    every page; only queries whose sole verified positive is their source page
//!    survive into the benchmark.
//!
//! Evaluation lives in [`retrievers`] (BM25, dense, and late-interaction MaxSim
//! scoring with chunk→page max pooling) and [`metrics`] (NDCG@5, Recall@1/5 per
//! rephrasing level and evidence type). [`benchio`] serializes the finished
//! bundle and emits the two training-set products (query/answer/page triplets
//! and the half-rephrased augmentation).
//!
//! All model traffic goes through [`modelgate`], which adds retries, an on-disk
//! content-addressed response cache, and a deterministic offline mock, so the
//! entire pipeline is testable and bit-reproducible without live endpoints.

pub mod benchio;
pub mod config;
pub mod corpus;
pub mod digest;
pub mod labeling;
pub mod metrics;
pub mod modelgate;
pub mod pipeline;
pub mod querygen;
pub mod rephrase;
pub mod retrievers;
pub mod stage;
pub mod template;

pub use stage::StageError;

/// Toolkit version recorded in bundle metadata and stage receipts.
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
