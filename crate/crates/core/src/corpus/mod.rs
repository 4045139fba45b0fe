//! Corpus model: documents, page images, and pre-parsed chunks.
//!
//! A corpus enters the toolkit through a line-delimited manifest (one JSON
//! object per page). Ingestion resolves and validates everything up front —
//! image files must exist, (document, page) pairs must be unique, chunk files
//! must parse — so later stages can assume a well-formed, immutable
//! [`CorpusIndex`]. Page ids are content-derived from (doc_id, page_number),
//! which keeps qrels stable across re-ingests of the same corpus.
//!
//! Parsing PDFs, OCR, and captioning are all external: chunk files may come
//! from any parser. The toolkit records only whether a chunk's text came from
//! OCR or from a vision model captioning pass.

pub mod stamp;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::short_id;

/// Layout role of a chunk within its page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkKind {
    Text,
    Table,
    Figure,
    Image,
}

impl ChunkKind {
    pub fn name(self) -> &'static str {
        match self {
            ChunkKind::Text => "text",
            ChunkKind::Table => "table",
            ChunkKind::Figure => "figure",
            ChunkKind::Image => "image",
        }
    }
}

/// Where a chunk's text came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkSource {
    Ocr,
    Captioning,
}

/// One retrievable unit of page content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub page_id: String,
    pub kind: ChunkKind,
    pub content: String,
    pub source: ChunkSource,
}

/// One source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub title: String,
    pub collection_tag: String,
    pub page_count: usize,
}

/// One page of a document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRecord {
    pub page_id: String,
    pub doc_id: String,
    /// 1-based position within the owning document.
    pub page_number: u32,
    /// Raster image for this page; absolute at runtime.
    pub image_ref: PathBuf,
    /// Whether the document title has been rendered onto the image.
    pub stamped: bool,
    pub chunks: Vec<Chunk>,
}

/// Errors raised while ingesting or serializing a corpus.
#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("page {page_number} of document `{doc_id}`: image file not found: {path}")]
    MissingImage {
        doc_id: String,
        page_number: u32,
        path: PathBuf,
    },

    #[error("duplicate page: document `{doc_id}` page {page_number} appears twice")]
    DuplicatePage { doc_id: String, page_number: u32 },

    #[error("document `{doc_id}` has conflicting {field}: `{first}` vs `{second}`")]
    ConflictingDocument {
        doc_id: String,
        field: &'static str,
        first: String,
        second: String,
    },

    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("page `{page_id}` is already stamped; stamping twice would double-render the title")]
    AlreadyStamped { page_id: String },

    #[error("unknown page id `{page_id}`")]
    UnknownPage { page_id: String },
}

/// One manifest line.
#[derive(Debug, Deserialize)]
struct ManifestRow {
    doc_id: String,
    title: String,
    collection: String,
    page_number: u32,
    image_path: String,
    #[serde(default)]
    chunks_path: Option<String>,
}

/// One chunk-file line.
#[derive(Debug, Deserialize)]
struct ChunkRow {
    kind: ChunkKind,
    content: String,
    source: ChunkSource,
}

/// Immutable, validated corpus: documents plus pages ordered by
/// (doc_id, page_number).
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIndex {
    documents: BTreeMap<String, DocumentRecord>,
    pages: Vec<PageRecord>,
    by_page_id: BTreeMap<String, usize>,
}

impl CorpusIndex {
    /// Ingests a corpus manifest, validating images, uniqueness, and chunks.
    ///
    /// Relative `image_path`/`chunks_path` entries resolve against the
    /// manifest file's directory, so corpora stay relocatable.
    pub fn ingest(manifest: &Path) -> Result<Self, CorpusError> {
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        let file = fs::File::open(manifest)
            .map_err(|source| CorpusError::Io { path: manifest.to_path_buf(), source })?;

        let mut documents: BTreeMap<String, DocumentRecord> = BTreeMap::new();
        let mut pages: Vec<PageRecord> = Vec::new();
        let mut seen: BTreeMap<(String, u32), ()> = BTreeMap::new();

        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line
                .map_err(|source| CorpusError::Io { path: manifest.to_path_buf(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(&line).map_err(|err| {
                CorpusError::Manifest {
                    path: manifest.to_path_buf(),
                    line: lineno + 1,
                    message: err.to_string(),
                }
            })?;
            let invalid = |message: String| CorpusError::Manifest {
                path: manifest.to_path_buf(),
                line: lineno + 1,
                message,
            };
            if row.doc_id.is_empty() {
                return Err(invalid("doc_id must be non-empty".into()));
            }
            if row.title.is_empty() {
                return Err(invalid("title must be non-empty".into()));
            }
            if row.page_number == 0 {
                return Err(invalid("page_number is 1-based and must be ≥ 1".into()));
            }

            if seen
                .insert((row.doc_id.clone(), row.page_number), ())
                .is_some()
            {
                return Err(CorpusError::DuplicatePage {
                    doc_id: row.doc_id,
                    page_number: row.page_number,
                });
            }

            let image_ref = base.join(&row.image_path);
            if !image_ref.is_file() {
                return Err(CorpusError::MissingImage {
                    doc_id: row.doc_id,
                    page_number: row.page_number,
                    path: image_ref,
                });
            }

            // First row for a document fixes its metadata; later rows must agree.
            match documents.get_mut(&row.doc_id) {
                None => {
                    documents.insert(
                        row.doc_id.clone(),
                        DocumentRecord {
                            doc_id: row.doc_id.clone(),
                            title: row.title.clone(),
                            collection_tag: row.collection.clone(),
                            page_count: 0,
                        },
                    );
                }
                Some(doc) => {
                    if doc.title != row.title {
                        return Err(CorpusError::ConflictingDocument {
                            doc_id: row.doc_id,
                            field: "title",
                            first: doc.title.clone(),
                            second: row.title,
                        });
                    }
                    if doc.collection_tag != row.collection {
                        return Err(CorpusError::ConflictingDocument {
                            doc_id: row.doc_id,
                            field: "collection",
                            first: doc.collection_tag.clone(),
                            second: row.collection,
                        });
                    }
                }
            }

            let page_id = page_id(&row.doc_id, row.page_number);
            let chunks = match &row.chunks_path {
                Some(rel) => load_chunks(&base.join(rel), &page_id)?,
                None => Vec::new(),
            };
            pages.push(PageRecord {
                page_id,
                doc_id: row.doc_id,
                page_number: row.page_number,
                image_ref,
                stamped: false,
                chunks,
            });
        }

        pages.sort_by(|a, b| (&a.doc_id, a.page_number).cmp(&(&b.doc_id, b.page_number)));
        for doc in documents.values_mut() {
            doc.page_count = pages.iter().filter(|p| p.doc_id == doc.doc_id).count();
        }
        Ok(Self::from_parts(documents, pages))
    }

    fn from_parts(documents: BTreeMap<String, DocumentRecord>, pages: Vec<PageRecord>) -> Self {
        let by_page_id = pages
            .iter()
            .enumerate()
            .map(|(i, p)| (p.page_id.clone(), i))
            .collect();
        Self { documents, pages, by_page_id }
    }

    /// Documents in doc_id order.
    pub fn documents(&self) -> impl Iterator<Item = &DocumentRecord> {
        self.documents.values()
    }

    pub fn document(&self, doc_id: &str) -> Option<&DocumentRecord> {
        self.documents.get(doc_id)
    }

    /// Pages ordered by (doc_id, page_number).
    pub fn pages(&self) -> &[PageRecord] {
        &self.pages
    }

    pub fn page(&self, page_id: &str) -> Option<&PageRecord> {
        self.by_page_id.get(page_id).map(|&i| &self.pages[i])
    }

    /// Title of the document owning `page`.
    pub fn title_of(&self, page: &PageRecord) -> &str {
        self.documents
            .get(&page.doc_id)
            .map(|d| d.title.as_str())
            .unwrap_or("")
    }

    pub fn document_count(&self) -> usize {
        self.documents.len()
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    /// All chunks across all pages, in page order.
    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.pages.iter().flat_map(|p| p.chunks.iter())
    }

    /// Replaces the pages wholesale (used by the stamping stage). Pages must
    /// be the same set, in any order; they are re-sorted and re-indexed.
    pub fn with_pages(&self, mut pages: Vec<PageRecord>) -> Self {
        pages.sort_by(|a, b| (&a.doc_id, a.page_number).cmp(&(&b.doc_id, b.page_number)));
        Self::from_parts(self.documents.clone(), pages)
    }

    /// Writes the corpus as a line-delimited artifact.
    ///
    /// Image paths are stored relative to the artifact's directory whenever
    /// possible, so two runs into different output directories produce
    /// byte-identical artifacts.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut out = String::new();
        out.push_str(&format!("{}\n", header_line(CORPUS_FORMAT)));
        for doc in self.documents.values() {
            let line = serde_json::to_string(&CorpusLine::Document(doc.clone()))
                .expect("document serializes");
            out.push_str(&line);
            out.push('\n');
        }
        for page in &self.pages {
            let mut rel = page.clone();
            rel.image_ref = PathBuf::from(portable_path(&relative_to(dir, &page.image_ref)));
            let line = serde_json::to_string(&CorpusLine::Page(rel)).expect("page serializes");
            out.push_str(&line);
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
    }

    /// Loads a corpus artifact written by [`CorpusIndex::save`].
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let text = fs::read_to_string(path)
            .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
        let mut lines = text.lines().enumerate();

        let (_, header) = lines.next().ok_or_else(|| CorpusError::Manifest {
            path: path.to_path_buf(),
            line: 1,
            message: "empty corpus artifact".into(),
        })?;
        check_header(header, CORPUS_FORMAT).map_err(|message| CorpusError::Manifest {
            path: path.to_path_buf(),
            line: 1,
            message,
        })?;

        let mut documents = BTreeMap::new();
        let mut pages = Vec::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let record: CorpusLine =
                serde_json::from_str(line).map_err(|err| CorpusError::Manifest {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: err.to_string(),
                })?;
            match record {
                CorpusLine::Document(doc) => {
                    documents.insert(doc.doc_id.clone(), doc);
                }
                CorpusLine::Page(mut page) => {
                    if page.image_ref.is_relative() {
                        page.image_ref = lexical_normalize(&dir.join(&page.image_ref));
                    }
                    pages.push(page);
                }
            }
        }
        pages.sort_by(|a, b| (&a.doc_id, a.page_number).cmp(&(&b.doc_id, b.page_number)));
        Ok(Self::from_parts(documents, pages))
    }
}

/// Content-derived page id, stable across re-ingests.
pub fn page_id(doc_id: &str, page_number: u32) -> String {
    short_id(&[doc_id, &page_number.to_string()])
}

fn load_chunks(path: &Path, page_id: &str) -> Result<Vec<Chunk>, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let mut chunks = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ChunkRow = serde_json::from_str(line).map_err(|err| CorpusError::Manifest {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: err.to_string(),
        })?;
        if row.content.trim().is_empty() {
            return Err(CorpusError::Manifest {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "chunk content must be non-empty".into(),
            });
        }
        chunks.push(Chunk {
            chunk_id: short_id(&[page_id, &chunks.len().to_string()]),
            page_id: page_id.to_string(),
            kind: row.kind,
            content: row.content,
            source: row.source,
        });
    }
    Ok(chunks)
}

/// Artifact record: a document or a page line in `corpus.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum CorpusLine {
    Document(DocumentRecord),
    Page(PageRecord),
}

pub(crate) const CORPUS_FORMAT: &str = "ragbench/corpus";

/// Versioned header line shared by all line-delimited artifacts.
pub(crate) fn header_line(format: &str) -> String {
    format!("{{\"format\":\"{format}\",\"version\":1}}")
}

/// Validates a header line against the expected format tag.
pub(crate) fn check_header(line: &str, format: &str) -> Result<(), String> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        version: u32,
    }
    let header: Header =
        serde_json::from_str(line).map_err(|err| format!("bad header line: {err}"))?;
    if header.format != format {
        return Err(format!("expected format `{format}`, found `{}`", header.format));
    }
    if header.version != 1 {
        return Err(format!("unsupported version {}", header.version));
    }
    Ok(())
}

/// Lexically normalized absolute form of `path`: `.` dropped, `..` resolved
/// against the preceding component, relative paths anchored at the current
/// directory. No filesystem access, so unlike `canonicalize` it works for
/// paths that don't exist yet and never follows symlinks.
pub(crate) fn lexical_normalize(path: &Path) -> PathBuf {
    let absolute = if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir().unwrap_or_default().join(path)
    };
    let mut out = PathBuf::new();
    for component in absolute.components() {
        match component {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

/// `to` expressed relative to directory `from` (both made absolute first);
/// falls back to `to` unchanged when no relative walk exists.
pub(crate) fn relative_to(from: &Path, to: &Path) -> PathBuf {
    let from = lexical_normalize(from);
    let to = lexical_normalize(to);
    let from_parts: Vec<_> = from.components().collect();
    let to_parts: Vec<_> = to.components().collect();
    let common = from_parts
        .iter()
        .zip(&to_parts)
        .take_while(|(a, b)| a == b)
        .count();
    if common == 0 {
        return to;
    }
    let mut rel = PathBuf::new();
    for _ in common..from_parts.len() {
        rel.push("..");
    }
    for part in &to_parts[common..] {
        rel.push(part);
    }
    rel
}

/// Forward-slash string form of a path, for artifact portability.
pub(crate) fn portable_path(path: &Path) -> String {
    path.to_string_lossy().replace('\\', "/")
}

/// Per-collection corpus statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionStats {
    pub documents: usize,
    pub pages: usize,
    /// Average pages per document, rounded half away from zero.
    pub avg_doc_pages: u64,
    pub chunk_kinds: BTreeMap<String, usize>,
}

/// Corpus statistics report, per collection plus overall.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub collections: BTreeMap<String, CollectionStats>,
    pub total: CollectionStats,
}

impl StatsReport {
    /// Aligned-text rendering for terminal output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>6} {:>7} {:>9}  chunk kinds\n",
            "collection", "docs", "pages", "avg pages"
        ));
        let mut row = |name: &str, stats: &CollectionStats| {
            let kinds = if stats.chunk_kinds.is_empty() {
                "-".to_string()
            } else {
                stats
                    .chunk_kinds
                    .iter()
                    .map(|(kind, count)| format!("{kind}={count}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            out.push_str(&format!(
                "{:<16} {:>6} {:>7} {:>9}  {kinds}\n",
                name, stats.documents, stats.pages, stats.avg_doc_pages
            ));
        };
        for (name, stats) in &self.collections {
            row(name, stats);
        }
        row("(total)", &self.total);
        out
    }
}

fn stats_for<'a>(
    docs: impl Iterator<Item = &'a DocumentRecord>,
    pages: impl Iterator<Item = &'a PageRecord>,
) -> CollectionStats {
    let documents = docs.count();
    let mut page_count = 0usize;
    let mut chunk_kinds: BTreeMap<String, usize> = BTreeMap::new();
    for page in pages {
        page_count += 1;
        for chunk in &page.chunks {
            *chunk_kinds.entry(chunk.kind.name().to_string()).or_default() += 1;
        }
    }
    let avg_doc_pages = if documents == 0 {
        0
    } else {
        // Round half away from zero, matching how per-document averages are
        // conventionally reported (e.g. 31.66 pages/doc prints as 32).
        (page_count as f64 / documents as f64).round() as u64
    };
    CollectionStats { documents, pages: page_count, avg_doc_pages, chunk_kinds }
}

/// Computes per-collection and total statistics for a corpus.
pub fn corpus_stats(index: &CorpusIndex) -> StatsReport {
    let mut collections: BTreeMap<String, CollectionStats> = BTreeMap::new();
    let tags: std::collections::BTreeSet<String> = index
        .documents()
        .map(|d| d.collection_tag.clone())
        .collect();
    for tag in tags {
        let docs = index.documents().filter(|d| d.collection_tag == tag);
        let doc_ids: std::collections::BTreeSet<&str> = index
            .documents()
            .filter(|d| d.collection_tag == tag)
            .map(|d| d.doc_id.as_str())
            .collect();
        let pages = index
            .pages()
            .iter()
            .filter(|p| doc_ids.contains(p.doc_id.as_str()));
        collections.insert(tag.clone(), stats_for(docs, pages));
    }
    let total = stats_for(index.documents(), index.pages().iter());
    StatsReport { collections, total }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::io::Write as _;

    /// Writes a manifest with `docs × pages_per_doc` tiny valid pages.
    pub(crate) fn write_manifest(
        dir: &Path,
        collection: &str,
        docs: usize,
        pages_per_doc: usize,
        with_chunks: bool,
    ) -> PathBuf {
        let manifest = dir.join("manifest.jsonl");
        let mut out = fs::File::create(&manifest).unwrap();
        for d in 0..docs {
            for p in 1..=pages_per_doc {
                let image = dir.join(format!("d{d}_p{p}.png"));
                fs::write(&image, format!("img-{d}-{p}")).unwrap();
                let chunks_path = if with_chunks {
                    let path = dir.join(format!("d{d}_p{p}.chunks.jsonl"));
                    let mut cf = fs::File::create(&path).unwrap();
                    writeln!(
                        cf,
                        "{}",
                        serde_json::json!({"kind": "text", "content": format!("text of doc {d} page {p}"), "source": "ocr"})
                    )
                    .unwrap();
                    writeln!(
                        cf,
                        "{}",
                        serde_json::json!({"kind": "table", "content": format!("table on doc {d} page {p}"), "source": "ocr"})
                    )
                    .unwrap();
                    Some(format!("d{d}_p{p}.chunks.jsonl"))
                } else {
                    None
                };
                let mut row = serde_json::json!({
                    "doc_id": format!("doc-{d}"),
                    "title": format!("Document {d}"),
                    "collection": collection,
                    "page_number": p,
                    "image_path": format!("d{d}_p{p}.png"),
                });
                if let Some(chunks) = chunks_path {
                    row["chunks_path"] = serde_json::Value::String(chunks);
                }
                writeln!(out, "{row}").unwrap();
            }
        }
        manifest
    }

    #[test]
    fn ingest_counts_documents_and_pages() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_manifest(dir.path(), "test", 2, 3, true);
        let index = CorpusIndex::ingest(&manifest).unwrap();
        assert_eq!(index.document_count(), 2);
        assert_eq!(index.page_count(), 6);
        assert_eq!(index.chunks().count(), 12);
        for doc in index.documents() {
            assert_eq!(doc.page_count, 3);
        }
        // Pages ordered by (doc_id, page_number).
        let order: Vec<(String, u32)> = index
            .pages()
            .iter()
            .map(|p| (p.doc_id.clone(), p.page_number))
            .collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);
    }

    #[test]
    fn ingest_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_manifest(dir.path(), "test", 3, 2, true);
        let a = CorpusIndex::ingest(&manifest).unwrap();
        let b = CorpusIndex::ingest(&manifest).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_image_names_the_page() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        fs::write(
            &manifest,
            serde_json::json!({
                "doc_id": "d", "title": "T", "collection": "c",
                "page_number": 7, "image_path": "missing.png"
            })
            .to_string(),
        )
        .unwrap();
        let err = CorpusIndex::ingest(&manifest).unwrap_err();
        match err {
            CorpusError::MissingImage { doc_id, page_number, .. } => {
                assert_eq!(doc_id, "d");
                assert_eq!(page_number, 7);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_page_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("p.png"), "x").unwrap();
        let row = serde_json::json!({
            "doc_id": "d", "title": "T", "collection": "c",
            "page_number": 1, "image_path": "p.png"
        });
        let manifest = dir.path().join("manifest.jsonl");
        fs::write(&manifest, format!("{row}\n{row}\n")).unwrap();
        assert!(matches!(
            CorpusIndex::ingest(&manifest).unwrap_err(),
            CorpusError::DuplicatePage { .. }
        ));
    }

    #[test]
    fn empty_chunk_content_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("p.png"), "x").unwrap();
        fs::write(
            dir.path().join("p.chunks.jsonl"),
            serde_json::json!({"kind": "text", "content": "  ", "source": "ocr"}).to_string(),
        )
        .unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        fs::write(
            &manifest,
            serde_json::json!({
                "doc_id": "d", "title": "T", "collection": "c",
                "page_number": 1, "image_path": "p.png", "chunks_path": "p.chunks.jsonl"
            })
            .to_string(),
        )
        .unwrap();
        assert!(matches!(
            CorpusIndex::ingest(&manifest).unwrap_err(),
            CorpusError::Manifest { .. }
        ));
    }

    #[test]
    fn page_ids_are_stable_content_derived() {
        assert_eq!(page_id("doc-1", 3), page_id("doc-1", 3));
        assert_ne!(page_id("doc-1", 3), page_id("doc-1", 4));
        assert_ne!(page_id("doc-1", 3), page_id("doc-2", 3));
    }

    #[test]
    fn save_load_round_trip_restores_absolute_paths() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_manifest(dir.path(), "test", 2, 2, true);
        let index = CorpusIndex::ingest(&manifest).unwrap();

        let artifact = dir.path().join("out").join("corpus.jsonl");
        fs::create_dir_all(artifact.parent().unwrap()).unwrap();
        index.save(&artifact).unwrap();

        let text = fs::read_to_string(&artifact).unwrap();
        assert!(text.starts_with("{\"format\":\"ragbench/corpus\",\"version\":1}"));
        // Stored image paths are relative ("../d0_p1.png"), not absolute.
        assert!(!text.contains(dir.path().to_str().unwrap()));

        let loaded = CorpusIndex::load(&artifact).unwrap();
        assert_eq!(loaded.page_count(), index.page_count());
        for (a, b) in loaded.pages().iter().zip(index.pages()) {
            assert_eq!(a.page_id, b.page_id);
            assert_eq!(
                fs::canonicalize(&a.image_ref).unwrap(),
                fs::canonicalize(&b.image_ref).unwrap()
            );
            assert_eq!(a.chunks, b.chunks);
        }
    }

    #[test]
    fn stats_round_half_away_from_zero() {
        let dir = tempfile::tempdir().unwrap();
        // 62 docs × ~31.66 pages: 1963 pages total → average must print 32.
        let manifest = dir.path().join("manifest.jsonl");
        let mut out = fs::File::create(&manifest).unwrap();
        let mut remaining = 1963usize;
        for d in 0..62 {
            let pages = if d < 61 { 1963 / 62 } else { remaining };
            for p in 1..=pages {
                let image = dir.path().join(format!("s{d}_{p}.png"));
                fs::write(&image, "x").unwrap();
                writeln!(
                    out,
                    "{}",
                    serde_json::json!({
                        "doc_id": format!("slides-{d}"), "title": format!("Deck {d}"),
                        "collection": "slides", "page_number": p,
                        "image_path": format!("s{d}_{p}.png")
                    })
                )
                .unwrap();
            }
            remaining -= pages;
        }
        let index = CorpusIndex::ingest(&manifest).unwrap();
        let stats = corpus_stats(&index);
        let slides = &stats.collections["slides"];
        assert_eq!(slides.documents, 62);
        assert_eq!(slides.pages, 1963);
        assert_eq!(slides.avg_doc_pages, 32, "31.66 rounds up, not down");
    }

    #[test]
    fn stats_of_empty_corpus_are_zero() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        fs::write(&manifest, "").unwrap();
        let index = CorpusIndex::ingest(&manifest).unwrap();
        let stats = corpus_stats(&index);
        assert_eq!(stats.total.documents, 0);
        assert_eq!(stats.total.pages, 0);
        assert_eq!(stats.total.avg_doc_pages, 0);
    }

    #[test]
    fn relative_to_walks_up_and_down() {
        let rel = relative_to(Path::new("/a/b/c"), Path::new("/a/x/y.png"));
        assert_eq!(rel, PathBuf::from("../../x/y.png"));
        let rel = relative_to(Path::new("/a"), Path::new("/a/b.png"));
        assert_eq!(rel, PathBuf::from("b.png"));
    }
}
