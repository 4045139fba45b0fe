//! Embedding sets and their on-disk format.
//!
//! The toolkit never runs vision towers or embedding models itself; vectors
//! arrive either from an embedding endpoint or from files produced by
//! external encoders. An [`EmbeddingSet`] holds one entry per id — a single
//! vector for dense retrieval, or an ordered list of vectors per id for
//! late-interaction retrieval.
//!
//! File format: one JSON header line `{format, version, unit, dim, multi,
//! count}`, then `count` binary records sorted by id — `u16` little-endian id
//! length, the UTF-8 id, `u32` little-endian vector count, then that many
//! `dim`-length runs of little-endian `f32`. Sorting makes writes
//! byte-deterministic; little-endian f32 preserves exact bits.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RetrieverError;

/// What each embedded id denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedUnit {
    Page,
    Chunk,
}

/// A validated collection of embeddings, all of one dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub unit: EmbedUnit,
    pub dim: usize,
    /// True when ids map to ordered lists of vectors (late interaction);
    /// false when every id has exactly one vector (dense).
    pub multi: bool,
    vectors: BTreeMap<String, Vec<Vec<f32>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingHeader {
    format: String,
    version: u32,
    unit: EmbedUnit,
    dim: usize,
    multi: bool,
    count: usize,
}

const EMBEDDING_FORMAT: &str = "ragbench/embeddings";

impl EmbeddingSet {
    pub fn new(unit: EmbedUnit, dim: usize, multi: bool) -> Self {
        Self { unit, dim, multi, vectors: BTreeMap::new() }
    }

    /// Adds an id's vectors, enforcing the set's shape invariants.
    pub fn insert(&mut self, id: &str, vectors: Vec<Vec<f32>>) -> Result<(), RetrieverError> {
        if vectors.is_empty() {
            return Err(RetrieverError::Embedding(format!(
                "id `{id}`: vector list must be non-empty"
            )));
        }
        if !self.multi && vectors.len() != 1 {
            return Err(RetrieverError::Embedding(format!(
                "id `{id}`: dense set requires exactly one vector, got {}",
                vectors.len()
            )));
        }
        for v in &vectors {
            if v.len() != self.dim {
                return Err(RetrieverError::DimMismatch { left: self.dim, right: v.len() });
            }
        }
        self.vectors.insert(id.to_string(), vectors);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Vec<Vec<f32>>> {
        self.vectors.get(id)
    }

    /// The single vector for `id` (dense sets).
    pub fn single(&self, id: &str) -> Option<&[f32]> {
        self.vectors.get(id).map(|v| v[0].as_slice())
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.vectors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<Vec<f32>>)> {
        self.vectors.iter()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Writes the set; records are emitted in id order, so identical sets
    /// always produce identical bytes.
    pub fn write(&self, path: &Path) -> Result<(), RetrieverError> {
        let io_err = |source| RetrieverError::Io { path: path.to_path_buf(), source };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut out = std::io::BufWriter::new(file);

        let header = EmbeddingHeader {
            format: EMBEDDING_FORMAT.to_string(),
            version: 1,
            unit: self.unit,
            dim: self.dim,
            multi: self.multi,
            count: self.vectors.len(),
        };
        let mut header_line = serde_json::to_string(&header)
            .map_err(|err| RetrieverError::Embedding(err.to_string()))?;
        header_line.push('\n');
        out.write_all(header_line.as_bytes()).map_err(io_err)?;

        for (id, vectors) in &self.vectors {
            let id_bytes = id.as_bytes();
            let id_len = u16::try_from(id_bytes.len()).map_err(|_| {
                RetrieverError::Embedding(format!("id `{id}` exceeds 65535 bytes"))
            })?;
            out.write_all(&id_len.to_le_bytes()).map_err(io_err)?;
            out.write_all(id_bytes).map_err(io_err)?;
            out.write_all(&(vectors.len() as u32).to_le_bytes()).map_err(io_err)?;
            for vector in vectors {
                for value in vector {
                    out.write_all(&value.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
        out.flush().map_err(io_err)
    }

    /// Reads a set written by [`EmbeddingSet::write`], validating shapes.
    pub fn read(path: &Path) -> Result<Self, RetrieverError> {
        let io_err = |source| RetrieverError::Io { path: path.to_path_buf(), source };
        let bad = |message: String| RetrieverError::Embedding(format!("{}: {message}", path.display()));
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut reader = BufReader::new(file);

        let mut header_line = String::new();
        reader.read_line(&mut header_line).map_err(io_err)?;
        let header: EmbeddingHeader = serde_json::from_str(header_line.trim_end())
            .map_err(|err| bad(format!("bad header: {err}")))?;
        if header.format != EMBEDDING_FORMAT {
            return Err(bad(format!("unexpected format `{}`", header.format)));
        }
        if header.version != 1 {
            return Err(bad(format!("unsupported version {}", header.version)));
        }

        let mut set = Self::new(header.unit, header.dim, header.multi);
        for record in 0..header.count {
            let mut len_bytes = [0u8; 2];
            reader
                .read_exact(&mut len_bytes)
                .map_err(|_| bad(format!("truncated at record {record}")))?;
            let id_len = u16::from_le_bytes(len_bytes) as usize;
            let mut id_bytes = vec![0u8; id_len];
            reader
                .read_exact(&mut id_bytes)
                .map_err(|_| bad(format!("truncated id at record {record}")))?;
            let id = String::from_utf8(id_bytes)
                .map_err(|_| bad(format!("record {record} id is not UTF-8")))?;

            let mut count_bytes = [0u8; 4];
            reader
                .read_exact(&mut count_bytes)
                .map_err(|_| bad(format!("truncated vector count for `{id}`")))?;
            let n_vecs = u32::from_le_bytes(count_bytes) as usize;
            if n_vecs == 0 {
                return Err(bad(format!("id `{id}` carries zero vectors")));
            }

            let mut vectors = Vec::with_capacity(n_vecs);
            let mut buf = vec![0u8; header.dim * 4];
            for _ in 0..n_vecs {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| bad(format!("truncated vectors for `{id}`")))?;
                let vector: Vec<f32> = buf
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                vectors.push(vector);
            }
            set.insert(&id, vectors)?;
        }
        let mut trailing = [0u8; 1];
        if reader.read(&mut trailing).map_err(io_err)? != 0 {
            return Err(bad("trailing bytes after final record".into()));
        }
        Ok(set)
    }
}
