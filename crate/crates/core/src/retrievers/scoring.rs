//! Vector scoring primitives: dense dot product and MaxSim late interaction.
//!
//! Both run in `f32`, matching how embedding producers emit vectors. The
//! accumulation order is fixed (vector index order, then document order), so
//! scores are bit-for-bit reproducible — float addition is not associative,
//! and a "fast path" that reassociated sums would silently change rankings.

use super::RetrieverError;

/// Dot product of two equal-dimension vectors.
///
/// Vectors are assumed pre-normalized by their producer when cosine
/// similarity is intended; the toolkit never re-normalizes.
pub fn dense_score(query: &[f32], doc: &[f32]) -> Result<f32, RetrieverError> {
    if query.len() != doc.len() {
        return Err(RetrieverError::DimMismatch { left: query.len(), right: doc.len() });
    }
    Ok(query.iter().zip(doc).map(|(q, d)| q * d).sum())
}

/// ColBERT-style late interaction: for each query vector, the maximum dot
/// product over all document vectors; summed over query vectors.
pub fn maxsim(query_vectors: &[Vec<f32>], doc_vectors: &[Vec<f32>]) -> Result<f32, RetrieverError> {
    if query_vectors.is_empty() {
        return Err(RetrieverError::EmptyVectors { side: "query" });
    }
    if doc_vectors.is_empty() {
        return Err(RetrieverError::EmptyVectors { side: "document" });
    }
    let dim = query_vectors[0].len();
    for v in query_vectors.iter().chain(doc_vectors) {
        if v.len() != dim {
            return Err(RetrieverError::DimMismatch { left: dim, right: v.len() });
        }
    }

    let mut total = 0f32;
    for q in query_vectors {
        let mut best = f32::NEG_INFINITY;
        for d in doc_vectors {
            let mut dot = 0f32;
            for (a, b) in q.iter().zip(d) {
                dot += a * b;
            }
            if dot > best {
                best = dot;
            }
        }
        total += best;
    }
    Ok(total)
}
