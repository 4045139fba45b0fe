//! Okapi BM25 over chunks.
//!
//! The sparse baseline retriever: an inverted index over chunk text with the
//! standard Okapi scoring function,
//!
//! ```text
//! score(c, q) = Σ_t IDF(t) · tf(t,c)·(k1+1) / (tf(t,c) + k1·(1 − b + b·|c|/avg_len))
//! ```
//!
//! summed over query term occurrences. IDF uses the smoothed non-negative
//! form `ln(1 + (N − df + 0.5)/(df + 0.5))`, so a term present in every
//! chunk contributes little but never flips a score's sign.

use std::collections::HashMap;

use super::RetrieverError;

/// Default term-frequency saturation parameter.
pub const DEFAULT_K1: f64 = 1.5;
/// Default length-normalization parameter.
pub const DEFAULT_B: f64 = 0.75;

/// Case-folds and splits on non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Inverted index over a fixed set of chunks.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    /// term → (chunk slot, term frequency), slots ascending.
    postings: HashMap<String, Vec<(usize, u32)>>,
    chunk_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_len: f64,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    /// Builds an index over `(chunk_id, content)` pairs.
    pub fn build<'a, I>(chunks: I, k1: f64, b: f64) -> Result<Self, RetrieverError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut chunk_ids = Vec::new();
        let mut doc_lengths = Vec::new();

        for (chunk_id, content) in chunks {
            let slot = chunk_ids.len();
            chunk_ids.push(chunk_id.to_string());
            let tokens = tokenize(content);
            doc_lengths.push(tokens.len() as u32);

            let mut frequencies: HashMap<String, u32> = HashMap::new();
            for token in tokens {
                *frequencies.entry(token).or_default() += 1;
            }
            for (term, tf) in frequencies {
                postings.entry(term).or_default().push((slot, tf));
            }
        }
        if chunk_ids.is_empty() {
            return Err(RetrieverError::EmptyCorpus);
        }
        for list in postings.values_mut() {
            list.sort_unstable_by_key(|&(slot, _)| slot);
        }
        let avg_len =
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64;
        Ok(Self { postings, chunk_ids, doc_lengths, avg_len, k1, b })
    }

    /// Number of indexed chunks.
    pub fn len(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunk_ids.is_empty()
    }

    /// Mean chunk length in tokens.
    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    /// Smoothed inverse document frequency of a term (0 for unseen terms'
    /// absent postings — unseen terms simply contribute nothing to scores).
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.postings.get(term).map_or(0, |l| l.len()) as f64;
        let n = self.chunk_ids.len() as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Scores every chunk against `query`, omitting zero scores.
    ///
    /// Results are ordered by descending score, ties broken by ascending
    /// chunk id so rankings are fully deterministic.
    pub fn score(&self, query: &str) -> Vec<(String, f64)> {
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for &(slot, tf) in list {
                let tf = tf as f64;
                let len_norm =
                    1.0 - self.b + self.b * self.doc_lengths[slot] as f64 / self.avg_len;
                let saturated = tf * (self.k1 + 1.0) / (tf + self.k1 * len_norm);
                *scores.entry(slot).or_default() += idf * saturated;
            }
        }
        let mut ranked: Vec<(String, f64)> = scores
            .into_iter()
            .filter(|&(_, score)| score != 0.0)
            .map(|(slot, score)| (self.chunk_ids[slot].clone(), score))
            .collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("BM25 scores are finite")
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_index() -> Bm25Index {
        Bm25Index::build(
            [
                ("d1", "ibm revenue growth"),
                ("d2", "ibm profit"),
                ("d3", "weather report"),
            ],
            DEFAULT_K1,
            DEFAULT_B,
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_case_folds_and_splits_on_non_alphanumeric() {
        assert_eq!(
            tokenize("IBM's Q3-2016 net_revenue?"),
            vec!["ibm", "s", "q3", "2016", "net", "revenue"]
        );
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn avg_len_is_mean_token_count() {
        let index =
            Bm25Index::build([("a", "one two three"), ("b", "one two"), ("c", "one")], 1.5, 0.75)
                .unwrap();
        assert_eq!(index.avg_len(), 2.0);
        assert_eq!(index.len(), 3);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let chunks: [(&str, &str); 0] = [];
        assert!(matches!(
            Bm25Index::build(chunks, 1.5, 0.75).unwrap_err(),
            RetrieverError::EmptyCorpus
        ));
    }

    #[test]
    fn revenue_query_ranks_d1_first() {
        let ranked = toy_index().score("revenue");
        assert_eq!(ranked[0].0, "d1");
        assert_eq!(ranked.len(), 1, "only d1 mentions revenue");
    }

    #[test]
    fn ubiquitous_terms_have_minimal_idf() {
        let index = toy_index();
        // "ibm" appears in 2 of 3 chunks; "weather" in 1.
        assert!(index.idf("ibm") <= index.idf("weather"));
        assert!(index.idf("ibm") > 0.0, "smoothed IDF stays positive");
        // A term in every chunk is still ≤ any rarer term.
        let all = Bm25Index::build([("a", "x y"), ("b", "x z")], 1.5, 0.75).unwrap();
        assert!(all.idf("x") <= all.idf("y"));
    }

    #[test]
    fn query_with_no_indexed_terms_scores_nothing() {
        assert!(toy_index().score("cryptocurrency").is_empty());
    }

    #[test]
    fn duplicate_query_terms_preserve_ranking_order() {
        let index = Bm25Index::build(
            [
                ("d1", "revenue revenue revenue growth"),
                ("d2", "revenue profit profit"),
                ("d3", "profit outlook"),
            ],
            DEFAULT_K1,
            DEFAULT_B,
        )
        .unwrap();
        let single: Vec<String> = index.score("revenue").into_iter().map(|(id, _)| id).collect();
        let doubled: Vec<String> = index
            .score("revenue revenue")
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        assert_eq!(single, doubled);
        // Scores scale exactly by the duplication factor.
        for ((_, a), (_, b)) in index.score("revenue").iter().zip(index.score("revenue revenue")) {
            assert!((b - 2.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_is_invariant_under_chunk_reordering() {
        let chunks = [
            ("a", "alpha beta gamma"),
            ("b", "beta gamma delta"),
            ("c", "gamma delta epsilon"),
            ("d", "alpha alpha beta"),
        ];
        let forward = Bm25Index::build(chunks, 1.5, 0.75).unwrap();
        let mut reversed_chunks = chunks;
        reversed_chunks.reverse();
        let reversed = Bm25Index::build(reversed_chunks, 1.5, 0.75).unwrap();
        for query in ["alpha", "beta gamma", "delta epsilon alpha"] {
            assert_eq!(forward.score(query), reversed.score(query), "query `{query}`");
        }
    }

    /// Independent formula evaluation for one chunk, mirroring the docs.
    fn brute_force_score(
        corpus: &[(&str, &str)],
        chunk: &str,
        query: &str,
        k1: f64,
        b: f64,
    ) -> f64 {
        let n = corpus.len() as f64;
        let lengths: HashMap<&str, f64> = corpus
            .iter()
            .map(|(id, text)| (*id, tokenize(text).len() as f64))
            .collect();
        let avg = lengths.values().sum::<f64>() / n;
        let content = corpus.iter().find(|(id, _)| *id == chunk).unwrap().1;
        let tokens = tokenize(content);
        let mut score = 0.0;
        for term in tokenize(query) {
            let df = corpus
                .iter()
                .filter(|(_, text)| tokenize(text).contains(&term))
                .count() as f64;
            let tf = tokens.iter().filter(|t| **t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * lengths[chunk] / avg));
        }
        score
    }

    #[test]
    fn single_term_scores_match_brute_force() {
        let corpus = [
            ("d1", "ibm revenue growth revenue"),
            ("d2", "ibm profit margin"),
            ("d3", "weather report today"),
            ("d4", "revenue and profit report"),
        ];
        let index = Bm25Index::build(corpus, DEFAULT_K1, DEFAULT_B).unwrap();
        for query in ["revenue", "profit", "ibm", "report"] {
            let ranked = index.score(query);
            for (chunk_id, score) in ranked {
                let expected = brute_force_score(&corpus, &chunk_id, query, DEFAULT_K1, DEFAULT_B);
                assert!(
                    (score - expected).abs() < 1e-12,
                    "query `{query}` chunk `{chunk_id}`: {score} vs {expected}"
                );
            }
        }
    }
}
