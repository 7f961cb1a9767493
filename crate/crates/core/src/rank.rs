//! Deterministic TF-IDF cosine ranking shared by template retrieval and tool search.

use std::collections::{BTreeMap, BTreeSet};

/// Lowercase alphanumeric tokens, in order of appearance.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(|t| t.to_lowercase()).collect()
}

/// A TF-IDF index over a fixed corpus of documents.
///
/// Uses raw term counts and the smoothed inverse document frequency
/// `ln((1 + N) / (1 + df)) + 1`, so every term keeps a positive weight and
/// the cosine of two non-negative vectors stays in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    doc_vectors: Vec<BTreeMap<String, f64>>,
    doc_freq: BTreeMap<String, usize>,
    n_docs: usize,
}

impl TfIdfIndex {
    pub fn new<I, S>(documents: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let counts: Vec<BTreeMap<String, f64>> = documents.into_iter().map(|d| term_counts(d.as_ref())).collect();
        let mut doc_freq = BTreeMap::new();
        for doc in &counts {
            for term in doc.keys() {
                *doc_freq.entry(term.clone()).or_insert(0) += 1;
            }
        }
        let mut index = Self { doc_vectors: Vec::new(), doc_freq, n_docs: counts.len() };
        index.doc_vectors = counts.into_iter().map(|c| index.weigh(c)).collect();
        index
    }

    pub fn len(&self) -> usize {
        self.n_docs
    }

    pub fn is_empty(&self) -> bool {
        self.n_docs == 0
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        ((1.0 + self.n_docs as f64) / (1.0 + df)).ln() + 1.0
    }

    fn weigh(&self, counts: BTreeMap<String, f64>) -> BTreeMap<String, f64> {
        counts
            .into_iter()
            .map(|(t, c)| {
                let w = c * self.idf(&t);
                (t, w)
            })
            .collect()
    }

    /// Cosine similarity between `query` and every document, in corpus order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let q = self.weigh(term_counts(query));
        self.doc_vectors.iter().map(|d| cosine(&q, d)).collect()
    }
}

fn term_counts(text: &str) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    for t in tokenize(text) {
        *counts.entry(t).or_insert(0.0) += 1.0;
    }
    counts
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(t, w)| b.get(t).map(|v| w * v)).sum();
    let na = a.values().map(|w| w * w).sum::<f64>().sqrt();
    let nb = b.values().map(|w| w * w).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Unique lowercase tokens of `text`.
pub fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("Find  the MTF1-keystone, gene!"), vec!["find", "the", "mtf1", "keystone", "gene"]);
        assert!(tokenize("  --  ").is_empty());
    }

    #[test]
    fn identical_text_scores_one() {
        let idx = TfIdfIndex::new(["differential expression analysis", "protein folding"]);
        let s = idx.scores("Differential expression analysis");
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn empty_query_or_corpus() {
        let idx = TfIdfIndex::new(Vec::<String>::new());
        assert!(idx.scores("anything").is_empty());
        let idx = TfIdfIndex::new(["a b"]);
        assert_eq!(idx.scores(""), vec![0.0]);
    }
}
