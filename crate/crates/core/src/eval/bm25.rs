use std::collections::HashMap;

use crate::kb::KnowledgeTriple;

/// `The <property> of <name>: <value>`
pub fn bm25_document(t: &KnowledgeTriple) -> String {
    format!("The {} of {}: {}", t.property, t.name, t.value)
}

/// Lowercase alphanumeric runs.
pub fn tokenize_terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 over a fixed document set.
#[derive(Debug, Clone)]
pub struct Bm25 {
    k1: f64,
    b: f64,
    docs: Vec<HashMap<String, usize>>,
    lengths: Vec<usize>,
    avg_len: f64,
    df: HashMap<String, usize>,
}

impl Bm25 {
    pub fn new(docs: &[String]) -> Self {
        Self::with_params(docs, 1.2, 0.75)
    }

    pub fn with_params(docs: &[String], k1: f64, b: f64) -> Self {
        let mut tfs = Vec::with_capacity(docs.len());
        let mut lengths = Vec::with_capacity(docs.len());
        let mut df: HashMap<String, usize> = HashMap::new();
        for d in docs {
            let terms = tokenize_terms(d);
            lengths.push(terms.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            tfs.push(tf);
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            lengths.iter().sum::<usize>() as f64 / docs.len() as f64
        };
        Self {
            k1,
            b,
            docs: tfs,
            lengths,
            avg_len,
            df,
        }
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Score of every document; each distinct query term counts once.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut terms = tokenize_terms(query);
        let mut seen = std::collections::HashSet::new();
        terms.retain(|t| seen.insert(t.clone()));
        let idfs: Vec<f64> = terms.iter().map(|t| self.idf(t)).collect();
        self.docs
            .iter()
            .zip(&self.lengths)
            .map(|(tf, &len)| {
                let norm = self.k1 * (1.0 - self.b + self.b * len as f64 / self.avg_len.max(f64::MIN_POSITIVE));
                terms
                    .iter()
                    .zip(&idfs)
                    .map(|(t, idf)| {
                        let f = tf.get(t).copied().unwrap_or(0) as f64;
                        if f == 0.0 {
                            0.0
                        } else {
                            idf * f * (self.k1 + 1.0) / (f + norm)
                        }
                    })
                    .sum()
            })
            .collect()
    }

    /// Document indices by descending score, ties broken by position.
    pub fn rank(&self, query: &str) -> Vec<usize> {
        super::rank(&self.scores(query))
    }
}
