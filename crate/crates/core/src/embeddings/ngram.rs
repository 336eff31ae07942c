//! Hashed character n-gram word vectors.

use std::collections::HashMap;
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EmbeddingError;

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Every character n-gram of `<token>` for `n` in `n_min..=n_max`, shortest
/// first, then by position.
pub fn char_ngrams(token: &str, n_min: usize, n_max: usize) -> Vec<String> {
    let wrapped: Vec<char> = std::iter::once('<')
        .chain(token.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut out = Vec::new();
    for n in n_min..=n_max {
        if n == 0 || n > wrapped.len() {
            continue;
        }
        for w in wrapped.windows(n) {
            out.push(w.iter().collect());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramConfig {
    pub dim: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub buckets: usize,
    /// Seed of the bucket table; the table itself is never stored.
    pub seed: u64,
}

impl Default for NGramConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            n_min: 3,
            n_max: 6,
            buckets: 1 << 17,
            seed: 0,
        }
    }
}

/// Frozen n-gram embedder: mean of the hashed n-gram rows and, when present,
/// the exact-word vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramEmbedder {
    pub config: NGramConfig,
    table: Vec<f64>,
    words: HashMap<String, Vec<f64>>,
}

/// Row used when a token has neither n-grams nor a word vector.
pub const UNK_BUCKET: usize = 0;

impl NGramEmbedder {
    /// Bucket table drawn uniformly from `±sqrt(3)` (unit variance).
    pub fn new(config: NGramConfig) -> Result<Self, EmbeddingError> {
        if config.dim == 0 || config.buckets == 0 || config.n_min == 0 || config.n_min > config.n_max {
            return Err(EmbeddingError::Config(format!(
                "invalid n-gram configuration {config:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 3f64.sqrt();
        let table = (0..config.buckets * config.dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Ok(Self {
            config,
            table,
            words: HashMap::new(),
        })
    }

    /// Embedder with caller-provided bucket rows (`buckets x dim`, row-major).
    pub fn with_table(config: NGramConfig, table: Vec<f64>) -> Result<Self, EmbeddingError> {
        if table.len() != config.buckets * config.dim {
            return Err(EmbeddingError::Config(format!(
                "table has {} values, expected {} x {}",
                table.len(),
                config.buckets,
                config.dim
            )));
        }
        Ok(Self {
            config,
            table,
            words: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn bucket(&self, ngram: &str) -> usize {
        (fnv1a(ngram) % self.config.buckets as u64) as usize
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.table[bucket * self.config.dim..(bucket + 1) * self.config.dim]
    }

    pub fn row_mut(&mut self, bucket: usize) -> &mut [f64] {
        let d = self.config.dim;
        &mut self.table[bucket * d..(bucket + 1) * d]
    }

    pub fn words(&self) -> &HashMap<String, Vec<f64>> {
        &self.words
    }

    pub fn insert_word(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<(), EmbeddingError> {
        if vector.len() != self.config.dim {
            return Err(EmbeddingError::Config(format!(
                "word vector of dimension {}, expected {}",
                vector.len(),
                self.config.dim
            )));
        }
        self.words.insert(word.into(), vector);
        Ok(())
    }

    /// Loads exact-word vectors from the text format: a `count dim` header,
    /// then one `word v1 .. vdim` line per word.
    pub fn load_word_vectors<R: BufRead>(&mut self, reader: R) -> Result<usize, EmbeddingError> {
        let mut lines = reader.lines().enumerate();
        let bad = |line: usize, msg: String| EmbeddingError::VectorFile { line, message: msg };
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        let header = header.map_err(|e| bad(1, e.to_string()))?;
        let mut parts = header.split_whitespace().map(str::parse::<usize>);
        let (Some(Ok(count)), Some(Ok(dim)), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(1, format!("expected `count dim`, found `{header}`")));
        };
        if dim != self.config.dim {
            return Err(bad(
                1,
                format!(
                    "file dimension {dim} differs from embedder dimension {}",
                    self.config.dim
                ),
            ));
        }
        let mut loaded = 0;
        for (i, line) in lines {
            let line = line.map_err(|e| bad(i + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(' ').filter(|f| !f.is_empty());
            let word = fields.next().expect("non-empty line").to_string();
            let vector: Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
            let vector = vector.map_err(|e| bad(i + 1, e.to_string()))?;
            if vector.len() != dim || vector.iter().any(|v| !v.is_finite()) {
                return Err(bad(i + 1, format!("expected {dim} finite values for `{word}`")));
            }
            self.words.insert(word, vector);
            loaded += 1;
        }
        if loaded != count {
            log::warn!("vector file header announced {count} words, read {loaded}");
        }
        Ok(loaded)
    }

    /// Mean of the n-gram rows plus the word vector, if any.
    pub fn ngram_embed(&self, token: &str) -> Vec<f64> {
        let d = self.config.dim;
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for g in char_ngrams(token, self.config.n_min, self.config.n_max) {
            sum.iter_mut().zip(self.row(self.bucket(&g))).for_each(|(s, r)| *s += r);
            count += 1;
        }
        if let Some(w) = self.words.get(token) {
            sum.iter_mut().zip(w).for_each(|(s, r)| *s += r);
            count += 1;
        }
        if count == 0 {
            return self.row(UNK_BUCKET).to_vec();
        }
        let count = count as f64;
        sum.iter_mut().for_each(|s| *s /= count);
        sum
    }
}
