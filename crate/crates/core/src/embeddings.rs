//! Vocabulary, pretrained embedding loading, and sentence embedding into the
//! `[D, n_max]` matrix consumed by the encoders.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Dense token ↔ index map. Index 0 is PAD and 1 is UNK.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            index: HashMap::new(),
            tokens: Vec::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        v
    }

    /// Adds `token` if absent and returns its index.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.index.insert(token.to_string(), i);
        self.tokens.push(token.to_string());
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, falling back to UNK.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Word embedding table `W^e` stored as `[D, N]`; column `j` embeds token `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    weights: Tensor,
    pub frozen: bool,
}

impl EmbeddingMatrix {
    /// Builds the table from per-token columns. Column `PAD` is forced to zero.
    pub fn from_columns(dim: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let n = columns.len();
        let mut data = vec![0.0; dim * n];
        for (c, col) in columns.iter().enumerate() {
            if col.len() != dim {
                return Err(Error::shape("embedding column", &[dim], &[col.len()]));
            }
            if c == PAD {
                continue;
            }
            for (r, &v) in col.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Numerical(format!("non-finite embedding for column {c}")));
                }
                data[r * n + c] = v;
            }
        }
        Ok(EmbeddingMatrix {
            weights: Tensor::matrix(dim, n, data)?,
            frozen: true,
        })
    }

    pub fn from_tensor(weights: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::shape("embedding matrix", weights.shape(), &[]));
        }
        let mut w = weights.with_requires_grad(false);
        let n = w.cols();
        for r in 0..w.rows() {
            w.data_mut()[r * n + PAD] = 0.0;
        }
        Ok(EmbeddingMatrix {
            weights: w,
            frozen: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn column(&self, index: usize) -> Vec<f64> {
        self.weights.column(index)
    }
}

/// Result of reading a pretrained embedding file.
#[derive(Clone, Debug)]
pub struct PretrainedEmbeddings {
    pub vocab: Vocabulary,
    pub matrix: EmbeddingMatrix,
    pub skipped_lines: usize,
}

/// Loads a GloVe-style text file: `token f1 ... fD` per line.
///
/// Malformed lines are skipped and counted. The UNK vector is the mean of all
/// loaded vectors and PAD is zero.
pub fn load_pretrained(path: &Path, expected_dim: usize) -> Result<PretrainedEmbeddings> {
    let file = File::open(path)?;
    read_pretrained(BufReader::new(file), expected_dim, &path.display().to_string())
}

pub fn read_pretrained<R: BufRead>(
    reader: R,
    expected_dim: usize,
    source: &str,
) -> Result<PretrainedEmbeddings> {
    if expected_dim == 0 {
        return Err(Error::Contract("embedding dimension must be positive".into()));
    }
    let mut vocab = Vocabulary::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(), Vec::new()];
    let mut skipped = 0;
    for line in reader.lines() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        // word2vec-style "count dim" header
        if fields[0].parse::<i64>().is_ok() && fields.len() != expected_dim + 1 {
            continue;
        }
        if fields.len() != expected_dim + 1 || vocab.get(fields[0]).is_some() {
            skipped += 1;
            continue;
        }
        let parsed: Option<Vec<f64>> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        match parsed {
            Some(vec) => {
                vocab.insert(fields[0]);
                columns.push(vec);
            }
            None => skipped += 1,
        }
    }
    let loaded = columns.len() - 2;
    if loaded == 0 {
        return Err(Error::EmptyEmbeddings(source.to_string()));
    }
    let mut unk = vec![0.0; expected_dim];
    for col in &columns[2..] {
        unk.iter_mut().zip(col).for_each(|(u, v)| *u += v);
    }
    unk.iter_mut().for_each(|u| *u /= loaded as f64);
    columns[PAD] = vec![0.0; expected_dim];
    columns[UNK] = unk;
    Ok(PretrainedEmbeddings {
        vocab,
        matrix: EmbeddingMatrix::from_columns(expected_dim, &columns)?,
        skipped_lines: skipped,
    })
}

/// One padded sentence: token indices, validity mask, and `H` as `[D, n_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSentence {
    pub indices: Vec<usize>,
    pub mask: Vec<bool>,
    pub matrix: Tensor,
}

impl EmbeddedSentence {
    pub fn width(&self) -> usize {
        self.mask.len()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Several embedded sentences of a common width.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SentenceBatch {
    pub rows: Vec<EmbeddedSentence>,
}

impl SentenceBatch {
    pub fn index_matrix(&self) -> Vec<Vec<usize>> {
        self.rows.iter().map(|r| r.indices.clone()).collect()
    }

    pub fn mask_matrix(&self) -> Vec<Vec<bool>> {
        self.rows.iter().map(|r| r.mask.clone()).collect()
    }
}

/// Embeds a token list into a `[D, n_max]` matrix, truncating or padding.
pub fn embed<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    emb: &EmbeddingMatrix,
    n_max: usize,
) -> Result<EmbeddedSentence> {
    if tokens.is_empty() {
        return Err(Error::Degenerate("cannot embed an empty token list".into()));
    }
    if n_max == 0 {
        return Err(Error::Contract("n_max must be positive".into()));
    }
    let mut indices = vec![PAD; n_max];
    let mut mask = vec![false; n_max];
    for (slot, tok) in tokens.iter().take(n_max).enumerate() {
        indices[slot] = vocab.lookup(tok.as_ref());
        mask[slot] = true;
    }
    let d = emb.dim();
    let w = emb.weights();
    let n_vocab = w.cols();
    let mut data = vec![0.0; d * n_max];
    for (j, &idx) in indices.iter().enumerate() {
        if !mask[j] {
            continue;
        }
        for r in 0..d {
            data[r * n_max + j] = w.data()[r * n_vocab + idx];
        }
    }
    Ok(EmbeddedSentence {
        indices,
        mask,
        matrix: Tensor::matrix(d, n_max, data)?,
    })
}

/// Lowercases, splits on Unicode whitespace, and strips surrounding ASCII
/// punctuation from each token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn load(text: &str, d: usize) -> Result<PretrainedEmbeddings> {
        read_pretrained(text.as_bytes(), d, "inline")
    }

    #[test]
    fn two_line_file() {
        let e = load("cat 0.1 0.2 0.3\ndog 1 2 3\n", 3).unwrap();
        assert_eq!(e.vocab.len(), 4);
        assert_eq!(e.matrix.column(e.vocab.lookup("cat")), vec![0.1, 0.2, 0.3]);
        assert_eq!(e.matrix.column(PAD), vec![0.0; 3]);
        assert_eq!(e.skipped_lines, 0);
    }

    #[test]
    fn unk_is_mean_of_vectors() {
        let e = load("a 1 0\nb 3 2\n", 2).unwrap();
        assert_eq!(e.matrix.column(UNK), vec![2.0, 1.0]);
    }

    #[test]
    fn malformed_and_header_lines() {
        let text = "3 2\na 1 0\nbad 1\nc x y\nb 3 2\na 9 9\n";
        let e = load(text, 2).unwrap();
        assert_eq!(e.vocab.len(), 4);
        assert_eq!(e.skipped_lines, 3);
        assert_eq!(e.matrix.column(e.vocab.lookup("a")), vec![1.0, 0.0]);
    }

    #[test]
    fn numeric_token_with_full_vector_is_kept() {
        let e = load("2019 0.5 0.5\n", 2).unwrap();
        assert_eq!(e.vocab.get("2019"), Some(2));
    }

    #[test]
    fn empty_file_is_error() {
        assert!(matches!(load("", 3), Err(Error::EmptyEmbeddings(_))));
        assert!(matches!(load("x 1\n", 3), Err(Error::EmptyEmbeddings(_))));
    }

    #[test]
    fn embed_pads_and_truncates() {
        let e = load("cat 0.1 0.2\ndog 1 2\n", 2).unwrap();
        let s = embed(&["cat"], &e.vocab, &e.matrix, 4).unwrap();
        assert_eq!(s.mask, vec![true, false, false, false]);
        assert_eq!(s.matrix.shape(), &[2, 4]);
        assert_eq!(s.matrix.column(0), vec![0.1, 0.2]);
        assert_eq!(s.matrix.column(1), vec![0.0, 0.0]);

        let toks: Vec<String> = (0..10).map(|i| if i % 2 == 0 { "cat" } else { "dog" }.to_string()).collect();
        let s = embed(&toks, &e.vocab, &e.matrix, 4).unwrap();
        assert_eq!(s.mask, vec![true; 4]);
        assert_eq!(s.indices, vec![2, 3, 2, 3]);

        let s = embed(&["zebra"], &e.vocab, &e.matrix, 2).unwrap();
        assert_eq!(s.indices[0], UNK);
        assert_eq!(s.matrix.column(0), e.matrix.column(UNK));

        let empty: [&str; 0] = [];
        assert!(matches!(embed(&empty, &e.vocab, &e.matrix, 4), Err(Error::Degenerate(_))));
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The cat, sat."), vec!["the", "cat", "sat"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A  B"), vec!["a", "b"]);
        assert_eq!(tokenize("\"quoted\" -- don't"), vec!["quoted", "don't"]);
    }

    proptest! {
        #[test]
        fn tokenize_idempotent(s in "\\PC{0,60}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn embed_round_trip_and_pad_zero(
            vecs in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..8),
            picks in proptest::collection::vec(0usize..8, 1..12),
            n_max in 1usize..10,
        ) {
            let mut vocab = Vocabulary::new();
            let mut cols = vec![vec![0.0; 3], vec![0.0; 3]];
            for (i, v) in vecs.iter().enumerate() {
                vocab.insert(&format!("w{i}"));
                cols.push(v.clone());
            }
            let emb = EmbeddingMatrix::from_columns(3, &cols).unwrap();
            let toks: Vec<String> = picks.iter().map(|p| format!("w{}", p % vecs.len())).collect();
            let s = embed(&toks, &vocab, &emb, n_max).unwrap();
            for j in 0..n_max {
                if s.mask[j] {
                    prop_assert_eq!(s.matrix.column(j), emb.column(vocab.lookup(&toks[j])));
                } else {
                    prop_assert!(s.matrix.column(j).iter().all(|&x| x == 0.0));
                }
            }
        }
    }
}
