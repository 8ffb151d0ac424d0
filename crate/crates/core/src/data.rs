//! FNC-1 ingestion, class statistics and the synthetic topic dataset.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embeddings::{embed, tokenize, EmbeddingMatrix, PretrainedEmbeddings, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::percent_2dp;
use crate::model::{EncodedExample, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stance {
    Agree,
    Disagree,
    Discuss,
    Unrelated,
}

impl Stance {
    pub const ALL: [Stance; 4] = [Stance::Agree, Stance::Disagree, Stance::Discuss, Stance::Unrelated];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Stance> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stance::Agree => "agree",
            Stance::Disagree => "disagree",
            Stance::Discuss => "discuss",
            Stance::Unrelated => "unrelated",
        }
    }
}

impl fmt::Display for Stance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stance {
    type Err = Error;

    /// Case-insensitive; surrounding whitespace ignored.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_lowercase();
        Self::ALL
            .into_iter()
            .find(|c| c.name() == lower)
            .ok_or_else(|| Error::Contract(format!("unknown stance {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StanceExample {
    pub headline: Vec<String>,
    pub body: Vec<String>,
    pub stance: Stance,
    pub body_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Rows dropped while loading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadCounts {
    pub unknown_stance: usize,
    pub unresolved_body: usize,
    pub empty_text: usize,
}

impl LoadCounts {
    pub fn total(&self) -> usize {
        self.unknown_stance + self.unresolved_body + self.empty_text
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<StanceExample>,
    pub split: Split,
    pub rejected: LoadCounts,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.stance.index()).collect()
    }

    /// First `n` examples as one split, the rest as the other.
    pub fn split_at(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.examples.split_off(n.min(self.examples.len()));
        let test = Dataset {
            examples: rest,
            split: Split::Test,
            rejected: LoadCounts::default(),
        };
        self.split = Split::Train;
        (self, test)
    }
}

fn column(headers: &csv::StringRecord, name: &str, file: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim_start_matches('\u{feff}').trim() == name)
        .ok_or_else(|| Error::Contract(format!("{}: no {name:?} column", file.display())))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

/// Reads an FNC-1 stances/bodies file pair, joined on `Body ID`.
///
/// Output order follows the accepted rows of the stances file.
pub fn load_fnc1(stances: &Path, bodies: &Path, split: Split) -> Result<Dataset> {
    let mut body_reader = reader(bodies)?;
    let headers = body_reader.headers()?.clone();
    let (id_col, text_col) = (column(&headers, "Body ID", bodies)?, column(&headers, "articleBody", bodies)?);
    let mut body_map: HashMap<u64, Vec<String>> = HashMap::new();
    for record in body_reader.records() {
        let record = record?;
        let Ok(id) = record.get(id_col).unwrap_or("").trim().parse::<u64>() else {
            continue;
        };
        body_map.insert(id, tokenize(record.get(text_col).unwrap_or("")));
    }

    let mut stance_reader = reader(stances)?;
    let headers = stance_reader.headers()?.clone();
    let h_col = column(&headers, "Headline", stances)?;
    let id_col = column(&headers, "Body ID", stances)?;
    let s_col = column(&headers, "Stance", stances)?;
    let mut rejected = LoadCounts::default();
    let mut examples = Vec::new();
    for record in stance_reader.records() {
        let record = record?;
        let Ok(stance) = record.get(s_col).unwrap_or("").parse::<Stance>() else {
            rejected.unknown_stance += 1;
            continue;
        };
        let body = record
            .get(id_col)
            .and_then(|s| s.trim().parse::<u64>().ok())
            .and_then(|id| body_map.get(&id).map(|b| (id, b)));
        let Some((body_id, body)) = body else {
            rejected.unresolved_body += 1;
            continue;
        };
        let headline = tokenize(record.get(h_col).unwrap_or(""));
        if headline.is_empty() || body.is_empty() {
            rejected.empty_text += 1;
            continue;
        }
        examples.push(StanceExample {
            headline,
            body: body.clone(),
            stance,
            body_id,
        });
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{}: no usable rows ({} rejected)",
            stances.display(),
            rejected.total()
        )));
    }
    Ok(Dataset {
        examples,
        split,
        rejected,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassStats {
    pub counts: [u64; 4],
    pub total: u64,
}

impl ClassStats {
    /// Percentage of class `c`, half-up to two decimals.
    pub fn percent(&self, c: Stance) -> String {
        percent_2dp(self.counts[c.index()], self.total)
    }
}

pub fn class_stats(d: &Dataset) -> Result<ClassStats> {
    if d.is_empty() {
        return Err(Error::Contract("class statistics of an empty dataset".into()));
    }
    let mut counts = [0u64; 4];
    for e in &d.examples {
        counts[e.stance.index()] += 1;
    }
    Ok(ClassStats {
        counts,
        total: d.len() as u64,
    })
}

/// Embeds both sides of every example for `config`'s field widths.
pub fn encode_examples(
    d: &Dataset,
    vocab: &Vocabulary,
    emb: &EmbeddingMatrix,
    config: &ModelConfig,
) -> Result<Vec<EncodedExample>> {
    d.examples
        .iter()
        .map(|e| {
            Ok(EncodedExample {
                headline: embed(&e.headline, vocab, emb, config.n_max_headline)?,
                body: embed(&e.body, vocab, emb, config.n_max_body)?,
                label: e.stance.index(),
            })
        })
        .collect()
}

// ---- synthetic topic data --------------------------------------------------

pub const SYNTHETIC_TOPICS: usize = 4;
pub const SYNTHETIC_HEADLINE_LEN: usize = 8;
pub const SYNTHETIC_BODY_LEN: usize = 16;

/// Word inventory for a synthetic vocabulary of `vocab_size` words.
///
/// A quarter of the words are topic-free fillers; the rest are split evenly
/// into four disjoint topic sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticLayout {
    pub fillers: usize,
    pub topic_size: usize,
}

impl SyntheticLayout {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < 8 {
            return Err(Error::Contract(format!("synthetic vocabulary needs >= 8 words, got {vocab_size}")));
        }
        let fillers = vocab_size / 4;
        Ok(SyntheticLayout {
            fillers,
            topic_size: (vocab_size - fillers) / SYNTHETIC_TOPICS,
        })
    }

    pub fn topic_word(topic: usize, k: usize) -> String {
        format!("t{topic}w{k}")
    }

    pub fn filler(k: usize) -> String {
        format!("f{k}")
    }

    /// Topic of a generated word, or `None` for fillers and foreign tokens.
    pub fn topic_of(token: &str) -> Option<usize> {
        let rest = token.strip_prefix('t')?;
        let (t, _) = rest.split_once('w')?;
        t.parse().ok()
    }

    pub fn words(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.fillers).map(Self::filler).collect();
        for t in 0..SYNTHETIC_TOPICS {
            v.extend((0..self.topic_size).map(|k| Self::topic_word(t, k)));
        }
        v
    }
}

/// Label for a headline/body topic pair. Topics pair up symmetrically:
/// `{0,1}` and `{2,3}` agree, `{0,2}` and `{1,3}` disagree, the rest are
/// unrelated, and a shared topic is a discussion.
pub fn synthetic_stance(headline_topic: usize, body_topic: usize) -> Stance {
    match headline_topic ^ body_topic {
        0 => Stance::Discuss,
        1 => Stance::Agree,
        2 => Stance::Disagree,
        _ => Stance::Unrelated,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub vocab_size: usize,
    /// Target class proportions in `Stance::ALL` order.
    pub proportions: [f64; 4],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_size: 64,
            proportions: [0.15, 0.10, 0.25, 0.50],
        }
    }
}

/// Seeded synthetic dataset with the default class proportions.
pub fn make_synthetic(n_examples: usize, vocab_size: usize, seed: u64) -> Result<Dataset> {
    make_synthetic_with(
        n_examples,
        &SyntheticConfig {
            vocab_size,
            ..Default::default()
        },
        seed,
    )
}

/// Headlines are a few topic words plus fillers. Bodies open with a lead of
/// topic words that fixes the body topic, followed by a tail of fillers and
/// words from one other distractor topic.
pub fn make_synthetic_with(n_examples: usize, config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    if n_examples < 4 {
        return Err(Error::Contract(format!("need at least 4 synthetic examples, got {n_examples}")));
    }
    let layout = SyntheticLayout::new(config.vocab_size)?;
    let p = config.proportions;
    if p.iter().any(|x| x.is_nan() || *x < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract("class proportions must be non-negative and sum to 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topic_word = |rng: &mut ChaCha8Rng, t: usize| {
        SyntheticLayout::topic_word(t, rng.random_range(0..layout.topic_size))
    };
    let filler = |rng: &mut ChaCha8Rng| SyntheticLayout::filler(rng.random_range(0..layout.fillers));

    let mut examples = Vec::with_capacity(n_examples);
    for i in 0..n_examples {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let stance = Stance::ALL
            .into_iter()
            .find(|s| {
                acc += p[s.index()];
                u < acc
            })
            .unwrap_or(Stance::Unrelated);
        let offset = match stance {
            Stance::Discuss => 0,
            Stance::Agree => 1,
            Stance::Disagree => 2,
            Stance::Unrelated => 3,
        };
        let t_h = rng.random_range(0..SYNTHETIC_TOPICS);
        let t_b = t_h ^ offset;

        let n_topic = rng.random_range(2..=4);
        let n_fill = rng.random_range(0..=2);
        let mut headline: Vec<String> = (0..n_topic).map(|_| topic_word(&mut rng, t_h)).collect();
        headline.extend((0..n_fill).map(|_| filler(&mut rng)));
        headline.shuffle(&mut rng);

        let distractor = (t_b + rng.random_range(1..SYNTHETIC_TOPICS)) % SYNTHETIC_TOPICS;
        let lead = rng.random_range(3..=4);
        let tail = rng.random_range(6..=SYNTHETIC_BODY_LEN - lead);
        let mut body: Vec<String> = (0..lead).map(|_| topic_word(&mut rng, t_b)).collect();
        for _ in 0..tail {
            let w = if rng.random_bool(0.4) {
                filler(&mut rng)
            } else {
                topic_word(&mut rng, distractor)
            };
            body.push(w);
        }
        examples.push(StanceExample {
            headline,
            body,
            stance,
            body_id: i as u64,
        });
    }
    Ok(Dataset {
        examples,
        split: Split::Train,
        rejected: LoadCounts::default(),
    })
}

/// Word vectors for the synthetic vocabulary: each topic word sits near its
/// topic centroid, fillers are short random vectors.
pub fn synthetic_embeddings(vocab_size: usize, dim: usize, seed: u64) -> Result<PretrainedEmbeddings> {
    let layout = SyntheticLayout::new(vocab_size)?;
    if dim == 0 {
        return Err(Error::Contract("embedding dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dim as f64).sqrt();
    let mut gauss = |s: f64| -> Vec<f64> { (0..dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect() };
    let centroids: Vec<Vec<f64>> = (0..SYNTHETIC_TOPICS).map(|_| gauss(1.5 * scale)).collect();

    let mut vocab = Vocabulary::new();
    let mut columns = vec![vec![0.0; dim]; vocab.len()];
    for word in layout.words() {
        let v = match SyntheticLayout::topic_of(&word) {
            Some(t) => centroids[t].iter().zip(gauss(0.3 * scale)).map(|(c, n)| c + n).collect(),
            None => gauss(0.5 * scale),
        };
        vocab.insert(&word);
        columns.push(v);
    }
    let n_words = columns.len() - 2;
    let unk: Vec<f64> = (0..dim)
        .map(|r| columns[2..].iter().map(|c| c[r]).sum::<f64>() / n_words as f64)
        .collect();
    columns[crate::embeddings::UNK] = unk;
    Ok(PretrainedEmbeddings {
        vocab,
        matrix: EmbeddingMatrix::from_columns(dim, &columns)?,
        skipped_lines: 0,
    })
}
