//! Text ingestion, corpus statistics and string generation for synthesis.
//!
//! Three generation modes are supported: the natural token stream, uniform
//! draws over the lexicon, and random words whose characters, lengths,
//! capitalization and trailing punctuation follow the corpus statistics.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::charset::Charset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextCorpus {
    pub tokens: Vec<String>,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    Natural,
    Uniform,
    Random,
}

impl std::str::FromStr for CorpusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(CorpusMode::Natural),
            "uniform" => Ok(CorpusMode::Uniform),
            "random" => Ok(CorpusMode::Random),
            other => Err(Error::config(
                "corpus.mode",
                format!("unknown mode {other:?} (expected natural, uniform or random)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub mode: CorpusMode,
    pub target_count: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_count == 0 {
            return Err(Error::config("corpus.count", "must be at least 1"));
        }
        Ok(())
    }
}

/// Empirical distributions of a corpus.
///
/// Word lengths count the *core* of each token, i.e. the token with a single
/// trailing punctuation mark removed. Tokens that consist of exactly one
/// punctuation mark are tracked separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub lexicon: BTreeSet<String>,
    /// Probability per charset symbol, indexed by charset id.
    pub char_unigram: Vec<f64>,
    pub word_length_dist: BTreeMap<usize, f64>,
    pub capitalization_prob: f64,
    /// Probability of each trailing mark among word tokens.
    pub trailing_punct_prob: BTreeMap<char, f64>,
    /// Probability that a word token carries no trailing mark.
    pub no_trailing_punct_prob: f64,
    /// Distribution of the single-character word cores.
    pub single_char_tokens: BTreeMap<char, f64>,
    /// Fraction of tokens that are a lone punctuation mark.
    pub punct_token_rate: f64,
    pub punct_tokens: BTreeMap<char, f64>,
    /// Out-of-charset symbols dropped while counting.
    pub rejected_symbols: BTreeMap<char, usize>,
    pub token_count: usize,
}

/// Decodes `raw` as UTF-8 and splits it on whitespace.
pub fn ingest_text(raw: &[u8], source: &str) -> Result<TextCorpus> {
    let text = std::str::from_utf8(raw).map_err(|e| Error::Ingest {
        offset: e.valid_up_to(),
    })?;
    Ok(TextCorpus {
        tokens: text.split_whitespace().map(str::to_owned).collect(),
        source: source.to_owned(),
    })
}

impl TextCorpus {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Concatenates corpora in order.
    pub fn concat(parts: impl IntoIterator<Item = TextCorpus>) -> TextCorpus {
        let mut tokens = Vec::new();
        let mut sources = Vec::new();
        for part in parts {
            tokens.extend(part.tokens);
            sources.push(part.source);
        }
        TextCorpus {
            tokens,
            source: sources.join("+"),
        }
    }

    /// Drops out-of-charset symbols from every token, and tokens that become
    /// empty. Returns the tally of dropped symbols.
    pub fn restrict_to(&self, charset: &Charset) -> (TextCorpus, BTreeMap<char, usize>) {
        let mut rejected = BTreeMap::new();
        let mut tokens = Vec::with_capacity(self.tokens.len());
        for tok in &self.tokens {
            let mut kept = String::with_capacity(tok.len());
            for c in tok.chars() {
                if charset.contains(c) {
                    kept.push(c);
                } else {
                    *rejected.entry(c).or_insert(0) += 1;
                }
            }
            if !kept.is_empty() {
                tokens.push(kept);
            }
        }
        (
            TextCorpus {
                tokens,
                source: self.source.clone(),
            },
            rejected,
        )
    }
}

/// Splits a token into its core and an optional single trailing mark.
pub fn split_trailing_punct(token: &str) -> (&str, Option<char>) {
    let mut chars = token.chars();
    match chars.next_back() {
        Some(last) if last.is_ascii_punctuation() && token.chars().count() >= 2 => {
            (chars.as_str(), Some(last))
        }
        _ => (token, None),
    }
}

fn is_lone_punct(token: &str) -> bool {
    let mut it = token.chars();
    matches!((it.next(), it.next()), (Some(c), None) if c.is_ascii_punctuation())
}

fn normalize<K: Ord + Copy>(counts: &BTreeMap<K, usize>) -> BTreeMap<K, f64> {
    let total: usize = counts.values().sum();
    if total == 0 {
        return BTreeMap::new();
    }
    counts
        .iter()
        .map(|(&k, &v)| (k, v as f64 / total as f64))
        .collect()
}

pub fn derive_statistics(corpus: &TextCorpus, charset: &Charset) -> Result<CorpusStats> {
    let (filtered, rejected_symbols) = corpus.restrict_to(charset);
    if filtered.is_empty() {
        return Err(Error::Corpus(format!(
            "corpus {:?} has no tokens inside the charset",
            corpus.source
        )));
    }

    let mut char_counts = vec![0usize; charset.len()];
    let mut lengths: BTreeMap<usize, usize> = BTreeMap::new();
    let mut trailing: BTreeMap<char, usize> = BTreeMap::new();
    let mut singles: BTreeMap<char, usize> = BTreeMap::new();
    let mut puncts: BTreeMap<char, usize> = BTreeMap::new();
    let mut capitalized = 0usize;
    let mut word_tokens = 0usize;
    let mut no_trailing = 0usize;

    for tok in &filtered.tokens {
        if tok.chars().next().is_some_and(char::is_uppercase) {
            capitalized += 1;
        }
        if is_lone_punct(tok) {
            *puncts.entry(tok.chars().next().unwrap()).or_insert(0) += 1;
            continue;
        }
        let (core, mark) = split_trailing_punct(tok);
        word_tokens += 1;
        match mark {
            Some(m) => *trailing.entry(m).or_insert(0) += 1,
            None => no_trailing += 1,
        }
        let len = core.chars().count();
        *lengths.entry(len).or_insert(0) += 1;
        if len == 1 {
            *singles.entry(core.chars().next().unwrap()).or_insert(0) += 1;
        }
        for c in core.chars() {
            // every symbol survived restrict_to
            char_counts[charset.id(c).unwrap()] += 1;
        }
    }

    let total_chars: usize = char_counts.iter().sum();
    let char_unigram = if total_chars == 0 {
        vec![0.0; charset.len()]
    } else {
        char_counts
            .iter()
            .map(|&n| n as f64 / total_chars as f64)
            .collect()
    };
    let n_tokens = filtered.len();
    let n_punct: usize = puncts.values().sum();
    let trailing_punct_prob = if word_tokens == 0 {
        BTreeMap::new()
    } else {
        trailing
            .iter()
            .map(|(&k, &v)| (k, v as f64 / word_tokens as f64))
            .collect()
    };

    Ok(CorpusStats {
        lexicon: filtered.tokens.iter().cloned().collect(),
        char_unigram,
        word_length_dist: normalize(&lengths),
        capitalization_prob: capitalized as f64 / n_tokens as f64,
        trailing_punct_prob,
        no_trailing_punct_prob: if word_tokens == 0 {
            1.0
        } else {
            no_trailing as f64 / word_tokens as f64
        },
        single_char_tokens: normalize(&singles),
        punct_token_rate: n_punct as f64 / n_tokens as f64,
        punct_tokens: normalize(&puncts),
        rejected_symbols,
        token_count: n_tokens,
    })
}

/// Categorical sampler over an ordered key list.
struct Categorical<K> {
    keys: Vec<K>,
    index: WeightedIndex<f64>,
}

impl<K: Copy> Categorical<K> {
    fn new(pairs: impl IntoIterator<Item = (K, f64)>) -> Option<Self> {
        let (keys, weights): (Vec<K>, Vec<f64>) = pairs.into_iter().filter(|p| p.1 > 0.0).unzip();
        let index = WeightedIndex::new(&weights).ok()?;
        Some(Self { keys, index })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> K {
        self.keys[self.index.sample(rng)]
    }
}

struct RandomWordGenerator<'a> {
    charset: &'a Charset,
    stats: &'a CorpusStats,
    chars: Categorical<usize>,
    lengths: Categorical<usize>,
    singles: Option<Categorical<char>>,
    puncts: Option<Categorical<char>>,
    trailing: Option<Categorical<Option<char>>>,
}

impl<'a> RandomWordGenerator<'a> {
    fn new(charset: &'a Charset, stats: &'a CorpusStats) -> Result<Self> {
        let chars = Categorical::new(stats.char_unigram.iter().copied().enumerate())
            .ok_or_else(|| Error::Corpus("character unigram is degenerate (all zero)".into()))?;
        let lengths = Categorical::new(stats.word_length_dist.iter().map(|(&k, &v)| (k, v)))
            .ok_or_else(|| Error::Corpus("word length distribution is empty".into()))?;
        let trailing = Categorical::new(
            std::iter::once((None, stats.no_trailing_punct_prob)).chain(
                stats
                    .trailing_punct_prob
                    .iter()
                    .map(|(&k, &v)| (Some(k), v)),
            ),
        );
        Ok(Self {
            charset,
            stats,
            chars,
            lengths,
            singles: Categorical::new(stats.single_char_tokens.iter().map(|(&k, &v)| (k, v))),
            puncts: Categorical::new(stats.punct_tokens.iter().map(|(&k, &v)| (k, v))),
            trailing,
        })
    }

    fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        if let Some(puncts) = &self.puncts {
            if rng.random::<f64>() < self.stats.punct_token_rate {
                return puncts.sample(rng).to_string();
            }
        }
        let len = self.lengths.sample(rng);
        let mut word = String::new();
        match (&self.singles, len) {
            // single-character words come from the observed inventory as-is
            (Some(singles), 1) => word.push(singles.sample(rng)),
            _ => {
                for _ in 0..len.max(1) {
                    word.push(self.charset.symbol(self.chars.sample(rng)).unwrap());
                }
                if rng.random::<f64>() < self.stats.capitalization_prob {
                    word = capitalize_first(&word, self.charset);
                }
            }
        }
        if let Some(trailing) = &self.trailing {
            if let Some(mark) = trailing.sample(rng) {
                word.push(mark);
            }
        }
        word
    }
}

/// Upper-cases the first character when its capital form is in the charset.
pub fn capitalize_first(word: &str, charset: &Charset) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => {
            let mut upper = first.to_uppercase();
            match (upper.next(), upper.next()) {
                (Some(u), None) if charset.contains(u) => {
                    let mut out = String::with_capacity(word.len());
                    out.push(u);
                    out.push_str(chars.as_str());
                    out
                }
                _ => word.to_owned(),
            }
        }
        None => String::new(),
    }
}

/// Produces `spec.target_count` strings. Deterministic in all arguments.
pub fn generate_strings(
    spec: &CorpusSpec,
    corpus: &TextCorpus,
    stats: &CorpusStats,
    charset: &Charset,
) -> Result<Vec<String>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.mode {
        CorpusMode::Natural => {
            let (kept, _) = corpus.restrict_to(charset);
            if kept.is_empty() {
                return Err(Error::Corpus("natural mode needs a nonempty corpus".into()));
            }
            Ok(kept
                .tokens
                .iter()
                .cycle()
                .take(spec.target_count)
                .cloned()
                .collect())
        }
        CorpusMode::Uniform => {
            let lexicon: Vec<&String> = stats.lexicon.iter().collect();
            if lexicon.is_empty() {
                return Err(Error::Corpus("uniform mode needs a nonempty lexicon".into()));
            }
            Ok((0..spec.target_count)
                .map(|_| lexicon[rng.random_range(0..lexicon.len())].clone())
                .collect())
        }
        CorpusMode::Random => {
            let generator = RandomWordGenerator::new(charset, stats)?;
            Ok((0..spec.target_count)
                .map(|_| generator.generate(&mut rng))
                .collect())
        }
    }
}
