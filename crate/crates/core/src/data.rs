//! Vocabulary, corpus files and the synthetic two-style task.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sentence::{Sentence, StyleId, BOS, EOS, NUM_RESERVED, PAD, UNK};

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id bijection with ids `0..4` reserved for PAD, BOS, EOS and UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved ids followed by `tokens` in the given order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED_TOKENS[UNK], String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// Whitespace-tokenizes `line` and wraps it in BOS/EOS; at most
    /// `max_content` tokens are kept. Out-of-vocabulary tokens become UNK.
    pub fn encode(&self, line: &str, max_content: usize) -> Sentence {
        let ids: Vec<usize> = line
            .split_whitespace()
            .take(max_content)
            .map(|t| match self.id(t) {
                PAD | BOS | EOS => UNK,
                id => id,
            })
            .collect();
        Sentence::from_content(&ids).expect("markers filtered")
    }

    pub fn decode(&self, sentence: &Sentence) -> String {
        sentence
            .content()
            .iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One non-reserved token per line; line `n` holds id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words().join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().filter(|l| !l.trim().is_empty()).map(str::trim))
    }
}

/// Tokens with frequency ≥ `min_freq`, ordered by frequency (descending)
/// then lexicographically.
pub fn build_vocab<'a, I>(lines: I, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut any = false;
    for line in lines {
        any = true;
        for t in line.split_whitespace() {
            *counts.entry(t).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_freq.max(1) && !RESERVED_TOKENS.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Path of the `<style>.<split>.txt` file inside `dir`.
pub fn corpus_path(dir: &Path, style: &str, split: Split) -> std::path::PathBuf {
    dir.join(format!("{style}.{}.txt", split.name()))
}

/// Non-empty lines of a UTF-8 file, trimmed.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleCorpus {
    pub style: StyleId,
    pub name: String,
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

impl StyleCorpus {
    pub fn split(&self, split: Split) -> &[Sentence] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Loads `<name>.{train,dev,test}.txt` from `dir`. Empty lines are skipped
/// and lines are truncated to `max_len − 2` tokens.
pub fn load_corpus(dir: &Path, name: &str, style: StyleId, vocab: &Vocabulary, max_len: usize) -> Result<StyleCorpus> {
    let max_content = max_len.saturating_sub(2);
    let load = |split| -> Result<Vec<Sentence>> {
        Ok(read_lines(&corpus_path(dir, name, split))?
            .iter()
            .map(|l| vocab.encode(l, max_content))
            .collect())
    };
    Ok(StyleCorpus {
        style,
        name: name.to_owned(),
        train: load(Split::Train)?,
        dev: load(Split::Dev)?,
        test: load(Split::Test)?,
    })
}

/// Parameters of the synthetic two-style corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub style_names: [String; 2],
    /// Paired style words: `lexicons[0][j]` ↔ `lexicons[1][j]`.
    pub lexicons: [Vec<String>; 2],
}

const DETERMINERS: &[&str] = &["the", "a", "this", "that", "my", "our", "their"];
const MODIFIERS: &[&str] = &["old", "new", "small", "big", "local", "little", "main", "second"];
const NOUNS: &[&str] = &[
    "food", "service", "staff", "place", "pizza", "room", "menu", "coffee", "waiter", "price",
    "music", "bar", "pasta", "salad", "burger", "dessert", "beer", "wine", "table", "owner",
    "chef", "soup", "bread", "patio", "view", "manager", "breakfast", "lunch",
];
const PREPOSITIONS: &[&str] = &["in", "at", "near", "behind"];
const PLACES: &[&str] = &[
    "restaurant", "hotel", "town", "city", "mall", "corner", "station", "market", "street", "park",
];
const COPULAS: &[&str] = &["is", "was", "seems", "looks", "felt"];
const INTENSIFIERS: &[&str] = &["very", "really", "quite", "so", "truly", "pretty"];
const TAILS: &[&[&str]] = &[
    &["today"],
    &["tonight"],
    &["again"],
    &["overall"],
    &["as", "usual"],
    &["for", "us"],
    &["this", "time"],
];
const POSITIVE: &[&str] = &[
    "good", "great", "friendly", "delicious", "amazing", "excellent", "fresh", "nice",
    "wonderful", "perfect", "lovely", "tasty",
];
const NEGATIVE: &[&str] = &[
    "bad", "terrible", "rude", "awful", "horrible", "poor", "stale", "nasty", "dreadful",
    "mediocre", "gross", "bland",
];

impl SyntheticSpec {
    /// Two styles (`positive`, `negative`), 2,000/200/200 sentences each.
    pub fn default_with_seed(seed: u64) -> Self {
        SyntheticSpec {
            seed,
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            min_len: 5,
            max_len: 12,
            style_names: ["positive".into(), "negative".into()],
            lexicons: [
                POSITIVE.iter().map(|s| s.to_string()).collect(),
                NEGATIVE.iter().map(|s| s.to_string()).collect(),
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lexicons[0].is_empty() || self.lexicons[0].len() != self.lexicons[1].len() {
            return Err(Error::invalid("style lexicons must be non-empty and paired"));
        }
        let mut seen = HashSet::new();
        for w in self.lexicons.iter().flatten() {
            if !seen.insert(w.as_str()) {
                return Err(Error::invalid(format!("style lexicons overlap on `{w}`")));
            }
        }
        let content: HashSet<&str> = DETERMINERS
            .iter()
            .chain(MODIFIERS)
            .chain(NOUNS)
            .chain(PREPOSITIONS)
            .chain(PLACES)
            .chain(COPULAS)
            .chain(INTENSIFIERS)
            .chain(TAILS.iter().flat_map(|t| t.iter()))
            .copied()
            .collect();
        if let Some(w) = seen.iter().find(|w| content.contains(*w)) {
            return Err(Error::invalid(format!("style word `{w}` is also a content word")));
        }
        if self.min_len < 4 || self.min_len > self.max_len {
            return Err(Error::invalid("sentence length range must satisfy 4 ≤ min ≤ max"));
        }
        if self.style_names[0] == self.style_names[1] {
            return Err(Error::invalid("style names must differ"));
        }
        Ok(())
    }
}

/// Whitespace-tokenized lines per style and split, plus the lexicon oracle.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: SyntheticSpec,
    /// `splits[style][split]` lists sentences as token vectors.
    pub splits: [[Vec<Vec<String>>; 3]; 2],
    swap: HashMap<String, String>,
    membership: HashMap<String, usize>,
}

fn sample_sentence(rng: &mut ChaCha8Rng, lexicon: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(12);
    let pick = |rng: &mut ChaCha8Rng, words: &[&str]| words[rng.gen_range(0..words.len())].to_string();
    out.push(pick(rng, DETERMINERS));
    if rng.gen_bool(0.3) {
        out.push(pick(rng, MODIFIERS));
    }
    out.push(pick(rng, NOUNS));
    if rng.gen_bool(0.4) {
        out.push(pick(rng, PREPOSITIONS));
        out.push(pick(rng, DETERMINERS));
        out.push(pick(rng, PLACES));
    }
    out.push(pick(rng, COPULAS));
    if rng.gen_bool(0.5) {
        out.push(pick(rng, INTENSIFIERS));
    }
    out.push(lexicon.choose(rng).expect("non-empty lexicon").clone());
    if rng.gen_bool(0.5) {
        out.extend(TAILS.choose(rng).expect("tails").iter().map(|s| s.to_string()));
    }
    out
}

impl SyntheticTask {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut seen: HashSet<Vec<String>> = HashSet::new();
        let sizes = [spec.train_size, spec.dev_size, spec.test_size];
        let mut splits: [[Vec<Vec<String>>; 3]; 2] = Default::default();
        for (style, lexicon) in spec.lexicons.iter().enumerate() {
            for (split, &size) in sizes.iter().enumerate() {
                let mut attempts = 0usize;
                while splits[style][split].len() < size {
                    attempts += 1;
                    if attempts > size * 1000 + 10_000 {
                        return Err(Error::invalid("synthetic grammar cannot produce enough distinct sentences"));
                    }
                    let s = sample_sentence(&mut rng, lexicon);
                    if s.len() < spec.min_len || s.len() > spec.max_len || !seen.insert(s.clone()) {
                        continue;
                    }
                    splits[style][split].push(s);
                }
            }
        }
        let mut swap = HashMap::new();
        let mut membership = HashMap::new();
        for (a, b) in spec.lexicons[0].iter().zip(&spec.lexicons[1]) {
            swap.insert(a.clone(), b.clone());
            swap.insert(b.clone(), a.clone());
            membership.insert(a.clone(), 0);
            membership.insert(b.clone(), 1);
        }
        Ok(SyntheticTask { spec: spec.clone(), splits, swap, membership })
    }

    /// Replaces every style word by its paired word in the other style.
    pub fn oracle_transfer<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                self.swap.get(t).cloned().unwrap_or_else(|| t.to_owned())
            })
            .collect()
    }

    /// Zero-based style index from lexicon membership: the style with more
    /// marked words, `None` on a tie (including no marked words).
    pub fn oracle_style<S: AsRef<str>>(&self, tokens: &[S]) -> Option<usize> {
        let mut counts = [0usize; 2];
        for t in tokens {
            if let Some(&s) = self.membership.get(t.as_ref()) {
                counts[s] += 1;
            }
        }
        match counts[0].cmp(&counts[1]) {
            std::cmp::Ordering::Greater => Some(0),
            std::cmp::Ordering::Less => Some(1),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn is_style_word(&self, token: &str) -> bool {
        self.membership.contains_key(token)
    }

    pub fn lines(&self, style: usize, split: Split) -> Vec<String> {
        let i = Split::ALL.iter().position(|&s| s == split).expect("split");
        self.splits[style][i].iter().map(|t| t.join(" ")).collect()
    }

    /// Vocabulary over every token the grammar can produce, in the usual
    /// frequency order over the training split.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let train: Vec<String> = (0..2).flat_map(|s| self.lines(s, Split::Train)).collect();
        let mut vocab = build_vocab(train.iter().map(String::as_str), 1)?;
        let missing: Vec<String> = DETERMINERS
            .iter()
            .chain(MODIFIERS)
            .chain(NOUNS)
            .chain(PREPOSITIONS)
            .chain(PLACES)
            .chain(COPULAS)
            .chain(INTENSIFIERS)
            .chain(TAILS.iter().flat_map(|t| t.iter()))
            .map(|s| s.to_string())
            .chain(self.spec.lexicons.iter().flatten().cloned())
            .filter(|w| !vocab.contains(w))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if !missing.is_empty() {
            vocab = Vocabulary::from_tokens(vocab.words().iter().cloned().chain(missing))?;
        }
        Ok(vocab)
    }

    /// Writes `<style>.<split>.txt` files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for style in 0..2 {
            for split in Split::ALL {
                write_lines(&corpus_path(dir, &self.spec.style_names[style], split), &self.lines(style, split))?;
            }
        }
        Ok(())
    }

    /// Encoded corpora, style `i` getting `StyleId` `i + 1`.
    pub fn corpora(&self, vocab: &Vocabulary, max_len: usize) -> Vec<StyleCorpus> {
        let max_content = max_len.saturating_sub(2);
        (0..2)
            .map(|s| {
                let enc = |split| self.lines(s, split).iter().map(|l| vocab.encode(l, max_content)).collect();
                StyleCorpus {
                    style: StyleId::from_index(s),
                    name: self.spec.style_names[s].clone(),
                    train: enc(Split::Train),
                    dev: enc(Split::Dev),
                    test: enc(Split::Test),
                }
            })
            .collect()
    }
}
