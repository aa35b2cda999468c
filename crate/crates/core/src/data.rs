//! Character tokenizer, toy corpus with embedded facts, and batching.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::Rng;

/// `'\n'` plus printable ASCII.
pub const VOCAB_SIZE: usize = 96;

pub fn encode_char(c: char) -> Option<usize> {
    match c {
        '\n' => Some(0),
        ' '..='~' => Some(c as usize - 31),
        _ => None,
    }
}

pub fn decode_token(t: usize) -> char {
    match t {
        0 => '\n',
        1..=95 => char::from((t + 31) as u8),
        _ => '?',
    }
}

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .enumerate()
        .map(|(i, c)| encode_char(c).ok_or_else(|| Error::invalid(format!("character {c:?} at {i} is outside the vocabulary"))))
        .collect()
}

pub fn decode(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| decode_token(t)).collect()
}

/// One memorizable fact: a subject name and a single-character object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub subject: String,
    pub object: char,
}

impl Fact {
    pub fn prompt(&self) -> String {
        format!("The code of {} is ", self.subject)
    }

    pub fn sentence(&self) -> String {
        format!("{}{}.", self.prompt(), self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FactSet {
    pub facts: Vec<Fact>,
}

const OBJECTS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

impl FactSet {
    /// `n` facts with distinct synthetic names and uniformly drawn objects.
    pub fn generate(n: usize, rng: &mut Rng) -> Self {
        let mut seen = std::collections::BTreeSet::new();
        let mut facts = Vec::with_capacity(n);
        while facts.len() < n {
            let syll = 2 + rng.below(2);
            let mut name = String::new();
            for _ in 0..syll {
                name.push_str(ONSETS[rng.below(ONSETS.len())]);
                name.push_str(VOWELS[rng.below(VOWELS.len())]);
            }
            let mut cs = name.chars();
            let name: String = cs.next().map(|c| c.to_ascii_uppercase()).into_iter().chain(cs).collect();
            if seen.insert(name.clone()) {
                let object = OBJECTS.as_bytes()[rng.below(OBJECTS.len())] as char;
                facts.push(Fact { subject: name, object });
            }
        }
        Self { facts }
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// Two tab-separated columns: subject, object.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut facts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(s), Some(o), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::Format(format!("facts line {}: expected two tab-separated columns", i + 1)));
            };
            let mut oc = o.chars();
            let (Some(object), None) = (oc.next(), oc.next()) else {
                return Err(Error::Format(format!("facts line {}: object must be one character", i + 1)));
            };
            if s.is_empty() || encode(s).is_err() || encode_char(object).is_none() {
                return Err(Error::Format(format!("facts line {}: unsupported characters", i + 1)));
            }
            facts.push(Fact {
                subject: s.to_string(),
                object,
            });
        }
        Ok(Self { facts })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for f in &self.facts {
            let _ = writeln!(s, "{}\t{}", f.subject, f.object);
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_tsv(&std::fs::read_to_string(path)?)
    }

    /// The first `n` facts.
    pub fn take(&self, n: usize) -> Self {
        Self {
            facts: self.facts.iter().take(n).cloned().collect(),
        }
    }
}

const DETS: [&str; 5] = ["the", "a", "every", "one", "that"];
const ADJS: [&str; 14] = [
    "old", "quiet", "small", "bright", "heavy", "green", "cold", "slow", "tall", "warm", "dark", "gentle", "narrow", "busy",
];
const NOUNS: [&str; 20] = [
    "river", "farmer", "window", "garden", "horse", "teacher", "bridge", "village", "letter", "mountain", "boat", "forest",
    "child", "market", "road", "lamp", "winter", "station", "baker", "field",
];
const VERBS: [&str; 14] = [
    "crossed", "watched", "carried", "followed", "found", "passed", "opened", "reached", "left", "painted", "visited",
    "cleaned", "built", "missed",
];
const PREPS: [&str; 8] = ["near", "beyond", "under", "behind", "across", "beside", "along", "past"];
const TIMES: [&str; 6] = ["in the morning", "at night", "after the rain", "before noon", "in spring", "by evening"];

fn pick<'a>(rng: &mut Rng, words: &[&'a str]) -> &'a str {
    words[rng.below(words.len())]
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_ascii_uppercase()).into_iter().chain(c).collect()
}

fn sentence(rng: &mut Rng) -> String {
    let np = |rng: &mut Rng| {
        if rng.below(2) == 0 {
            format!("{} {}", pick(rng, &DETS), pick(rng, &NOUNS))
        } else {
            format!("{} {} {}", pick(rng, &DETS), pick(rng, &ADJS), pick(rng, &NOUNS))
        }
    };
    let subj = np(rng);
    let obj = np(rng);
    let mut s = format!("{} {} {}", capitalize(&subj), pick(rng, &VERBS), obj);
    match rng.below(3) {
        0 => {
            let place = np(rng);
            let _ = write!(s, " {} {}", pick(rng, &PREPS), place);
        }
        1 => {
            let _ = write!(s, " {}", pick(rng, &TIMES));
        }
        _ => {}
    }
    s.push('.');
    s
}

/// Procedural English-like prose, one short paragraph per line.
pub fn generate_text(n_chars: usize, rng: &mut Rng) -> String {
    let mut out = String::with_capacity(n_chars + 200);
    while out.len() < n_chars {
        let k = 1 + rng.below(3);
        let para: Vec<String> = (0..k).map(|_| sentence(rng)).collect();
        out.push_str(&para.join(" "));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub valid_fraction: f64,
    pub fact_repeats: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            valid_fraction: 0.1,
            fact_repeats: 8,
        }
    }
}

/// Tokenized train/valid streams. Fact sentences appear only in train.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub facts: FactSet,
}

impl Corpus {
    /// Splits `text` by line with a seeded shuffle, then mixes `fact_repeats`
    /// copies of every fact sentence into the training lines.
    pub fn build(text: &str, facts: FactSet, cfg: &CorpusConfig, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.valid_fraction) {
            return Err(Error::config("corpus.valid_fraction", "must lie in [0, 1)"));
        }
        let mut rng = Rng::new(seed).fork(0xC0);
        let mut lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        rng.shuffle(&mut lines);
        let n_valid = (lines.len() as f64 * cfg.valid_fraction).round() as usize;
        let valid_lines = &lines[..n_valid];
        let mut train_lines: Vec<String> = lines[n_valid..].iter().map(|s| s.to_string()).collect();
        for f in &facts.facts {
            for _ in 0..cfg.fact_repeats {
                train_lines.push(f.sentence());
            }
        }
        rng.shuffle(&mut train_lines);
        let join = |ls: &mut dyn Iterator<Item = &str>| {
            let mut s = String::new();
            for l in ls {
                s.push_str(l);
                s.push('\n');
            }
            s
        };
        let valid_text = join(&mut valid_lines.iter().copied());
        for f in &facts.facts {
            if valid_text.contains(&f.prompt()) {
                return Err(Error::Format(format!("fact prompt for {} leaks into validation text", f.subject)));
            }
        }
        Ok(Self {
            train: encode(&join(&mut train_lines.iter().map(String::as_str)))?,
            valid: encode(&valid_text)?,
            facts,
        })
    }

    pub fn load(text_path: &Path, facts_path: &Path, cfg: &CorpusConfig, seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(text_path)?;
        Self::build(&text, FactSet::load(facts_path)?, cfg, seed)
    }
}

/// Next-token prediction batch: inputs plus one target per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct LmBatch {
    pub inputs: TokenBatch,
    pub targets: Vec<usize>,
}

/// `n_seq` windows of `seq_len + 1` tokens at random offsets.
pub fn sample_batch(stream: &[usize], n_seq: usize, seq_len: usize, rng: &mut Rng) -> Result<LmBatch> {
    if stream.len() < seq_len + 1 {
        return Err(Error::invalid(format!(
            "token stream of {} is too short for sequences of {seq_len}",
            stream.len()
        )));
    }
    let mut inputs = Vec::with_capacity(n_seq * seq_len);
    let mut targets = Vec::with_capacity(n_seq * seq_len);
    for _ in 0..n_seq {
        let s = rng.below(stream.len() - seq_len);
        inputs.extend_from_slice(&stream[s..s + seq_len]);
        targets.extend_from_slice(&stream[s + 1..s + seq_len + 1]);
    }
    Ok(LmBatch {
        inputs: TokenBatch::new(n_seq, seq_len, inputs)?,
        targets,
    })
}

/// Consecutive non-overlapping windows covering up to `max_tokens` targets,
/// grouped `n_seq` per batch.
pub fn sequential_batches(stream: &[usize], seq_len: usize, n_seq: usize, max_tokens: usize) -> Result<Vec<LmBatch>> {
    if seq_len == 0 || n_seq == 0 {
        return Err(Error::invalid("sequence length and batch size must be positive"));
    }
    let windows = ((stream.len().saturating_sub(1)) / seq_len).min(max_tokens / seq_len);
    if windows == 0 {
        return Err(Error::invalid("token stream too short for one window"));
    }
    let mut out = Vec::new();
    let mut w = 0;
    while w < windows {
        let n = n_seq.min(windows - w);
        let mut inputs = Vec::with_capacity(n * seq_len);
        let mut targets = Vec::with_capacity(n * seq_len);
        for i in w..w + n {
            let s = i * seq_len;
            inputs.extend_from_slice(&stream[s..s + seq_len]);
            targets.extend_from_slice(&stream[s + 1..s + seq_len + 1]);
        }
        out.push(LmBatch {
            inputs: TokenBatch::new(n, seq_len, inputs)?,
            targets,
        });
        w += n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_roundtrip_and_range() {
        let s = "Hello, world!\n~ ";
        let t = encode(s).unwrap();
        assert!(t.iter().all(|&x| x < VOCAB_SIZE));
        assert_eq!(decode(&t), s);
        assert_eq!(encode_char('~'), Some(95));
        assert!(encode("é").is_err());
    }

    #[test]
    fn tsv_roundtrip() {
        let f = FactSet::generate(10, &mut Rng::new(1));
        assert_eq!(FactSet::parse_tsv(&f.to_tsv()).unwrap(), f);
        assert!(FactSet::parse_tsv("a\tbc\n").is_err());
        assert!(FactSet::parse_tsv("a\n").is_err());
    }

    #[test]
    fn facts_only_in_train_and_split_is_seeded() {
        let text = generate_text(5000, &mut Rng::new(2));
        let facts = FactSet::generate(5, &mut Rng::new(3));
        let c = Corpus::build(&text, facts.clone(), &CorpusConfig::default(), 9).unwrap();
        let train = decode(&c.train);
        let valid = decode(&c.valid);
        for f in &facts.facts {
            assert_eq!(train.matches(&f.sentence()).count(), 8);
            assert!(!valid.contains(&f.prompt()));
        }
        assert_eq!(c, Corpus::build(&text, facts.clone(), &CorpusConfig::default(), 9).unwrap());
        assert_ne!(c.valid, Corpus::build(&text, facts, &CorpusConfig::default(), 10).unwrap().valid);
    }

    #[test]
    fn sequential_batches_shift_targets() {
        let stream: Vec<usize> = (0..23).collect();
        let b = sequential_batches(&stream, 5, 3, 100).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].inputs.n_seq, 3);
        assert_eq!(b[1].inputs.n_seq, 1);
        assert_eq!(b[0].targets[..5], [1, 2, 3, 4, 5]);
        assert!(sequential_batches(&stream[..3], 5, 1, 100).is_err());
    }
}
