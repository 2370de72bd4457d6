//! Plain-text corpus ingestion: tokenization, a capped vocabulary, and
//! fixed-length context windows.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const UNK_ID: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    #[default]
    Word,
    Char,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub context_len: usize,
    pub vocab_cap: usize,
    #[serde(default)]
    pub tokenization: Tokenization,
    /// Window step; 1 gives every overlapping window.
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl IngestOptions {
    pub fn new(context_len: usize, vocab_cap: usize) -> Self {
        Self {
            context_len,
            vocab_cap,
            tokenization: Tokenization::Word,
            stride: 1,
        }
    }
}

/// Token ↔ id map; id 0 is always the unknown token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Keeps the `cap − 1` most frequent tokens (ties by first appearance).
    pub fn build(tokens: &[String], cap: usize) -> Self {
        let mut first_seen: HashMap<&str, (usize, usize)> = HashMap::new();
        for (pos, t) in tokens.iter().enumerate() {
            first_seen.entry(t).or_insert((0, pos)).0 += 1;
        }
        let mut ranked: Vec<(&str, usize, usize)> =
            first_seen.into_iter().map(|(t, (c, p))| (t, c, p)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let keep = cap.saturating_sub(1);
        let mut list = vec![UNK.to_string()];
        list.extend(ranked.into_iter().take(keep).map(|(t, _, _)| t.to_string()));
        Self::from_tokens(list)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(UNK, String::as_str)
    }
}

/// Tokenized fixed-length examples plus the vocabulary that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub examples: Vec<Vec<u32>>,
}

fn tokenize(text: &str, mode: Tokenization) -> Vec<String> {
    match mode {
        Tokenization::Word => text.split_whitespace().map(str::to_string).collect(),
        Tokenization::Char => text.chars().map(String::from).collect(),
    }
}

pub fn ingest_text(text: &str, opts: &IngestOptions) -> Result<Corpus> {
    if opts.context_len == 0 || opts.stride == 0 || opts.vocab_cap == 0 {
        return Err(Error::InvalidRange(
            "context length, stride and vocab cap must be positive".into(),
        ));
    }
    let tokens = tokenize(text, opts.tokenization);
    if tokens.len() < opts.context_len {
        return Err(Error::EmptyCorpus);
    }
    let vocab = Vocab::build(&tokens, opts.vocab_cap);
    let ids: Vec<u32> = tokens.iter().map(|t| vocab.id(t)).collect();
    let examples = (0..=ids.len() - opts.context_len)
        .step_by(opts.stride)
        .map(|start| ids[start..start + opts.context_len].to_vec())
        .collect();
    Ok(Corpus { vocab, examples })
}

pub fn ingest_corpus(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    ingest_text(&text, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sliding_window_words() {
        let c = ingest_text("a b a b", &IngestOptions::new(2, 10)).unwrap();
        let a = c.vocab.id("a");
        let b = c.vocab.id("b");
        assert_ne!(a, b);
        assert_eq!(c.examples, vec![vec![a, b], vec![b, a], vec![a, b]]);
    }

    #[test]
    fn cap_one_maps_everything_to_unk() {
        let c = ingest_text("x y z x", &IngestOptions::new(2, 1)).unwrap();
        assert_eq!(c.vocab.len(), 1);
        assert!(c.examples.iter().flatten().all(|&t| t == UNK_ID));
    }

    #[test]
    fn deterministic_and_frequency_ranked() {
        let text = "c b a b c c";
        let opts = IngestOptions::new(3, 3);
        let c1 = ingest_text(text, &opts).unwrap();
        let c2 = ingest_text(text, &opts).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(c1.vocab.token(1), "c");
        assert_eq!(c1.vocab.token(2), "b");
        assert_eq!(c1.vocab.id("a"), UNK_ID);
    }

    #[test]
    fn char_mode_and_stride() {
        let mut opts = IngestOptions::new(2, 10);
        opts.tokenization = Tokenization::Char;
        opts.stride = 2;
        let c = ingest_text("abcde", &opts).unwrap();
        assert_eq!(c.examples.len(), 2);
        assert_eq!(c.vocab.token(c.examples[1][0]), "c");
    }

    #[test]
    fn errors() {
        assert!(matches!(
            ingest_text("   ", &IngestOptions::new(2, 10)),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            ingest_corpus("/nonexistent/corpus.txt", &IngestOptions::new(2, 10)),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "one two three four").unwrap();
        let c = ingest_corpus(&path, &IngestOptions::new(3, 8)).unwrap();
        assert_eq!(c.examples.len(), 2);
    }
}
