use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const START: usize = 2;
pub const MASK: usize = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[START]", "[MASK]"];

/// Token table with reserved ids `0..4` for the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    similar: BTreeMap<usize, Vec<usize>>,
}

impl Vocabulary {
    /// Assigns ids from 4 upward in first-seen order; duplicates and special
    /// names are ignored.
    pub fn new<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut vocab = Self {
            tokens: SPECIALS.iter().map(|s| s.to_string()).collect(),
            index: SPECIALS
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect(),
            similar: BTreeMap::new(),
        };
        for t in tokens {
            let t = t.as_ref();
            if !vocab.index.contains_key(t) {
                vocab.index.insert(t.to_string(), vocab.tokens.len());
                vocab.tokens.push(t.to_string());
            }
        }
        vocab
    }

    /// Vocabulary of every token segmented from `texts`.
    pub fn from_corpus<S: AsRef<str>>(texts: &[S]) -> Self {
        Self::new(
            texts
                .iter()
                .flat_map(|t| segment(t.as_ref()))
                .map(|(tok, _)| tok),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of ordinary (non-special) tokens.
    pub fn regular_len(&self) -> usize {
        self.tokens.len() - SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ordinary tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Substitute candidates for `id`, if any.
    pub fn similar(&self, id: usize) -> &[usize] {
        self.similar.get(&id).map_or(&[], Vec::as_slice)
    }

    /// Installs a token → substitutes table. Pairs naming tokens outside
    /// the vocabulary are dropped.
    pub fn set_similar_words(&mut self, table: &BTreeMap<String, Vec<String>>) {
        self.similar.clear();
        for (word, subs) in table {
            let Some(id) = self.id(word) else { continue };
            let mut ids: Vec<usize> = subs
                .iter()
                .filter_map(|s| self.id(s))
                .filter(|&s| s != id)
                .collect();
            ids.dedup();
            if !ids.is_empty() {
                self.similar.insert(id, ids);
            }
        }
    }

    pub fn similar_words(&self) -> BTreeMap<String, Vec<String>> {
        self.similar
            .iter()
            .map(|(&k, v)| {
                (
                    self.tokens[k].clone(),
                    v.iter().map(|&i| self.tokens[i].clone()).collect(),
                )
            })
            .collect()
    }
}

/// Reads a JSON object mapping each token to an array of substitutes.
pub fn load_similar_words(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::file(path, format!("similar-word table: {e}")))
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2A6DF | 0x3040..=0x30FF | 0xAC00..=0xD7AF)
}

/// Splits text into `(token, word index)` pairs.
///
/// Whitespace separates words. Inside a word, alphanumeric runs are one
/// token (lowercased), while CJK characters and punctuation are single
/// tokens. Every token keeps the index of the word it came from.
pub fn segment(text: &str) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (w, word) in text.split_whitespace().enumerate() {
        let mut run = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() && !is_cjk(c) {
                run.extend(c.to_lowercase());
                continue;
            }
            if !run.is_empty() {
                out.push((std::mem::take(&mut run), w));
            }
            out.push((c.to_string(), w));
        }
        if !run.is_empty() {
            out.push((run, w));
        }
    }
    out
}

/// Token ids with the word index of each position (`None` for START).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub words: Vec<Option<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// START followed by the segmented tokens, cut to `max_len` in total.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if text.trim().is_empty() {
        return Err(Error::contract("cannot tokenize empty text"));
    }
    if max_len < 2 {
        return Err(Error::config(format!(
            "max_len must be at least 2, got {max_len}"
        )));
    }
    let mut ids = vec![START];
    let mut words = vec![None];
    for (tok, w) in segment(text).into_iter().take(max_len - 1) {
        ids.push(vocab.id(&tok).unwrap_or(UNK));
        words.push(Some(w));
    }
    Ok(TokenSequence { ids, words })
}
