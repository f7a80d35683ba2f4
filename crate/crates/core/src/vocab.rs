//! Fixed word-level vocabulary: reserved tokens first, then content tokens.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SLOT: &str = "<slot>";

// Control tokens followed by every word used by the instruction templates.
const RESERVED: &[&str] = &[
    BOS,
    EOS,
    SLOT,
    ".",
    ":",
    "?",
    "->",
    "(",
    ")",
    "1",
    "2",
    "background",
    "this",
    "is",
    "equivalent",
    "to",
    "rewrite",
    "the",
    "in",
    "your",
    "own",
    "words",
    "provide",
    "a",
    "restatement",
    "of",
    "return",
    "paraphrase",
    "what",
    "answer",
    "with",
    "these",
    "two",
    "expressions",
    "convey",
    "same",
    "meaning",
    "restate",
    "using",
    "single",
    "sentence",
    "output",
    "only",
    "refer",
    "document",
    "question",
];

#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn reserved_count() -> usize {
        RESERVED.len()
    }

    /// `size` counts reserved and content tokens together.
    pub fn new(size: usize) -> Result<Vocab> {
        if size <= RESERVED.len() {
            return Err(Error::Vocabulary(format!(
                "size {size} leaves no room for content tokens"
            )));
        }
        let content = size - RESERVED.len();
        let width = content.saturating_sub(1).to_string().len().max(2);
        let mut words: Vec<String> = RESERVED.iter().map(|w| w.to_string()).collect();
        words.extend((0..content).map(|i| format!("t{i:0width$}")));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Vocab { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    /// Placeholder id occupying slot positions; never a generation target.
    pub fn slot(&self) -> usize {
        2
    }

    pub fn content_count(&self) -> usize {
        self.words.len() - RESERVED.len()
    }

    /// Id of the `i`-th content token.
    pub fn content(&self, i: usize) -> usize {
        RESERVED.len() + i
    }

    pub fn is_content(&self, id: usize) -> bool {
        id >= RESERVED.len() && id < self.words.len()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown token `{word}`")))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("id {id} outside vocabulary of {}", self.len())))
    }

    /// Whitespace tokenization.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }
}
