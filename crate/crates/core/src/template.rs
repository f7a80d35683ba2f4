//! Prompt templates with `[B]` slot, `[Q]` question and `[T]` target markers.

use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Slot,
    Question,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pieces: Vec<Piece>,
}

/// Instruction skeletons for reconstruction training, one per intent.
pub const RECONSTRUCTION_TEMPLATES: [&str; 6] = [
    "background : [B] . this is equivalent to : [T]",
    "rewrite the background in your own words : [B] -> [T]",
    "provide a restatement of the background : [B] . return : [T]",
    "[B] is a paraphrase of what ? answer with : [T]",
    "these two expressions convey the same meaning : ( 1 ) [B] ( 2 ) [T]",
    "restate [B] using a single sentence . output only [T]",
];

pub const QA_TEMPLATE: &str = "refer to the background document : [B] question : [Q] answer : [T]";

/// The QA prompt without any background line.
pub const QA_NAIVE_TEMPLATE: &str = "question : [Q] answer : [T]";

impl Template {
    pub fn parse(text: &str) -> Result<Template> {
        let mut pieces = Vec::new();
        for tok in text.split_whitespace() {
            let piece = match tok {
                "[B]" => Piece::Slot,
                "[Q]" => Piece::Question,
                "[T]" => Piece::Target,
                t if t.starts_with('[') && t.ends_with(']') && t.len() > 2 => {
                    return Err(Error::Template(format!("unknown marker `{t}`")))
                }
                t => Piece::Word(t.to_string()),
            };
            pieces.push(piece);
        }
        let count = |p: &Piece| pieces.iter().filter(|x| *x == p).count();
        if count(&Piece::Question) > 1 {
            return Err(Error::Template("more than one [Q] marker".into()));
        }
        match count(&Piece::Target) {
            0 => return Err(Error::Template("missing [T] marker".into())),
            1 if pieces.last() == Some(&Piece::Target) => {}
            1 => return Err(Error::Template("[T] must be the last marker".into())),
            _ => return Err(Error::Template("more than one [T] marker".into())),
        }
        Ok(Template { pieces })
    }

    pub fn load(path: &Path) -> Result<Template> {
        Template::parse(&std::fs::read_to_string(path)?)
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn slot_count(&self) -> usize {
        self.pieces.iter().filter(|p| **p == Piece::Slot).count()
    }

    pub fn has_question(&self) -> bool {
        self.pieces.contains(&Piece::Question)
    }

    /// Replaces the single run of consecutive `[B]` markers with `m` copies.
    pub fn expand(&self, m: usize) -> Result<Template> {
        let starts: Vec<usize> = (0..self.pieces.len())
            .filter(|&i| self.pieces[i] == Piece::Slot && (i == 0 || self.pieces[i - 1] != Piece::Slot))
            .collect();
        let [start] = starts[..] else {
            return Err(Error::Template(format!(
                "expected one run of [B] markers, found {}",
                starts.len()
            )));
        };
        let end = (start..self.pieces.len())
            .find(|&i| self.pieces[i] != Piece::Slot)
            .unwrap_or(self.pieces.len());
        let mut pieces = self.pieces[..start].to_vec();
        pieces.extend(std::iter::repeat_n(Piece::Slot, m));
        pieces.extend_from_slice(&self.pieces[end..]);
        Ok(Template { pieces })
    }

    /// Checks every word against the vocabulary.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        for p in &self.pieces {
            if let Piece::Word(w) = p {
                vocab.id(w)?;
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Word(w) => w.as_str(),
                Piece::Slot => "[B]",
                Piece::Question => "[Q]",
                Piece::Target => "[T]",
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}
