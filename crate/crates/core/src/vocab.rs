//! Word-level token space shared by text and control tokens.
//!
//! Ids `0..W` are words, followed by the five special tokens. Visual codebook
//! ids live in a separate space that only the unfolding head sees.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;

const WORDS: &[&str] = &[
    // caption grammar
    "a", "red", "green", "blue", "yellow", "circle", "square", "triangle", "at", "top", "bottom",
    "left", "right", "and",
    // task prompts
    "Provide", "one-sentence", "caption", "for", "the", "image", "Generate", "an", "of", ":",
    "Here", "is", "random",
    // text probe corpus
    "above", "below",
    // fine-detail question
    "What", "color", "small", "object", "?",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Bos,
    Eos,
    Boi,
    Eoi,
    Uncond,
}

impl Special {
    pub const ALL: [Special; 5] = [
        Special::Bos,
        Special::Eos,
        Special::Boi,
        Special::Eoi,
        Special::Uncond,
    ];

    pub fn literal(self) -> &'static str {
        match self {
            Special::Bos => "<s>",
            Special::Eos => "</s>",
            Special::Boi => "<boi>",
            Special::Eoi => "<eoi>",
            Special::Uncond => "<UNCOND>",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        let words = WORDS.to_vec();
        let index = words.iter().enumerate().map(|(i, &w)| (w, i as TokenId)).collect();
        Self { words, index }
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    /// Size of the full non-visual id space (words + specials).
    pub fn size(&self) -> usize {
        self.words.len() + Special::ALL.len()
    }

    /// Rows of the text embedding table: words plus `<s>` and `</s>`.
    /// `<boi>`, `<eoi>` and `<UNCOND>` embed through the visual tables.
    pub fn text_embed_rows(&self) -> usize {
        self.words.len() + 2
    }

    pub fn special(&self, s: Special) -> TokenId {
        (self.words.len() + Special::ALL.iter().position(|&x| x == s).unwrap()) as TokenId
    }

    pub fn as_special(&self, id: TokenId) -> Option<Special> {
        let i = (id as usize).checked_sub(self.words.len())?;
        Special::ALL.get(i).copied()
    }

    pub fn word(&self, w: &str) -> Option<TokenId> {
        self.index.get(w).copied()
    }

    pub fn token_str(&self, id: TokenId) -> &str {
        match self.as_special(id) {
            Some(s) => s.literal(),
            None => self.words[id as usize],
        }
    }

    /// Splits on whitespace; `:` and `?` are separate tokens and special
    /// literals such as `<UNCOND>` map to their ids.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let mut rest = chunk;
            while !rest.is_empty() {
                if let Some(s) = Special::ALL.iter().find(|s| rest.starts_with(s.literal())) {
                    out.push(self.special(*s));
                    rest = &rest[s.literal().len()..];
                    continue;
                }
                let end = rest
                    .char_indices()
                    .skip(1)
                    .find(|&(_, c)| c == ':' || c == '?' || c == '<')
                    .map(|(i, _)| i)
                    .unwrap_or(rest.len());
                let (piece, tail) = rest.split_at(end);
                out.push(self.word(piece).ok_or_else(|| Error::data(format!("unknown word {piece:?}")))?);
                rest = tail;
            }
        }
        Ok(out)
    }

    /// Space-joined words; `:` and `?` attach to the preceding token.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let s = self.token_str(id);
            if !out.is_empty() && s != ":" && s != "?" {
                out.push(' ');
            }
            out.push_str(s);
        }
        out
    }
}
