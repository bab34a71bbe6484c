//! Closed task vocabulary.
//!
//! Tokens cover the synthetic task alphabet (small numbers, point and
//! option letters, question/plan words), the boxed-answer markers, and the
//! three latent special tokens. Numbers up to [`MAX_NUMBER`] are single
//! tokens so answers occupy one position.

use crate::error::{Error, Result};

/// Largest integer with a dedicated token.
pub const MAX_NUMBER: usize = 200;

const SPECIALS: [&str; 8] = [
    "<pad>",
    "<eos>",
    "<|latent_start|>",
    "<|latent_pad|>",
    "<|latent_end|>",
    "\\boxed{",
    "}",
    "\\sqrt{",
];

const LETTERS: [&str; 8] = ["A", "B", "C", "D", "M", "N", "P", "Q"];

const WORDS: [&str; 30] = [
    "tri", "legs", "mid", "area", "connect", "reflect", "axis", "path", "box", "w", "h", "d",
    "unfold", "dist", "angle", "par", "alt", "co", "deg", "opts", "extend", "to", "then", "line",
    "midline", "diag", "?", "=", ",", ".",
];

/// Fixed vocabulary with stable ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    surfaces: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut surfaces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for n in 0..=MAX_NUMBER {
            surfaces.push(n.to_string());
        }
        surfaces.extend(LETTERS.iter().map(|s| s.to_string()));
        surfaces.extend(WORDS.iter().map(|s| s.to_string()));
        Vocabulary { surfaces }
    }

    pub fn size(&self) -> usize {
        self.surfaces.len()
    }

    pub const fn pad(&self) -> u32 {
        0
    }
    pub const fn eos(&self) -> u32 {
        1
    }
    pub const fn latent_start(&self) -> u32 {
        2
    }
    pub const fn latent_pad(&self) -> u32 {
        3
    }
    pub const fn latent_end(&self) -> u32 {
        4
    }
    pub const fn box_open(&self) -> u32 {
        5
    }
    pub const fn brace_close(&self) -> u32 {
        6
    }
    pub const fn sqrt_open(&self) -> u32 {
        7
    }

    /// Token id of the integer `n`, when representable.
    pub fn number(&self, n: usize) -> Option<u32> {
        (n <= MAX_NUMBER).then(|| (SPECIALS.len() + n) as u32)
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.surfaces[id as usize]
    }

    /// Id of an exact surface form.
    pub fn id(&self, surface: &str) -> Option<u32> {
        self.surfaces.iter().position(|s| s == surface).map(|i| i as u32)
    }

    /// Id of a surface form, as an error on unknown tokens.
    pub fn id_or_err(&self, surface: &str) -> Result<u32> {
        self.id(surface)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown token {surface:?}")))
    }

    /// Render token ids as text. Outside brace regions tokens are joined by
    /// single spaces; inside `\boxed{` / `\sqrt{` regions they are
    /// concatenated so answers read as `\boxed{42}`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut depth = 0usize;
        for &id in ids {
            let surf = self.surface(id);
            if !out.is_empty() && depth == 0 {
                out.push(' ');
            }
            out.push_str(surf);
            if id == self.box_open() || id == self.sqrt_open() {
                depth += 1;
            } else if id == self.brace_close() {
                depth = depth.saturating_sub(1);
            }
        }
        out
    }

    /// Inverse of [`decode`] on valid strings.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            if let Some(id) = self.id(word) {
                ids.push(id);
                continue;
            }
            self.encode_compound(word, &mut ids)?;
        }
        Ok(ids)
    }

    fn encode_compound(&self, word: &str, ids: &mut Vec<u32>) -> Result<()> {
        let mut rest = word;
        while !rest.is_empty() {
            if let Some(tail) = rest.strip_prefix("\\boxed{") {
                ids.push(self.box_open());
                rest = tail;
            } else if let Some(tail) = rest.strip_prefix("\\sqrt{") {
                ids.push(self.sqrt_open());
                rest = tail;
            } else if let Some(tail) = rest.strip_prefix('}') {
                ids.push(self.brace_close());
                rest = tail;
            } else if rest.starts_with(|c: char| c.is_ascii_digit()) {
                let end = rest
                    .find(|c: char| !c.is_ascii_digit())
                    .unwrap_or(rest.len());
                let n: usize = rest[..end]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad number in {word:?}")))?;
                let id = self
                    .number(n)
                    .ok_or_else(|| Error::InvalidArgument(format!("number {n} exceeds vocabulary range")))?;
                ids.push(id);
                rest = &rest[end..];
            } else {
                // single-character tokens (letters) inside a compound
                let ch = &rest[..rest.chars().next().map(|c| c.len_utf8()).unwrap_or(1)];
                let id = self
                    .id(ch)
                    .ok_or_else(|| Error::InvalidArgument(format!("cannot encode {word:?}")))?;
                ids.push(id);
                rest = &rest[ch.len()..];
            }
        }
        Ok(())
    }
}
