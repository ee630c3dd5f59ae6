use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{invalid, Result};

pub const BLANK: usize = 0;
const BLANK_SYMBOL: &str = "<blank>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Character,
    Phoneme,
}

/// Output symbols of a CTC classifier; index 0 is the blank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    kind: VocabKind,
}

/// Target token ids, none of them blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&i| i == BLANK || i >= vocab_size) {
            return invalid(format!("token id {bad} is blank or outside a vocabulary of {vocab_size}"));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocab {
    /// Blank, `a`-`z`, space and apostrophe.
    pub fn characters() -> Self {
        let mut tokens = vec![BLANK_SYMBOL.to_string()];
        tokens.extend(('a'..='z').map(String::from));
        tokens.push(" ".into());
        tokens.push("'".into());
        Self {
            tokens,
            kind: VocabKind::Character,
        }
    }

    /// Blank followed by the given symbols.
    pub fn phonemes<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let mut tokens = vec![BLANK_SYMBOL.to_string()];
        for s in symbols {
            let s = s.as_ref().trim();
            if s.is_empty() || s.contains(char::is_whitespace) || tokens.iter().any(|t| t == s) {
                return invalid(format!("bad or repeated phoneme symbol `{s}`"));
            }
            tokens.push(s.to_string());
        }
        Ok(Self {
            tokens,
            kind: VocabKind::Phoneme,
        })
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank_index(&self) -> usize {
        BLANK
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    fn index_of(&self, sym: &str) -> Option<usize> {
        self.tokens.iter().skip(1).position(|t| t == sym).map(|i| i + 1)
    }

    /// Characters are lowercased and must be in the vocabulary; phoneme
    /// strings are split on whitespace.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let ids = match self.kind {
            VocabKind::Character => text
                .to_lowercase()
                .chars()
                .map(|c| {
                    self.index_of(&c.to_string())
                        .ok_or_else(|| crate::Error::InvalidInput(format!("character {c:?} is not in the vocabulary")))
                })
                .collect::<Result<Vec<_>>>()?,
            VocabKind::Phoneme => text
                .split_whitespace()
                .map(|p| {
                    self.index_of(p)
                        .ok_or_else(|| crate::Error::InvalidInput(format!("phoneme `{p}` is not in the vocabulary")))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        TokenSequence::new(ids, self.len())
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let syms = ids.iter().filter_map(|&i| self.token(i)).filter(|t| *t != BLANK_SYMBOL);
        match self.kind {
            VocabKind::Character => syms.collect(),
            VocabKind::Phoneme => syms.collect::<Vec<_>>().join(" "),
        }
    }

    /// One token per line, blank first. Spaces are written as `<space>`.
    pub fn to_text(&self) -> String {
        let mut s = format!("# kind: {}\n", self.kind_name());
        for t in &self.tokens {
            s.push_str(if t == " " { "<space>" } else { t });
            s.push('\n');
        }
        s
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            VocabKind::Character => "character",
            VocabKind::Phoneme => "phoneme",
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kind = VocabKind::Phoneme;
        let mut tokens = Vec::new();
        for line in text.lines() {
            if let Some(k) = line.strip_prefix("# kind:") {
                kind = match k.trim() {
                    "character" => VocabKind::Character,
                    "phoneme" => VocabKind::Phoneme,
                    other => return invalid(format!("unknown vocabulary kind `{other}`")),
                };
                continue;
            }
            if line.is_empty() {
                continue;
            }
            tokens.push(if line == "<space>" { " ".to_string() } else { line.to_string() });
        }
        if tokens.first().map(String::as_str) != Some(BLANK_SYMBOL) {
            return invalid(format!("vocabulary must start with {BLANK_SYMBOL}"));
        }
        Ok(Self { tokens, kind })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn character_round_trip() {
        let v = Vocab::characters();
        assert_eq!(v.len(), 29);
        let y = v.encode("Don't stop").unwrap();
        assert_eq!(v.decode(y.ids()), "don't stop");
        assert!(v.encode("café").is_err());
    }

    #[test]
    fn phoneme_round_trip_and_file_format() {
        let v = Vocab::phonemes(&["AA", "B", "K"]).unwrap();
        let y = v.encode("B AA K").unwrap();
        assert_eq!(y.ids(), &[2, 1, 3]);
        assert_eq!(v.decode(y.ids()), "B AA K");
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        let c = Vocab::characters();
        assert_eq!(Vocab::from_text(&c.to_text()).unwrap(), c);
        assert!(Vocab::phonemes(&["A", "A"]).is_err());
    }

    #[test]
    fn sequences_reject_blank_and_out_of_range() {
        assert!(TokenSequence::new(vec![1, 0], 3).is_err());
        assert!(TokenSequence::new(vec![3], 3).is_err());
        assert!(TokenSequence::new(vec![], 3).is_ok());
    }
}
