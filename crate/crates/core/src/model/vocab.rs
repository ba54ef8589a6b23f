use std::collections::HashMap;

use crate::error::{MoclError, Result};

pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const SPECIAL_TOKENS: [&str; 3] = ["[CLS]", "[PAD]", "[UNK]"];

/// Whitespace vocabulary with fixed special ids `CLS=0, PAD=1, UNK=2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids padded to a fixed length, plus the count of real positions
/// (including the leading CLS).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub len: usize,
}

impl TokenSeq {
    /// The non-PAD prefix.
    pub fn active(&self) -> &[usize] {
        &self.ids[..self.len]
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.len).collect()
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocab {
    /// Vocabulary over `texts` in first-appearance order, capped at
    /// `max_size` entries including the specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < SPECIAL_TOKENS.len() {
            return Err(MoclError::Config(format!(
                "vocabulary size {max_size} cannot hold the special tokens"
            )));
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        'outer: for text in texts {
            for w in words(text) {
                if tokens.len() >= max_size {
                    break 'outer;
                }
                if !index.contains_key(&w) {
                    index.insert(w.clone(), tokens.len());
                    tokens.push(w);
                }
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lowercased whitespace split, CLS prepended, truncated or PAD-filled to
    /// `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSeq> {
        if max_len < 2 {
            return Err(MoclError::Config(format!("max_len {max_len} < 2")));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend(words(text).take(max_len - 1).map(|w| self.id(&w)));
        let len = ids.len();
        ids.resize(max_len, PAD_ID);
        Ok(TokenSeq { ids, len })
    }

    /// One token per line, specials first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(MoclError::Parse {
                    line: i + 1,
                    message: format!("expected special token {special}"),
                });
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(MoclError::Parse {
                    line: i + 1,
                    message: "token must be non-empty and whitespace-free".into(),
                });
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(MoclError::Parse {
                    line: i + 1,
                    message: format!("duplicate token {t}"),
                });
            }
        }
        Ok(Self { tokens, index })
    }
}
