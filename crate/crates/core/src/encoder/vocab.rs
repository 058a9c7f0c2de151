use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

use super::TokenId;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub cls: TokenId,
    pub sep: TokenId,
    pub pad: Option<TokenId>,
    pub unk: Option<TokenId>,
}

impl SpecialTokens {
    pub fn pad(&self) -> Result<TokenId> {
        self.pad.ok_or(Error::MissingPadToken)
    }
}

/// Token string to id mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let id =
                TokenId::try_from(i).map_err(|_| Error::Config("vocabulary too large".into()))?;
            if ids.insert(t.clone(), id).is_some() {
                return Err(Error::DuplicateId(t.clone()));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// `[PAD]`=0, `[UNK]`=1, `[CLS]`=2, `[SEP]`=3, then every distinct word of
    /// `texts` in sorted order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !is_special(w)));
        Self::from_tokens(tokens).expect("distinct by construction")
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn special_tokens(&self) -> Result<SpecialTokens> {
        let need = |s: &str| {
            self.id(s)
                .ok_or_else(|| Error::Config(format!("vocabulary lacks {s}")))
        };
        Ok(SpecialTokens {
            cls: need(CLS)?,
            sep: need(SEP)?,
            pad: self.id(PAD),
            unk: self.id(UNK),
        })
    }
}

fn is_special(w: &str) -> bool {
    matches!(w, PAD | UNK | CLS | SEP)
}

/// Lowercases, splits on whitespace and emits every other non-alphanumeric
/// character as its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
