//! Word-level tokenizer over lowercased whitespace-delimited tokens.
//!
//! Ids `0..4` are the specials (PAD, BOS, EOS, UNK); learned tokens start at
//! [`Vocabulary::FIRST_LEARNED`].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// The literal that [`decode`] emits for an unknown token.
pub const UNK_MARKER: &str = "<unk>";

pub const DEFAULT_MAX_SIZE: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub const FIRST_LEARNED: TokenId = 4;

    fn from_learned(learned: Vec<String>) -> Self {
        let id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(learned).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(SPECIALS.len())
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        id < Self::FIRST_LEARNED
    }

    /// Lowercased whitespace tokens of `text`.
    pub fn normalize(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_lowercase).collect()
    }

    /// Ids of `text` without boundary tokens.
    pub fn ids(&self, text: &str) -> Vec<TokenId> {
        Self::normalize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        if v.len() < SPECIALS.len() || v.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Vocabulary("special tokens missing or out of order".into()));
        }
        let learned: Vec<String> = v[SPECIALS.len()..].to_vec();
        let vocab = Vocabulary::from_learned(learned);
        if vocab.token_to_id.len() != vocab.len() - SPECIALS.len() {
            return Err(Error::Vocabulary("duplicate tokens".into()));
        }
        Ok(vocab)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.id_to_token
    }
}

/// Build a vocabulary from the most frequent tokens of `corpora`.
pub fn build(corpora: &[&Corpus], max_size: usize) -> Result<Vocabulary> {
    build_from_texts(
        corpora.iter().flat_map(|c| c.records().iter().map(|r| r.text.as_str())),
        max_size,
    )
}

/// Same as [`build`] over plain texts.
pub fn build_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocabulary> {
    if max_size <= SPECIALS.len() {
        return Err(Error::Vocabulary(format!(
            "max_size {max_size} leaves no room for learned tokens"
        )));
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        for tok in Vocabulary::normalize(t) {
            if SPECIALS.contains(&tok.as_str()) {
                continue;
            }
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::Vocabulary("no tokens in the input texts".into()));
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    // Stable sort over lexicographic input keeps ties lexicographic.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.truncate(max_size - SPECIALS.len());
    Ok(Vocabulary::from_learned(ranked.into_iter().map(|(t, _)| t).collect()))
}

/// `BOS + ids + EOS`, truncated to `context` tokens with EOS kept last.
pub fn encode(v: &Vocabulary, text: &str, context: usize) -> Vec<TokenId> {
    let mut out = vec![BOS];
    out.extend(v.ids(text));
    out.push(EOS);
    truncate(out, context)
}

/// `BOS + prompt + text + EOS`, the training stream for one record.
pub fn encode_pair(v: &Vocabulary, prompt: &str, text: &str, context: usize) -> Vec<TokenId> {
    let mut out = vec![BOS];
    out.extend(v.ids(prompt));
    out.extend(v.ids(text));
    out.push(EOS);
    truncate(out, context)
}

/// `BOS + prompt`, the generation prefix for an instruction.
pub fn encode_prompt(v: &Vocabulary, prompt: &str) -> Vec<TokenId> {
    let mut out = vec![BOS];
    out.extend(v.ids(prompt));
    out
}

fn truncate(mut ids: Vec<TokenId>, context: usize) -> Vec<TokenId> {
    if ids.len() > context && context >= 2 {
        ids.truncate(context);
        ids[context - 1] = EOS;
    }
    ids
}

/// Join non-special tokens with single spaces; UNK becomes [`UNK_MARKER`].
pub fn decode(v: &Vocabulary, ids: &[TokenId]) -> Result<String> {
    let mut parts = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = v
            .token(id)
            .ok_or_else(|| Error::Vocabulary(format!("id {id} out of range ({})", v.len())))?;
        match id {
            UNK => parts.push(UNK_MARKER),
            id if Vocabulary::is_special(id) => {}
            _ => parts.push(tok),
        }
    }
    Ok(parts.join(" "))
}
