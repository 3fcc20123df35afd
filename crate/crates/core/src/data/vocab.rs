use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const CLS: usize = 3;
/// Ids below this are reserved.
pub const FIRST_WORD: usize = 4;

const RESERVED: [&str; FIRST_WORD] = ["<pad>", "<unk>", "<mask>", "<cls>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from words, most frequent first, ties broken by
    /// the word itself. Words seen fewer than `min_count` times are dropped.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in words {
            if !RESERVED.contains(&w) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(ranked.into_iter().map(|(w, _)| w.to_string()))
            .expect("counted words are unique")
    }

    /// Reserved ids followed by `words` in the given order.
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        let mut v = Vocab { tokens, index: BTreeMap::new() };
        v.reindex()?;
        Ok(v)
    }

    /// Restores the lookup table after deserialisation.
    pub fn reindex(&mut self) -> Result<()> {
        if self.tokens.len() < FIRST_WORD || self.tokens[..FIRST_WORD] != RESERVED {
            return Err(Error::Integrity("vocabulary does not start with the reserved tokens".into()));
        }
        self.index.clear();
        for (i, t) in self.tokens.iter().enumerate() {
            if self.index.insert(t.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == FIRST_WORD
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.tokens[FIRST_WORD..]
    }
}

/// Lowercased word and punctuation tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' || ch == '\'' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Whitespace-joined token form, the fixed point of tokenize/detokenize.
pub fn normalize(text: &str) -> String {
    split_words(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    /// Set when the text had no tokens and only the sentinel was emitted.
    pub empty: bool,
}

/// Sentinel followed by word ids, truncated to `max_len` ids in total.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Tokenized {
    let words = split_words(text);
    let mut ids = Vec::with_capacity(words.len().min(max_len) + 1);
    ids.push(CLS);
    ids.extend(words.iter().map(|w| vocab.id(w).unwrap_or(UNK)).take(max_len.saturating_sub(1)));
    Tokenized { empty: words.is_empty(), ids }
}

pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&i| i != CLS && i != PAD)
        .map(|&i| vocab.token(i).unwrap_or(RESERVED[UNK]))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab() -> Vocab {
        Vocab::from_tokens(["a".to_string(), "b".to_string()]).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let v = ab();
        assert_eq!(tokenize("a b a", &v, 16).ids, vec![CLS, 4, 5, 4]);
        assert_eq!(tokenize("a zebra", &v, 16).ids, vec![CLS, 4, UNK]);
        let e = tokenize("   ", &v, 16);
        assert_eq!(e.ids, vec![CLS]);
        assert!(e.empty);
        assert_eq!(tokenize("a b a b", &v, 3).ids, vec![CLS, 4, 5]);
    }

    #[test]
    fn punctuation_is_split_and_case_folded() {
        assert_eq!(split_words("Good food, GREAT!"), vec!["good", "food", ",", "great", "!"]);
        assert_eq!(normalize("  x   y.z "), "x y . z");
    }

    #[test]
    fn build_orders_by_frequency_then_token() {
        let v = Vocab::build("c b a b c c d".split(' '), 1);
        assert_eq!(v.words(), ["c", "b", "a", "d"]);
        let v = Vocab::build("c b a b c c d".split(' '), 2);
        assert_eq!(v.words(), ["c", "b"]);
        assert_eq!(v.id("<mask>"), Some(MASK));
    }

    #[test]
    fn duplicates_and_bad_prefix_rejected() {
        assert!(Vocab::from_tokens(["a".to_string(), "a".to_string()]).is_err());
        assert!(Vocab::from_tokens(["<unk>".to_string()]).is_err());
        let mut v: Vocab = serde_json::from_str(&serde_json::to_string(&ab()).unwrap()).unwrap();
        assert_eq!(v.id("a"), None);
        v.reindex().unwrap();
        assert_eq!(v, ab());
    }
}
