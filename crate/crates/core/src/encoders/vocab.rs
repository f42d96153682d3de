use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on whitespace, detaching leading and trailing
/// punctuation into their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    const PUNCT: &[char] = &[',', '.', ';', ':', '!', '?', '"', '(', ')'];
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut w = word;
        let mut lead = Vec::new();
        while let Some(c) = w.chars().next().filter(|c| PUNCT.contains(c)) {
            lead.push(c.to_string());
            w = &w[c.len_utf8()..];
        }
        let mut trail = Vec::new();
        while let Some(c) = w.chars().last().filter(|c| PUNCT.contains(c)) {
            trail.push(c.to_string());
            w = &w[..w.len() - c.len_utf8()];
        }
        out.extend(lead);
        if !w.is_empty() {
            out.push(w.to_lowercase());
        }
        out.extend(trail.into_iter().rev());
    }
    out
}

/// Token ↔ index map with `PAD = 0` and `UNK = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary over the distinct tokens, in sorted order after
    /// the reserved entries.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Self {
        let distinct: BTreeSet<&str> = tokens
            .into_iter()
            .filter(|t| *t != PAD_TOKEN && *t != UNK_TOKEN)
            .collect();
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(distinct.into_iter().map(str::to_string));
        all.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}
