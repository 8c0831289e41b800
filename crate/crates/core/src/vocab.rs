//! Frequency-ranked vocabularies with reserved BOS/EOS/UNK ids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["<s>", "</s>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from ranked, non-reserved tokens.
    pub fn from_ranked<S: Into<String>>(ranked: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        for t in ranked {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?}")));
            }
            if ids.contains_key(&t) {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
            ids.insert(t.clone(), tokens.len());
            tokens.push(t);
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] when it is out of vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// File form: one non-reserved token per line in rank order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Vocab::from_ranked(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::parse(&text)
    }

    /// SHA-256 of the file form.
    pub fn fingerprint(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}

/// Keeps the `size - 3` most frequent tokens after the reserved ids.
/// Ties are broken lexicographically; reserved strings in the stream are ignored.
pub fn build_vocab<I, S>(token_stream: I, size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if size < RESERVED.len() + 1 {
        return Err(Error::Config(format!(
            "vocabulary size must be at least {}, got {size}",
            RESERVED.len() + 1
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut total = 0u64;
    for t in token_stream {
        let t = t.as_ref();
        total += 1;
        if RESERVED.contains(&t) {
            continue;
        }
        *counts.entry(t.to_string()).or_default() += 1;
    }
    if total == 0 {
        return Err(Error::EmptyCorpus("no tokens to build a vocabulary from".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(size - RESERVED.len());
    Vocab::from_ranked(ranked.into_iter().map(|(t, _)| t))
}
