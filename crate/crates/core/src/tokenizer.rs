//! Word-level vocabulary and text ↔ id conversion.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const PAD: usize = 3;

const SPECIALS: [&str; 4] = ["[UNK]", "[CLS]", "[SEP]", "[PAD]"];
const UNK_TEXT: &str = "<unk>";

/// Lowercases and splits on whitespace; every ASCII punctuation character
/// becomes its own token. The literal `<unk>` survives as one token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if word == UNK_TEXT {
            out.push(word.to_string());
            continue;
        }
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Joins tokens with single spaces, attaching punctuation to the preceding
/// word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        let punct = t.len() == 1 && t.chars().all(|c| c.is_ascii_punctuation());
        if !out.is_empty() && !punct {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    min_frequency: usize,
}

impl Vocabulary {
    fn from_words(words: Vec<String>, min_frequency: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate word `{w}`")));
            }
        }
        Ok(Vocabulary {
            words,
            index,
            min_frequency,
        })
    }

    /// Words seen at least `min_frequency` times, most frequent first, ties
    /// broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_frequency: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                if tok != UNK_TEXT {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_frequency.max(1) && !SPECIALS.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_words(words, min_frequency)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, word: &str) -> usize {
        if word == UNK_TEXT {
            return UNK;
        }
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocabulary(format!("id {id} outside vocabulary of {}", self.len())))
    }

    /// `[CLS] tokens… [SEP]`, with the `[CLS] tokens…` part cut to
    /// `max_len − 1` entries so the result never exceeds `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        if max_len < 2 {
            return Err(Error::Config(format!("encode needs max_len >= 2, got {max_len}")));
        }
        let mut ids = vec![CLS];
        ids.extend(tokenize(text).iter().map(|t| self.id(t)));
        ids.truncate(max_len - 1);
        ids.push(SEP);
        Ok(ids)
    }

    /// Text for `ids`, skipping CLS, SEP and PAD. Unknown words print as
    /// `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let w = self.word(id)?;
            match id {
                CLS | SEP | PAD => {}
                UNK => words.push(UNK_TEXT),
                _ => words.push(w),
            }
        }
        Ok(detokenize(&words))
    }

    /// Four special-token lines, then one word per line in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::CorruptData {
                path: origin.to_path_buf(),
                reason: "vocabulary file lacks the special-token header".into(),
            });
        }
        Self::from_words(words, 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}
