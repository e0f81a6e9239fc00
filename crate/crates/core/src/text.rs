//! Whitespace tokenizer with a frequency-cutoff vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::attributes::Vocab;
use crate::error::Result;

pub const CLS: &str = "[CLS]";
pub const UNK: &str = "[UNK]";
pub const CLS_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vocab,
}

impl Tokenizer {
    /// Keeps words seen at least `min_count` times, most frequent first
    /// (ties broken alphabetically), up to `max_size` entries including the
    /// two special tokens.
    pub fn fit<'a, I>(texts: I, min_count: usize, max_size: Option<usize>) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Vocab::from_labels([CLS, UNK]);
        let cap = max_size.unwrap_or(usize::MAX);
        for (w, _) in words {
            if vocab.len() >= cap {
                break;
            }
            vocab.insert(w);
        }
        Self { vocab }
    }

    pub fn from_vocab(vocab: Vocab) -> Self {
        Self { vocab }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Word ids without the leading `[CLS]`; unknown words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split(text)
            .map(|w| self.vocab.get(&w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.vocab.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            vocab: Vocab::load(path)?,
        })
    }
}

fn split(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}
