//! Word vocabulary and sentence tokenization.

use std::collections::HashMap;
use std::path::Path;

use crate::encoders::QueryTokens;
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

/// What to do with a word that is not in the vocabulary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OovPolicy {
    #[default]
    Error,
    Unk,
}

/// Word list with [`UNK`] at id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased words with surrounding punctuation removed.
pub fn words(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

impl Vocabulary {
    /// Words in first-seen order.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self {
            words: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for s in sentences {
            for w in words(s) {
                if !v.index.contains_key(&w) {
                    v.index.insert(w.clone(), v.words.len());
                    v.words.push(w);
                }
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, sentence: &str, policy: OovPolicy) -> Result<QueryTokens> {
        let ws = words(sentence);
        if ws.is_empty() {
            return Err(Error::Contract(format!("sentence {sentence:?} has no words")));
        }
        let token_ids = ws
            .iter()
            .map(|w| match (self.id(w), policy) {
                (Some(id), _) => Ok(id),
                (None, OovPolicy::Unk) => Ok(0),
                (None, OovPolicy::Error) => Err(Error::Vocabulary { token: w.clone() }),
            })
            .collect::<Result<_>>()?;
        Ok(QueryTokens {
            token_ids,
            raw_text: sentence.to_string(),
        })
    }

    pub fn detokenize(&self, tokens: &QueryTokens) -> String {
        tokens.token_ids.iter().map(|&i| self.word(i).unwrap_or(UNK)).collect::<Vec<_>>().join(" ")
    }

    /// One word per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.words.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("vocabulary must start with {UNK}"),
            });
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self { words, index })
    }
}
