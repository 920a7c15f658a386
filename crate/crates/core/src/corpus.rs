use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Token id in the model vocabulary.
pub type Token = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<Token>,
    pub reference: Vec<Token>,
}

/// Sentence pairs of one language pair; the sentence id is the index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pair: String,
    pub sentences: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(pair: impl Into<String>, sentences: Vec<SentencePair>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Empty("parallel corpus"));
        }
        Ok(Self {
            pair: pair.into(),
            sentences,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &[Token]> {
        self.sentences.iter().map(|s| s.source.as_slice())
    }

    pub fn references(&self) -> impl Iterator<Item = &[Token]> {
        self.sentences.iter().map(|s| s.reference.as_slice())
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for (sid, s) in self.sentences.iter().enumerate() {
            if let Some(&t) = s
                .source
                .iter()
                .chain(&s.reference)
                .find(|&&t| t as usize >= vocab_size)
            {
                return Err(Error::Sentence {
                    sid,
                    reason: format!("token {t} outside vocabulary of size {vocab_size}"),
                });
            }
        }
        Ok(())
    }
}

/// Many-to-one contract: every pair has the same number of sentences and the
/// same reference for each sentence id.
pub fn check_shared_references(corpora: &BTreeMap<String, ParallelCorpus>) -> Result<()> {
    let mut iter = corpora.values();
    let Some(first) = iter.next() else {
        return Err(Error::Empty("corpus set"));
    };
    for other in iter {
        if other.len() != first.len() {
            return Err(Error::LengthMismatch(format!(
                "pair {} has {} sentences, pair {} has {}",
                first.pair,
                first.len(),
                other.pair,
                other.len()
            )));
        }
        if let Some(sid) = (0..first.len())
            .find(|&i| first.sentences[i].reference != other.sentences[i].reference)
        {
            return Err(Error::Sentence {
                sid,
                reason: format!("references differ between {} and {}", first.pair, other.pair),
            });
        }
    }
    Ok(())
}
