//! Corpus files and tokenized sequences.
//!
//! A corpus file holds one sentence per line, whitespace-separated tokens.
//! HMM corpora get an end-of-sentence token appended at mapping time; PCFG
//! corpora do not.

use crate::error::{Error, Result};
use crate::model::Vocab;
use std::path::Path;

/// A sentence as vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::SentenceLength {
                len: 0,
                reason: "sequences must contain at least one token",
            });
        }
        Ok(Self { ids })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one token
    }

    #[inline]
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Error unless every id indexes the given vocabulary size.
    pub fn check_range(&self, vocab_size: usize) -> Result<()> {
        for (position, &id) in self.ids.iter().enumerate() {
            if id >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    position,
                    id,
                    vocab_size,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PreprocessOptions {
    pub lowercase: bool,
    pub strip_punct: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punct: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sentence {
    /// 1-based line number in the source file.
    pub line: usize,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RawCorpus {
    pub sentences: Vec<Sentence>,
    /// Lines skipped because they were empty (possibly after preprocessing).
    pub skipped_lines: usize,
}

fn is_punct_token(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(|c| c.is_ascii_punctuation())
}

pub fn corpus_from_str(text: &str, opts: &PreprocessOptions) -> RawCorpus {
    let mut corpus = RawCorpus::default();
    for (i, line) in text.lines().enumerate() {
        let mut tokens: Vec<String> = line
            .split_whitespace()
            .filter(|t| !(opts.strip_punct && is_punct_token(t)))
            .map(|t| {
                if opts.lowercase {
                    t.to_lowercase()
                } else {
                    t.to_string()
                }
            })
            .collect();
        if tokens.is_empty() {
            corpus.skipped_lines += 1;
            continue;
        }
        corpus.sentences.push(Sentence {
            line: i + 1,
            tokens: std::mem::take(&mut tokens),
        });
    }
    corpus
}

pub fn load_corpus(path: &Path, opts: &PreprocessOptions) -> Result<RawCorpus> {
    Ok(corpus_from_str(&std::fs::read_to_string(path)?, opts))
}

/// Map one sentence to ids against a vocabulary. Out-of-vocabulary tokens
/// become unk when `allow_unk`, otherwise the offending line and token are
/// reported.
pub fn map_sentence(
    vocab: &Vocab,
    sentence: &Sentence,
    allow_unk: bool,
    append_eos: bool,
) -> Result<TokenSeq> {
    let mut ids = Vec::with_capacity(sentence.tokens.len() + usize::from(append_eos));
    for tok in &sentence.tokens {
        match vocab.id_of(tok) {
            Some(id) => ids.push(id),
            None if allow_unk => ids.push(vocab.unk_id()),
            None => {
                return Err(Error::Corpus {
                    line: sentence.line,
                    msg: format!("token {tok:?} not in vocabulary (unk substitution disabled)"),
                })
            }
        }
    }
    if append_eos {
        ids.push(vocab.eos_id());
    }
    TokenSeq::new(ids)
}

pub fn map_corpus(
    vocab: &Vocab,
    corpus: &RawCorpus,
    allow_unk: bool,
    append_eos: bool,
) -> Result<Vec<TokenSeq>> {
    corpus
        .sentences
        .iter()
        .map(|s| map_sentence(vocab, s, allow_unk, append_eos))
        .collect()
}

/// Render ids back to tokens, optionally dropping a trailing eos.
pub fn render_sentence(vocab: &Vocab, seq: &TokenSeq, drop_trailing_eos: bool) -> String {
    let mut ids = seq.ids();
    if drop_trailing_eos && ids.last() == Some(&vocab.eos_id()) {
        ids = &ids[..ids.len() - 1];
    }
    ids.iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Build a vocabulary from a corpus: tokens by descending frequency (ties
/// lexicographic), with the reserved unk/eos tokens always present.
pub fn vocab_from_corpus(corpus: &RawCorpus, max_size: Option<usize>) -> Result<Vocab> {
    use std::collections::HashMap;
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &corpus.sentences {
        for t in &s.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    counts.remove(crate::model::UNK_TOKEN);
    counts.remove(crate::model::EOS_TOKEN);
    let mut ordered: Vec<(&str, usize)> = counts.into_iter().collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if let Some(cap) = max_size {
        let keep = cap.saturating_sub(2); // room for unk and eos
        ordered.truncate(keep);
    }
    let mut tokens = vec![crate::model::UNK_TOKEN.to_string()];
    tokens.extend(ordered.into_iter().map(|(t, _)| t.to_string()));
    tokens.push(crate::model::EOS_TOKEN.to_string());
    Vocab::new(tokens)
}
