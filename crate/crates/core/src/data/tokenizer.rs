use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEP_TOKEN: &str = "<sep>";
pub const UNK_TOKEN: &str = "<unk>";

/// How the vocabulary is built from a training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabPolicy {
    /// Total vocabulary size cap, specials and byte tokens included.
    pub max_vocab: usize,
    /// Spell out-of-vocabulary words as byte tokens instead of `<unk>`.
    pub byte_fallback: bool,
}

impl Default for VocabPolicy {
    fn default() -> Self {
        Self {
            max_vocab: 2048,
            byte_fallback: true,
        }
    }
}

/// Whitespace word tokenizer with a frequency-capped vocabulary.
///
/// Id layout: `0` is the document separator, `1` is `<unk>`, then one id per byte
/// value observed during fitting, then whole words by descending frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "TokenizerFile", into = "TokenizerFile")]
pub struct Tokenizer {
    bytes: Vec<u8>,
    words: Vec<String>,
    byte_fallback: bool,
    byte_ids: HashMap<u8, u32>,
    word_ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    byte_fallback: bool,
    bytes: Vec<u8>,
    words: Vec<String>,
}

impl From<TokenizerFile> for Tokenizer {
    fn from(f: TokenizerFile) -> Self {
        Tokenizer::from_parts(f.bytes, f.words, f.byte_fallback)
    }
}

impl From<Tokenizer> for TokenizerFile {
    fn from(t: Tokenizer) -> Self {
        TokenizerFile {
            byte_fallback: t.byte_fallback,
            bytes: t.bytes,
            words: t.words,
        }
    }
}

/// A piece of a decoded token stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Piece<'a> {
    Sep,
    Unk,
    Byte(u8),
    Word(&'a str),
}

impl Tokenizer {
    pub const SEP: u32 = 0;
    pub const UNK: u32 = 1;

    fn from_parts(bytes: Vec<u8>, words: Vec<String>, byte_fallback: bool) -> Self {
        let byte_ids = bytes.iter().enumerate().map(|(i, &b)| (b, 2 + i as u32)).collect();
        let base = 2 + bytes.len() as u32;
        let word_ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), base + i as u32))
            .collect();
        Self {
            bytes,
            words,
            byte_fallback,
            byte_ids,
            word_ids,
        }
    }

    /// Builds the vocabulary from whitespace-split documents.
    pub fn fit<'a>(documents: impl IntoIterator<Item = &'a str>, policy: &VocabPolicy) -> Result<Self> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut seen = [false; 256];
        for doc in documents {
            for w in doc.split_whitespace() {
                *counts.entry(w).or_default() += 1;
                if policy.byte_fallback {
                    w.bytes().for_each(|b| seen[b as usize] = true);
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot fit a tokenizer on an empty corpus".into()));
        }
        let bytes: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        let reserved = 2 + bytes.len();
        if policy.max_vocab <= reserved {
            return Err(Error::Data(format!(
                "max_vocab {} leaves no room for words ({reserved} ids reserved)",
                policy.max_vocab
            )));
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = ranked
            .into_iter()
            .take(policy.max_vocab - reserved)
            .map(|(w, _)| w.to_string())
            .collect();
        Ok(Self::from_parts(bytes, words, policy.byte_fallback))
    }

    pub fn vocab_size(&self) -> usize {
        2 + self.bytes.len() + self.words.len()
    }

    /// Ids of whole-word tokens.
    pub fn word_id_range(&self) -> Range<u32> {
        let base = 2 + self.bytes.len() as u32;
        base..base + self.words.len() as u32
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.word_ids.get(word).copied()
    }

    pub fn piece(&self, id: u32) -> Option<Piece<'_>> {
        let i = id as usize;
        let nb = self.bytes.len();
        match i {
            0 => Some(Piece::Sep),
            1 => Some(Piece::Unk),
            _ if i < 2 + nb => Some(Piece::Byte(self.bytes[i - 2])),
            _ => self.words.get(i - 2 - nb).map(|w| Piece::Word(w)),
        }
    }

    /// Token ids for a single word (never empty for a non-empty word).
    pub fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(id) = self.word_id(word) {
            out.push(id);
        } else if self.byte_fallback {
            out.extend(
                word.bytes()
                    .map(|b| self.byte_ids.get(&b).copied().unwrap_or(Self::UNK)),
            );
        } else {
            out.push(Self::UNK);
        }
    }

    /// Encodes a word sequence, returning the ids and one token range per word.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> (Vec<u32>, Vec<Range<usize>>) {
        let mut ids = Vec::with_capacity(words.len());
        let mut spans = Vec::with_capacity(words.len());
        for w in words {
            let start = ids.len();
            self.encode_word(w.as_ref(), &mut ids);
            spans.push(start..ids.len());
        }
        (ids, spans)
    }

    /// Reassembles words from ids and their spans.
    pub fn decode_words(&self, ids: &[u32], spans: &[Range<usize>]) -> Result<Vec<String>> {
        spans
            .iter()
            .map(|span| {
                let mut bytes = Vec::new();
                for &id in ids.get(span.clone()).ok_or_else(|| Error::Data("span out of range".into()))? {
                    match self.piece(id) {
                        Some(Piece::Word(w)) => bytes.extend_from_slice(w.as_bytes()),
                        Some(Piece::Byte(b)) => bytes.push(b),
                        Some(Piece::Unk) => bytes.extend_from_slice(UNK_TOKEN.as_bytes()),
                        Some(Piece::Sep) => bytes.extend_from_slice(SEP_TOKEN.as_bytes()),
                        None => return Err(Error::Data(format!("token id {id} outside vocabulary"))),
                    }
                }
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            })
            .collect()
    }

    /// One document per non-blank line.
    pub fn tokenize(&self, text: &str) -> Result<TokenizedCorpus> {
        let mut corpus = TokenizedCorpus::default();
        for line in text.lines() {
            let words: Vec<&str> = line.split_whitespace().collect();
            if words.is_empty() {
                continue;
            }
            let (ids, spans) = self.encode_words(&words);
            corpus.documents.push(ids);
            corpus.word_spans.push(spans);
        }
        if corpus.documents.is_empty() {
            return Err(Error::Data("corpus has no documents".into()));
        }
        Ok(corpus)
    }

    /// Whitespace-normalized text of one document.
    pub fn detokenize(&self, ids: &[u32], spans: &[Range<usize>]) -> Result<String> {
        Ok(self.decode_words(ids, spans)?.join(" "))
    }
}

/// Token ids per document with the token range of every word.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenizedCorpus {
    pub documents: Vec<Vec<u32>>,
    pub word_spans: Vec<Vec<Range<usize>>>,
}

impl TokenizedCorpus {
    pub fn n_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }
}

/// Checks that `spans` cover `0..len` contiguously, in order, without empty spans.
pub fn check_partition(spans: &[Range<usize>], len: usize) -> Result<()> {
    let mut next = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start != next || s.end <= s.start {
            return Err(Error::Data(format!("word span {i} ({s:?}) breaks the partition")));
        }
        next = s.end;
    }
    if next != len {
        return Err(Error::Data(format!("word spans cover {next} of {len} tokens")));
    }
    Ok(())
}
