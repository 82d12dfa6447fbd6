use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conllu::DepAnnotatedText;
use super::tokenizer::{check_partition, TokenizedCorpus, Tokenizer};
use crate::error::{Error, Result};

/// A training window: `len + 1` tokens (inputs plus shifted targets) with word spans
/// over the inputs and each word's parent inside the window.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub tokens: Vec<u32>,
    pub spans: Vec<Range<usize>>,
    pub parents: Vec<Option<usize>>,
}

impl Window {
    pub fn inputs(&self) -> &[u32] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn targets(&self) -> &[u32] {
        &self.tokens[1..]
    }
}

/// Documents joined into one token stream with a separator before each document,
/// keeping word boundaries and (optionally) dependency parents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCorpus {
    tokens: Vec<u32>,
    /// Word index of every token; separators are words of their own.
    word_of: Vec<usize>,
    word_start: Vec<usize>,
    parent: Vec<Option<usize>>,
    /// Position of the separator opening each document.
    doc_starts: Vec<usize>,
    separator: u32,
}

impl TrainingCorpus {
    /// `parses`, when given, must describe exactly the words of every document.
    pub fn new(
        corpus: &TokenizedCorpus,
        separator: u32,
        parses: Option<(&DepAnnotatedText, &Tokenizer)>,
    ) -> Result<Self> {
        let docs = match parses {
            Some((text, tok)) => {
                let docs = text.documents();
                if docs.len() != corpus.documents.len() {
                    return Err(Error::Data(format!(
                        "{} parsed documents for {} corpus documents",
                        docs.len(),
                        corpus.documents.len()
                    )));
                }
                for (d, (words, _)) in docs.iter().enumerate() {
                    let decoded = tok.decode_words(&corpus.documents[d], &corpus.word_spans[d])?;
                    if &decoded != words {
                        return Err(Error::Data(format!("document {d}: parse words differ from corpus text")));
                    }
                }
                Some(docs)
            }
            None => None,
        };
        let mut out = Self {
            separator,
            ..Self::default()
        };
        for (d, ids) in corpus.documents.iter().enumerate() {
            let spans = &corpus.word_spans[d];
            check_partition(spans, ids.len())?;
            out.doc_starts.push(out.tokens.len());
            out.push_word(&[separator], None);
            let base = out.word_start.len();
            for (w, span) in spans.iter().enumerate() {
                let parent = docs.as_ref().and_then(|docs| docs[d].1[w]).map(|p| base + p);
                out.push_word(&ids[span.clone()], parent);
            }
        }
        Ok(out)
    }

    fn push_word(&mut self, ids: &[u32], parent: Option<usize>) {
        let w = self.word_start.len();
        self.word_start.push(self.tokens.len());
        self.parent.push(parent);
        self.tokens.extend_from_slice(ids);
        self.word_of.extend(std::iter::repeat_n(w, ids.len()));
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn separator(&self) -> u32 {
        self.separator
    }

    pub fn has_parses(&self) -> bool {
        self.parent.iter().any(Option::is_some)
    }

    /// Window of `len` inputs starting at token `start`. Words cut by the window edge
    /// keep only their visible tokens.
    pub fn window(&self, start: usize, len: usize) -> Result<Window> {
        if start + len + 1 > self.tokens.len() {
            return Err(Error::Data(format!(
                "window {start}+{len} exceeds stream of {} tokens",
                self.tokens.len()
            )));
        }
        let end = start + len;
        let first = self.word_of[start];
        let last = self.word_of[end - 1];
        let spans = (first..=last)
            .map(|w| {
                let s = self.word_start[w].max(start);
                let e = self.word_start.get(w + 1).copied().unwrap_or(self.tokens.len()).min(end);
                s - start..e - start
            })
            .collect();
        let parents = (first..=last)
            .map(|w| {
                self.parent[w]
                    .filter(|p| (first..=last).contains(p))
                    .map(|p| p - first)
            })
            .collect();
        Ok(Window {
            tokens: self.tokens[start..=end].to_vec(),
            spans,
            parents,
        })
    }

    pub fn sample_window(&self, rng: &mut impl Rng, len: usize) -> Result<Window> {
        if self.tokens.len() < len + 1 {
            return Err(Error::Data(format!(
                "corpus of {} tokens is shorter than a {len}-token window",
                self.tokens.len()
            )));
        }
        let start = rng.random_range(0..=self.tokens.len() - len - 1);
        self.window(start, len)
    }

    /// Window opening at a random document's separator. Documents shorter than the
    /// window run into the following ones.
    pub fn sample_document_window(&self, rng: &mut impl Rng, len: usize) -> Result<Window> {
        let fits = self.doc_starts.partition_point(|&s| s + len + 1 <= self.tokens.len());
        if fits == 0 {
            return Err(Error::Data(format!(
                "corpus of {} tokens is shorter than a {len}-token window",
                self.tokens.len()
            )));
        }
        self.window(self.doc_starts[rng.random_range(0..fits)], len)
    }

    /// Non-overlapping windows covering the stream from the start.
    pub fn sequential_windows(&self, len: usize, max: usize) -> Result<Vec<Window>> {
        let n = (self.tokens.len().saturating_sub(1) / len).min(max);
        (0..n).map(|i| self.window(i * len, len)).collect()
    }
}

/// Splits documents into (train, held-out) with the last `fraction` held out.
pub fn split_documents(corpus: &TokenizedCorpus, fraction: f64) -> Result<(TokenizedCorpus, TokenizedCorpus)> {
    let n = corpus.documents.len();
    let held = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 {
        return Err(Error::Data("need at least two documents to hold some out".into()));
    }
    let cut = n - held;
    let part = |r: Range<usize>| TokenizedCorpus {
        documents: corpus.documents[r.clone()].to_vec(),
        word_spans: corpus.word_spans[r].to_vec(),
    };
    Ok((part(0..cut), part(cut..n)))
}

/// Sidecar manifest of a pre-tokenized corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretokenizedManifest {
    /// File of little-endian u32 ids, relative to the manifest.
    pub blob: String,
    pub separator_id: u32,
    pub vocab_size: usize,
}

/// Reads a pre-tokenized corpus; documents are split at the separator id and every
/// token is its own word.
pub fn load_pretokenized(manifest_path: &Path) -> Result<(TokenizedCorpus, PretokenizedManifest)> {
    let manifest: PretokenizedManifest = serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let bytes = std::fs::read(dir.join(&manifest.blob))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data("pre-tokenized blob length is not a multiple of 4".into()));
    }
    let mut corpus = TokenizedCorpus::default();
    let mut doc = Vec::new();
    let flush = |doc: &mut Vec<u32>, corpus: &mut TokenizedCorpus| {
        if !doc.is_empty() {
            corpus.word_spans.push((0..doc.len()).map(|i| i..i + 1).collect());
            corpus.documents.push(std::mem::take(doc));
        }
    };
    for c in bytes.chunks_exact(4) {
        let id = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if id as usize >= manifest.vocab_size {
            return Err(Error::Data(format!("token id {id} >= vocab size {}", manifest.vocab_size)));
        }
        if id == manifest.separator_id {
            flush(&mut doc, &mut corpus);
        } else {
            doc.push(id);
        }
    }
    flush(&mut doc, &mut corpus);
    if corpus.documents.is_empty() {
        return Err(Error::Data("pre-tokenized corpus is empty".into()));
    }
    Ok((corpus, manifest))
}

/// Writes documents as a separator-delimited u32 stream plus its manifest.
pub fn save_pretokenized(manifest_path: &Path, corpus: &TokenizedCorpus, manifest: &PretokenizedManifest) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut bytes = Vec::new();
    for doc in &corpus.documents {
        bytes.extend_from_slice(&manifest.separator_id.to_le_bytes());
        doc.iter().for_each(|id| bytes.extend_from_slice(&id.to_le_bytes()));
    }
    std::fs::write(dir.join(&manifest.blob), bytes)?;
    std::fs::write(manifest_path, serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::conllu::parse_conllu;
    use crate::data::tokenizer::VocabPolicy;

    fn setup() -> (Tokenizer, TokenizedCorpus, DepAnnotatedText) {
        let text = "dogs bark\nthe cat sleeps";
        let tok = Tokenizer::fit(text.lines(), &VocabPolicy::default()).unwrap();
        let corpus = tok.tokenize(text).unwrap();
        let row = |i: usize, w: &str, h: usize| format!("{i}\t{w}\t_\t_\t_\t_\t{h}\tx\t_\t_\n");
        let conllu = "# newdoc\n".to_string()
            + &row(1, "dogs", 2)
            + &row(2, "bark", 0)
            + "\n# newdoc\n"
            + &row(1, "the", 2)
            + &row(2, "cat", 3)
            + &row(3, "sleeps", 0);
        (tok, corpus, parse_conllu(&conllu, "t").unwrap())
    }

    #[test]
    fn document_windows_open_at_separators() {
        use rand::SeedableRng;
        let (_, corpus, _) = setup();
        let tc = TrainingCorpus::new(&corpus, Tokenizer::SEP, None).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        // stream is [sep dogs bark sep the cat sleeps]; only the first document
        // leaves room for 4 inputs plus a target
        for _ in 0..20 {
            let w = tc.sample_document_window(&mut rng, 4).unwrap();
            assert_eq!(w.tokens, tc.tokens()[..5]);
        }
        let starts: std::collections::BTreeSet<u32> =
            (0..50).map(|_| tc.sample_document_window(&mut rng, 2).unwrap().tokens[1]).collect();
        assert_eq!(starts.len(), 2);
        assert!(tc.sample_document_window(&mut rng, 7).is_err());
    }

    #[test]
    fn stream_layout_and_windows() {
        let (tok, corpus, parses) = setup();
        let tc = TrainingCorpus::new(&corpus, Tokenizer::SEP, Some((&parses, &tok))).unwrap();
        assert_eq!(tc.len(), 7);
        assert_eq!(tc.tokens()[0], Tokenizer::SEP);
        let w = tc.window(0, 6).unwrap();
        assert_eq!(w.tokens.len(), 7);
        assert_eq!(w.spans.len(), 6);
        // sep, dogs->bark, bark, sep, the->cat, cat->sleeps(outside window)
        assert_eq!(w.parents, vec![None, Some(2), None, None, Some(5), None]);
        let w = tc.window(4, 2).unwrap();
        assert_eq!(w.parents, vec![Some(1), None]);
        assert!(tc.window(5, 2).is_err());
    }

    #[test]
    fn mismatched_parses_are_rejected() {
        let (tok, corpus, mut parses) = setup();
        parses.sentences[0].words[0] = "cats".into();
        assert!(TrainingCorpus::new(&corpus, Tokenizer::SEP, Some((&parses, &tok))).is_err());
    }

    #[test]
    fn pretokenized_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, corpus, _) = setup();
        let manifest = PretokenizedManifest {
            blob: "tokens.bin".into(),
            separator_id: 0,
            vocab_size: 100,
        };
        let path = dir.path().join("corpus.json");
        save_pretokenized(&path, &corpus, &manifest).unwrap();
        let (back, m) = load_pretokenized(&path).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(back.documents, corpus.documents);
    }
}
