//! Toy dependency grammar and the synthetic corpus bundle built from it.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conllu::{DepAnnotatedText, Head, Sentence};
use super::reading::{FrequencyTable, ReadingRow, ReadingTable};
use crate::error::{Error, Result};

const DETS: &[&str] = &["the", "a", "every", "some", "this"];
const NOUNS: &[&str] = &[
    "dog", "cat", "teacher", "river", "garden", "child", "window", "farmer", "letter", "city",
    "bird", "engine", "doctor", "basket", "mountain", "student", "painter", "lamp", "horse",
    "village", "soldier", "machine", "forest", "story",
];
const ADJS: &[&str] = &["old", "small", "green", "quiet", "heavy", "bright", "strange", "wooden"];
const TRANS: &[&str] = &[
    "sees", "likes", "follows", "carries", "finds", "paints", "watches", "builds", "opens", "remembers",
];
const INTRANS: &[&str] = &["sleeps", "waits", "laughs", "arrives", "shines", "wanders"];
const PREPS: &[&str] = &["near", "under", "behind", "with", "beside"];
const ADVS: &[&str] = &["quickly", "often", "slowly", "today", "again"];

fn zipf<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    let total: f64 = (1..=words.len()).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for (r, w) in words.iter().enumerate() {
        u -= 1.0 / (r + 1) as f64;
        if u <= 0.0 {
            return w;
        }
    }
    words[words.len() - 1]
}

struct Builder {
    words: Vec<String>,
    heads: Vec<Head>,
    rels: Vec<String>,
}

impl Builder {
    fn push(&mut self, w: &str, rel: &str) -> usize {
        self.words.push(w.to_string());
        self.heads.push(Head::Root);
        self.rels.push(rel.to_string());
        self.words.len() - 1
    }

    fn attach(&mut self, child: usize, parent: usize) {
        self.heads[child] = Head::Parent(parent);
    }

    /// Noun phrase; returns the index of its head noun.
    fn np(&mut self, rng: &mut ChaCha8Rng, rel: &str, depth: usize) -> usize {
        let det = rng.random_bool(0.8).then(|| self.push(zipf(rng, DETS), "det"));
        let adj = rng.random_bool(0.3).then(|| self.push(zipf(rng, ADJS), "amod"));
        let noun = self.push(zipf(rng, NOUNS), rel);
        det.into_iter().chain(adj).for_each(|c| self.attach(c, noun));
        if depth < 1 && rng.random_bool(0.25) {
            let p = self.push(zipf(rng, PREPS), "case");
            let pn = self.np(rng, "nmod", depth + 1);
            self.attach(p, pn);
            self.attach(pn, noun);
        }
        noun
    }
}

/// One sentence: subject, verb (root), optional object and adverb, final period.
pub fn generate_sentence(rng: &mut ChaCha8Rng) -> Sentence {
    let mut b = Builder {
        words: Vec::new(),
        heads: Vec::new(),
        rels: Vec::new(),
    };
    let subj = b.np(rng, "nsubj", 0);
    let transitive = rng.random_bool(0.65);
    let verb = b.push(zipf(rng, if transitive { TRANS } else { INTRANS }), "root");
    b.attach(subj, verb);
    if transitive {
        let obj = b.np(rng, "obj", 0);
        b.attach(obj, verb);
    }
    if rng.random_bool(0.3) {
        let adv = b.push(zipf(rng, ADVS), "advmod");
        b.attach(adv, verb);
    }
    let punct = b.push(".", "punct");
    b.attach(punct, verb);
    Sentence {
        words: b.words,
        heads: b.heads,
        relations: b.rels,
        doc: 0,
    }
}

/// Every word the grammar can emit, sorted.
pub fn grammar_vocabulary() -> Vec<&'static str> {
    let mut v: Vec<&str> = [DETS, NOUNS, ADJS, TRANS, INTRANS, PREPS, ADVS]
        .concat()
        .into_iter()
        .chain(["."])
        .collect();
    v.sort_unstable();
    v
}

/// Settings for [`generate_synthetic_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub n_docs: usize,
    pub sentences_per_doc: (usize, usize),
    /// Repeated-word segments inserted per document.
    pub segments_per_doc: (usize, usize),
    /// Period range of a segment, in words.
    pub period: (usize, usize),
    /// Copies of the block within a segment.
    pub copies: (usize, usize),
    /// Segment blocks draw from this many pseudo-words (`x0`, `x1`, ...) instead of
    /// the grammar vocabulary when nonzero.
    #[serde(default)]
    pub segment_vocab: usize,
    pub n_eval_sentences: usize,
    pub n_items: usize,
    pub sentences_per_item: usize,
    pub rt_noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            n_docs: 400,
            sentences_per_doc: (6, 14),
            segments_per_doc: (1, 2),
            period: (8, 40),
            copies: (2, 4),
            segment_vocab: 0,
            n_eval_sentences: 200,
            n_items: 60,
            sentences_per_item: 3,
            rt_noise_sd: 20.0,
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    /// Shrinks the document and item counts by `scale` (at least one of each).
    pub fn scaled(&self, scale: f64) -> Self {
        let s = |n: usize| ((n as f64 * scale).round() as usize).max(1);
        Self {
            n_docs: s(self.n_docs),
            n_eval_sentences: s(self.n_eval_sentences),
            n_items: s(self.n_items).max(4),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (usize, usize)| a <= b;
        if self.n_docs == 0
            || !ordered(self.sentences_per_doc)
            || !ordered(self.segments_per_doc)
            || !ordered(self.period)
            || !ordered(self.copies)
            || self.period.0 < 2
            || self.copies.0 < 2
            || self.sentences_per_item == 0
            || !(self.rt_noise_sd >= 0.0 && self.rt_noise_sd.is_finite())
        {
            return Err(Error::Data(format!("invalid synthetic corpus config {self:?}")));
        }
        Ok(())
    }
}

/// Generated training text, parses, held-out parses, reading times and frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    /// One document per line.
    pub text: String,
    /// Parses of `text`; repeated segments appear as unannotated sentences.
    pub parses: DepAnnotatedText,
    pub eval: DepAnnotatedText,
    pub reading: ReadingTable,
    pub freq: FrequencyTable,
}

/// Reading times are `200 + 12·len + 25·s + 10·s_prev − 4·log_freq + noise`, where `s`
/// is a word's surprisal under an add-0.1 bigram model of the training text.
pub fn generate_synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = grammar_vocabulary();
    let mut parses = DepAnnotatedText::default();
    let mut lines = Vec::with_capacity(cfg.n_docs);
    for doc in 0..cfg.n_docs {
        let n_sent = rng.random_range(cfg.sentences_per_doc.0..=cfg.sentences_per_doc.1);
        let n_seg = rng.random_range(cfg.segments_per_doc.0..=cfg.segments_per_doc.1);
        let mut units: Vec<Sentence> = (0..n_sent).map(|_| generate_sentence(&mut rng)).collect();
        for _ in 0..n_seg {
            let period = rng.random_range(cfg.period.0..=cfg.period.1);
            let copies = rng.random_range(cfg.copies.0..=cfg.copies.1);
            let block: Vec<String> = (0..period)
                .map(|_| match cfg.segment_vocab {
                    0 => vocab.choose(&mut rng).unwrap().to_string(),
                    n => format!("x{}", rng.random_range(0..n)),
                })
                .collect();
            let words: Vec<String> = (0..period * copies).map(|i| block[i % period].clone()).collect();
            let n = words.len();
            let at = rng.random_range(0..=units.len());
            units.insert(
                at,
                Sentence {
                    words,
                    heads: vec![Head::Missing; n],
                    relations: vec!["_".into(); n],
                    doc,
                },
            );
        }
        let mut line = Vec::new();
        for mut s in units {
            s.doc = doc;
            line.extend(s.words.iter().cloned());
            parses.sentences.push(s);
        }
        lines.push(line.join(" "));
    }

    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut bigram: HashMap<(&str, &str), u64> = HashMap::new();
    let mut context: HashMap<&str, u64> = HashMap::new();
    for line in &lines {
        let mut prev = "<s>";
        for w in line.split_whitespace() {
            *counts.entry(w.to_string()).or_default() += 1;
            *bigram.entry((prev, w)).or_default() += 1;
            *context.entry(prev).or_default() += 1;
            prev = w;
        }
    }
    let v = vocab.len() as f64;
    let surprisal = |prev: &str, w: &str| {
        let num = *bigram.get(&(prev, w)).unwrap_or(&0) as f64 + 0.1;
        let den = *context.get(prev).unwrap_or(&0) as f64 + 0.1 * v;
        -(num / den).ln()
    };
    let freq = FrequencyTable::from_counts(counts);

    let eval = DepAnnotatedText {
        sentences: (0..cfg.n_eval_sentences)
            .map(|i| Sentence {
                doc: i,
                ..generate_sentence(&mut rng)
            })
            .collect(),
    };

    let noise = Normal::new(0.0, cfg.rt_noise_sd.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Data(e.to_string()))?;
    let mut rows = Vec::new();
    for item in 0..cfg.n_items {
        let words: Vec<String> = (0..cfg.sentences_per_item)
            .flat_map(|_| generate_sentence(&mut rng).words)
            .collect();
        let mut prev_s = 0.0;
        for (i, w) in words.iter().enumerate() {
            let prev = if i == 0 { "<s>" } else { words[i - 1].as_str() };
            let s = surprisal(prev, w);
            let len = w.chars().count() as f64;
            let eps = if cfg.rt_noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let rt = 200.0 + 12.0 * len + 25.0 * s + 10.0 * prev_s - 4.0 * freq.log_freq(w) + eps;
            rows.push(ReadingRow {
                item_id: format!("item{item:03}"),
                word_index: i,
                word: w.clone(),
                measure_ms: rt.max(50.0),
            });
            prev_s = s;
        }
    }
    Ok(SyntheticCorpus {
        text: lines.join("\n") + "\n",
        parses,
        eval,
        reading: ReadingTable::new(rows)?,
        freq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::conllu::parse_conllu;

    #[test]
    fn sentences_are_trees_rooted_at_the_verb() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = generate_sentence(&mut rng);
            assert!(s.is_parsed());
            let roots = s.heads.iter().filter(|h| **h == Head::Root).count();
            assert_eq!(roots, 1);
            let text = DepAnnotatedText { sentences: vec![s.clone()] }.to_conllu();
            assert_eq!(parse_conllu(&text, "t").unwrap().sentences[0].words, s.words);
        }
    }

    #[test]
    fn bundle_is_consistent_and_deterministic() {
        let cfg = SyntheticCorpusConfig {
            n_docs: 5,
            n_items: 4,
            n_eval_sentences: 3,
            ..Default::default()
        };
        let a = generate_synthetic_corpus(&cfg).unwrap();
        let b = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let docs = a.parses.documents();
        let lines: Vec<&str> = a.text.lines().collect();
        assert_eq!(docs.len(), lines.len());
        for ((words, _), line) in docs.iter().zip(lines) {
            assert_eq!(words.join(" "), line);
        }
        assert!(a.parses.sentences.iter().any(|s| !s.is_parsed()));
        assert!(a.reading.rows.iter().all(|r| r.measure_ms > 0.0));
    }
}
