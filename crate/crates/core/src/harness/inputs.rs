use std::ops::Range;
use std::path::Path;

use super::ledger::file_digest;
use super::plan::{CorpusPaths, PppCorpus};
use crate::data::{
    load_conllu, load_pretokenized, split_documents, DepAnnotatedText, FrequencyTable, ReadingTable, Sentence,
    TokenizedCorpus, Tokenizer, TrainingCorpus, VocabPolicy,
};
use crate::error::{Error, Result};

/// Everything the commands need from the plan's corpus section.
pub struct LoadedCorpus {
    pub tokenizer: Option<Tokenizer>,
    pub vocab_size: usize,
    pub train: TrainingCorpus,
    pub validation: TrainingCorpus,
    pub eval_sentences: Option<Vec<Sentence>>,
    /// Ids that may appear in synthetic repeated sequences and PS probes.
    pub word_ids: Range<u32>,
    /// Content digests of every input file, for the run config hash.
    pub digests: Vec<(String, String)>,
}

/// Documents `docs` of a parse set, renumbered from zero.
pub fn select_documents(text: &DepAnnotatedText, docs: Range<usize>) -> DepAnnotatedText {
    DepAnnotatedText {
        sentences: text
            .sentences
            .iter()
            .filter(|s| docs.contains(&s.doc))
            .map(|s| Sentence {
                doc: s.doc - docs.start,
                ..s.clone()
            })
            .collect(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

pub fn load_corpus(paths: &CorpusPaths) -> Result<LoadedCorpus> {
    let mut digests = vec![("train".to_string(), file_digest(&paths.train)?)];
    for (name, p) in [
        ("parses", &paths.parses),
        ("validation", &paths.validation),
        ("validation_parses", &paths.validation_parses),
        ("tokenizer", &paths.tokenizer),
    ] {
        if let Some(p) = p {
            digests.push((name.to_string(), file_digest(p)?));
        }
    }
    let eval_sentences = match &paths.eval_parses {
        Some(p) => Some(load_conllu(p)?.sentences),
        None => None,
    };

    if paths.pretokenized {
        let (corpus, manifest) = load_pretokenized(&paths.train)?;
        let tokenizer = match &paths.tokenizer {
            Some(p) => Some(serde_json::from_slice::<Tokenizer>(&std::fs::read(p)?)?),
            None => None,
        };
        let (train, val) = match &paths.validation {
            Some(v) => (corpus, load_pretokenized(v)?.0),
            None => split_documents(&corpus, paths.validation_fraction)?,
        };
        let sep = manifest.separator_id;
        let first = if sep == 0 { 1 } else { 0 };
        return Ok(LoadedCorpus {
            tokenizer,
            vocab_size: manifest.vocab_size,
            train: TrainingCorpus::new(&train, sep, None)?,
            validation: TrainingCorpus::new(&val, sep, None)?,
            eval_sentences,
            word_ids: first..manifest.vocab_size as u32,
            digests,
        });
    }

    let text = read_text(&paths.train)?;
    let tokenizer = match &paths.tokenizer {
        Some(p) => serde_json::from_slice::<Tokenizer>(&std::fs::read(p)?)?,
        None => Tokenizer::fit(text.lines(), &VocabPolicy::default())?,
    };
    let corpus = tokenizer.tokenize(&text)?;
    let parses = match &paths.parses {
        Some(p) => Some(load_conllu(p)?),
        None => None,
    };
    let build = |c: &TokenizedCorpus, p: Option<&DepAnnotatedText>| {
        TrainingCorpus::new(c, Tokenizer::SEP, p.map(|p| (p, &tokenizer)))
    };
    let (train, validation) = match &paths.validation {
        Some(v) => {
            let vc = tokenizer.tokenize(&read_text(v)?)?;
            let vp = match &paths.validation_parses {
                Some(p) => Some(load_conllu(p)?),
                None => None,
            };
            (build(&corpus, parses.as_ref())?, build(&vc, vp.as_ref())?)
        }
        None => {
            let (tr, va) = split_documents(&corpus, paths.validation_fraction)?;
            let cut = tr.documents.len();
            let n = corpus.documents.len();
            let tp = parses.as_ref().map(|p| select_documents(p, 0..cut));
            let vp = parses.as_ref().map(|p| select_documents(p, cut..n));
            (build(&tr, tp.as_ref())?, build(&va, vp.as_ref())?)
        }
    };
    Ok(LoadedCorpus {
        vocab_size: tokenizer.vocab_size(),
        word_ids: tokenizer.word_id_range(),
        tokenizer: Some(tokenizer),
        train,
        validation,
        eval_sentences,
        digests,
    })
}

pub struct LoadedReading {
    pub spec: PppCorpus,
    pub table: ReadingTable,
    pub freq: FrequencyTable,
}

pub fn load_reading(spec: &PppCorpus) -> Result<LoadedReading> {
    Ok(LoadedReading {
        spec: spec.clone(),
        table: ReadingTable::load(&spec.reading)?,
        freq: FrequencyTable::load(&spec.freq)?,
    })
}
