use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Head field of one word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Root,
    /// 0-based index of the parent word in the same sentence.
    Parent(usize),
    /// `_` in the HEAD column.
    Missing,
}

/// A child→parent dependency arc (0-based word indices).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DepArc {
    pub child: usize,
    pub parent: usize,
    pub relation: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub words: Vec<String>,
    pub heads: Vec<Head>,
    pub relations: Vec<String>,
    /// Index of the `# newdoc` group this sentence belongs to.
    pub doc: usize,
}

impl Sentence {
    /// A sentence is parsed when every word carries a head.
    pub fn is_parsed(&self) -> bool {
        !self.words.is_empty() && self.heads.iter().all(|h| *h != Head::Missing)
    }

    pub fn parent(&self, child: usize) -> Option<usize> {
        match self.heads.get(child) {
            Some(Head::Parent(p)) => Some(*p),
            _ => None,
        }
    }

    /// All child→parent arcs; roots and unannotated words contribute none.
    pub fn arcs(&self) -> Vec<DepArc> {
        (0..self.words.len())
            .filter_map(|c| {
                self.parent(c).map(|p| DepArc {
                    child: c,
                    parent: p,
                    relation: self.relations[c].clone(),
                })
            })
            .collect()
    }

    /// True when `(a, b)` is a child–parent pair in either direction.
    pub fn is_edge(&self, a: usize, b: usize) -> bool {
        self.parent(a) == Some(b) || self.parent(b) == Some(a)
    }

    fn check_tree(&self) -> std::result::Result<(), String> {
        let n = self.words.len();
        for (i, h) in self.heads.iter().enumerate() {
            if let Head::Parent(p) = *h {
                if p >= n {
                    return Err(format!("word {} has head {} beyond sentence length {n}", i + 1, p + 1));
                }
                if p == i {
                    return Err(format!("word {} is its own head", i + 1));
                }
            }
        }
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = self.parent(cur) {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(format!("cyclic heads through word {}", start + 1));
                }
            }
        }
        Ok(())
    }
}

/// Dependency-annotated sentences grouped into documents.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DepAnnotatedText {
    pub sentences: Vec<Sentence>,
}

impl DepAnnotatedText {
    pub fn n_docs(&self) -> usize {
        self.sentences.last().map_or(0, |s| s.doc + 1)
    }

    /// Arcs grouped by relation label: (sentence index, arc).
    pub fn relation_sets(&self) -> BTreeMap<String, Vec<(usize, DepArc)>> {
        let mut out: BTreeMap<String, Vec<(usize, DepArc)>> = BTreeMap::new();
        for (si, s) in self.sentences.iter().enumerate() {
            for arc in s.arcs() {
                out.entry(arc.relation.clone()).or_default().push((si, arc));
            }
        }
        out
    }

    pub fn relation_counts(&self) -> BTreeMap<String, usize> {
        self.relation_sets().into_iter().map(|(k, v)| (k, v.len())).collect()
    }

    /// Words of every document with each word's parent as a document-level index.
    pub fn documents(&self) -> Vec<(Vec<String>, Vec<Option<usize>>)> {
        let mut docs = vec![(Vec::new(), Vec::new()); self.n_docs()];
        for s in &self.sentences {
            let (words, parents): &mut (Vec<String>, Vec<Option<usize>>) = &mut docs[s.doc];
            let base = words.len();
            words.extend(s.words.iter().cloned());
            parents.extend((0..s.words.len()).map(|i| s.parent(i).map(|p| base + p)));
        }
        docs
    }

    pub fn to_conllu(&self) -> String {
        let mut out = String::new();
        let mut doc = usize::MAX;
        for s in &self.sentences {
            if s.doc != doc {
                out.push_str("# newdoc\n");
                doc = s.doc;
            }
            for (i, w) in s.words.iter().enumerate() {
                let head = match s.heads[i] {
                    Head::Root => "0".to_string(),
                    Head::Parent(p) => (p + 1).to_string(),
                    Head::Missing => "_".to_string(),
                };
                let _ = writeln!(out, "{}\t{w}\t_\t_\t_\t_\t{head}\t{}\t_\t_", i + 1, s.relations[i]);
            }
            out.push('\n');
        }
        out
    }
}

pub fn load_conllu(path: &Path) -> Result<DepAnnotatedText> {
    let text = std::fs::read_to_string(path)?;
    parse_conllu(&text, &path.display().to_string())
}

/// Parses CoNLL-U text. Multiword-token ranges and empty nodes are skipped; a `_`
/// head marks the word as unannotated.
pub fn parse_conllu(text: &str, source: &str) -> Result<DepAnnotatedText> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut out = DepAnnotatedText::default();
    let mut doc = 0usize;
    let mut doc_used = false;
    let mut cur = Sentence {
        words: Vec::new(),
        heads: Vec::new(),
        relations: Vec::new(),
        doc: 0,
    };
    let mut cur_start = 0;

    let finish = |cur: &mut Sentence, start: usize, out: &mut DepAnnotatedText| -> Result<()> {
        if cur.words.is_empty() {
            return Ok(());
        }
        cur.check_tree().map_err(|m| err(start, m))?;
        out.sentences.push(std::mem::replace(
            cur,
            Sentence {
                words: Vec::new(),
                heads: Vec::new(),
                relations: Vec::new(),
                doc: cur.doc,
            },
        ));
        Ok(())
    };

    for (ln, raw) in text.lines().enumerate() {
        let ln = ln + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            finish(&mut cur, cur_start, &mut out)?;
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if comment.trim_start().starts_with("newdoc") {
                if !cur.words.is_empty() {
                    return Err(err(ln, "newdoc inside a sentence".into()));
                }
                if doc_used {
                    doc += 1;
                    doc_used = false;
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 10 {
            return Err(err(ln, format!("expected 10 tab-separated fields, found {}", fields.len())));
        }
        let id = fields[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let id: usize = id
            .parse()
            .map_err(|_| err(ln, format!("bad word id {id:?}")))?;
        if cur.words.is_empty() {
            cur_start = ln;
            cur.doc = doc;
            doc_used = true;
        }
        if id != cur.words.len() + 1 {
            return Err(err(ln, format!("word id {id} out of sequence")));
        }
        let head = match fields[6] {
            "_" => Head::Missing,
            "0" => Head::Root,
            h => {
                let h: usize = h.parse().map_err(|_| err(ln, format!("bad head {h:?}")))?;
                h.checked_sub(1).map_or(Head::Root, Head::Parent)
            }
        };
        cur.words.push(fields[1].to_string());
        cur.heads.push(head);
        cur.relations.push(fields[7].to_string());
    }
    finish(&mut cur, cur_start, &mut out)?;
    Ok(out)
}
