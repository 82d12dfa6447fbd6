use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{check_partition, Sentence};
use crate::error::{Error, Result};
use crate::model::{AttentionMatrix, AttentionTrace};

/// Token-to-word conversion: sum over destination tokens, mean over source tokens.
pub fn word_level_attention(a: &AttentionMatrix, spans: &[Range<usize>]) -> Result<AttentionMatrix> {
    check_partition(spans, a.size()).map_err(|e| Error::Metric(format!("word spans vs attention: {e}")))?;
    let n = spans.len();
    let mut data = vec![0.0; n * n];
    for (wi, si) in spans.iter().enumerate() {
        let inv = 1.0 / si.len() as f64;
        for p in si.clone() {
            let row = a.row(p);
            for (wj, sj) in spans.iter().enumerate() {
                let mass: f64 = row[sj.clone()].iter().sum();
                data[wi * n + wj] += mass * inv;
            }
        }
    }
    AttentionMatrix::new(n, data)
}

pub fn word_level_trace(trace: &AttentionTrace, spans: &[Range<usize>]) -> Result<AttentionTrace> {
    let layers = trace
        .layers()
        .iter()
        .map(|heads| heads.iter().map(|a| word_level_attention(a, spans)).collect())
        .collect::<Result<_>>()?;
    Ok(AttentionTrace::new(layers))
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Summation range of the prefix-matching score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PsBounds {
    /// Queries `|x|+2 ..= 2|x|` (1-based), so a perfect copier scores exactly 1.
    #[default]
    Normalized,
    /// Queries `|x|+1 ..= 2|x|` with the same `1/(|x|-1)` factor.
    Literal,
}

/// Per-head prefix-matching score `[layer][head]` on a sequence that repeats with
/// `period`: mean attention from each second-copy query to the token that followed
/// its earlier occurrence.
pub fn prefix_matching_score(
    trace: &AttentionTrace,
    tokens: &[u32],
    period: usize,
    bounds: PsBounds,
) -> Result<Vec<Vec<f64>>> {
    if period < 2 || tokens.len() < 2 * period {
        return Err(Error::Metric(format!(
            "need period >= 2 and two full copies, got period {period} over {} tokens",
            tokens.len()
        )));
    }
    if let Some(i) = (period..tokens.len()).find(|&i| tokens[i] != tokens[i - period]) {
        return Err(Error::Metric(format!("sequence is not periodic with period {period} at position {i}")));
    }
    if trace.n_layer() > 0 && trace.seq_len() != tokens.len() {
        return Err(Error::Metric("trace length differs from the token sequence".into()));
    }
    // 0-based queries; the target of query q is q - (period - 1)
    let first = match bounds {
        PsBounds::Normalized => period + 1,
        PsBounds::Literal => period,
    };
    let norm = 1.0 / (period - 1) as f64;
    Ok(trace
        .layers()
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|a| (first..2 * period).map(|q| a.get(q, q + 1 - period)).sum::<f64>() * norm)
                .collect()
        })
        .collect())
}

/// Fraction of words whose argmax attention edge is a dependency pair, per head.
#[derive(Clone, Debug, PartialEq)]
pub struct SasScores {
    /// `[layer][head]`
    pub scores: Vec<Vec<f64>>,
    pub words: usize,
    /// Sentences without a complete parse.
    pub skipped: usize,
}

/// `items` pairs a word-level trace with its sentence.
pub fn head_sas_score(items: &[(AttentionTrace, &Sentence)]) -> Result<SasScores> {
    let mut hits: Vec<Vec<usize>> = Vec::new();
    let mut words = 0;
    let mut skipped = 0;
    for (trace, sent) in items {
        if !sent.is_parsed() {
            skipped += 1;
            continue;
        }
        if trace.n_layer() > 0 && trace.seq_len() != sent.words.len() {
            return Err(Error::Metric("word-level trace does not match sentence length".into()));
        }
        if hits.is_empty() {
            hits = vec![vec![0; trace.n_head()]; trace.n_layer()];
        }
        words += sent.words.len();
        for (l, heads) in trace.layers().iter().enumerate() {
            for (h, a) in heads.iter().enumerate() {
                hits[l][h] += (0..a.size())
                    .filter(|&i| argmax(a.row(i).iter().copied()).is_some_and(|j| sent.is_edge(i, j)))
                    .count();
            }
        }
    }
    let scores = hits
        .iter()
        .map(|hs| hs.iter().map(|&c| if words == 0 { 0.0 } else { c as f64 / words as f64 }).collect())
        .collect();
    Ok(SasScores {
        scores,
        words,
        skipped,
    })
}

/// Parent guessed for word `i`: the `j != i` with the largest single-direction edge
/// weight (`a[i][j]` when `j < i`, else `a[j][i]`). `scaled` multiplies each weight by
/// the size of its query's causal window, removing the uniform-attention baseline.
pub fn probe_parent(a: &AttentionMatrix, i: usize, scaled: bool) -> Option<usize> {
    let n = a.size();
    let weight = |j: usize| {
        let (q, k) = if j < i { (i, j) } else { (j, i) };
        let w = a.get(q, k);
        if scaled {
            w * (q + 1) as f64
        } else {
            w
        }
    };
    let cands: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    argmax(cands.iter().map(|&j| weight(j))).map(|k| cands[k])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestHead {
    pub layer: usize,
    pub head: usize,
    pub recall: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UasResult {
    pub uas: f64,
    pub best_heads: BTreeMap<String, BestHead>,
}

/// Best head per relation by recall (ties to the lowest layer, then head), then the
/// relation-size weighted mean of those recalls.
pub fn uas(items: &[(AttentionTrace, &Sentence)], scaled: bool) -> Result<UasResult> {
    // relation -> [layer][head] correct count, and relation size
    let mut correct: BTreeMap<String, Vec<Vec<usize>>> = BTreeMap::new();
    let mut sizes: BTreeMap<String, usize> = BTreeMap::new();
    let mut nl = 0;
    for (trace, sent) in items {
        if trace.n_layer() > 0 && trace.seq_len() != sent.words.len() {
            return Err(Error::Metric("word-level trace does not match sentence length".into()));
        }
        nl = trace.n_layer();
        let nh = trace.n_head();
        for arc in sent.arcs() {
            *sizes.entry(arc.relation.clone()).or_default() += 1;
            let grid = correct
                .entry(arc.relation.clone())
                .or_insert_with(|| vec![vec![0; nh]; nl]);
            for (l, heads) in trace.layers().iter().enumerate() {
                for (h, a) in heads.iter().enumerate() {
                    if probe_parent(a, arc.child, scaled) == Some(arc.parent) {
                        grid[l][h] += 1;
                    }
                }
            }
        }
    }
    let total: usize = sizes.values().sum();
    if total == 0 {
        return Err(Error::Metric("no dependency arcs to score".into()));
    }
    if nl == 0 {
        return Err(Error::Metric("model has no attention heads".into()));
    }
    let mut best_heads = BTreeMap::new();
    let mut acc = 0.0;
    for (rel, grid) in &correct {
        let count = sizes[rel];
        let mut best = BestHead {
            layer: 0,
            head: 0,
            recall: -1.0,
            count,
        };
        for (l, heads) in grid.iter().enumerate() {
            for (h, &c) in heads.iter().enumerate() {
                let r = c as f64 / count as f64;
                if r > best.recall {
                    best = BestHead {
                        layer: l,
                        head: h,
                        recall: r,
                        count,
                    };
                }
            }
        }
        acc += best.recall * count as f64;
        best_heads.insert(rel.clone(), best);
    }
    Ok(UasResult {
        uas: acc / total as f64,
        best_heads,
    })
}
