//! Random instances and brute-force reference implementations shared by test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::ops::Range;

use phaselab::data::{Head, Sentence};
use phaselab::model::{AttentionMatrix, AttentionTrace};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_causal(rng: &mut ChaCha8Rng, n: usize) -> AttentionMatrix {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        // spiky rows make argmax ties unlikely but possible
        let raw: Vec<f64> = (0..=i).map(|_| rng.random::<f64>().powi(3)).collect();
        let total: f64 = raw.iter().sum();
        for (j, v) in raw.into_iter().enumerate() {
            data[i * n + j] = v / total;
        }
    }
    AttentionMatrix::new(n, data).unwrap()
}

pub fn random_trace(rng: &mut ChaCha8Rng, layers: usize, heads: usize, n: usize) -> AttentionTrace {
    AttentionTrace::new(
        (0..layers)
            .map(|_| (0..heads).map(|_| random_causal(rng, n)).collect())
            .collect(),
    )
}

pub fn random_spans(rng: &mut ChaCha8Rng, n_tokens: usize) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    while start < n_tokens {
        let len = rng.random_range(1..=3).min(n_tokens - start);
        spans.push(start..start + len);
        start += len;
    }
    spans
}

/// Random tree: every word but one picks an earlier or later word, avoiding cycles by
/// attaching to a random word of a random permutation prefix.
pub fn random_sentence(rng: &mut ChaCha8Rng, n: usize, relations: &[&str]) -> Sentence {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut heads = vec![Head::Root; n];
    for k in 1..n {
        heads[order[k]] = Head::Parent(order[rng.random_range(0..k)]);
    }
    Sentence {
        words: (0..n).map(|i| format!("w{i}")).collect(),
        heads,
        relations: (0..n).map(|_| relations[rng.random_range(0..relations.len())].to_string()).collect(),
        doc: 0,
    }
}

pub fn oracle_word_level(a: &AttentionMatrix, spans: &[Range<usize>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; spans.len()]; spans.len()];
    for i in 0..spans.len() {
        for j in 0..spans.len() {
            let mut total = 0.0;
            for p in spans[i].clone() {
                for q in spans[j].clone() {
                    total += a.get(p, q);
                }
            }
            out[i][j] = total / spans[i].len() as f64;
        }
    }
    out
}

/// 1-based transcription of the normalized score.
pub fn oracle_ps(a: &AttentionMatrix, x: usize) -> f64 {
    let mut s = 0.0;
    for i in (x + 2)..=(2 * x) {
        let target = i - (x - 1);
        s += a.get(i - 1, target - 1);
    }
    s / (x - 1) as f64
}

pub fn oracle_icl(losses: &[Vec<f64>], early: (usize, usize), late: (usize, usize)) -> f64 {
    let mut acc = 0.0;
    for seq in losses {
        let (mut e, mut ne, mut l, mut nl) = (0.0, 0.0, 0.0, 0.0);
        for (p, v) in seq.iter().enumerate() {
            if p >= early.0 && p <= early.1 {
                e += v;
                ne += 1.0;
            }
            if p >= late.0 && p <= late.1 {
                l += v;
                nl += 1.0;
            }
        }
        acc += e / ne - l / nl;
    }
    acc / losses.len() as f64
}

fn first_max(values: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..values.len() {
        if values[k] > values[best] {
            best = k;
        }
    }
    best
}

/// Hit count per head of argmax edges that are dependency pairs.
pub fn oracle_sas_hits(a: &AttentionMatrix, s: &Sentence) -> usize {
    let parent = |i: usize| match s.heads[i] {
        Head::Parent(p) => Some(p),
        _ => None,
    };
    (0..a.size())
        .filter(|&i| {
            let j = first_max(a.row(i));
            parent(i) == Some(j) || parent(j) == Some(i)
        })
        .count()
}

pub fn oracle_uas(items: &[(AttentionTrace, Sentence)]) -> (f64, BTreeMap<String, (usize, usize)>) {
    let (nl, nh) = (items[0].0.n_layer(), items[0].0.n_head());
    let mut rels: Vec<String> = items
        .iter()
        .flat_map(|(_, s)| s.relations.iter().zip(&s.heads).filter(|(_, h)| matches!(h, Head::Parent(_))).map(|(r, _)| r.clone()))
        .collect();
    rels.sort();
    rels.dedup();
    let mut weighted = 0.0;
    let mut total = 0usize;
    let mut best_heads = BTreeMap::new();
    for rel in &rels {
        let mut best = (-1.0, 0, 0);
        let mut size = 0;
        for l in 0..nl {
            for h in 0..nh {
                let (mut hit, mut n) = (0usize, 0usize);
                for (trace, s) in items {
                    let a = trace.head(l, h);
                    for c in 0..s.words.len() {
                        let Head::Parent(p) = s.heads[c] else { continue };
                        if &s.relations[c] != rel {
                            continue;
                        }
                        n += 1;
                        let mut guess = None;
                        let mut best_w = f64::NEG_INFINITY;
                        for j in 0..s.words.len() {
                            if j == c {
                                continue;
                            }
                            let w = if j < c { a.get(c, j) } else { a.get(j, c) };
                            if w > best_w {
                                best_w = w;
                                guess = Some(j);
                            }
                        }
                        if guess == Some(p) {
                            hit += 1;
                        }
                    }
                }
                size = n;
                let r = hit as f64 / n as f64;
                if r > best.0 {
                    best = (r, l, h);
                }
            }
        }
        weighted += best.0 * size as f64;
        total += size;
        best_heads.insert(rel.clone(), (best.1, best.2));
    }
    (weighted / total as f64, best_heads)
}
