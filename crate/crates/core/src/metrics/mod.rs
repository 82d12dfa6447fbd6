//! Specialized-head and in-context-learning metrics, and breakthrough detection.

mod attention;

use std::io::{Read, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sentence, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{AttentionTrace, Model};
use crate::tensor::Scalar;

pub use attention::{
    head_sas_score, prefix_matching_score, probe_parent, uas, word_level_attention, word_level_trace, BestHead,
    PsBounds, SasScores, UasResult,
};

/// Loss windows of the ICL score, inclusive 0-based positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclConfig {
    pub early: (usize, usize),
    pub late: (usize, usize),
}

impl Default for IclConfig {
    fn default() -> Self {
        Self {
            early: (40, 60),
            late: (450, 550),
        }
    }
}

impl IclConfig {
    /// The default windows when they fit in `seq_len`, otherwise the same windows
    /// shrunk proportionally to a 1024-token reference context.
    pub fn for_length(seq_len: usize) -> Self {
        let d = Self::default();
        if seq_len > d.late.1 {
            return d;
        }
        let s = seq_len as f64 / 1024.0;
        let f = |v: usize| (v as f64 * s).round() as usize;
        Self {
            early: (f(d.early.0), f(d.early.1)),
            late: (f(d.late.0), f(d.late.1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.early.0 > self.early.1 || self.late.0 > self.late.1 || self.early.1 >= self.late.0 {
            return Err(Error::Metric(format!("ICL windows must be ordered and disjoint: {self:?}")));
        }
        Ok(())
    }
}

/// Mean over sequences of (mean early-window loss − mean late-window loss).
pub fn icl_score(losses: &[Vec<f64>], config: &IclConfig) -> Result<f64> {
    config.validate()?;
    if losses.is_empty() {
        return Err(Error::Metric("ICL score needs at least one sequence".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut total = 0.0;
    for seq in losses {
        if seq.len() <= config.late.1 {
            return Err(Error::Metric(format!(
                "sequence of {} losses is too short for window ending at {}",
                seq.len(),
                config.late.1
            )));
        }
        total += mean(&seq[config.early.0..=config.early.1]) - mean(&seq[config.late.0..=config.late.1]);
    }
    Ok(total / losses.len() as f64)
}

/// One metric over checkpoints of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub model_id: String,
    pub metric: String,
    pub points: Vec<(u64, f64)>,
}

impl MetricSeries {
    pub fn new(model_id: impl Into<String>, metric: impl Into<String>, points: Vec<(u64, f64)>) -> Result<Self> {
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Metric("tokens_seen must be strictly increasing".into()));
        }
        if points.iter().any(|p| !p.1.is_finite()) {
            return Err(Error::Metric("metric values must be finite".into()));
        }
        Ok(Self {
            model_id: model_id.into(),
            metric: metric.into(),
            points,
        })
    }
}

/// Default breakthrough threshold for PS and UAS.
pub const BREAKTHROUGH_THRESHOLD: f64 = 0.1;

/// Index of the first point strictly above `threshold`.
pub fn detect_breakthrough(series: &MetricSeries, threshold: f64) -> Result<Option<usize>> {
    if !(threshold > 0.0) {
        return Err(Error::Metric(format!("threshold must be positive, got {threshold}")));
    }
    if series.points.is_empty() {
        return Err(Error::Metric("empty metric series".into()));
    }
    Ok(series.points.iter().position(|&(_, v)| v > threshold))
}

/// One line of a metric CSV. Layer and head are blank for model-level metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model_id: String,
    pub tokens_seen: u64,
    pub metric: String,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub value: f64,
}

pub fn write_metric_csv(w: impl Write, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_csv(r: impl Read) -> Result<Vec<MetricRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Model-level series of `metric` for `model_id` from metric rows.
pub fn series_from_rows(rows: &[MetricRow], model_id: &str, metric: &str) -> Result<MetricSeries> {
    let mut points: Vec<(u64, f64)> = rows
        .iter()
        .filter(|r| r.model_id == model_id && r.metric == metric && r.layer.is_none())
        .map(|r| (r.tokens_seen, r.value))
        .collect();
    points.sort_by_key(|p| p.0);
    MetricSeries::new(model_id, metric, points)
}

/// `n` probes of `len` ids drawn uniformly from `vocab`, each repeated twice.
pub fn ps_probes(n: usize, len: usize, vocab: Range<u32>, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let block: Vec<u32> = (0..len).map(|_| rng.random_range(vocab.clone())).collect();
            block.iter().chain(&block).copied().collect()
        })
        .collect()
}

/// Per-head PS averaged over probes; empty for an attention-free model.
pub fn model_prefix_matching<T: Scalar>(
    model: &Model<T>,
    probes: &[Vec<u32>],
    bounds: PsBounds,
) -> Result<Vec<Vec<f64>>> {
    let cfg = model.config();
    let mut acc = vec![vec![0.0; cfg.n_head]; cfg.n_layer];
    for p in probes {
        let (_, trace) = model.forward_with_trace(p, None)?;
        let ps = prefix_matching_score(&trace, p, p.len() / 2, bounds)?;
        for (a, s) in acc.iter_mut().flatten().zip(ps.iter().flatten()) {
            *a += s / probes.len() as f64;
        }
    }
    Ok(acc)
}

/// Word-level traces of the parsed sentences that fit in the model's context.
pub fn sentence_traces<'a, T: Scalar>(
    model: &Model<T>,
    tokenizer: &Tokenizer,
    sentences: &'a [Sentence],
) -> Result<Vec<(AttentionTrace, &'a Sentence)>> {
    let mut out = Vec::new();
    for s in sentences {
        let (ids, spans) = tokenizer.encode_words(&s.words);
        if ids.len() > model.config().context_size || ids.len() < 2 {
            continue;
        }
        let (_, trace) = model.forward_with_trace(&ids, None)?;
        out.push((word_level_trace(&trace, &spans)?, s));
    }
    Ok(out)
}

/// Per-position next-token losses (`seq.len() - 1` values per sequence).
pub fn per_position_losses<T: Scalar>(model: &Model<T>, sequences: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    sequences.iter().map(|s| model.compute_surprisals(s)).collect()
}
