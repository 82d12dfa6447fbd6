use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One word of a reading-time corpus, with a pre-aggregated measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadingRow {
    pub item_id: String,
    pub word_index: usize,
    pub word: String,
    pub measure_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReadingTable {
    pub rows: Vec<ReadingRow>,
}

impl ReadingTable {
    pub fn new(rows: Vec<ReadingRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert((r.item_id.as_str(), r.word_index)) {
                return Err(Error::Data(format!(
                    "duplicate row for item {} word {}",
                    r.item_id, r.word_index
                )));
            }
            if !(r.measure_ms > 0.0 && r.measure_ms.is_finite()) {
                return Err(Error::Data(format!(
                    "item {} word {}: measure must be positive, got {}",
                    r.item_id, r.word_index, r.measure_ms
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Reads a CSV with header `item_id,word_index,word,measure_ms`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let expected = ["item_id", "word_index", "word", "measure_ms"];
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header != expected {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("expected header {}, found {}", expected.join(","), header.join(",")),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize().enumerate() {
            let row: ReadingRow = rec.map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                msg: e.to_string(),
            })?;
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rows of each item ordered by word index, items in id order.
    pub fn items(&self) -> BTreeMap<&str, Vec<&ReadingRow>> {
        let mut out: BTreeMap<&str, Vec<&ReadingRow>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.item_id.as_str()).or_default().push(r);
        }
        out.values_mut().for_each(|v| v.sort_by_key(|r| r.word_index));
        out
    }
}

/// Unigram counts from a `word<TAB>count` file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrequencyTable {
    counts: HashMap<String, u64>,
}

impl FrequencyTable {
    pub fn from_counts(counts: HashMap<String, u64>) -> Self {
        Self { counts }
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut counts = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let (word, count) = line.split_once('\t').ok_or_else(|| bad("expected word<TAB>count"))?;
            let count: u64 = count.trim().parse().map_err(|_| bad("count is not a non-negative integer"))?;
            *counts.entry(word.to_string()).or_default() += count;
        }
        Ok(Self { counts })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Writes counts sorted by descending count, then word.
    pub fn to_tsv(&self) -> String {
        let mut v: Vec<_> = self.counts.iter().collect();
        v.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        v.into_iter().map(|(w, c)| format!("{w}\t{c}\n")).collect()
    }

    /// 0 for unseen words.
    pub fn count(&self, word: &str) -> u64 {
        self.counts.get(word).copied().unwrap_or(0)
    }

    pub fn log_freq(&self, word: &str) -> f64 {
        (self.count(word) as f64 + 1.0).ln()
    }
}

/// Spillover window of the regression design.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpilloverMode {
    /// Previous two words.
    #[default]
    EyeTracking,
    /// Previous four words.
    SelfPaced,
}

impl SpilloverMode {
    pub fn lags(self) -> usize {
        match self {
            SpilloverMode::EyeTracking => 2,
            SpilloverMode::SelfPaced => 4,
        }
    }
}

/// Predictors of one word; each vector holds the current word then its lags.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub item_id: String,
    pub word_index: usize,
    pub word: String,
    pub measure_ms: f64,
    pub surprisal: Vec<f64>,
    pub log_freq: Vec<f64>,
    pub length: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignedFeatures {
    pub rows: Vec<FeatureRow>,
    /// Rows dropped for missing predictors.
    pub dropped: usize,
}

/// Word surprisal as the sum of its tokens' surprisals. `token_surprisal[t]` belongs
/// to token `t`; NaN marks a token without one.
pub fn aggregate_word_surprisals(token_surprisal: &[f64], spans: &[Range<usize>]) -> Vec<f64> {
    spans.iter().map(|s| token_surprisal[s.clone()].iter().sum()).collect()
}

/// Builds the regression rows. `surprisals[item]` must hold one value per word of the
/// item in word-index order (NaN when unavailable).
pub fn align_word_features(
    table: &ReadingTable,
    surprisals: &BTreeMap<String, Vec<f64>>,
    freq: &FrequencyTable,
    mode: SpilloverMode,
) -> Result<AlignedFeatures> {
    let k = mode.lags();
    let mut out = AlignedFeatures::default();
    for (item, rows) in table.items() {
        let s = surprisals.get(item).ok_or_else(|| Error::Unalignable {
            item: item.to_string(),
            index: rows[0].word_index,
        })?;
        if s.len() != rows.len() {
            let index = rows.get(s.len()).map_or(rows.len(), |r| r.word_index);
            return Err(Error::Unalignable {
                item: item.to_string(),
                index,
            });
        }
        let lf: Vec<f64> = rows.iter().map(|r| freq.log_freq(&r.word)).collect();
        let len: Vec<f64> = rows.iter().map(|r| r.word.chars().count() as f64).collect();
        for (i, r) in rows.iter().enumerate() {
            if i < k {
                out.dropped += 1;
                continue;
            }
            let lag = |v: &[f64]| (0..=k).map(|d| v[i - d]).collect::<Vec<f64>>();
            let surprisal = lag(s);
            if surprisal.iter().any(|v| !v.is_finite()) {
                out.dropped += 1;
                continue;
            }
            out.rows.push(FeatureRow {
                item_id: item.to_string(),
                word_index: r.word_index,
                word: r.word.clone(),
                measure_ms: r.measure_ms,
                surprisal,
                log_freq: lag(&lf),
                length: lag(&len),
            });
        }
    }
    Ok(out)
}
