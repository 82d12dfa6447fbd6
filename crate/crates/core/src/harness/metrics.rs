use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::inputs::{load_corpus, LoadedCorpus};
use super::ledger::LedgerCheckpoint;
use super::plan::{ExperimentPlan, MetricKind, RunSpec};
use super::train::{completed_ledger, run_dir};
use super::{pool, write_json, METRICS_DIR};
use crate::error::Result;
use crate::metrics::{
    detect_breakthrough, head_sas_score, icl_score, model_prefix_matching, per_position_losses, ps_probes,
    sentence_traces, series_from_rows, uas, write_metric_csv, IclConfig, MetricRow, PsBounds,
    BREAKTHROUGH_THRESHOLD,
};
use crate::model::{load_checkpoint, Model};
use crate::tensor::{Precision, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakthrough {
    pub index: usize,
    pub tokens_seen: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub seed: u64,
    pub checkpoints: usize,
    /// Model-level metric name to its first exceedance of the threshold.
    pub breakthroughs: BTreeMap<String, Option<Breakthrough>>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub threshold: f64,
    pub runs: Vec<RunMetrics>,
    /// Runs without usable checkpoints.
    pub skipped: BTreeMap<String, String>,
}

pub fn metrics_csv_path(out: &Path, run_id: &str) -> PathBuf {
    out.join(METRICS_DIR).join(format!("{run_id}.csv"))
}

/// PS, SAS, UAS, ICL and validation loss at every checkpoint of every trained run,
/// written to `metrics/<run>.csv`, with breakthroughs in `metrics/summary.json`.
pub fn cmd_metrics(plan: &ExperimentPlan, out: &Path, jobs: usize) -> Result<MetricsSummary> {
    plan.validate()?;
    let corpus = load_corpus(&plan.corpus)?;
    std::fs::create_dir_all(out.join(METRICS_DIR))?;
    let mut summary = MetricsSummary {
        threshold: BREAKTHROUGH_THRESHOLD,
        runs: Vec::new(),
        skipped: BTreeMap::new(),
    };
    let pool = pool(jobs)?;
    for run in plan.runs() {
        let ledger = match completed_ledger(out, &run) {
            Ok(l) => l,
            Err(why) => {
                summary.skipped.insert(run.run_id.clone(), why);
                continue;
            }
        };
        let warnings = warnings_for(plan, &corpus, &run);
        let dir = run_dir(out, &run.run_id);
        let per_ck: Vec<Vec<MetricRow>> = pool.install(|| {
            ledger
                .checkpoints
                .par_iter()
                .map(|ck| match plan.train.precision {
                    Precision::F32 => checkpoint_rows::<f32>(plan, &corpus, &run, &dir, ck),
                    Precision::F64 => checkpoint_rows::<f64>(plan, &corpus, &run, &dir, ck),
                })
                .collect::<Result<_>>()
        })?;
        let rows: Vec<MetricRow> = per_ck.into_iter().flatten().collect();
        write_metric_csv(std::fs::File::create(metrics_csv_path(out, &run.run_id))?, &rows)?;
        let mut breakthroughs = BTreeMap::new();
        for kind in [MetricKind::Ps, MetricKind::Sas, MetricKind::Uas] {
            if !plan.metrics.contains(&kind) {
                continue;
            }
            let series = series_from_rows(&rows, &run.run_id, kind.name())?;
            if series.points.is_empty() {
                continue;
            }
            let b = detect_breakthrough(&series, BREAKTHROUGH_THRESHOLD)?.map(|index| Breakthrough {
                index,
                tokens_seen: series.points[index].0,
            });
            breakthroughs.insert(kind.name().to_string(), b);
        }
        summary.runs.push(RunMetrics {
            run_id: run.run_id.clone(),
            seed: run.seed,
            checkpoints: ledger.checkpoints.len(),
            breakthroughs,
            warnings,
        });
    }
    write_json(&out.join(METRICS_DIR).join("summary.json"), &summary)?;
    Ok(summary)
}

fn wants_parses(plan: &ExperimentPlan) -> bool {
    plan.metrics.contains(&MetricKind::Sas) || plan.metrics.contains(&MetricKind::Uas)
}

fn warnings_for(plan: &ExperimentPlan, corpus: &LoadedCorpus, run: &RunSpec) -> Vec<String> {
    let mut w = Vec::new();
    if run.model.n_layer == 0 {
        w.push("model has no attention layers; PS, SAS and UAS omitted".into());
    } else if wants_parses(plan) && corpus.eval_sentences.is_none() {
        w.push("no evaluation parses; SAS and UAS skipped".into());
    } else if wants_parses(plan) && corpus.tokenizer.is_none() {
        w.push("no tokenizer for parsed sentences; SAS and UAS skipped".into());
    }
    w
}

fn row(run: &RunSpec, tokens_seen: u64, metric: &str, lh: Option<(usize, usize)>, value: f64) -> MetricRow {
    MetricRow {
        model_id: run.run_id.clone(),
        tokens_seen,
        metric: metric.into(),
        layer: lh.map(|p| p.0),
        head: lh.map(|p| p.1),
        value,
    }
}

/// Per-head rows of `grid` plus a model-level row holding its maximum.
fn head_rows(run: &RunSpec, tokens_seen: u64, metric: &str, grid: &[Vec<f64>], out: &mut Vec<MetricRow>) {
    let max = grid.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.push(row(run, tokens_seen, metric, None, max));
    for (l, heads) in grid.iter().enumerate() {
        for (h, &v) in heads.iter().enumerate() {
            out.push(row(run, tokens_seen, metric, Some((l, h)), v));
        }
    }
}

pub(crate) fn probes_for(plan: &ExperimentPlan, corpus: &LoadedCorpus, context: usize) -> Vec<Vec<u32>> {
    ps_probes(plan.probes.n, plan.probes.len_for(context), corpus.word_ids.clone(), plan.probes.seed)
}

fn checkpoint_rows<T: Scalar>(
    plan: &ExperimentPlan,
    corpus: &LoadedCorpus,
    run: &RunSpec,
    dir: &Path,
    ck: &LedgerCheckpoint,
) -> Result<Vec<MetricRow>> {
    let (model, _) = load_checkpoint::<T>(&dir.join(&ck.dir))?;
    let t = ck.tokens_seen;
    let has_attention = model.config().n_layer > 0;
    let mut rows = Vec::new();
    for kind in [MetricKind::ValLoss, MetricKind::Ps, MetricKind::Sas, MetricKind::Uas, MetricKind::Icl] {
        if !plan.metrics.contains(&kind) {
            continue;
        }
        match kind {
            MetricKind::ValLoss => rows.push(row(run, t, "val_loss", None, ck.val_loss)),
            MetricKind::Ps if has_attention => {
                let probes = probes_for(plan, corpus, model.config().context_size);
                let grid = model_prefix_matching(&model, &probes, PsBounds::Normalized)?;
                head_rows(run, t, "ps", &grid, &mut rows);
            }
            MetricKind::Sas | MetricKind::Uas if has_attention => {
                let (Some(sents), Some(tok)) = (&corpus.eval_sentences, &corpus.tokenizer) else {
                    continue;
                };
                let traces = sentence_traces(&model, tok, sents)?;
                if kind == MetricKind::Sas {
                    let sas = head_sas_score(&traces)?;
                    if sas.words > 0 {
                        head_rows(run, t, "sas", &sas.scores, &mut rows);
                    }
                } else if let Ok(u) = uas(&traces, false) {
                    rows.push(row(run, t, "uas", None, u.uas));
                }
            }
            MetricKind::Icl => {
                if let Some(v) = icl(plan, corpus, &model)? {
                    rows.push(row(run, t, "icl", None, v));
                }
            }
            _ => {}
        }
    }
    Ok(rows)
}

fn icl<T: Scalar>(plan: &ExperimentPlan, corpus: &LoadedCorpus, model: &Model<T>) -> Result<Option<f64>> {
    let len = model.config().context_size - 1;
    let windows = corpus.validation.sequential_windows(len, plan.probes.icl_sequences)?;
    if windows.is_empty() {
        return Ok(None);
    }
    let seqs: Vec<Vec<u32>> = windows.into_iter().map(|w| w.tokens).collect();
    let losses = per_position_losses(model, &seqs)?;
    let cfg = IclConfig::for_length(len);
    if cfg.validate().is_err() {
        return Ok(None);
    }
    icl_score(&losses, &cfg).map(Some)
}
