use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ablate::corpus_delta_ll;
use super::inputs::{load_corpus, load_reading, LoadedReading};
use super::metrics::metrics_csv_path;
use super::plan::{ExperimentPlan, RunSpec};
use super::train::{completed_ledger, run_dir};
use super::{pool, skippable, write_json, PPP_DIR};
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::metrics::{detect_breakthrough, read_metric_csv, series_from_rows, BREAKTHROUGH_THRESHOLD};
use crate::model::load_checkpoint;
use crate::stats::{
    bonferroni, fisher_z_weighted_mean, permutation_test, pre_post_transition_correlation, PrePost,
};
use crate::tensor::{Precision, Scalar};
use crate::training::RegularizerSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PppRow {
    pub run_id: String,
    pub corpus: String,
    pub step: usize,
    pub tokens_seen: u64,
    pub val_loss: f64,
    pub delta_ll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TippingPoint {
    pub index: usize,
    pub step: usize,
    pub tokens_seen: u64,
    pub delta_ll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPpp {
    pub run_id: String,
    pub seed: u64,
    pub corpus: String,
    pub checkpoints: usize,
    pub tipping_point: TippingPoint,
    /// Index of the breakthrough checkpoint of the plan's breakthrough metric.
    pub breakthrough: Option<usize>,
    pub pre_post: PrePost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub corpus: String,
    pub regularized: String,
    pub baseline: String,
    /// Mean per-word ΔLL difference (regularized − baseline) at the final checkpoints.
    pub mean_difference: f64,
    pub p: f64,
    pub p_bonferroni: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledCorrelation {
    pub pre: Option<f64>,
    pub post: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PppSummary {
    pub breakthrough_metric: String,
    pub runs: Vec<RunPpp>,
    /// Fisher-z pooled pre/post correlations per corpus, weighted by checkpoint count.
    pub pooled: BTreeMap<String, PooledCorrelation>,
    pub permutation_tests: Vec<PermutationResult>,
    /// "run/corpus" to the reason it was left out.
    pub skipped: BTreeMap<String, String>,
}

pub fn ppp_csv_path(out: &Path, run_id: &str) -> PathBuf {
    out.join(PPP_DIR).join(format!("{run_id}.csv"))
}

/// Index of the largest value, earliest on ties.
pub fn tipping_index(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// ΔLL of every checkpoint on every reading corpus; needs `metrics` for the
/// breakthrough split.
pub fn cmd_ppp(plan: &ExperimentPlan, out: &Path, jobs: usize) -> Result<PppSummary> {
    plan.validate()?;
    if plan.ppp_corpora.is_empty() {
        return Err(Error::Plan("no reading-time corpora in the plan".into()));
    }
    let corpus = load_corpus(&plan.corpus)?;
    let tok = corpus
        .tokenizer
        .as_ref()
        .ok_or_else(|| Error::Plan("PPP needs a tokenizer for the reading corpora".into()))?;
    let readings: Vec<LoadedReading> = plan.ppp_corpora.iter().map(load_reading).collect::<Result<_>>()?;
    std::fs::create_dir_all(out.join(PPP_DIR))?;
    let pool = pool(jobs)?;
    let mut summary = PppSummary {
        breakthrough_metric: plan.breakthrough_metric.name().into(),
        runs: Vec::new(),
        pooled: BTreeMap::new(),
        permutation_tests: Vec::new(),
        skipped: BTreeMap::new(),
    };
    // final-checkpoint per-word ΔLL, keyed by (run, corpus)
    let mut finals: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let runs = plan.runs();
    for run in &runs {
        let ledger = match completed_ledger(out, run) {
            Ok(l) => l,
            Err(why) => {
                summary.skipped.insert(run.run_id.clone(), why);
                continue;
            }
        };
        let metrics_path = metrics_csv_path(out, &run.run_id);
        if !metrics_path.exists() {
            return Err(Error::Plan(format!("no metrics for {}; run the metrics command first", run.run_id)));
        }
        let metric_rows = read_metric_csv(std::fs::File::open(&metrics_path)?)?;
        let series = series_from_rows(&metric_rows, &run.run_id, plan.breakthrough_metric.name())?;
        let breakthrough = if series.points.is_empty() {
            None
        } else {
            detect_breakthrough(&series, BREAKTHROUGH_THRESHOLD)?
        };
        let dir = run_dir(out, &run.run_id);
        let mut rows = Vec::new();
        for reading in &readings {
            let name = &reading.spec.name;
            let per_ck = pool.install(|| {
                ledger
                    .checkpoints
                    .par_iter()
                    .map(|ck| match plan.train.precision {
                        Precision::F32 => checkpoint_dll::<f32>(&dir.join(&ck.dir), tok, reading),
                        Precision::F64 => checkpoint_dll::<f64>(&dir.join(&ck.dir), tok, reading),
                    })
                    .collect::<Result<Vec<_>>>()
            });
            let per_ck = match per_ck {
                Ok(v) => v,
                Err(e) if skippable(&e) => {
                    summary.skipped.insert(format!("{}/{name}", run.run_id), e.to_string());
                    continue;
                }
                Err(e) => return Err(e),
            };
            let values: Vec<f64> = per_ck.iter().map(|d| d.0).collect();
            for (ck, &v) in ledger.checkpoints.iter().zip(&values) {
                rows.push(PppRow {
                    run_id: run.run_id.clone(),
                    corpus: name.clone(),
                    step: ck.step,
                    tokens_seen: ck.tokens_seen,
                    val_loss: ck.val_loss,
                    delta_ll: v,
                });
            }
            let ti = tipping_index(&values).expect("non-empty");
            let loss: Vec<(u64, f64)> = ledger.checkpoints.iter().map(|c| (c.tokens_seen, c.val_loss)).collect();
            let dll: Vec<(u64, f64)> = ledger.checkpoints.iter().map(|c| c.tokens_seen).zip(values.iter().copied()).collect();
            let split = breakthrough.and_then(|i| loss.iter().position(|l| l.0 == series.points[i].0));
            summary.runs.push(RunPpp {
                run_id: run.run_id.clone(),
                seed: run.seed,
                corpus: name.clone(),
                checkpoints: values.len(),
                tipping_point: TippingPoint {
                    index: ti,
                    step: ledger.checkpoints[ti].step,
                    tokens_seen: ledger.checkpoints[ti].tokens_seen,
                    delta_ll: values[ti],
                },
                breakthrough: split,
                pre_post: pre_post_transition_correlation(&loss, &dll, split)?,
            });
            finals.insert((run.run_id.clone(), name.clone()), per_ck.last().unwrap().1.clone());
        }
        let mut w = csv::Writer::from_path(ppp_csv_path(out, &run.run_id))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }

    for reading in &readings {
        let name = &reading.spec.name;
        let of = |pick: fn(&PrePost) -> Option<crate::stats::Correlation>| {
            let (rs, ws): (Vec<f64>, Vec<f64>) = summary
                .runs
                .iter()
                .filter(|r| &r.corpus == name)
                .filter_map(|r| pick(&r.pre_post))
                .filter(|c| c.r.abs() < 1.0)
                .map(|c| (c.r, c.n as f64))
                .unzip();
            if rs.is_empty() {
                None
            } else {
                fisher_z_weighted_mean(&rs, &ws).ok()
            }
        };
        let pooled = PooledCorrelation {
            pre: of(|p| p.pre),
            post: of(|p| p.post),
        };
        summary.pooled.insert(name.clone(), pooled);
    }

    let mut tests = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        if run.regularizer == RegularizerSpec::None {
            continue;
        }
        let Some(base) = baseline_of(&runs, run) else { continue };
        for reading in &readings {
            let name = &reading.spec.name;
            let (Some(a), Some(b)) = (
                finals.get(&(run.run_id.clone(), name.clone())),
                finals.get(&(base.run_id.clone(), name.clone())),
            ) else {
                continue;
            };
            let p = permutation_test(a, b, plan.permutations, run.seed ^ ((i as u64) << 32), plan.permutation_alternative)?;
            let mean_difference = a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>() / a.len() as f64;
            tests.push(PermutationResult {
                corpus: name.clone(),
                regularized: run.run_id.clone(),
                baseline: base.run_id.clone(),
                mean_difference,
                p,
                p_bonferroni: p,
            });
        }
    }
    let m = tests.len();
    for t in &mut tests {
        t.p_bonferroni = bonferroni(t.p, m);
    }
    summary.permutation_tests = tests;
    write_json(&out.join(PPP_DIR).join("summary.json"), &summary)?;
    Ok(summary)
}

/// The unregularized run with the same model and seed.
fn baseline_of<'a>(runs: &'a [RunSpec], run: &RunSpec) -> Option<&'a RunSpec> {
    runs.iter()
        .find(|r| r.regularizer == RegularizerSpec::None && r.model == run.model && r.seed == run.seed)
}

fn checkpoint_dll<T: Scalar>(dir: &Path, tok: &Tokenizer, reading: &LoadedReading) -> Result<(f64, Vec<f64>)> {
    let (model, _) = load_checkpoint::<T>(dir)?;
    let d = corpus_delta_ll(&model, tok, reading, None)?;
    Ok((d.delta_ll, d.per_word))
}
