use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::inputs::{load_corpus, load_reading, LoadedCorpus, LoadedReading};
use super::metrics::probes_for;
use super::plan::{ExperimentPlan, RunSpec};
use super::surprisal::word_surprisals;
use super::train::{completed_ledger, run_dir};
use super::{pool, skippable, write_json, ABLATION_DIR};
use crate::data::{align_word_features, Tokenizer};
use crate::error::{Error, Result};
use crate::metrics::{head_sas_score, model_prefix_matching, sentence_traces, PsBounds};
use crate::model::{load_checkpoint, AblationMode, AblationSpec, Model};
use crate::stats::{delta_delta_ll, delta_ll, pearson_r, Correlation, DeltaLl};
use crate::tensor::{Precision, Scalar};

/// One line of the head grid CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadGridRow {
    pub layer: usize,
    pub head: usize,
    pub ps: f64,
    /// Blank without evaluation parses.
    pub sas_score: Option<f64>,
    pub ddll: f64,
    pub corpus: String,
}

pub fn write_head_grid(w: impl std::io::Write, rows: &[HeadGridRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_head_grid(r: impl std::io::Read) -> Result<Vec<HeadGridRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|x| x.map_err(Error::from))
        .collect()
}

/// A correlation, or why it could not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaybeCorrelation {
    Value(Correlation),
    Unavailable(String),
}

impl MaybeCorrelation {
    fn of(x: &[f64], y: &[f64]) -> Self {
        match pearson_r(x, y) {
            Ok(c) => Self::Value(c),
            Err(e) => Self::Unavailable(e.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusAblation {
    pub baseline_delta_ll: f64,
    pub ddll_vs_ps: MaybeCorrelation,
    pub ddll_vs_sas: Option<MaybeCorrelation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub run_id: String,
    pub seed: u64,
    pub step: usize,
    pub tokens_seen: u64,
    pub mode: AblationMode,
    pub corpora: BTreeMap<String, CorpusAblation>,
    pub skipped: BTreeMap<String, String>,
}

pub fn head_grid_path(out: &Path, run_id: &str) -> PathBuf {
    out.join(ABLATION_DIR).join(run_id).join("head_grid.csv")
}

/// Pattern-preserving ablation of every head at one checkpoint of each selected run,
/// paired with the head's PS and SAS score.
pub fn cmd_ablate(plan: &ExperimentPlan, out: &Path, jobs: usize) -> Result<Vec<AblationSummary>> {
    plan.validate()?;
    if plan.ppp_corpora.is_empty() {
        return Err(Error::Plan("ablation needs at least one reading-time corpus".into()));
    }
    let corpus = load_corpus(&plan.corpus)?;
    if corpus.tokenizer.is_none() {
        return Err(Error::Plan("ablation needs a tokenizer for the reading corpora".into()));
    }
    let readings: Vec<LoadedReading> = plan.ppp_corpora.iter().map(load_reading).collect::<Result<_>>()?;
    let selected: Vec<RunSpec> = plan
        .runs()
        .into_iter()
        .filter(|r| plan.ablation.runs.as_ref().is_none_or(|ids| ids.contains(&r.run_id)))
        .filter(|r| r.model.n_layer > 0)
        .collect();
    if let Some(ids) = &plan.ablation.runs {
        if let Some(missing) = ids.iter().find(|id| !selected.iter().any(|r| &r.run_id == *id)) {
            return Err(Error::Plan(format!("ablation run {missing} is not an attention run of the plan")));
        }
    }
    let pool = pool(jobs)?;
    let mut out_summaries = Vec::new();
    for run in selected {
        let ledger = match completed_ledger(out, &run) {
            Ok(l) => l,
            Err(why) => return Err(Error::Plan(format!("{}: {why}", run.run_id))),
        };
        let ck = match plan.ablation.step {
            Some(s) => ledger
                .checkpoints
                .iter()
                .find(|c| c.step == s)
                .ok_or_else(|| Error::Plan(format!("{} has no checkpoint at step {s}", run.run_id)))?,
            None => ledger.checkpoints.last().expect("completed runs have checkpoints"),
        };
        let ck_dir = run_dir(out, &run.run_id).join(&ck.dir);
        let (rows, summary) = pool.install(|| match plan.train.precision {
            Precision::F32 => ablate_run::<f32>(plan, &corpus, &readings, &run, &ck_dir),
            Precision::F64 => ablate_run::<f64>(plan, &corpus, &readings, &run, &ck_dir),
        })?;
        let path = head_grid_path(out, &run.run_id);
        std::fs::create_dir_all(path.parent().unwrap())?;
        write_head_grid(std::fs::File::create(&path)?, &rows)?;
        let summary = AblationSummary {
            run_id: run.run_id.clone(),
            seed: run.seed,
            step: ck.step,
            tokens_seen: ck.tokens_seen,
            mode: AblationMode::PatternPreserving,
            ..summary
        };
        write_json(&path.with_file_name("summary.json"), &summary)?;
        out_summaries.push(summary);
    }
    Ok(out_summaries)
}

/// ΔLL of one reading corpus under an optional ablation.
pub fn corpus_delta_ll<T: Scalar>(
    model: &Model<T>,
    tokenizer: &Tokenizer,
    reading: &LoadedReading,
    ablation: Option<&AblationSpec>,
) -> Result<DeltaLl> {
    let surprisals = word_surprisals(model, tokenizer, &reading.table, ablation)?;
    let features = align_word_features(&reading.table, &surprisals, &reading.freq, reading.spec.spillover)?;
    delta_ll(&features, reading.spec.spillover)
}

fn ablate_run<T: Scalar>(
    plan: &ExperimentPlan,
    corpus: &LoadedCorpus,
    readings: &[LoadedReading],
    run: &RunSpec,
    ck_dir: &Path,
) -> Result<(Vec<HeadGridRow>, AblationSummary)> {
    let (model, _) = load_checkpoint::<T>(ck_dir)?;
    let tok = corpus.tokenizer.as_ref().expect("checked by caller");
    let cfg = model.config().clone();
    let heads: Vec<(usize, usize)> = (0..cfg.n_layer).flat_map(|l| (0..cfg.n_head).map(move |h| (l, h))).collect();
    let ps = model_prefix_matching(&model, &probes_for(plan, corpus, cfg.context_size), PsBounds::Normalized)?;
    let sas = match &corpus.eval_sentences {
        Some(s) => {
            let scores = head_sas_score(&sentence_traces(&model, tok, s)?)?;
            (scores.words > 0).then_some(scores.scores)
        }
        None => None,
    };
    let mut rows = Vec::new();
    let mut corpora = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    for reading in readings {
        let name = reading.spec.name.clone();
        let base = match corpus_delta_ll(&model, tok, reading, None) {
            Ok(b) => b,
            Err(e) if skippable(&e) => {
                skipped.insert(name, e.to_string());
                continue;
            }
            Err(e) => return Err(e),
        };
        let ddll: Vec<f64> = heads
            .par_iter()
            .map(|&(l, h)| {
                let spec = AblationSpec::single(l, h, AblationMode::PatternPreserving);
                let ablated = corpus_delta_ll(&model, tok, reading, Some(&spec))?;
                Ok(delta_delta_ll(&base, &ablated)?.value)
            })
            .collect::<Result<_>>()?;
        let ps_flat: Vec<f64> = heads.iter().map(|&(l, h)| ps[l][h]).collect();
        let sas_flat: Option<Vec<f64>> = sas.as_ref().map(|s| heads.iter().map(|&(l, h)| s[l][h]).collect());
        for (i, &(l, h)) in heads.iter().enumerate() {
            rows.push(HeadGridRow {
                layer: l,
                head: h,
                ps: ps_flat[i],
                sas_score: sas_flat.as_ref().map(|s| s[i]),
                ddll: ddll[i],
                corpus: name.clone(),
            });
        }
        corpora.insert(
            name,
            CorpusAblation {
                baseline_delta_ll: base.delta_ll,
                ddll_vs_ps: MaybeCorrelation::of(&ddll, &ps_flat),
                ddll_vs_sas: sas_flat.as_ref().map(|s| MaybeCorrelation::of(&ddll, s)),
            },
        );
    }
    let summary = AblationSummary {
        run_id: run.run_id.clone(),
        seed: run.seed,
        step: 0,
        tokens_seen: 0,
        mode: AblationMode::PatternPreserving,
        corpora,
        skipped,
    };
    Ok((rows, summary))
}
