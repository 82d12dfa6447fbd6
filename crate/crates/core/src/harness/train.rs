use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::inputs::{load_corpus, LoadedCorpus};
use super::ledger::{config_hash, LedgerCheckpoint, RunLedger, RunStatus};
use super::plan::{ExperimentPlan, RunSpec};
use super::{pool, RUNS_DIR};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Precision, Scalar};
use crate::training::{train, TrainData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub run_id: String,
    pub status: RunStatus,
    /// False when a completed run was found and left alone.
    pub trained: bool,
    pub checkpoints: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub runs: Vec<TrainOutcome>,
}

impl TrainSummary {
    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| r.status == RunStatus::Failed).count()
    }
}

pub fn run_dir(out: &Path, run_id: &str) -> PathBuf {
    out.join(RUNS_DIR).join(run_id)
}

fn run_config(run: &RunSpec, corpus: &LoadedCorpus) -> serde_json::Value {
    json!({
        "model": run.model.config(corpus.vocab_size),
        "train": run.train,
        "regularizer": run.regularizer,
        "inputs": corpus.digests.iter().cloned().collect::<std::collections::BTreeMap<_, _>>(),
    })
}

/// Trains every grid cell, `jobs` at a time. A failing cell is recorded in its
/// ledger and the summary; the others carry on.
pub fn cmd_train(plan: &ExperimentPlan, out: &Path, jobs: usize) -> Result<TrainSummary> {
    plan.validate()?;
    let corpus = load_corpus(&plan.corpus)?;
    let runs = plan.runs();
    let outcomes = pool(jobs)?.install(|| {
        runs.par_iter()
            .map(|r| {
                train_one(r, &corpus, out).unwrap_or_else(|e| TrainOutcome {
                    run_id: r.run_id.clone(),
                    status: RunStatus::Failed,
                    trained: false,
                    checkpoints: 0,
                    error: Some(e.to_string()),
                })
            })
            .collect()
    });
    Ok(TrainSummary { runs: outcomes })
}

fn train_one(run: &RunSpec, corpus: &LoadedCorpus, out: &Path) -> Result<TrainOutcome> {
    let dir = run_dir(out, &run.run_id);
    let config = run_config(run, corpus);
    let hash = config_hash(&config);
    if let Some(prev) = RunLedger::load(&dir)? {
        if prev.config_hash != hash {
            return Err(Error::Plan(format!(
                "{} holds a run with a different configuration",
                dir.display()
            )));
        }
        if prev.status == RunStatus::Completed {
            return Ok(TrainOutcome {
                run_id: run.run_id.clone(),
                status: RunStatus::Completed,
                trained: false,
                checkpoints: prev.checkpoints.len(),
                error: None,
            });
        }
    }
    let mut ledger = RunLedger {
        run_id: run.run_id.clone(),
        seed: run.seed,
        config_hash: hash,
        status: RunStatus::Running,
        error: None,
        checkpoints: Vec::new(),
        config,
    };
    ledger.save(&dir)?;
    let result = match run.train.precision {
        Precision::F32 => train_with::<f32>(run, corpus, &dir),
        Precision::F64 => train_with::<f64>(run, corpus, &dir),
    };
    match result {
        Ok(checkpoints) => {
            ledger.status = RunStatus::Completed;
            ledger.checkpoints = checkpoints;
        }
        Err(e) => {
            ledger.status = RunStatus::Failed;
            ledger.error = Some(e.to_string());
        }
    }
    ledger.save(&dir)?;
    Ok(TrainOutcome {
        run_id: run.run_id.clone(),
        status: ledger.status,
        trained: true,
        checkpoints: ledger.checkpoints.len(),
        error: ledger.error,
    })
}

fn train_with<T: Scalar>(run: &RunSpec, corpus: &LoadedCorpus, dir: &Path) -> Result<Vec<LedgerCheckpoint>> {
    let mut model = Model::<T>::init(run.model.config(corpus.vocab_size), run.seed)?;
    let data = TrainData {
        train: &corpus.train,
        validation: &corpus.validation,
        synthetic_vocab: corpus.word_ids.clone(),
    };
    let report = train(&mut model, &data, &run.train, std::slice::from_ref(&run.regularizer), Some(dir))?;
    report
        .checkpoints
        .iter()
        .map(|c| {
            let path = c
                .dir
                .as_ref()
                .ok_or_else(|| Error::Training("checkpoint was not written".into()))?;
            let rel = path.strip_prefix(dir).unwrap_or(path);
            Ok(LedgerCheckpoint {
                step: c.step,
                tokens_seen: c.tokens_seen,
                val_loss: c.val_loss,
                dir: rel.to_string_lossy().replace('\\', "/"),
            })
        })
        .collect()
}

/// Completed ledger of `run`, or why it is unusable.
pub fn completed_ledger(out: &Path, run: &RunSpec) -> std::result::Result<RunLedger, String> {
    match RunLedger::load(&run_dir(out, &run.run_id)) {
        Ok(Some(l)) if l.status == RunStatus::Completed && !l.checkpoints.is_empty() => Ok(l),
        Ok(Some(l)) => Err(format!("run is {:?}", l.status).to_lowercase()),
        Ok(None) => Err("run has not been trained".into()),
        Err(e) => Err(e.to_string()),
    }
}
