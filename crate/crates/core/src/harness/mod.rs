//! Experiment plans, the training grid, and metric / ablation / PPP reports.
//!
//! Output layout under `--out`:
//!
//! ```text
//! runs/<run>/ledger.json, loss.csv, checkpoints/step-XXXXXXXX/
//! metrics/<run>.csv, metrics/summary.json
//! ablation/<run>/head_grid.csv, ablation/<run>/summary.json
//! ppp/<run>.csv, ppp/summary.json
//! ```

mod ablate;
mod gradcheck;
mod inputs;
mod ledger;
mod metrics;
mod plan;
mod ppp;
mod surprisal;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic_corpus, save_pretokenized, PretokenizedManifest, SpilloverMode, SyntheticCorpusConfig,
    SyntheticSpec, Tokenizer, VocabPolicy,
};
use crate::error::{Error, Result};
use crate::training::{RegularizerSpec, TrainConfig};

pub use ablate::{
    cmd_ablate, corpus_delta_ll, head_grid_path, read_head_grid, write_head_grid, AblationSummary, CorpusAblation,
    HeadGridRow, MaybeCorrelation,
};
pub use gradcheck::{gradcheck_suite, regularized_loss_gradcheck, GradcheckSummary, PRIMITIVE_CASES};
pub use inputs::{load_corpus, load_reading, select_documents, LoadedCorpus, LoadedReading};
pub use ledger::{canonicalize, config_hash, file_digest, LedgerCheckpoint, RunLedger, RunStatus, LEDGER_FILE};
pub use metrics::{cmd_metrics, metrics_csv_path, Breakthrough, MetricsSummary, RunMetrics};
pub use plan::{
    AblationPlan, CorpusPaths, ExperimentPlan, MetricKind, ModelSpec, Overrides, PppCorpus, ProbeConfig, RunSpec,
};
pub use ppp::{
    cmd_ppp, ppp_csv_path, tipping_index, PermutationResult, PooledCorrelation, PppRow, PppSummary, RunPpp,
    TippingPoint,
};
pub use surprisal::{chunked_surprisals, word_surprisals};
pub use train::{cmd_train, run_dir, TrainOutcome, TrainSummary};

pub const RUNS_DIR: &str = "runs";
pub const METRICS_DIR: &str = "metrics";
pub const ABLATION_DIR: &str = "ablation";
pub const PPP_DIR: &str = "ppp";

pub(crate) fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Plan(format!("thread pool: {e}")))
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Errors that skip one run/corpus pair instead of failing a report.
pub(crate) fn skippable(e: &Error) -> bool {
    matches!(e, Error::Unalignable { .. } | Error::RankDeficient { .. } | Error::Data(_))
}

/// File names written by [`gen_synthetic`].
pub mod files {
    pub const TRAIN_TEXT: &str = "train.txt";
    pub const TRAIN_PARSES: &str = "train.conllu";
    pub const EVAL_PARSES: &str = "eval.conllu";
    pub const READING: &str = "reading.csv";
    pub const FREQ: &str = "freq.tsv";
    pub const TOKENIZER: &str = "tokenizer.json";
    pub const PRETOKENIZED: &str = "corpus.json";
    pub const PRETOKENIZED_BLOB: &str = "corpus.bin";
    pub const PLAN: &str = "plan.json";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub documents: usize,
    pub tokens: usize,
    pub vocab_size: usize,
    pub eval_sentences: usize,
    pub reading_rows: usize,
}

/// Token budget of the generated plan at scale 1.
pub const SYNTHETIC_PLAN_TOKENS: f64 = 1_000_000.0;

/// Writes the synthetic corpus (text, parses, held-out parses, reading times,
/// frequencies, tokenizer, pre-tokenized ids) and a two-cell plan over it
/// (unregularized vs copy-suppressed 2-layer model). `scale` shrinks the corpus
/// and the plan's token budget.
pub fn gen_synthetic(out: &Path, seed: u64, scale: f64) -> Result<SyntheticSummary> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Plan(format!("scale must be positive, got {scale}")));
    }
    let cfg = SyntheticCorpusConfig {
        seed,
        ..SyntheticCorpusConfig::default()
    }
    .scaled(scale);
    let c = generate_synthetic_corpus(&cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(files::TRAIN_TEXT), &c.text)?;
    std::fs::write(out.join(files::TRAIN_PARSES), c.parses.to_conllu())?;
    std::fs::write(out.join(files::EVAL_PARSES), c.eval.to_conllu())?;
    c.reading.save(&out.join(files::READING))?;
    std::fs::write(out.join(files::FREQ), c.freq.to_tsv())?;
    let tok = Tokenizer::fit(c.text.lines(), &VocabPolicy::default())?;
    std::fs::write(out.join(files::TOKENIZER), serde_json::to_vec_pretty(&tok)?)?;
    let corpus = tok.tokenize(&c.text)?;
    save_pretokenized(
        &out.join(files::PRETOKENIZED),
        &corpus,
        &PretokenizedManifest {
            blob: files::PRETOKENIZED_BLOB.into(),
            separator_id: Tokenizer::SEP,
            vocab_size: tok.vocab_size(),
        },
    )?;

    let context = 64;
    let total_tokens = ((SYNTHETIC_PLAN_TOKENS * scale).round() as u64).max(4096);
    let plan = ExperimentPlan {
        name: format!("synthetic-s{seed}"),
        corpus: CorpusPaths {
            train: files::TRAIN_TEXT.into(),
            pretokenized: false,
            parses: Some(files::TRAIN_PARSES.into()),
            validation: None,
            validation_parses: None,
            validation_fraction: 0.05,
            eval_parses: Some(files::EVAL_PARSES.into()),
            tokenizer: Some(files::TOKENIZER.into()),
        },
        models: vec![ModelSpec {
            id: "l2".into(),
            n_layer: 2,
            n_head: 2,
            d_embed: 32,
            d_ffn: 128,
            context_size: context,
        }],
        regularizers: vec![
            RegularizerSpec::None,
            RegularizerSpec::Copy {
                lambda: 0.01,
                synthetic: SyntheticSpec {
                    l_min: 4,
                    l_max: context / 2,
                    context,
                    seed,
                },
            },
        ],
        seeds: vec![seed],
        train: TrainConfig {
            batch_size: 8,
            peak_lr: 3e-3,
            total_tokens,
            seed,
            eval_windows: 8,
            checkpoint_scale: total_tokens as f64 / 1e10,
            ..TrainConfig::default()
        },
        metrics: vec![MetricKind::ValLoss, MetricKind::Ps, MetricKind::Sas, MetricKind::Uas, MetricKind::Icl],
        probes: ProbeConfig {
            n: 16,
            ..ProbeConfig::default()
        },
        ppp_corpora: vec![PppCorpus {
            name: "synthetic".into(),
            reading: files::READING.into(),
            freq: files::FREQ.into(),
            spillover: SpilloverMode::SelfPaced,
        }],
        ablation: AblationPlan::default(),
        breakthrough_metric: MetricKind::Ps,
        permutations: 1000,
        permutation_alternative: Default::default(),
    };
    write_json(&out.join(files::PLAN), &plan)?;
    Ok(SyntheticSummary {
        documents: corpus.documents.len(),
        tokens: corpus.n_tokens(),
        vocab_size: tok.vocab_size(),
        eval_sentences: c.eval.sentences.len(),
        reading_rows: c.reading.rows.len(),
    })
}
