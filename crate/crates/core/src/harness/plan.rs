use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SpilloverMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::stats::Alternative;
use crate::tensor::Precision;
use crate::training::{RegularizerSpec, TrainConfig};

/// Architecture of one grid row; the vocabulary size comes from the corpus.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub id: String,
    pub n_layer: usize,
    #[serde(default = "two")]
    pub n_head: usize,
    #[serde(default = "sixty_four")]
    pub d_embed: usize,
    #[serde(default = "two_fifty_six")]
    pub d_ffn: usize,
    #[serde(default = "two_fifty_six")]
    pub context_size: usize,
}

fn two() -> usize {
    2
}
fn sixty_four() -> usize {
    64
}
fn two_fifty_six() -> usize {
    256
}

impl ModelSpec {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context_size: self.context_size,
            d_embed: self.d_embed,
            d_ffn: self.d_ffn,
            n_layer: self.n_layer,
            n_head: self.n_head,
            ..ModelConfig::default()
        }
    }
}

/// Training text and its annotations. `train` is one document per line, or a
/// pre-tokenized manifest when `pretokenized` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub train: PathBuf,
    #[serde(default)]
    pub pretokenized: bool,
    /// CoNLL-U parses of `train`, document for document.
    #[serde(default)]
    pub parses: Option<PathBuf>,
    #[serde(default)]
    pub validation: Option<PathBuf>,
    #[serde(default)]
    pub validation_parses: Option<PathBuf>,
    /// Fraction of training documents held out when no validation file is given.
    #[serde(default = "validation_fraction")]
    pub validation_fraction: f64,
    /// Held-out parsed sentences for UAS and SAS scores.
    #[serde(default)]
    pub eval_parses: Option<PathBuf>,
    /// Saved tokenizer; fitted on `train` when absent.
    #[serde(default)]
    pub tokenizer: Option<PathBuf>,
}

fn validation_fraction() -> f64 {
    0.05
}

/// A reading-time corpus for PPP analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PppCorpus {
    pub name: String,
    pub reading: PathBuf,
    pub freq: PathBuf,
    #[serde(default)]
    pub spillover: SpilloverMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ValLoss,
    Ps,
    Sas,
    Uas,
    Icl,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::ValLoss => "val_loss",
            MetricKind::Ps => "ps",
            MetricKind::Sas => "sas",
            MetricKind::Uas => "uas",
            MetricKind::Icl => "icl",
        }
    }
}

/// Repeated random probes for the prefix-matching score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n: usize,
    /// Block length; half the model context (at most 50) when absent.
    pub len: Option<usize>,
    pub seed: u64,
    /// Sequences scored for the ICL metric.
    pub icl_sequences: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n: 32,
            len: None,
            seed: 1,
            icl_sequences: 16,
        }
    }
}

impl ProbeConfig {
    pub fn len_for(&self, context: usize) -> usize {
        self.len.unwrap_or((context / 2).min(50))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationPlan {
    /// Runs to ablate; every run with attention when absent.
    pub runs: Option<Vec<String>>,
    /// Checkpoint step; the last checkpoint when absent.
    pub step: Option<usize>,
}

/// An experiment: the model × regularizer × seed grid plus its analyses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    pub corpus: CorpusPaths,
    pub models: Vec<ModelSpec>,
    #[serde(default = "no_regularizer")]
    pub regularizers: Vec<RegularizerSpec>,
    #[serde(default = "seed_zero")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "all_metrics")]
    pub metrics: Vec<MetricKind>,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default)]
    pub ppp_corpora: Vec<PppCorpus>,
    #[serde(default)]
    pub ablation: AblationPlan,
    /// Model-level metric whose breakthrough splits the PPP correlations.
    #[serde(default = "ps_metric")]
    pub breakthrough_metric: MetricKind,
    #[serde(default = "permutations")]
    pub permutations: usize,
    /// Regularized minus baseline per-word ΔLL; one-sided unless set.
    #[serde(default)]
    pub permutation_alternative: Alternative,
}

fn no_regularizer() -> Vec<RegularizerSpec> {
    vec![RegularizerSpec::None]
}
fn seed_zero() -> Vec<u64> {
    vec![0]
}
fn all_metrics() -> Vec<MetricKind> {
    vec![MetricKind::ValLoss, MetricKind::Ps, MetricKind::Sas, MetricKind::Uas, MetricKind::Icl]
}
fn ps_metric() -> MetricKind {
    MetricKind::Ps
}
fn permutations() -> usize {
    crate::stats::DEFAULT_PERMUTATIONS
}

/// One grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub run_id: String,
    pub model: ModelSpec,
    pub regularizer: RegularizerSpec,
    pub seed: u64,
    pub train: TrainConfig,
}

/// Command-line overrides of plan fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub checkpoint_scale: Option<f64>,
    pub precision: Option<Precision>,
}

impl ExperimentPlan {
    /// Reads a plan and resolves its relative paths against the plan's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Plan(format!("cannot read {}: {e}", path.display())))?;
        let mut plan: Self =
            serde_json::from_str(&text).map_err(|e| Error::Plan(format!("{}: {e}", path.display())))?;
        plan.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(plan)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let c = &mut self.corpus;
        fix(&mut c.train);
        for p in [
            &mut c.parses,
            &mut c.validation,
            &mut c.validation_parses,
            &mut c.eval_parses,
            &mut c.tokenizer,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for r in &mut self.ppp_corpora {
            fix(&mut r.reading);
            fix(&mut r.freq);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(s) = o.checkpoint_scale {
            self.train.checkpoint_scale = s;
        }
        if let Some(p) = o.precision {
            self.train.precision = p;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Plan(m));
        if self.models.is_empty() || self.regularizers.is_empty() || self.seeds.is_empty() {
            return bad("plan needs at least one model, regularizer and seed".into());
        }
        let mut ids = BTreeSet::new();
        for m in &self.models {
            if m.id.is_empty() || !m.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return bad(format!("model id {:?} must be non-empty [A-Za-z0-9_.]", m.id));
            }
            if !ids.insert(&m.id) {
                return bad(format!("duplicate model id {}", m.id));
            }
            m.config(8).validate().map_err(|e| Error::Plan(format!("model {}: {e}", m.id)))?;
        }
        let mut labels = BTreeSet::new();
        for r in &self.regularizers {
            r.validate().map_err(|e| Error::Plan(e.to_string()))?;
            if !labels.insert(r.label()) {
                return bad(format!("duplicate regularizer {}", r.label()));
            }
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("duplicate seeds".into());
        }
        self.train.validate().map_err(|e| Error::Plan(e.to_string()))?;
        let c = &self.corpus;
        if !(c.validation_fraction > 0.0 && c.validation_fraction < 1.0) {
            return bad(format!("validation_fraction must lie in (0, 1), got {}", c.validation_fraction));
        }
        if c.pretokenized && (c.parses.is_some() || c.validation_parses.is_some()) {
            return bad("parses cannot be attached to a pre-tokenized corpus".into());
        }
        let mut paths: Vec<&PathBuf> = vec![&c.train];
        paths.extend(
            [&c.parses, &c.validation, &c.validation_parses, &c.eval_parses, &c.tokenizer]
                .into_iter()
                .flatten(),
        );
        let mut names = BTreeSet::new();
        for r in &self.ppp_corpora {
            if !names.insert(&r.name) || r.name.is_empty() {
                return bad(format!("reading corpus name {:?} is empty or repeated", r.name));
            }
            paths.push(&r.reading);
            paths.push(&r.freq);
        }
        if let Some(p) = paths.iter().find(|p| !p.exists()) {
            return bad(format!("missing input {}", p.display()));
        }
        if self.permutations == 0 || self.probes.n == 0 {
            return bad("permutations and probe count must be positive".into());
        }
        if !matches!(self.breakthrough_metric, MetricKind::Ps | MetricKind::Uas | MetricKind::Sas) {
            return bad("breakthrough metric must be ps, uas or sas".into());
        }
        Ok(())
    }

    /// Grid cells in model, regularizer, seed order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for m in &self.models {
            for r in &self.regularizers {
                for &seed in &self.seeds {
                    out.push(RunSpec {
                        run_id: format!("{}-{}-s{seed}", m.id, r.label()),
                        model: m.clone(),
                        regularizer: r.clone(),
                        seed,
                        train: TrainConfig {
                            seed,
                            ..self.train.clone()
                        },
                    });
                }
            }
        }
        out
    }
}
