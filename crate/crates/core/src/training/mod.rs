//! Causal-LM training with optional syntactic and copying regularizers, Gaussian
//! noise injection and a log-then-linear checkpoint schedule.

mod optim;
mod regularizer;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Precision;

pub use optim::{clip_grad_norm, AdamW};
pub use regularizer::{copy_regularizer_term, sas_regularizer_term, RegularizerSpec};
pub use trainer::{
    evaluate_loss, read_loss_csv, record_training_loss, train, write_loss_csv, CheckpointRecord, LossNodes, LossRow, TrainData,
    TrainReport, CHECKPOINT_DIR, LOSS_CSV,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
}

/// Where training windows start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowSampling {
    /// Any token of the stream.
    #[default]
    Uniform,
    /// The separator opening a document.
    DocumentStart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub schedule: LrSchedule,
    pub total_tokens: u64,
    pub seed: u64,
    pub precision: Precision,
    /// Input tokens per sequence; the model context when absent.
    pub seq_len: Option<usize>,
    /// Validation windows scored at every checkpoint.
    pub eval_windows: usize,
    /// Global gradient-norm clip; none disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Multiplier applied to the checkpoint schedule.
    pub checkpoint_scale: f64,
    pub sampling: WindowSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            grad_accumulation: 1,
            weight_decay: 0.1,
            peak_lr: 5e-4,
            warmup_fraction: 0.01,
            schedule: LrSchedule::Cosine,
            total_tokens: 10_000_000_000,
            seed: 0,
            precision: Precision::F32,
            seq_len: None,
            eval_windows: 16,
            max_grad_norm: Some(1.0),
            checkpoint_scale: 1.0,
            sampling: WindowSampling::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Training(m));
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction));
        }
        if self.total_tokens == 0 {
            return bad("total_tokens must be positive".into());
        }
        if self.batch_size == 0 || self.grad_accumulation == 0 {
            return bad("batch_size and grad_accumulation must be positive".into());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) || !self.weight_decay.is_finite() {
            return bad("learning rate and weight decay must be finite".into());
        }
        if self.max_grad_norm.is_some_and(|n| !(n > 0.0)) {
            return bad("max_grad_norm must be positive".into());
        }
        if !(self.checkpoint_scale > 0.0 && self.checkpoint_scale.is_finite()) {
            return bad("checkpoint_scale must be positive".into());
        }
        if self.seq_len == Some(0) {
            return bad("seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn seq_len_for(&self, context: usize) -> usize {
        self.seq_len.unwrap_or(context)
    }

    pub fn tokens_per_step(&self, seq_len: usize) -> u64 {
        (self.batch_size * self.grad_accumulation * seq_len) as u64
    }

    pub fn total_steps(&self, seq_len: usize) -> usize {
        self.total_tokens.div_ceil(self.tokens_per_step(seq_len)) as usize
    }
}

/// Linear warmup over `ceil(warmup_fraction · total_steps)` steps, then cosine decay
/// to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let peak = config.peak_lr;
    let warmup = (config.warmup_fraction * total_steps as f64).ceil() as usize;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0);
    match config.schedule {
        LrSchedule::Cosine => peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    }
}

/// Token counts at which to checkpoint: 500K·2^k for k < 10, then every 0.5B up to
/// 10B, each multiplied by `scale`, truncated to `total_tokens` and deduplicated.
pub fn checkpoint_schedule(total_tokens: u64, scale: f64) -> Result<Vec<u64>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Training(format!("schedule scale must be positive, got {scale}")));
    }
    let base = (0..10)
        .map(|k| 500_000u64 << k)
        .chain((1..=20).map(|m| 500_000_000u64 * m));
    let mut out: Vec<u64> = base
        .map(|c| (c as f64 * scale).round() as u64)
        .filter(|&c| c > 0 && c <= total_tokens)
        .collect();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Training(format!(
            "total of {total_tokens} tokens is below the first scheduled checkpoint at scale {scale}"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
