use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, AdamW};
use super::regularizer::{copy_mask, masked_attention_term, sas_mask, ActiveRegularizers};
use super::{checkpoint_schedule, lr_at, RegularizerSpec, TrainConfig, WindowSampling};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_repeated_sequences, pm_map, RepeatedSequence, SyntheticSpec, TrainingCorpus, Window};
use crate::error::{Error, Result};
use crate::model::{build_forward, read_manifest, save_checkpoint, CheckpointManifest, ForwardOptions, Model, ModelConfig};
use crate::seed::derived_rng;
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

pub const LOSS_CSV: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const OPTIMIZER_BLOB: &str = "optimizer.bin";

const STREAM_BATCH: u64 = 0;
const STREAM_COPY: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// One optimizer step of the loss curve. `reg_loss` is the λ-weighted regularizer
/// total; `val_loss` is only present at checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub tokens_seen: u64,
    pub clm_loss: f64,
    pub reg_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub step: usize,
    pub tokens_seen: u64,
    pub val_loss: f64,
    /// Where it was written; none for in-memory runs.
    pub dir: Option<PathBuf>,
}

pub struct TrainData<'a> {
    pub train: &'a TrainingCorpus,
    pub validation: &'a TrainingCorpus,
    /// Token ids drawn for synthetic copy batches.
    pub synthetic_vocab: Range<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub total_steps: usize,
    pub loss_curve: Vec<LossRow>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Step restored from disk, if the run resumed.
    pub resumed_at: Option<usize>,
}

pub fn write_loss_csv(w: impl Write, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(r: impl Read) -> Result<Vec<LossRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Mean next-token cross-entropy over `windows`, evaluated `batch_size` at a time.
pub fn evaluate_loss<T: Scalar>(model: &Model<T>, windows: &[Window], batch_size: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Training("no evaluation windows".into()));
    }
    let mut total = 0.0;
    let mut rows = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let nodes = model.params().to_graph(&mut g, false);
        let inputs: Vec<&[u32]> = chunk.iter().map(Window::inputs).collect();
        let out = build_forward(&mut g, model.config(), &nodes, &inputs, ForwardOptions::default())?;
        let targets: Vec<usize> = chunk.iter().flat_map(|w| w.targets().iter().map(|&t| t as usize)).collect();
        let ce = g.cross_entropy(out.logits.expect("logits requested"), &targets)?;
        total += g.value(ce).item().as_f64() * targets.len() as f64;
        rows += targets.len();
    }
    Ok(total / rows as f64)
}

/// Trains `model` in place. With `out`, checkpoints (plus optimizer state) go to
/// `out/checkpoints/step-NNNNNNNN/` and the loss curve to `out/loss.csv`; an existing
/// run in `out` is resumed from its latest checkpoint.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &TrainData<'_>,
    config: &TrainConfig,
    regularizers: &[RegularizerSpec],
    out: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    if T::PRECISION != config.precision {
        return Err(Error::Training(format!(
            "config asks for {:?} but the model is {:?}",
            config.precision,
            T::PRECISION
        )));
    }
    let active = ActiveRegularizers::from_specs(regularizers)?;
    let cfg = model.config().clone();
    let seq_len = config.seq_len_for(cfg.context_size);
    if seq_len > cfg.context_size {
        return Err(Error::Training(format!("seq_len {seq_len} exceeds context {}", cfg.context_size)));
    }
    if active.sas != 0.0 && !data.train.has_parses() {
        return Err(Error::Training("the sas regularizer needs a corpus with dependency parses".into()));
    }
    if let Some((_, spec)) = &active.copy {
        if spec.context > cfg.context_size {
            return Err(Error::Training(format!(
                "synthetic sequences of {} tokens exceed context {}",
                spec.context, cfg.context_size
            )));
        }
    }
    let copy_spec = active.copy.as_ref().map(|(_, s)| s);
    let val_windows = data.validation.sequential_windows(seq_len, config.eval_windows)?;
    if val_windows.is_empty() {
        return Err(Error::Training(format!("validation corpus has no {seq_len}-token window")));
    }

    let total_steps = config.total_steps(seq_len);
    let tps = config.tokens_per_step(seq_len);
    let mut ckpt_steps: Vec<usize> = checkpoint_schedule(config.total_tokens, config.checkpoint_scale)?
        .into_iter()
        .map(|c| (c.div_ceil(tps) as usize).clamp(1, total_steps))
        .chain([total_steps])
        .collect();
    ckpt_steps.dedup();

    let mut opt = AdamW::new(model.params().tensors(), config.weight_decay);
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut start = 0;
    let mut resumed_at = None;
    if let Some(out) = out {
        fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
        let existing = completed_checkpoints(out)?;
        if let Some((dir, manifest)) = existing.last() {
            if manifest.seed != config.seed || manifest.config != cfg {
                return Err(Error::Training(format!(
                    "{} holds a run with a different seed or model config",
                    out.display()
                )));
            }
            let (restored, _) = crate::model::load_checkpoint::<T>(dir)?;
            *model = restored;
            opt = AdamW::load(&dir.join(OPTIMIZER_BLOB), model.params().tensors(), config.weight_decay, manifest.step as u64)?;
            start = manifest.step;
            resumed_at = Some(start);
            rows = read_loss_csv(fs::File::open(out.join(LOSS_CSV))?)?;
            rows.retain(|r| r.step <= start);
            records = existing
                .iter()
                .map(|(dir, m)| CheckpointRecord {
                    step: m.step,
                    tokens_seen: m.tokens_seen,
                    val_loss: m.extra.get("val_loss").and_then(|v| v.as_f64()).unwrap_or(f64::NAN),
                    dir: Some(dir.clone()),
                })
                .collect();
            info!("resuming {} at step {start}/{total_steps}", out.display());
        }
    }

    for step in start..total_steps {
        let (mut grads, clm, reg) = step_gradients(model, data, config, regularizers, copy_spec, step, seq_len)?;
        let s = step + 1;
        if !(clm + reg).is_finite() {
            let snapshot = match out {
                Some(o) => o.join(format!("nan-snapshot-step-{s:08}")),
                None => std::env::temp_dir().join(format!("phaselab-nan-seed{}-step{s}", config.seed)),
            };
            save_checkpoint(&snapshot, model, &CheckpointManifest::new(cfg.clone(), step, step as u64 * tps, config.seed))?;
            return Err(Error::NonFiniteLoss { step: s, snapshot });
        }
        if let Some(max) = config.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        opt.update(model.params_mut().tensors_mut(), &grads, lr_at(step, total_steps, config))?;

        let tokens_seen = s as u64 * tps;
        let mut row = LossRow {
            step: s,
            tokens_seen,
            clm_loss: clm,
            reg_loss: reg,
            val_loss: None,
        };
        debug!("step {s}: clm {clm:.4} reg {reg:.4}");
        if ckpt_steps.binary_search(&s).is_ok() {
            let v = evaluate_loss(model, &val_windows, config.batch_size)?;
            row.val_loss = Some(v);
            rows.push(row);
            let dir = match out {
                Some(out) => {
                    let dir = out.join(CHECKPOINT_DIR).join(format!("step-{s:08}"));
                    fs::create_dir_all(&dir)?;
                    opt.save(&dir.join(OPTIMIZER_BLOB))?;
                    let mut m = CheckpointManifest::new(cfg.clone(), s, tokens_seen, config.seed);
                    m.extra.insert("val_loss".into(), v.into());
                    m.extra.insert("optimizer".into(), OPTIMIZER_BLOB.into());
                    save_checkpoint(&dir, model, &m)?;
                    write_loss_csv(fs::File::create(out.join(LOSS_CSV))?, &rows)?;
                    Some(dir)
                }
                None => None,
            };
            info!("checkpoint at step {s} ({tokens_seen} tokens): val loss {v:.4}");
            records.push(CheckpointRecord {
                step: s,
                tokens_seen,
                val_loss: v,
                dir,
            });
        } else {
            rows.push(row);
        }
    }
    if let Some(out) = out {
        write_loss_csv(fs::File::create(out.join(LOSS_CSV))?, &rows)?;
    }
    Ok(TrainReport {
        total_steps,
        loss_curve: rows,
        checkpoints: records,
        resumed_at,
    })
}

/// Checkpoint directories of a run whose manifest (written last) exists, by step.
fn completed_checkpoints(out: &Path) -> Result<Vec<(PathBuf, CheckpointManifest)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(out.join(CHECKPOINT_DIR))? {
        let dir = entry?.path();
        if dir.join("manifest.json").is_file() && dir.join(OPTIMIZER_BLOB).is_file() {
            let m = read_manifest(&dir)?;
            found.push((dir, m));
        }
    }
    found.sort_by_key(|(_, m)| m.step);
    Ok(found)
}

/// Node ids of one recorded training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    /// CE plus every λ-weighted regularizer term.
    pub total: NodeId,
    pub clm: NodeId,
    /// Sum of the λ-weighted regularizer terms, when any is active.
    pub reg: Option<NodeId>,
}

/// Records the full training objective on `g`: mean next-token cross-entropy on
/// `windows`, plus λ·(dependency attention mass) on the same batch and λ·(copy
/// attention mass) on `copy_batch`. `noise` drives noise injection when a GNI
/// regularizer is active.
pub fn record_training_loss<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    params: &[NodeId],
    windows: &[Window],
    copy_batch: &[RepeatedSequence],
    regularizers: &[RegularizerSpec],
    noise: Option<&mut ChaCha8Rng>,
) -> Result<LossNodes> {
    let active = ActiveRegularizers::from_specs(regularizers)?;
    let seq_len = windows.first().map_or(0, |w| w.inputs().len());
    let inputs: Vec<&[u32]> = windows.iter().map(Window::inputs).collect();
    let options = ForwardOptions {
        noise: noise.filter(|_| active.sigma > 0.0).map(|r| (active.sigma, r)),
        ..ForwardOptions::default()
    };
    let out = build_forward(g, config, params, &inputs, options)?;
    let targets: Vec<usize> = windows.iter().flat_map(|w| w.targets().iter().map(|&t| t as usize)).collect();
    let clm = g.cross_entropy(out.logits.expect("logits requested"), &targets)?;
    let mut terms = Vec::new();

    if active.sas != 0.0 {
        let masks = windows
            .iter()
            .map(|w| sas_mask(&w.spans, &w.parents, seq_len))
            .collect::<Result<Vec<_>>>()?;
        if let Some(term) = masked_attention_term(g, &out.attention, &masks, seq_len)? {
            terms.push(g.scale(term, T::lit(active.sas))?);
        }
    }
    if let Some((lambda, _)) = &active.copy {
        if copy_batch.is_empty() {
            return Err(Error::Training("copy regularizer active without a synthetic batch".into()));
        }
        let len = copy_batch[0].tokens.len();
        let inputs: Vec<&[u32]> = copy_batch.iter().map(|s| s.tokens.as_slice()).collect();
        let copy_out = build_forward(
            g,
            config,
            params,
            &inputs,
            ForwardOptions {
                skip_logits: true,
                ..ForwardOptions::default()
            },
        )?;
        let masks = copy_batch
            .iter()
            .map(|s| copy_mask(&pm_map(s.tokens.len(), s.period)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(term) = masked_attention_term(g, &copy_out.attention, &masks, len)? {
            terms.push(g.scale(term, T::lit(*lambda))?);
        }
    }
    let mut reg = None;
    for t in terms {
        reg = Some(match reg {
            None => t,
            Some(r) => g.add(r, t)?,
        });
    }
    let total = match reg {
        Some(r) => g.add(clm, r)?,
        None => clm,
    };
    Ok(LossNodes { total, clm, reg })
}

/// Gradients of the total loss for update `step`, with the mean CE and weighted
/// regularizer values across micro-batches.
fn step_gradients<T: Scalar>(
    model: &Model<T>,
    data: &TrainData<'_>,
    config: &TrainConfig,
    regularizers: &[RegularizerSpec],
    copy: Option<&SyntheticSpec>,
    step: usize,
    seq_len: usize,
) -> Result<(Vec<Tensor<T>>, f64, f64)> {
    let ga = config.grad_accumulation;
    let inv = 1.0 / ga as f64;
    let mut acc: Vec<Tensor<T>> = model.params().tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let (mut clm, mut reg) = (0.0, 0.0);
    for micro in 0..ga {
        let idx = (step * ga + micro) as u64;
        let mut rng = derived_rng(config.seed, idx, STREAM_BATCH);
        let windows = (0..config.batch_size)
            .map(|_| match config.sampling {
                WindowSampling::Uniform => data.train.sample_window(&mut rng, seq_len),
                WindowSampling::DocumentStart => data.train.sample_document_window(&mut rng, seq_len),
            })
            .collect::<Result<Vec<_>>>()?;
        let copy_batch = match copy {
            Some(spec) => {
                let seed = derived_rng(config.seed, idx, STREAM_COPY).random();
                let spec = SyntheticSpec { seed, ..spec.clone() };
                generate_repeated_sequences(&spec, config.batch_size, data.synthetic_vocab.clone())?
            }
            None => Vec::new(),
        };
        let mut g = Graph::new();
        let nodes = model.params().to_graph(&mut g, true);
        let mut noise_rng = derived_rng(config.seed, idx, STREAM_NOISE);
        let loss = record_training_loss(
            &mut g,
            model.config(),
            &nodes,
            &windows,
            &copy_batch,
            regularizers,
            Some(&mut noise_rng),
        )?;
        clm += g.value(loss.clm).item().as_f64() * inv;
        reg += loss.reg.map_or(0.0, |r| g.value(r).item().as_f64()) * inv;
        let total = if ga > 1 { g.scale(loss.total, T::lit(inv))? } else { loss.total };
        let mut grads = g.backward(total)?;
        for (a, &n) in acc.iter_mut().zip(&nodes) {
            if let Some(gr) = grads.take(n) {
                if ga == 1 {
                    *a = gr;
                } else {
                    a.data_mut().iter_mut().zip(gr.data()).for_each(|(x, &y)| *x += y);
                }
            }
        }
    }
    Ok((acc, clm, reg))
}
