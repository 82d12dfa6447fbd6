use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_FORMAT: &str = "phaselab-checkpoint-v1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in bytes.
    pub byte_offset: usize,
}

/// Checkpoint directory manifest. The parameters live in a little-endian f32 blob
/// next to it, laid out in `tensors` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub step: usize,
    pub tokens_seen: u64,
    pub seed: u64,
    pub dtype: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form extras (separator id, run id, ...).
    #[serde(default)]
    pub extra: std::collections::BTreeMap<String, serde_json::Value>,
}

impl CheckpointManifest {
    pub fn new(config: ModelConfig, step: usize, tokens_seen: u64, seed: u64) -> Self {
        let mut offset = 0;
        let tensors = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let e = TensorEntry {
                    name,
                    byte_offset: offset,
                    shape: shape.clone(),
                };
                offset += 4 * shape.iter().product::<usize>();
                e
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            config,
            step,
            tokens_seen,
            seed,
            dtype: "f32-le".into(),
            blob: BLOB.into(),
            tensors,
            extra: Default::default(),
        }
    }
}

/// Writes `manifest.json` and the parameter blob into `dir` (created if missing).
/// `manifest.config` and layout are taken from `model`.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    model: &Model<T>,
    manifest: &CheckpointManifest,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut m = CheckpointManifest::new(
        model.config().clone(),
        manifest.step,
        manifest.tokens_seen,
        manifest.seed,
    );
    m.extra = manifest.extra.clone();
    let total: usize = model.params().tensors().iter().map(Tensor::len).sum();
    let mut bytes = Vec::with_capacity(total * 4);
    for t in model.params().tensors() {
        for v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    // write-then-rename so a crash never leaves a torn checkpoint behind
    let tmp = dir.join(format!("{BLOB}.tmp"));
    fs::File::create(&tmp)?.write_all(&bytes)?;
    fs::rename(&tmp, dir.join(BLOB))?;
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&m)?)?;
    fs::rename(&tmp, dir.join(MANIFEST))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Model<T>, CheckpointManifest)> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Model(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    if manifest.dtype != "f32-le" {
        return Err(Error::Model(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    manifest.config.validate()?;
    let bytes = fs::read(dir.join(&manifest.blob))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Model("parameter blob length is not a multiple of 4".into()));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let layout = manifest.config.param_layout();
    if layout.len() != manifest.tensors.len() {
        return Err(Error::Model("manifest tensor list does not match config".into()));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.iter().zip(&manifest.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Model(format!("manifest entry {} does not match layout", entry.name)));
        }
        let n: usize = shape.iter().product();
        if entry.byte_offset % 4 != 0 {
            return Err(Error::Model(format!("{name}: misaligned byte offset")));
        }
        let start = entry.byte_offset / 4;
        let slice = floats
            .get(start..start + n)
            .ok_or_else(|| Error::Model(format!("blob too short for {name}")))?;
        tensors.push(Tensor::new(shape.clone(), slice.iter().map(|&v| T::lit(v as f64)).collect())?);
    }
    let params = ModelParams::from_parts(&manifest.config, tensors)?;
    let model = Model::from_params(manifest.config.clone(), params)?;
    Ok((model, manifest))
}

/// Reads a checkpoint's manifest without touching the parameter blob.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Model(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    Ok(manifest)
}
