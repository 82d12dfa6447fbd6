use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Square causal attention matrix: row `i` is the distribution of query `i` over keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    size: usize,
    data: Vec<f64>,
}

impl AttentionMatrix {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::shape("attention", format!("{} values for {size}x{size}", data.len())));
        }
        Ok(Self { size, data })
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..size * size).map(|k| f(k / size, k % size)).collect();
        Self { size, data }
    }

    /// Uniform causal attention (each query spreads evenly over its prefix).
    pub fn uniform_causal(size: usize) -> Self {
        Self::from_fn(size, |i, j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.size..(i + 1) * self.size]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Attention weights of every head for one sequence, indexed `[layer][head]`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttentionTrace {
    layers: Vec<Vec<AttentionMatrix>>,
}

impl AttentionTrace {
    pub fn new(layers: Vec<Vec<AttentionMatrix>>) -> Self {
        Self { layers }
    }

    /// Extracts sequence `index` from per-layer, per-head `[batch, seq, seq]` tensors.
    pub(crate) fn from_batched<T: Scalar>(attn: &[Vec<Tensor<T>>], index: usize) -> Self {
        let layers = attn
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|t| {
                        let n = t.last_dim();
                        let block = &t.data()[index * n * n..(index + 1) * n * n];
                        AttentionMatrix {
                            size: n,
                            data: block.iter().map(|v| v.as_f64()).collect(),
                        }
                    })
                    .collect()
            })
            .collect();
        Self { layers }
    }

    pub fn n_layer(&self) -> usize {
        self.layers.len()
    }

    pub fn n_head(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn head(&self, layer: usize, head: usize) -> &AttentionMatrix {
        &self.layers[layer][head]
    }

    pub fn layers(&self) -> &[Vec<AttentionMatrix>] {
        &self.layers
    }

    /// Sequence length (0 for an attention-free model).
    pub fn seq_len(&self) -> usize {
        self.layers
            .first()
            .and_then(|h| h.first())
            .map_or(0, AttentionMatrix::size)
    }
}

/// Gaussian noise added to FFN hidden activations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    PatternPreserving,
}

/// Heads to ablate, as (layer, head) pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub targets: Vec<(usize, usize)>,
    pub mode: AblationMode,
}

impl AblationSpec {
    pub fn new(targets: Vec<(usize, usize)>, mode: AblationMode) -> Self {
        Self { targets, mode }
    }

    pub fn single(layer: usize, head: usize, mode: AblationMode) -> Self {
        Self::new(vec![(layer, head)], mode)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for &(l, h) in &self.targets {
            if l >= config.n_layer || h >= config.n_head {
                return Err(Error::Model(format!(
                    "ablation target ({l}, {h}) outside {} layers x {} heads",
                    config.n_layer, config.n_head
                )));
            }
        }
        Ok(())
    }
}
