//! GPT-2 style decoder-only transformer with attention tracing, head ablation and
//! Gaussian noise injection into the FFN hidden activations.

mod checkpoint;
mod forward;
mod trace;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_FORMAT};
pub(crate) use forward::{build_forward, ForwardOptions, HeadOverride};
pub use trace::{AblationMode, AblationSpec, AttentionMatrix, AttentionTrace, NoiseSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_size: usize,
    pub d_embed: usize,
    pub d_ffn: usize,
    pub n_layer: usize,
    pub n_head: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelConfig {
    /// The 2-layer, 8-head GPT-2 configuration (53M parameters).
    fn default() -> Self {
        Self {
            vocab_size: 50257,
            context_size: 1024,
            d_embed: 768,
            d_ffn: 3072,
            n_layer: 2,
            n_head: 8,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    /// CPU-trainable default: 64-wide, 2 layers, 2 heads, 256-token context.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_size: 256,
            d_embed: 64,
            d_ffn: 256,
            n_layer: 2,
            n_head: 2,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_head == 0 || self.d_embed % self.n_head != 0 {
            return Err(Error::Model(format!(
                "d_embed {} must be divisible by n_head {}",
                self.d_embed, self.n_head
            )));
        }
        if self.context_size < 2 {
            return Err(Error::Model("context_size must be at least 2".into()));
        }
        if self.vocab_size == 0 || self.d_embed == 0 || self.d_ffn == 0 {
            return Err(Error::Model("vocab_size, d_embed and d_ffn must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.n_head
    }

    /// Parameter names and shapes in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_embed, self.d_ffn);
        let mut out = vec![
            ("wte".to_string(), vec![self.vocab_size, d]),
            ("wpe".to_string(), vec![self.context_size, d]),
        ];
        for l in 0..self.n_layer {
            let p = |s: &str| format!("h.{l}.{s}");
            out.extend([
                (p("ln_1.weight"), vec![d]),
                (p("ln_1.bias"), vec![d]),
                (p("attn.q.weight"), vec![d, d]),
                (p("attn.q.bias"), vec![d]),
                (p("attn.k.weight"), vec![d, d]),
                (p("attn.k.bias"), vec![d]),
                (p("attn.v.weight"), vec![d, d]),
                (p("attn.v.bias"), vec![d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("ln_2.weight"), vec![d]),
                (p("ln_2.bias"), vec![d]),
                (p("mlp.fc.weight"), vec![d, f]),
                (p("mlp.fc.bias"), vec![f]),
                (p("mlp.proj.weight"), vec![f, d]),
                (p("mlp.proj.bias"), vec![d]),
            ]);
        }
        out.push(("ln_f.weight".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        out
    }

    pub fn n_params(&self) -> usize {
        self.param_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

pub(crate) const PER_LAYER: usize = 16;
pub(crate) const WTE: usize = 0;
pub(crate) const WPE: usize = 1;

pub(crate) fn layer_base(layer: usize) -> usize {
    2 + layer * PER_LAYER
}

/// Named parameter tensors in [`ModelConfig::param_layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Normal(0, 0.02) for embeddings and projections, zeros for biases, unit LN gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.param_layout() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.contains("ln_") {
                Tensor::ones(&shape)
            } else {
                Tensor::from_fn(&shape, |_| T::lit(normal.sample(&mut rng)))
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }

    pub fn from_parts(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let layout = config.param_layout();
        if layout.len() != tensors.len() {
            return Err(Error::Model(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Model(format!("{name}: shape {:?} != {shape:?}", t.shape())));
            }
        }
        Ok(Self {
            names: layout.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Records every tensor on `g`, as trainable leaves when `trainable`.
    pub(crate) fn to_graph(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::from_parts(&config, params.tensors)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn run(
        &self,
        batch: &[&[u32]],
        options: ForwardOptions<'_, T>,
    ) -> Result<(Tensor<T>, Vec<Vec<Tensor<T>>>)> {
        let mut g = Graph::new();
        let nodes = self.params.to_graph(&mut g, false);
        let out = build_forward(&mut g, &self.config, &nodes, batch, options)?;
        let attn = out
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&id| g.value(id).clone()).collect())
            .collect();
        let logits = g.value(out.logits.expect("logits requested")).clone();
        Ok((logits, attn))
    }

    /// Logits (`[seq, vocab]`) and per-head attention for one sequence.
    pub fn forward_with_trace(
        &self,
        tokens: &[u32],
        noise: Option<&NoiseSpec>,
    ) -> Result<(Tensor<T>, AttentionTrace)> {
        let mut rng = noise.map(|n| ChaCha8Rng::seed_from_u64(n.seed));
        let options = ForwardOptions {
            noise: noise.zip(rng.as_mut()).map(|(n, r)| (n.sigma, r)),
            ..ForwardOptions::default()
        };
        let (logits, attn) = self.run(&[tokens], options)?;
        let n = tokens.len();
        let logits = logits.reshape(&[n, self.config.vocab_size])?;
        Ok((logits, AttentionTrace::from_batched(&attn, 0)))
    }

    /// Batched logits (`[batch, seq, vocab]`) for equal-length sequences.
    pub fn logits(&self, batch: &[&[u32]]) -> Result<Tensor<T>> {
        Ok(self.run(batch, ForwardOptions::default())?.0)
    }

    /// Surprisal in nats of each token given its prefix; element `i` belongs to
    /// `tokens[i + 1]` (the first token has none).
    pub fn compute_surprisals(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.len() < 2 {
            return Err(Error::Model("surprisal needs at least 2 tokens".into()));
        }
        let logits = self.logits(&[tokens])?;
        Ok(surprisals_from_logits(&logits, tokens))
    }

    /// Head ablation. `Full` zeroes the targeted heads' outputs and lets everything
    /// downstream recompute; `PatternPreserving` records all attention weights in a
    /// clean pass and replays them while the targeted heads' value path is zeroed.
    pub fn ablated_forward(
        &self,
        tokens: &[u32],
        spec: &AblationSpec,
    ) -> Result<(Tensor<T>, AttentionTrace)> {
        spec.validate(&self.config)?;
        let n = tokens.len();
        let (logits, attn) = match spec.mode {
            AblationMode::Full => self.run(
                &[tokens],
                ForwardOptions {
                    heads: Some(HeadOverride {
                        zeroed: &spec.targets,
                        fixed: None,
                    }),
                    ..ForwardOptions::default()
                },
            )?,
            AblationMode::PatternPreserving => {
                let (_, recorded) = self.run(&[tokens], ForwardOptions::default())?;
                self.run(
                    &[tokens],
                    ForwardOptions {
                        heads: Some(HeadOverride {
                            zeroed: &spec.targets,
                            fixed: Some(&recorded),
                        }),
                        ..ForwardOptions::default()
                    },
                )?
            }
        };
        let logits = logits.reshape(&[n, self.config.vocab_size])?;
        Ok((logits, AttentionTrace::from_batched(&attn, 0)))
    }

    /// Surprisals under an ablation.
    pub fn ablated_surprisals(&self, tokens: &[u32], spec: &AblationSpec) -> Result<Vec<f64>> {
        if tokens.len() < 2 {
            return Err(Error::Model("surprisal needs at least 2 tokens".into()));
        }
        let (logits, _) = self.ablated_forward(tokens, spec)?;
        Ok(surprisals_from_logits(&logits, tokens))
    }
}

/// `-ln softmax(logits[i])[tokens[i + 1]]`, computed in f64.
pub(crate) fn surprisals_from_logits<T: Scalar>(logits: &Tensor<T>, tokens: &[u32]) -> Vec<f64> {
    let v = logits.last_dim();
    let data = logits.data();
    (0..tokens.len() - 1)
        .map(|i| {
            let row = &data[i * v..(i + 1) * v];
            let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
            (lse - row[tokens[i + 1] as usize].as_f64()).max(0.0)
        })
        .collect()
}

/// Draws `[batch, seq, d_ffn]` noise per layer.
pub(crate) fn sample_noise<T: Scalar>(
    sigma: f64,
    rng: &mut ChaCha8Rng,
    shape: &[usize],
) -> Result<Tensor<T>> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Model(format!("noise sigma: {e}")))?;
    Ok(Tensor::from_fn(shape, |_| T::lit(normal.sample(rng))))
}
