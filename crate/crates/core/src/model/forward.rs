use rand_chacha::ChaCha8Rng;

use super::{layer_base, sample_noise, ModelConfig, WPE, WTE};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

/// Per-head interventions for one forward pass.
pub(crate) struct HeadOverride<'a, T> {
    /// (layer, head) pairs whose output is replaced by zeros.
    pub zeroed: &'a [(usize, usize)],
    /// Recorded `[batch, seq, seq]` attention per layer and head, used as constants
    /// in place of the live softmax.
    pub fixed: Option<&'a [Vec<Tensor<T>>]>,
}

pub(crate) struct ForwardOptions<'a, T> {
    pub noise: Option<(f64, &'a mut ChaCha8Rng)>,
    pub heads: Option<HeadOverride<'a, T>>,
    /// Stop once the last layer's attention weights exist.
    pub skip_logits: bool,
}

impl<T> Default for ForwardOptions<'_, T> {
    fn default() -> Self {
        Self {
            noise: None,
            heads: None,
            skip_logits: false,
        }
    }
}

pub(crate) struct ForwardOutput {
    /// `[batch, seq, vocab]`, absent with `skip_logits`.
    pub logits: Option<NodeId>,
    /// Attention weights `[batch, seq, seq]` indexed by layer then head.
    pub attention: Vec<Vec<NodeId>>,
}

/// Records the transformer on `g` for a batch of equal-length sequences.
pub(crate) fn build_forward<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    params: &[NodeId],
    batch: &[&[u32]],
    mut options: ForwardOptions<'_, T>,
) -> Result<ForwardOutput> {
    let b = batch.len();
    let t = batch.first().map_or(0, |s| s.len());
    if b == 0 || t == 0 {
        return Err(Error::Model("empty batch".into()));
    }
    if batch.iter().any(|s| s.len() != t) {
        return Err(Error::Model("batch sequences differ in length".into()));
    }
    if t > config.context_size {
        return Err(Error::Model(format!(
            "sequence length {t} exceeds context size {}",
            config.context_size
        )));
    }
    let mut ids = Vec::with_capacity(b * t);
    for s in batch {
        for &tok in *s {
            if tok as usize >= config.vocab_size {
                return Err(Error::Model(format!(
                    "token id {tok} out of range for vocab {}",
                    config.vocab_size
                )));
            }
            ids.push(tok as usize);
        }
    }
    let (nh, dh) = (config.n_head, config.head_dim());
    let scale = T::lit(1.0 / (dh as f64).sqrt());

    let tok = g.embedding(params[WTE], &ids, &[b, t])?;
    let positions: Vec<usize> = (0..t).collect();
    let pos = g.embedding(params[WPE], &positions, &[t])?;
    let mut x = g.add(tok, pos)?;

    let mut attention = Vec::with_capacity(config.n_layer);
    for l in 0..config.n_layer {
        let p = &params[layer_base(l)..layer_base(l + 1)];
        let h = g.layer_norm(x, p[0], p[1])?;
        let q = affine(g, h, p[2], p[3])?;
        let k = affine(g, h, p[4], p[5])?;
        let v = affine(g, h, p[6], p[7])?;
        let last = l + 1 == config.n_layer;

        let mut weights = Vec::with_capacity(nh);
        let mut outputs = Vec::with_capacity(nh);
        for head in 0..nh {
            let fixed = options
                .heads
                .as_ref()
                .and_then(|o| o.fixed)
                .map(|f| f[l][head].clone());
            let alpha = match fixed {
                Some(rec) => {
                    if rec.shape() != [b, t, t] {
                        return Err(Error::shape("attention", format!("recorded {:?}", rec.shape())));
                    }
                    g.constant(rec)
                }
                None => {
                    let qh = g.slice_last(q, head * dh, dh)?;
                    let kh = g.slice_last(k, head * dh, dh)?;
                    let s = g.matmul_nt(qh, kh)?;
                    let s = g.scale(s, scale)?;
                    g.softmax_rows(s, true)?
                }
            };
            weights.push(alpha);
            if last && options.skip_logits {
                continue;
            }
            let zeroed = options
                .heads
                .as_ref()
                .is_some_and(|o| o.zeroed.contains(&(l, head)));
            let out = if zeroed {
                g.constant(Tensor::zeros(&[b, t, dh]))
            } else {
                let vh = g.slice_last(v, head * dh, dh)?;
                g.matmul(alpha, vh)?
            };
            outputs.push(out);
        }
        attention.push(weights);
        if last && options.skip_logits {
            return Ok(ForwardOutput {
                logits: None,
                attention,
            });
        }
        let heads = g.concat_last(&outputs)?;
        let attn = affine(g, heads, p[8], p[9])?;
        x = g.add(x, attn)?;

        let h = g.layer_norm(x, p[10], p[11])?;
        let f = affine(g, h, p[12], p[13])?;
        let mut f = g.gelu(f)?;
        if let Some((sigma, rng)) = options.noise.as_mut() {
            if *sigma > 0.0 {
                let eps = sample_noise(*sigma, rng, &[b, t, config.d_ffn])?;
                let eps = g.constant(eps);
                f = g.add(f, eps)?;
            }
        }
        let f = affine(g, f, p[14], p[15])?;
        x = g.add(x, f)?;
    }
    if options.skip_logits && config.n_layer == 0 {
        return Ok(ForwardOutput {
            logits: None,
            attention,
        });
    }
    let nf = params.len();
    let x = g.layer_norm(x, params[nf - 2], params[nf - 1])?;
    let logits = g.matmul_nt(x, params[WTE])?;
    debug_assert_eq!(g.value(logits).shape(), [b, t, config.vocab_size]);
    Ok(ForwardOutput {
        logits: Some(logits),
        attention,
    })
}

fn affine<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add(y, bias)
}
