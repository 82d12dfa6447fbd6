use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{check_partition, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::word_level_trace;
use crate::model::AttentionTrace;
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

/// One auxiliary training signal. Several may be active at once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegularizerSpec {
    None,
    /// Penalizes (λ > 0) or rewards (λ < 0) word-level attention along dependency edges.
    Sas { lambda: f64 },
    /// Penalizes attention to prefix-matching targets on a separate synthetic batch.
    Copy { lambda: f64, synthetic: SyntheticSpec },
    /// Gaussian noise on the FFN hidden activations.
    Gni { sigma: f64 },
}

impl RegularizerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::None => Ok(()),
            Self::Sas { lambda } if !lambda.is_finite() => Err(Error::Training(format!("sas lambda {lambda} is not finite"))),
            Self::Copy { lambda, .. } if !lambda.is_finite() => {
                Err(Error::Training(format!("copy lambda {lambda} is not finite")))
            }
            Self::Copy { synthetic, .. } => synthetic.validate(),
            Self::Gni { sigma } if !(sigma.is_finite() && *sigma >= 0.0) => {
                Err(Error::Training(format!("gni sigma must be finite and >= 0, got {sigma}")))
            }
            _ => Ok(()),
        }
    }

    /// Short stable label, e.g. `sas_0.01`.
    pub fn label(&self) -> String {
        match self {
            Self::None => "none".into(),
            Self::Sas { lambda } => format!("sas_{lambda}"),
            Self::Copy { lambda, .. } => format!("copy_{lambda}"),
            Self::Gni { sigma } => format!("gni_{sigma}"),
        }
    }
}

/// The regularizers of a run folded into their effective weights; zero weights are off.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct ActiveRegularizers {
    pub sas: f64,
    pub copy: Option<(f64, SyntheticSpec)>,
    pub sigma: f64,
}

impl ActiveRegularizers {
    pub fn from_specs(specs: &[RegularizerSpec]) -> Result<Self> {
        let mut out = Self::default();
        for s in specs {
            s.validate()?;
            match s {
                RegularizerSpec::None => {}
                RegularizerSpec::Sas { lambda } => out.sas += lambda,
                RegularizerSpec::Copy { lambda, synthetic } => {
                    if *lambda != 0.0 {
                        if out.copy.as_ref().is_some_and(|(_, s)| s != synthetic) {
                            return Err(Error::Training("copy regularizers disagree on the synthetic spec".into()));
                        }
                        let prev = out.copy.take().map_or(0.0, |c| c.0);
                        out.copy = Some((prev + lambda, synthetic.clone()));
                    }
                }
                RegularizerSpec::Gni { sigma } => {
                    if out.sigma > 0.0 && *sigma > 0.0 {
                        return Err(Error::Training("at most one noise level per run".into()));
                    }
                    out.sigma = out.sigma.max(*sigma);
                }
            }
        }
        Ok(out)
    }
}

/// Token-level coefficients `c[p·t + q]` with `Σ c·α` equal to the word-level attention
/// mass along the sequence's dependency edges. Each edge counts once, from the later
/// word to the earlier one (the only causal direction).
pub(crate) fn sas_mask(spans: &[Range<usize>], parents: &[Option<usize>], t: usize) -> Result<Vec<f64>> {
    check_partition(spans, t).map_err(|e| Error::Training(format!("word spans vs sequence: {e}")))?;
    if parents.len() != spans.len() {
        return Err(Error::Training(format!(
            "{} parents for {} words",
            parents.len(),
            spans.len()
        )));
    }
    let mut c = vec![0.0; t * t];
    for (child, parent) in parents.iter().enumerate() {
        let Some(parent) = *parent else { continue };
        if parent >= spans.len() || parent == child {
            return Err(Error::Training(format!("bad parent {parent} for word {child}")));
        }
        let (src, dst) = (child.max(parent), child.min(parent));
        let w = 1.0 / spans[src].len() as f64;
        for p in spans[src].clone() {
            for q in spans[dst].clone() {
                c[p * t + q] += w;
            }
        }
    }
    Ok(c)
}

/// Coefficients selecting every prefix-matching target of every query.
pub(crate) fn copy_mask(pm: &[Vec<usize>]) -> Result<Vec<f64>> {
    let t = pm.len();
    let mut c = vec![0.0; t * t];
    for (i, targets) in pm.iter().enumerate() {
        for &j in targets {
            if j > i {
                return Err(Error::Training(format!("prefix-matching target {j} is after query {i}")));
            }
            c[i * t + j] += 1.0;
        }
    }
    Ok(c)
}

/// `Σ_b Σ_{l,h} Σ mask_b · α` divided by batch × layers × heads, recorded on `g`.
/// `None` when there are no attention heads.
pub(crate) fn masked_attention_term<T: Scalar>(
    g: &mut Graph<T>,
    attention: &[Vec<NodeId>],
    masks: &[Vec<f64>],
    t: usize,
) -> Result<Option<NodeId>> {
    let n_heads: usize = attention.iter().map(Vec::len).sum();
    if n_heads == 0 {
        return Ok(None);
    }
    let b = masks.len();
    let norm = 1.0 / (b * n_heads) as f64;
    let mut data = Vec::with_capacity(b * t * t);
    for m in masks {
        if m.len() != t * t {
            return Err(Error::Training("regularizer mask does not match the sequence length".into()));
        }
        data.extend(m.iter().map(|&v| T::lit(v * norm)));
    }
    let mask = g.constant(Tensor::new(vec![b, t, t], data)?);
    let mut heads = attention.iter().flatten().copied();
    let mut total = heads.next().expect("at least one head");
    for h in heads {
        total = g.add(total, h)?;
    }
    let weighted = g.mul(total, mask)?;
    Ok(Some(g.sum(weighted)?))
}

/// Word-level attention mass on dependency edges, averaged over heads, layers and
/// batch. Each item is a token-level trace, its word spans and each word's parent.
pub fn sas_regularizer_term(items: &[(&AttentionTrace, &[Range<usize>], &[Option<usize>])]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (trace, spans, parents) in items {
        if parents.len() != spans.len() {
            return Err(Error::Training(format!("{} parents for {} words", parents.len(), spans.len())));
        }
        if trace.n_layer() == 0 || trace.n_head() == 0 {
            continue;
        }
        let words = word_level_trace(trace, spans).map_err(|e| Error::Training(e.to_string()))?;
        for a in words.layers().iter().flatten() {
            for (child, parent) in parents.iter().enumerate() {
                if let Some(p) = *parent {
                    if p >= spans.len() || p == child {
                        return Err(Error::Training(format!("bad parent {p} for word {child}")));
                    }
                    total += a.get(child.max(p), child.min(p));
                }
            }
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Attention mass on prefix-matching targets, averaged over heads, layers and batch.
pub fn copy_regularizer_term(items: &[(&AttentionTrace, &[Vec<usize>])]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (trace, pm) in items {
        if trace.n_layer() == 0 || trace.n_head() == 0 {
            continue;
        }
        if trace.seq_len() != pm.len() {
            return Err(Error::Training("prefix-matching map does not match the trace length".into()));
        }
        for a in trace.layers().iter().flatten() {
            for (i, targets) in pm.iter().enumerate() {
                for &j in targets {
                    if j > i {
                        return Err(Error::Training(format!("prefix-matching target {j} is after query {i}")));
                    }
                    total += a.get(i, j);
                }
            }
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
