use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_repeated_sequences, generate_synthetic_corpus, SyntheticCorpusConfig, SyntheticSpec, Tokenizer,
    TrainingCorpus, VocabPolicy,
};
use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{check_gradients, GradCheckConfig, GradCheckReport, Graph, NodeId, Tensor};
use crate::training::{record_training_loss, RegularizerSpec};

/// Worst relative error per case over all instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub instances: u64,
    pub max_rel_error: BTreeMap<String, f64>,
}

impl GradcheckSummary {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().cloned().fold(0.0, f64::max)
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-amp..amp))
}

/// Contracts `y` with a fixed random tensor so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_tensor(&mut rng, g.value(y).shape(), 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn primitive_case(name: &str, rng: &mut ChaCha8Rng, seed: u64) -> (Vec<Tensor<f64>>, Build) {
    let (b, m, k) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
    match name {
        "matmul" => {
            let n = rng.random_range(1..4);
            let trans = rng.random_bool(0.5);
            let shared = rng.random_bool(0.5);
            let bshape = match (shared, trans) {
                (true, false) => vec![k, n],
                (true, true) => vec![n, k],
                (false, false) => vec![b, k, n],
                (false, true) => vec![b, n, k],
            };
            let params = vec![rand_tensor(rng, &[b, m, k], 1.0), rand_tensor(rng, &bshape, 1.0)];
            (
                params,
                Box::new(move |g, p| {
                    let y = if trans { g.matmul_nt(p[0], p[1])? } else { g.matmul(p[0], p[1])? };
                    project(g, y, seed)
                }),
            )
        }
        "add_mul_scale" => (
            vec![
                rand_tensor(rng, &[b, m, k], 1.0),
                rand_tensor(rng, &[m, k], 1.0),
                rand_tensor(rng, &[b, m, k], 1.0),
            ],
            Box::new(move |g, p| {
                let s = g.add(p[0], p[1])?;
                let t = g.mul(s, p[1])?;
                let u = g.mul(t, p[2])?;
                let u = g.scale(u, 0.7)?;
                project(g, u, seed)
            }),
        ),
        "softmax_rows" => {
            let causal = rng.random_bool(0.5);
            (
                vec![rand_tensor(rng, &[b, m, m], 3.0)],
                Box::new(move |g, p| {
                    let y = g.softmax_rows(p[0], causal)?;
                    project(g, y, seed)
                }),
            )
        }
        "layer_norm" => {
            let d = rng.random_range(2..7);
            (
                vec![rand_tensor(rng, &[b, m, d], 1.0), rand_tensor(rng, &[d], 1.0), rand_tensor(rng, &[d], 1.0)],
                Box::new(move |g, p| {
                    let y = g.layer_norm(p[0], p[1], p[2])?;
                    project(g, y, seed)
                }),
            )
        }
        "gelu" => (
            vec![rand_tensor(rng, &[b, m, k], 3.0)],
            Box::new(move |g, p| {
                let y = g.gelu(p[0])?;
                project(g, y, seed)
            }),
        ),
        "embedding" => {
            let vocab = rng.random_range(2..6);
            let ids: Vec<usize> = (0..b * m).map(|_| rng.random_range(0..vocab)).collect();
            (
                vec![rand_tensor(rng, &[vocab, k], 1.0)],
                Box::new(move |g, p| {
                    let y = g.embedding(p[0], &ids, &[b, m])?;
                    project(g, y, seed)
                }),
            )
        }
        "cross_entropy" => {
            let v = k + 1;
            let targets: Vec<usize> = (0..b * m).map(|_| rng.random_range(0..v)).collect();
            (
                vec![rand_tensor(rng, &[b, m, v], 1.0)],
                Box::new(move |g, p| g.cross_entropy(p[0], &targets)),
            )
        }
        "slice_concat" => {
            let w = rng.random_range(2..7);
            let start = rng.random_range(0..w - 1);
            let len = rng.random_range(1..w - start);
            (
                vec![rand_tensor(rng, &[b, m, w], 1.0), rand_tensor(rng, &[b, m, 2], 1.0)],
                Box::new(move |g, p| {
                    let s = g.slice_last(p[0], start, len)?;
                    let c = g.concat_last(&[p[1], s, p[0]])?;
                    project(g, c, seed)
                }),
            )
        }
        _ => (
            vec![rand_tensor(rng, &[b, m, k], 1.0)],
            Box::new(|g, p| {
                let sq = g.mul(p[0], p[0])?;
                let s = g.sum(sq)?;
                let mu = g.mean(p[0])?;
                let t = g.mul(s, mu)?;
                g.add(t, mu)
            }),
        ),
    }
}

pub const PRIMITIVE_CASES: [&str; 9] = [
    "matmul",
    "add_mul_scale",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "embedding",
    "cross_entropy",
    "slice_concat",
    "sum_mean",
];

/// Finite-difference check of cross-entropy plus the SAS and copy regularizer terms
/// on a tiny 2-layer model with inflated weights (so attention is far from uniform).
pub fn regularized_loss_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let synth = generate_synthetic_corpus(&SyntheticCorpusConfig {
        n_docs: 4,
        period: (4, 8),
        seed,
        ..SyntheticCorpusConfig::default()
    })?;
    let tok = Tokenizer::fit(synth.text.lines(), &VocabPolicy::default())?;
    let corpus = TrainingCorpus::new(&tok.tokenize(&synth.text)?, Tokenizer::SEP, Some((&synth.parses, &tok)))?;
    let cfg = ModelConfig {
        vocab_size: tok.vocab_size(),
        context_size: 12,
        d_embed: 8,
        d_ffn: 12,
        n_layer: 2,
        n_head: 2,
        ..ModelConfig::default()
    };
    let params: Vec<Tensor<f64>> = ModelParams::<f64>::init(&cfg, seed)?
        .tensors()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if t.rank() >= 2 {
                t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
            }
            t
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut windows = Vec::new();
    while windows.len() < 2 {
        let w = corpus.sample_window(&mut rng, 10)?;
        if w.parents.iter().any(Option::is_some) {
            windows.push(w);
        }
    }
    let synthetic = SyntheticSpec {
        l_min: 2,
        l_max: 5,
        context: 10,
        seed,
    };
    let copy = generate_repeated_sequences(&synthetic, 2, tok.word_id_range())?;
    let regs = [
        RegularizerSpec::Sas { lambda: 0.7 },
        RegularizerSpec::Copy { lambda: -0.9, synthetic },
    ];
    check_gradients(
        &params,
        |g, ids| Ok(record_training_loss(g, &cfg, ids, &windows, &copy, &regs, None)?.total),
        &GradCheckConfig {
            epsilon: 1e-5,
            coords_per_param: 8,
            seed,
        },
    )
}

/// Every primitive over `instances` random instances plus the regularized training
/// loss over `loss_instances`, all in f64.
pub fn gradcheck_suite(instances: u64, loss_instances: u64, seed: u64) -> Result<GradcheckSummary> {
    let mut out = BTreeMap::new();
    for name in PRIMITIVE_CASES {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let s = seed.wrapping_add(i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (params, build) = primitive_case(name, &mut rng, s);
            let cfg = GradCheckConfig {
                epsilon: 1e-5,
                coords_per_param: 24,
                seed: s,
            };
            worst = worst.max(check_gradients(&params, |g, p| build(g, p), &cfg)?.max_rel_error);
        }
        out.insert(name.to_string(), worst);
    }
    let mut worst: f64 = 0.0;
    for i in 0..loss_instances {
        worst = worst.max(regularized_loss_gradcheck(seed.wrapping_add(i))?.max_rel_error);
    }
    out.insert("regularized_loss".into(), worst);
    Ok(GradcheckSummary {
        instances,
        max_rel_error: out,
    })
}
