use super::regularizer::{copy_mask, masked_attention_term, sas_mask};
use super::*;
use crate::data::{
    generate_repeated_sequences, generate_synthetic_corpus, pm_map, SyntheticCorpusConfig, SyntheticSpec, Tokenizer,
    TrainingCorpus, VocabPolicy,
};
use crate::model::{build_forward, AttentionMatrix, AttentionTrace, ForwardOptions, Model, ModelConfig};
use crate::seed::derived_rng;
use crate::tensor::{Graph, Precision};

fn one(a: AttentionMatrix) -> AttentionTrace {
    AttentionTrace::new(vec![vec![a]])
}

fn fixture() -> (TrainingCorpus, Tokenizer) {
    let cfg = SyntheticCorpusConfig {
        n_docs: 12,
        period: (4, 8),
        seed: 3,
        ..SyntheticCorpusConfig::default()
    };
    let c = generate_synthetic_corpus(&cfg).unwrap();
    let tok = Tokenizer::fit(c.text.lines(), &VocabPolicy::default()).unwrap();
    let tc = tok.tokenize(&c.text).unwrap();
    (TrainingCorpus::new(&tc, Tokenizer::SEP, Some((&c.parses, &tok))).unwrap(), tok)
}

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        context_size: 24,
        d_embed: 16,
        d_ffn: 32,
        n_layer: 2,
        n_head: 2,
        ..ModelConfig::default()
    }
}

fn tiny_train(seed: u64, precision: Precision) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        total_tokens: 2 * 24 * 12,
        seed,
        precision,
        peak_lr: 3e-3,
        warmup_fraction: 0.1,
        eval_windows: 4,
        checkpoint_scale: 24.0 * 2.0 / 500_000.0,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, 1000, &cfg), 0.0);
    assert_eq!(lr_at(10, 1000, &cfg), 5e-4);
    assert!(lr_at(1000, 1000, &cfg).abs() < 1e-18);
    assert!(lr_at(5, 1000, &cfg) < lr_at(6, 1000, &cfg));
    assert!(lr_at(600, 1000, &cfg) > lr_at(700, 1000, &cfg));
}

#[test]
fn schedule_examples() {
    let full = checkpoint_schedule(10_000_000_000, 1.0).unwrap();
    assert_eq!(full.len(), 30);
    assert_eq!(full[0], 500_000);
    assert_eq!(full[9], 256_000_000);
    assert_eq!(full[10], 500_000_000);
    assert_eq!(*full.last().unwrap(), 10_000_000_000);
    assert_eq!(checkpoint_schedule(256_000_000, 1.0).unwrap(), full[..10]);
    let small = checkpoint_schedule(10_000_000, 1e-3).unwrap();
    assert_eq!(&small[..3], &[500, 1000, 2000]);
    assert_eq!(small.len(), 30);
    assert!(checkpoint_schedule(100, 1.0).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig { warmup_fraction: 1.5, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { total_tokens: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(RegularizerSpec::Sas { lambda: f64::NAN }.validate().is_err());
    let json = r#"{"kind":"copy","lambda":0.01,"synthetic":{"l_min":6,"l_max":64,"context":128,"seed":0}}"#;
    let spec: RegularizerSpec = serde_json::from_str(json).unwrap();
    assert!(matches!(spec, RegularizerSpec::Copy { lambda, .. } if lambda == 0.01));
}

#[test]
fn sas_term_trivial_cases() {
    // three words, word 1's parent is word 0
    let spans = [0..1, 1..2, 2..3];
    let parents = [None, Some(0), None];
    let diag = AttentionMatrix::from_fn(3, |i, j| if i == j { 1.0 } else { 0.0 });
    let t = one(diag);
    assert_eq!(sas_regularizer_term(&[(&t, &spans, &parents)]).unwrap(), 0.0);
    let onto_parent = AttentionMatrix::from_fn(3, |i, j| if (i == 1 && j == 0) || (i != 1 && i == j) { 1.0 } else { 0.0 });
    let t = one(onto_parent);
    assert_eq!(sas_regularizer_term(&[(&t, &spans, &parents)]).unwrap(), 1.0);
    assert!(sas_regularizer_term(&[(&t, &spans[..2], &parents[..2])]).is_err());
}

#[test]
fn copy_term_trivial_cases() {
    let l = 4;
    let n = 3 * l;
    let pm = pm_map(n, l);
    let pairs: usize = pm.iter().map(Vec::len).sum();
    // all of each row on its first prefix-matching target
    let perfect = AttentionMatrix::from_fn(n, |i, j| match pm[i].first() {
        Some(&t) => (j == t) as u8 as f64,
        None => (j == 0) as u8 as f64,
    });
    let got = copy_regularizer_term(&[(&one(perfect), &pm)]).unwrap();
    assert_eq!(got, (n - l) as f64);
    assert!(got <= pairs as f64);
    let uniform = one(AttentionMatrix::uniform_causal(n));
    let empty = vec![Vec::new(); n];
    assert_eq!(copy_regularizer_term(&[(&uniform, &empty)]).unwrap(), 0.0);
    let mut bad = empty.clone();
    bad[2] = vec![5];
    assert!(copy_regularizer_term(&[(&uniform, &bad)]).is_err());
}

#[test]
fn differentiable_terms_match_pure_terms() {
    let (corpus, tok) = fixture();
    let cfg = tiny_config(tok.vocab_size());
    let model = Model::<f64>::init(cfg.clone(), 4).unwrap();
    let mut rng = derived_rng(1, 0, 0);
    let windows: Vec<_> = (0..3).map(|_| corpus.sample_window(&mut rng, 20).unwrap()).collect();
    let inputs: Vec<&[u32]> = windows.iter().map(|w| w.inputs()).collect();

    let mut g = Graph::new();
    let nodes = model.params().to_graph(&mut g, false);
    let out = build_forward(&mut g, &cfg, &nodes, &inputs, ForwardOptions::default()).unwrap();
    let masks: Vec<_> = windows.iter().map(|w| sas_mask(&w.spans, &w.parents, 20).unwrap()).collect();
    let node = masked_attention_term(&mut g, &out.attention, &masks, 20).unwrap().unwrap();
    let diff = g.value(node).item();

    let traces: Vec<AttentionTrace> = windows.iter().map(|w| model.forward_with_trace(w.inputs(), None).unwrap().1).collect();
    let items: Vec<_> = windows
        .iter()
        .zip(&traces)
        .map(|(w, t)| (t, w.spans.as_slice(), w.parents.as_slice()))
        .collect();
    let pure = sas_regularizer_term(&items).unwrap();
    assert!(pure > 0.0);
    assert!((diff - pure).abs() < 1e-10, "{diff} vs {pure}");

    let spec = SyntheticSpec { l_min: 3, l_max: 8, context: 20, seed: 9 };
    let seqs = generate_repeated_sequences(&spec, 2, tok.word_id_range()).unwrap();
    let inputs: Vec<&[u32]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
    let mut g = Graph::new();
    let nodes = model.params().to_graph(&mut g, false);
    let out = build_forward(&mut g, &cfg, &nodes, &inputs, ForwardOptions { skip_logits: true, ..ForwardOptions::default() }).unwrap();
    let pms: Vec<_> = seqs.iter().map(|s| pm_map(20, s.period)).collect();
    let masks: Vec<_> = pms.iter().map(|p| copy_mask(p).unwrap()).collect();
    let node = masked_attention_term(&mut g, &out.attention, &masks, 20).unwrap().unwrap();
    let traces: Vec<_> = seqs.iter().map(|s| model.forward_with_trace(&s.tokens, None).unwrap().1).collect();
    let items: Vec<_> = traces.iter().zip(&pms).map(|(t, p)| (t, p.as_slice())).collect();
    let pure = copy_regularizer_term(&items).unwrap();
    assert!((g.value(node).item() - pure).abs() < 1e-10);
}

#[test]
fn penalty_is_linear_in_lambda_and_absent_when_off() {
    let (corpus, tok) = fixture();
    let cfg = tiny_config(tok.vocab_size());
    let model = Model::<f64>::init(cfg.clone(), 4).unwrap();
    let mut rng = derived_rng(2, 0, 0);
    let windows: Vec<_> = std::iter::repeat_with(|| corpus.sample_window(&mut rng, 16).unwrap())
        .filter(|w| w.parents.iter().any(Option::is_some))
        .take(2)
        .collect();
    let spec = SyntheticSpec { l_min: 3, l_max: 8, context: 16, seed: 1 };
    let copy = generate_repeated_sequences(&spec, 2, tok.word_id_range()).unwrap();
    let eval = |regs: &[RegularizerSpec]| {
        let mut g = Graph::new();
        let nodes = model.params().to_graph(&mut g, false);
        let l = record_training_loss(&mut g, &cfg, &nodes, &windows, &copy, regs, None).unwrap();
        (g.value(l.total).item(), g.value(l.clm).item(), l.reg.map(|r| g.value(r).item()))
    };
    let (total, clm, reg) = eval(&[]);
    assert_eq!((total, reg), (clm, None));
    let (t0, _, r0) = eval(&[RegularizerSpec::Sas { lambda: 0.0 }, RegularizerSpec::Gni { sigma: 0.0 }]);
    assert_eq!((t0, r0), (clm, None));
    for reg_spec in [
        |l| RegularizerSpec::Sas { lambda: l },
        |l| RegularizerSpec::Copy { lambda: l, synthetic: SyntheticSpec { l_min: 3, l_max: 8, context: 16, seed: 1 } },
    ] {
        let (_, _, a) = eval(&[reg_spec(0.01)]);
        let (_, _, b) = eval(&[reg_spec(0.02)]);
        let (a, b) = (a.unwrap(), b.unwrap());
        assert!(a > 0.0);
        assert!((b - 2.0 * a).abs() < 1e-15);
    }
}

fn run(
    corpus: &TrainingCorpus,
    tok: &Tokenizer,
    cfg: &TrainConfig,
    regs: &[RegularizerSpec],
    out: Option<&std::path::Path>,
) -> (Model<f32>, TrainReport) {
    let mut model = Model::<f32>::init(tiny_config(tok.vocab_size()), cfg.seed).unwrap();
    let data = TrainData {
        train: corpus,
        validation: corpus,
        synthetic_vocab: tok.word_id_range(),
    };
    let report = train(&mut model, &data, cfg, regs, out).unwrap();
    (model, report)
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let (corpus, tok) = fixture();
    let cfg = tiny_train(5, Precision::F32);
    let (m1, r1) = run(&corpus, &tok, &cfg, &[], None);
    let (m2, r2) = run(&corpus, &tok, &cfg, &[], None);
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
    assert_eq!(r1.total_steps, 12);
    assert_eq!(r1.loss_curve.len(), 12);
    let first = r1.loss_curve[0].clm_loss;
    let last = r1.loss_curve.last().unwrap().clm_loss;
    assert!(last < first, "{first} -> {last}");
    assert!(r1.checkpoints.len() >= 2);
    assert_eq!(r1.checkpoints.last().unwrap().step, 12);
    assert!(r1.loss_curve.iter().all(|r| r.reg_loss == 0.0));
}

#[test]
fn zero_lambda_is_bit_identical_to_no_regularizer() {
    let (corpus, tok) = fixture();
    let cfg = tiny_train(6, Precision::F32);
    let (m1, r1) = run(&corpus, &tok, &cfg, &[RegularizerSpec::None], None);
    let zero = [
        RegularizerSpec::Sas { lambda: 0.0 },
        RegularizerSpec::Copy { lambda: 0.0, synthetic: SyntheticSpec { l_min: 3, l_max: 8, context: 24, seed: 0 } },
        RegularizerSpec::Gni { sigma: 0.0 },
    ];
    let (m2, r2) = run(&corpus, &tok, &cfg, &zero, None);
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
    let (m3, r3) = run(&corpus, &tok, &cfg, &[RegularizerSpec::Sas { lambda: 0.5 }], None);
    assert_ne!(m1, m3);
    assert!(r3.loss_curve.iter().all(|r| r.reg_loss > 0.0));
}

#[test]
fn resume_continues_exactly() {
    let (corpus, tok) = fixture();
    let cfg = tiny_train(7, Precision::F32);
    let regs = [RegularizerSpec::Gni { sigma: 0.05 }];
    let full_dir = tempfile::tempdir().unwrap();
    let (full, full_report) = run(&corpus, &tok, &cfg, &regs, Some(full_dir.path()));

    let part_dir = tempfile::tempdir().unwrap();
    run(&corpus, &tok, &cfg, &regs, Some(part_dir.path()));
    // drop everything after the second checkpoint, as if the process died there
    let ckdir = part_dir.path().join(CHECKPOINT_DIR);
    let mut dirs: Vec<_> = std::fs::read_dir(&ckdir).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    let keep = dirs[1].clone();
    for d in &dirs[2..] {
        std::fs::remove_dir_all(d).unwrap();
    }
    let kept_step = crate::model::read_manifest(&keep).unwrap().step;
    let (resumed, report) = run(&corpus, &tok, &cfg, &regs, Some(part_dir.path()));
    assert_eq!(report.resumed_at, Some(kept_step));
    assert_eq!(resumed, full);
    assert_eq!(report.loss_curve, full_report.loss_curve);
    let a = std::fs::read(full_dir.path().join(LOSS_CSV)).unwrap();
    let b = std::fs::read(part_dir.path().join(LOSS_CSV)).unwrap();
    assert_eq!(a, b);

    // a finished run is not retrained
    let (_, again) = run(&corpus, &tok, &cfg, &regs, Some(part_dir.path()));
    assert_eq!(again.resumed_at, Some(12));
    assert_eq!(again.loss_curve, full_report.loss_curve);
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let (corpus, tok) = fixture();
    let cfg = tiny_train(8, Precision::F32);
    let mut model = Model::<f32>::init(tiny_config(tok.vocab_size()), 8).unwrap();
    model.params_mut().get_mut("ln_f.weight").unwrap().data_mut()[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let data = TrainData {
        train: &corpus,
        validation: &corpus,
        synthetic_vocab: tok.word_id_range(),
    };
    match train(&mut model, &data, &cfg, &[], Some(dir.path())) {
        Err(crate::Error::NonFiniteLoss { step, snapshot }) => {
            assert_eq!(step, 1);
            assert!(snapshot.join("manifest.json").is_file());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn precision_mismatch_and_missing_parses_are_rejected() {
    let (corpus, tok) = fixture();
    let mut model = Model::<f32>::init(tiny_config(tok.vocab_size()), 1).unwrap();
    let data = TrainData {
        train: &corpus,
        validation: &corpus,
        synthetic_vocab: tok.word_id_range(),
    };
    assert!(train(&mut model, &data, &tiny_train(1, Precision::F64), &[], None).is_err());
    let c = tok.tokenize("a b c\n").unwrap();
    let bare = TrainingCorpus::new(&c, Tokenizer::SEP, None).unwrap();
    let data = TrainData { train: &bare, ..data };
    assert!(train(&mut model, &data, &tiny_train(1, Precision::F32), &[RegularizerSpec::Sas { lambda: 0.1 }], None).is_err());
}
