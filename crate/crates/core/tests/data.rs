use std::collections::BTreeMap;

use phaselab::data::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_doc(rng: &mut ChaCha8Rng) -> String {
    let alphabet: Vec<char> = "abcdeéfgh,.'ü".chars().collect();
    let n_words = rng.random_range(1..12);
    let mut out = String::new();
    for _ in 0..n_words {
        let len = rng.random_range(1..7);
        let w: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        out.push_str(&w);
        // irregular whitespace on purpose
        out.push_str(if rng.random_bool(0.2) { " \t " } else { " " });
    }
    out
}

#[test]
fn detokenize_round_trips_a_thousand_documents() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let docs: Vec<String> = (0..1000).map(|_| random_doc(&mut rng)).collect();
    // a small vocabulary forces plenty of byte fallback
    let policy = VocabPolicy {
        max_vocab: 120,
        byte_fallback: true,
    };
    let tok = Tokenizer::fit(docs.iter().map(String::as_str), &policy).unwrap();
    assert!(tok.vocab_size() <= 120);
    let corpus = tok.tokenize(&docs.join("\n")).unwrap();
    assert_eq!(corpus.documents.len(), 1000);
    for (i, doc) in docs.iter().enumerate() {
        let normalized = doc.split_whitespace().collect::<Vec<_>>().join(" ");
        check_partition(&corpus.word_spans[i], corpus.documents[i].len()).unwrap();
        assert_eq!(tok.detokenize(&corpus.documents[i], &corpus.word_spans[i]).unwrap(), normalized);
        assert!(corpus.documents[i].iter().all(|&id| (id as usize) < tok.vocab_size()));
    }
}

#[test]
fn relation_counts_match_line_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let text = DepAnnotatedText {
        sentences: (0..50).map(|_| generate_sentence(&mut rng)).collect(),
    }
    .to_conllu();
    // independent count: every token line whose HEAD is not 0 contributes its DEPREL
    let mut expected: BTreeMap<String, usize> = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols[6] != "0" && cols[6] != "_" {
            *expected.entry(cols[7].to_string()).or_default() += 1;
        }
    }
    let parsed = parse_conllu(&text, "gen").unwrap();
    assert_eq!(parsed.sentences.len(), 50);
    assert_eq!(parsed.relation_counts(), expected);
}

#[test]
fn pm_map_matches_brute_force_prefix_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let period = rng.random_range(2..20);
        let len = rng.random_range(period..120);
        // ids are unique within a block, so token equality identifies the periodic slot
        let block: Vec<u32> = (0..period as u32).collect();
        let tokens: Vec<u32> = (0..len).map(|i| block[i % period]).collect();
        let pm = pm_map(len, period);
        for i in 0..len {
            let brute: Vec<usize> = (1..=i)
                .rev()
                .filter(|&j| tokens[j - 1] == tokens[i] && j - 1 < i)
                .collect();
            assert_eq!(pm[i], brute, "i={i} period={period}");
        }
    }
}

#[test]
fn periods_are_uniform() {
    let spec = SyntheticSpec {
        context: 1024,
        ..SyntheticSpec::default()
    };
    let seqs = generate_repeated_sequences(&spec, 10_000, 0..50257).unwrap();
    let k = spec.l_max - spec.l_min + 1;
    let mut counts = vec![0f64; k];
    for s in &seqs {
        assert!((s.period..s.tokens.len()).all(|i| s.tokens[i] == s.tokens[i - s.period]));
        counts[s.period - spec.l_min] += 1.0;
    }
    let expected = seqs.len() as f64 / k as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let crit = chi2_critical(k - 1, 0.01);
    assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
}

fn chi2_critical(df: usize, alpha: f64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    ChiSquared::new(df as f64).unwrap().inverse_cdf(1.0 - alpha)
}

#[test]
fn twenty_word_item_matches_hand_built_rows() {
    let words: Vec<String> = (0..20).map(|i| "w".repeat(1 + i % 4)).collect();
    let rows = words
        .iter()
        .enumerate()
        .map(|(i, w)| ReadingRow {
            item_id: "it".into(),
            word_index: i,
            word: w.clone(),
            measure_ms: 150.0 + i as f64,
        })
        .collect();
    let table = ReadingTable::new(rows).unwrap();
    let freq = FrequencyTable::parse("w\t3\nww\t0\nwww\t99\n", "f").unwrap();
    let s: Vec<f64> = (0..20).map(|i| 0.5 * i as f64).collect();
    let surprisals = BTreeMap::from([("it".to_string(), s)]);
    let got = align_word_features(&table, &surprisals, &freq, SpilloverMode::SelfPaced).unwrap();
    assert_eq!(got.dropped, 4);
    assert_eq!(got.rows.len(), 16);
    let lf = |i: usize| match i % 4 {
        0 => 4f64.ln(),
        1 => 0.0,
        2 => 100f64.ln(),
        _ => 0.0,
    };
    for (r, i) in got.rows.iter().zip(4..20) {
        assert_eq!(r.word_index, i);
        assert_eq!(r.measure_ms, 150.0 + i as f64);
        let lag = |f: &dyn Fn(usize) -> f64| (0..=4).map(|d| f(i - d)).collect::<Vec<_>>();
        assert_eq!(r.surprisal, lag(&|j| 0.5 * j as f64));
        assert_eq!(r.length, lag(&|j| (1 + j % 4) as f64));
        assert_eq!(r.log_freq, lag(&lf));
    }
}

proptest! {
    #[test]
    fn spans_partition_tokens(docs in prop::collection::vec("[a-c ]{0,30}", 1..8)) {
        let text = docs.join("\n");
        prop_assume!(text.split_whitespace().next().is_some());
        let tok = Tokenizer::fit(text.lines(), &VocabPolicy { max_vocab: 8, byte_fallback: true }).unwrap();
        let c = tok.tokenize(&text).unwrap();
        for (ids, spans) in c.documents.iter().zip(&c.word_spans) {
            prop_assert!(check_partition(spans, ids.len()).is_ok());
        }
    }

    #[test]
    fn log_freq_is_monotone(a in 0u64..1_000_000, b in 0u64..1_000_000) {
        let f = FrequencyTable::parse(&format!("x\t{a}\ny\t{b}\n"), "f").unwrap();
        prop_assert_eq!(a <= b, f.log_freq("x") <= f.log_freq("y"));
    }
}
