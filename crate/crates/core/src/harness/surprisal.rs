use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{aggregate_word_surprisals, ReadingTable, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{AblationSpec, Model};
use crate::tensor::Scalar;

/// Surprisal of `tokens[1..]`. Sequences longer than `context` are scored in
/// windows advancing by half a context, each position taken from the first window
/// that predicts it with at least half a context of history (or all of it).
pub fn chunked_surprisals(
    tokens: &[u32],
    context: usize,
    score: impl Fn(&[u32]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if context < 2 {
        return Err(Error::Model("context must hold at least two tokens".into()));
    }
    if tokens.len() <= context {
        return score(tokens);
    }
    let stride = context / 2;
    let mut out = Vec::with_capacity(tokens.len() - 1);
    let mut start = 0;
    loop {
        let end = (start + context).min(tokens.len());
        let s = score(&tokens[start..end])?;
        // s[i] predicts tokens[start + i + 1]
        let first_new = out.len() - start;
        out.extend_from_slice(&s[first_new..]);
        if end == tokens.len() {
            break;
        }
        start += stride;
    }
    Ok(out)
}

/// Word surprisals of every item, each item read as one sequence after a separator.
/// With `ablation`, surprisals come from the ablated model.
pub fn word_surprisals<T: Scalar>(
    model: &Model<T>,
    tokenizer: &Tokenizer,
    table: &ReadingTable,
    ablation: Option<&AblationSpec>,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let items = table.items();
    let ctx = model.config().context_size;
    items
        .par_iter()
        .map(|(item, rows)| {
            let words: Vec<&str> = rows.iter().map(|r| r.word.as_str()).collect();
            let (ids, spans) = tokenizer.encode_words(&words);
            let mut tokens = Vec::with_capacity(ids.len() + 1);
            tokens.push(Tokenizer::SEP);
            tokens.extend_from_slice(&ids);
            let tok = chunked_surprisals(&tokens, ctx, |seq| match ablation {
                Some(a) => model.ablated_surprisals(seq, a),
                None => model.compute_surprisals(seq),
            })?;
            Ok((item.to_string(), aggregate_word_surprisals(&tok, &spans)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Surprisal of token `t` given its window is its index within the window.
    fn positional(seq: &[u32]) -> Result<Vec<f64>> {
        Ok((1..seq.len()).map(|i| i as f64).collect())
    }

    #[test]
    fn chunking_covers_every_position_once() {
        let tokens: Vec<u32> = (0..23).collect();
        let s = chunked_surprisals(&tokens, 8, positional).unwrap();
        assert_eq!(s.len(), 22);
        // first window predicts positions 1..=7 with full history
        assert_eq!(&s[..7], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        // later positions keep at least four tokens of history
        assert!(s[7..].iter().all(|&v| v >= 4.0));
        let short = chunked_surprisals(&tokens[..8], 8, positional).unwrap();
        assert_eq!(short, positional(&tokens[..8]).unwrap());
    }
}
