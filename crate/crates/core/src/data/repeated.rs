use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of synthetic repeated-sequence data: a random block of length
/// `l ~ U[l_min, l_max]` tiled to fill `context` tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub l_min: usize,
    pub l_max: usize,
    pub context: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            l_min: 50,
            l_max: 512,
            context: 1024,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.l_min < 1 || self.l_min > self.l_max || 2 * self.l_max > self.context {
            return Err(Error::Data(format!(
                "synthetic spec needs 1 <= l_min <= l_max <= context/2, got {}..{} in {}",
                self.l_min, self.l_max, self.context
            )));
        }
        Ok(())
    }

    /// Same proportions at a smaller context, floor of 2 for the period.
    pub fn scaled_to(&self, context: usize) -> Self {
        let f = context as f64 / self.context as f64;
        let l_max = ((self.l_max as f64 * f).floor() as usize).clamp(1, context / 2);
        let l_min = ((self.l_min as f64 * f).round() as usize).clamp(1, l_max);
        Self {
            l_min,
            l_max,
            context,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepeatedSequence {
    pub tokens: Vec<u32>,
    pub period: usize,
}

/// `n` sequences with token ids uniform over `vocab`, each periodic with its own period.
pub fn generate_repeated_sequences(
    spec: &SyntheticSpec,
    n: usize,
    vocab: std::ops::Range<u32>,
) -> Result<Vec<RepeatedSequence>> {
    spec.validate()?;
    if vocab.end.saturating_sub(vocab.start) < 2 {
        return Err(Error::Data("repeated sequences need at least 2 token ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..n)
        .map(|_| {
            let period = rng.random_range(spec.l_min..=spec.l_max);
            let block: Vec<u32> = (0..period).map(|_| rng.random_range(vocab.clone())).collect();
            let tokens = (0..spec.context).map(|i| block[i % period]).collect();
            RepeatedSequence { tokens, period }
        })
        .collect())
}

/// Prefix-matching targets of every position (0-based) of a sequence with the given
/// period: for query `i`, positions `i - n·period + 1` for `n ≥ 1` while
/// `i - n·period ≥ 0`. These are the tokens that followed earlier copies of token `i`.
pub fn pm_map(len: usize, period: usize) -> Vec<Vec<usize>> {
    (0..len)
        .map(|i| {
            (1..)
                .map(|n| n * period)
                .take_while(|&s| s <= i)
                .map(|s| i - s + 1)
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_period_is_exact() {
        let spec = SyntheticSpec {
            l_min: 50,
            l_max: 50,
            ..SyntheticSpec::default()
        };
        for s in generate_repeated_sequences(&spec, 5, 0..100).unwrap() {
            assert_eq!(s.tokens.len(), 1024);
            assert!((50..1024).all(|i| s.tokens[i] == s.tokens[i - 50]));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = SyntheticSpec {
            l_max: 513,
            ..SyntheticSpec::default()
        };
        assert!(generate_repeated_sequences(&bad, 1, 0..10).is_err());
        assert!(generate_repeated_sequences(&SyntheticSpec::default(), 1, 3..4).is_err());
    }

    #[test]
    fn scaling_keeps_bounds_valid() {
        let s = SyntheticSpec::default().scaled_to(128);
        assert_eq!((s.l_min, s.l_max, s.context), (6, 64, 128));
        s.validate().unwrap();
    }

    #[test]
    fn pm_map_small_case() {
        let pm = pm_map(7, 3);
        assert!(pm[0].is_empty() && pm[2].is_empty());
        assert_eq!(pm[3], vec![1]);
        assert_eq!(pm[6], vec![4, 1]);
    }
}
