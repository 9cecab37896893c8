use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bleu::{corpus_stats, BleuStats};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub score_a: f64,
    pub score_b: f64,
    /// Fraction of resamples where A beats B; ties count one half.
    pub win_fraction: f64,
    pub iterations: usize,
    pub significant: bool,
}

impl SignificanceResult {
    /// `Some(true)` if A is significantly better, `Some(false)` if B is,
    /// `None` when the difference is not significant.
    pub fn a_wins(&self) -> Option<bool> {
        self.significant.then_some(self.win_fraction >= 0.95)
    }
}

/// True when `fraction` lies in either 5% tail.
pub fn is_significant(fraction: f64) -> bool {
    fraction >= 0.95 || fraction <= 0.05
}

/// Paired bootstrap resampling of corpus BLEU. Each iteration draws
/// `n` sentence indices with replacement and rescores both systems.
pub fn paired_bootstrap<S: AsRef<str>>(
    sys_a: &[S],
    sys_b: &[S],
    refs: &[S],
    iterations: usize,
    seed: u64,
) -> Result<SignificanceResult> {
    if iterations == 0 {
        return Err(Error::Config("bootstrap needs at least one iteration".into()));
    }
    let a = corpus_stats(sys_a, refs)?;
    let b = corpus_stats(sys_b, refs)?;
    Ok(bootstrap_stats(&a, &b, iterations, seed))
}

/// The resampling loop over precomputed per-sentence statistics.
pub fn bootstrap_stats(a: &[BleuStats], b: &[BleuStats], iterations: usize, seed: u64) -> SignificanceResult {
    assert_eq!(a.len(), b.len(), "paired statistics");
    let n = a.len();
    let total = |s: &[BleuStats]| {
        let mut t = BleuStats::default();
        s.iter().for_each(|x| t += *x);
        t.score().score
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0.0;
    for _ in 0..iterations {
        let mut sa = BleuStats::default();
        let mut sb = BleuStats::default();
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            sa += a[i];
            sb += b[i];
        }
        let (x, y) = (sa.score().score, sb.score().score);
        if x > y {
            wins += 1.0;
        } else if x == y {
            wins += 0.5;
        }
    }
    let win_fraction = wins / iterations as f64;
    SignificanceResult {
        score_a: total(a),
        score_b: total(b),
        win_fraction,
        iterations,
        significant: is_significant(win_fraction),
    }
}
