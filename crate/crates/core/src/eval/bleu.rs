use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus BLEU with its components. Precisions are fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Sufficient statistics of BLEU; they add across sentences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
    }
}

impl BleuStats {
    /// Score with exponential smoothing: the k-th order with no matches gets
    /// precision `1 / (2^k * total)`. An order with no n-grams at all stops
    /// the loop and leaves its precision (and the score) at zero, and so
    /// does having no matches at any order.
    pub fn score(&self) -> BleuScore {
        let mut precisions = [0.0; MAX_ORDER];
        let mut smooth = 1.0;
        let any_match = self.matches.iter().any(|&m| m > 0);
        for n in 0..MAX_ORDER {
            if !any_match {
                break;
            }
            if self.totals[n] == 0 {
                break;
            }
            if self.matches[n] == 0 {
                smooth *= 2.0;
                precisions[n] = 1.0 / (smooth * self.totals[n] as f64);
            } else {
                precisions[n] = self.matches[n] as f64 / self.totals[n] as f64;
            }
        }
        let brevity_penalty = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        let score = if precisions.contains(&0.0) || brevity_penalty == 0.0 {
            0.0
        } else {
            let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            100.0 * brevity_penalty * mean_log.exp()
        };
        BleuScore {
            score,
            precisions,
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

struct Rules {
    symbols: Regex,
    period_comma_after: Regex,
    period_comma_before: Regex,
    dash: Regex,
}

fn rules() -> &'static Rules {
    static RULES: OnceLock<Rules> = OnceLock::new();
    RULES.get_or_init(|| Rules {
        symbols: Regex::new(r"([\x7B-\x7E\x5B-\x60\x20-\x26\x28-\x2B\x3A-\x40/])").expect("valid"),
        period_comma_after: Regex::new(r"([^0-9])([\.,])").expect("valid"),
        period_comma_before: Regex::new(r"([\.,])([^0-9])").expect("valid"),
        dash: Regex::new(r"([0-9])(-)").expect("valid"),
    })
}

/// The `13a` tokenizer of mteval-v13a as used by SacreBLEU.
pub fn tokenize_13a(line: &str) -> String {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let s = format!(" {s} ");
    let r = rules();
    let s = r.symbols.replace_all(&s, " $1 ");
    let s = r.period_comma_after.replace_all(&s, "$1 $2 ");
    let s = r.period_comma_before.replace_all(&s, " $1 $2");
    let s = r.dash.replace_all(&s, "$1 $2 ");
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Statistics of one tokenized sentence pair.
pub fn sentence_stats(hyp: &str, reference: &str) -> BleuStats {
    let h_tok = tokenize_13a(hyp);
    let r_tok = tokenize_13a(reference);
    let h: Vec<&str> = h_tok.split(' ').filter(|t| !t.is_empty()).collect();
    let r: Vec<&str> = r_tok.split(' ').filter(|t| !t.is_empty()).collect();
    let mut st = BleuStats {
        hyp_len: h.len(),
        ref_len: r.len(),
        ..BleuStats::default()
    };
    for n in 1..=MAX_ORDER {
        let hc = ngram_counts(&h, n);
        let rc = ngram_counts(&r, n);
        st.totals[n - 1] = h.len().saturating_sub(n - 1);
        st.matches[n - 1] = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
    }
    st
}

/// Per-sentence statistics for a parallel list of hypotheses and references.
pub fn corpus_stats<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<Vec<BleuStats>> {
    if hyps.len() != refs.len() {
        return Err(Error::Shape(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Empty("BLEU of an empty corpus".into()));
    }
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| sentence_stats(h.as_ref(), r.as_ref()))
        .collect())
}

/// Corpus BLEU (one reference per hypothesis, 13a, exp smoothing, no
/// effective-order adjustment).
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuScore> {
    let mut total = BleuStats::default();
    for s in corpus_stats(hyps, refs)? {
        total += s;
    }
    Ok(total.score())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_is_100() {
        let c = ["a b c d e", "the cat", "x y z w v u"];
        assert_eq!(corpus_bleu(&c, &c).unwrap().score, 100.0);
    }

    #[test]
    fn cat_example() {
        let b = corpus_bleu(&["the cat sat on the mat"], &["the cat is on the mat"]).unwrap();
        let want = [5.0 / 6.0, 3.0 / 5.0, 1.0 / 4.0, 1.0 / 6.0];
        for (p, w) in b.precisions.iter().zip(want) {
            assert!((p - w).abs() < 1e-12);
        }
        assert_eq!(b.brevity_penalty, 1.0);
        assert!((b.score - 37.991_784_282_579_62).abs() < 1e-9, "{}", b.score);
    }

    #[test]
    fn no_matches_scores_zero_without_smoothing() {
        let s = corpus_bleu(&["x y z", "u v"], &["p q r", "s t"]).unwrap();
        assert_eq!(s.score, 0.0);
        assert_eq!(s.precisions, [0.0; MAX_ORDER]);
        assert_eq!(s.brevity_penalty, 1.0);
    }

    #[test]
    fn short_hypothesis_is_penalized() {
        let b = corpus_bleu(&["a"], &["a b c d e f g h i j"]).unwrap();
        assert!((b.brevity_penalty - (-9f64).exp()).abs() < 1e-15);
        assert!(b.score < 0.05);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let none: [&str; 0] = [];
        assert!(corpus_bleu(&none, &none).is_err());
        assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
        assert_eq!(corpus_bleu(&[""], &["a b"]).unwrap().score, 0.0);
    }

    #[test]
    fn tokenizer_13a() {
        assert_eq!(tokenize_13a("Hello, world."), "Hello , world .");
        assert_eq!(tokenize_13a("3.14 and 1,000"), "3.14 and 1,000");
        assert_eq!(tokenize_13a("2-3 (ok)!"), "2 - 3 ( ok ) !");
        assert_eq!(tokenize_13a("a &amp; b &lt;c&gt;"), "a & b < c >");
        assert_eq!(tokenize_13a("x<skipped>y"), "xy");
        assert_eq!(tokenize_13a("it's \"fine\""), "it's \" fine \"");
        assert_eq!(tokenize_13a("  A  B\tC "), "A B C");
    }
}
