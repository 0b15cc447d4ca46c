use std::collections::HashMap;

use super::{check_lengths, MetricName, MetricScore, ScoreComponents};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuOptions {
    pub max_n: usize,
    /// Exponential smoothing of zero-match orders. Off by default.
    pub smooth: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        Self {
            max_n: 4,
            smooth: false,
        }
    }
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with clipped n-gram precisions pooled over all sentences.
///
/// Orders for which the hypothesis side has no n-grams at all (every
/// hypothesis shorter than `n`) are left out of the geometric mean. An empty
/// hypothesis counts as length 0.
pub fn bleu<S: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<S>],
    opts: &BleuOptions,
) -> Result<MetricScore> {
    check_lengths(hypotheses.len(), references.len())?;
    let max_n = opts.max_n.max(1);
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.iter().map(AsRef::as_ref).collect();
        let r: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    let mut precisions = vec![0.0; max_n];
    let mut smooth_denominator = 1.0;
    for n in 0..max_n {
        if totals[n] == 0 {
            continue;
        }
        precisions[n] = if matches[n] == 0 && opts.smooth {
            smooth_denominator *= 2.0;
            1.0 / (smooth_denominator * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }

    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };

    let components = ScoreComponents::Bleu {
        max_n,
        matches,
        totals,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
        smoothed: opts.smooth,
    };
    Ok(MetricScore {
        name: MetricName::Bleu,
        value: components.recompute(),
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&'static str]) -> Vec<Vec<&'static str>> {
        lines.iter().map(|l| l.split_whitespace().collect()).collect()
    }

    #[test]
    fn perfect_match_is_100() {
        let c = corpus(&["a b c d e", "x y z w"]);
        let s = bleu(&c, &c, &BleuOptions::default()).unwrap();
        assert!((s.value - 100.0).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_case() {
        let s = bleu(
            &corpus(&["a b c d"]),
            &corpus(&["a b c d e"]),
            &BleuOptions::default(),
        )
        .unwrap();
        let expected = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
        assert!((s.value - expected).abs() < 1e-9);
        assert!((s.value - 77.880).abs() < 1e-3);
    }

    #[test]
    fn no_overlap_is_zero() {
        let s = bleu(&corpus(&["a b"]), &corpus(&["c d"]), &BleuOptions::default()).unwrap();
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn smoothing_rescues_missing_fourgrams() {
        let h = corpus(&["a b c x d"]);
        let r = corpus(&["a b c y d"]);
        let plain = bleu(&h, &r, &BleuOptions::default()).unwrap();
        let smooth = bleu(&h, &r, &BleuOptions { smooth: true, ..Default::default() }).unwrap();
        assert_eq!(plain.value, 0.0);
        assert!(smooth.value > 0.0);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(bleu(&corpus(&["a"]), &corpus(&["a", "b"]), &BleuOptions::default()).is_err());
    }
}
