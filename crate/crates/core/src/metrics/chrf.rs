use std::collections::HashMap;

use super::{check_lengths, MetricName, MetricScore, ScoreComponents};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChrfOptions {
    pub max_n: usize,
    pub beta: f64,
}

impl Default for ChrfOptions {
    fn default() -> Self {
        Self { max_n: 6, beta: 2.0 }
    }
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus chrF.
///
/// Whitespace is removed before extracting character n-grams. Hypothesis,
/// reference and match counts are pooled over the corpus per order; precision
/// and recall are then averaged over the orders that occur on either side and
/// combined into F-beta.
pub fn chrf<S: AsRef<str>>(
    hypotheses: &[S],
    references: &[S],
    opts: &ChrfOptions,
) -> Result<MetricScore> {
    check_lengths(hypotheses.len(), references.len())?;
    let max_n = opts.max_n.max(1);
    let mut hyp_tot = vec![0usize; max_n];
    let mut ref_tot = vec![0usize; max_n];
    let mut matched = vec![0usize; max_n];

    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<char> = h.as_ref().chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = r.as_ref().chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=max_n {
            let hc = char_ngrams(&h, n);
            let rc = char_ngrams(&r, n);
            hyp_tot[n - 1] += hc.values().sum::<usize>();
            ref_tot[n - 1] += rc.values().sum::<usize>();
            matched[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precisions: Vec<f64> = (0..max_n).map(|i| ratio(matched[i], hyp_tot[i])).collect();
    let recalls: Vec<f64> = (0..max_n).map(|i| ratio(matched[i], ref_tot[i])).collect();
    let effective_orders: Vec<usize> = (1..=max_n)
        .filter(|&n| hyp_tot[n - 1] + ref_tot[n - 1] > 0)
        .collect();

    let components = ScoreComponents::Chrf {
        beta: opts.beta,
        max_n,
        precisions,
        recalls,
        effective_orders,
    };
    Ok(MetricScore {
        name: MetricName::Chrf,
        value: components.recompute(),
        components,
    })
}
