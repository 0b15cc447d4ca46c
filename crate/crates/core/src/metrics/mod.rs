//! Corpus-level BLEU, chrF and TER, single reference.
//!
//! All three operate on normalized text. BLEU and TER take whitespace tokens,
//! chrF takes whole lines. Scores are on the 0-100 scale.

mod bleu;
mod chrf;
pub mod ter;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bleu::{bleu, BleuOptions};
pub use chrf::{chrf, ChrfOptions};
pub use ter::ter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricName {
    #[serde(rename = "BLEU")]
    Bleu,
    #[serde(rename = "chrF")]
    Chrf,
    #[serde(rename = "TER")]
    Ter,
}

impl MetricName {
    pub const ALL: [MetricName; 3] = [MetricName::Bleu, MetricName::Chrf, MetricName::Ter];

    /// TER is an error rate.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricName::Ter)
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricName::Bleu => "BLEU",
            MetricName::Chrf => "chrF",
            MetricName::Ter => "TER",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreComponents {
    Bleu {
        max_n: usize,
        matches: Vec<usize>,
        totals: Vec<usize>,
        precisions: Vec<f64>,
        brevity_penalty: f64,
        hyp_len: usize,
        ref_len: usize,
        smoothed: bool,
    },
    Chrf {
        beta: f64,
        max_n: usize,
        precisions: Vec<f64>,
        recalls: Vec<f64>,
        /// Orders that had at least one n-gram on either side.
        effective_orders: Vec<usize>,
    },
    Ter {
        insertions: usize,
        deletions: usize,
        substitutions: usize,
        shifts: usize,
        ref_len: usize,
    },
}

impl ScoreComponents {
    /// Recomputes the metric value from the breakdown alone.
    pub fn recompute(&self) -> f64 {
        match self {
            ScoreComponents::Bleu {
                precisions,
                totals,
                brevity_penalty,
                ..
            } => {
                let used: Vec<f64> = precisions
                    .iter()
                    .zip(totals)
                    .filter(|(_, &t)| t > 0)
                    .map(|(&p, _)| p)
                    .collect();
                if used.is_empty() || used.iter().any(|&p| p <= 0.0) {
                    return 0.0;
                }
                let log_mean = used.iter().map(|p| p.ln()).sum::<f64>() / used.len() as f64;
                100.0 * brevity_penalty * log_mean.exp()
            }
            ScoreComponents::Chrf {
                beta,
                precisions,
                recalls,
                effective_orders,
                ..
            } => {
                if effective_orders.is_empty() {
                    return 100.0;
                }
                let k = effective_orders.len() as f64;
                let p = effective_orders.iter().map(|&n| precisions[n - 1]).sum::<f64>() / k;
                let r = effective_orders.iter().map(|&n| recalls[n - 1]).sum::<f64>() / k;
                let b2 = beta * beta;
                let denom = b2 * p + r;
                if denom <= 0.0 {
                    0.0
                } else {
                    100.0 * (1.0 + b2) * p * r / denom
                }
            }
            ScoreComponents::Ter {
                insertions,
                deletions,
                substitutions,
                shifts,
                ref_len,
            } => {
                let edits = insertions + deletions + substitutions + shifts;
                100.0 * edits as f64 / *ref_len as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub name: MetricName,
    pub value: f64,
    pub components: ScoreComponents,
}

/// BLEU, chrF and TER of one hypothesis file against one reference file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub bleu: MetricScore,
    pub chrf: MetricScore,
    pub ter: MetricScore,
}

impl ScoreSet {
    pub fn get(&self, name: MetricName) -> &MetricScore {
        match name {
            MetricName::Bleu => &self.bleu,
            MetricName::Chrf => &self.chrf,
            MetricName::Ter => &self.ter,
        }
    }

    pub fn values(&self) -> [f64; 3] {
        [self.bleu.value, self.chrf.value, self.ter.value]
    }
}

/// Scores whole lines with all three metrics (whitespace tokens for BLEU/TER).
pub fn score_lines<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<ScoreSet> {
    check_lengths(hypotheses.len(), references.len())?;
    let hyp_toks: Vec<Vec<&str>> = hypotheses
        .iter()
        .map(|l| l.as_ref().split_whitespace().collect())
        .collect();
    let ref_toks: Vec<Vec<&str>> = references
        .iter()
        .map(|l| l.as_ref().split_whitespace().collect())
        .collect();
    Ok(ScoreSet {
        bleu: bleu(&hyp_toks, &ref_toks, &BleuOptions::default())?,
        chrf: chrf(hypotheses, references, &ChrfOptions::default())?,
        ter: ter(&hyp_toks, &ref_toks)?,
    })
}

pub(crate) fn check_lengths(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::LengthMismatch { hyps, refs });
    }
    if hyps == 0 {
        return Err(Error::Empty("no sentences to score".into()));
    }
    Ok(())
}
