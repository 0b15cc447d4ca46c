//! Fold score aggregation, two-tailed t-tests and Bonferroni correction.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricName;

/// Per-fold values of one metric for one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub system: String,
    pub metric: MetricName,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub sd: f64,
}

impl FoldScores {
    pub fn new(system: impl Into<String>, metric: MetricName, values: Vec<f64>) -> Self {
        let (mean, sd) = mean_sd(&values);
        Self {
            system: system.into(),
            metric,
            values,
            mean,
            sd,
        }
    }
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestVariant {
    #[default]
    Paired,
    Welch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    /// Infinite for degenerate inputs; JSON carries it as `"inf"` or `"-inf"`.
    #[serde(with = "extended_f64")]
    pub t: f64,
    pub df: f64,
    /// Two-tailed p-value.
    pub p: f64,
    pub variant: TTestVariant,
    /// Zero spread with a nonzero mean difference; `t` is infinite and `p` is 0.
    pub degenerate: bool,
}

impl TTestResult {
    fn from_parts(num: f64, den: f64, df: f64, variant: TTestVariant) -> Self {
        if den == 0.0 {
            if num == 0.0 {
                return Self {
                    t: 0.0,
                    df,
                    p: 1.0,
                    variant,
                    degenerate: false,
                };
            }
            return Self {
                t: num.signum() * f64::INFINITY,
                df,
                p: 0.0,
                variant,
                degenerate: true,
            };
        }
        let t = num / den;
        Self {
            t,
            df,
            p: student_t_two_tailed(t, df),
            variant,
            degenerate: false,
        }
    }
}

mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Two-tailed t-test of `a` against `b`.
///
/// The paired statistic is evaluated as `sum(d) / sqrt((n*S2 - S1^2) / (n - 1))`
/// with the spread sums taken on `d - d[0]`, which keeps it exact on small
/// integer data.
pub fn ttest(a: &[f64], b: &[f64], variant: TTestVariant) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "t-test needs at least two values per group".into(),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("t-test input is not finite".into()));
    }
    match variant {
        TTestVariant::Paired => {
            if a.len() != b.len() {
                return Err(Error::InvalidArgument(format!(
                    "paired t-test needs equal group sizes, got {} and {}",
                    a.len(),
                    b.len()
                )));
            }
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let n = d.len() as f64;
            let sum: f64 = d.iter().sum();
            let shift = d[0];
            let s1: f64 = d.iter().map(|v| v - shift).sum();
            let s2: f64 = d.iter().map(|v| (v - shift) * (v - shift)).sum();
            let spread = ((n * s2 - s1 * s1) / (n - 1.0)).max(0.0);
            Ok(TTestResult::from_parts(sum, spread.sqrt(), n - 1.0, variant))
        }
        TTestVariant::Welch => {
            let (ma, sa) = mean_sd(a);
            let (mb, sb) = mean_sd(b);
            let (na, nb) = (a.len() as f64, b.len() as f64);
            let va = sa * sa / na;
            let vb = sb * sb / nb;
            let se2 = va + vb;
            let df = if se2 == 0.0 {
                na + nb - 2.0
            } else {
                se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0))
            };
            Ok(TTestResult::from_parts(ma - mb, se2.sqrt(), df, variant))
        }
    }
}

/// Two-tailed tail probability of Student's t with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, 9 terms), about 15 significant digits.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// One Bonferroni-adjusted p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adjusted {
    pub raw_p: f64,
    pub corrected_p: f64,
    pub reject: bool,
}

/// `corrected = min(1, p * m)`, `reject = corrected < alpha`, with `m` the
/// family size.
pub fn bonferroni(raw_p: &[f64], alpha: f64) -> Vec<Adjusted> {
    let m = raw_p.len() as f64;
    raw_p
        .iter()
        .map(|&p| {
            let corrected_p = (p * m).min(1.0);
            Adjusted {
                raw_p: p,
                corrected_p,
                reject: corrected_p < alpha,
            }
        })
        .collect()
}

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Translation direction the family belongs to, e.g. `bar-de`.
    pub direction: String,
    pub metric: MetricName,
    pub group1: String,
    pub group2: String,
    pub test: TTestResult,
    pub corrected_p: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub alpha: f64,
    /// Family size used for the correction.
    pub m: usize,
    pub comparisons: Vec<Comparison>,
}

impl SignificanceReport {
    /// Runs every pairwise test within one family (one metric, one direction)
    /// and corrects over that family.
    pub fn for_family(
        direction: &str,
        metric: MetricName,
        systems: &[(&str, &[f64])],
        variant: TTestVariant,
        alpha: f64,
    ) -> Result<Self> {
        let mut tests = Vec::new();
        for i in 0..systems.len() {
            for j in i + 1..systems.len() {
                let t = ttest(systems[i].1, systems[j].1, variant)?;
                tests.push((systems[i].0, systems[j].0, t));
            }
        }
        let raw: Vec<f64> = tests.iter().map(|(_, _, t)| t.p).collect();
        let adjusted = bonferroni(&raw, alpha);
        let comparisons = tests
            .into_iter()
            .zip(adjusted)
            .map(|((g1, g2, test), adj)| Comparison {
                direction: direction.to_string(),
                metric,
                group1: g1.to_string(),
                group2: g2.to_string(),
                test,
                corrected_p: adj.corrected_p,
                reject: adj.reject,
            })
            .collect::<Vec<_>>();
        Ok(Self {
            alpha,
            m: comparisons.len(),
            comparisons,
        })
    }

    /// Aligned text table: Metric, Group 1, Group 2, t, p, p (corr.), Reject.
    pub fn to_text(&self) -> String {
        let header = ["Metric", "Group 1", "Group 2", "t", "p", "p (corr.)", "Reject H0"];
        let rows: Vec<[String; 7]> = self
            .comparisons
            .iter()
            .map(|c| {
                [
                    c.metric.to_string(),
                    c.group1.clone(),
                    c.group2.clone(),
                    format!("{:.2}", c.test.t),
                    format!("{:.4}", c.test.p),
                    format!("{:.4}", c.corrected_p),
                    if c.reject { "True" } else { "False" }.to_string(),
                ]
            })
            .collect();
        render_table(&header, &rows)
    }
}

pub(crate) fn render_table<const N: usize>(header: &[&str; N], rows: &[[String; N]]) -> String {
    let mut widths = header.map(str::len);
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for row in rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_t_survives_json() {
        let r = ttest(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0], TTestVariant::Paired).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<TTestResult>(&json).unwrap(), r);
    }

    #[test]
    fn identical_groups() {
        let a = [3.0, 1.5, 2.0, 9.0];
        for v in [TTestVariant::Paired, TTestVariant::Welch] {
            let r = ttest(&a, &a, v).unwrap();
            assert_eq!(r.t, 0.0);
            assert_eq!(r.p, 1.0);
        }
    }

    #[test]
    fn paired_small_integers_exact() {
        let r = ttest(&[1.0, 2.0, 3.0], &[1.0, 3.0, 4.0], TTestVariant::Paired).unwrap();
        assert_eq!(r.t, -2.0);
        assert_eq!(r.df, 2.0);
        // closed form for two degrees of freedom
        let expected = 1.0 - 2.0 / 6.0f64.sqrt();
        assert!((r.p - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_nonzero_difference_is_degenerate() {
        let r = ttest(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0], TTestVariant::Paired).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 0.0);
        assert!(r.t.is_infinite() && r.t > 0.0);
    }

    #[test]
    fn welch_matches_hand_computation() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0];
        let r = ttest(&a, &b, TTestVariant::Welch).unwrap();
        // va = 1.6667/4, vb = 4/3
        let va = (5.0 / 3.0) / 4.0;
        let vb: f64 = 4.0 / 3.0;
        let t = (2.5 - 4.0) / (va + vb).sqrt();
        let df = (va + vb) * (va + vb) / (va * va / 3.0 + vb * vb / 2.0);
        assert!((r.t - t).abs() < 1e-12);
        assert!((r.df - df).abs() < 1e-12);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn incomplete_beta_symmetry() {
        for &(x, a, b) in &[(0.3, 2.0, 5.0), (0.9, 0.5, 0.5), (0.01, 10.0, 0.5)] {
            let l = regularized_incomplete_beta(x, a, b);
            let r = 1.0 - regularized_incomplete_beta(1.0 - x, b, a);
            assert!((l - r).abs() < 1e-13);
        }
    }

    #[test]
    fn bonferroni_caps_at_one() {
        let out = bonferroni(&[0.5, 0.0012, 0.0214], 0.05);
        assert_eq!(out[0].corrected_p, 1.0);
        assert!(out[1].reject);
        assert!(!out[2].reject);
    }

    #[test]
    fn unequal_paired_lengths_rejected() {
        assert!(ttest(&[1.0, 2.0], &[1.0, 2.0, 3.0], TTestVariant::Paired).is_err());
        assert!(ttest(&[1.0], &[1.0], TTestVariant::Welch).is_err());
    }

    #[test]
    fn fold_scores_mean_sd() {
        let f = FoldScores::new("baseline", MetricName::Bleu, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.mean, 2.5);
        assert!((f.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
