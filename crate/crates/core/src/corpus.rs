//! Parallel and monolingual corpora: loading, normalization, misalignment
//! filtering, truncation and cross-validation splits.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Version of [`NOISE_PATTERNS`]; bump when the list changes.
pub const NOISE_PATTERNS_VERSION: u32 = 1;

/// Patterns removed by [`normalize_line`], applied in order.
///
/// 1. `<ref>…</ref>` footnotes, including their content
/// 2. HTML/XML comments
/// 3. any remaining markup tag (content between tags is kept)
/// 4. `{{…}}` wiki templates
/// 5. `[…]` bracketed editorial notes such as `[1]` or `[citation needed]`
pub const NOISE_PATTERNS: [&str; 5] = [
    r"(?is)<ref\b[^>]*?(?:/>|>.*?</ref\s*>)",
    r"(?s)<!--.*?-->",
    r"<[^<>]*>",
    r"\{\{[^{}]*\}\}",
    r"\[[^\[\]]*\]",
];

fn noise_regexes() -> &'static [Regex] {
    static RE: OnceLock<Vec<Regex>> = OnceLock::new();
    RE.get_or_init(|| {
        NOISE_PATTERNS
            .iter()
            .map(|p| Regex::new(p).expect("noise pattern"))
            .collect()
    })
}

fn normalize_once(raw: &str) -> String {
    let mut text: String = raw.nfc().collect();
    for re in noise_regexes() {
        text = re.replace_all(&text, " ").into_owned();
    }
    let lowered: String = text.to_lowercase().nfc().collect();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for c in lowered.chars() {
        if c.is_whitespace() {
            pending_space = true;
        } else if c.is_control() || is_format_char(c) {
            continue;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

fn is_format_char(c: char) -> bool {
    matches!(c, '\u{200b}'..='\u{200f}' | '\u{202a}'..='\u{202e}' | '\u{2060}'..='\u{2064}' | '\u{feff}' | '\u{ad}')
}

/// Canonical composition, noise removal, lowercasing, control-character
/// removal and whitespace collapsing. May return an empty string.
pub fn normalize_line(raw: &str) -> String {
    let mut current = normalize_once(raw);
    // removing one tag can expose another (`<<a>b>`); iterate to a fixpoint
    for _ in 0..8 {
        let next = normalize_once(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine: Option<f64>,
}

impl SentencePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Result<Self> {
        let source = source.into();
        let target = target.into();
        for side in [&source, &target] {
            if side.trim().is_empty() {
                return Err(Error::InvalidArgument("empty side in sentence pair".into()));
            }
            if side.contains(['\n', '\r']) {
                return Err(Error::InvalidArgument(
                    "line break inside sentence pair".into(),
                ));
            }
        }
        Ok(Self {
            source,
            target,
            cosine: None,
        })
    }

    pub fn reversed(&self) -> Self {
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
            cosine: self.cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub source_lang: String,
    pub target_lang: String,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(source_lang: impl Into<String>, target_lang: impl Into<String>) -> Self {
        Self {
            source_lang: source_lang.into(),
            target_lang: target_lang.into(),
            pairs: Vec::new(),
        }
    }

    pub fn from_pairs(
        source_lang: impl Into<String>,
        target_lang: impl Into<String>,
        pairs: Vec<SentencePair>,
    ) -> Self {
        Self {
            source_lang: source_lang.into(),
            target_lang: target_lang.into(),
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Same pairs with source and target swapped.
    pub fn reversed(&self) -> Self {
        Self {
            source_lang: self.target_lang.clone(),
            target_lang: self.source_lang.clone(),
            pairs: self.pairs.iter().map(SentencePair::reversed).collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            source_lang: self.source_lang.clone(),
            target_lang: self.target_lang.clone(),
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
        }
    }

    pub fn sources(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.source.as_str()).collect()
    }

    pub fn targets(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.target.as_str()).collect()
    }

    /// Reads two line-aligned files. Every line must already be a valid,
    /// non-empty sentence.
    pub fn read(
        source_path: &Path,
        target_path: &Path,
        source_lang: &str,
        target_lang: &str,
    ) -> Result<Self> {
        let raw = read_parallel_raw(source_path, target_path)?;
        let pairs = raw
            .into_iter()
            .enumerate()
            .map(|(i, (s, t))| {
                SentencePair::new(s, t).map_err(|e| {
                    Error::InvalidArgument(format!(
                        "{} line {}: {e}",
                        source_path.display(),
                        i + 1
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_pairs(source_lang, target_lang, pairs))
    }

    pub fn write(&self, source_path: &Path, target_path: &Path) -> Result<()> {
        write_lines(source_path, self.pairs.iter().map(|p| p.source.as_str()))?;
        write_lines(target_path, self.pairs.iter().map(|p| p.target.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonolingualCorpus {
    pub lang: String,
    pub lines: Vec<String>,
}

impl MonolingualCorpus {
    /// Drops lines that are blank.
    pub fn new(lang: impl Into<String>, lines: Vec<String>) -> Self {
        Self {
            lang: lang.into(),
            lines: lines.into_iter().filter(|l| !l.trim().is_empty()).collect(),
        }
    }

    pub fn read(path: &Path, lang: &str) -> Result<Self> {
        Ok(Self::new(lang, read_lines(path)?))
    }

    pub fn normalized(&self) -> Self {
        Self::new(
            self.lang.clone(),
            self.lines.iter().map(|l| normalize_line(l)).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .collect()
}

pub fn write_lines<'a>(path: &Path, lines: impl IntoIterator<Item = &'a str>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads two line-aligned files without validating line contents.
pub fn read_parallel_raw(source_path: &Path, target_path: &Path) -> Result<Vec<(String, String)>> {
    let src = read_lines(source_path)?;
    let tgt = read_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} has {} lines but {} has {}",
            source_path.display(),
            src.len(),
            target_path.display(),
            tgt.len()
        )));
    }
    Ok(src.into_iter().zip(tgt).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub cosine_threshold: f64,
    /// Inclusive range of character n-gram orders.
    pub ngram_min: usize,
    pub ngram_max: usize,
    /// Whitespace tokens per side after truncation.
    pub truncation_limit: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            cosine_threshold: 0.48,
            ngram_min: 1,
            ngram_max: 3,
            truncation_limit: 90,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cosine_threshold) {
            return Err(Error::InvalidConfig(format!(
                "cosine_threshold {} outside [0, 1]",
                self.cosine_threshold
            )));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(Error::InvalidConfig(format!(
                "empty n-gram range {}..={}",
                self.ngram_min, self.ngram_max
            )));
        }
        if self.truncation_limit == 0 {
            return Err(Error::InvalidConfig("truncation_limit must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cap on [`FilterReport::removed_examples`].
pub const MAX_REMOVED_EXAMPLES: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    /// Pairs dropped before filtering because a side normalized to nothing.
    pub dropped_empty: usize,
    pub input_count: usize,
    pub kept_count: usize,
    pub removed_misaligned: usize,
    pub truncated_count: usize,
    pub removed_examples: Vec<SentencePair>,
}

fn char_ngram_counts(text: &str, min_n: usize, max_n: usize) -> HashMap<&str, u64> {
    let bounds: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect();
    let chars = bounds.len() - 1;
    let mut counts = HashMap::new();
    for n in min_n..=max_n {
        if n > chars {
            break;
        }
        for start in 0..=(chars - n) {
            *counts.entry(&text[bounds[start]..bounds[start + n]]).or_insert(0) += 1;
        }
    }
    counts
}

/// Cosine similarity of character n-gram count vectors (whitespace counts as
/// a character). An all-zero vector on either side gives 0.
pub fn char_ngram_cosine(src: &str, tgt: &str, min_n: usize, max_n: usize) -> f64 {
    let a = char_ngram_counts(src, min_n, max_n);
    let b = char_ngram_counts(tgt, min_n, max_n);
    let (small, large) = if a.len() <= b.len() { (&a, &b) } else { (&b, &a) };
    let dot: u128 = small
        .iter()
        .map(|(g, &c)| c as u128 * large.get(g).copied().unwrap_or(0) as u128)
        .sum();
    let na: u128 = a.values().map(|&c| c as u128 * c as u128).sum();
    let nb: u128 = b.values().map(|&c| c as u128 * c as u128).sum();
    if na == 0 || nb == 0 {
        return 0.0;
    }
    (dot as f64 / ((na * nb) as f64).sqrt()).min(1.0)
}

/// Keeps pairs whose cosine reaches the threshold; order is preserved.
pub fn filter_misaligned(
    corpus: &ParallelCorpus,
    cfg: &FilterConfig,
) -> (ParallelCorpus, FilterReport) {
    let mut report = FilterReport {
        input_count: corpus.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(corpus.len());
    for pair in &corpus.pairs {
        let score = char_ngram_cosine(&pair.source, &pair.target, cfg.ngram_min, cfg.ngram_max);
        let mut pair = pair.clone();
        pair.cosine = Some(score);
        if score >= cfg.cosine_threshold {
            kept.push(pair);
        } else {
            report.removed_misaligned += 1;
            if report.removed_examples.len() < MAX_REMOVED_EXAMPLES {
                report.removed_examples.push(pair);
            }
        }
    }
    report.kept_count = kept.len();
    (
        ParallelCorpus::from_pairs(corpus.source_lang.clone(), corpus.target_lang.clone(), kept),
        report,
    )
}

fn truncate_side(text: &str, limit: usize) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() <= limit {
        return text.to_string();
    }
    let limit = limit.max(1);
    let cut = tokens[..limit]
        .iter()
        .rposition(|t| t.ends_with(['.', '!', '?']))
        .map_or(limit, |i| i + 1);
    tokens[..cut].join(" ")
}

/// Caps each side at `limit` whitespace tokens, cutting after the last
/// sentence-final `.`, `!` or `?` within the limit, else exactly at it.
pub fn smart_truncate(pair: &SentencePair, limit: usize) -> SentencePair {
    SentencePair {
        source: truncate_side(&pair.source, limit),
        target: truncate_side(&pair.target, limit),
        cosine: pair.cosine,
    }
}

/// Normalize, drop empty pairs, filter misaligned pairs, truncate.
pub fn prepare_parallel(
    raw: &[(String, String)],
    source_lang: &str,
    target_lang: &str,
    cfg: &FilterConfig,
) -> Result<(ParallelCorpus, FilterReport)> {
    cfg.validate()?;
    let mut dropped_empty = 0;
    let mut pairs = Vec::with_capacity(raw.len());
    for (s, t) in raw {
        let (s, t) = (normalize_line(s), normalize_line(t));
        if s.is_empty() || t.is_empty() {
            dropped_empty += 1;
            continue;
        }
        pairs.push(SentencePair::new(s, t)?);
    }
    let corpus = ParallelCorpus::from_pairs(source_lang, target_lang, pairs);
    let (mut kept, mut report) = filter_misaligned(&corpus, cfg);
    report.dropped_empty = dropped_empty;
    for pair in &mut kept.pairs {
        let cut = smart_truncate(pair, cfg.truncation_limit);
        if cut != *pair {
            report.truncated_count += 1;
            *pair = cut;
        }
    }
    Ok((kept, report))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    /// Fold index of every pair, in corpus order.
    pub assignments: Vec<usize>,
}

impl FoldSplit {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    /// Concatenation of every other fold, in fold order.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.k)
            .filter(|&f| f != fold)
            .flat_map(|f| self.test_indices(f))
            .collect()
    }
}

/// Shuffles pair indices with the seed and cuts them into `k` folds. Fold
/// sizes differ by at most one; the larger folds are the last ones.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::InfeasibleSplit(format!(
            "{k} folds requested for {n} pairs"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut assignments = vec![0; n];
    let mut pos = 0;
    for fold in 0..k {
        let size = base + usize::from(fold >= k - extra);
        for &idx in &order[pos..pos + size] {
            assignments[idx] = fold;
        }
        pos += size;
    }
    Ok(FoldSplit {
        k,
        seed,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_line("  Sie hat\tHEUTE  "), "sie hat heute");
        let s = "sie hat heute abend im restaurant fisch bestellt.";
        assert_eq!(normalize_line(s), s);
        assert_eq!(normalize_line("<ref>noise</ref>fisch"), "fisch");
    }

    #[test]
    fn normalize_noise_patterns() {
        assert_eq!(normalize_line("a<!-- x -->b"), "a b");
        assert_eq!(normalize_line("Wort [1] und {{lang|de}} <b>fett</b>"), "wort und fett");
        assert_eq!(normalize_line("a\u{0}b\u{200b}c"), "abc");
        // decomposed umlaut becomes precomposed
        assert_eq!(normalize_line("Bestöid"), "bestöid");
        assert_eq!(normalize_line("<<a>b>"), "");
    }

    #[test]
    fn cosine_edges() {
        assert_eq!(char_ngram_cosine("heid obend", "heid obend", 1, 3), 1.0);
        assert_eq!(char_ngram_cosine("aaaa", "bbbb", 1, 3), 0.0);
        assert_eq!(char_ngram_cosine("", "abc", 1, 3), 0.0);
    }

    #[test]
    fn filter_threshold_cases() {
        let pairs = vec![
            SentencePair::new("heid obend", "heute abend").unwrap(),
            SentencePair::new("aaaa", "zzzz").unwrap(),
            SentencePair::new("fisch", "fisch").unwrap(),
        ];
        let c = ParallelCorpus::from_pairs("bar", "de", pairs);
        let (kept, rep) = filter_misaligned(&c, &FilterConfig::default());
        assert_eq!(kept.len(), 2);
        assert_eq!(rep.removed_misaligned, 1);
        assert_eq!(rep.kept_count + rep.removed_misaligned, rep.input_count);

        let all = FilterConfig {
            cosine_threshold: 0.0,
            ..Default::default()
        };
        assert_eq!(filter_misaligned(&c, &all).0.len(), 3);

        let strict = FilterConfig {
            cosine_threshold: 1.0,
            ..Default::default()
        };
        let (kept, _) = filter_misaligned(&c, &strict);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.pairs[0].source, "fisch");
    }

    #[test]
    fn filter_empty_corpus() {
        let c = ParallelCorpus::new("a", "b");
        let (kept, rep) = filter_misaligned(&c, &FilterConfig::default());
        assert!(kept.is_empty());
        assert_eq!(rep, FilterReport::default());
    }

    fn words(n: usize, boundary_after: Option<usize>) -> String {
        (1..=n)
            .map(|i| {
                if Some(i) == boundary_after {
                    format!("w{i}.")
                } else {
                    format!("w{i}")
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn truncation_rules() {
        let short = SentencePair::new(words(10, None), words(10, None)).unwrap();
        assert_eq!(smart_truncate(&short, 90), short);

        let p = SentencePair::new(words(100, Some(80)), words(100, None)).unwrap();
        let t = smart_truncate(&p, 90);
        assert_eq!(t.source.split_whitespace().count(), 80);
        assert!(t.source.ends_with("w80."));
        assert_eq!(t.target.split_whitespace().count(), 90);
    }

    #[test]
    fn kfold_sizes() {
        let sizes = |n, k| kfold_split(n, k, 7).unwrap().fold_sizes();
        assert_eq!(sizes(10, 5), vec![2, 2, 2, 2, 2]);
        assert_eq!(sizes(11, 5), vec![2, 2, 2, 2, 3]);
        assert!(matches!(kfold_split(3, 5, 0), Err(Error::InfeasibleSplit(_))));
        assert!(kfold_split(10, 1, 0).is_err());
    }

    #[test]
    fn prepare_drops_empty_and_counts() {
        let raw = vec![
            ("<b></b>".to_string(), "x".to_string()),
            ("Fisch!".to_string(), "fisch!".to_string()),
        ];
        let (c, rep) = prepare_parallel(&raw, "a", "b", &FilterConfig::default()).unwrap();
        assert_eq!(rep.dropped_empty, 1);
        assert_eq!(c.len(), 1);
        assert_eq!(c.pairs[0].source, "fisch!");
    }
}
