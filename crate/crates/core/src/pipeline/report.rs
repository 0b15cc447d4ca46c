use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::FilterReport;
use crate::metrics::{MetricName, ScoreSet};
use crate::stats::{mean_sd, render_table, SignificanceReport};
use crate::{Error, Result};

pub const BASELINE: &str = "Baseline";
pub const BACK_TRANSLATION: &str = "Back-translation";
pub const TRANSFER: &str = "Transfer";
pub const SYSTEMS: [&str; 3] = [BASELINE, BACK_TRANSLATION, TRANSFER];

/// Scores of one system on one fold's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub seed: u64,
    pub system: String,
    pub direction: String,
    pub fold: usize,
    pub scores: ScoreSet,
    pub final_dev_loss: f64,
    /// Test sources whose translation failed and were scored as empty.
    pub failed_translations: usize,
}

/// Best fold of one system in one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub direction: String,
    pub system: String,
    pub seed: u64,
    pub fold: usize,
    pub bleu: f64,
    pub chrf: f64,
    pub ter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverRecord {
    pub seed: u64,
    pub direction: String,
    /// Fold of the reverse-direction baseline that produced the silver data.
    pub reverse_fold: usize,
    pub sampled: usize,
    pub skipped: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentRecord {
    pub seed: u64,
    /// Child direction this parent initializes.
    pub direction: String,
    pub parent_direction: String,
    pub dev_curve: Vec<(u64, f64)>,
}

/// Steps each child needed to reach the baseline's final dev loss; `None`
/// when it never did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub seed: u64,
    pub direction: String,
    pub fold: usize,
    pub target_dev_loss: f64,
    pub baseline_steps: Option<u64>,
    pub transfer_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub gold: FilterReport,
    pub parent_pairs: usize,
    pub mono_source_lines: usize,
    pub mono_target_lines: usize,
    pub vocab_size: usize,
    /// Sequences cut to fit `max_positions`.
    pub clipped_sequences: usize,
}

/// Everything that depends only on the config and the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBody {
    pub name: String,
    pub source_lang: String,
    pub target_lang: String,
    pub parent_lang: String,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub directions: Vec<String>,
    pub data: DataSummary,
    pub folds: Vec<FoldRecord>,
    pub summary: Vec<SummaryRow>,
    /// One family per direction and metric.
    pub significance: Vec<SignificanceReport>,
    pub back_translation: Vec<SilverRecord>,
    pub parents: Vec<ParentRecord>,
    pub convergence: Vec<ConvergenceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub data_hash: String,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub body: ReportBody,
    pub provenance: Provenance,
}

impl ReportBody {
    /// Fold records of one system and direction, ordered by seed then fold.
    pub fn records(&self, system: &str, direction: &str) -> Vec<&FoldRecord> {
        let mut v: Vec<&FoldRecord> = self
            .folds
            .iter()
            .filter(|r| r.system == system && r.direction == direction)
            .collect();
        v.sort_by_key(|r| (self.seeds.iter().position(|&s| s == r.seed), r.fold));
        v
    }

    pub fn values(&self, system: &str, direction: &str, metric: MetricName) -> Vec<f64> {
        self.records(system, direction)
            .iter()
            .map(|r| r.scores.get(metric).value)
            .collect()
    }

    pub fn summary_row(&self, system: &str, direction: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.system == system && r.direction == direction)
    }
}

/// Best of several fold records: highest BLEU, then highest chrF, then
/// lowest TER; earlier records win exact ties.
pub fn best_record<'a>(records: &[&'a FoldRecord]) -> Option<&'a FoldRecord> {
    let mut best: Option<&FoldRecord> = None;
    for &r in records {
        let better = match best {
            None => true,
            Some(b) => {
                let key = |x: &FoldRecord| (x.scores.bleu.value, x.scores.chrf.value, -x.scores.ter.value);
                key(r).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Greater)
            }
        };
        if better {
            best = Some(r);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

/// Table 1: one `System & BLEU & chrF & TER` block per direction.
pub fn summary_table(body: &ReportBody) -> String {
    let mut out = String::from("Table 1: best performing model of each system (best fold)\n");
    for dir in &body.directions {
        let _ = writeln!(out, "\n{dir}\nSystem & BLEU & chrF & TER");
        let mut origins = Vec::new();
        for sys in SYSTEMS {
            if let Some(r) = body.summary_row(sys, dir) {
                let _ = writeln!(out, "{sys} & {:.1} & {:.1} & {:.1}", r.bleu, r.chrf, r.ter);
                origins.push(format!("{sys}: seed {} fold {}", r.seed, r.fold));
            }
        }
        let _ = writeln!(out, "({})", origins.join("; "));
    }
    out
}

fn means_table(body: &ReportBody) -> String {
    let header = ["Direction", "System", "n", "BLEU", "chrF", "TER"];
    let mut rows = Vec::new();
    for dir in &body.directions {
        for sys in SYSTEMS {
            let n = body.records(sys, dir).len();
            if n == 0 {
                continue;
            }
            let cell = |m| {
                let (mean, sd) = mean_sd(&body.values(sys, dir, m));
                format!("{mean:.1} ± {sd:.1}")
            };
            rows.push([
                dir.clone(),
                sys.to_string(),
                n.to_string(),
                cell(MetricName::Bleu),
                cell(MetricName::Chrf),
                cell(MetricName::Ter),
            ]);
        }
    }
    format!("Mean ± sd over all folds and seeds\n{}", render_table(&header, &rows))
}

fn significance_tables(body: &ReportBody) -> String {
    if body.significance.iter().all(|s| s.comparisons.is_empty()) {
        return "Tables 2-3 omitted: no significance comparisons are available.\n".to_string();
    }
    let mut out = String::new();
    for (i, dir) in body.directions.iter().enumerate() {
        let families: Vec<&SignificanceReport> = body
            .significance
            .iter()
            .filter(|s| s.comparisons.first().is_some_and(|c| &c.direction == dir))
            .collect();
        let Some(first) = families.first() else { continue };
        let merged = SignificanceReport {
            alpha: first.alpha,
            m: first.m,
            comparisons: families.iter().flat_map(|f| f.comparisons.clone()).collect(),
        };
        let _ = writeln!(
            out,
            "Table {}: pairwise t-tests for {dir}, Bonferroni m = {}, alpha = {}\n{}",
            i + 2,
            merged.m,
            merged.alpha,
            merged.to_text()
        );
    }
    out
}

/// Human-readable rendering of the whole report body.
pub fn render_text(body: &ReportBody) -> String {
    format!(
        "{}\n{}\n{}",
        summary_table(body),
        means_table(body),
        significance_tables(body)
    )
}

/// Writes `report.json` and/or `report.txt` into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for f in formats {
        let (path, content) = match f {
            ReportFormat::Json => (dir.join("report.json"), serde_json::to_string_pretty(report)?),
            ReportFormat::Text => (dir.join("report.txt"), render_text(&report.body)),
        };
        fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
