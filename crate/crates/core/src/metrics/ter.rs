//! Translation Edit Rate.
//!
//! Word-level edit distance (insert, delete, substitute, each cost 1) plus
//! block shifts (cost 1 each). Shifts are found in two phases:
//!
//! 1. Greedy: at every round the candidate shift with the largest reduction
//!    of the remaining edit distance is applied, until no candidate reduces
//!    it. A candidate moves a contiguous hypothesis block that occurs verbatim
//!    somewhere in the reference. Ties are broken by longer block, then
//!    leftmost block start, then leftmost target.
//! 2. Refinement: a breadth-first search over arbitrary block moves, bounded
//!    by the greedy cost and pruned with the bag-of-words lower bound
//!    `max(|hyp|, |ref|) - |common multiset|`. Within [`EXACT_SEARCH_BUDGET`]
//!    candidate evaluations the result is the true minimum of shifts + edits;
//!    past the budget the best arrangement found so far is kept.
//!
//! Greedy alone misses cases where the best move shifts a block that does
//! not occur in the reference (hyp `0 0 1 1`, ref `1 2 2 0`).

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::{check_lengths, MetricName, MetricScore, ScoreComponents};
use crate::error::{Error, Result};

/// Blocks longer than this are never shifted.
pub const MAX_SHIFT_SIZE: usize = 10;
/// Shift targets further than this from the block start are never tried.
pub const MAX_SHIFT_DISTANCE: usize = 50;
/// Candidate arrangements scored by the refinement search before it gives up
/// on optimality.
pub const EXACT_SEARCH_BUDGET: usize = 20_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub shifts: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.insertions + self.deletions + self.substitutions + self.shifts
    }

    fn add(&mut self, other: &EditCounts) {
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.substitutions += other.substitutions;
        self.shifts += other.shifts;
    }
}

/// Plain word-level Levenshtein distance.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let m = reference.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for j in 0..m {
            let sub = prev[j] + usize::from(*h != reference[j]);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Edit distance with the operations broken down by type.
fn edit_operations<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (hyp.len(), reference.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for (j, v) in dp.iter_mut().enumerate().take(w) {
        *v = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(hyp[i - 1] != reference[j - 1]);
            if here == dp[(i - 1) * w + j - 1] + mismatch {
                counts.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == dp[(i - 1) * w + j] + 1 {
            // hypothesis word with no reference counterpart
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

fn contains_block<T: PartialEq>(reference: &[T], block: &[T]) -> bool {
    reference.windows(block.len()).any(|w| w == block)
}

/// Moves `hyp[start..start + len]` so that it begins at index `dest` of the
/// sequence obtained after removing the block.
fn apply_shift<T: Clone>(hyp: &[T], start: usize, len: usize, dest: usize) -> Vec<T> {
    let mut rest: Vec<T> = Vec::with_capacity(hyp.len());
    rest.extend_from_slice(&hyp[..start]);
    rest.extend_from_slice(&hyp[start + len..]);
    let mut out = Vec::with_capacity(hyp.len());
    out.extend_from_slice(&rest[..dest]);
    out.extend_from_slice(&hyp[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// Result of aligning one hypothesis against one reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TerAlignment<T> {
    pub counts: EditCounts,
    pub shifted_hypothesis: Vec<T>,
}

/// Shift search followed by the final edit-distance breakdown.
pub fn align<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T]) -> TerAlignment<T> {
    let (greedy, greedy_shifts) = greedy_shifts(hyp, reference);
    let (current, shifts) = refine(hyp, reference, greedy, greedy_shifts);
    let mut counts = edit_operations(&current, reference);
    counts.shifts = shifts;
    TerAlignment {
        counts,
        shifted_hypothesis: current,
    }
}

/// Lower bound on edits for any rearrangement of `hyp`.
fn bag_lower_bound<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> usize {
    let mut bag: HashMap<&T, isize> = HashMap::new();
    for t in hyp {
        *bag.entry(t).or_insert(0) += 1;
    }
    let mut common = 0;
    for t in reference {
        if let Some(c) = bag.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    hyp.len().max(reference.len()) - common
}

fn refine<T: Eq + Hash + Clone>(
    hyp: &[T],
    reference: &[T],
    start: Vec<T>,
    start_shifts: usize,
) -> (Vec<T>, usize) {
    let lower = bag_lower_bound(hyp, reference);
    let mut best_cost = start_shifts + edit_distance(&start, reference);
    let mut best = (start, start_shifts);
    if best_cost <= lower {
        return best;
    }
    let n = hyp.len();
    let mut seen: HashSet<Vec<T>> = HashSet::new();
    seen.insert(hyp.to_vec());
    let mut frontier = vec![hyp.to_vec()];
    let mut evaluated = 0usize;
    let mut depth = 0usize;
    while !frontier.is_empty() && depth + 1 + lower < best_cost {
        let mut next = Vec::new();
        for state in &frontier {
            for s in 0..n {
                for len in 1..=(n - s) {
                    for dest in 0..=(n - len) {
                        if dest == s {
                            continue;
                        }
                        let moved = apply_shift(state, s, len, dest);
                        if seen.contains(&moved) {
                            continue;
                        }
                        if evaluated >= EXACT_SEARCH_BUDGET {
                            return best;
                        }
                        evaluated += 1;
                        let cost = depth + 1 + edit_distance(&moved, reference);
                        if cost < best_cost {
                            best_cost = cost;
                            best = (moved.clone(), depth + 1);
                        }
                        seen.insert(moved.clone());
                        next.push(moved);
                    }
                }
            }
            if best_cost <= lower + depth + 1 {
                return best;
            }
        }
        frontier = next;
        depth += 1;
    }
    best
}

/// Restricted greedy phase; returns the shifted hypothesis and shift count.
fn greedy_shifts<T: PartialEq + Clone>(hyp: &[T], reference: &[T]) -> (Vec<T>, usize) {
    let mut current = hyp.to_vec();
    let mut current_cost = edit_distance(&current, reference);
    let mut shifts = 0;
    while current_cost > 0 {
        // (gain, len, start, dest)
        let mut best: Option<(usize, usize, usize, usize)> = None;
        let n = current.len();
        for start in 0..n {
            for len in 1..=MAX_SHIFT_SIZE.min(n - start) {
                if !contains_block(reference, &current[start..start + len]) {
                    // longer blocks starting here cannot match either
                    break;
                }
                let rest_len = n - len;
                for dest in 0..=rest_len {
                    if dest == start || dest.abs_diff(start) > MAX_SHIFT_DISTANCE {
                        continue;
                    }
                    let candidate = apply_shift(&current, start, len, dest);
                    let cost = edit_distance(&candidate, reference);
                    if cost >= current_cost {
                        continue;
                    }
                    let gain = current_cost - cost;
                    let better = match best {
                        None => true,
                        Some((bg, bl, bs, bd)) => {
                            (gain, len, std::cmp::Reverse(start), std::cmp::Reverse(dest))
                                > (bg, bl, std::cmp::Reverse(bs), std::cmp::Reverse(bd))
                        }
                    };
                    if better {
                        best = Some((gain, len, start, dest));
                    }
                }
            }
        }
        match best {
            Some((gain, len, start, dest)) => {
                current = apply_shift(&current, start, len, dest);
                current_cost -= gain;
                shifts += 1;
            }
            None => break,
        }
    }
    (current, shifts)
}

/// Number of TER edits for one sentence pair.
pub fn sentence_edits<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T]) -> usize {
    align(hyp, reference).counts.total()
}

/// Corpus TER: total edits over total reference tokens, times 100.
pub fn ter<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<MetricScore> {
    check_lengths(hypotheses.len(), references.len())?;
    let mut counts = EditCounts::default();
    let mut ref_len = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.iter().map(AsRef::as_ref).collect();
        let r: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
        ref_len += r.len();
        counts.add(&align(&h, &r).counts);
    }
    if ref_len == 0 {
        return Err(Error::Empty("TER needs at least one reference token".into()));
    }
    let components = ScoreComponents::Ter {
        insertions: counts.insertions,
        deletions: counts.deletions,
        substitutions: counts.substitutions,
        shifts: counts.shifts,
        ref_len,
    };
    Ok(MetricScore {
        name: MetricName::Ter,
        value: components.recompute(),
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(edit_distance(&toks("a b c"), &toks("a b c")), 0);
        assert_eq!(edit_distance(&toks(""), &toks("a b")), 2);
        assert_eq!(edit_distance(&toks("a x c"), &toks("a b c")), 1);
    }

    #[test]
    fn breakdown_sums_to_distance() {
        let h = toks("the cat sat on mat today");
        let r = toks("a cat sat on the mat");
        let c = edit_operations(&h, &r);
        assert_eq!(c.total(), edit_distance(&h, &r));
    }

    #[test]
    fn rotated_block_takes_one_shift() {
        let a = align(&toks("d a b c"), &toks("a b c d"));
        assert_eq!(a.counts.shifts, 1);
        assert_eq!(a.counts.total(), 1);
        assert_eq!(a.shifted_hypothesis, toks("a b c d"));
    }

    #[test]
    fn shift_helper() {
        let v = [1, 2, 3, 4, 5];
        assert_eq!(apply_shift(&v, 0, 2, 3), vec![3, 4, 5, 1, 2]);
        assert_eq!(apply_shift(&v, 3, 1, 0), vec![4, 1, 2, 3, 5]);
    }

    #[test]
    fn empty_reference_corpus_is_an_error() {
        let h = vec![toks("a")];
        let r = vec![toks("")];
        assert!(ter(&h, &r).is_err());
    }
}
