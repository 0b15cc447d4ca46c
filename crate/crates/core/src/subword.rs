//! Byte-pair encoding over a joint vocabulary, with optional merge dropout.
//!
//! Words are split into characters followed by a separate end-of-word symbol
//! `</w>`, so `low` starts out as `l o w </w>`. Learning repeatedly merges the
//! most frequent adjacent symbol pair; ties go to the lexicographically
//! smallest pair. Application replays merges by rank.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::read_lines;
use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";

/// Whole-word tokens that bypass segmentation.
pub const RESERVED_TOKENS: [&str; 1] = [SILVER_TAG];

/// Marks back-translated source sides when tagging is enabled.
pub const SILVER_TAG: &str = "<bt>";

const MERGES_HEADER: &str = "#version: nmtlab-bpe 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    vocab_set: HashSet<String>,
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, vocab: Vec<String>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        let vocab_set = vocab.iter().cloned().collect();
        Self {
            merges,
            vocab,
            ranks,
            vocab_set,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Tokens in a fixed order: initial symbols sorted, then merge results in
    /// learning order, then reserved tokens.
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab_set.contains(token)
    }

    pub fn end_of_word_marker(&self) -> &'static str {
        END_OF_WORD
    }

    /// Model restricted to its first `n` merges.
    pub fn truncated(&self, n: usize) -> Self {
        let merges: Vec<_> = self.merges.iter().take(n).cloned().collect();
        let merged: HashSet<String> = self.merges[n.min(self.merges.len())..]
            .iter()
            .map(|(a, b)| format!("{a}{b}"))
            .collect();
        let kept_merged: HashSet<String> = merges.iter().map(|(a, b)| format!("{a}{b}")).collect();
        let vocab = self
            .vocab
            .iter()
            .filter(|t| !merged.contains(*t) || kept_merged.contains(*t))
            .cloned()
            .collect();
        Self::from_parts(merges, vocab)
    }

    /// Writes the merge file (header, then one `left right` pair per line in
    /// learning order) and the vocabulary file (one token per line).
    pub fn save(&self, merges_path: &Path, vocab_path: &Path) -> Result<()> {
        let mut merges = String::new();
        merges.push_str(MERGES_HEADER);
        merges.push('\n');
        for (a, b) in &self.merges {
            merges.push_str(a);
            merges.push(' ');
            merges.push_str(b);
            merges.push('\n');
        }
        write_file(merges_path, &merges)?;
        let mut vocab = String::new();
        for t in &self.vocab {
            vocab.push_str(t);
            vocab.push('\n');
        }
        write_file(vocab_path, &vocab)
    }

    pub fn load(merges_path: &Path, vocab_path: &Path) -> Result<Self> {
        let lines = read_lines(merges_path)?;
        let mut merges = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            if i == 0 && line.starts_with("#version") {
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "{} line {}: expected `left right`",
                        merges_path.display(),
                        i + 1
                    )))
                }
            }
        }
        let vocab: Vec<String> = read_lines(vocab_path)?
            .into_iter()
            .filter(|l| !l.is_empty())
            .collect();
        Ok(Self::from_parts(merges, vocab))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| Error::io(path, e))
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .map(String::from)
        .chain(std::iter::once(END_OF_WORD.to_string()))
        .collect()
}

fn is_reserved(word: &str) -> bool {
    RESERVED_TOKENS.contains(&word)
}

/// Learns up to `num_merges` merge rules from whitespace-split lines.
pub fn learn_bpe<S: AsRef<str>>(lines: &[S], num_merges: usize) -> Result<BpeModel> {
    let mut word_freq: BTreeMap<&str, i64> = BTreeMap::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            if !is_reserved(w) {
                *word_freq.entry(w).or_insert(0) += 1;
            }
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Empty("BPE training corpus has no words".into()));
    }

    // Intern symbols so the inner loops work on integers.
    let mut names: Vec<String> = Vec::new();
    let mut ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: &str, names: &mut Vec<String>| -> u32 {
        if let Some(&id) = ids.get(s) {
            return id;
        }
        let id = names.len() as u32;
        names.push(s.to_string());
        ids.insert(s.to_string(), id);
        id
    };

    let mut words: Vec<Vec<u32>> = Vec::with_capacity(word_freq.len());
    let mut freqs: Vec<i64> = Vec::with_capacity(word_freq.len());
    for (w, &f) in &word_freq {
        words.push(initial_symbols(w).iter().map(|s| intern(s, &mut names)).collect());
        freqs.push(f);
    }

    let mut initial: Vec<String> = names.clone();
    initial.sort();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, syms) in words.iter().enumerate() {
        for p in syms.windows(2) {
            let key = (p[0], p[1]);
            *pair_counts.entry(key).or_insert(0) += freqs[wi];
            pair_words.entry(key).or_default().insert(wi);
        }
    }

    let mut merges: Vec<(String, String)> = Vec::new();
    let mut merged_vocab: Vec<String> = Vec::new();
    while merges.len() < num_merges {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // smaller pair wins a tie, so it must compare as greater
                    (&names[pb.0 as usize], &names[pb.1 as usize])
                        .cmp(&(&names[pa.0 as usize], &names[pa.1 as usize]))
                })
            })
            .map(|(&p, _)| p);
        let Some((left, right)) = best else { break };
        let joined = format!("{}{}", names[left as usize], names[right as usize]);
        let new_id = intern(&joined, &mut names);
        merges.push((names[left as usize].clone(), names[right as usize].clone()));
        if !merged_vocab.contains(&joined) && !initial.contains(&joined) {
            merged_vocab.push(joined);
        }

        let affected: Vec<usize> = {
            let mut v: Vec<usize> = pair_words
                .get(&(left, right))
                .map(|s| s.iter().copied().collect())
                .unwrap_or_default();
            v.sort_unstable();
            v
        };
        for wi in affected {
            let f = freqs[wi];
            let old = std::mem::take(&mut words[wi]);
            for p in old.windows(2) {
                let key = (p[0], p[1]);
                if let Some(c) = pair_counts.get_mut(&key) {
                    *c -= f;
                }
            }
            let mut new = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && old[i] == left && old[i + 1] == right {
                    new.push(new_id);
                    i += 2;
                } else {
                    new.push(old[i]);
                    i += 1;
                }
            }
            for p in new.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_insert(0) += f;
                pair_words.entry(key).or_default().insert(wi);
            }
            words[wi] = new;
        }
        pair_counts.retain(|_, c| *c > 0);
    }

    let mut vocab = initial;
    vocab.extend(merged_vocab);
    vocab.extend(RESERVED_TOKENS.iter().map(|s| s.to_string()));
    Ok(BpeModel::from_parts(merges, vocab))
}

/// One BPE model over the concatenation of several corpora.
pub fn build_joint_bpe<S: AsRef<str>>(corpora: &[Vec<S>], num_merges: usize) -> Result<BpeModel> {
    if corpora.is_empty() {
        return Err(Error::Empty("no corpora given for joint BPE".into()));
    }
    let all: Vec<&str> = corpora
        .iter()
        .flat_map(|c| c.iter().map(AsRef::as_ref))
        .collect();
    learn_bpe(&all, num_merges)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Segmentation {
    pub tokens: Vec<String>,
    /// Parallel to `tokens`: true where the token is outside the vocabulary.
    pub unknown: Vec<bool>,
}

impl Segmentation {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let unknown = vec![false; tokens.len()];
        Self { tokens, unknown }
    }
}

fn segment_word(
    word: &str,
    model: &BpeModel,
    dropout_p: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut syms = initial_symbols(word);
    loop {
        let mut best: Option<(usize, usize)> = None; // (rank, position)
        for i in 0..syms.len().saturating_sub(1) {
            let key = (syms[i].clone(), syms[i + 1].clone());
            let Some(&rank) = model.ranks.get(&key) else {
                continue;
            };
            if dropout_p > 0.0 && rng.gen::<f64>() < dropout_p {
                continue;
            }
            if best.is_none_or(|(r, _)| rank < r) {
                best = Some((rank, i));
            }
        }
        let Some((_, i)) = best else { break };
        let right = syms.remove(i + 1);
        syms[i].push_str(&right);
    }
    syms
}

/// Segments one line. With `dropout_p == 0` merges are replayed
/// deterministically by rank; otherwise every applicable merge is skipped
/// with probability `dropout_p` at every step, drawing from a generator
/// seeded with `seed`.
pub fn apply_bpe(line: &str, model: &BpeModel, dropout_p: f64, seed: u64) -> Result<Segmentation> {
    if !(0.0..=1.0).contains(&dropout_p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability {dropout_p} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seg = Segmentation::default();
    for word in line.split_whitespace() {
        if is_reserved(word) {
            seg.tokens.push(word.to_string());
            seg.unknown.push(false);
            continue;
        }
        for t in segment_word(word, model, dropout_p, &mut rng) {
            seg.unknown.push(!model.contains(&t));
            seg.tokens.push(t);
        }
    }
    Ok(seg)
}

/// Joins tokens back into words separated by single spaces.
pub fn decode_bpe(seg: &Segmentation) -> Result<String> {
    decode_tokens(&seg.tokens)
}

pub fn decode_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<String> {
    let mut words: Vec<String> = Vec::new();
    let mut buf = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        if is_reserved(tok) {
            if !buf.is_empty() {
                return Err(Error::MalformedSegmentation(format!(
                    "reserved token `{tok}` at {i} inside a word"
                )));
            }
            words.push(tok.to_string());
            continue;
        }
        let (body, ends_word) = match tok.strip_suffix(END_OF_WORD) {
            Some(body) => (body, true),
            None => (tok, false),
        };
        if body.contains(END_OF_WORD) {
            return Err(Error::MalformedSegmentation(format!(
                "end-of-word marker inside token `{tok}` at {i}"
            )));
        }
        buf.push_str(body);
        if ends_word {
            if buf.is_empty() {
                return Err(Error::MalformedSegmentation(format!(
                    "end-of-word marker at {i} closes an empty word"
                )));
            }
            words.push(std::mem::take(&mut buf));
        }
    }
    if !buf.is_empty() {
        return Err(Error::MalformedSegmentation(
            "last word has no end-of-word marker".into(),
        ));
    }
    Ok(words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    #[test]
    fn single_merge_ab() {
        let m = learn_bpe(&["ab ab ab"], 1).unwrap();
        assert_eq!(m.merges(), &[pair("a", "b")]);
    }

    #[test]
    fn zero_merges_is_character_vocab() {
        let m = learn_bpe(&["low lower"], 0).unwrap();
        assert!(m.merges().is_empty());
        for c in ["l", "o", "w", "e", "r", END_OF_WORD] {
            assert!(m.contains(c), "{c}");
        }
    }

    #[test]
    fn apply_single_rule() {
        let m = BpeModel::from_parts(vec![pair("a", "b")], vec![]);
        let seg = apply_bpe("abab", &m, 0.0, 0).unwrap();
        assert_eq!(seg.tokens, vec!["ab", "ab", END_OF_WORD]);
    }

    #[test]
    fn full_dropout_is_characters() {
        let m = learn_bpe(&["sie hat heute abend"; 4], 50).unwrap();
        let seg = apply_bpe("sie hat", &m, 1.0, 3).unwrap();
        assert_eq!(seg.tokens, vec!["s", "i", "e", END_OF_WORD, "h", "a", "t", END_OF_WORD]);
    }

    #[test]
    fn unknown_characters_flagged() {
        let m = learn_bpe(&["abc"], 2).unwrap();
        let seg = apply_bpe("abz", &m, 0.0, 0).unwrap();
        let z = seg.tokens.iter().position(|t| t == "z").unwrap();
        assert!(seg.unknown[z]);
        assert_eq!(seg.unknown.iter().filter(|&&u| u).count(), 1);
        assert_eq!(decode_bpe(&seg).unwrap(), "abz");
    }

    #[test]
    fn reserved_token_passes_through() {
        let m = learn_bpe(&["sie hat"], 3).unwrap();
        let seg = apply_bpe("<bt> sie hat", &m, 0.0, 0).unwrap();
        assert_eq!(seg.tokens[0], SILVER_TAG);
        assert!(m.contains(SILVER_TAG));
        assert_eq!(decode_bpe(&seg).unwrap(), "<bt> sie hat");
    }

    #[test]
    fn decode_rejects_malformed() {
        assert!(decode_tokens(&["a</w>b"]).is_err());
        assert!(decode_tokens(&["ab"]).is_err());
        assert!(decode_tokens(&[END_OF_WORD]).is_err());
        assert_eq!(decode_tokens::<&str>(&[]).unwrap(), "");
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(learn_bpe::<&str>(&[], 5).is_err());
        assert!(learn_bpe(&["   "], 5).is_err());
        assert!(build_joint_bpe::<&str>(&[], 5).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = learn_bpe(&["low low lower newest widest"], 12).unwrap();
        let (mp, vp) = (dir.path().join("bpe.merges"), dir.path().join("bpe.vocab"));
        m.save(&mp, &vp).unwrap();
        assert_eq!(BpeModel::load(&mp, &vp).unwrap(), m);
    }

    #[test]
    fn truncated_model_matches_fewer_merges() {
        let lines = ["low low lower newest widest newer"];
        let full = learn_bpe(&lines, 10).unwrap();
        let short = learn_bpe(&lines, 4).unwrap();
        assert_eq!(full.truncated(4).merges(), short.merges());
    }
}
