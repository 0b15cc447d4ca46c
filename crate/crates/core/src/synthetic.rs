//! Deterministic synthetic language family for end-to-end experiments.
//!
//! A base language `G` is generated from a small grammar over a Zipfian
//! lexicon. The low-resource language `B` is a close relative of `G`: every
//! word goes through a fixed set of sound and suffix rewrites, some function
//! words are replaced, and a negation particle moves in front of the verb.
//! The parent language `F` is a distant relative: content stems are
//! substituted through a cipher, affixes and function words differ, and
//! adjectives follow their noun.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::write_lines;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub gold_pairs: usize,
    /// Lines per child language.
    pub mono_lines: usize,
    pub parent_pairs: usize,
    /// Share of gold pairs whose sides are deliberately mismatched.
    pub misaligned_fraction: f64,
    /// Share of gold lines decorated with markup the cleaner strips.
    pub markup_fraction: f64,
    pub nouns: usize,
    pub verbs: usize,
    pub adjectives: usize,
    pub zipf_exponent: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 20240,
            gold_pairs: 1000,
            mono_lines: 5000,
            parent_pairs: 20000,
            misaligned_fraction: 0.02,
            markup_fraction: 0.03,
            nouns: 150,
            verbs: 40,
            adjectives: 30,
            zipf_exponent: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pos {
    Noun,
    Verb,
    Adj,
}

/// One word of a base sentence, kept abstract so each language can render
/// it with its own morphology.
#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Func(&'static str),
    Noun { stem: usize, plural: bool },
    Verb { stem: usize, plural: bool },
    Adj { stem: usize, inflected: bool },
}

const G_ONSETS: [&str; 20] = [
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "w", "z", "sch", "st", "br", "kl", "gr",
];
const G_VOWELS: [&str; 10] = ["a", "e", "i", "o", "u", "ei", "au", "ie", "ü", "ö"];
const G_CODAS: [&str; 10] = ["", "n", "r", "l", "s", "t", "ch", "ng", "nd", "rt"];

const F_ONSETS: [&str; 16] = [
    "b", "c", "d", "f", "g", "j", "l", "m", "n", "p", "qu", "r", "s", "t", "v", "ch",
];
const F_VOWELS: [&str; 9] = ["a", "e", "i", "o", "u", "ou", "oi", "é", "au"];
const F_CODAS: [&str; 6] = ["", "", "r", "l", "n", "s"];

const DETS: [&str; 4] = ["der", "die", "das", "ein"];
const PREPS: [&str; 6] = ["mit", "von", "auf", "zu", "nach", "bei"];
const CONJS: [&str; 3] = ["und", "aber", "weil"];
const ADVS: [&str; 5] = ["sehr", "auch", "heute", "schon", "immer"];
const PRONS_SG: [&str; 3] = ["ich", "er", "sie"];
const PRONS_PL: [&str; 2] = ["wir", "ihr"];
const NEG: &str = "nicht";

fn b_function(w: &str) -> &'static str {
    match w {
        "der" => "da",
        "die" => "de",
        "das" => "des",
        "ein" => "a",
        "mit" => "mid",
        "von" => "vo",
        "auf" => "af",
        "zu" => "zua",
        "nach" => "noch",
        "bei" => "bei",
        "und" => "und",
        "aber" => "owa",
        "weil" => "wei",
        "sehr" => "recht",
        "auch" => "a",
        "heute" => "heid",
        "schon" => "scho",
        "immer" => "oiwei",
        "ich" => "i",
        "er" => "er",
        "sie" => "sie",
        "wir" => "mia",
        "ihr" => "ees",
        "nicht" => "ned",
        other => panic!("no B form for `{other}`"),
    }
}

fn f_function(w: &str) -> &'static str {
    match w {
        "der" => "le",
        "die" => "la",
        "das" => "ce",
        "ein" => "un",
        "mit" => "avec",
        "von" => "de",
        "auf" => "sur",
        "zu" => "à",
        "nach" => "vers",
        "bei" => "chez",
        "und" => "et",
        "aber" => "mais",
        "weil" => "car",
        "sehr" => "très",
        "auch" => "aussi",
        "heute" => "aujourd",
        "schon" => "déjà",
        "immer" => "toujours",
        "ich" => "je",
        "er" => "il",
        "sie" => "elle",
        "wir" => "nous",
        "ihr" => "vous",
        "nicht" => "pas",
        other => panic!("no F form for `{other}`"),
    }
}

/// Sound and suffix rewrites from a `G` word to its `B` cognate.
pub fn b_cognate(word: &str) -> String {
    let mut w = word.to_string();
    for (from, to) in [("ei", "oa"), ("ie", "ia"), ("ü", "i"), ("ö", "e"), ("st", "scht"), ("au", "ao")] {
        w = w.replace(from, to);
    }
    if let Some(stem) = w.strip_suffix("en") {
        w = format!("{stem}n");
    } else if let Some(stem) = w.strip_suffix("te") {
        w = format!("{stem}d");
    } else if w.len() > 3 {
        if let Some(stem) = w.strip_suffix('e') {
            w = stem.to_string();
        }
    }
    if let Some(rest) = w.strip_prefix('k') {
        w = format!("g{rest}");
    }
    w
}

struct Lexicon {
    g_nouns: Vec<String>,
    g_verbs: Vec<String>,
    g_adjs: Vec<String>,
    f_nouns: Vec<String>,
    f_verbs: Vec<String>,
    f_adjs: Vec<String>,
}

fn make_stem(rng: &mut ChaCha8Rng, onsets: &[&str], vowels: &[&str], codas: &[&str], syllables: usize) -> String {
    let mut s = String::new();
    for i in 0..syllables {
        s.push_str(onsets[rng.gen_range(0..onsets.len())]);
        s.push_str(vowels[rng.gen_range(0..vowels.len())]);
        if i + 1 == syllables || rng.gen_bool(0.3) {
            s.push_str(codas[rng.gen_range(0..codas.len())]);
        }
    }
    s
}

fn unique_stems(
    rng: &mut ChaCha8Rng,
    n: usize,
    inventory: (&[&str], &[&str], &[&str]),
    taken: &mut BTreeSet<String>,
) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = if rng.gen_bool(0.6) { 1 } else { 2 };
        let s = make_stem(rng, inventory.0, inventory.1, inventory.2, syl);
        if s.chars().count() >= 3 && taken.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

impl Lexicon {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1);
        let mut taken: BTreeSet<String> = BTreeSet::new();
        let g = (&G_ONSETS[..], &G_VOWELS[..], &G_CODAS[..]);
        let f = (&F_ONSETS[..], &F_VOWELS[..], &F_CODAS[..]);
        Self {
            g_nouns: unique_stems(&mut rng, spec.nouns, g, &mut taken),
            g_verbs: unique_stems(&mut rng, spec.verbs, g, &mut taken),
            g_adjs: unique_stems(&mut rng, spec.adjectives, g, &mut taken),
            f_nouns: unique_stems(&mut rng, spec.nouns, f, &mut taken),
            f_verbs: unique_stems(&mut rng, spec.verbs, f, &mut taken),
            f_adjs: unique_stems(&mut rng, spec.adjectives, f, &mut taken),
        }
    }
}

struct Zipf {
    cumulative: Vec<f64>,
}

impl Zipf {
    fn new(n: usize, s: f64) -> Self {
        let mut acc = 0.0;
        let cumulative = (0..n)
            .map(|r| {
                acc += 1.0 / ((r + 1) as f64).powf(s);
                acc
            })
            .collect();
        Self { cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty lexicon");
        let u = rng.gen::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

struct Generator {
    lex: Lexicon,
    nouns: Zipf,
    verbs: Zipf,
    adjs: Zipf,
}

impl Generator {
    fn new(spec: &SyntheticSpec) -> Self {
        Self {
            lex: Lexicon::new(spec),
            nouns: Zipf::new(spec.nouns, spec.zipf_exponent),
            verbs: Zipf::new(spec.verbs, spec.zipf_exponent),
            adjs: Zipf::new(spec.adjectives, spec.zipf_exponent),
        }
    }

    fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
        xs[rng.gen_range(0..xs.len())]
    }

    fn noun_phrase(&self, rng: &mut ChaCha8Rng, out: &mut Vec<Tok>) {
        let plural = rng.gen_bool(0.3);
        out.push(Tok::Func(if plural { "die" } else { Self::pick(rng, &DETS) }));
        if rng.gen_bool(0.35) {
            out.push(Tok::Adj {
                stem: self.adjs.sample(rng),
                inflected: plural,
            });
        }
        out.push(Tok::Noun {
            stem: self.nouns.sample(rng),
            plural,
        });
    }

    fn clause(&self, rng: &mut ChaCha8Rng, out: &mut Vec<Tok>) {
        let plural;
        if rng.gen_bool(0.3) {
            plural = rng.gen_bool(0.4);
            out.push(Tok::Func(if plural {
                Self::pick(rng, &PRONS_PL)
            } else {
                Self::pick(rng, &PRONS_SG)
            }));
        } else {
            let start = out.len();
            self.noun_phrase(rng, out);
            plural = matches!(out[start..].last(), Some(Tok::Noun { plural: true, .. }));
        }
        out.push(Tok::Verb {
            stem: self.verbs.sample(rng),
            plural,
        });
        if rng.gen_bool(0.15) {
            out.push(Tok::Func(NEG));
        }
        if rng.gen_bool(0.25) {
            out.push(Tok::Func(Self::pick(rng, &ADVS)));
        }
        self.noun_phrase(rng, out);
        if rng.gen_bool(0.35) {
            out.push(Tok::Func(Self::pick(rng, &PREPS)));
            self.noun_phrase(rng, out);
        }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> Vec<Tok> {
        let mut out = Vec::new();
        self.clause(rng, &mut out);
        if rng.gen_bool(0.2) {
            out.push(Tok::Func(Self::pick(rng, &CONJS)));
            self.clause(rng, &mut out);
        }
        out
    }

    fn render_g(&self, toks: &[Tok]) -> Vec<String> {
        toks.iter()
            .map(|t| match *t {
                Tok::Func(w) => w.to_string(),
                Tok::Noun { stem, plural } => {
                    let s = &self.lex.g_nouns[stem];
                    if plural {
                        format!("{s}en")
                    } else {
                        s.clone()
                    }
                }
                Tok::Verb { stem, plural } => {
                    let s = &self.lex.g_verbs[stem];
                    if plural {
                        format!("{s}en")
                    } else {
                        format!("{s}t")
                    }
                }
                Tok::Adj { stem, inflected } => {
                    let s = &self.lex.g_adjs[stem];
                    if inflected {
                        format!("{s}en")
                    } else {
                        format!("{s}e")
                    }
                }
            })
            .collect()
    }

    fn g(&self, toks: &[Tok]) -> String {
        self.render_g(toks).join(" ")
    }

    fn b(&self, toks: &[Tok]) -> String {
        let g = self.render_g(toks);
        let mut words: Vec<String> = toks
            .iter()
            .zip(&g)
            .map(|(t, w)| match t {
                Tok::Func(f) => b_function(f).to_string(),
                _ => b_cognate(w),
            })
            .collect();
        // The negation particle precedes the finite verb.
        for i in 1..toks.len() {
            if toks[i] == Tok::Func(NEG) && matches!(toks[i - 1], Tok::Verb { .. }) {
                words.swap(i - 1, i);
            }
        }
        words.join(" ")
    }

    fn f(&self, toks: &[Tok]) -> String {
        let mut words: Vec<(Pos, String)> = Vec::new();
        for t in toks {
            let w = match *t {
                Tok::Func(w) => (Pos::Verb, f_function(w).to_string()),
                Tok::Noun { stem, plural } => {
                    let s = &self.lex.f_nouns[stem];
                    (Pos::Noun, if plural { format!("{s}s") } else { s.clone() })
                }
                Tok::Verb { stem, plural } => {
                    let s = &self.lex.f_verbs[stem];
                    (Pos::Verb, if plural { format!("{s}ent") } else { format!("{s}e") })
                }
                Tok::Adj { stem, inflected } => {
                    let s = &self.lex.f_adjs[stem];
                    (Pos::Adj, if inflected { format!("{s}s") } else { s.clone() })
                }
            };
            words.push(w);
        }
        // Adjectives follow their noun.
        for i in 1..words.len() {
            if words[i - 1].0 == Pos::Adj && words[i].0 == Pos::Noun {
                words.swap(i - 1, i);
            }
        }
        words.into_iter().map(|(_, w)| w).collect::<Vec<_>>().join(" ")
    }
}

/// Generated corpora. Child pairs are `(B, G)`, parent pairs `(F, G)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpora {
    pub gold: Vec<(String, String)>,
    pub mono_b: Vec<String>,
    pub mono_g: Vec<String>,
    pub parent: Vec<(String, String)>,
}

pub const CHILD_SOURCE_LANG: &str = "bar";
pub const CHILD_TARGET_LANG: &str = "de";
pub const PARENT_LANG: &str = "fr";

fn decorate(rng: &mut ChaCha8Rng, line: &str) -> String {
    match rng.gen_range(0..3) {
        0 => format!("{line} [1]"),
        1 => format!("<b>{line}</b>"),
        _ => format!("{line} {{{{citation needed}}}}"),
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpora> {
    if spec.nouns == 0 || spec.verbs == 0 || spec.adjectives == 0 {
        return Err(Error::InvalidConfig("synthetic lexicon sizes must be positive".into()));
    }
    for (name, v) in [
        ("misaligned_fraction", spec.misaligned_fraction),
        ("markup_fraction", spec.markup_fraction),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
        }
    }
    let gen = Generator::new(spec);
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(100 + k);
        r
    };

    let mut rng = stream(0);
    let mut gold = Vec::with_capacity(spec.gold_pairs);
    let sentences: Vec<Vec<Tok>> = (0..spec.gold_pairs).map(|_| gen.sentence(&mut rng)).collect();
    for (i, toks) in sentences.iter().enumerate() {
        let (mut b, mut g) = (gen.b(toks), gen.g(toks));
        if spec.gold_pairs > 1 && rng.gen_bool(spec.misaligned_fraction) {
            // Pair the source with an unrelated target built from another
            // lexicon slice so the mismatch is visible at character level.
            let other = &sentences[(i + spec.gold_pairs / 2) % spec.gold_pairs];
            g = gen.f(other);
        }
        if rng.gen_bool(spec.markup_fraction) {
            b = decorate(&mut rng, &b);
        }
        if rng.gen_bool(spec.markup_fraction) {
            g = decorate(&mut rng, &g);
        }
        gold.push((b, g));
    }

    let mut rng = stream(1);
    let mono_b = (0..spec.mono_lines).map(|_| gen.b(&gen.sentence(&mut rng))).collect();
    let mut rng = stream(2);
    let mono_g = (0..spec.mono_lines).map(|_| gen.g(&gen.sentence(&mut rng))).collect();
    let mut rng = stream(3);
    let parent = (0..spec.parent_pairs)
        .map(|_| {
            let toks = gen.sentence(&mut rng);
            (gen.f(&toks), gen.g(&toks))
        })
        .collect();
    Ok(SyntheticCorpora {
        gold,
        mono_b,
        mono_g,
        parent,
    })
}

/// File locations written by [`SyntheticCorpora::write`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPaths {
    pub gold_source: PathBuf,
    pub gold_target: PathBuf,
    pub mono_source: PathBuf,
    pub mono_target: PathBuf,
    pub parent_source: PathBuf,
    pub parent_target: PathBuf,
}

impl SyntheticCorpora {
    pub fn write(&self, dir: &Path) -> Result<SyntheticPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (s, t, p) = (CHILD_SOURCE_LANG, CHILD_TARGET_LANG, PARENT_LANG);
        let paths = SyntheticPaths {
            gold_source: dir.join(format!("gold.{s}")),
            gold_target: dir.join(format!("gold.{t}")),
            mono_source: dir.join(format!("mono.{s}")),
            mono_target: dir.join(format!("mono.{t}")),
            parent_source: dir.join(format!("parent.{p}")),
            parent_target: dir.join(format!("parent.{t}")),
        };
        write_lines(&paths.gold_source, self.gold.iter().map(|x| x.0.as_str()))?;
        write_lines(&paths.gold_target, self.gold.iter().map(|x| x.1.as_str()))?;
        write_lines(&paths.mono_source, self.mono_b.iter().map(String::as_str))?;
        write_lines(&paths.mono_target, self.mono_g.iter().map(String::as_str))?;
        write_lines(&paths.parent_source, self.parent.iter().map(|x| x.0.as_str()))?;
        write_lines(&paths.parent_target, self.parent.iter().map(|x| x.1.as_str()))?;
        Ok(paths)
    }

    /// Distinct word types per language side, for diagnostics.
    pub fn type_counts(&self) -> BTreeMap<&'static str, usize> {
        let count = |lines: &mut dyn Iterator<Item = &String>| {
            lines
                .flat_map(|l| l.split_whitespace())
                .collect::<BTreeSet<_>>()
                .len()
        };
        let mut m = BTreeMap::new();
        m.insert("gold_source", count(&mut self.gold.iter().map(|p| &p.0)));
        m.insert("gold_target", count(&mut self.gold.iter().map(|p| &p.1)));
        m.insert("mono_source", count(&mut self.mono_b.iter()));
        m.insert("mono_target", count(&mut self.mono_g.iter()));
        m
    }
}
