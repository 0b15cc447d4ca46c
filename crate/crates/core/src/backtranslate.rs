//! Silver parallel data from monolingual text, and mixing it with gold data.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{MonolingualCorpus, ParallelCorpus, SentencePair};
use crate::model::{translate, Checkpoint, DecodeOptions, ModelParams, TransformerConfig, Vocab};
use crate::par::parallel_map;
use crate::subword::{BpeModel, SILVER_TAG};
use crate::{Error, Result};

/// Stream of the augmentation seed used for monolingual sampling.
const SAMPLE_STREAM: u64 = 0;
/// Stream of the augmentation seed used for the mixing shuffle.
const MIX_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Monolingual lines to back-translate.
    pub mono_sample_size: usize,
    /// Optional cap on silver pairs as a multiple of the gold size.
    pub mixing_ratio: Option<f64>,
    /// Prepend the reserved silver tag to silver sources.
    pub tag_silver: bool,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            mono_sample_size: 2000,
            mixing_ratio: None,
            tag_silver: false,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.mixing_ratio {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::InvalidConfig(format!("mixing_ratio {r} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Number of monolingual lines to sample for a gold corpus of `gold_len`.
    pub fn silver_budget(&self, gold_len: usize) -> usize {
        match self.mixing_ratio {
            Some(r) => self.mono_sample_size.min((r * gold_len as f64).round() as usize),
            None => self.mono_sample_size,
        }
    }
}

/// Anything that turns one normalized line into another.
pub trait Translator: Sync {
    fn translate_line(&self, line: &str) -> Result<String>;

    /// Identifier recorded in silver provenance.
    fn id(&self) -> String;
}

/// A trained model together with the vocabulary it was trained on.
#[derive(Debug, Clone)]
pub struct NeuralTranslator {
    pub params: ModelParams,
    pub config: TransformerConfig,
    pub bpe: BpeModel,
    pub vocab: Vocab,
    pub options: DecodeOptions,
    pub id: String,
}

impl NeuralTranslator {
    pub fn new(params: ModelParams, config: TransformerConfig, bpe: BpeModel, options: DecodeOptions, id: String) -> Result<Self> {
        let vocab = Vocab::from_bpe(&bpe);
        if vocab.len() != config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "model vocabulary {} does not match subword vocabulary {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Self {
            params,
            config,
            bpe,
            vocab,
            options,
            id,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, bpe: BpeModel, options: DecodeOptions) -> Result<Self> {
        let id = ck.fingerprint()?;
        Self::new(ck.params, ck.config, bpe, options, id)
    }
}

impl Translator for NeuralTranslator {
    fn translate_line(&self, line: &str) -> Result<String> {
        let ids = self.vocab.encode_line(line, &self.bpe, 0.0, 0)?;
        let out = translate(&self.params, &self.config, &ids, &self.options)?;
        Ok(self.vocab.decode_ids(&out.tokens))
    }

    fn id(&self) -> String {
        self.id.clone()
    }
}

/// Lines that could not be back-translated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    pub sampled: usize,
    pub skipped: usize,
    /// `(monolingual line index, reason)` for every skipped line.
    pub reasons: Vec<(usize, String)>,
}

/// `k` distinct indices below `n`, uniform without replacement, ascending.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLE_STREAM);
    let mut idx = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Translates a sample of `mono` into `source_lang`. Each silver pair keeps
/// the monolingual line verbatim as its target. Lines whose translation
/// fails or comes out empty are skipped and counted.
pub fn back_translate<T: Translator + ?Sized>(
    translator: &T,
    mono: &MonolingualCorpus,
    source_lang: &str,
    aug: &AugmentationConfig,
    workers: usize,
) -> Result<(ParallelCorpus, SkipReport)> {
    aug.validate()?;
    let picked = sample_indices(mono.len(), aug.mono_sample_size, aug.seed);
    let outputs = parallel_map(&picked, workers, |&i| {
        let line = &mono.lines[i];
        translator
            .translate_line(line)
            .and_then(|src| SentencePair::new(src, line.clone()))
    });
    let mut report = SkipReport {
        sampled: picked.len(),
        ..Default::default()
    };
    let mut pairs = Vec::with_capacity(picked.len());
    for (&i, out) in picked.iter().zip(outputs) {
        match out {
            Ok(p) => pairs.push(p),
            Err(e) => {
                report.skipped += 1;
                report.reasons.push((i, e.to_string()));
            }
        }
    }
    if report.skipped > 0 {
        log::warn!("back-translation skipped {} of {} lines", report.skipped, report.sampled);
    }
    Ok((ParallelCorpus::from_pairs(source_lang, mono.lang.clone(), pairs), report))
}

/// Gold plus silver in a seeded shuffled order, silver sources optionally
/// tagged.
pub fn mix(gold: &ParallelCorpus, silver: &ParallelCorpus, aug: &AugmentationConfig) -> Result<ParallelCorpus> {
    if !silver.is_empty() && (gold.source_lang != silver.source_lang || gold.target_lang != silver.target_lang) {
        return Err(Error::LanguageMismatch(format!(
            "gold is {}-{}, silver is {}-{}",
            gold.source_lang, gold.target_lang, silver.source_lang, silver.target_lang
        )));
    }
    let mut pairs = gold.pairs.clone();
    pairs.extend(silver.pairs.iter().map(|p| {
        let mut p = p.clone();
        if aug.tag_silver {
            p.source = format!("{SILVER_TAG} {}", p.source);
        }
        p
    }));
    let mut rng = ChaCha8Rng::seed_from_u64(aug.seed);
    rng.set_stream(MIX_STREAM);
    pairs.shuffle(&mut rng);
    Ok(ParallelCorpus::from_pairs(gold.source_lang.clone(), gold.target_lang.clone(), pairs))
}

/// Sidecar written next to a silver corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverProvenance {
    pub checkpoint: String,
    pub seed: u64,
    pub source_lang: String,
    pub target_lang: String,
    pub pairs: usize,
    pub skips: SkipReport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilverPaths {
    pub source: PathBuf,
    pub target: PathBuf,
    pub sidecar: PathBuf,
}

impl SilverPaths {
    /// `<dir>/<stem>.<src>`, `<dir>/<stem>.<tgt>` and `<dir>/<stem>.json`.
    pub fn new(dir: &Path, stem: &str, source_lang: &str, target_lang: &str) -> Self {
        Self {
            source: dir.join(format!("{stem}.{source_lang}")),
            target: dir.join(format!("{stem}.{target_lang}")),
            sidecar: dir.join(format!("{stem}.json")),
        }
    }

    pub fn exist(&self) -> bool {
        self.source.is_file() && self.target.is_file() && self.sidecar.is_file()
    }
}

pub fn write_silver(paths: &SilverPaths, silver: &ParallelCorpus, provenance: &SilverProvenance) -> Result<()> {
    silver.write(&paths.source, &paths.target)?;
    let json = serde_json::to_string_pretty(provenance)?;
    fs::write(&paths.sidecar, json).map_err(|e| Error::io(&paths.sidecar, e))
}

pub fn read_silver(paths: &SilverPaths) -> Result<(ParallelCorpus, SilverProvenance)> {
    let text = fs::read_to_string(&paths.sidecar).map_err(|e| Error::io(&paths.sidecar, e))?;
    let prov: SilverProvenance = serde_json::from_str(&text)?;
    let corpus = if prov.pairs == 0 {
        ParallelCorpus::new(prov.source_lang.clone(), prov.target_lang.clone())
    } else {
        ParallelCorpus::read(&paths.source, &paths.target, &prov.source_lang, &prov.target_lang)?
    };
    Ok((corpus, prov))
}
