use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtranslate::AugmentationConfig;
use crate::corpus::FilterConfig;
use crate::model::{DecodeOptions, TrainingSchedule, TransformerConfig};
use crate::stats::{TTestVariant, DEFAULT_ALPHA};
use crate::{Error, Result};

/// Input files. Relative paths are resolved against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub parallel_source: PathBuf,
    pub parallel_target: PathBuf,
    pub mono_source: PathBuf,
    pub mono_target: PathBuf,
    /// Parent pair, parent language side.
    pub parent_source: PathBuf,
    /// Parent pair, shared-language side (same language as `target_lang`).
    pub parent_target: PathBuf,
}

impl CorpusPaths {
    fn all(&self) -> [(&'static str, &PathBuf); 6] {
        [
            ("parallel_source", &self.parallel_source),
            ("parallel_target", &self.parallel_target),
            ("mono_source", &self.mono_source),
            ("mono_target", &self.mono_target),
            ("parent_source", &self.parent_source),
            ("parent_target", &self.parent_target),
        ]
    }

    fn all_mut(&mut self) -> [&mut PathBuf; 6] {
        [
            &mut self.parallel_source,
            &mut self.parallel_target,
            &mut self.mono_source,
            &mut self.mono_target,
            &mut self.parent_source,
            &mut self.parent_target,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpeSettings {
    pub merges: usize,
}

impl Default for BpeSettings {
    fn default() -> Self {
        Self { merges: 400 }
    }
}

/// Architecture without the vocabulary size, which comes from the joint BPE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub ffn_dim: usize,
    /// Longer encoded sequences are clipped to fit.
    pub max_positions: usize,
    pub dropout_p: f64,
    pub label_smoothing: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_heads: 2,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            ffn_dim: 128,
            max_positions: 128,
            dropout_p: 0.1,
            label_smoothing: 0.1,
        }
    }
}

impl ModelSettings {
    pub fn with_vocab(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            d_model: self.d_model,
            num_heads: self.num_heads,
            num_encoder_layers: self.num_encoder_layers,
            num_decoder_layers: self.num_decoder_layers,
            ffn_dim: self.ffn_dim,
            max_positions: self.max_positions,
            dropout_p: self.dropout_p,
            label_smoothing: self.label_smoothing,
        }
    }
}

/// Tensors the transfer child draws fresh or keeps frozen; everything else
/// is copied from the parent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSettings {
    pub fresh: Vec<String>,
    pub freeze: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignificanceSettings {
    pub variant: TTestVariant,
    pub alpha: f64,
}

impl Default for SignificanceSettings {
    fn default() -> Self {
        Self {
            variant: TTestVariant::Paired,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub source_lang: String,
    pub target_lang: String,
    pub parent_lang: String,
    pub corpus: CorpusPaths,
    /// Replicate seeds; every random draw in a replicate derives from one.
    pub seeds: Vec<u64>,
    pub k: usize,
    /// Share of each fold's training part held out for dev loss.
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    /// Parent pairs held out for parent dev loss.
    #[serde(default = "default_parent_dev")]
    pub parent_dev_size: usize,
    pub output_dir: PathBuf,
    /// Worker threads for independent units; 0 picks the core count.
    /// Results do not depend on it.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub bpe: BpeSettings,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub training: TrainingSchedule,
    #[serde(default)]
    pub parent_training: TrainingSchedule,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub transfer: TransferSettings,
    #[serde(default)]
    pub decode: DecodeOptions,
    #[serde(default)]
    pub significance: SignificanceSettings,
}

fn default_dev_fraction() -> f64 {
    0.1
}

fn default_parent_dev() -> usize {
    200
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a config file. Relative corpus paths resolve against its
    /// directory; a relative output directory resolves against
    /// `output_root` when given, else against the config directory.
    pub fn load(path: &Path, output_root: Option<&Path>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in cfg.corpus.all_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = output_root.unwrap_or(base).join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Checks every invariant, including that all input files exist.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let langs = [&self.source_lang, &self.target_lang, &self.parent_lang];
        if langs.iter().any(|l| l.is_empty() || l.contains(['/', '\\', '.'])) {
            return bad("language codes must be non-empty plain names".into());
        }
        if self.source_lang == self.target_lang
            || self.parent_lang == self.source_lang
            || self.parent_lang == self.target_lang
        {
            return bad("source, target and parent languages must differ".into());
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return bad(format!("dev_fraction {} outside (0, 1)", self.dev_fraction));
        }
        if self.parent_dev_size == 0 {
            return bad("parent_dev_size must be positive".into());
        }
        if !(self.significance.alpha > 0.0 && self.significance.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.significance.alpha));
        }
        if self.decode.max_len == 0 {
            return bad("decode.max_len must be positive".into());
        }
        self.filter.validate()?;
        let model = self.model.with_vocab(1);
        model.validate()?;
        let names: Vec<String> = model.tensor_shapes().into_iter().map(|(n, _)| n).collect();
        for n in self.transfer.fresh.iter().chain(&self.transfer.freeze) {
            if !names.contains(n) {
                return bad(format!("transfer: unknown tensor `{n}`"));
            }
        }
        self.training.validate()?;
        self.parent_training.validate()?;
        self.augmentation.validate()?;
        for (name, p) in self.corpus.all() {
            if !p.is_file() {
                return bad(format!("corpus.{name}: {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form. Settings that cannot change
    /// results (`workers`, `output_dir`) are left out, and so are corpus
    /// paths: the run hashes the file contents separately.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.workers = 0;
        c.output_dir = PathBuf::new();
        for p in c.corpus.all_mut() {
            *p = PathBuf::new();
        }
        let json = serde_json::to_vec(&c)?;
        Ok(hex::encode(Sha256::digest(json)))
    }
}
