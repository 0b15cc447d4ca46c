//! Parent-to-child parameter transfer over a joint subword vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{init_tensor, ModelParams, TransformerConfig};
use crate::{Error, Result};

pub use crate::subword::build_joint_bpe;

/// Merge and vocabulary files of a saved BPE model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeFiles {
    pub merges: PathBuf,
    pub vocab: PathBuf,
}

/// Which child tensors come from which parent tensors. Every child tensor
/// is either copied or listed as fresh, never both.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferPlan {
    pub joint_bpe: BpeFiles,
    pub parent_checkpoint: PathBuf,
    /// Child tensor name to parent tensor name.
    pub copy: BTreeMap<String, String>,
    pub fresh: BTreeSet<String>,
    /// Tensors kept fixed while the child trains.
    #[serde(default)]
    pub freeze: BTreeSet<String>,
}

impl TransferPlan {
    /// Copies every tensor of `config` from the same-named parent tensor.
    pub fn full_copy(config: &TransformerConfig, joint_bpe: BpeFiles, parent_checkpoint: PathBuf) -> Self {
        let copy = config
            .tensor_shapes()
            .into_iter()
            .map(|(n, _)| (n.clone(), n))
            .collect();
        Self {
            joint_bpe,
            parent_checkpoint,
            copy,
            fresh: BTreeSet::new(),
            freeze: BTreeSet::new(),
        }
    }

    /// Moves the named tensors from the copy map to the fresh list.
    pub fn with_fresh<S: AsRef<str>>(mut self, names: &[S]) -> Result<Self> {
        for n in names {
            let n = n.as_ref();
            if self.copy.remove(n).is_none() {
                return Err(Error::UnknownTensor(n.to_string()));
            }
            self.fresh.insert(n.to_string());
        }
        Ok(self)
    }

    pub fn validate(&self, child: &TransformerConfig) -> Result<()> {
        let expected: BTreeSet<String> = child.tensor_shapes().into_iter().map(|(n, _)| n).collect();
        for name in self.copy.keys().chain(&self.fresh).chain(&self.freeze) {
            if !expected.contains(name) {
                return Err(Error::UnknownTensor(name.clone()));
            }
        }
        if let Some(both) = self.copy.keys().find(|n| self.fresh.contains(*n)) {
            return Err(Error::InvalidConfig(format!("tensor `{both}` is both copied and fresh")));
        }
        if let Some(missing) = expected.iter().find(|n| !self.copy.contains_key(*n) && !self.fresh.contains(*n)) {
            return Err(Error::InvalidConfig(format!("tensor `{missing}` is neither copied nor fresh")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Child parameters at step 0: copied tensors are bitwise equal to their
/// parent source, fresh ones are drawn as by `init_params` with `seed`.
pub fn transfer_init(
    parent: &ModelParams,
    child_config: &TransformerConfig,
    plan: &TransferPlan,
    seed: u64,
) -> Result<ModelParams> {
    child_config.validate()?;
    plan.validate(child_config)?;
    let mut tensors = BTreeMap::new();
    for (name, shape) in child_config.tensor_shapes() {
        let t = match plan.copy.get(&name) {
            Some(src) => {
                let p = parent.get(src).ok_or_else(|| Error::UnknownTensor(src.clone()))?;
                if p.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        name,
                        expected: shape,
                        found: p.shape(),
                    });
                }
                p.clone()
            }
            None => init_tensor(&name, shape, seed),
        };
        tensors.insert(name, t);
    }
    ModelParams::from_tensors(child_config, tensors)
}
