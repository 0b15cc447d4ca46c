//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `NMTLABCK`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header (config, step, seed,
//! tensor names and shapes, whether moments follow), then every tensor as
//! little-endian `f64` in header order: parameters, then the first and
//! second Adam moments when present.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelParams, TransformerConfig};
use super::tensor::Matrix;
use super::train::TrainState;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"NMTLABCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TransformerConfig,
    step: u64,
    seed: u64,
    tensors: Vec<(String, (usize, usize))>,
    has_moments: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TransformerConfig,
    pub params: ModelParams,
    pub moments: Option<(ModelParams, ModelParams)>,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_state(config: &TransformerConfig, state: &TrainState) -> Self {
        Self {
            config: config.clone(),
            params: state.params.clone(),
            moments: Some((state.m.clone(), state.v.clone())),
            step: state.step,
            seed: state.seed,
        }
    }

    pub fn from_params(config: &TransformerConfig, params: ModelParams, seed: u64) -> Self {
        Self {
            config: config.clone(),
            params,
            moments: None,
            step: 0,
            seed,
        }
    }

    /// Training state; missing moments start at zero.
    pub fn into_state(self) -> TrainState {
        let mut state = TrainState::new(self.params, self.seed);
        if let Some((m, v)) = self.moments {
            state.m = m;
            state.v = v;
        }
        state.step = self.step;
        state
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors: Vec<(String, (usize, usize))> =
            self.params.iter().map(|(n, m)| (n.clone(), m.shape())).collect();
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            seed: self.seed,
            tensors,
            has_moments: self.moments.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * 3 * self.params.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut groups = vec![&self.params];
        if let Some((m, v)) = &self.moments {
            groups.push(m);
            groups.push(v);
        }
        for g in groups {
            for (_, m) in g.iter() {
                for v in m.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        header.config.validate()?;
        let mut data = &body[hlen..];
        let mut read_group = || -> Result<BTreeMap<String, Matrix>> {
            let mut out = BTreeMap::new();
            for (name, (r, c)) in &header.tensors {
                let n = r * c * 8;
                if data.len() < n {
                    return Err(Error::Checkpoint(format!("truncated data for tensor `{name}`")));
                }
                let values = data[..n]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                data = &data[n..];
                out.insert(name.clone(), Matrix::from_vec(*r, *c, values));
            }
            Ok(out)
        };
        let params = ModelParams::from_tensors(&header.config, read_group()?)?;
        let moments = if header.has_moments {
            let m = ModelParams::from_tensors(&header.config, read_group()?)?;
            let v = ModelParams::from_tensors(&header.config, read_group()?)?;
            Some((m, v))
        } else {
            None
        };
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            config: header.config,
            params,
            moments,
            step: header.step,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Short content hash usable as a checkpoint id.
    pub fn fingerprint(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(hex::encode(&digest[..8]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;

    fn cfg() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 12,
            d_model: 8,
            num_heads: 2,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            ffn_dim: 8,
            max_positions: 10,
            dropout_p: 0.0,
            label_smoothing: 0.0,
        }
    }

    #[test]
    fn round_trip_with_moments() {
        let p = init_params(&cfg(), 5).unwrap();
        let mut state = TrainState::new(p, 5);
        state.step = 17;
        state.m = init_params(&cfg(), 6).unwrap();
        let ck = Checkpoint::from_state(&cfg(), &state);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.into_state(), state);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let p = init_params(&cfg(), 5).unwrap();
        let ck = Checkpoint::from_params(&cfg(), p, 5);
        let mut bytes = ck.to_bytes().unwrap();
        // Claim a larger vocabulary in the header without changing the data.
        let needle = b"\"vocab_size\":12";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[at + needle.len() - 1] = b'3';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }
}
