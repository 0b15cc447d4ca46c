use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub dropout_p: f64,
    pub label_smoothing: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8000,
            d_model: 128,
            num_heads: 4,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            ffn_dim: 256,
            max_positions: 256,
            dropout_p: 0.1,
            label_smoothing: 0.1,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("num_encoder_layers", self.num_encoder_layers),
            ("num_decoder_layers", self.num_decoder_layers),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        for (name, v) in [("dropout_p", self.dropout_p), ("label_smoothing", self.label_smoothing)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.dropout_p >= 1.0 {
            return Err(Error::InvalidConfig("dropout_p must be below 1".into()));
        }
        Ok(())
    }

    /// Every tensor name with its shape, in a fixed order.
    pub fn tensor_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (d, f, v) = (self.d_model, self.ffn_dim, self.vocab_size);
        let mut out = vec![("embed.tokens".to_string(), (v, d))];
        let norm = |out: &mut Vec<(String, (usize, usize))>, p: &str| {
            out.push((format!("{p}.gain"), (1, d)));
            out.push((format!("{p}.bias"), (1, d)));
        };
        let attn = |out: &mut Vec<(String, (usize, usize))>, p: &str| {
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{p}.w{w}"), (d, d)));
                out.push((format!("{p}.b{w}"), (1, d)));
            }
        };
        let ffn = |out: &mut Vec<(String, (usize, usize))>, p: &str| {
            out.push((format!("{p}.w1"), (d, f)));
            out.push((format!("{p}.b1"), (1, f)));
            out.push((format!("{p}.w2"), (f, d)));
            out.push((format!("{p}.b2"), (1, d)));
        };
        for l in 0..self.num_encoder_layers {
            norm(&mut out, &format!("enc.{l}.attn_norm"));
            attn(&mut out, &format!("enc.{l}.self_attn"));
            norm(&mut out, &format!("enc.{l}.ffn_norm"));
            ffn(&mut out, &format!("enc.{l}.ffn"));
        }
        norm(&mut out, "enc.final_norm");
        for l in 0..self.num_decoder_layers {
            norm(&mut out, &format!("dec.{l}.self_attn_norm"));
            attn(&mut out, &format!("dec.{l}.self_attn"));
            norm(&mut out, &format!("dec.{l}.cross_attn_norm"));
            attn(&mut out, &format!("dec.{l}.cross_attn"));
            norm(&mut out, &format!("dec.{l}.ffn_norm"));
            ffn(&mut out, &format!("dec.{l}.ffn"));
        }
        norm(&mut out, "dec.final_norm");
        out.push(("output.proj".into(), (d, v)));
        out.push(("output.bias".into(), (1, v)));
        out
    }
}

/// Named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Matrix>,
}

impl ModelParams {
    pub fn from_tensors(config: &TransformerConfig, tensors: BTreeMap<String, Matrix>) -> Result<Self> {
        let shapes = config.tensor_shapes();
        for (name, shape) in &shapes {
            match tensors.get(name) {
                None => return Err(Error::UnknownTensor(name.clone())),
                Some(m) if m.shape() != *shape => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: *shape,
                        found: m.shape(),
                    })
                }
                Some(m) if !m.all_finite() => {
                    return Err(Error::InvalidArgument(format!("tensor `{name}` has non-finite values")))
                }
                Some(_) => {}
            }
        }
        if tensors.len() != shapes.len() {
            let extra = tensors
                .keys()
                .find(|k| !shapes.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::UnknownTensor(extra));
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> &Matrix {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|m| m.data().len()).sum()
    }

    pub fn into_tensors(self) -> BTreeMap<String, Matrix> {
        self.tensors
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, m)| (k.clone(), Matrix::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }
}

fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Initial value of one tensor.
///
/// Weight matrices are Xavier-uniform, `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`. Token embeddings are `U(-a, a)` with
/// `a = sqrt(3 / d_model)`, so that after the `sqrt(d_model)` input scaling
/// each coordinate has unit variance. Biases and layer-norm offsets are 0,
/// layer-norm gains 1. Each tensor draws from its own stream derived from
/// `(seed, name)`, so adding or dropping a tensor never shifts the others.
pub fn init_tensor(name: &str, shape: (usize, usize), seed: u64) -> Matrix {
    let (rows, cols) = shape;
    if name.ends_with(".gain") {
        return Matrix::filled(rows, cols, 1.0);
    }
    let last = name.rsplit('.').next().unwrap_or("");
    if rows == 1 && (last == "bias" || last.starts_with('b')) {
        return Matrix::zeros(rows, cols);
    }
    let bound = if name == "embed.tokens" {
        (3.0 / cols as f64).sqrt()
    } else {
        (6.0 / (rows + cols) as f64).sqrt()
    };
    let mut rng = tensor_rng(seed, name);
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn init_params(config: &TransformerConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let tensors = config
        .tensor_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let m = init_tensor(&name, shape, seed);
            (name, m)
        })
        .collect();
    Ok(ModelParams { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 10,
            d_model: 8,
            num_heads: 2,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            ffn_dim: 16,
            max_positions: 16,
            dropout_p: 0.0,
            label_smoothing: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&tiny(), 3).unwrap();
        let b = init_params(&tiny(), 3).unwrap();
        assert_eq!(a, b);
        let c = init_params(&tiny(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_and_norms() {
        let p = init_params(&tiny(), 0).unwrap();
        assert_eq!(p.tensor("embed.tokens").shape(), (10, 8));
        assert_eq!(p.tensor("output.proj").shape(), (8, 10));
        for (name, m) in p.iter() {
            if name.ends_with(".gain") {
                assert!(m.data().iter().all(|&v| v == 1.0));
            }
            if name.ends_with("norm.bias") || name.ends_with(".bq") || name.ends_with(".b1") {
                assert!(m.data().iter().all(|&v| v == 0.0));
            }
        }
        assert!(p.tensor("enc.0.self_attn.wq").data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rejects_bad_heads() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(matches!(init_params(&c, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let p = init_params(&tiny(), 0).unwrap();
        let mut t = p.clone().into_tensors();
        t.insert("output.bias".into(), Matrix::zeros(1, 3));
        let err = ModelParams::from_tensors(&tiny(), t).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { ref name, .. } if name == "output.bias"));
    }
}
