use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{AttnLayout, Graph, Var};
use super::params::{ModelParams, TransformerConfig};
use super::tensor::Matrix;
use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const NUM_SPECIAL: usize = 4;

/// A padded batch of sentence pairs, flattened row-major.
///
/// Sources carry a trailing end token. The decoder input is the begin token
/// followed by the target; the decoder output is the target followed by the
/// end token. Masks are true at real (non-pad) positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_mask: Vec<bool>,
}

impl Batch {
    pub fn new(pairs: &[(Vec<usize>, Vec<usize>)]) -> Self {
        Self::with_min_lengths(pairs, 0, 0)
    }

    /// Like [`Batch::new`] but pads to at least the given lengths.
    pub fn with_min_lengths(pairs: &[(Vec<usize>, Vec<usize>)], min_src: usize, min_tgt: usize) -> Self {
        let batch_size = pairs.len();
        let src_len = pairs.iter().map(|(s, _)| s.len() + 1).max().unwrap_or(0).max(min_src);
        let tgt_len = pairs.iter().map(|(_, t)| t.len() + 1).max().unwrap_or(0).max(min_tgt);
        let mut b = Batch {
            batch_size,
            src_len,
            tgt_len,
            src: vec![PAD_ID; batch_size * src_len],
            src_mask: vec![false; batch_size * src_len],
            tgt_in: vec![PAD_ID; batch_size * tgt_len],
            tgt_out: vec![PAD_ID; batch_size * tgt_len],
            tgt_mask: vec![false; batch_size * tgt_len],
        };
        for (i, (s, t)) in pairs.iter().enumerate() {
            for (j, &id) in s.iter().chain(std::iter::once(&EOS_ID)).enumerate() {
                b.src[i * src_len + j] = id;
                b.src_mask[i * src_len + j] = true;
            }
            for j in 0..=t.len() {
                let r = i * tgt_len + j;
                b.tgt_in[r] = if j == 0 { BOS_ID } else { t[j - 1] };
                b.tgt_out[r] = if j == t.len() { EOS_ID } else { t[j] };
                b.tgt_mask[r] = true;
            }
        }
        b
    }

    pub fn num_target_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|&&m| m).count()
    }

    pub fn validate(&self, config: &TransformerConfig) -> Result<()> {
        for len in [self.src_len, self.tgt_len] {
            if len > config.max_positions {
                return Err(Error::SequenceTooLong {
                    len,
                    max: config.max_positions,
                });
            }
        }
        let ids = self.src.iter().chain(&self.tgt_in).chain(&self.tgt_out);
        if let Some(&id) = ids.into_iter().find(|&&id| id >= config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: config.vocab_size,
            });
        }
        let consistent = |ids: &[usize], mask: &[bool]| ids.iter().zip(mask).all(|(&id, &m)| m || id == PAD_ID);
        if !consistent(&self.src, &self.src_mask)
            || !consistent(&self.tgt_in, &self.tgt_mask)
            || !consistent(&self.tgt_out, &self.tgt_mask)
        {
            return Err(Error::InvalidArgument("batch masks disagree with pad positions".into()));
        }
        Ok(())
    }
}

/// Sinusoidal position encodings for positions `0..len`.
pub fn positional_encoding(len: usize, d_model: usize) -> Matrix {
    let mut pe = Matrix::zeros(len, d_model);
    for pos in 0..len {
        let row = pe.row_mut(pos);
        for (i, v) in row.iter_mut().enumerate() {
            let exponent = (2 * (i / 2)) as f64 / d_model as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            *v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Position encodings tiled over a batch (`batch * len` rows).
fn tiled_positions(batch: usize, len: usize, d_model: usize) -> Matrix {
    let pe = positional_encoding(len, d_model);
    let mut out = Matrix::zeros(batch * len, d_model);
    for b in 0..batch {
        for p in 0..len {
            out.row_mut(b * len + p).copy_from_slice(pe.row(p));
        }
    }
    out
}

/// Parameters registered as leaves of a graph.
pub(crate) struct Bound<'a> {
    pub vars: BTreeMap<&'a str, Var>,
}

impl<'a> Bound<'a> {
    pub fn new(graph: &mut Graph, params: &'a ModelParams) -> Self {
        let vars = params
            .iter()
            .map(|(name, m)| (name.as_str(), graph.leaf(m.clone())))
            .collect();
        Self { vars }
    }

    fn v(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor `{name}`"))
    }
}

/// Graph builder for one forward pass; `rng` enables dropout.
pub(crate) struct Forward<'g, 'p, 'r> {
    pub graph: &'g mut Graph,
    pub params: &'g Bound<'p>,
    pub config: &'g TransformerConfig,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl Forward<'_, '_, '_> {
    fn dropout(&mut self, x: Var) -> Var {
        let p = self.config.dropout_p;
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.graph.value(x).data().len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.graph.dropout(x, mask)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Var {
        let gain = self.params.v(&format!("{prefix}.gain"));
        let bias = self.params.v(&format!("{prefix}.bias"));
        self.graph.layer_norm(x, gain, bias)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Var {
        let h = self.graph.matmul(x, self.params.v(w));
        self.graph.add_bias(h, self.params.v(b))
    }

    fn attention(&mut self, query: Var, memory: Var, prefix: &str, layout: AttnLayout) -> Var {
        let q = self.linear(query, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
        let k = self.linear(memory, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
        let v = self.linear(memory, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
        let a = self.graph.attention(q, k, v, layout);
        self.linear(a, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Var {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
        let h = self.graph.relu(h);
        let h = self.dropout(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn embed(&mut self, ids: &[usize], batch: usize, len: usize) -> Var {
        let d = self.config.d_model;
        let tokens = self.graph.gather(self.params.v("embed.tokens"), ids, (d as f64).sqrt());
        let pe = self.graph.leaf(tiled_positions(batch, len, d));
        let x = self.graph.add(tokens, pe);
        self.dropout(x)
    }

    fn residual(&mut self, x: Var, y: Var) -> Var {
        let y = self.dropout(y);
        self.graph.add(x, y)
    }

    /// Encoder output rows `b * src_len + j`, after the final norm.
    pub fn encode(&mut self, src: &[usize], src_mask: &[bool], batch: usize, src_len: usize) -> Var {
        let mut x = self.embed(src, batch, src_len);
        let layout = AttnLayout {
            batch,
            q_len: src_len,
            k_len: src_len,
            heads: self.config.num_heads,
            causal: false,
            key_valid: src_mask.to_vec(),
        };
        for l in 0..self.config.num_encoder_layers {
            let h = self.norm(x, &format!("enc.{l}.attn_norm"));
            let a = self.attention(h, h, &format!("enc.{l}.self_attn"), layout.clone());
            x = self.residual(x, a);
            let h = self.norm(x, &format!("enc.{l}.ffn_norm"));
            let f = self.ffn(h, &format!("enc.{l}.ffn"));
            x = self.residual(x, f);
        }
        self.norm(x, "enc.final_norm")
    }

    /// Decoder logits, rows `b * tgt_len + i`.
    pub fn decode(&mut self, memory: Var, batch: &Batch) -> Var {
        let (bs, tl, sl) = (batch.batch_size, batch.tgt_len, batch.src_len);
        let mut x = self.embed(&batch.tgt_in, bs, tl);
        let self_layout = AttnLayout {
            batch: bs,
            q_len: tl,
            k_len: tl,
            heads: self.config.num_heads,
            causal: true,
            key_valid: batch.tgt_mask.clone(),
        };
        let cross_layout = AttnLayout {
            batch: bs,
            q_len: tl,
            k_len: sl,
            heads: self.config.num_heads,
            causal: false,
            key_valid: batch.src_mask.clone(),
        };
        for l in 0..self.config.num_decoder_layers {
            let h = self.norm(x, &format!("dec.{l}.self_attn_norm"));
            let a = self.attention(h, h, &format!("dec.{l}.self_attn"), self_layout.clone());
            x = self.residual(x, a);
            let h = self.norm(x, &format!("dec.{l}.cross_attn_norm"));
            let a = self.attention(h, memory, &format!("dec.{l}.cross_attn"), cross_layout.clone());
            x = self.residual(x, a);
            let h = self.norm(x, &format!("dec.{l}.ffn_norm"));
            let f = self.ffn(h, &format!("dec.{l}.ffn"));
            x = self.residual(x, f);
        }
        let x = self.norm(x, "dec.final_norm");
        self.linear(x, "output.proj", "output.bias")
    }

    pub fn loss(&mut self, batch: &Batch) -> Var {
        let memory = self.encode(&batch.src, &batch.src_mask, batch.batch_size, batch.src_len);
        let logits = self.decode(memory, batch);
        let targets: Vec<Option<usize>> = batch
            .tgt_out
            .iter()
            .zip(&batch.tgt_mask)
            .map(|(&t, &m)| m.then_some(t))
            .collect();
        self.graph.cross_entropy(logits, &targets, self.config.label_smoothing)
    }
}

/// Mean label-smoothed cross-entropy over non-pad target positions, without
/// dropout. An all-pad batch has loss 0.
pub fn forward_loss(params: &ModelParams, batch: &Batch, config: &TransformerConfig) -> Result<f64> {
    batch.validate(config)?;
    let mut graph = Graph::new();
    let bound = Bound::new(&mut graph, params);
    let mut fwd = Forward {
        graph: &mut graph,
        params: &bound,
        config,
        rng: None,
    };
    let loss = fwd.loss(batch);
    Ok(graph.value(loss).get(0, 0))
}

/// Decoder logits for a batch, without dropout; `tgt_len * batch` rows.
pub fn forward_logits(params: &ModelParams, batch: &Batch, config: &TransformerConfig) -> Result<Matrix> {
    batch.validate(config)?;
    let mut graph = Graph::new();
    let bound = Bound::new(&mut graph, params);
    let mut fwd = Forward {
        graph: &mut graph,
        params: &bound,
        config,
        rng: None,
    };
    let memory = fwd.encode(&batch.src, &batch.src_mask, batch.batch_size, batch.src_len);
    let logits = fwd.decode(memory, batch);
    Ok(graph.value(logits).clone())
}

/// Dropout-free loss and its gradient for every parameter tensor.
pub fn loss_gradients(
    params: &ModelParams,
    batch: &Batch,
    config: &TransformerConfig,
) -> Result<(f64, BTreeMap<String, Matrix>)> {
    batch.validate(config)?;
    Ok(loss_and_grads(params, batch, config, None))
}

/// Loss and per-tensor gradients. `rng` enables dropout.
pub(crate) fn loss_and_grads(
    params: &ModelParams,
    batch: &Batch,
    config: &TransformerConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> (f64, BTreeMap<String, Matrix>) {
    let mut graph = Graph::new();
    let bound = Bound::new(&mut graph, params);
    let mut fwd = Forward {
        graph: &mut graph,
        params: &bound,
        config,
        rng,
    };
    let loss = fwd.loss(batch);
    let value = graph.value(loss).get(0, 0);
    let mut grads = graph.backward(loss);
    let out = bound
        .vars
        .iter()
        .map(|(name, var)| {
            let g = grads[var.index()].take().unwrap_or_else(|| {
                let m = params.tensor(name);
                Matrix::zeros(m.rows(), m.cols())
            });
            (name.to_string(), g)
        })
        .collect();
    (value, out)
}
