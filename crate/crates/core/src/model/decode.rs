//! Greedy and beam-search decoding with an incremental key/value cache.

use serde::{Deserialize, Serialize};

use super::forward::{positional_encoding, Bound, Forward, BOS_ID, EOS_ID, PAD_ID};
use super::graph::{dot, layer_norm_row, log_sum_exp, masked_softmax, Graph};
use super::params::{ModelParams, TransformerConfig};
use super::tensor::{gemm, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    /// Finished hypotheses are ranked by `log_prob / len^length_penalty`,
    /// where `len` counts the end token.
    Beam { beam_size: usize, length_penalty: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeOptions {
    #[serde(flatten)]
    pub mode: DecodeMode,
    /// Upper bound on emitted tokens, excluding the end token.
    pub max_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    /// Output ids without begin/end tokens.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// True when `max_len` was reached before the end token.
    pub truncated: bool,
}

struct AttnW<'a> {
    wq: &'a Matrix,
    bq: &'a Matrix,
    wk: &'a Matrix,
    bk: &'a Matrix,
    wv: &'a Matrix,
    bv: &'a Matrix,
    wo: &'a Matrix,
    bo: &'a Matrix,
}

impl<'a> AttnW<'a> {
    fn new(p: &'a ModelParams, prefix: &str) -> Self {
        let t = |s: &str| p.tensor(&format!("{prefix}.{s}"));
        Self {
            wq: t("wq"),
            bq: t("bq"),
            wk: t("wk"),
            bk: t("bk"),
            wv: t("wv"),
            bv: t("bv"),
            wo: t("wo"),
            bo: t("bo"),
        }
    }
}

struct NormW<'a> {
    gain: &'a [f64],
    bias: &'a [f64],
}

impl<'a> NormW<'a> {
    fn new(p: &'a ModelParams, prefix: &str) -> Self {
        Self {
            gain: p.tensor(&format!("{prefix}.gain")).data(),
            bias: p.tensor(&format!("{prefix}.bias")).data(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        layer_norm_row(x, self.gain, self.bias, &mut out, &mut xhat);
        out
    }
}

struct LayerW<'a> {
    self_norm: NormW<'a>,
    self_attn: AttnW<'a>,
    cross_norm: NormW<'a>,
    cross_attn: AttnW<'a>,
    ffn_norm: NormW<'a>,
    w1: &'a Matrix,
    b1: &'a Matrix,
    w2: &'a Matrix,
    b2: &'a Matrix,
    /// Cross-attention keys and values over the encoder output.
    cross_k: Matrix,
    cross_v: Matrix,
}

/// `x * w + b` for a single row.
fn affine(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = b.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv;
        }
    }
    out
}

fn affine_rows(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for r in 0..x.rows() {
        out.row_mut(r).copy_from_slice(b.data());
    }
    gemm(1.0, x, false, w, false, 1.0, &mut out);
    out
}

/// One query row against `len` key/value rows stored flat with width `d`.
fn attend(q: &[f64], keys: &[f64], values: &[f64], len: usize, heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; len];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(&q[cols.clone()], &keys[j * d + cols.start..j * d + cols.end]) * scale;
        }
        masked_softmax(&mut scores, |_| true);
        for (j, &p) in scores.iter().enumerate() {
            let v = &values[j * d + cols.start..j * d + cols.end];
            for (o, vc) in out[cols.clone()].iter_mut().zip(v) {
                *o += p * vc;
            }
        }
    }
    out
}

/// Per-hypothesis self-attention cache.
#[derive(Clone)]
struct DecState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

/// Decoder weights bound to one encoded source sentence.
pub(crate) struct Decoder<'a> {
    config: &'a TransformerConfig,
    embed: &'a Matrix,
    layers: Vec<LayerW<'a>>,
    final_norm: NormW<'a>,
    proj: &'a Matrix,
    proj_bias: &'a Matrix,
    positions: Matrix,
    src_len: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ModelParams, config: &'a TransformerConfig, src: &[usize]) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::EmptySource);
        }
        let src_len = src.len() + 1;
        if src_len > config.max_positions {
            return Err(Error::SequenceTooLong {
                len: src_len,
                max: config.max_positions,
            });
        }
        if let Some(&id) = src.iter().find(|&&id| id >= config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: config.vocab_size,
            });
        }
        let ids: Vec<usize> = src.iter().copied().chain(std::iter::once(EOS_ID)).collect();
        let mut graph = Graph::new();
        let bound = Bound::new(&mut graph, params);
        let mut fwd = Forward {
            graph: &mut graph,
            params: &bound,
            config,
            rng: None,
        };
        let mem = fwd.encode(&ids, &vec![true; src_len], 1, src_len);
        let memory = graph.value(mem).clone();

        let layers = (0..config.num_decoder_layers)
            .map(|l| {
                let t = |s: &str| params.tensor(&format!("dec.{l}.{s}"));
                let cross_attn = AttnW::new(params, &format!("dec.{l}.cross_attn"));
                let cross_k = affine_rows(&memory, cross_attn.wk, cross_attn.bk);
                let cross_v = affine_rows(&memory, cross_attn.wv, cross_attn.bv);
                LayerW {
                    self_norm: NormW::new(params, &format!("dec.{l}.self_attn_norm")),
                    self_attn: AttnW::new(params, &format!("dec.{l}.self_attn")),
                    cross_norm: NormW::new(params, &format!("dec.{l}.cross_attn_norm")),
                    cross_attn,
                    ffn_norm: NormW::new(params, &format!("dec.{l}.ffn_norm")),
                    w1: t("ffn.w1"),
                    b1: t("ffn.b1"),
                    w2: t("ffn.w2"),
                    b2: t("ffn.b2"),
                    cross_k,
                    cross_v,
                }
            })
            .collect();
        Ok(Self {
            config,
            embed: params.tensor("embed.tokens"),
            layers,
            final_norm: NormW::new(params, "dec.final_norm"),
            proj: params.tensor("output.proj"),
            proj_bias: params.tensor("output.bias"),
            positions: positional_encoding(config.max_positions, config.d_model),
            src_len,
        })
    }

    fn start(&self) -> DecState {
        DecState {
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
            pos: 0,
        }
    }

    /// Feeds `token` at the next position and returns next-token logits.
    fn step(&self, state: &mut DecState, token: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let heads = self.config.num_heads;
        let scale = (d as f64).sqrt();
        let mut x: Vec<f64> = self
            .embed
            .row(token)
            .iter()
            .zip(self.positions.row(state.pos))
            .map(|(e, p)| e * scale + p)
            .collect();
        state.pos += 1;
        for (l, w) in self.layers.iter().enumerate() {
            let h = w.self_norm.apply(&x);
            let q = affine(&h, w.self_attn.wq, w.self_attn.bq);
            state.keys[l].extend(affine(&h, w.self_attn.wk, w.self_attn.bk));
            state.values[l].extend(affine(&h, w.self_attn.wv, w.self_attn.bv));
            let a = attend(&q, &state.keys[l], &state.values[l], state.pos, heads);
            add_into(&mut x, &affine(&a, w.self_attn.wo, w.self_attn.bo));

            let h = w.cross_norm.apply(&x);
            let q = affine(&h, w.cross_attn.wq, w.cross_attn.bq);
            let a = attend(&q, w.cross_k.data(), w.cross_v.data(), self.src_len, heads);
            add_into(&mut x, &affine(&a, w.cross_attn.wo, w.cross_attn.bo));

            let h = w.ffn_norm.apply(&x);
            let mut f = affine(&h, w.w1, w.b1);
            f.iter_mut().for_each(|v| *v = v.max(0.0));
            add_into(&mut x, &affine(&f, w.w2, w.b2));
        }
        let h = self.final_norm.apply(&x);
        affine(&h, self.proj, self.proj_bias)
    }

    /// Log-probabilities with pad and begin tokens excluded.
    fn step_log_probs(&self, state: &mut DecState, token: usize) -> Vec<f64> {
        let mut logits = self.step(state, token);
        logits[PAD_ID] = f64::NEG_INFINITY;
        logits[BOS_ID] = f64::NEG_INFINITY;
        let lse = log_sum_exp(&logits);
        logits.iter_mut().for_each(|z| *z -= lse);
        logits
    }

    fn max_len(&self, requested: usize) -> usize {
        requested.min(self.config.max_positions)
    }

    pub fn greedy(&self, max_len: usize) -> Translation {
        let max_len = self.max_len(max_len);
        let mut state = self.start();
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        let mut prev = BOS_ID;
        while tokens.len() < max_len {
            let lp = self.step_log_probs(&mut state, prev);
            let best = argmax(&lp);
            log_prob += lp[best];
            if best == EOS_ID {
                return Translation {
                    tokens,
                    log_prob,
                    truncated: false,
                };
            }
            tokens.push(best);
            prev = best;
        }
        Translation {
            tokens,
            log_prob,
            truncated: true,
        }
    }

    pub fn beam(&self, beam_size: usize, length_penalty: f64, max_len: usize) -> Translation {
        struct Hyp {
            tokens: Vec<usize>,
            score: f64,
            state: DecState,
        }
        let max_len = self.max_len(max_len);
        let mut live = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
            state: self.start(),
        }];
        let mut finished: Vec<(f64, Translation)> = Vec::new();
        for _ in 0..max_len {
            // (total score, token log-prob, hypothesis, token)
            let mut cands: Vec<(f64, f64, usize, usize)> = Vec::new();
            let mut states = Vec::with_capacity(live.len());
            for (hi, hyp) in live.iter().enumerate() {
                let mut st = hyp.state.clone();
                let prev = hyp.tokens.last().copied().unwrap_or(BOS_ID);
                let lp = self.step_log_probs(&mut st, prev);
                for (tok, &l) in lp.iter().enumerate() {
                    if l.is_finite() {
                        cands.push((hyp.score + l, l, hi, tok));
                    }
                }
                states.push(st);
            }
            cands.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(b.1.total_cmp(&a.1))
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
            });
            let mut next = Vec::new();
            for &(score, _, hi, tok) in cands.iter().take(beam_size) {
                if tok == EOS_ID {
                    let tokens = live[hi].tokens.clone();
                    let norm = ((tokens.len() + 1) as f64).powf(length_penalty);
                    finished.push((
                        score / norm,
                        Translation {
                            tokens,
                            log_prob: score,
                            truncated: false,
                        },
                    ));
                } else {
                    let mut tokens = live[hi].tokens.clone();
                    tokens.push(tok);
                    next.push(Hyp {
                        tokens,
                        score,
                        state: states[hi].clone(),
                    });
                }
            }
            live = next;
            if live.is_empty() || finished.len() >= beam_size {
                break;
            }
        }
        if let Some(best) = best_finished(finished) {
            return best;
        }
        let best = live
            .into_iter()
            .next()
            .expect("beam keeps at least one live hypothesis until something finishes");
        Translation {
            tokens: best.tokens,
            log_prob: best.score,
            truncated: true,
        }
    }
}

fn best_finished(finished: Vec<(f64, Translation)>) -> Option<Translation> {
    let mut best: Option<(f64, Translation)> = None;
    for (s, t) in finished {
        if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
            best = Some((s, t));
        }
    }
    best.map(|(_, t)| t)
}

fn add_into(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Translates one source id sequence (without the end token).
///
/// An empty source is an error. Output stops at the end token or after
/// `max_len` tokens (capped at `max_positions`), in which case the result is
/// flagged as truncated.
pub fn translate(
    params: &ModelParams,
    config: &TransformerConfig,
    src: &[usize],
    options: &DecodeOptions,
) -> Result<Translation> {
    let dec = Decoder::new(params, config, src)?;
    Ok(match options.mode {
        DecodeMode::Greedy => dec.greedy(options.max_len),
        DecodeMode::Beam {
            beam_size,
            length_penalty,
        } => {
            if beam_size == 0 {
                return Err(Error::InvalidArgument("beam_size must be positive".into()));
            }
            dec.beam(beam_size, length_penalty, options.max_len)
        }
    })
}

#[cfg(test)]
pub(crate) fn incremental_logits(
    params: &ModelParams,
    config: &TransformerConfig,
    src: &[usize],
    tgt_in: &[usize],
) -> Vec<Vec<f64>> {
    let dec = Decoder::new(params, config, src).unwrap();
    let mut st = dec.start();
    tgt_in.iter().map(|&t| dec.step(&mut st, t)).collect()
}
