use std::collections::HashMap;

use super::forward::{BOS_ID, EOS_ID, NUM_SPECIAL, PAD_ID, UNK_ID};
use crate::subword::{apply_bpe, BpeModel, RESERVED_TOKENS, END_OF_WORD};
use crate::Result;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token-id mapping: the four special ids followed by the subword vocabulary
/// in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_bpe(bpe: &BpeModel) -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(bpe.vocab().iter().cloned())
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Segments a normalized line and maps it to ids; unknown subwords map to
    /// the unknown id.
    pub fn encode_line(&self, line: &str, bpe: &BpeModel, dropout_p: f64, seed: u64) -> Result<Vec<usize>> {
        let seg = apply_bpe(line, bpe, dropout_p, seed)?;
        Ok(seg.tokens.iter().map(|t| self.id(t)).collect())
    }

    /// Best-effort text for model output. Special ids are dropped, a word
    /// left open at the end is closed, and empty words vanish.
    pub fn decode_ids(&self, ids: &[usize]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut buf = String::new();
        for &id in ids {
            if matches!(id, PAD_ID | BOS_ID | EOS_ID | UNK_ID) {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            if RESERVED_TOKENS.contains(&tok) {
                if !buf.is_empty() {
                    words.push(std::mem::take(&mut buf));
                }
                words.push(tok.to_string());
                continue;
            }
            match tok.strip_suffix(END_OF_WORD) {
                Some(body) => {
                    buf.push_str(body);
                    if !buf.is_empty() {
                        words.push(std::mem::take(&mut buf));
                    }
                }
                None => buf.push_str(tok),
            }
        }
        if !buf.is_empty() {
            words.push(buf);
        }
        words.join(" ")
    }
}
