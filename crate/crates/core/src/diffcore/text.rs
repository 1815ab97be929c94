//! Hashed-token prompt embeddings.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::nn::{Init, InitKind};

/// Token id reserved for the empty prompt.
pub const NULL_TOKEN: u32 = 0;
/// Attention bias applied to padded positions.
pub const PAD_BIAS: f64 = -1e4;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Lower-cased alphanumeric words hashed into `1..vocab`; the empty prompt
/// is the single null token.
pub fn tokenize(prompt: &str, vocab: usize, max_len: usize) -> Vec<u32> {
    let ids: Vec<u32> = prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(max_len)
        .map(|w| 1 + (fnv1a(&w.to_lowercase()) % (vocab as u64 - 1)) as u32)
        .collect();
    if ids.is_empty() {
        vec![NULL_TOKEN]
    } else {
        ids
    }
}

/// Padded text batch: embeddings `(B, L, D)` and key bias `(B, 1, L)`.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub embeddings: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    tokens: Tensor,
    positions: Tensor,
    vocab: usize,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(init: &mut Init, vocab: usize, max_len: usize, width: usize) -> Result<Self> {
        Ok(TextEncoder {
            tokens: init.param("tokens", &[vocab, width], InitKind::Normal(1.0))?,
            positions: init.param("positions", &[max_len, width], InitKind::Normal(0.1))?,
            vocab,
            max_len,
        })
    }

    /// Embedding sequence `(1, L, D)` for one prompt.
    pub fn embed_text(&self, prompt: &str) -> Result<Tensor> {
        Ok(self.embed_batch(&[prompt.to_string()])?.embeddings)
    }

    pub fn embed_batch(&self, prompts: &[String]) -> Result<TextBatch> {
        let dev = self.tokens.device();
        let toks: Vec<Vec<u32>> = prompts.iter().map(|p| tokenize(p, self.vocab, self.max_len)).collect();
        let len = toks.iter().map(Vec::len).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(prompts.len() * len);
        let mut bias = Vec::with_capacity(prompts.len() * len);
        for t in &toks {
            for i in 0..len {
                ids.push(t.get(i).copied().unwrap_or(NULL_TOKEN));
                bias.push(if i < t.len() { 0.0 } else { PAD_BIAS });
            }
        }
        let b = prompts.len();
        let ids = Tensor::from_vec(ids, b * len, dev)?;
        let emb = self.tokens.index_select(&ids, 0)?.reshape((b, len, ()))?;
        let pos = self.positions.narrow(0, 0, len)?.unsqueeze(0)?;
        let embeddings = emb.broadcast_add(&pos)?;
        let bias = Tensor::from_vec(bias, (b, 1, len), dev)?.to_dtype(self.tokens.dtype())?;
        Ok(TextBatch { embeddings, bias })
    }

    pub fn width(&self) -> Result<usize> {
        Ok(self.tokens.dim(D::Minus1)?)
    }
}
