//! Byte tokenizer, in-memory token corpora and aligned encoder/decoder
//! batches.
//!
//! A window of `T + N` tokens yields encoder input `w[0..T]` and, for every
//! position `t`, decoder input `w[t..t+N]` and decoder target `w[t+1..t+N+1]`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

pub const BYTE_PAD: u32 = 256;
pub const BYTE_EOS: u32 = 257;
pub const BYTE_VOCAB: usize = 258;

/// Byte-level tokenizer: ids 0..=255 are raw bytes, followed by pad and eos.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const NAME: &'static str = "byte";

    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB
    }

    pub fn pad(&self) -> u32 {
        BYTE_PAD
    }

    pub fn eos(&self) -> u32 {
        BYTE_EOS
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| b as u32).collect()
    }

    /// Bytes for `ids`; pad and eos produce no output.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                BYTE_PAD | BYTE_EOS => {}
                _ => {
                    return Err(Error::Index {
                        what: "token id",
                        index: id as usize,
                        bound: BYTE_VOCAB,
                    })
                }
            }
        }
        Ok(out)
    }

    /// Lossy UTF-8 rendering of `decode`.
    pub fn decode_text(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }
}

/// A flat token stream with its vocabulary bound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    ids: Vec<u32>,
    vocab_size: usize,
    tokenizer: String,
}

impl TokenCorpus {
    pub fn new(ids: Vec<u32>, vocab_size: usize, tokenizer: &str) -> Result<Self> {
        if let Some(pos) = ids.iter().position(|&id| id as usize >= vocab_size) {
            return Err(Error::Index {
                what: "corpus token id",
                index: ids[pos] as usize,
                bound: vocab_size,
            });
        }
        Ok(Self {
            ids,
            vocab_size,
            tokenizer: tokenizer.into(),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let tok = ByteTokenizer;
        Self {
            ids: tok.encode(bytes),
            vocab_size: tok.vocab_size(),
            tokenizer: ByteTokenizer::NAME.into(),
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokenizer(&self) -> &str {
        &self.tokenizer
    }

    /// Split at `frac` of the length into (head, tail), e.g. train/validation.
    pub fn split(&self, frac: f64) -> (TokenCorpus, TokenCorpus) {
        let cut = ((self.ids.len() as f64) * frac.clamp(0.0, 1.0)) as usize;
        let part = |ids: &[u32]| TokenCorpus {
            ids: ids.to_vec(),
            vocab_size: self.vocab_size,
            tokenizer: self.tokenizer.clone(),
        };
        (part(&self.ids[..cut]), part(&self.ids[cut..]))
    }
}

/// Start offset of a uniformly random window of `len` tokens.
pub fn sample_start<R: Rng + ?Sized>(corpus_len: usize, len: usize, rng: &mut R) -> Result<usize> {
    if len == 0 || corpus_len < len {
        return Err(Error::contract(format!(
            "corpus of {corpus_len} tokens cannot supply a window of {len}"
        )));
    }
    Ok(rng.gen_range(0..=corpus_len - len))
}

/// A contiguous window of `t + n` tokens.
pub fn sample_window<R: Rng + ?Sized>(
    corpus: &TokenCorpus,
    rng: &mut R,
    t: usize,
    n: usize,
) -> Result<Vec<u32>> {
    let start = sample_start(corpus.len(), t + n, rng)?;
    Ok(corpus.ids[start..start + t + n].to_vec())
}

/// Aligned training batch. All arrays are row-major; `[B, T, N]` arrays
/// index `(b * T + t) * N + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub b: usize,
    pub t: usize,
    pub n: usize,
    pub enc_tokens: Vec<u32>,
    pub dec_in: Vec<u32>,
    pub dec_target: Vec<u32>,
    pub loss_mask: Vec<u8>,
}

impl Batch {
    pub fn idx(&self, b: usize, t: usize, k: usize) -> usize {
        (b * self.t + t) * self.n + k
    }

    /// Flattened `[B * T]` positions with at least one active target.
    pub fn active_rows(&self) -> Vec<usize> {
        (0..self.b * self.t)
            .filter(|&r| {
                self.loss_mask[r * self.n..(r + 1) * self.n]
                    .iter()
                    .any(|&m| m != 0)
            })
            .collect()
    }

    /// Checks the alignment invariants; used by tests and debug builds.
    pub fn check(&self) -> Result<()> {
        let (bt, btn) = (self.b * self.t, self.b * self.t * self.n);
        if self.enc_tokens.len() != bt
            || self.dec_in.len() != btn
            || self.dec_target.len() != btn
            || self.loss_mask.len() != btn
        {
            return Err(Error::contract("batch arrays disagree with [B, T, N]"));
        }
        for r in 0..bt {
            if self.dec_in[r * self.n] != self.enc_tokens[r] {
                return Err(Error::Alignment(format!(
                    "decoder seed differs from encoder token at row {r}"
                )));
            }
            for k in 1..self.n {
                if self.dec_in[r * self.n + k] != self.dec_target[r * self.n + k - 1] {
                    return Err(Error::Alignment(format!(
                        "decoder input not shifted target at row {r}, k {k}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Build a batch from equal-length windows of `t + n` tokens. Targets equal to
/// `pad` (if any) are masked out.
pub fn make_batch_padded(
    windows: &[Vec<u32>],
    t: usize,
    n: usize,
    pad: Option<u32>,
) -> Result<Batch> {
    if windows.is_empty() || n == 0 || t == 0 {
        return Err(Error::contract(
            "batch needs at least one window and t, n >= 1",
        ));
    }
    if let Some(w) = windows.iter().find(|w| w.len() != t + n) {
        return Err(Error::contract(format!(
            "window length {} differs from t + n = {}",
            w.len(),
            t + n
        )));
    }
    let b = windows.len();
    let mut batch = Batch {
        b,
        t,
        n,
        enc_tokens: Vec::with_capacity(b * t),
        dec_in: Vec::with_capacity(b * t * n),
        dec_target: Vec::with_capacity(b * t * n),
        loss_mask: Vec::with_capacity(b * t * n),
    };
    for w in windows {
        batch.enc_tokens.extend_from_slice(&w[..t]);
        for pos in 0..t {
            batch.dec_in.extend_from_slice(&w[pos..pos + n]);
            for &y in &w[pos + 1..pos + n + 1] {
                batch.dec_target.push(y);
                batch.loss_mask.push(u8::from(Some(y) != pad));
            }
        }
    }
    Ok(batch)
}

/// Batch with an all-ones mask (corpus data carries no padding).
pub fn make_batch(windows: &[Vec<u32>], t: usize, n: usize) -> Result<Batch> {
    make_batch_padded(windows, t, n, None)
}

/// `b` independently sampled windows assembled into a batch.
pub fn sample_batch<R: Rng + ?Sized>(
    corpus: &TokenCorpus,
    rng: &mut R,
    b: usize,
    t: usize,
    n: usize,
) -> Result<Batch> {
    let windows = (0..b)
        .map(|_| sample_window(corpus, rng, t, n))
        .collect::<Result<Vec<_>>>()?;
    make_batch(&windows, t, n)
}
