use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Hyperparameters shared by the GPT baseline and the FTP model.
///
/// The GPT baseline uses only the encoder fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Maximum encoder sequence length.
    pub enc_ctx: usize,
    /// Number of future tokens the decoder predicts.
    pub n_future: usize,
    /// Length of the pseudo-sequence the decoder cross-attends to.
    pub pseudo_seq: usize,
    /// Per-offset loss discount.
    pub gamma: f64,
    pub dropout: f64,
    pub xpos_scale_base: f64,
}

impl Default for ModelConfig {
    /// The full-size configuration: 12 x 768 encoder with 12 heads, SwiGLU
    /// expansion 3, a 3-layer decoder, 12-slot pseudo-sequence, 8 future tokens.
    fn default() -> Self {
        Self {
            vocab_size: 50_304,
            dim: 768,
            enc_layers: 12,
            dec_layers: 3,
            heads: 12,
            mlp_dim: 2304,
            enc_ctx: 1024,
            n_future: 8,
            pseudo_seq: 12,
            gamma: 0.8,
            dropout: 0.0,
            xpos_scale_base: 512.0,
        }
    }
}

const KEYS: [&str; 12] = [
    "vocab_size",
    "dim",
    "enc_layers",
    "dec_layers",
    "heads",
    "mlp_dim",
    "enc_ctx",
    "n_future",
    "pseudo_seq",
    "gamma",
    "dropout",
    "xpos_scale_base",
];

impl ModelConfig {
    /// A small configuration for tests and desk experiments.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            dim: 32,
            enc_layers: 2,
            dec_layers: 1,
            heads: 2,
            mlp_dim: 96,
            enc_ctx: 64,
            n_future: 4,
            pseudo_seq: 4,
            gamma: 0.8,
            dropout: 0.0,
            xpos_scale_base: 512.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.dim == 0 || self.heads == 0 || self.mlp_dim == 0 {
            return fail("vocab_size, dim, heads and mlp_dim must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!(
                "head_dim {} must be even for rotary pairing",
                self.head_dim()
            ));
        }
        if self.enc_ctx == 0 {
            return fail("enc_ctx must be positive".into());
        }
        if self.n_future == 0 || self.pseudo_seq == 0 {
            return fail("n_future and pseudo_seq must be at least 1".into());
        }
        // gamma = 0 is the degenerate first-token-only weighting
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.xpos_scale_base <= 0.0 {
            return fail("xpos_scale_base must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let vals: [String; 12] = [
            self.vocab_size.to_string(),
            self.dim.to_string(),
            self.enc_layers.to_string(),
            self.dec_layers.to_string(),
            self.heads.to_string(),
            self.mlp_dim.to_string(),
            self.enc_ctx.to_string(),
            self.n_future.to_string(),
            self.pseudo_seq.to_string(),
            format!("{:?}", self.gamma),
            format!("{:?}", self.dropout),
            format!("{:?}", self.xpos_scale_base),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(vals) {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Apply a single `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value {value:?} for model.{key}"));
        let us = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        let fl = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        match key {
            "vocab_size" => self.vocab_size = us(value)?,
            "dim" => self.dim = us(value)?,
            "enc_layers" => self.enc_layers = us(value)?,
            "dec_layers" => self.dec_layers = us(value)?,
            "heads" => self.heads = us(value)?,
            "mlp_dim" => self.mlp_dim = us(value)?,
            "enc_ctx" => self.enc_ctx = us(value)?,
            "n_future" => self.n_future = us(value)?,
            "pseudo_seq" => self.pseudo_seq = us(value)?,
            "gamma" => self.gamma = fl(value)?,
            "dropout" => self.dropout = fl(value)?,
            "xpos_scale_base" => self.xpos_scale_base = fl(value)?,
            _ => return Err(Error::Config(format!("unknown key model.{key}"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed line {line:?}")))?;
            cfg.set(k.trim(), v)?;
            seen.push(k.trim().to_string());
        }
        if let Some(missing) = KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
            return Err(Error::Config(format!("missing key {missing}")));
        }
        Ok(cfg)
    }

    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }
}
