use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::{ModelConfig, ModelKind, TOKEN_EMBEDDING};

/// Exact parameter counts.
///
/// Norm weights are included in the blocks they belong to; the shared token
/// embedding is reported on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamBreakdown {
    pub encoder_layers: u64,
    pub encoder_final_norm: u64,
    pub projection: u64,
    pub decoder_layers: u64,
    pub decoder_final_norm: u64,
    pub decoder_positions: u64,
    pub embeddings: u64,
}

impl ParamBreakdown {
    /// Encoder blocks plus the final norm.
    pub fn encoder(&self) -> u64 {
        self.encoder_layers + self.encoder_final_norm
    }

    /// Decoder blocks, final norm and absolute position table.
    pub fn decoder(&self) -> u64 {
        self.decoder_layers + self.decoder_final_norm + self.decoder_positions
    }

    pub fn total(&self) -> u64 {
        self.encoder() + self.projection + self.decoder() + self.embeddings
    }
}

/// Closed-form parameter accounting for `kind` under `cfg`.
pub fn count_parameters(kind: ModelKind, cfg: &ModelConfig) -> ParamBreakdown {
    let d = cfg.dim as u64;
    let mlp = cfg.mlp_dim as u64;
    let attention = 4 * d * d;
    let swiglu = 3 * d * mlp;
    let enc_layer = attention + swiglu + 2 * d;
    let mut b = ParamBreakdown {
        encoder_layers: cfg.enc_layers as u64 * enc_layer,
        encoder_final_norm: d,
        embeddings: cfg.vocab_size as u64 * d,
        ..Default::default()
    };
    if kind == ModelKind::Ftp {
        let dec_layer = 2 * attention + swiglu + 3 * d;
        b.projection = d * cfg.pseudo_seq as u64 * d;
        b.decoder_layers = cfg.dec_layers as u64 * dec_layer;
        b.decoder_final_norm = d;
        b.decoder_positions = cfg.n_future as u64 * d;
    }
    b
}

/// Names and shapes of every parameter tensor in initialization order.
pub fn expected_layout(kind: ModelKind, cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let mut out: Vec<(String, Vec<usize>)> =
        vec![(TOKEN_EMBEDDING.to_string(), vec![cfg.vocab_size, d])];
    let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.{w}"), vec![d, d]));
        }
    };
    let mlp = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.w_gate"), vec![d, cfg.mlp_dim]));
        out.push((format!("{p}.w_up"), vec![d, cfg.mlp_dim]));
        out.push((format!("{p}.w_down"), vec![cfg.mlp_dim, d]));
    };
    for i in 0..cfg.enc_layers {
        out.push((format!("enc.{i}.ln_attn"), vec![d]));
        attn(&mut out, &format!("enc.{i}.attn"));
        out.push((format!("enc.{i}.ln_mlp"), vec![d]));
        mlp(&mut out, &format!("enc.{i}.mlp"));
    }
    out.push(("enc.ln_f".to_string(), vec![d]));
    if kind == ModelKind::Ftp {
        out.push(("proj".to_string(), vec![d, cfg.pseudo_seq * d]));
        out.push(("dec.pos".to_string(), vec![cfg.n_future, d]));
        for i in 0..cfg.dec_layers {
            out.push((format!("dec.{i}.ln_self"), vec![d]));
            attn(&mut out, &format!("dec.{i}.self"));
            out.push((format!("dec.{i}.ln_cross"), vec![d]));
            attn(&mut out, &format!("dec.{i}.cross"));
            out.push((format!("dec.{i}.ln_mlp"), vec![d]));
            mlp(&mut out, &format!("dec.{i}.mlp"));
        }
        out.push(("dec.ln_f".to_string(), vec![d]));
    }
    out
}
