//! Bias-free transformer building blocks on a [`Tape`].

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use super::params::{normal_tensor, Bound, ParamStore};
use super::xpos::XposTables;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Residual dropout. Inactive without an RNG or when `p == 0`.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: Option<&'r mut dyn RngCore>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let p = self.p;
        match &mut self.rng {
            Some(rng) if p > 0.0 => {
                let keep = T::from_f64_lossy(1.0 / (1.0 - p));
                let n = tape.value(x).len();
                let mask = (0..n)
                    .map(|_| {
                        if rng.gen::<f64>() < p {
                            T::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }
}

/// Parameter shapes of one attention sublayer.
pub(crate) fn init_attention<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    out_std: f64,
    rng: &mut R,
) {
    for w in ["wq", "wk", "wv"] {
        store.insert(
            &format!("{prefix}.{w}"),
            normal_tensor(&[dim, dim], 0.02, rng),
        );
    }
    store.insert(
        &format!("{prefix}.wo"),
        normal_tensor(&[dim, dim], out_std, rng),
    );
}

pub(crate) fn init_mlp<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    hidden: usize,
    out_std: f64,
    rng: &mut R,
) {
    store.insert(
        &format!("{prefix}.w_gate"),
        normal_tensor(&[dim, hidden], 0.02, rng),
    );
    store.insert(
        &format!("{prefix}.w_up"),
        normal_tensor(&[dim, hidden], 0.02, rng),
    );
    store.insert(
        &format!("{prefix}.w_down"),
        normal_tensor(&[hidden, dim], out_std, rng),
    );
}

pub(crate) fn init_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) {
    store.insert(name, Tensor::full(&[dim], T::one()));
}

/// `(silu(x W_gate) * x W_up) W_down`.
pub fn swiglu_mlp<T: Scalar>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gate = tape.matmul(x, p.var(&format!("{prefix}.w_gate")))?;
    let up = tape.matmul(x, p.var(&format!("{prefix}.w_up")))?;
    let gate = tape.silu(gate);
    let h = tape.mul(gate, up)?;
    tape.matmul(h, p.var(&format!("{prefix}.w_down")))
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    tape.reshape(x, &[b, t, heads, d / heads])
}

fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    // [B, H, T, hd] -> [B, T, H*hd]
    let s = tape.shape(x).to_vec();
    let y = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(y, &[s[0], s[2], s[1] * s[3]])
}

/// Multi-head causal self-attention over `x` `[B, T, dim]` with XPOS applied
/// to queries and keys. `tables` must cover the `T` positions.
pub fn causal_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    tables: &XposTables<T>,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("causal_self_attention", &s, &[]));
    }
    let hd = s[2] / heads;
    let q = tape.matmul(x, p.var(&format!("{prefix}.wq")))?;
    let k = tape.matmul(x, p.var(&format!("{prefix}.wk")))?;
    let v = tape.matmul(x, p.var(&format!("{prefix}.wv")))?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let q = tape.rotary(q, tables.q_cos.clone(), tables.q_sin.clone())?;
    let k = tape.rotary(k, tables.k_cos.clone(), tables.k_sin.clone())?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.permute(k, &[0, 2, 1, 3])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, T::one() / T::from_usize(hd).unwrap().sqrt());
    let att = tape.causal_softmax(scores, 0)?;
    let y = tape.matmul(att, v)?;
    let y = merge_heads(tape, y)?;
    tape.matmul(y, p.var(&format!("{prefix}.wo")))
}

/// Unmasked multi-head attention from `x` `[B, Nd, dim]` to every slot of
/// `kv` `[B, S, dim]`. No positional signal is injected.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    kv: Var,
    heads: usize,
) -> Result<Var> {
    let (sx, skv) = (tape.shape(x).to_vec(), tape.shape(kv).to_vec());
    if sx.len() != 3 || skv.len() != 3 || sx[0] != skv[0] || sx[2] != skv[2] {
        return Err(Error::shape("cross_attention", &sx, &skv));
    }
    let hd = sx[2] / heads;
    let q = tape.matmul(x, p.var(&format!("{prefix}.wq")))?;
    let k = tape.matmul(kv, p.var(&format!("{prefix}.wk")))?;
    let v = tape.matmul(kv, p.var(&format!("{prefix}.wv")))?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.permute(k, &[0, 2, 1, 3])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, T::one() / T::from_usize(hd).unwrap().sqrt());
    let att = tape.softmax_rows(scores);
    let y = tape.matmul(att, v)?;
    let y = merge_heads(tape, y)?;
    tape.matmul(y, p.var(&format!("{prefix}.wo")))
}

/// Pre-norm encoder block: self-attention then SwiGLU, each residual.
pub(crate) fn encoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    cfg: &ModelConfig,
    tables: &XposTables<T>,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let h = tape.layer_norm(x, p.var(&format!("{prefix}.ln_attn")))?;
    let h = causal_self_attention(tape, p, &format!("{prefix}.attn"), h, cfg.heads, tables)?;
    let h = drop.apply(tape, h)?;
    let x = tape.add(x, h)?;
    let h = tape.layer_norm(x, p.var(&format!("{prefix}.ln_mlp")))?;
    let h = swiglu_mlp(tape, p, &format!("{prefix}.mlp"), h)?;
    let h = drop.apply(tape, h)?;
    tape.add(x, h)
}

/// Pre-norm decoder block: causal self-attention, cross-attention to the
/// pseudo-sequence, then SwiGLU.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    pseudo: Var,
    cfg: &ModelConfig,
    tables: &XposTables<T>,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let h = tape.layer_norm(x, p.var(&format!("{prefix}.ln_self")))?;
    let h = causal_self_attention(tape, p, &format!("{prefix}.self"), h, cfg.heads, tables)?;
    let h = drop.apply(tape, h)?;
    let x = tape.add(x, h)?;
    let h = tape.layer_norm(x, p.var(&format!("{prefix}.ln_cross")))?;
    let h = cross_attention(tape, p, &format!("{prefix}.cross"), h, pseudo, cfg.heads)?;
    let h = drop.apply(tape, h)?;
    let x = tape.add(x, h)?;
    let h = tape.layer_norm(x, p.var(&format!("{prefix}.ln_mlp")))?;
    let h = swiglu_mlp(tape, p, &format!("{prefix}.mlp"), h)?;
    let h = drop.apply(tape, h)?;
    tape.add(x, h)
}

pub(crate) fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}
