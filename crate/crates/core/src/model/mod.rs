//! GPT baseline and FTP encoder / pseudo-sequence / decoder models.
//!
//! Parameter names:
//!
//! | name | shape |
//! |------|-------|
//! | `tok_emb` | `[vocab, dim]`, shared by encoder input, decoder input and LM head |
//! | `enc.{i}.ln_attn`, `enc.{i}.ln_mlp`, `enc.ln_f` | `[dim]` |
//! | `enc.{i}.attn.{wq,wk,wv,wo}` | `[dim, dim]` |
//! | `enc.{i}.mlp.{w_gate,w_up}` / `w_down` | `[dim, mlp]` / `[mlp, dim]` |
//! | `proj` | `[dim, pseudo_seq * dim]` |
//! | `dec.pos` | `[n_future, dim]` |
//! | `dec.{i}.{self,cross}.{wq,wk,wv,wo}` | `[dim, dim]` |
//! | `dec.{i}.{ln_self,ln_cross,ln_mlp}`, `dec.ln_f` | `[dim]` |
//! | `dec.{i}.mlp.*` | as encoder |

mod config;
mod count;
mod layers;
mod params;
mod xpos;

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

pub use config::ModelConfig;
pub use count::{count_parameters, expected_layout, ParamBreakdown};
pub use layers::{causal_self_attention, cross_attention, swiglu_mlp, Dropout};
pub use params::{Bound, ParamStore};
pub use xpos::{pair_frequency, pair_zeta, query_scale, xpos_tables, XposTables};

use layers::{decoder_block, encoder_block, init_attention, init_mlp, init_norm, positions};
use params::check_layout;
pub(crate) use params::normal_tensor;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const TOKEN_EMBEDDING: &str = "tok_emb";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Gpt,
    Ftp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gpt => "gpt",
            ModelKind::Ftp => "ftp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gpt" => Ok(ModelKind::Gpt),
            "ftp" => Ok(ModelKind::Ftp),
            _ => Err(Error::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

fn init_encoder<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    store.insert(
        TOKEN_EMBEDDING,
        normal_tensor(&[cfg.vocab_size, cfg.dim], 0.02, rng),
    );
    let out_std = 0.02 / libm::sqrt(2.0 * cfg.enc_layers.max(1) as f64);
    for i in 0..cfg.enc_layers {
        init_norm(store, &format!("enc.{i}.ln_attn"), cfg.dim);
        init_attention(store, &format!("enc.{i}.attn"), cfg.dim, out_std, rng);
        init_norm(store, &format!("enc.{i}.ln_mlp"), cfg.dim);
        init_mlp(
            store,
            &format!("enc.{i}.mlp"),
            cfg.dim,
            cfg.mlp_dim,
            out_std,
            rng,
        );
    }
    init_norm(store, "enc.ln_f", cfg.dim);
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32], b: usize, t: usize, ctx: usize) -> Result<()> {
    if tokens.len() != b * t {
        return Err(Error::shape("tokens", &[b, t], &[tokens.len()]));
    }
    if t == 0 || t > ctx {
        return Err(Error::contract(format!(
            "sequence length {t} outside 1..={ctx}"
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Index {
            what: "token id",
            index: bad as usize,
            bound: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Causal encoder stack: top-layer, post-final-norm embeddings `[B, T, dim]`.
pub(crate) fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    tokens: &[u32],
    b: usize,
    t: usize,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    check_tokens(cfg, tokens, b, t, cfg.enc_ctx)?;
    let tables = xpos_tables::<T>(&positions(t), cfg.head_dim(), cfg.xpos_scale_base);
    let mut x = tape.embedding(p.var(TOKEN_EMBEDDING), tokens, &[b, t])?;
    x = drop.apply(tape, x)?;
    for i in 0..cfg.enc_layers {
        x = encoder_block(tape, p, &format!("enc.{i}"), x, cfg, &tables, drop)?;
    }
    tape.layer_norm(x, p.var("enc.ln_f"))
}

/// Run `f` on a gradient-free tape and return the value of the node it yields.
fn eval<T: Scalar>(
    params: &ParamStore<T>,
    f: impl FnOnce(&mut Tape<T>, &Bound) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let p = params.bind(&mut tape, false);
    let v = f(&mut tape, &p)?;
    Ok(tape.value(v).clone())
}

/// Standard causal LM: encoder stack plus the shared-weight LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct GptModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> GptModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_encoder(&config, &mut params, rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        check_layout(&params, &expected_layout(ModelKind::Gpt, &config))?;
        Ok(Self { config, params })
    }

    pub fn encoder_forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[u32],
        b: usize,
        t: usize,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        encode(tape, p, &self.config, tokens, b, t, drop)
    }

    /// Logits `[B, T, vocab]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[u32],
        b: usize,
        t: usize,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let h = encode(tape, p, &self.config, tokens, b, t, drop)?;
        tape.matmul_nt(h, p.var(TOKEN_EMBEDDING))
    }

    pub fn embeddings(&self, tokens: &[u32], b: usize, t: usize) -> Result<Tensor<T>> {
        eval(&self.params, |tape, p| {
            self.encoder_forward(tape, p, tokens, b, t, &mut Dropout::off())
        })
    }

    pub fn logits(&self, tokens: &[u32], b: usize, t: usize) -> Result<Tensor<T>> {
        eval(&self.params, |tape, p| {
            self.forward(tape, p, tokens, b, t, &mut Dropout::off())
        })
    }
}

/// Future token prediction model.
#[derive(Debug, Clone, PartialEq)]
pub struct FtpModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> FtpModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_encoder(&config, &mut params, rng);
        Self::init_head(&config, &mut params, rng);
        Ok(Self { config, params })
    }

    /// Projection and decoder parameters (everything but the encoder).
    pub(crate) fn init_head<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) {
        let d = cfg.dim;
        store.insert("proj", normal_tensor(&[d, cfg.pseudo_seq * d], 0.02, rng));
        store.insert("dec.pos", normal_tensor(&[cfg.n_future, d], 0.02, rng));
        let out_std = 0.02 / libm::sqrt(2.0 * cfg.dec_layers.max(1) as f64);
        for i in 0..cfg.dec_layers {
            init_norm(store, &format!("dec.{i}.ln_self"), d);
            init_attention(store, &format!("dec.{i}.self"), d, out_std, rng);
            init_norm(store, &format!("dec.{i}.ln_cross"), d);
            init_attention(store, &format!("dec.{i}.cross"), d, out_std, rng);
            init_norm(store, &format!("dec.{i}.ln_mlp"), d);
            init_mlp(store, &format!("dec.{i}.mlp"), d, cfg.mlp_dim, out_std, rng);
        }
        init_norm(store, "dec.ln_f", d);
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        check_layout(&params, &expected_layout(ModelKind::Ftp, &config))?;
        Ok(Self { config, params })
    }

    pub fn encoder_forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[u32],
        b: usize,
        t: usize,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        encode(tape, p, &self.config, tokens, b, t, drop)
    }

    /// Expand embeddings `[R, dim]` into pseudo-sequences `[R, Seq, dim]`.
    pub fn project_pseudo_sequence(&self, tape: &mut Tape<T>, p: &Bound, e: Var) -> Result<Var> {
        let s = tape.shape(e).to_vec();
        if s.len() != 2 || s[1] != self.config.dim {
            return Err(Error::shape(
                "project_pseudo_sequence",
                &s,
                &[self.config.dim],
            ));
        }
        let y = tape.matmul(e, p.var("proj"))?;
        tape.reshape(y, &[s[0], self.config.pseudo_seq, self.config.dim])
    }

    /// Decoder logits `[R, Nd, vocab]` for teacher-forced token windows
    /// `[R, Nd]` attending to `pseudo` `[R, Seq, dim]`.
    pub fn decoder_forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        dec_tokens: &[u32],
        r: usize,
        nd: usize,
        pseudo: Var,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if nd == 0 || nd > cfg.n_future {
            return Err(Error::contract(format!(
                "decoder length {nd} outside 1..={} (absolute position table)",
                cfg.n_future
            )));
        }
        check_tokens(cfg, dec_tokens, r, nd, cfg.n_future)?;
        let ps = tape.shape(pseudo).to_vec();
        if ps != [r, cfg.pseudo_seq, cfg.dim] {
            return Err(Error::shape(
                "decoder_forward",
                &ps,
                &[r, cfg.pseudo_seq, cfg.dim],
            ));
        }
        let tables = xpos_tables::<T>(&positions(nd), cfg.head_dim(), cfg.xpos_scale_base);
        let x = tape.embedding(p.var(TOKEN_EMBEDDING), dec_tokens, &[r, nd])?;
        let pos = tape.gather_rows(p.var("dec.pos"), &positions(nd), &[nd])?;
        let mut x = tape.add_broadcast(x, pos)?;
        x = drop.apply(tape, x)?;
        for i in 0..cfg.dec_layers {
            x = decoder_block(tape, p, &format!("dec.{i}"), x, pseudo, cfg, &tables, drop)?;
        }
        let h = tape.layer_norm(x, p.var("dec.ln_f"))?;
        tape.matmul_nt(h, p.var(TOKEN_EMBEDDING))
    }

    /// Teacher-forced logits `[R, Nd, vocab]` for a subset of encoder
    /// positions. `rows` index the flattened `[B * T]` positions and
    /// `dec_inputs` is `[R, Nd]`, each row seeded with the encoder token at
    /// that position.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_rows(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[u32],
        b: usize,
        t: usize,
        rows: &[usize],
        dec_inputs: &[u32],
        nd: usize,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        if dec_inputs.len() != rows.len() * nd {
            return Err(Error::shape(
                "ftp_forward",
                &[rows.len(), nd],
                &[dec_inputs.len()],
            ));
        }
        for (i, &row) in rows.iter().enumerate() {
            if row >= b * t {
                return Err(Error::Index {
                    what: "position",
                    index: row,
                    bound: b * t,
                });
            }
            if dec_inputs[i * nd] != tokens[row] {
                return Err(Error::Alignment(format!(
                    "decoder seed {} at position {row} differs from encoder token {}",
                    dec_inputs[i * nd],
                    tokens[row]
                )));
            }
        }
        let e = encode(tape, p, &self.config, tokens, b, t, drop)?;
        let e = tape.gather_rows(e, rows, &[rows.len()])?;
        let pseudo = self.project_pseudo_sequence(tape, p, e)?;
        self.decoder_forward(tape, p, dec_inputs, rows.len(), nd, pseudo, drop)
    }

    /// Logits `[B, T, N, vocab]` for every encoder position; `dec_inputs` is
    /// `[B, T, N]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[u32],
        b: usize,
        t: usize,
        dec_inputs: &[u32],
        n: usize,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let rows = positions(b * t);
        let logits = self.forward_rows(tape, p, tokens, b, t, &rows, dec_inputs, n, drop)?;
        tape.reshape(logits, &[b, t, n, self.config.vocab_size])
    }

    pub fn embeddings(&self, tokens: &[u32], b: usize, t: usize) -> Result<Tensor<T>> {
        eval(&self.params, |tape, p| {
            self.encoder_forward(tape, p, tokens, b, t, &mut Dropout::off())
        })
    }

    pub fn logits(
        &self,
        tokens: &[u32],
        b: usize,
        t: usize,
        dec_inputs: &[u32],
        n: usize,
    ) -> Result<Tensor<T>> {
        eval(&self.params, |tape, p| {
            self.forward(tape, p, tokens, b, t, dec_inputs, n, &mut Dropout::off())
        })
    }

    /// Pseudo-sequence `[Seq, dim]` for the last position of `context`.
    pub fn pseudo_sequence(&self, context: &[u32]) -> Result<Tensor<T>> {
        eval(&self.params, |tape, p| {
            let t = context.len();
            let e = self.encoder_forward(tape, p, context, 1, t, &mut Dropout::off())?;
            let last = tape.gather_rows(e, &[t - 1], &[1])?;
            self.project_pseudo_sequence(tape, p, last)
        })
    }

    /// Decoder logits `[R, Nd, vocab]` for `R` token windows sharing one
    /// pseudo-sequence `[Seq, dim]`.
    pub fn decode_with_pseudo(
        &self,
        pseudo: &Tensor<T>,
        dec_tokens: &[u32],
        r: usize,
        nd: usize,
    ) -> Result<Tensor<T>> {
        eval(&self.params, |tape, p| {
            let mut data = Vec::with_capacity(pseudo.len() * r);
            for _ in 0..r {
                data.extend_from_slice(pseudo.data());
            }
            let ps = Tensor::new(&[r, self.config.pseudo_seq, self.config.dim], data)?;
            let ps = tape.constant(ps);
            self.decoder_forward(tape, p, dec_tokens, r, nd, ps, &mut Dropout::off())
        })
    }
}

/// Either architecture, for code paths that dispatch at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum Model<T> {
    Gpt(GptModel<T>),
    Ftp(FtpModel<T>),
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(kind: ModelKind, config: ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(match kind {
            ModelKind::Gpt => Model::Gpt(GptModel::new(config, rng)?),
            ModelKind::Ftp => Model::Ftp(FtpModel::new(config, rng)?),
        })
    }

    pub fn from_params(
        kind: ModelKind,
        config: ModelConfig,
        params: ParamStore<T>,
    ) -> Result<Self> {
        Ok(match kind {
            ModelKind::Gpt => Model::Gpt(GptModel::from_params(config, params)?),
            ModelKind::Ftp => Model::Ftp(FtpModel::from_params(config, params)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Gpt(_) => ModelKind::Gpt,
            Model::Ftp(_) => ModelKind::Ftp,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Gpt(m) => &m.config,
            Model::Ftp(m) => &m.config,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        match self {
            Model::Gpt(m) => &m.params,
            Model::Ftp(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Model::Gpt(m) => &mut m.params,
            Model::Ftp(m) => &mut m.params,
        }
    }

    /// Top-layer embeddings `[B, T, dim]`.
    pub fn embeddings(&self, tokens: &[u32], b: usize, t: usize) -> Result<Tensor<T>> {
        match self {
            Model::Gpt(m) => m.embeddings(tokens, b, t),
            Model::Ftp(m) => m.embeddings(tokens, b, t),
        }
    }
}
