//! Analyses of frozen models: embedding similarity statistics, future-token
//! probes on top-layer embeddings, and mean-pooled classification.
//!
//! Probes only ever borrow the model immutably and copy what they need
//! (the head matrix, encoder weights), so the model is untouched by
//! construction.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_window, TokenCorpus};
use crate::error::{Error, Result};
use crate::model::{
    normal_tensor, Bound, Dropout, FtpModel, GptModel, Model, ModelConfig, ParamStore,
    TOKEN_EMBEDDING,
};
use crate::numerics::{cosine, log_sum_exp, Scalar, Tape, Tensor, Var};
use crate::training::{adamw_step, clip_grad_norm, ftp_loss, lr_at, OptimState, TrainConfig};

/// Source of top-layer embeddings.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn context_limit(&self) -> usize;
    /// Embeddings `[b, t, dim]` for `b` sequences of `t` tokens.
    fn embed_batch(&self, tokens: &[u32], b: usize, t: usize) -> Result<Vec<f64>>;
    /// The frozen output head `[vocab, dim]` that maps embeddings to logits.
    fn head(&self) -> Tensor<f64>;

    fn embed(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.embed_batch(tokens, 1, tokens.len())
    }
}

fn to_f64<T: Scalar>(t: Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|x| x.to_f64_lossy()).collect()
}

macro_rules! embedder_for {
    ($ty:ident) => {
        impl<T: Scalar> Embedder for $ty<T> {
            fn dim(&self) -> usize {
                self.config.dim
            }
            fn context_limit(&self) -> usize {
                self.config.enc_ctx
            }
            fn embed_batch(&self, tokens: &[u32], b: usize, t: usize) -> Result<Vec<f64>> {
                Ok(to_f64(self.embeddings(tokens, b, t)?))
            }
            fn head(&self) -> Tensor<f64> {
                self.params
                    .get(TOKEN_EMBEDDING)
                    .expect("token embedding present")
                    .cast()
            }
        }
    };
}

embedder_for!(GptModel);
embedder_for!(FtpModel);

impl<T: Scalar> Embedder for Model<T> {
    fn dim(&self) -> usize {
        self.config().dim
    }
    fn context_limit(&self) -> usize {
        self.config().enc_ctx
    }
    fn embed_batch(&self, tokens: &[u32], b: usize, t: usize) -> Result<Vec<f64>> {
        Ok(to_f64(self.embeddings(tokens, b, t)?))
    }
    fn head(&self) -> Tensor<f64> {
        self.params()
            .get(TOKEN_EMBEDDING)
            .expect("token embedding present")
            .cast()
    }
}

/// Token windows and the embeddings of their first `t` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedWindows {
    pub t: usize,
    pub dim: usize,
    /// `[S, t, dim]`.
    pub emb: Vec<f64>,
    /// `S` windows of at least `t` tokens; the tail supplies future targets.
    pub windows: Vec<Vec<u32>>,
}

impl EmbeddedWindows {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn row(&self, s: usize, pos: usize) -> &[f64] {
        let i = (s * self.t + pos) * self.dim;
        &self.emb[i..i + self.dim]
    }

    /// Future tokens available past the embedded prefix in every window.
    pub fn lookahead(&self) -> usize {
        self.windows
            .iter()
            .map(|w| w.len() - self.t)
            .min()
            .unwrap_or(0)
    }

    /// Join parts embedded separately (for example on different threads).
    pub fn concat(parts: Vec<EmbeddedWindows>) -> Result<Self> {
        let mut it = parts.into_iter();
        let mut out = it
            .next()
            .ok_or_else(|| Error::contract("nothing to concatenate"))?;
        for p in it {
            if (p.t, p.dim) != (out.t, out.dim) {
                return Err(Error::shape(
                    "EmbeddedWindows::concat",
                    &[p.t, p.dim],
                    &[out.t, out.dim],
                ));
            }
            out.emb.extend(p.emb);
            out.windows.extend(p.windows);
        }
        Ok(out)
    }
}

const EMBED_CHUNK: usize = 16;

/// Embed the first `t` tokens of every window.
pub fn embed_windows<E: Embedder + ?Sized>(
    model: &E,
    windows: &[Vec<u32>],
    t: usize,
) -> Result<EmbeddedWindows> {
    if t == 0 || t > model.context_limit() {
        return Err(Error::contract(format!(
            "embedding length {t} outside 1..={}",
            model.context_limit()
        )));
    }
    if let Some(w) = windows.iter().find(|w| w.len() < t) {
        return Err(Error::contract(format!(
            "window of {} tokens is shorter than {t}",
            w.len()
        )));
    }
    let mut emb = Vec::with_capacity(windows.len() * t * model.dim());
    for chunk in windows.chunks(EMBED_CHUNK) {
        let tokens: Vec<u32> = chunk.iter().flat_map(|w| w[..t].iter().copied()).collect();
        emb.extend(model.embed_batch(&tokens, chunk.len(), t)?);
    }
    Ok(EmbeddedWindows {
        t,
        dim: model.dim(),
        emb,
        windows: windows.to_vec(),
    })
}

/// Random corpus windows of `t + extra` tokens.
pub fn sample_windows<R: Rng + ?Sized>(
    corpus: &TokenCorpus,
    count: usize,
    t: usize,
    extra: usize,
    rng: &mut R,
) -> Result<Vec<Vec<u32>>> {
    (0..count)
        .map(|_| sample_window(corpus, rng, t, extra))
        .collect()
}

/// Cosine similarities of neighbouring embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineSeries {
    /// `values[i] = cos(e_i, e_{i+1})`; pairs with a zero vector are left out.
    pub values: Vec<f64>,
    pub excluded: usize,
}

pub fn adjacent_cosine_series<E: Embedder + ?Sized>(
    model: &E,
    tokens: &[u32],
) -> Result<CosineSeries> {
    if tokens.len() < 2 {
        return Err(Error::contract(
            "adjacent similarity needs at least two tokens",
        ));
    }
    let e = model.embed(tokens)?;
    let d = model.dim();
    let mut out = CosineSeries {
        values: Vec::with_capacity(tokens.len() - 1),
        excluded: 0,
    };
    for i in 0..tokens.len() - 1 {
        match cosine(&e[i * d..(i + 1) * d], &e[(i + 1) * d..(i + 2) * d]) {
            Some(c) => out.values.push(c),
            None => out.excluded += 1,
        }
    }
    Ok(out)
}

/// Running mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Moments {
    pub count: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        libm::sqrt((self.sum_sq / self.count as f64 - m * m).max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStats {
    /// `by_sep[d - 1]` summarizes pairs `d` positions apart.
    pub by_sep: Vec<Moments>,
    /// Pairs drawn from two different random sequences.
    pub far: Moments,
    /// Pairs skipped because an embedding had zero norm.
    pub excluded: usize,
}

impl SimilarityStats {
    pub fn max_sep(&self) -> usize {
        self.by_sep.len()
    }
}

/// Per-separation cosine statistics over all in-sequence pairs, plus
/// `far_pairs` cross-sequence pairs for the far-field baseline.
pub fn similarity_stats<R: Rng + ?Sized>(
    data: &EmbeddedWindows,
    max_sep: usize,
    far_pairs: usize,
    rng: &mut R,
) -> Result<SimilarityStats> {
    if max_sep == 0 || max_sep >= data.t {
        return Err(Error::contract(format!(
            "separation {max_sep} needs sequences longer than {}",
            data.t
        )));
    }
    if far_pairs > 0 && data.len() < 2 {
        return Err(Error::contract(
            "far-field pairs need at least two sequences",
        ));
    }
    let mut stats = SimilarityStats {
        by_sep: alloc::vec![Moments::default(); max_sep],
        far: Moments::default(),
        excluded: 0,
    };
    for s in 0..data.len() {
        for d in 1..=max_sep {
            for p in 0..data.t - d {
                match cosine(data.row(s, p), data.row(s, p + d)) {
                    Some(c) => stats.by_sep[d - 1].push(c),
                    None => stats.excluded += 1,
                }
            }
        }
    }
    for _ in 0..far_pairs {
        let a = rng.gen_range(0..data.len());
        let b = (a + rng.gen_range(1..data.len())) % data.len();
        let (pa, pb) = (rng.gen_range(0..data.t), rng.gen_range(0..data.t));
        match cosine(data.row(a, pa), data.row(b, pb)) {
            Some(c) => stats.far.push(c),
            None => stats.excluded += 1,
        }
    }
    Ok(stats)
}

/// Sample `n_sequences` corpus windows of `seq_len` tokens and summarize
/// their embedding similarities.
pub fn separation_stats<E: Embedder + ?Sized, R: Rng + ?Sized>(
    model: &E,
    corpus: &TokenCorpus,
    max_sep: usize,
    n_sequences: usize,
    seq_len: usize,
    far_pairs: usize,
    rng: &mut R,
) -> Result<SimilarityStats> {
    let windows = sample_windows(corpus, n_sequences, seq_len, 0, rng)?;
    let data = embed_windows(model, &windows, seq_len)?;
    similarity_stats(&data, max_sep, far_pairs, rng)
}

/// Optimizer budget shared by every probe so comparisons are matched.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBudget {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeBudget {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 1e-3,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl ProbeBudget {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "probe budget {self:?} needs epochs, batch size and lr > 0"
            )));
        }
        Ok(())
    }

    fn schedule(&self, rows: usize) -> TrainConfig {
        let total = (self.epochs * rows.div_ceil(self.batch_size)) as u64;
        TrainConfig {
            lr_max: self.lr,
            lr_min: self.lr * 0.1,
            warmup_steps: (total / 20).max(1),
            total_steps: total,
            weight_decay: 0.0,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Predict the token `offset` positions after the embedded one.
    pub offset: usize,
    /// Hidden width as a multiple of the embedding width.
    pub expansion: usize,
    pub budget: ProbeBudget,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            offset: 1,
            expansion: 4,
            budget: ProbeBudget::default(),
        }
    }
}

/// Minibatch AdamW over `rows` examples. `frozen[i]` tensors never move.
fn fit<T: Scalar>(
    store: &mut ParamStore<T>,
    frozen: &[bool],
    rows: usize,
    budget: &ProbeBudget,
    mut loss: impl FnMut(&mut Tape<T>, &Bound, &[usize]) -> Result<Var>,
) -> Result<f64> {
    budget.validate()?;
    if rows == 0 {
        return Err(Error::contract("probe has no training examples"));
    }
    let cfg = budget.schedule(rows);
    let decay: Vec<bool> = alloc::vec![false; store.len()];
    let mut optim = OptimState::new(store);
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut order: Vec<usize> = (0..rows).collect();
    let (mut step, mut last) = (0u64, Moments::default());
    for _ in 0..budget.epochs {
        order.shuffle(&mut rng);
        last = Moments::default();
        for idx in order.chunks(budget.batch_size) {
            step += 1;
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let l = loss(&mut tape, &p, idx)?;
            let value = tape.value(l).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "probe loss {value} at step {step}"
                )));
            }
            last.push(value);
            tape.backward(l)?;
            let mut grads: Vec<Vec<T>> = p
                .vars()
                .iter()
                .zip(store.tensors())
                .zip(frozen)
                .map(|((&v, t), &fz)| match tape.grad(v) {
                    Some(g) if !fz => g.to_vec(),
                    _ => alloc::vec![T::zero(); t.len()],
                })
                .collect();
            clip_grad_norm(&mut grads, cfg.grad_clip);
            adamw_step(
                store,
                &grads,
                &mut optim,
                step,
                lr_at(step, &cfg),
                &cfg,
                &decay,
            )?;
        }
    }
    Ok(last.mean())
}

fn mlp_params<R: Rng + ?Sized>(
    store: &mut ParamStore<f64>,
    d_in: usize,
    hidden: usize,
    d_out: usize,
    rng: &mut R,
) {
    store.insert("w1", normal_tensor(&[d_in, hidden], 0.02, rng));
    store.insert("b1", Tensor::zeros(&[hidden]));
    store.insert("w2", normal_tensor(&[hidden, d_out], 0.02, rng));
    store.insert("b2", Tensor::zeros(&[d_out]));
}

fn mlp_forward(tape: &mut Tape<f64>, p: &Bound, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p.var("w1"))?;
    let h = tape.add_broadcast(h, p.var("b1"))?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, p.var("w2"))?;
    tape.add_broadcast(y, p.var("b2"))
}

fn gather(features: &[f64], dim: usize, idx: &[usize]) -> Tensor<f64> {
    let data = idx
        .iter()
        .flat_map(|&i| features[i * dim..(i + 1) * dim].iter().copied())
        .collect();
    Tensor::new(&[idx.len(), dim], data).expect("row gather shape")
}

/// Mean cross-entropy and accuracy of `logits_of` over all rows.
fn evaluate_rows(
    store: &ParamStore<f64>,
    rows: usize,
    targets: &[u32],
    logits_of: impl Fn(&mut Tape<f64>, &Bound, &[usize]) -> Result<Var>,
) -> Result<(f64, f64)> {
    let (mut ce, mut hits) = (0.0, 0usize);
    let all: Vec<usize> = (0..rows).collect();
    for idx in all.chunks(512) {
        let mut tape = Tape::no_grad();
        let p = store.bind(&mut tape, false);
        let l = logits_of(&mut tape, &p, idx)?;
        let v = tape.value(l);
        let width = v.last_dim();
        for (j, &i) in idx.iter().enumerate() {
            let row = &v.data()[j * width..(j + 1) * width];
            ce += log_sum_exp(row) - row[targets[i] as usize];
            let best = (0..width).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            hits += usize::from(best == targets[i] as usize);
        }
    }
    Ok((ce / rows as f64, hits as f64 / rows as f64))
}

/// Flattened `(embedding at t, token at t + offset)` pairs.
fn offset_pairs(data: &EmbeddedWindows, offset: usize) -> Result<(Vec<f64>, Vec<u32>)> {
    if offset == 0 || offset > data.lookahead() {
        return Err(Error::contract(format!(
            "offset {offset} outside 1..={} supplied by the windows",
            data.lookahead()
        )));
    }
    let targets = (0..data.len())
        .flat_map(|s| (0..data.t).map(move |p| data.windows[s][p + offset]))
        .collect();
    Ok((data.emb.clone(), targets))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FutureProbe {
    pub params: ParamStore<f64>,
    pub head: Tensor<f64>,
    pub train_loss: f64,
    /// Held-out mean cross-entropy.
    pub loss: f64,
    /// `exp(loss)`.
    pub perplexity: f64,
}

impl FutureProbe {
    pub fn logits(&self, embeddings: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::no_grad();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(embeddings.clone());
        let head = tape.constant(self.head.clone());
        let y = mlp_forward(&mut tape, &p, x)?;
        let l = tape.matmul_nt(y, head)?;
        Ok(tape.value(l).clone())
    }
}

/// Train an MLP on frozen embeddings to predict the token `offset` ahead
/// through the model's own frozen output head.
pub fn train_future_probe<E: Embedder + ?Sized>(
    model: &E,
    train: &EmbeddedWindows,
    test: &EmbeddedWindows,
    cfg: &ProbeConfig,
) -> Result<FutureProbe> {
    let d = model.dim();
    if train.dim != d || test.dim != d {
        return Err(Error::shape(
            "train_future_probe",
            &[train.dim, test.dim],
            &[d],
        ));
    }
    if cfg.expansion == 0 {
        return Err(Error::Config("probe expansion must be positive".into()));
    }
    let head = model.head();
    let (x, y) = offset_pairs(train, cfg.offset)?;
    let (tx, ty) = offset_pairs(test, cfg.offset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.budget.seed);
    let mut params = ParamStore::new();
    mlp_params(&mut params, d, cfg.expansion * d, d, &mut rng);
    let logits_of = |x: &[f64]| {
        let (x, head) = (x.to_vec(), head.clone());
        move |tape: &mut Tape<f64>, p: &Bound, idx: &[usize]| -> Result<Var> {
            let xv = tape.constant(gather(&x, d, idx));
            let h = tape.constant(head.clone());
            let out = mlp_forward(tape, p, xv)?;
            tape.matmul_nt(out, h)
        }
    };
    let frozen = alloc::vec![false; params.len()];
    let fwd = logits_of(&x);
    let train_loss = fit(
        &mut params,
        &frozen,
        y.len(),
        &cfg.budget,
        |tape, p, idx| {
            let l = fwd(tape, p, idx)?;
            let t: Vec<u32> = idx.iter().map(|&i| y[i]).collect();
            let w = alloc::vec![1.0 / idx.len() as f64; idx.len()];
            tape.cross_entropy(l, &t, &w)
        },
    )?;
    let (loss, _) = evaluate_rows(&params, ty.len(), &ty, logits_of(&tx))?;
    Ok(FutureProbe {
        params,
        head,
        train_loss,
        loss,
        perplexity: libm::exp(loss),
    })
}

/// Per-offset held-out cross-entropy of an FTP decoder reading embeddings
/// from `data`. Entry `k` scores the token `k + 1` positions ahead.
pub fn decoder_offset_losses<T: Scalar>(
    ftp: &FtpModel<T>,
    data: &EmbeddedWindows,
) -> Result<Vec<f64>> {
    decoder_losses_with(ftp, &ftp.params, data)
}

fn decoder_rows(data: &EmbeddedWindows, n: usize, idx: &[usize]) -> (Vec<u32>, Vec<u32>) {
    let (mut dec_in, mut targets) = (
        Vec::with_capacity(idx.len() * n),
        Vec::with_capacity(idx.len() * n),
    );
    for &i in idx {
        let (s, pos) = (i / data.t, i % data.t);
        dec_in.extend_from_slice(&data.windows[s][pos..pos + n]);
        targets.extend_from_slice(&data.windows[s][pos + 1..pos + n + 1]);
    }
    (dec_in, targets)
}

fn decoder_logits<T: Scalar>(
    ftp: &FtpModel<T>,
    tape: &mut Tape<T>,
    p: &Bound,
    data: &EmbeddedWindows,
    idx: &[usize],
) -> Result<(Var, Vec<u32>)> {
    let n = ftp.config.n_future;
    let d = data.dim;
    let e: Vec<T> = idx
        .iter()
        .flat_map(|&i| {
            data.emb[i * d..(i + 1) * d]
                .iter()
                .map(|&v| T::from_f64_lossy(v))
        })
        .collect();
    let e = tape.constant(Tensor::new(&[idx.len(), d], e)?);
    let pseudo = ftp.project_pseudo_sequence(tape, p, e)?;
    let (dec_in, targets) = decoder_rows(data, n, idx);
    let logits =
        ftp.decoder_forward(tape, p, &dec_in, idx.len(), n, pseudo, &mut Dropout::off())?;
    Ok((logits, targets))
}

fn check_decoder_data<T: Scalar>(ftp: &FtpModel<T>, data: &EmbeddedWindows) -> Result<()> {
    if data.dim != ftp.config.dim {
        return Err(Error::shape(
            "decoder probe embeddings",
            &[data.dim],
            &[ftp.config.dim],
        ));
    }
    if data.lookahead() < ftp.config.n_future {
        return Err(Error::contract(format!(
            "windows carry {} future tokens, decoder needs {}",
            data.lookahead(),
            ftp.config.n_future
        )));
    }
    Ok(())
}

fn decoder_losses_with<T: Scalar>(
    ftp: &FtpModel<T>,
    params: &ParamStore<T>,
    data: &EmbeddedWindows,
) -> Result<Vec<f64>> {
    check_decoder_data(ftp, data)?;
    let n = ftp.config.n_future;
    let rows = data.len() * data.t;
    let mut sums = alloc::vec![0.0; n];
    let all: Vec<usize> = (0..rows).collect();
    for idx in all.chunks(256) {
        let mut tape = Tape::no_grad();
        let p = params.bind(&mut tape, false);
        let (l, targets) = decoder_logits(ftp, &mut tape, &p, data, idx)?;
        let v = tape.value(l);
        let width = v.last_dim();
        for (j, &y) in targets.iter().enumerate() {
            let row = &v.data()[j * width..(j + 1) * width];
            sums[j % n] += (log_sum_exp(row) - row[y as usize]).to_f64_lossy();
        }
    }
    Ok(sums.into_iter().map(|s| s / rows as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderProbe<T> {
    /// FTP-shaped model whose encoder and embedding are the frozen GPT's.
    pub model: FtpModel<T>,
    pub train_loss: f64,
    pub losses: Vec<f64>,
    pub perplexities: Vec<f64>,
}

/// Train a projection and decoder shaped like `ftp_config`'s on frozen GPT
/// embeddings, with the same discounted multi-token loss.
pub fn train_decoder_probe<T: Scalar>(
    gpt: &GptModel<T>,
    ftp_config: &ModelConfig,
    train: &EmbeddedWindows,
    test: &EmbeddedWindows,
    budget: &ProbeBudget,
) -> Result<DecoderProbe<T>> {
    let g = &gpt.config;
    let f = ftp_config;
    if (
        g.vocab_size,
        g.dim,
        g.enc_layers,
        g.heads,
        g.mlp_dim,
        g.enc_ctx,
    ) != (
        f.vocab_size,
        f.dim,
        f.enc_layers,
        f.heads,
        f.mlp_dim,
        f.enc_ctx,
    ) {
        return Err(Error::Config(
            "decoder probe config must share the GPT encoder shape".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut model = FtpModel::new(ftp_config.clone(), &mut rng)?;
    for (name, t) in gpt.params.iter() {
        *model
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing {name}")))? = t.clone();
    }
    check_decoder_data(&model, train)?;
    let frozen: Vec<bool> = model
        .params
        .names()
        .iter()
        .map(|n| gpt.params.get(n).is_some())
        .collect();
    let (n, gamma) = (f.n_future, f.gamma);
    let mut params = model.params.clone();
    let train_loss = fit(
        &mut params,
        &frozen,
        train.len() * train.t,
        budget,
        |tape, p, idx| {
            let (l, targets) = decoder_logits(&model, tape, p, train, idx)?;
            let mask = alloc::vec![1u8; targets.len()];
            ftp_loss(tape, l, &targets, &mask, n, gamma)
        },
    )?;
    model.params = params;
    let losses = decoder_losses_with(&model, &model.params, test)?;
    let perplexities = losses.iter().map(|&l| libm::exp(l)).collect();
    Ok(DecoderProbe {
        model,
        train_loss,
        losses,
        perplexities,
    })
}

/// Mean of the top-layer embeddings at positions `1..`, or `None` for texts
/// shorter than two tokens. Long texts are truncated to the context.
pub fn mean_pool<E: Embedder + ?Sized>(model: &E, tokens: &[u32]) -> Result<Option<Vec<f64>>> {
    let tokens = &tokens[..tokens.len().min(model.context_limit())];
    if tokens.len() < 2 {
        return Ok(None);
    }
    let e = model.embed(tokens)?;
    let d = model.dim();
    let mut out = alloc::vec![0.0; d];
    for row in e.chunks(d).skip(1) {
        out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
    }
    let k = (tokens.len() - 1) as f64;
    out.iter_mut().for_each(|o| *o /= k);
    Ok(Some(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyConfig {
    pub expansion: usize,
    /// Fraction of examples held out for validation.
    pub val_frac: f64,
    pub budget: ProbeBudget,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            expansion: 4,
            val_frac: 0.2,
            budget: ProbeBudget {
                epochs: 20,
                lr: 1e-3,
                batch_size: 32,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyReport {
    pub params: ParamStore<f64>,
    pub n_train: usize,
    pub n_val: usize,
    /// Texts shorter than two tokens.
    pub skipped: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

fn classifier_logits(tape: &mut Tape<f64>, p: &Bound, x: Var) -> Result<Var> {
    let h = mlp_forward(tape, p, x)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, p.var("w3"))?;
    tape.add_broadcast(y, p.var("b3"))
}

/// Mean-pool frozen embeddings of labelled token sequences and train an MLP
/// classifier on them.
pub fn mean_pool_classify<E: Embedder + ?Sized>(
    model: &E,
    examples: &[(usize, Vec<u32>)],
    n_classes: usize,
    cfg: &ClassifyConfig,
) -> Result<ClassifyReport> {
    let mut pooled = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0;
    for (label, tokens) in examples {
        if *label >= n_classes {
            return Err(Error::Index {
                what: "label",
                index: *label,
                bound: n_classes,
            });
        }
        match mean_pool(model, tokens)? {
            Some(v) => {
                pooled.push(v);
                labels.push(*label as u32);
            }
            None => skipped += 1,
        }
    }
    let mut report = classify_pooled(&pooled, &labels, n_classes, model.dim(), cfg)?;
    report.skipped = skipped;
    Ok(report)
}

/// Train and validate the classifier on precomputed feature vectors.
pub fn classify_pooled(
    features: &[Vec<f64>],
    labels: &[u32],
    n_classes: usize,
    dim: usize,
    cfg: &ClassifyConfig,
) -> Result<ClassifyReport> {
    if n_classes < 2 || cfg.expansion == 0 {
        return Err(Error::Config(
            "classification needs two or more classes and a positive expansion".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.budget.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut rng);
    let n_val = libm::ceil(features.len() as f64 * cfg.val_frac.clamp(0.0, 1.0)) as usize;
    if n_val == 0 || n_val >= features.len() {
        return Err(Error::contract(format!(
            "{} usable examples cannot be split for validation",
            features.len()
        )));
    }
    let (val, train) = order.split_at(n_val);
    let flat = |ids: &[usize]| -> (Vec<f64>, Vec<u32>) {
        (
            ids.iter()
                .flat_map(|&i| features[i].iter().copied())
                .collect(),
            ids.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (x, y) = flat(train);
    let (vx, vy) = flat(val);
    let mut params = ParamStore::new();
    mlp_params(&mut params, dim, cfg.expansion * dim, dim, &mut rng);
    params.insert("w3", normal_tensor(&[dim, n_classes], 0.02, &mut rng));
    params.insert("b3", Tensor::zeros(&[n_classes]));
    let logits_of = |x: &[f64]| {
        let x = x.to_vec();
        move |tape: &mut Tape<f64>, p: &Bound, idx: &[usize]| -> Result<Var> {
            let xv = tape.constant(gather(&x, dim, idx));
            classifier_logits(tape, p, xv)
        }
    };
    let frozen = alloc::vec![false; params.len()];
    let fwd = logits_of(&x);
    let train_loss = fit(
        &mut params,
        &frozen,
        y.len(),
        &cfg.budget,
        |tape, p, idx| {
            let l = fwd(tape, p, idx)?;
            let t: Vec<u32> = idx.iter().map(|&i| y[i]).collect();
            let w = alloc::vec![1.0 / idx.len() as f64; idx.len()];
            tape.cross_entropy(l, &t, &w)
        },
    )?;
    let (val_loss, val_accuracy) = evaluate_rows(&params, vy.len(), &vy, logits_of(&vx))?;
    Ok(ClassifyReport {
        params,
        n_train: train.len(),
        n_val,
        skipped: 0,
        train_loss,
        val_loss,
        val_accuracy,
    })
}
