//! Next-token logits, top-k sampling, decoder lookahead and generation.
//!
//! Lookahead re-scores the top `K` next tokens: each candidate starts at
//! its log-probability renormalized within the `K` set, then the decoder
//! greedily continues it for `L` steps against the pseudo-sequence of the
//! current position, adding `gamma^j * log p` of the greedy token at step `j`.
//! Candidates are drawn from `softmax(score / temperature)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{FtpModel, GptModel, Model};
use crate::numerics::{Scalar, Tensor};

/// Anything that maps a context to next-token logits.
pub trait NextTokenLm {
    fn vocab_size(&self) -> usize;
    /// Longest context accepted; longer prompts are windowed.
    fn context_limit(&self) -> usize;
    fn next_logits(&self, context: &[u32]) -> Result<Vec<f64>>;
}

/// A model whose decoder can be re-run from a fixed per-position memory.
pub trait FutureLm {
    type Memory;
    fn vocab_size(&self) -> usize;
    fn context_limit(&self) -> usize;
    /// Longest teacher-forced decoder window.
    fn n_future(&self) -> usize;
    fn memory(&self, context: &[u32]) -> Result<Self::Memory>;
    /// Logits `[r, nd, V]`, row-major, for `r` windows of `nd` tokens.
    fn decode(
        &self,
        memory: &Self::Memory,
        tokens: &[u32],
        r: usize,
        nd: usize,
    ) -> Result<Vec<f64>>;
}

fn check_context(context: &[u32]) -> Result<()> {
    if context.is_empty() {
        Err(Error::contract("empty context"))
    } else {
        Ok(())
    }
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|x| x.to_f64_lossy()).collect()
}

/// Logits for the token after `context` (last row of the full forward).
pub fn next_logits_gpt<T: Scalar>(model: &GptModel<T>, context: &[u32]) -> Result<Vec<f64>> {
    check_context(context)?;
    let logits = model.logits(context, 1, context.len())?;
    let v = model.config.vocab_size;
    Ok(to_f64(&logits)[(context.len() - 1) * v..].to_vec())
}

/// Encoder over `context`, pseudo-sequence at the last position, decoder
/// seeded with the last context token; logits of its first output.
pub fn next_logits_ftp<T: Scalar>(model: &FtpModel<T>, context: &[u32]) -> Result<Vec<f64>> {
    check_context(context)?;
    let pseudo = model.pseudo_sequence(context)?;
    FutureLm::decode(model, &pseudo, &context[context.len() - 1..], 1, 1)
}

impl<T: Scalar> NextTokenLm for GptModel<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }
    fn context_limit(&self) -> usize {
        self.config.enc_ctx
    }
    fn next_logits(&self, context: &[u32]) -> Result<Vec<f64>> {
        next_logits_gpt(self, context)
    }
}

impl<T: Scalar> NextTokenLm for FtpModel<T> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }
    fn context_limit(&self) -> usize {
        self.config.enc_ctx
    }
    fn next_logits(&self, context: &[u32]) -> Result<Vec<f64>> {
        next_logits_ftp(self, context)
    }
}

impl<T: Scalar> NextTokenLm for Model<T> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }
    fn context_limit(&self) -> usize {
        self.config().enc_ctx
    }
    fn next_logits(&self, context: &[u32]) -> Result<Vec<f64>> {
        match self {
            Model::Gpt(m) => next_logits_gpt(m, context),
            Model::Ftp(m) => next_logits_ftp(m, context),
        }
    }
}

impl<T: Scalar> FutureLm for FtpModel<T> {
    type Memory = Tensor<T>;
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }
    fn context_limit(&self) -> usize {
        self.config.enc_ctx
    }
    fn n_future(&self) -> usize {
        self.config.n_future
    }
    fn memory(&self, context: &[u32]) -> Result<Tensor<T>> {
        check_context(context)?;
        self.pseudo_sequence(context)
    }
    fn decode(&self, memory: &Tensor<T>, tokens: &[u32], r: usize, nd: usize) -> Result<Vec<f64>> {
        Ok(to_f64(&self.decode_with_pseudo(memory, tokens, r, nd)?))
    }
}

/// Token ids of the `k` largest logits, ties broken by lower id.
pub fn top_k_ids(logits: &[f64], k: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..logits.len() as u32).collect();
    ids.sort_by(|&a, &b| {
        logits[b as usize]
            .partial_cmp(&logits[a as usize])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k.clamp(1, logits.len().max(1)));
    ids
}

/// `log softmax` of `values`.
pub fn log_softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = m + libm::log(values.iter().map(|&x| libm::exp(x - m)).sum::<f64>());
    values.iter().map(|&x| x - z).collect()
}

/// Sampling probabilities `softmax(scores / temperature)`.
pub fn candidate_distribution(scores: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = scores.iter().map(|&s| s / temperature).collect();
    log_softmax(&scaled).into_iter().map(libm::exp).collect()
}

/// Top-k candidates with their log-probabilities renormalized within the set.
pub fn top_k_log_probs(logits: &[f64], k: usize) -> (Vec<u32>, Vec<f64>) {
    let ids = top_k_ids(logits, k);
    let chosen: Vec<f64> = ids.iter().map(|&i| logits[i as usize]).collect();
    (ids, log_softmax(&chosen))
}

/// Candidates and probabilities used by `sample_topk`.
pub fn top_k_distribution(logits: &[f64], k: usize, temperature: f64) -> (Vec<u32>, Vec<f64>) {
    let (ids, lp) = top_k_log_probs(logits, k);
    (ids, candidate_distribution(&lp, temperature))
}

/// Draw an index from `probs` (which sum to one).
pub fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Sample from the `top_k` logits at `temperature`.
pub fn sample_topk<R: Rng + ?Sized>(
    logits: &[f64],
    top_k: usize,
    temperature: f64,
    rng: &mut R,
) -> u32 {
    let (ids, probs) = top_k_distribution(logits, top_k, temperature);
    ids[draw(&probs, rng)]
}

fn check_lookahead<M: FutureLm + ?Sized>(model: &M, k: usize, l: usize) -> Result<()> {
    if k == 0 || k > model.vocab_size() {
        return Err(Error::contract(format!(
            "lookahead K {k} outside 1..={}",
            model.vocab_size()
        )));
    }
    if l + 1 > model.n_future() {
        return Err(Error::contract(format!(
            "lookahead L {l} exceeds the decoder window (at most {})",
            model.n_future() - 1
        )));
    }
    Ok(())
}

/// Lookahead scores from an already computed memory. `seed` is the last
/// context token and `first_logits` the decoder's first-position logits.
pub fn lookahead_from_memory<M: FutureLm + ?Sized>(
    model: &M,
    memory: &M::Memory,
    seed: u32,
    first_logits: &[f64],
    k: usize,
    l: usize,
    gamma: f64,
) -> Result<(Vec<u32>, Vec<f64>)> {
    check_lookahead(model, k, l)?;
    let (cands, mut scores) = top_k_log_probs(first_logits, k);
    let k = cands.len();
    let v = model.vocab_size();
    let mut windows: Vec<Vec<u32>> = cands.iter().map(|&c| vec![seed, c]).collect();
    let mut weight = 1.0;
    for _ in 1..=l {
        weight *= gamma;
        let nd = windows[0].len();
        let flat: Vec<u32> = windows.iter().flatten().cloned().collect();
        let logits = model.decode(memory, &flat, k, nd)?;
        for (i, w) in windows.iter_mut().enumerate() {
            let row = &logits[(i * nd + nd - 1) * v..(i * nd + nd) * v];
            let g = top_k_ids(row, 1)[0];
            let lp = log_softmax(row)[g as usize];
            if weight != 0.0 {
                scores[i] += weight * lp;
            }
            w.push(g);
        }
    }
    Ok((cands, scores))
}

/// Candidates and un-normalized lookahead scores after `context`.
pub fn lookahead_scores<M: FutureLm + ?Sized>(
    model: &M,
    context: &[u32],
    k: usize,
    l: usize,
    gamma: f64,
) -> Result<(Vec<u32>, Vec<f64>)> {
    check_context(context)?;
    check_lookahead(model, k, l)?;
    let memory = model.memory(context)?;
    let seed = context[context.len() - 1];
    let first = model.decode(&memory, &[seed], 1, 1)?;
    lookahead_from_memory(model, &memory, seed, &first, k, l, gamma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub temperature: f64,
    pub lookahead_l: usize,
    pub lookahead_k: usize,
    pub gamma: f64,
    pub seed: u64,
    /// Token never emitted (e.g. end of text).
    pub suppress: Option<u32>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_k: 100,
            temperature: 1.0,
            lookahead_l: 0,
            lookahead_k: 8,
            gamma: 0.8,
            seed: 0,
            suppress: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.lookahead_k == 0 {
            return Err(Error::Config(
                "top_k and lookahead_k must be at least 1".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        Ok(())
    }

    fn mask(&self, logits: &mut [f64]) {
        if let Some(s) = self.suppress {
            if let Some(x) = logits.get_mut(s as usize) {
                *x = f64::NEG_INFINITY;
            }
        }
    }
}

/// Lookahead candidates with their sampling probabilities.
pub fn lookahead_distribution<M: FutureLm + ?Sized>(
    model: &M,
    context: &[u32],
    cfg: &SamplerConfig,
) -> Result<(Vec<u32>, Vec<f64>)> {
    check_context(context)?;
    check_lookahead(model, cfg.lookahead_k, cfg.lookahead_l)?;
    let memory = model.memory(context)?;
    let seed = context[context.len() - 1];
    let mut first = model.decode(&memory, &[seed], 1, 1)?;
    cfg.mask(&mut first);
    let (cands, scores) = lookahead_from_memory(
        model,
        &memory,
        seed,
        &first,
        cfg.lookahead_k,
        cfg.lookahead_l,
        cfg.gamma,
    )?;
    Ok((cands, candidate_distribution(&scores, cfg.temperature)))
}

pub fn lookahead_sample<M: FutureLm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    context: &[u32],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<u32> {
    let (cands, probs) = lookahead_distribution(model, context, cfg)?;
    Ok(cands[draw(&probs, rng)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Gpt,
    FtpSingle,
    FtpLookahead,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gpt" => Ok(Strategy::Gpt),
            "ftp_single" => Ok(Strategy::FtpSingle),
            "ftp_lookahead" => Ok(Strategy::FtpLookahead),
            _ => Err(Error::Config(format!("unknown strategy {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Gpt => "gpt",
            Strategy::FtpSingle => "ftp_single",
            Strategy::FtpLookahead => "ftp_lookahead",
        }
    }
}

fn window(tokens: &[u32], limit: usize) -> &[u32] {
    &tokens[tokens.len().saturating_sub(limit)..]
}

/// Append `n_tokens` top-k samples. Contexts longer than the model limit
/// keep only the most recent tokens.
pub fn generate_next<M: NextTokenLm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prompt: &[u32],
    n_tokens: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<u32>> {
    check_context(prompt)?;
    cfg.validate()?;
    let mut out = prompt.to_vec();
    for _ in 0..n_tokens {
        let mut logits = model.next_logits(window(&out, model.context_limit()))?;
        cfg.mask(&mut logits);
        out.push(sample_topk(&logits, cfg.top_k, cfg.temperature, rng));
    }
    Ok(out)
}

/// Append `n_tokens` lookahead samples.
pub fn generate_lookahead<M: FutureLm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prompt: &[u32],
    n_tokens: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<u32>> {
    check_context(prompt)?;
    cfg.validate()?;
    let mut out = prompt.to_vec();
    for _ in 0..n_tokens {
        let t = lookahead_sample(model, window(&out, model.context_limit()), cfg, rng)?;
        out.push(t);
    }
    Ok(out)
}

/// Generation with the strategy matching the model architecture.
pub fn generate<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    prompt: &[u32],
    n_tokens: usize,
    strategy: Strategy,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<u32>> {
    match (model, strategy) {
        (Model::Gpt(m), Strategy::Gpt) => generate_next(m, prompt, n_tokens, cfg, rng),
        (Model::Ftp(m), Strategy::FtpSingle) => generate_next(m, prompt, n_tokens, cfg, rng),
        (Model::Ftp(m), Strategy::FtpLookahead) => {
            generate_lookahead(m, prompt, n_tokens, cfg, rng)
        }
        (m, s) => Err(Error::Config(format!(
            "strategy {} needs a different model than {}",
            s.name(),
            m.kind().name()
        ))),
    }
}

/// Greedy decoding until `stop` is produced or `max_tokens` are generated.
/// Returns the generated tokens (including `stop` when reached).
pub fn greedy<M: NextTokenLm + ?Sized>(
    model: &M,
    prompt: &[u32],
    max_tokens: usize,
    stop: u32,
) -> Result<Vec<u32>> {
    check_context(prompt)?;
    let mut ctx = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_tokens {
        let logits = model.next_logits(window(&ctx, model.context_limit()))?;
        let t = top_k_ids(&logits, 1)[0];
        out.push(t);
        ctx.push(t);
        if t == stop {
            break;
        }
    }
    Ok(out)
}
