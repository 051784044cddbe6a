//! Losses, learning-rate schedule, AdamW and the training loop.
//!
//! The FTP loss weights the token `k` steps ahead (0-based) by `gamma^k` and
//! divides by the sum of active weights, so it equals the masked mean
//! cross-entropy at `N = 1` and stays comparable across `gamma`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{Bound, Dropout, Model, ParamStore, TOKEN_EMBEDDING};
use crate::numerics::{log_sum_exp, Scalar, Tape, Tensor, Var};

/// `[gamma^0, .., gamma^(n-1)]` with `0^0 = 1`.
pub fn loss_weights(n: usize, gamma: f64) -> Vec<f64> {
    (0..n)
        .map(|k| {
            if k == 0 {
                1.0
            } else {
                libm::pow(gamma, k as f64)
            }
        })
        .collect()
}

fn weighted_ce<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[u32],
    weights: Vec<f64>,
) -> Result<Var> {
    let denom: f64 = weights.iter().sum();
    if denom <= 0.0 {
        return Err(Error::contract("loss mask selects no targets"));
    }
    let v = *tape.shape(logits).last().unwrap_or(&0);
    let rows = tape.value(logits).len() / v.max(1);
    if rows != targets.len() {
        return Err(Error::shape(
            "loss targets",
            tape.shape(logits),
            &[targets.len()],
        ));
    }
    let flat = tape.reshape(logits, &[rows, v])?;
    let w: Vec<T> = weights.iter().map(|&x| T::from_f64_lossy(x)).collect();
    let total = tape.cross_entropy(flat, targets, &w)?;
    Ok(tape.scale(total, T::from_f64_lossy(1.0 / denom)))
}

/// Gamma-weighted, weight-normalized cross-entropy over `[.., N, V]` logits.
pub fn ftp_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[u32],
    mask: &[u8],
    n: usize,
    gamma: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    if mask.len() != targets.len() || n == 0 || targets.len() % n != 0 {
        return Err(Error::shape(
            "ftp_loss mask",
            &[targets.len()],
            &[mask.len(), n],
        ));
    }
    let g = loss_weights(n, gamma);
    let weights = mask
        .iter()
        .enumerate()
        .map(|(i, &m)| if m != 0 { g[i % n] } else { 0.0 })
        .collect();
    weighted_ce(tape, logits, targets, weights)
}

/// Masked mean next-token cross-entropy over `[.., V]` logits.
pub fn gpt_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[u32],
    mask: &[u8],
) -> Result<Var> {
    ftp_loss(tape, logits, targets, mask, 1, 1.0)
}

/// Masked mean cross-entropy of the `k = 0` slot of `[R, N, V]` logit values,
/// or NaN when no first-token target is active.
pub fn first_token_loss<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    mask: &[u8],
    n: usize,
) -> f64 {
    let v = logits.last_dim();
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 0..targets.len() / n {
        let i = r * n;
        if mask[i] == 0 {
            continue;
        }
        let row = &logits.data()[i * v..(i + 1) * v];
        sum += (log_sum_exp(row) - row[targets[i] as usize]).to_f64_lossy();
        count += 1;
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Loss node and reported values for one batch.
pub struct BatchLoss {
    pub loss: Var,
    pub value: f64,
    pub k0: f64,
}

/// Training loss of `model` on `batch`. The FTP decoder only runs on
/// positions with at least one active target; GPT uses the `k = 0` slot.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    p: &Bound,
    batch: &Batch,
    drop: &mut Dropout<'_>,
) -> Result<BatchLoss> {
    let (b, t, n) = (batch.b, batch.t, batch.n);
    match model {
        Model::Gpt(m) => {
            let logits = m.forward(tape, p, &batch.enc_tokens, b, t, drop)?;
            let targets: Vec<u32> = batch.dec_target.iter().step_by(n).cloned().collect();
            let mask: Vec<u8> = batch.loss_mask.iter().step_by(n).cloned().collect();
            let loss = gpt_loss(tape, logits, &targets, &mask)?;
            let value = tape.value(loss).item().to_f64_lossy();
            Ok(BatchLoss {
                loss,
                value,
                k0: value,
            })
        }
        Model::Ftp(m) => {
            let rows = batch.active_rows();
            let pick = |src: &[u32]| -> Vec<u32> {
                rows.iter()
                    .flat_map(|&r| src[r * n..(r + 1) * n].iter().cloned())
                    .collect()
            };
            let dec_in = pick(&batch.dec_in);
            let targets = pick(&batch.dec_target);
            let mask: Vec<u8> = rows
                .iter()
                .flat_map(|&r| batch.loss_mask[r * n..(r + 1) * n].iter().cloned())
                .collect();
            let logits =
                m.forward_rows(tape, p, &batch.enc_tokens, b, t, &rows, &dec_in, n, drop)?;
            let k0 = first_token_loss(tape.value(logits), &targets, &mask, n);
            let loss = ftp_loss(tape, logits, &targets, &mask, n, m.config.gamma)?;
            let value = tape.value(loss).item().to_f64_lossy();
            Ok(BatchLoss { loss, value, k0 })
        }
    }
}

/// Mean `(loss, loss_k0)` over fixed batches, without gradients.
pub fn evaluate_loss<T: Scalar>(model: &Model<T>, batches: &[Batch]) -> Result<(f64, f64)> {
    let (mut l, mut k0) = (0.0, 0.0);
    for batch in batches {
        let mut tape = Tape::no_grad();
        let p = model.params().bind(&mut tape, false);
        let out = batch_loss(model, &mut tape, &p, batch, &mut Dropout::off())?;
        l += out.value;
        k0 += out.k0;
    }
    let c = batches.len().max(1) as f64;
    Ok((l / c, k0 / c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    /// Micro-batches per optimizer step.
    pub accumulation: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Validation interval in steps; 0 disables.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 4e-4,
            lr_min: 4e-5,
            warmup_steps: 100,
            total_steps: 1000,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
            accumulation: 1,
            batch_size: 8,
            seq_len: 64,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if !(self.lr_max > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr_max {
            return fail(format!(
                "need 0 <= lr_min <= lr_max, lr_max > 0 (got {}, {})",
                self.lr_min, self.lr_max
            ));
        }
        if self.warmup_steps > self.total_steps {
            return fail(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if self.accumulation == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return fail("accumulation, batch_size and seq_len must be positive".into());
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 || self.grad_clip < 0.0 {
            return fail(
                "weight_decay, eps and grad_clip must be non-negative (eps positive)".into(),
            );
        }
        Ok(())
    }
}

/// Linear warmup `lr_max * s / warmup`, cosine decay to `lr_min` at
/// `total_steps`, constant afterwards.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_max * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return if cfg.total_steps == cfg.warmup_steps {
            cfg.lr_max
        } else {
            cfg.lr_min
        };
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.lr_min
        + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// Norm weights, the shared token table and the decoder position table are
/// exempt from weight decay.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2 && name != TOKEN_EMBEDDING && name != "dec.pos"
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| vec![T::zero(); t.len()])
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update at 1-based step `step` with learning rate `lr`.
/// `decay[i]` selects tensors receiving decoupled weight decay.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut OptimState<T>,
    step: u64,
    lr: f64,
    cfg: &TrainConfig,
    decay: &[bool],
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n || decay.len() != n {
        return Err(Error::contract(format!(
            "optimizer given {} grads, {}/{} moments, {} decay flags for {n} tensors",
            grads.len(),
            state.m.len(),
            state.v.len(),
            decay.len()
        )));
    }
    if step == 0 {
        return Err(Error::contract("optimizer steps are 1-based"));
    }
    let bc1 = 1.0 - libm::pow(cfg.beta1, step as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, step as f64);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let (one, eps) = (T::one(), T::from_f64_lossy(cfg.eps));
    let step_size = T::from_f64_lossy(lr / bc1);
    let rbc2 = T::from_f64_lossy(1.0 / libm::sqrt(bc2));
    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != tensor.len() || state.m[i].len() != g.len() || state.v[i].len() != g.len() {
            return Err(Error::contract(format!(
                "gradient {i} has {} values for {} parameters",
                g.len(),
                tensor.len()
            )));
        }
        let shrink = T::from_f64_lossy(if decay[i] {
            1.0 - lr * cfg.weight_decay
        } else {
            1.0
        });
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            *p = *p * shrink - step_size * m[j] / (v[j].sqrt() * rbc2 + eps);
        }
    }
    Ok(())
}

/// Scale `grads` so their global L2 norm is at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(
        grads
            .iter()
            .flatten()
            .map(|g| g.to_f64_lossy() * g.to_f64_lossy())
            .sum::<f64>(),
    );
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    norm
}

/// Supplies training batches. Implementations must draw all randomness from
/// `rng` (or from `step`) so that a resumed run sees the same stream.
pub trait BatchSource {
    fn batch(&mut self, step: u64, micro: usize, rng: &mut ChaCha8Rng) -> Result<Batch>;
}

/// Corpus windows of `seq_len + n` tokens.
pub struct CorpusSource<'a> {
    pub corpus: &'a crate::data::TokenCorpus,
    pub batch_size: usize,
    pub seq_len: usize,
    pub n: usize,
}

impl BatchSource for CorpusSource<'_> {
    fn batch(&mut self, _step: u64, _micro: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        crate::data::sample_batch(self.corpus, rng, self.batch_size, self.seq_len, self.n)
    }
}

/// Optimizer progress: completed steps, moments and the data/dropout RNG.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub optim: OptimState<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: &ParamStore<T>, seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            step: 0,
            optim: OptimState::new(params),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub loss_k0: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One optimizer step: `accumulation` micro-batches, clipping, AdamW.
pub fn train_step<T: Scalar, S: BatchSource + ?Sized>(
    model: &mut Model<T>,
    source: &mut S,
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
) -> Result<StepMetrics> {
    let step = state.step + 1;
    let dropout = model.config().dropout;
    let mut grads: Vec<Vec<T>> = model
        .params()
        .tensors()
        .iter()
        .map(|t| vec![T::zero(); t.len()])
        .collect();
    let (mut loss, mut k0) = (0.0, 0.0);
    let inv = T::from_f64_lossy(1.0 / cfg.accumulation as f64);
    for micro in 0..cfg.accumulation {
        let batch = source.batch(step, micro, &mut state.rng)?;
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, true);
        let out = {
            let mut drop = if dropout > 0.0 {
                Dropout {
                    p: dropout,
                    rng: Some(&mut state.rng),
                }
            } else {
                Dropout::off()
            };
            batch_loss(model, &mut tape, &p, &batch, &mut drop)?
        };
        if !out.value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {} at step {step}, micro-batch {micro}",
                out.value
            )));
        }
        tape.backward(out.loss)?;
        for (acc, &v) in grads.iter_mut().zip(p.vars()) {
            if let Some(g) = tape.grad(v) {
                acc.iter_mut().zip(g).for_each(|(a, &x)| *a = *a + x * inv);
            }
        }
        loss += out.value;
        k0 += out.k0;
    }
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient norm {grad_norm} at step {step}"
        )));
    }
    let lr = lr_at(step, cfg);
    let decay: Vec<bool> = model
        .params()
        .iter()
        .map(|(n, t)| decays(n, t.shape()))
        .collect();
    adamw_step(
        model.params_mut(),
        &grads,
        &mut state.optim,
        step,
        lr,
        cfg,
        &decay,
    )?;
    state.step = step;
    let a = cfg.accumulation as f64;
    Ok(StepMetrics {
        step,
        split: Split::Train,
        loss: loss / a,
        loss_k0: k0 / a,
        lr,
        grad_norm,
    })
}

/// Whether to keep training after a callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Train until `cfg.total_steps` (or until `on_metrics` stops). Validation
/// on the fixed `val` batches runs every `cfg.eval_every` steps and after
/// the final step. `on_metrics` sees every train and validation record
/// together with the post-step model and state, e.g. to checkpoint.
pub fn train<T: Scalar, S: BatchSource + ?Sized>(
    model: &mut Model<T>,
    source: &mut S,
    val: &[Batch],
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    mut on_metrics: impl FnMut(&Model<T>, &TrainState<T>, &StepMetrics) -> Result<Control>,
) -> Result<()> {
    cfg.validate()?;
    if state.optim.m.len() != model.params().len() {
        return Err(Error::contract("optimizer state does not match the model"));
    }
    while state.step < cfg.total_steps {
        let m = train_step(model, source, cfg, state)?;
        let mut control = on_metrics(model, state, &m)?;
        let due = cfg.eval_every > 0 && m.step % cfg.eval_every == 0;
        if !val.is_empty() && (due || m.step == cfg.total_steps) {
            let (loss, loss_k0) = evaluate_loss(model, val)?;
            let v = StepMetrics {
                split: Split::Val,
                loss,
                loss_k0,
                grad_norm: 0.0,
                ..m
            };
            if on_metrics(model, state, &v)? == Control::Stop {
                control = Control::Stop;
            }
        }
        if control == Control::Stop {
            break;
        }
    }
    Ok(())
}
