//! Experiment drivers behind the CLI commands.
//!
//! Each driver reads a resolved [`RunConfig`], writes its outputs and the
//! resolved configuration into the output directory, and returns a summary
//! that the CLI prints as JSON.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use ftp_core::data::{sample_batch, Batch, ByteTokenizer, TokenCorpus, BYTE_VOCAB};
use ftp_core::gridworld::{
    self, generate_dataset, generate_program, program_string, score_outputs, EvalReport,
    GridInstance, GridSource, GRID_TOKENS, TRAIN_LEN, VOCAB,
};
use ftp_core::inference::{generate, NextTokenLm};
use ftp_core::model::{count_parameters, Model, ModelKind};
use ftp_core::numerics::{DType, Scalar};
use ftp_core::probes::{
    decoder_offset_losses, embed_windows, mean_pool_classify, sample_windows, separation_stats,
    train_decoder_probe, train_future_probe, ClassifyConfig, ProbeConfig,
};
use ftp_core::training::{self, BatchSource, Control, CorpusSource, Split, TrainState};

use crate::bundled;
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::load_corpus;
use crate::gridfile::{read_grid, write_grid, GridFile, GridHeader};
use crate::labeled::{read_labeled, LabeledSet};
use crate::metrics::{read_metrics, MetricsLog};

pub const CHECKPOINT_FILE: &str = "checkpoint.ftpc";
pub const METRICS_FILE: &str = "metrics.csv";

/// Run `$body` with `$t` bound to the element type named by `$dtype`.
macro_rules! with_dtype {
    ($dtype:expr, $t:ident => $body:expr) => {
        match $dtype {
            DType::F32 => {
                type $t = f32;
                $body
            }
            DType::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    cfg.write_resolved(&cfg.out_dir)?;
    Ok(cfg.out_dir.clone())
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

pub fn load_text_corpus(source: &str) -> Result<TokenCorpus> {
    if source == "bundled" {
        return Ok(TokenCorpus::from_bytes(bundled::corpus().as_bytes()));
    }
    load_corpus(Path::new(source)).with_context(|| format!("loading corpus {source}"))
}

fn load_labeled_set(source: &str, seed: u64) -> Result<LabeledSet> {
    if source == "bundled" {
        return Ok(bundled::topics(60, seed));
    }
    read_labeled(Path::new(source)).with_context(|| format!("loading labeled text {source}"))
}

fn decoder_tokens(kind: ModelKind, n_future: usize) -> usize {
    match kind {
        ModelKind::Gpt => 1,
        ModelKind::Ftp => n_future,
    }
}

/// Options shared by the training commands.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint in the output directory.
    pub resume: bool,
    /// Stop (after checkpointing) once this many steps are done.
    pub stop_after: Option<u64>,
    /// Stop (after checkpointing) at the first validation pass whose
    /// first-token loss is at or below this value.
    pub until_val_k0: Option<f64>,
}

/// Model, optimizer state and metrics log, fresh or resumed.
struct Session<T> {
    model: Model<T>,
    state: TrainState<T>,
    log: MetricsLog,
    clock_offset: f64,
}

fn open_session<T: Scalar>(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<Session<T>> {
    let ck_path = dir.join(CHECKPOINT_FILE);
    let metrics_path = dir.join(METRICS_FILE);
    if resume {
        let ck: Checkpoint<T> = checkpoint::load(&ck_path)
            .with_context(|| format!("resuming from {}", ck_path.display()))?;
        ensure!(
            ck.model.kind() == cfg.kind,
            "checkpoint holds a {} model, config asks for {}",
            ck.model.kind().name(),
            cfg.kind.name()
        );
        ensure!(
            ck.model.config() == &cfg.model,
            "checkpoint model configuration differs from the run configuration"
        );
        let state = ck
            .state
            .context("checkpoint has no optimizer state to resume from")?;
        let log = MetricsLog::resume(&metrics_path, state.step)?;
        let clock_offset = read_metrics(&metrics_path)?
            .last()
            .map_or(0.0, |r| r.wallclock_s);
        return Ok(Session {
            model: ck.model,
            state,
            log,
            clock_offset,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::<T>::new(cfg.kind, cfg.model.clone(), &mut rng)?;
    let state = TrainState::new(model.params(), cfg.seed);
    let log = MetricsLog::create(&metrics_path)?;
    Ok(Session {
        model,
        state,
        log,
        clock_offset: 0.0,
    })
}

fn save_checkpoint<T: Scalar>(
    dir: &Path,
    cfg: &RunConfig,
    model: &Model<T>,
    state: &TrainState<T>,
) -> Result<()> {
    let ck = Checkpoint {
        model: model.clone(),
        state: Some(state.clone()),
        meta: cfg.to_text(),
    };
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &ck)?;
    Ok(())
}

/// Train with checkpointing, metrics and an optional early stop. `on_step`
/// runs after each training step (e.g. for per-epoch evaluation).
fn run_training<T: Scalar, S: BatchSource + ?Sized>(
    cfg: &RunConfig,
    dir: &Path,
    session: &mut Session<T>,
    source: &mut S,
    val: &[Batch],
    opts: &TrainOptions,
    mut on_step: impl FnMut(&Model<T>, u64) -> Result<()>,
) -> Result<Option<(f64, f64)>> {
    let start = Instant::now();
    let offset = session.clock_offset;
    let mut last_val = None;
    let mut failure: Option<anyhow::Error> = None;
    let Session {
        model, state, log, ..
    } = session;
    let result = training::train(model, source, val, &cfg.train, state, |m, st, metrics| {
        let elapsed = offset + start.elapsed().as_secs_f64();
        let r = (|| -> Result<Control> {
            log.append(metrics, elapsed)?;
            if metrics.split == Split::Val {
                last_val = Some((metrics.loss, metrics.loss_k0));
                if opts.until_val_k0.is_some_and(|t| metrics.loss_k0 <= t) {
                    save_checkpoint(dir, cfg, m, st)?;
                    return Ok(Control::Stop);
                }
                return Ok(Control::Continue);
            }
            on_step(m, metrics.step)?;
            let stop = opts.stop_after.is_some_and(|s| metrics.step >= s);
            let due = cfg.checkpoint_every > 0 && metrics.step % cfg.checkpoint_every == 0;
            if stop || due {
                save_checkpoint(dir, cfg, m, st)?;
            }
            Ok(if stop {
                Control::Stop
            } else {
                Control::Continue
            })
        })();
        r.map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            ftp_core::Error::Contract(msg)
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    result?;
    save_checkpoint(dir, cfg, model, state)?;
    Ok(last_val)
}

/// Train a GPT or FTP model on a token corpus.
pub fn train_lm(cfg: &RunConfig, opts: &TrainOptions) -> Result<Value> {
    cfg.validate()?;
    let dir = prepare_out_dir(cfg)?;
    let corpus = load_text_corpus(&cfg.corpus)?;
    ensure!(
        corpus.vocab_size() <= cfg.model.vocab_size,
        "corpus vocabulary {} exceeds model.vocab_size {}",
        corpus.vocab_size(),
        cfg.model.vocab_size
    );
    ensure!(
        cfg.train.seq_len <= cfg.model.enc_ctx,
        "train.seq_len {} exceeds model.enc_ctx {}",
        cfg.train.seq_len,
        cfg.model.enc_ctx
    );
    let (train, val) = corpus.split(1.0 - cfg.val_frac);
    let n = decoder_tokens(cfg.kind, cfg.model.n_future);
    let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7661_6C69_6461_7465);
    let val_batches = if cfg.val_frac > 0.0 && cfg.val_batches > 0 {
        (0..cfg.val_batches)
            .map(|_| sample_batch(&val, &mut vrng, cfg.train.batch_size, cfg.train.seq_len, n))
            .collect::<ftp_core::Result<Vec<_>>>()
            .context("validation split too small for the configured windows")?
    } else {
        Vec::new()
    };
    let mut source = CorpusSource {
        corpus: &train,
        batch_size: cfg.train.batch_size,
        seq_len: cfg.train.seq_len,
        n,
    };
    let summary = with_dtype!(cfg.dtype, T => {
        let mut s = open_session::<T>(cfg, &dir, opts.resume)?;
        let last_val = run_training(cfg, &dir, &mut s, &mut source, &val_batches, opts, |_, _| Ok(()))?;
        json!({
            "command": "train-lm",
            "kind": cfg.kind.name(),
            "steps": s.state.step,
            "parameters": s.model.params().num_elements(),
            "train_tokens": train.len(),
            "val_loss": last_val.map(|v| v.0),
            "val_loss_k0": last_val.map(|v| v.1),
            "checkpoint": dir.join(CHECKPOINT_FILE),
            "metrics": dir.join(METRICS_FILE),
        })
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn grid_instances(path: &str, what: &str) -> Result<Vec<GridInstance>> {
    ensure!(
        !path.is_empty(),
        "no {what} dataset given (set grid.{what}_file)"
    );
    Ok(read_grid(Path::new(path))
        .with_context(|| format!("reading {what} dataset {path}"))?
        .instances)
}

/// Score greedy generations on `test`, in parallel over instances.
pub fn evaluate_parallel<M: NextTokenLm + Sync + ?Sized>(
    model: &M,
    test: &[GridInstance],
) -> Result<EvalReport> {
    let outputs = test
        .par_iter()
        .map(|inst| generate_program(model, inst))
        .collect::<ftp_core::Result<Vec<_>>>()?;
    Ok(score_outputs(test, &outputs))
}

fn report_json(r: &EvalReport) -> Value {
    let per_length: Vec<Value> = r
        .per_length
        .iter()
        .enumerate()
        .filter(|(_, s)| s.total > 0)
        .map(|(len, s)| json!({"length": len, "total": s.total, "correct": s.correct}))
        .collect();
    json!({
        "n": r.n,
        "fraction_correct": r.fraction_correct,
        "fraction_unique": r.fraction_unique,
        "per_length": per_length,
    })
}

/// Train on a gridworld dataset for `grid.epochs` epochs, scoring the test
/// set after every epoch.
pub fn train_grid(cfg: &RunConfig, opts: &TrainOptions) -> Result<Value> {
    let mut cfg = cfg.clone();
    ensure!(
        cfg.model.vocab_size == VOCAB,
        "gridworld models need model.vocab_size={VOCAB} (try --preset grid)"
    );
    ensure!(
        cfg.model.enc_ctx >= TRAIN_LEN,
        "gridworld models need model.enc_ctx >= {TRAIN_LEN} (try --preset grid)"
    );
    let train = grid_instances(&cfg.grid_train, "train")?;
    let test = if cfg.grid_test.is_empty() {
        Vec::new()
    } else {
        grid_instances(&cfg.grid_test, "test")?
    };
    let test = &test[..if cfg.grid_eval_limit == 0 {
        test.len()
    } else {
        cfg.grid_eval_limit.min(test.len())
    }];
    let n = decoder_tokens(cfg.kind, cfg.model.n_future);
    let mut source = GridSource::new(
        &train,
        cfg.train.batch_size,
        cfg.train.accumulation,
        n,
        cfg.grid_region,
        cfg.seed,
    );
    let per_epoch = source.steps_per_epoch();
    cfg.train.total_steps = per_epoch * cfg.grid_epochs as u64;
    cfg.train.warmup_steps = cfg.train.warmup_steps.min(cfg.train.total_steps);
    cfg.train.seq_len = TRAIN_LEN;
    cfg.validate()?;
    let dir = prepare_out_dir(&cfg)?;
    let eval_path = dir.join("grid_eval.csv");
    if !opts.resume || !eval_path.exists() {
        fs::write(
            &eval_path,
            "epoch,step,n,fraction_correct,fraction_unique\n",
        )?;
    }
    let mut epochs: Vec<Value> = Vec::new();
    let summary = with_dtype!(cfg.dtype, T => {
        let mut s = open_session::<T>(&cfg, &dir, opts.resume)?;
        if opts.resume {
            keep_eval_rows(&eval_path, s.state.step)?;
        }
        run_training(&cfg, &dir, &mut s, &mut source, &[], opts, |m, step| {
            if step % per_epoch != 0 || test.is_empty() {
                return Ok(());
            }
            let r = evaluate_parallel(m, test)?;
            let epoch = step / per_epoch;
            let line = format!("{epoch},{step},{},{},{}\n", r.n, r.fraction_correct, r.fraction_unique);
            fs::OpenOptions::new().append(true).open(&eval_path)?.write_all(line.as_bytes())?;
            eprintln!("epoch {epoch}: fraction_correct {:.4} fraction_unique {:.4}", r.fraction_correct, r.fraction_unique);
            epochs.push(json!({"epoch": epoch, "step": step, "report": report_json(&r)}));
            Ok(())
        })?;
        json!({
            "command": "train-grid",
            "kind": cfg.kind.name(),
            "region": cfg.grid_region.name(),
            "seed": cfg.seed,
            "steps": s.state.step,
            "steps_per_epoch": per_epoch,
            "parameters": s.model.params().num_elements(),
            "n_train": train.len(),
            "n_test": test.len(),
            "epochs": epochs,
            "checkpoint": dir.join(CHECKPOINT_FILE),
        })
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn keep_eval_rows(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .nth(1)
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Sample a continuation of `cfg.prompt` from a checkpoint.
pub fn generate_text(cfg: &RunConfig, checkpoint_path: &Path) -> Result<Value> {
    cfg.sample.validate()?;
    let dir = prepare_out_dir(cfg)?;
    let dtype = checkpoint::peek_dtype(checkpoint_path)?;
    let tok = ByteTokenizer;
    let tokens = with_dtype!(dtype, T => {
        let ck: Checkpoint<T> = checkpoint::load(checkpoint_path)?;
        let vocab = ck.model.config().vocab_size;
        ensure!(vocab == BYTE_VOCAB, "generate works on byte-level models (vocab {BYTE_VOCAB}), checkpoint has {vocab}");
        let mut prompt = tok.encode(cfg.prompt.as_bytes());
        if prompt.is_empty() {
            prompt.push(tok.eos());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let out = generate(&ck.model, &prompt, cfg.n_tokens, cfg.strategy, &cfg.sample, &mut rng)?;
        out
    });
    let text = String::from_utf8_lossy(&tok.decode(&tokens)?).into_owned();
    let summary = json!({
        "command": "generate",
        "strategy": cfg.strategy.name(),
        "prompt": cfg.prompt,
        "text": text,
        "tokens": tokens,
    });
    write_json(&dir.join("generation.json"), &summary)?;
    Ok(summary)
}

/// Generate train and test gridworld datasets.
pub fn grid_gen(
    cfg: &RunConfig,
    train_path: Option<&Path>,
    test_path: Option<&Path>,
) -> Result<Value> {
    let dir = prepare_out_dir(cfg)?;
    let (train, test) = generate_dataset(&cfg.grid)?;
    let train_path = train_path.map_or_else(|| dir.join("grid_train.txt"), Path::to_path_buf);
    let test_path = test_path.map_or_else(|| dir.join("grid_test.txt"), Path::to_path_buf);
    let header = |split: &str, len| GridHeader {
        split: split.into(),
        seed: cfg.seed,
        len,
        world: cfg.grid.world,
    };
    write_grid(
        &train_path,
        &GridFile {
            header: header("train", cfg.grid.len_train),
            instances: train,
        },
    )?;
    write_grid(
        &test_path,
        &GridFile {
            header: header("test", cfg.grid.len_test),
            instances: test,
        },
    )?;
    let summary = json!({
        "command": "gridworld gen",
        "n_train": cfg.grid.n_train,
        "n_test": cfg.grid.n_test,
        "train": train_path,
        "test": test_path,
    });
    write_json(&dir.join("gridworld_gen.json"), &summary)?;
    Ok(summary)
}

/// Answers every dataset prompt with its reference program.
pub struct OracleLm {
    answers: HashMap<Vec<u32>, Vec<u32>>,
}

impl OracleLm {
    pub fn new(instances: &[GridInstance]) -> Self {
        let answers = instances
            .iter()
            .map(|i| {
                let mut p: Vec<u32> = i.program.iter().map(|x| x.token()).collect();
                p.push(gridworld::EOS);
                (gridworld::encode_prompt(i), p)
            })
            .collect();
        Self { answers }
    }
}

impl NextTokenLm for OracleLm {
    fn vocab_size(&self) -> usize {
        VOCAB
    }
    fn context_limit(&self) -> usize {
        usize::MAX
    }
    fn next_logits(&self, context: &[u32]) -> ftp_core::Result<Vec<f64>> {
        let mut logits = vec![0.0; VOCAB];
        let next = context
            .get(..GRID_TOKENS)
            .and_then(|p| self.answers.get(p))
            .and_then(|a| a.get(context.len() - GRID_TOKENS))
            .copied()
            .unwrap_or(gridworld::EOS);
        logits[next as usize] = 1.0;
        Ok(logits)
    }
}

/// Greedy evaluation of a checkpoint (or the reference oracle) on a dataset.
pub fn grid_eval(cfg: &RunConfig, dataset: &Path, checkpoint_path: Option<&Path>) -> Result<Value> {
    let dir = prepare_out_dir(cfg)?;
    let mut test = read_grid(dataset)?.instances;
    if cfg.grid_eval_limit > 0 {
        test.truncate(cfg.grid_eval_limit);
    }
    let (model_name, report) = match checkpoint_path {
        None => (
            "oracle".to_string(),
            evaluate_parallel(&OracleLm::new(&test), &test)?,
        ),
        Some(p) => with_dtype!(checkpoint::peek_dtype(p)?, T => {
            let ck: Checkpoint<T> = checkpoint::load(p)?;
            ensure!(ck.model.config().vocab_size == VOCAB, "checkpoint is not a gridworld model");
            (ck.model.kind().name().to_string(), evaluate_parallel(&ck.model, &test)?)
        }),
    };
    let mut summary = report_json(&report);
    summary["command"] = json!("gridworld eval");
    summary["model"] = json!(model_name);
    write_json(&dir.join("grid_eval.json"), &summary)?;
    Ok(summary)
}

/// ASCII rendering of one dataset instance.
pub fn grid_inspect(dataset: &Path, index: usize) -> Result<String> {
    let file = read_grid(dataset)?;
    let inst = file.instances.get(index).with_context(|| {
        format!(
            "index {index} out of range: dataset has {} instances",
            file.instances.len()
        )
    })?;
    let mut out = format!(
        "instance {index} program {}\n",
        program_string(&inst.program)
    );
    for (i, (start, stop)) in inst.pairs.iter().enumerate() {
        out.push_str(&format!(
            "\npair {i} start\n{}\npair {i} stop\n{}",
            start.render(),
            stop.render()
        ));
    }
    Ok(out)
}

/// Cosine similarity by separation; one CSV row per separation.
pub fn probe_similarity(cfg: &RunConfig, checkpoint_path: &Path) -> Result<Value> {
    let dir = prepare_out_dir(cfg)?;
    let corpus = load_text_corpus(&cfg.corpus)?;
    let (_, val) = corpus.split(1.0 - cfg.val_frac.max(0.1));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (kind, stats) = with_dtype!(checkpoint::peek_dtype(checkpoint_path)?, T => {
        let ck: Checkpoint<T> = checkpoint::load(checkpoint_path)?;
        let len = cfg.sim_seq_len.min(ck.model.config().enc_ctx);
        (ck.model.kind(), separation_stats(&ck.model, &val, cfg.max_sep, cfg.sim_sequences, len, cfg.far_pairs, &mut rng)?)
    });
    let mut csv = String::from("separation,mean,std,count\n");
    for (i, m) in stats.by_sep.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{}\n", i + 1, m.mean(), m.std(), m.count));
    }
    fs::write(dir.join("similarity.csv"), csv)?;
    let adjacent = &stats.by_sep[0];
    let summary = json!({
        "command": "probe similarity",
        "kind": kind.name(),
        "adjacent_mean": adjacent.mean(),
        "adjacent_std": adjacent.std(),
        "far_mean": stats.far.mean(),
        "far_std": stats.far.std(),
        "far_count": stats.far.count,
        "excluded": stats.excluded,
        "csv": dir.join("similarity.csv"),
    });
    write_json(&dir.join("similarity.json"), &summary)?;
    Ok(summary)
}

struct FutureRow {
    method: &'static str,
    k: usize,
    loss: f64,
}

fn future_rows<T: Scalar>(
    cfg: &RunConfig,
    model: &Model<T>,
    corpus: &TokenCorpus,
) -> Result<Vec<FutureRow>> {
    let (train, test) = corpus.split(1.0 - cfg.val_frac.max(0.1));
    let t = cfg.probe_window_len.min(model.config().enc_ctx);
    let extra = cfg.probe_offsets.max(model.config().n_future);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF07E);
    let train_w = embed_windows(
        model,
        &sample_windows(&train, cfg.probe_windows, t, extra, &mut rng)?,
        t,
    )?;
    let test_w = embed_windows(
        model,
        &sample_windows(&test, cfg.probe_test_windows, t, extra, &mut rng)?,
        t,
    )?;
    let mut rows = Vec::new();
    for k in 1..=cfg.probe_offsets {
        let pc = ProbeConfig {
            offset: k,
            expansion: cfg.probe_expansion,
            budget: cfg.probe.clone(),
        };
        let p = train_future_probe(model, &train_w, &test_w, &pc)?;
        rows.push(FutureRow {
            method: "mlp_probe",
            k,
            loss: p.loss,
        });
    }
    match model {
        Model::Ftp(ftp) => {
            for (i, &loss) in decoder_offset_losses(ftp, &test_w)?.iter().enumerate() {
                rows.push(FutureRow {
                    method: "decoder",
                    k: i + 1,
                    loss,
                });
            }
        }
        Model::Gpt(gpt) => {
            let mut fc = gpt.config.clone();
            fc.n_future = cfg.model.n_future;
            fc.dec_layers = cfg.model.dec_layers;
            fc.pseudo_seq = cfg.model.pseudo_seq;
            let probe = train_decoder_probe(gpt, &fc, &train_w, &test_w, &cfg.probe)?;
            for (i, &loss) in probe.losses.iter().enumerate() {
                rows.push(FutureRow {
                    method: "decoder_probe",
                    k: i + 1,
                    loss,
                });
            }
        }
    }
    Ok(rows)
}

/// Per-offset future-token perplexities for one or more checkpoints.
pub fn probe_future(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<Value> {
    ensure!(
        !checkpoints.is_empty(),
        "probe future needs at least one checkpoint"
    );
    let dir = prepare_out_dir(cfg)?;
    let corpus = load_text_corpus(&cfg.corpus)?;
    let mut csv = String::from("model,method,k,loss,perplexity\n");
    let mut series = Vec::new();
    for p in checkpoints {
        let (kind, rows) = with_dtype!(checkpoint::peek_dtype(p)?, T => {
            let ck: Checkpoint<T> = checkpoint::load(p)?;
            (ck.model.kind(), future_rows(cfg, &ck.model, &corpus)?)
        });
        for r in &rows {
            let ppl = r.loss.exp();
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                kind.name(),
                r.method,
                r.k,
                r.loss,
                ppl
            ));
            series.push(json!({"model": kind.name(), "checkpoint": p, "method": r.method, "k": r.k, "loss": r.loss, "perplexity": ppl}));
        }
    }
    fs::write(dir.join("future.csv"), csv)?;
    let summary = json!({"command": "probe future", "rows": series, "csv": dir.join("future.csv")});
    write_json(&dir.join("future.json"), &summary)?;
    Ok(summary)
}

/// Mean-pooled embedding classifier on labeled text.
pub fn probe_classify(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    shuffle_labels: bool,
) -> Result<Value> {
    let dir = prepare_out_dir(cfg)?;
    let set = load_labeled_set(&cfg.labeled, cfg.seed)?;
    ensure!(
        set.labels.len() >= 2,
        "classification needs at least two labels"
    );
    let tok = ByteTokenizer;
    let mut examples: Vec<(usize, Vec<u32>)> = set
        .examples
        .iter()
        .map(|(c, t)| (*c, tok.encode(t.as_bytes())))
        .collect();
    if shuffle_labels {
        use rand::seq::SliceRandom;
        let mut labels: Vec<usize> = examples.iter().map(|e| e.0).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5AFF));
        examples.iter_mut().zip(labels).for_each(|(e, l)| e.0 = l);
    }
    let cc = ClassifyConfig {
        expansion: cfg.probe_expansion,
        val_frac: cfg.classify_val_frac,
        budget: ftp_core::probes::ProbeBudget {
            epochs: cfg.classify_epochs,
            lr: cfg.probe.lr,
            batch_size: cfg.classify_batch,
            seed: cfg.seed,
        },
    };
    let (kind, r) = with_dtype!(checkpoint::peek_dtype(checkpoint_path)?, T => {
        let ck: Checkpoint<T> = checkpoint::load(checkpoint_path)?;
        ensure!(ck.model.config().vocab_size == BYTE_VOCAB, "classification expects a byte-level model");
        (ck.model.kind(), mean_pool_classify(&ck.model, &examples, set.labels.len(), &cc)?)
    });
    let summary = json!({
        "command": "probe classify",
        "kind": kind.name(),
        "labels": set.labels,
        "shuffled_labels": shuffle_labels,
        "chance": 1.0 / set.labels.len() as f64,
        "n_train": r.n_train,
        "n_val": r.n_val,
        "skipped": r.skipped,
        "train_loss": r.train_loss,
        "val_loss": r.val_loss,
        "val_accuracy": r.val_accuracy,
    });
    let csv = format!(
        "kind,shuffled,n_train,n_val,skipped,train_loss,val_loss,val_accuracy\n{},{},{},{},{},{},{},{}\n",
        kind.name(),
        shuffle_labels,
        r.n_train,
        r.n_val,
        r.skipped,
        r.train_loss,
        r.val_loss,
        r.val_accuracy
    );
    fs::write(dir.join("classify.csv"), csv)?;
    write_json(&dir.join("classify.json"), &summary)?;
    Ok(summary)
}

/// Closed-form parameter counts for the configured model.
pub fn param_count(cfg: &RunConfig) -> Result<Value> {
    cfg.model.validate()?;
    let dir = prepare_out_dir(cfg)?;
    let b = count_parameters(cfg.kind, &cfg.model);
    let summary = json!({
        "command": "param-count",
        "kind": cfg.kind.name(),
        "encoder": b.encoder(),
        "encoder_layers": b.encoder_layers,
        "encoder_final_norm": b.encoder_final_norm,
        "projection": b.projection,
        "decoder": b.decoder(),
        "decoder_layers": b.decoder_layers,
        "decoder_final_norm": b.decoder_final_norm,
        "decoder_positions": b.decoder_positions,
        "embeddings": b.embeddings,
        "total": b.total(),
    });
    write_json(&dir.join("param_count.json"), &summary)?;
    Ok(summary)
}
