//! Acceptance suite: one test per criterion, `c01` to `c11`.
//!
//! `cargo test -p ftp --test acceptance` runs the property criteria. The three
//! experiments (`c08`..`c10`) are ignored by default; run them with
//! `-- --include-ignored --nocapture`. `FTP_ACCEPTANCE_TIER=smoke` (default)
//! sizes them for a single core, `full` runs the desk-scale versions (hours).
//! Set `FTP_ACCEPTANCE_OUT` to keep their run directories.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use common::gradcheck::full_loss_gradient_check;
use common::grid::{flat, flat_run};
use common::loss::loop_oracle;
use common::toy::Toy;
use ftp::checkpoint::{self, Checkpoint};
use ftp::config::RunConfig;
use ftp::experiments::{self, TrainOptions};
use ftp::metrics::read_metrics;
use ftp_core::gridworld::{
    decode_instance, encode_instance, generate_dataset, parse_program, program_string,
    random_instance, random_program, random_world, run, step, Cell, DatasetParams, Dir,
    Instruction, World, WorldParams, SEQ_LEN,
};
use ftp_core::inference::{
    lookahead_distribution, lookahead_from_memory, lookahead_scores, next_logits_ftp,
    top_k_distribution, FutureLm, NextTokenLm, SamplerConfig,
};
use ftp_core::model::{count_parameters, FtpModel, GptModel, Model, ModelConfig, ModelKind};
use ftp_core::numerics::{Tape, Tensor};
use ftp_core::training::{ftp_loss, gpt_loss, loss_weights, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn c01_parameter_count_anchors() {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    assert_eq!(
        (cfg.dim, cfg.enc_layers, cfg.dec_layers, cfg.mlp_dim),
        (768, 12, 3, 2304)
    );
    assert_eq!((cfg.pseudo_seq, cfg.n_future), (12, 8));
    let b = count_parameters(ModelKind::Ftp, &cfg);
    for (name, got, want) in [
        ("encoder", b.encoder(), 92.03e6),
        ("projection", b.projection, 7.08e6),
        ("decoder", b.decoder(), 30.09e6),
    ] {
        let err = rel(got as f64, want);
        println!("{name}: {got} (anchor {want:.4e}, rel {err:.2e})");
        assert!(err < 5e-4, "{name}: {got} vs {want}");
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn c02_full_loss_gradients() {
    let start = Instant::now();
    let (n, worst64) = full_loss_gradient_check::<f64>(240, 1e-5, 1e-4);
    let (_, worst32) = full_loss_gradient_check::<f32>(240, 1e-5, 1e-4);
    println!("{n} parameters: worst rel f64 {worst64:.2e}, f32 {worst32:.2e}");
    assert!(n >= 200);
    assert!(worst64 < 1e-5 && worst32 < 1e-3);
    assert!(start.elapsed().as_secs() < 300);
}

fn small_cfg(vocab: usize) -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        mlp_dim: 32,
        enc_ctx: 16,
        n_future: 4,
        pseudo_seq: 3,
        ..ModelConfig::tiny(vocab)
    }
}

#[test]
fn c03_causality() {
    let start = Instant::now();
    let v = 13;
    let mut r = rng(3);
    let toks: Vec<u32> = (0..12).map(|_| r.gen_range(0..v as u32)).collect();

    // encoders: changing token j leaves every earlier position bit-identical
    let gpt = GptModel::<f32>::new(small_cfg(v), &mut r).unwrap();
    let ftp = FtpModel::<f32>::new(small_cfg(v), &mut r).unwrap();
    let base_g = gpt.logits(&toks, 1, 12).unwrap();
    let base_e = ftp.embeddings(&toks, 1, 12).unwrap();
    let d = ftp.config.dim;
    for j in 1..12 {
        let mut t2 = toks.clone();
        t2[j] = (t2[j] + 1) % v as u32;
        let g = gpt.logits(&t2, 1, 12).unwrap();
        assert_eq!(&g.data()[..j * v], &base_g.data()[..j * v]);
        let e = ftp.embeddings(&t2, 1, 12).unwrap();
        assert_eq!(&e.data()[..j * d], &base_e.data()[..j * d]);
        assert_ne!(&e.data()[j * d..], &base_e.data()[j * d..]);
    }

    // decoder: slot k never sees decoder tokens after k
    let pseudo = ftp.pseudo_sequence(&toks[..5]).unwrap();
    let dec = [4u32, 1, 7, 2];
    let base = ftp.decode_with_pseudo(&pseudo, &dec, 1, 4).unwrap();
    for k in 1..4 {
        let mut d2 = dec;
        d2[k] = (d2[k] + 3) % v as u32;
        let out = ftp.decode_with_pseudo(&pseudo, &d2, 1, 4).unwrap();
        assert_eq!(&out.data()[..k * v], &base.data()[..k * v]);
    }

    // the training forward's decoder output at every position is the decoder
    // applied to that position's pseudo-sequence, and nothing else
    let n = 4;
    let dec: Vec<u32> = (0..12)
        .flat_map(|p| (0..n).map(|k| toks[(p + k) % 12]).collect::<Vec<_>>())
        .collect();
    let full = ftp.logits(&toks, 1, 12, &dec, n).unwrap();
    for p in 0..12 {
        let ps = ftp.pseudo_sequence(&toks[..=p]).unwrap();
        let row = ftp
            .decode_with_pseudo(&ps, &dec[p * n..(p + 1) * n], 1, n)
            .unwrap();
        assert_eq!(row.data(), &full.data()[p * n * v..(p + 1) * n * v]);
    }

    // mutating the context with the pseudo-sequence held fixed changes nothing
    let ctx = [4u32, 8, 1, 2];
    let mem = ftp.memory(&ctx).unwrap();
    let first = ftp.decode(&mem, &[2], 1, 1).unwrap();
    let a = lookahead_from_memory(&ftp, &mem, 2, &first, 4, 3, 0.8).unwrap();
    assert_ne!(ftp.memory(&[9, 9, 9, 2]).unwrap(), mem);
    let b = lookahead_from_memory(&ftp, &mem, 2, &first, 4, 3, 0.8).unwrap();
    assert_eq!(a, b);
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn c04_loss_weighting() {
    assert_eq!(
        loss_weights(4, 0.8),
        vec![1.0, 0.8, 0.8 * 0.8, 0.8f64.powi(3)]
    );
    let mut r = rng(4);
    for _ in 0..5 {
        let (rows, n, v) = (6, 4, 7);
        let logits: Vec<f64> = (0..rows * n * v).map(|_| r.gen_range(-3.0..3.0)).collect();
        let targets: Vec<u32> = (0..rows * n).map(|_| r.gen_range(0..v as u32)).collect();
        let mask: Vec<u8> = (0..rows * n).map(|_| u8::from(r.gen_bool(0.8))).collect();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(&[rows, n, v], logits.clone()).unwrap());
        let out = ftp_loss(&mut tape, l, &targets, &mask, n, 0.8).unwrap();
        let want = loop_oracle(&logits, &targets, &mask, n, v, &[1.0, 0.8, 0.64, 0.512]);
        assert!(rel(tape.value(out).item(), want) < 1e-6);

        let single = &logits[..rows * v];
        let l = tape.constant(Tensor::new(&[rows, 1, v], single.to_vec()).unwrap());
        let f = ftp_loss(&mut tape, l, &targets[..rows], &mask[..rows], 1, 1.0).unwrap();
        let g = tape.constant(Tensor::new(&[rows, v], single.to_vec()).unwrap());
        let g = gpt_loss(&mut tape, g, &targets[..rows], &mask[..rows]).unwrap();
        assert_eq!(tape.value(f).item(), tape.value(g).item());
    }
}

#[test]
fn c05_lookahead_reductions() {
    // hand-worked toy: K = 2, L = 1, gamma = 0.8
    let toy = Toy::new();
    let cfg = SamplerConfig {
        lookahead_k: 2,
        lookahead_l: 1,
        ..SamplerConfig::default()
    };
    let (cands, probs) = lookahead_distribution(&toy, &[2, 0], &cfg).unwrap();
    assert_eq!(cands, vec![0, 1]);
    let s0 = (0.5f64 / 0.8).ln() + 0.8 * 0.5f64.ln();
    let s1 = (0.3f64 / 0.8).ln() + 0.8 * 0.6f64.ln();
    let p0 = s0.exp() / (s0.exp() + s1.exp());
    assert!((probs[0] - p0).abs() < 1e-6 && (probs[1] - (1.0 - p0)).abs() < 1e-6);

    for seed in 0..4 {
        let m = FtpModel::<f32>::new(small_cfg(13), &mut rng(seed)).unwrap();
        let ctx = [4u32, 8, 1, 12, 0];
        let logits = next_logits_ftp(&m, &ctx).unwrap();
        for temperature in [1.0, 0.6] {
            let base = SamplerConfig {
                lookahead_k: 5,
                lookahead_l: 0,
                temperature,
                ..SamplerConfig::default()
            };
            let l0 = lookahead_distribution(&m, &ctx, &base).unwrap();
            assert_eq!(l0, top_k_distribution(&logits, 5, temperature));
            for l in 1..4 {
                let g0 = SamplerConfig {
                    lookahead_l: l,
                    gamma: 0.0,
                    ..base.clone()
                };
                assert_eq!(lookahead_distribution(&m, &ctx, &g0).unwrap(), l0);
            }
        }
        assert!(lookahead_scores(&m, &ctx, 5, 3, 0.8).is_ok());
    }
}

#[test]
fn c06_gridworld_interpreter() {
    let start = Instant::now();
    let mut r = rng(6);
    let params = WorldParams {
        p_obstruction: 0.3,
        p_zero: 0.4,
    };
    let id = |s: &str| parse_program(s).unwrap();
    for _ in 0..100_000 {
        let w = random_world(&mut r, &params).unwrap();
        let p = random_program(&mut r, (1, 10));
        let got = run(&w, &p);
        assert_eq!(flat(&got), flat_run(flat(&w), &program_string(&p)));
        assert_eq!(run(&w, &id("LLLL")), w);
        assert_eq!(run(&w, &id("LR")), w);
        assert_eq!(run(&w, &id("LL")), run(&w, &id("RR")));
        let q = random_program(&mut r, (1, 10));
        let pq: Vec<Instruction> = p.iter().chain(&q).copied().collect();
        assert_eq!(run(&got, &q), run(&w, &pq));
    }
    let mut w = World::empty((4, 4), Dir::N);
    w.grid[4][4] = Cell::Score(10);
    assert_eq!(step(&w, Instruction::Mark), w);
    w.grid[4][4] = Cell::Score(0);
    assert_eq!(step(&w, Instruction::Unmark), w);
    w.grid[3][4] = Cell::Obstruction;
    assert_eq!(step(&w, Instruction::Move), w);
    let w = World::empty((1, 1), Dir::W);
    assert_eq!(step(&w, Instruction::Move), w);

    let (train, test) = generate_dataset(&DatasetParams {
        n_train: 2000,
        n_test: 200,
        ..DatasetParams::default()
    })
    .unwrap();
    assert!(train.iter().chain(&test).all(|i| i.is_consistent()));
    println!("{:.1}s", start.elapsed().as_secs_f64());
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn c07_codec_round_trip() {
    let mut r = rng(7);
    for _ in 0..10_000 {
        let inst = random_instance(&mut r, (1, 10), &WorldParams::default()).unwrap();
        let seq = encode_instance(&inst);
        assert_eq!(seq.len(), SEQ_LEN);
        assert_eq!(SEQ_LEN, 662);
        assert_eq!(decode_instance(&seq).unwrap(), inst);
    }
}

fn full_tier() -> bool {
    match std::env::var("FTP_ACCEPTANCE_TIER").as_deref() {
        Ok("full") => true,
        Ok("smoke") | Err(_) => false,
        Ok(other) => panic!("FTP_ACCEPTANCE_TIER must be smoke or full, got {other}"),
    }
}

/// Run directory root: kept under `FTP_ACCEPTANCE_OUT` if set.
fn workspace(name: &str) -> (Option<TempDir>, PathBuf) {
    match std::env::var_os("FTP_ACCEPTANCE_OUT") {
        Some(root) => {
            let p = PathBuf::from(root).join(name);
            std::fs::create_dir_all(&p).unwrap();
            (None, p)
        }
        None => {
            let t = TempDir::new().unwrap();
            let p = t.path().to_path_buf();
            (Some(t), p)
        }
    }
}

fn preset(name: &str, out: &Path, sets: &[String]) -> RunConfig {
    let mut c = RunConfig::resolve(name, None, sets).unwrap();
    c.out_dir = out.to_path_buf();
    c
}

#[test]
#[ignore = "experiment; run with --include-ignored"]
fn c08_gridworld_ftp_versus_gpt() {
    let (_keep, root) = workspace("grid");
    let full = full_tier();
    let (name, seeds): (&str, &[u64]) = if full {
        ("grid", &[0, 1])
    } else {
        ("grid-smoke", &[0])
    };
    let mut sets = Vec::new();
    if full {
        sets.extend(["grid.n_train=50000", "grid.n_test=1000"].map(String::from));
    }
    let data = root.join("data");
    let gen = preset(name, &data, &sets);
    experiments::grid_gen(&gen, None, None).unwrap();
    sets.push(format!(
        "grid.train_file={}",
        data.join("grid_train.txt").display()
    ));
    sets.push(format!(
        "grid.test_file={}",
        data.join("grid_test.txt").display()
    ));

    // curve[kind][epoch] = fraction correct per seed
    let mut curves: Vec<Vec<Vec<f64>>> = vec![Vec::new(), Vec::new()];
    for (ki, kind) in ["gpt", "ftp"].into_iter().enumerate() {
        for &seed in seeds {
            let mut s = sets.clone();
            s.push(format!("model.kind={kind}"));
            s.push(format!("run.seed={seed}"));
            let c = preset(name, &root.join(format!("{kind}-{seed}")), &s);
            let out = experiments::train_grid(&c, &TrainOptions::default()).unwrap();
            for (e, ep) in out["epochs"].as_array().unwrap().iter().enumerate() {
                let f = ep["report"]["fraction_correct"].as_f64().unwrap();
                println!(
                    "{kind} seed {seed} epoch {}: fraction_correct {f:.4}",
                    e + 1
                );
                if curves[ki].len() <= e {
                    curves[ki].push(Vec::new());
                }
                curves[ki][e].push(f);
            }
        }
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    if full {
        for (e, (g, f)) in curves[0].iter().zip(&curves[1]).enumerate() {
            assert!(
                mean(f) >= mean(g),
                "epoch {}: ftp {} < gpt {}",
                e + 1,
                mean(f),
                mean(g)
            );
        }
    } else {
        let last = |k: usize| curves[k].last().map_or(0.0, mean);
        assert!(last(0) > 0.0, "gpt solved nothing");
        assert!(last(1) > 0.0, "ftp solved nothing");
    }
}

struct LmPair {
    _keep: Option<TempDir>,
    root: PathBuf,
    preset: &'static str,
    gpt: PathBuf,
    ftp: PathBuf,
}

/// GPT trained for the preset's step budget, then FTP trained (up to twice
/// as long) until its first-token validation loss reaches the GPT's. Built
/// once per process and shared by c09 and c10.
fn loss_matched_pair() -> &'static LmPair {
    static PAIR: OnceLock<LmPair> = OnceLock::new();
    PAIR.get_or_init(|| build_pair("lm-pair"))
}

fn build_pair(name: &str) -> LmPair {
    let (keep, root) = workspace(name);
    let preset_name = if full_tier() { "desk" } else { "lm-smoke" };
    let gpt_cfg = preset(preset_name, &root.join("gpt"), &["model.kind=gpt".into()]);
    let g = experiments::train_lm(&gpt_cfg, &TrainOptions::default()).unwrap();
    let target = g["val_loss_k0"].as_f64().unwrap();
    let steps = gpt_cfg.train.total_steps * 2;
    let ftp_cfg = preset(
        preset_name,
        &root.join("ftp"),
        &[
            "model.kind=ftp".into(),
            format!("train.total_steps={steps}"),
        ],
    );
    let opts = TrainOptions {
        until_val_k0: Some(target),
        ..TrainOptions::default()
    };
    let f = experiments::train_lm(&ftp_cfg, &opts).unwrap();
    println!(
        "gpt: {} steps, val k0 {target:.4}; ftp: {} steps, val k0 {:.4}",
        g["steps"], f["steps"], f["val_loss_k0"]
    );
    LmPair {
        _keep: keep,
        root: root.clone(),
        preset: preset_name,
        gpt: root.join("gpt").join(experiments::CHECKPOINT_FILE),
        ftp: root.join("ftp").join(experiments::CHECKPOINT_FILE),
    }
}

#[test]
#[ignore = "experiment; run with --include-ignored"]
fn c09_embedding_smoothness() {
    let pair = loss_matched_pair();
    let stats = |kind: &str, ck: &Path| {
        let c = preset(pair.preset, &pair.root.join(format!("sim-{kind}")), &[]);
        let s = experiments::probe_similarity(&c, ck).unwrap();
        let (m, sd) = (
            s["adjacent_mean"].as_f64().unwrap(),
            s["adjacent_std"].as_f64().unwrap(),
        );
        println!(
            "{kind}: adjacent cosine mean {m:.4} std {sd:.4}, far mean {:.4}",
            s["far_mean"]
        );
        (m, sd)
    };
    let (gm, gs) = stats("gpt", &pair.gpt);
    let (fm, fs) = stats("ftp", &pair.ftp);
    assert!(fm > gm, "ftp mean {fm} <= gpt mean {gm}");
    assert!(fs < gs, "ftp std {fs} >= gpt std {gs}");
}

#[test]
#[ignore = "experiment; run with --include-ignored"]
fn c10_future_token_probes() {
    let pair = loss_matched_pair();
    let c = preset(pair.preset, &pair.root.join("future"), &[]);
    let out = experiments::probe_future(&c, &[pair.gpt.clone(), pair.ftp.clone()]).unwrap();
    let ppl = |model: &str, method: &str, k: u64| -> f64 {
        out["rows"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["model"] == model && r["method"] == method && r["k"] == k)
            .and_then(|r| r["perplexity"].as_f64())
            .unwrap()
    };
    for k in 1..=5 {
        println!(
            "k={k}: ftp decoder {:.3}, gpt mlp probe {:.3}",
            ppl("ftp", "decoder", k),
            ppl("gpt", "mlp_probe", k)
        );
    }
    let (f1, g1) = (ppl("ftp", "decoder", 1), ppl("gpt", "mlp_probe", 1));
    assert!(rel(f1, g1) <= 0.1, "k=1: ftp {f1} vs gpt {g1}");
    for k in 2..=5 {
        let (f, g) = (ppl("ftp", "decoder", k), ppl("gpt", "mlp_probe", k));
        assert!(f < g, "k={k}: ftp {f} >= gpt {g}");
    }
}

fn forward_bits<T: ftp_core::numerics::Scalar>(m: &Model<T>) -> Vec<u64> {
    let mut out = Vec::new();
    for ctx in [&[1u32, 2, 3][..], &[7, 0, 4, 4, 9, 1]] {
        out.extend(m.next_logits(ctx).unwrap().iter().map(|x| x.to_bits()));
    }
    let e = m.embeddings(&[3, 1, 4, 1, 5], 1, 5).unwrap();
    out.extend(e.data().iter().map(|x| x.to_f64_lossy().to_bits()));
    out
}

#[test]
fn c11_checkpoint_integrity() {
    let dir = TempDir::new().unwrap();
    for kind in [ModelKind::Gpt, ModelKind::Ftp] {
        let m32 = Model::<f32>::new(kind, small_cfg(11), &mut rng(11)).unwrap();
        let m64 = Model::<f64>::new(kind, small_cfg(11), &mut rng(11)).unwrap();
        let p = dir.path().join("m.ftpc");
        let state = TrainState::new(m32.params(), 1);
        checkpoint::save(
            &p,
            &Checkpoint {
                model: m32.clone(),
                state: Some(state),
                meta: String::new(),
            },
        )
        .unwrap();
        let back: Checkpoint<f32> = checkpoint::load(&p).unwrap();
        assert_eq!(forward_bits(&back.model), forward_bits(&m32));
        checkpoint::save(
            &p,
            &Checkpoint {
                model: m64.clone(),
                state: None,
                meta: String::new(),
            },
        )
        .unwrap();
        let back: Checkpoint<f64> = checkpoint::load(&p).unwrap();
        assert_eq!(forward_bits(&back.model), forward_bits(&m64));
    }

    // interrupted and resumed training reproduces the uninterrupted stream
    for kind in ["gpt", "ftp"] {
        let sets = [
            format!("model.kind={kind}"),
            "train.checkpoint_every=0".into(),
        ];
        let whole = preset("tiny", &dir.path().join(format!("{kind}-whole")), &sets);
        experiments::train_lm(&whole, &TrainOptions::default()).unwrap();
        let split = preset("tiny", &dir.path().join(format!("{kind}-split")), &sets);
        let stop = TrainOptions {
            stop_after: Some(7),
            ..TrainOptions::default()
        };
        experiments::train_lm(&split, &stop).unwrap();
        let resume = TrainOptions {
            resume: true,
            ..TrainOptions::default()
        };
        experiments::train_lm(&split, &resume).unwrap();
        let rows = |c: &RunConfig| -> Vec<Value> {
            read_metrics(&c.out_dir.join(experiments::METRICS_FILE))
                .unwrap()
                .into_iter()
                .map(|r| serde_json::json!([r.step, r.split, r.loss, r.loss_k0, r.lr, r.grad_norm]))
                .collect()
        };
        let (a, b) = (rows(&whole), rows(&split));
        assert_eq!(a.len(), 22);
        assert_eq!(a, b, "{kind}");
        let (ca, cb): (Checkpoint<f32>, Checkpoint<f32>) = (
            checkpoint::load(&whole.out_dir.join(experiments::CHECKPOINT_FILE)).unwrap(),
            checkpoint::load(&split.out_dir.join(experiments::CHECKPOINT_FILE)).unwrap(),
        );
        assert_eq!(ca.model, cb.model);
    }
}
