mod common;

use common::gradcheck::full_loss_gradient_check;
use common::loss::loop_oracle;
use ftp_core::data::{make_batch, Batch, TokenCorpus};
use ftp_core::model::{Model, ModelConfig, ModelKind, ParamStore};
use ftp_core::numerics::{Tape, Tensor};
use ftp_core::training::{
    adamw_step, clip_grad_norm, decays, ftp_loss, gpt_loss, loss_weights, lr_at, train, train_step,
    BatchSource, Control, CorpusSource, OptimState, StepMetrics, TrainConfig, TrainState,
};
use ftp_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn loss_value(
    logits: &Tensor<f64>,
    targets: &[u32],
    mask: &[u8],
    n: usize,
    gamma: f64,
) -> Result<f64, Error> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = ftp_loss(&mut tape, l, targets, mask, n, gamma)?;
    Ok(tape.value(out).item())
}

fn random_case(seed: u64, rows: usize, n: usize, v: usize) -> (Tensor<f64>, Vec<u32>, Vec<u8>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::new(
        &[rows, n, v],
        (0..rows * n * v).map(|_| r.gen_range(-3.0..3.0)).collect(),
    )
    .unwrap();
    let targets = (0..rows * n).map(|_| r.gen_range(0..v as u32)).collect();
    let mask = (0..rows * n).map(|_| u8::from(r.gen_bool(0.8))).collect();
    (logits, targets, mask)
}

#[test]
fn loss_weights_are_powers_of_gamma() {
    assert_eq!(
        loss_weights(4, 0.8),
        vec![1.0, 0.8, 0.8 * 0.8, 0.8f64.powi(3)]
    );
    assert_eq!(loss_weights(3, 0.0), vec![1.0, 0.0, 0.0]);
    assert_eq!(loss_weights(2, 1.0), vec![1.0, 1.0]);
}

#[test]
fn ftp_loss_matches_loop_oracle() {
    for seed in 0..5 {
        let (logits, targets, mask) = random_case(seed, 6, 4, 7);
        for gamma in [0.8, 0.3, 1.0] {
            let w = [1.0, gamma, gamma * gamma, gamma * gamma * gamma];
            let want = loop_oracle(logits.data(), &targets, &mask, 4, 7, &w);
            let got = loss_value(&logits, &targets, &mask, 4, gamma).unwrap();
            assert!(rel(got, want) < 1e-6, "{got} vs {want}");
        }
        let want = loop_oracle(
            logits.data(),
            &targets,
            &mask,
            4,
            7,
            &[1.0, 0.8, 0.64, 0.512],
        );
        assert!(rel(loss_value(&logits, &targets, &mask, 4, 0.8).unwrap(), want) < 1e-6);
    }
}

#[test]
fn ftp_loss_single_offset_is_masked_mean() {
    let (logits, targets, mask) = random_case(9, 10, 1, 5);
    let want = loop_oracle(logits.data(), &targets, &mask, 1, 5, &[1.0]);
    for gamma in [0.1, 0.8, 1.0] {
        assert!(
            rel(
                loss_value(&logits, &targets, &mask, 1, gamma).unwrap(),
                want
            ) < 1e-12
        );
    }
}

#[test]
fn uniform_logits_give_log_vocab_for_any_weighting() {
    let logits = Tensor::zeros(&[3, 4, 4]);
    let targets: Vec<u32> = (0..12).map(|i| i % 4).collect();
    let mask = vec![1u8; 12];
    for gamma in [0.8, 0.5, 1.0] {
        assert!(
            (loss_value(&logits, &targets, &mask, 4, gamma).unwrap() - 4f64.ln()).abs() < 1e-12
        );
    }
}

#[test]
fn all_zero_mask_is_rejected() {
    let (logits, targets, _) = random_case(1, 2, 2, 3);
    assert!(matches!(
        loss_value(&logits, &targets, &[0; 4], 2, 0.8),
        Err(Error::Contract(_))
    ));
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        gpt_loss(&mut tape, l, &[0, 1], &[0, 0]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn gpt_loss_examples_and_consistency() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::zeros(&[2, 3, 9]));
    let l = gpt_loss(&mut tape, uniform, &[1, 2, 3, 4, 5, 6], &[1; 6]).unwrap();
    assert!((tape.value(l).item() - 9f64.ln()).abs() < 1e-12);

    let mut perfect = vec![0.0; 18];
    perfect[2] = 60.0;
    perfect[9 + 4] = 60.0;
    let p = tape.constant(Tensor::new(&[2, 9], perfect).unwrap());
    let l = gpt_loss(&mut tape, p, &[2, 4], &[1, 1]).unwrap();
    assert!(tape.value(l).item() < 1e-20);

    // ftp_loss with only k = 0 active equals gpt_loss on that slot
    let (logits, targets, _) = random_case(4, 5, 3, 6);
    let mask: Vec<u8> = (0..15).map(|i| u8::from(i % 3 == 0)).collect();
    let slot: Vec<f64> = (0..5)
        .flat_map(|r| logits.data()[r * 18..r * 18 + 6].to_vec())
        .collect();
    let st: Vec<u32> = targets.iter().step_by(3).cloned().collect();
    let s = tape.constant(Tensor::new(&[5, 6], slot).unwrap());
    let g = gpt_loss(&mut tape, s, &st, &[1; 5]).unwrap();
    let f = loss_value(&logits, &targets, &mask, 3, 0.8).unwrap();
    assert!(rel(tape.value(g).item(), f) < 1e-12);

    // gamma = 1, N = 1 is exactly gpt_loss
    let (logits, targets, mask) = random_case(5, 7, 1, 6);
    let a = tape.constant(logits.clone());
    let g = gpt_loss(&mut tape, a, &targets, &mask).unwrap();
    assert_eq!(
        tape.value(g).item(),
        loss_value(&logits, &targets, &mask, 1, 1.0).unwrap()
    );
}

fn sched() -> TrainConfig {
    TrainConfig {
        lr_max: 4e-4,
        lr_min: 4e-5,
        warmup_steps: 100,
        total_steps: 1100,
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_examples() {
    let c = sched();
    assert_eq!(lr_at(0, &c), 0.0);
    assert!((lr_at(1, &c) - 4e-6).abs() < 1e-18);
    assert_eq!(lr_at(100, &c), 4e-4);
    let mid = 0.5 * (4e-4 + 4e-5); // cosine at half progress
    assert!(rel(lr_at(600, &c), mid) < 1e-12);
    let q = 4e-5 + 0.5 * (4e-4 - 4e-5) * (1.0 + (std::f64::consts::PI * 0.25).cos());
    assert!(rel(lr_at(350, &c), q) < 1e-12);
    assert_eq!(lr_at(1100, &c), 4e-5);
    assert_eq!(lr_at(5000, &c), 4e-5);
}

#[test]
fn schedule_is_continuous_and_monotone_in_phases() {
    let c = TrainConfig {
        warmup_steps: 1_000_000,
        total_steps: 3_000_000,
        ..sched()
    };
    let w = c.warmup_steps;
    assert!((lr_at(w, &c) - lr_at(w - 1, &c)).abs() < 1e-6 * c.lr_max + c.lr_max / w as f64);
    assert!((lr_at(w + 1, &c) - lr_at(w, &c)).abs() < 1e-9 * c.lr_max);
    for s in 1..200 {
        assert!(lr_at(s, &sched()) >= lr_at(s - 1, &sched()) || s > 100);
        if s > 100 {
            assert!(lr_at(s * 5, &sched()) <= lr_at(s * 5 - 1, &sched()));
        }
    }
}

fn store(values: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (n, s, v) in values {
        p.insert(n, Tensor::new(s, v.clone()).unwrap());
    }
    p
}

#[test]
fn adamw_zero_grad_no_decay_is_identity() {
    let mut p = store(&[("w", vec![2, 2], vec![1.0, -2.0, 3.0, 0.5])]);
    let before = p.clone();
    let mut st = OptimState::new(&p);
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    for step in 1..4 {
        adamw_step(&mut p, &[vec![0.0; 4]], &mut st, step, 0.1, &cfg, &[true]).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adamw_scalar_hand_calculation() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        eps: 1e-8,
        ..TrainConfig::default()
    };
    let mut p = store(&[("w", vec![1, 1], vec![0.5])]);
    let mut st = OptimState::new(&p);
    let g = 0.2;
    adamw_step(&mut p, &[vec![g]], &mut st, 1, 1.0, &cfg, &[true]).unwrap();
    // m = 0.1 g, v = 0.05 g^2; m_hat = g, v_hat = g^2
    assert!((st.m[0][0] - 0.1 * g).abs() < 1e-15);
    assert!((st.v[0][0] - 0.05 * g * g).abs() < 1e-15);
    let want1 = 0.5 - g / (g + 1e-8);
    assert!((p.get("w").unwrap().item() - want1).abs() < 1e-12);
    // second step with gradient -0.1
    let g2 = -0.1;
    adamw_step(&mut p, &[vec![g2]], &mut st, 2, 1.0, &cfg, &[true]).unwrap();
    let m = 0.9 * 0.1 * g + 0.1 * g2;
    let v = 0.95 * 0.05 * g * g + 0.05 * g2 * g2;
    let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.9025));
    let want2 = want1 - mh / (vh.sqrt() + 1e-8);
    assert!((p.get("w").unwrap().item() - want2).abs() < 1e-9);
}

#[test]
fn adamw_decay_is_decoupled_and_exemptions_hold() {
    let init = vec![
        ("a", vec![2, 2], vec![1.0, 2.0, -3.0, 4.0]),
        ("norm", vec![2], vec![1.0, 1.0]),
    ];
    let mut p = store(&init);
    let mut st = OptimState::new(&p);
    let cfg = TrainConfig {
        weight_decay: 0.1,
        ..TrainConfig::default()
    };
    adamw_step(
        &mut p,
        &[vec![0.0; 4], vec![0.0; 2]],
        &mut st,
        1,
        0.5,
        &cfg,
        &[true, false],
    )
    .unwrap();
    for (g, w) in p.get("a").unwrap().data().iter().zip(&init[0].2) {
        assert!((g - w * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    }
    assert_eq!(p.get("norm").unwrap().data(), &[1.0, 1.0]);

    // exempting a tensor equals running it with wd = 0
    let grads = [vec![0.3, -0.2, 0.1, 0.0], vec![0.5, -0.5]];
    let mut a = store(&init);
    let mut sa = OptimState::new(&a);
    adamw_step(&mut a, &grads, &mut sa, 1, 0.01, &cfg, &[true, false]).unwrap();
    let mut b = store(&init);
    let mut sb = OptimState::new(&b);
    let nowd = TrainConfig {
        weight_decay: 0.0,
        ..cfg.clone()
    };
    adamw_step(&mut b, &grads, &mut sb, 1, 0.01, &nowd, &[true, true]).unwrap();
    assert_eq!(a.get("norm"), b.get("norm"));

    let mut c = store(&init);
    assert!(matches!(
        adamw_step(
            &mut c,
            &[vec![0.0; 3], vec![0.0; 2]],
            &mut OptimState::new(&store(&init)),
            1,
            0.1,
            &cfg,
            &[true, false]
        ),
        Err(Error::Contract(_))
    ));
}

#[test]
fn decay_exemptions_by_name() {
    assert!(decays("enc.0.attn.wq", &[8, 8]));
    assert!(decays("proj", &[8, 32]));
    assert!(!decays("tok_emb", &[10, 8]));
    assert!(!decays("dec.pos", &[4, 8]));
    assert!(!decays("enc.ln_f", &[8]));
}

#[test]
fn clipping_bounds_global_norm() {
    let mut g = vec![vec![3.0f64], vec![4.0]];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    let mut h = vec![vec![0.1f64]];
    clip_grad_norm(&mut h, 1.0);
    assert_eq!(h[0][0], 0.1);
}

fn small(kind: ModelKind, dropout: f64, gamma: f64) -> Model<f32> {
    let cfg = ModelConfig {
        dim: 32,
        heads: 2,
        mlp_dim: 64,
        enc_ctx: 64,
        n_future: 4,
        pseudo_seq: 4,
        dropout,
        gamma,
        ..ModelConfig::tiny(258)
    };
    Model::new(kind, cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap()
}

fn memo_corpus() -> TokenCorpus {
    let text: Vec<u8> = b"abcdefghij0123456789"
        .iter()
        .cycle()
        .take(1000)
        .cloned()
        .collect();
    TokenCorpus::from_bytes(&text)
}

struct Fixed(Batch);

impl BatchSource for Fixed {
    fn batch(&mut self, _: u64, _: usize, _: &mut ChaCha8Rng) -> ftp_core::Result<Batch> {
        Ok(self.0.clone())
    }
}

fn collect(
    model: &mut Model<f32>,
    src: &mut dyn BatchSource,
    cfg: &TrainConfig,
    state: &mut TrainState<f32>,
) -> Vec<StepMetrics> {
    let mut out = Vec::new();
    train(model, src, &[], cfg, state, |_, _, m| {
        out.push(*m);
        Ok(Control::Continue)
    })
    .unwrap();
    out
}

#[test]
fn ten_steps_strictly_decrease_loss_on_memorizable_corpus() {
    let corpus = memo_corpus();
    let windows: Vec<Vec<u32>> = (0..4)
        .map(|i| corpus.ids()[i * 100..i * 100 + 36].to_vec())
        .collect();
    let batch = make_batch(&windows, 32, 4).unwrap();
    let cfg = TrainConfig {
        lr_max: 3e-3,
        lr_min: 3e-3,
        warmup_steps: 0,
        total_steps: 10,
        weight_decay: 0.0,
        eval_every: 0,
        ..TrainConfig::default()
    };
    for kind in [ModelKind::Gpt, ModelKind::Ftp] {
        let mut model = small(kind, 0.0, 0.8);
        let mut state = TrainState::new(model.params(), 1);
        let m = collect(&mut model, &mut Fixed(batch.clone()), &cfg, &mut state);
        assert_eq!(m.len(), 10);
        for w in m.windows(2) {
            assert!(
                w[1].loss < w[0].loss,
                "{kind:?}: {:?}",
                m.iter().map(|x| x.loss).collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn resumed_training_reproduces_metric_stream() {
    let corpus = memo_corpus();
    let cfg = TrainConfig {
        total_steps: 6,
        warmup_steps: 2,
        batch_size: 2,
        seq_len: 16,
        eval_every: 0,
        ..TrainConfig::default()
    };
    for kind in [ModelKind::Gpt, ModelKind::Ftp] {
        let n = if kind == ModelKind::Ftp { 4 } else { 1 };
        let mut src = CorpusSource {
            corpus: &corpus,
            batch_size: 2,
            seq_len: 16,
            n,
        };
        let mut full = small(kind, 0.1, 0.8);
        let mut st = TrainState::new(full.params(), 9);
        let all = collect(&mut full, &mut src, &cfg, &mut st);

        let mut part = small(kind, 0.1, 0.8);
        let mut st2 = TrainState::new(part.params(), 9);
        let mut first = Vec::new();
        train(&mut part, &mut src, &[], &cfg, &mut st2, |_, _, m| {
            first.push(*m);
            Ok(if m.step == 3 {
                Control::Stop
            } else {
                Control::Continue
            })
        })
        .unwrap();
        let (mut resumed, mut st3) = (part.clone(), st2.clone());
        let rest = collect(&mut resumed, &mut src, &cfg, &mut st3);
        assert_eq!([first, rest].concat(), all);
        assert_eq!(resumed, full);
    }
}

#[test]
fn zero_gamma_equals_first_token_training() {
    let corpus = memo_corpus();
    let windows: Vec<Vec<u32>> = (0..2)
        .map(|i| corpus.ids()[i * 50..i * 50 + 20].to_vec())
        .collect();
    let batch = make_batch(&windows, 16, 4).unwrap();
    let mut k0_only = batch.clone();
    for (i, m) in k0_only.loss_mask.iter_mut().enumerate() {
        *m = u8::from(i % 4 == 0);
    }
    let cfg = TrainConfig {
        total_steps: 3,
        warmup_steps: 0,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let mut a = small(ModelKind::Ftp, 0.0, 0.0);
    let mut sa = TrainState::new(a.params(), 0);
    let ma = collect(&mut a, &mut Fixed(batch), &cfg, &mut sa);
    let mut b = small(ModelKind::Ftp, 0.0, 0.8);
    let mut sb = TrainState::new(b.params(), 0);
    let mb = collect(&mut b, &mut Fixed(k0_only), &cfg, &mut sb);
    assert_eq!(a.params(), b.params());
    for (x, y) in ma.iter().zip(&mb) {
        assert_eq!(x.loss, y.loss);
        assert!((x.loss - x.loss_k0).abs() < 1e-5);
    }
}

#[test]
fn non_finite_loss_aborts() {
    let corpus = memo_corpus();
    let mut model = small(ModelKind::Gpt, 0.0, 0.8);
    model.params_mut().get_mut("enc.ln_f").unwrap().data_mut()[0] = f32::NAN;
    let mut state = TrainState::new(model.params(), 0);
    let mut src = CorpusSource {
        corpus: &corpus,
        batch_size: 1,
        seq_len: 8,
        n: 1,
    };
    let cfg = TrainConfig {
        total_steps: 2,
        warmup_steps: 0,
        ..TrainConfig::default()
    };
    let err = train_step(&mut model, &mut src, &cfg, &mut state).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(state.step, 0);
}

#[test]
fn validation_runs_on_schedule() {
    let corpus = memo_corpus();
    let val = vec![make_batch(&[corpus.ids()[..20].to_vec()], 16, 4).unwrap()];
    let mut model = small(ModelKind::Ftp, 0.0, 0.8);
    let mut state = TrainState::new(model.params(), 0);
    let mut src = CorpusSource {
        corpus: &corpus,
        batch_size: 1,
        seq_len: 16,
        n: 4,
    };
    let cfg = TrainConfig {
        total_steps: 5,
        warmup_steps: 1,
        eval_every: 2,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    train(&mut model, &mut src, &val, &cfg, &mut state, |_, _, m| {
        seen.push((m.step, m.split.name()));
        Ok(if m.step == 4 {
            Control::Stop
        } else {
            Control::Continue
        })
    })
    .unwrap();
    assert_eq!(
        seen,
        vec![
            (1, "train"),
            (2, "train"),
            (2, "val"),
            (3, "train"),
            (4, "train"),
            (4, "val")
        ]
    );
    assert_eq!(state.step, 4);
}

#[test]
fn full_ftp_loss_gradients_match_finite_differences() {
    let (n, worst64) = full_loss_gradient_check::<f64>(240, 1e-5, 1e-4);
    assert!(n >= 200);
    assert!(worst64 < 1e-5, "f64 worst relative error {worst64:e}");
    let (_, worst32) = full_loss_gradient_check::<f32>(240, 1e-5, 1e-4);
    assert!(worst32 < 1e-3, "f32 worst relative error {worst32:e}");
}
