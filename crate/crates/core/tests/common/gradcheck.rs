use ftp_core::data::{make_batch, Batch};
use ftp_core::model::{Dropout, Model, ModelConfig, ModelKind, ParamStore};
use ftp_core::numerics::{Scalar, Tape};
use ftp_core::training::batch_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cast_model<T: Scalar>(m: &Model<f64>) -> Model<T> {
    let mut store = ParamStore::new();
    for (name, t) in m.params().iter() {
        store.insert(name, t.cast());
    }
    Model::from_params(m.kind(), m.config().clone(), store).unwrap()
}

fn loss_and_grads<T: Scalar>(m: &Model<T>, batch: &Batch) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let p = m.params().bind(&mut tape, true);
    let out = batch_loss(m, &mut tape, &p, batch, &mut Dropout::off()).unwrap();
    tape.backward(out.loss).unwrap();
    let grads = p
        .vars()
        .iter()
        .zip(m.params().tensors())
        .map(|(&v, t)| {
            tape.grad(v).map_or(vec![0.0; t.len()], |g| {
                g.iter().map(|x| x.to_f64_lossy()).collect()
            })
        })
        .collect();
    (out.value, grads)
}

fn loss_only(m: &Model<f64>, batch: &Batch) -> f64 {
    let mut tape = Tape::no_grad();
    let p = m.params().bind(&mut tape, false);
    batch_loss(m, &mut tape, &p, batch, &mut Dropout::off())
        .unwrap()
        .value
}

/// Worst relative error over sampled parameters of the full FTP loss; the
/// central differences are always taken on the f64 copy.
pub fn full_loss_gradient_check<T: Scalar>(samples: usize, step: f64, floor: f64) -> (usize, f64) {
    let cfg = ModelConfig {
        vocab_size: 16,
        dim: 32,
        enc_layers: 2,
        dec_layers: 1,
        heads: 2,
        mlp_dim: 64,
        enc_ctx: 16,
        n_future: 4,
        pseudo_seq: 4,
        gamma: 0.8,
        ..ModelConfig::tiny(16)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let reference = Model::<f64>::new(ModelKind::Ftp, cfg, &mut rng).unwrap();
    let windows: Vec<Vec<u32>> = (0..2)
        .map(|_| (0..20).map(|_| rng.gen_range(0..16)).collect())
        .collect();
    let batch = make_batch(&windows, 16, 4).unwrap();
    let (_, analytic) = loss_and_grads(&cast_model::<T>(&reference), &batch);
    let sizes: Vec<usize> = reference
        .params()
        .tensors()
        .iter()
        .map(|t| t.len())
        .collect();
    // two picks from every tensor, the rest uniform over all elements
    let mut picks: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| [(i, 0), (i, n - 1)])
        .collect();
    let total: usize = sizes.iter().sum();
    while picks.len() < samples {
        let mut e = rng.gen_range(0..total);
        let mut i = 0;
        while e >= sizes[i] {
            e -= sizes[i];
            i += 1;
        }
        picks.push((i, e));
    }
    let mut worst = 0f64;
    for &(i, e) in &picks {
        let mut m = reference.clone();
        let x = m.params().tensors()[i].data()[e];
        m.params_mut().tensors_mut()[i].data_mut()[e] = x + step;
        let up = loss_only(&m, &batch);
        m.params_mut().tensors_mut()[i].data_mut()[e] = x - step;
        let down = loss_only(&m, &batch);
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i][e];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
    }
    (picks.len(), worst)
}
