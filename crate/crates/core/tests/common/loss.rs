/// Triple loop over (row, k, vocab) with explicit weights.
pub fn loop_oracle(
    logits: &[f64],
    targets: &[u32],
    mask: &[u8],
    n: usize,
    v: usize,
    weights: &[f64],
) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..targets.len() / n {
        for k in 0..n {
            let i = r * n + k;
            if mask[i] == 0 {
                continue;
            }
            let row = &logits[i * v..(i + 1) * v];
            let mut z = 0.0;
            for &x in row {
                z += x.exp();
            }
            num += weights[k] * (z.ln() - row[targets[i] as usize]);
            den += weights[k];
        }
    }
    num / den
}
