//! Straight-line reference transformer used as a second implementation.
//! Plain nested loops over `Vec<f64>` rows; shares nothing with the tape code
//! except the parameter names.
#![allow(dead_code)]

pub mod gradcheck;
pub mod grid;
pub mod loss;
pub mod toy;

use ftp_core::model::{ModelConfig, ParamStore};

pub type Rows = Vec<Vec<f64>>;

pub struct Oracle<'a> {
    pub p: &'a ParamStore<f64>,
    pub cfg: &'a ModelConfig,
}

impl<'a> Oracle<'a> {
    pub fn new(p: &'a ParamStore<f64>, cfg: &'a ModelConfig) -> Self {
        Self { p, cfg }
    }

    fn w(&self, name: &str) -> (&[f64], usize, usize) {
        let t = self.p.get(name).unwrap_or_else(|| panic!("missing {name}"));
        let s = t.shape();
        if s.len() == 1 {
            (t.data(), 1, s[0])
        } else {
            (t.data(), s[0], s[1])
        }
    }

    pub fn linear(&self, x: &Rows, name: &str) -> Rows {
        let (w, r, c) = self.w(name);
        x.iter()
            .map(|row| {
                assert_eq!(row.len(), r);
                (0..c)
                    .map(|j| (0..r).map(|i| row[i] * w[i * c + j]).sum())
                    .collect()
            })
            .collect()
    }

    pub fn norm(&self, x: &Rows, name: &str) -> Rows {
        let (w, _, d) = self.w(name);
        x.iter()
            .map(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + 1e-5).sqrt();
                (0..d).map(|j| (row[j] - mean) * rs * w[j]).collect()
            })
            .collect()
    }

    fn rotate(&self, v: &[f64], pos: usize, sign: f64) -> Vec<f64> {
        let hd = v.len();
        let mut out = vec![0.0; hd];
        for i in 0..hd / 2 {
            let theta = 10000f64.powf(-(2.0 * i as f64) / hd as f64);
            let zeta = (2.0 * i as f64 + 0.4 * hd as f64) / (1.4 * hd as f64);
            let scale = zeta.powf(sign * pos as f64 / self.cfg.xpos_scale_base);
            let a = pos as f64 * theta;
            out[2 * i] = scale * (a.cos() * v[2 * i] - a.sin() * v[2 * i + 1]);
            out[2 * i + 1] = scale * (a.sin() * v[2 * i] + a.cos() * v[2 * i + 1]);
        }
        out
    }

    /// Self-attention (causal, rotary) when `kv` is None, else unmasked
    /// cross-attention without rotary.
    pub fn attention(&self, x: &Rows, prefix: &str, kv: Option<&Rows>) -> Rows {
        let h = self.cfg.heads;
        let hd = self.cfg.dim / h;
        let src = kv.unwrap_or(x);
        let q = self.linear(x, &format!("{prefix}.wq"));
        let k = self.linear(src, &format!("{prefix}.wk"));
        let v = self.linear(src, &format!("{prefix}.wv"));
        let mut out = vec![vec![0.0; self.cfg.dim]; x.len()];
        for head in 0..h {
            let sl = |r: &Vec<f64>| r[head * hd..(head + 1) * hd].to_vec();
            for t in 0..x.len() {
                let mut qt = sl(&q[t]);
                if kv.is_none() {
                    qt = self.rotate(&qt, t, 1.0);
                }
                let limit = if kv.is_none() { t + 1 } else { src.len() };
                let scores: Vec<f64> = (0..limit)
                    .map(|s| {
                        let mut ks = sl(&k[s]);
                        if kv.is_none() {
                            ks = self.rotate(&ks, s, -1.0);
                        }
                        qt.iter().zip(&ks).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (s, es) in e.iter().enumerate() {
                    for j in 0..hd {
                        out[t][head * hd + j] += es / z * v[s][head * hd + j];
                    }
                }
            }
        }
        self.linear(&out, &format!("{prefix}.wo"))
    }

    pub fn mlp(&self, x: &Rows, prefix: &str) -> Rows {
        let g = self.linear(x, &format!("{prefix}.w_gate"));
        let u = self.linear(x, &format!("{prefix}.w_up"));
        let h: Rows = g
            .iter()
            .zip(&u)
            .map(|(gr, ur)| {
                gr.iter()
                    .zip(ur)
                    .map(|(a, b)| a / (1.0 + (-a).exp()) * b)
                    .collect()
            })
            .collect();
        self.linear(&h, &format!("{prefix}.w_down"))
    }

    fn add(a: &Rows, b: &Rows) -> Rows {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    fn embed(&self, tokens: &[u32]) -> Rows {
        let (e, _, d) = self.w("tok_emb");
        tokens
            .iter()
            .map(|&t| e[t as usize * d..(t as usize + 1) * d].to_vec())
            .collect()
    }

    pub fn encoder(&self, tokens: &[u32]) -> Rows {
        let mut x = self.embed(tokens);
        for i in 0..self.cfg.enc_layers {
            let h = self.attention(
                &self.norm(&x, &format!("enc.{i}.ln_attn")),
                &format!("enc.{i}.attn"),
                None,
            );
            x = Self::add(&x, &h);
            let h = self.mlp(
                &self.norm(&x, &format!("enc.{i}.ln_mlp")),
                &format!("enc.{i}.mlp"),
            );
            x = Self::add(&x, &h);
        }
        self.norm(&x, "enc.ln_f")
    }

    pub fn head(&self, h: &Rows) -> Rows {
        let (e, v, d) = self.w("tok_emb");
        h.iter()
            .map(|r| {
                (0..v)
                    .map(|j| (0..d).map(|i| r[i] * e[j * d + i]).sum())
                    .collect()
            })
            .collect()
    }

    pub fn gpt_logits(&self, tokens: &[u32]) -> Rows {
        self.head(&self.encoder(tokens))
    }

    pub fn pseudo(&self, e: &[f64]) -> Rows {
        let flat = self.linear(&vec![e.to_vec()], "proj").remove(0);
        flat.chunks(self.cfg.dim).map(|c| c.to_vec()).collect()
    }

    pub fn decoder(&self, dec_tokens: &[u32], pseudo: &Rows) -> Rows {
        let (pos, _, d) = self.w("dec.pos");
        let mut x = self.embed(dec_tokens);
        for (t, row) in x.iter_mut().enumerate() {
            for j in 0..d {
                row[j] += pos[t * d + j];
            }
        }
        for i in 0..self.cfg.dec_layers {
            let h = self.attention(
                &self.norm(&x, &format!("dec.{i}.ln_self")),
                &format!("dec.{i}.self"),
                None,
            );
            x = Self::add(&x, &h);
            let h = self.attention(
                &self.norm(&x, &format!("dec.{i}.ln_cross")),
                &format!("dec.{i}.cross"),
                Some(pseudo),
            );
            x = Self::add(&x, &h);
            let h = self.mlp(
                &self.norm(&x, &format!("dec.{i}.ln_mlp")),
                &format!("dec.{i}.mlp"),
            );
            x = Self::add(&x, &h);
        }
        self.head(&self.norm(&x, "dec.ln_f"))
    }

    /// FTP logits for encoder position `t` with decoder window `dec_tokens`.
    pub fn ftp_logits(&self, tokens: &[u32], t: usize, dec_tokens: &[u32]) -> Rows {
        let e = self.encoder(tokens);
        self.decoder(dec_tokens, &self.pseudo(&e[t]))
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
