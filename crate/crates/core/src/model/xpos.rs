//! XPOS rotary position embedding.
//!
//! Each pair `i` of a head vector rotates by `m * theta_i` at position `m`,
//! `theta_i = 10000^(-2i/head_dim)`. Queries are additionally scaled by
//! `zeta_i^(m/base)` and keys by `zeta_i^(-m/base)` with
//! `zeta_i = (2i + 0.4 head_dim) / (1.4 head_dim)`, so a query-key score
//! depends only on the offset between their positions.

use alloc::vec::Vec;

use crate::numerics::Scalar;

const THETA_BASE: f64 = 10_000.0;

/// Rotation/scale coefficient tables for a list of positions, laid out as
/// `[positions.len(), head_dim / 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct XposTables<T> {
    pub q_cos: Vec<T>,
    pub q_sin: Vec<T>,
    pub k_cos: Vec<T>,
    pub k_sin: Vec<T>,
}

pub fn pair_frequency(i: usize, head_dim: usize) -> f64 {
    libm::pow(THETA_BASE, -(2.0 * i as f64) / head_dim as f64)
}

pub fn pair_zeta(i: usize, head_dim: usize) -> f64 {
    (2.0 * i as f64 + 0.4 * head_dim as f64) / (1.4 * head_dim as f64)
}

/// Query magnitude factor for pair `i` at position `m`.
pub fn query_scale(i: usize, m: usize, head_dim: usize, scale_base: f64) -> f64 {
    libm::pow(pair_zeta(i, head_dim), m as f64 / scale_base)
}

pub fn xpos_tables<T: Scalar>(
    positions: &[usize],
    head_dim: usize,
    scale_base: f64,
) -> XposTables<T> {
    let half = head_dim / 2;
    let n = positions.len() * half;
    let mut t = XposTables {
        q_cos: Vec::with_capacity(n),
        q_sin: Vec::with_capacity(n),
        k_cos: Vec::with_capacity(n),
        k_sin: Vec::with_capacity(n),
    };
    for &m in positions {
        for i in 0..half {
            let angle = m as f64 * pair_frequency(i, head_dim);
            let (s, c) = (libm::sin(angle), libm::cos(angle));
            let qs = query_scale(i, m, head_dim, scale_base);
            let ks = 1.0 / qs;
            t.q_cos.push(T::from_f64_lossy(c * qs));
            t.q_sin.push(T::from_f64_lossy(s * qs));
            t.k_cos.push(T::from_f64_lossy(c * ks));
            t.k_sin.push(T::from_f64_lossy(s * ks));
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_identity() {
        let t = xpos_tables::<f64>(&[0], 8, 512.0);
        assert!(t.q_cos.iter().all(|&c| c == 1.0));
        assert!(t.q_sin.iter().all(|&s| s == 0.0));
        assert!(t.k_cos.iter().all(|&c| c == 1.0));
    }

    #[test]
    fn zeta_is_below_one_and_increasing() {
        let z: Vec<f64> = (0..4).map(|i| pair_zeta(i, 8)).collect();
        assert!(z.windows(2).all(|w| w[0] < w[1]));
        assert!(z.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
