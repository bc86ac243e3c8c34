//! Seeded random helpers shared by model initialization, data generation and
//! the solver test instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matcal::DenseMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw by Box-Muller, so streams stay stable across
/// `rand_distr` versions.
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| std * normal(rng))
}

/// Gram `XᵀX` of an `n × d` Gaussian sample with correlated columns, giving a
/// non-diagonal SPD matrix when `n ≥ d`.
pub fn correlated_gram<R: Rng + ?Sized>(rng: &mut R, d: usize, n: usize) -> DenseMatrix {
    let mix = gaussian_matrix(rng, d, d, 1.0).add(&DenseMatrix::identity(d).scale(1.5));
    let x = gaussian_matrix(rng, n, d, 1.0).matmul(&mix);
    let mut h = x.t_matmul(&x);
    h.symmetrize();
    h
}

/// Mixes two values into an independent-looking seed (splitmix64 finalizer).
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
