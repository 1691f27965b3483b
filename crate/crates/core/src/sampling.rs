//! Seeded random instances shared by the verification suites, the equivalence
//! sweeps and the benchmarks.

use rand::Rng;

use crate::recurrence::TokenInput;
use crate::tensor::{Matrix, Real, Vector};

pub fn random_matrix<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-1.0..1.0)))
}

pub fn random_vector<T: Real, R: Rng>(rng: &mut R, len: usize) -> Vector<T> {
    Vector::from_fn(len, |_| T::lit(rng.random_range(-1.0..1.0)))
}

/// Random token with `α ∈ [0.5, 1]` and `η ∈ [0.05, 1]`; keys are drawn with a
/// random scale so that `‖k‖²` is spread around one.
pub fn random_token<T: Real, R: Rng>(rng: &mut R, d_k: usize, d_v: usize) -> TokenInput<T> {
    let scale = rng.random_range(0.25..2.0) / (d_k as f64 / 3.0).sqrt().max(1.0);
    let k = Vector::from_fn(d_k, |_| T::lit(scale * rng.random_range(-1.0..1.0)));
    TokenInput {
        k,
        v: random_vector(rng, d_v),
        q: random_vector(rng, d_k),
        alpha: T::lit(rng.random_range(0.5..=1.0)),
        eta: T::lit(rng.random_range(0.05..=1.0)),
        alpha_diag: None,
    }
}

pub fn random_tokens<T: Real, R: Rng>(rng: &mut R, len: usize, d_k: usize, d_v: usize) -> Vec<TokenInput<T>> {
    (0..len).map(|_| random_token(rng, d_k, d_v)).collect()
}

/// Nonzero vector: resamples the (measure-zero) all-zero draw.
pub fn random_nonzero_vector<R: Rng>(rng: &mut R, len: usize) -> Vector<f64> {
    loop {
        let v: Vector<f64> = random_vector(rng, len);
        if v.l2_norm_sq() > 1e-6 {
            return v;
        }
    }
}
