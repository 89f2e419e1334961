//! Dense linear algebra, seeded Gaussian sampling and small statistics.
//!
//! Everything here is double precision and row-major. Shapes are never
//! broadcast: every mismatch surfaces as [`NumError::DimensionMismatch`].

mod linalg;
mod matrix;
mod rng;
mod stats;

pub use linalg::{solve_dense, BlockTridiagonal, Cholesky, LuFactors};
pub use matrix::{gemm, Matrix, Transpose};
pub use rng::{gaussian_matrix, RngStream};
pub use stats::{mean, sample_variance};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix is singular or ill-conditioned (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("matrix is not positive definite (pivot {pivot} = {value:.3e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("zero vector: {0}")]
    ZeroVector(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type NumResult<T> = Result<T, NumError>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> NumError {
    NumError::DimensionMismatch {
        op,
        detail: detail.into(),
    }
}

/// Dot product of two equal-length vectors.
pub fn dot(u: &[f64], v: &[f64]) -> NumResult<f64> {
    if u.len() != v.len() {
        return Err(mismatch("dot", format!("{} vs {}", u.len(), v.len())));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}

pub fn norm(u: &[f64]) -> f64 {
    u.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `u·v / (‖u‖‖v‖)`, clamped into `[-1, 1]` against rounding.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> NumResult<f64> {
    if u.len() != v.len() {
        return Err(mismatch(
            "cosine_similarity",
            format!("{} vs {}", u.len(), v.len()),
        ));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 {
        return Err(NumError::ZeroVector("first argument of cosine_similarity"));
    }
    if nv == 0.0 {
        return Err(NumError::ZeroVector("second argument of cosine_similarity"));
    }
    let c = dot(u, v)? / (nu * nv);
    if !c.is_finite() {
        return Err(NumError::NonFinite("cosine_similarity"));
    }
    Ok(c.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[-1.0, -1.0]).unwrap();
        assert!((c + 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(NumError::ZeroVector(_))
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(NumError::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn cosine_is_bounded_and_self_is_one(
            u in proptest::collection::vec(-1e3f64..1e3, 1..20),
            v in proptest::collection::vec(-1e3f64..1e3, 1..20),
        ) {
            prop_assume!(norm(&u) > 1e-6);
            let own = cosine_similarity(&u, &u).unwrap();
            prop_assert!((own - 1.0).abs() < 1e-12);
            let n = u.len().min(v.len());
            if norm(&v[..n]) > 1e-6 && norm(&u[..n]) > 1e-6 {
                let c = cosine_similarity(&u[..n], &v[..n]).unwrap();
                prop_assert!(c.abs() <= 1.0);
            }
        }
    }
}
