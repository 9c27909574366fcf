use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, norm, Scalar};

/// Deviation from unit norm tolerated by scoring functions.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// An `l`-dimensional context, reply or photo vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoding<T> {
    vector: Vec<T>,
    normalized: bool,
}

impl<T: Scalar> Encoding<T> {
    /// Scales `vector` to unit length. A zero vector becomes the first basis
    /// vector.
    pub fn normalize(mut vector: Vec<T>) -> Self {
        let n = norm(&vector);
        if n > T::of(1e-12) {
            vector.iter_mut().for_each(|v| *v /= n);
        } else {
            vector.iter_mut().for_each(|v| *v = T::zero());
            if let Some(first) = vector.first_mut() {
                *first = T::one();
            }
        }
        Encoding {
            vector,
            normalized: true,
        }
    }

    /// Wraps a vector that is already unit length (e.g. a tower output row).
    pub(crate) fn from_unit(vector: Vec<T>) -> Self {
        Encoding {
            vector,
            normalized: true,
        }
    }

    /// Wraps an arbitrary vector without normalizing it.
    pub fn raw(vector: Vec<T>) -> Self {
        Encoding {
            vector,
            normalized: false,
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.vector
    }

    pub fn into_vec(self) -> Vec<T> {
        self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> T {
        norm(&self.vector)
    }

    pub fn neg(&self) -> Self {
        Encoding {
            vector: self.vector.iter().map(|&v| -v).collect(),
            normalized: self.normalized,
        }
    }

    pub fn check_normalized(&self) -> Result<()> {
        let n = self.norm().to_f64_lossy();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NotNormalized { norm: n });
        }
        Ok(())
    }
}

/// Scaled cosine similarity `C · cos(a, b)` for unit-length encodings.
pub fn score<T: Scalar>(a: &Encoding<T>, b: &Encoding<T>, scale: T) -> Result<T> {
    a.check_normalized()?;
    b.check_normalized()?;
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(scale * dot(a.as_slice(), b.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        let h = Encoding::normalize(vec![1.0f64, 2.0, 3.0]);
        assert!((score(&h, &h, 2.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((score(&h, &h.neg(), 1.5).unwrap() + 1.5).abs() < 1e-12);
        let a = Encoding::normalize(vec![1.0f64, 0.0, 0.0]);
        let b = Encoding::normalize(vec![0.0f64, 1.0, 0.0]);
        assert!(score(&a, &b, 3.0).unwrap().abs() < 1e-6);
    }

    #[test]
    fn score_rejects_unnormalized() {
        let a = Encoding::raw(vec![2.0f32, 0.0]);
        let b = Encoding::normalize(vec![1.0f32, 0.0]);
        assert!(matches!(score(&a, &b, 1.0), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn zero_vector_normalizes_to_basis() {
        let e = Encoding::normalize(vec![0.0f32; 4]);
        assert_eq!(e.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
