//! Small dense vector helpers over plain slices. Model dimensions here are
//! single digits to low hundreds, so `Vec<T>` plus free functions beats a
//! matrix library.

use crate::scalar::Scalar;

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm_sq<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    norm_sq(a).sqrt()
}

/// `dst += coeff * src`, elementwise.
pub fn add_scaled<T: Scalar>(dst: &mut [T], coeff: T, src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += coeff * s;
    }
}

pub fn scale<T: Scalar>(v: &mut [T], coeff: T) {
    for x in v.iter_mut() {
        *x *= coeff;
    }
}

pub fn sub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// Arithmetic mean of a non-empty set of equal-length vectors.
pub fn mean<T: Scalar>(vectors: &[Vec<T>]) -> Vec<T> {
    assert!(!vectors.is_empty(), "mean of zero vectors");
    let dim = vectors[0].len();
    let mut out = vec![T::zero(); dim];
    for v in vectors {
        add_scaled(&mut out, T::one(), v);
    }
    let inv = T::one() / T::from_count(vectors.len());
    scale(&mut out, inv);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_and_norm() {
        let a = [3.0, 4.0];
        assert_eq!(dot(&a, &a), 25.0);
        assert_eq!(norm(&a), 5.0);
    }

    #[test]
    fn add_scaled_accumulates() {
        let mut d = vec![1.0, 1.0];
        add_scaled(&mut d, 2.0, &[1.0, -1.0]);
        assert_eq!(d, vec![3.0, -1.0]);
    }

    #[test]
    fn mean_of_vectors() {
        let vs = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(mean(&vs), vec![2.0, 3.0]);
    }

    #[test]
    fn works_at_f32() {
        let a = [3.0f32, 4.0];
        assert_eq!(norm(&a), 5.0f32);
    }
}
