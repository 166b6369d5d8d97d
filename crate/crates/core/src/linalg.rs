//! Small dense row-major matrix helpers for d x d coefficient algebra.
//!
//! Hot loops use the slice routines directly; factorizations go through
//! nalgebra.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// `out = a * b` for square `d x d` matrices.
#[inline]
pub fn mat_mul(a: &[f64], b: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = s;
        }
    }
}

/// `out = a * x`.
#[inline]
pub fn mat_vec(a: &[f64], x: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        let mut s = 0.0;
        for k in 0..d {
            s += a[i * d + k] * x[k];
        }
        out[i] = s;
    }
}

/// `out = a^T * x`.
#[inline]
pub fn mat_t_vec(a: &[f64], x: &[f64], d: usize, out: &mut [f64]) {
    for j in 0..d {
        let mut s = 0.0;
        for i in 0..d {
            s += a[i * d + j] * x[i];
        }
        out[j] = s;
    }
}

pub fn transpose(a: &[f64], d: usize) -> Vec<f64> {
    let mut t = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            t[j * d + i] = a[i * d + j];
        }
    }
    t
}

pub fn frobenius(a: &[f64]) -> f64 {
    libm::sqrt(a.iter().map(|x| x * x).sum())
}

pub fn norm(x: &[f64]) -> f64 {
    libm::sqrt(x.iter().map(|v| v * v).sum())
}

fn to_na(a: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, a)
}

pub fn inverse(a: &[f64], d: usize) -> Option<Vec<f64>> {
    match d {
        1 => (a[0] != 0.0).then(|| vec![1.0 / a[0]]),
        2 => {
            let det = a[0] * a[3] - a[1] * a[2];
            (det != 0.0).then(|| vec![a[3] / det, -a[1] / det, -a[2] / det, a[0] / det])
        }
        _ => to_na(a, d).try_inverse().map(|m| {
            let mut out = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] = m[(i, j)];
                }
            }
            out
        }),
    }
}

/// Singular values, descending.
pub fn singular_values(a: &[f64], d: usize) -> Vec<f64> {
    let sv = to_na(a, d).singular_values();
    let mut v: Vec<f64> = sv.iter().copied().collect();
    v.sort_by(|x, y| y.partial_cmp(x).unwrap_or(core::cmp::Ordering::Equal));
    v
}

/// Eigenvalues of a symmetric matrix (the upper triangle is trusted).
pub fn symmetric_eigenvalues(a: &[f64], d: usize) -> Vec<f64> {
    let m = to_na(a, d);
    let sym = (&m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().copied().collect()
}

/// Operator 2-norm.
pub fn spectral_norm(a: &[f64], d: usize) -> f64 {
    singular_values(a, d).first().copied().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip_3x3() {
        let a = [2.0, 1.0, 0.0, 0.5, 3.0, 1.0, 0.0, 1.0, 4.0];
        let inv = inverse(&a, 3).unwrap();
        let mut p = [0.0; 9];
        mat_mul(&a, &inv, 3, &mut p);
        for (x, y) in p.iter().zip(identity(3)) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn singular_matrix_has_no_inverse() {
        assert!(inverse(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    #[test]
    fn rotation_singular_values_are_one() {
        let (s, c) = (libm::sin(0.3), libm::cos(0.3));
        let sv = singular_values(&[c, -s, s, c], 2);
        assert!(sv.iter().all(|v| (v - 1.0).abs() < 1e-14));
    }
}
