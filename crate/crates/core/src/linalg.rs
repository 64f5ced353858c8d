//! Small dense linear algebra on `ndarray` matrices.
//!
//! Phase-space dimensions are at most a dozen, so everything here is plain
//! Gaussian elimination. Spectral quantities (eigenvalues, singular values,
//! null spaces) go through `nalgebra` in double precision.

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::scalar::Real;

/// Solves `a x = b` with partial pivoting. Returns `None` for a singular matrix.
pub fn solve<T: Real>(a: &Array2<T>, b: &[T]) -> Option<Vec<T>> {
    let n = a.nrows();
    debug_assert_eq!(a.ncols(), n);
    debug_assert_eq!(b.len(), n);
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    let tiny = T::epsilon() * scale * T::from_usize_lossy(n.max(1));
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[[r, col]].abs() > m[[piv, col]].abs() {
                piv = r;
            }
        }
        if m[[piv, col]].abs() <= tiny || m[[piv, col]] == T::zero() {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap([piv, c], [col, c]);
            }
            x.swap(piv, col);
        }
        let d = m[[col, col]];
        for r in col + 1..n {
            let f = m[[r, col]] / d;
            if f == T::zero() {
                continue;
            }
            for c in col..n {
                let v = m[[col, c]];
                m[[r, c]] -= f * v;
            }
            let v = x[col];
            x[r] -= f * v;
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for c in col + 1..n {
            s -= m[[col, c]] * x[c];
        }
        x[col] = s / m[[col, col]];
    }
    Some(x)
}

pub fn matvec<T: Real>(a: &Array2<T>, x: &[T]) -> Vec<T> {
    (0..a.nrows())
        .map(|r| (0..a.ncols()).fold(T::zero(), |acc, c| acc + a[[r, c]] * x[c]))
        .collect()
}

pub fn matvec_t<T: Real>(a: &Array2<T>, x: &[T]) -> Vec<T> {
    (0..a.ncols())
        .map(|c| (0..a.nrows()).fold(T::zero(), |acc, r| acc + a[[r, c]] * x[r]))
        .collect()
}

pub fn identity<T: Real>(n: usize) -> Array2<T> {
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { T::one() } else { T::zero() })
}

pub fn to_nalgebra<T: Real>(a: &Array2<T>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]].as_f64())
}

/// Complex eigenvalues `(re, im)` of a general square matrix.
pub fn eigenvalues<T: Real>(a: &Array2<T>) -> Vec<(f64, f64)> {
    to_nalgebra(a)
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.im))
        .collect()
}

/// Singular values, largest first.
pub fn singular_values<T: Real>(a: &Array2<T>) -> Vec<f64> {
    let mut s: Vec<f64> = to_nalgebra(a).singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solve_needs_pivoting() {
        let a: Array2<f64> = array![[0.0, 1.0], [2.0, 3.0]];
        let x = solve(&a, &[1.0, 8.0]).unwrap();
        assert!((x[0] - 2.5).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singular_returns_none() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(solve(&a, &[1.0, 1.0]).is_none());
        assert!(solve(&array![[0.0]], &[1.0]).is_none());
    }

    #[test]
    fn rotation_eigenvalues() {
        let a = array![[0.0, -1.0], [1.0, 0.0]];
        let mut ev = eigenvalues(&a);
        ev.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        assert!((ev[0].1 + 1.0).abs() < 1e-14 && (ev[1].1 - 1.0).abs() < 1e-14);
    }
}
