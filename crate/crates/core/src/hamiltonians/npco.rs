use ndarray::Array2;

use super::{HamiltonianSystem, SeparableParts};
use crate::scalar::Real;

/// Nearly periodic coupled oscillators,
/// `H = ½(q₁² + p₁²) + ½ε(q₂² + p₂²) + ε q₁q₂ sin(2q₁ + 2q₂)`,
/// coordinates `(p1, p2, q1, q2)`.
///
/// The kinetic term `½εp₂²` makes the diagonal inverse mass `(1, ε)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Npco<T> {
    pub epsilon: T,
}

impl<T: Real> Npco<T> {
    pub fn new(epsilon: T) -> Self {
        Self { epsilon }
    }

    fn coupling(&self, q1: T, q2: T) -> T {
        q1 * q2 * (T::lit(2.0) * (q1 + q2)).sin()
    }

    /// `(U_1, U_2)`.
    fn coupling_grad(&self, q1: T, q2: T) -> (T, T) {
        let a = T::lit(2.0) * (q1 + q2);
        let (s, c) = a.sin_cos();
        let two = T::lit(2.0);
        (q2 * s + two * q1 * q2 * c, q1 * s + two * q1 * q2 * c)
    }

    /// `(U_11, U_12, U_22)`.
    fn coupling_hess(&self, q1: T, q2: T) -> (T, T, T) {
        let a = T::lit(2.0) * (q1 + q2);
        let (s, c) = a.sin_cos();
        let four = T::lit(4.0);
        let qq = q1 * q2;
        (
            four * q2 * c - four * qq * s,
            s + T::lit(2.0) * (q1 + q2) * c - four * qq * s,
            four * q1 * c - four * qq * s,
        )
    }
}

impl<T: Real> HamiltonianSystem<T> for Npco<T> {
    fn name(&self) -> &'static str {
        "npco"
    }

    fn dim(&self) -> usize {
        4
    }

    fn energy(&self, u: &[T]) -> T {
        let (p1, p2, q1, q2) = (u[0], u[1], u[2], u[3]);
        let half = T::lit(0.5);
        half * (q1 * q1 + p1 * p1) + half * self.epsilon * (q2 * q2 + p2 * p2) + self.epsilon * self.coupling(q1, q2)
    }

    fn gradient(&self, u: &[T]) -> Vec<T> {
        let (p1, p2, q1, q2) = (u[0], u[1], u[2], u[3]);
        let e = self.epsilon;
        let (u1, u2) = self.coupling_grad(q1, q2);
        vec![p1, e * p2, q1 + e * u1, e * q2 + e * u2]
    }

    fn vector_field(&self, u: &[T]) -> Vec<T> {
        let g = self.gradient(u);
        vec![-g[2], -g[3], g[0], g[1]]
    }

    fn jacobian(&self, u: &[T]) -> Array2<T> {
        let (q1, q2) = (u[2], u[3]);
        let e = self.epsilon;
        let (h11, h12, h22) = self.coupling_hess(q1, q2);
        let mut j = Array2::zeros((4, 4));
        j[[0, 2]] = -(T::one() + e * h11);
        j[[0, 3]] = -e * h12;
        j[[1, 2]] = -e * h12;
        j[[1, 3]] = -(e + e * h22);
        j[[2, 0]] = T::one();
        j[[3, 1]] = e;
        j
    }

    fn canonical_pairs(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        Some((vec![0, 1], vec![2, 3]))
    }

    fn separable(&self) -> Option<SeparableParts<T>> {
        Some(SeparableParts { momentum: vec![0, 1], position: vec![2, 3], inv_mass: vec![T::one(), self.epsilon] })
    }

    fn potential(&self, u: &[T]) -> Option<T> {
        let (q1, q2) = (u[2], u[3]);
        let half = T::lit(0.5);
        Some(half * q1 * q1 + half * self.epsilon * q2 * q2 + self.epsilon * self.coupling(q1, q2))
    }
}
