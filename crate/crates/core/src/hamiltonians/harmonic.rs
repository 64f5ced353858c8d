use ndarray::{array, Array2};

use super::{HamiltonianSystem, SeparableParts};
use crate::scalar::Real;

/// `H = ½p² + ½q²`, coordinates `(p, q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Harmonic;

impl<T: Real> HamiltonianSystem<T> for Harmonic {
    fn name(&self) -> &'static str {
        "harmonic"
    }

    fn dim(&self) -> usize {
        2
    }

    fn energy(&self, u: &[T]) -> T {
        T::lit(0.5) * (u[0] * u[0] + u[1] * u[1])
    }

    fn gradient(&self, u: &[T]) -> Vec<T> {
        vec![u[0], u[1]]
    }

    fn vector_field(&self, u: &[T]) -> Vec<T> {
        vec![-u[1], u[0]]
    }

    fn jacobian(&self, _u: &[T]) -> Array2<T> {
        array![[T::zero(), -T::one()], [T::one(), T::zero()]]
    }

    fn canonical_pairs(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        Some((vec![0], vec![1]))
    }

    fn separable(&self) -> Option<SeparableParts<T>> {
        Some(SeparableParts { momentum: vec![0], position: vec![1], inv_mass: vec![T::one()] })
    }

    fn potential(&self, u: &[T]) -> Option<T> {
        Some(T::lit(0.5) * u[1] * u[1])
    }
}
