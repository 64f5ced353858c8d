use ndarray::{array, Array2};

use super::{HamiltonianSystem, SeparableParts};
use crate::scalar::Real;

/// `H = ½p² + ¼(q² − 1)²`, coordinates `(p, q)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DoubleWell;

impl<T: Real> HamiltonianSystem<T> for DoubleWell {
    fn name(&self) -> &'static str {
        "double_well"
    }

    fn dim(&self) -> usize {
        2
    }

    fn energy(&self, u: &[T]) -> T {
        let w = u[1] * u[1] - T::one();
        T::lit(0.5) * u[0] * u[0] + T::lit(0.25) * w * w
    }

    fn gradient(&self, u: &[T]) -> Vec<T> {
        vec![u[0], u[1] * (u[1] * u[1] - T::one())]
    }

    fn vector_field(&self, u: &[T]) -> Vec<T> {
        vec![-u[1] * (u[1] * u[1] - T::one()), u[0]]
    }

    fn jacobian(&self, u: &[T]) -> Array2<T> {
        array![[T::zero(), T::one() - T::lit(3.0) * u[1] * u[1]], [T::one(), T::zero()]]
    }

    fn canonical_pairs(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        Some((vec![0], vec![1]))
    }

    fn separable(&self) -> Option<SeparableParts<T>> {
        Some(SeparableParts { momentum: vec![0], position: vec![1], inv_mass: vec![T::one()] })
    }

    fn potential(&self, u: &[T]) -> Option<T> {
        let w = u[1] * u[1] - T::one();
        Some(T::lit(0.25) * w * w)
    }
}
