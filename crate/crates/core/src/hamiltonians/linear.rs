use ndarray::Array2;

use super::HamiltonianSystem;
use crate::linalg::matvec;
use crate::scalar::Real;

/// Linear test flow `u' = A u` used for scalar and closed-form checks.
/// Its "energy" is `½‖u‖²`, which is only conserved for skew `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFlow<T> {
    pub a: Array2<T>,
}

impl<T: Real> LinearFlow<T> {
    pub fn new(a: Array2<T>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "linear flow needs a square matrix");
        Self { a }
    }

    /// The scalar problem `u' = λu`.
    pub fn scalar(lambda: T) -> Self {
        Self::new(Array2::from_elem((1, 1), lambda))
    }
}

impl<T: Real> HamiltonianSystem<T> for LinearFlow<T> {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn energy(&self, u: &[T]) -> T {
        T::lit(0.5) * u.iter().fold(T::zero(), |a, &v| a + v * v)
    }

    fn gradient(&self, u: &[T]) -> Vec<T> {
        u.to_vec()
    }

    fn vector_field(&self, u: &[T]) -> Vec<T> {
        matvec(&self.a, u)
    }

    fn jacobian(&self, _u: &[T]) -> Array2<T> {
        self.a.clone()
    }
}
