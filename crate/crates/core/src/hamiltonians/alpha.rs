use ndarray::Array2;

use super::HamiltonianSystem;
use crate::scalar::Real;

/// `B(x, y) = B₀ + a₁cos(k₁x + k₂y) + a₂cos(k₃x + k₄y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagneticField<T> {
    pub b0: T,
    pub a1: T,
    pub a2: T,
    pub k: [T; 4],
}

impl<T: Real> Default for MagneticField<T> {
    fn default() -> Self {
        Self { b0: T::one(), a1: T::lit(0.5), a2: T::lit(0.5), k: [T::one(), T::zero(), T::zero(), T::one()] }
    }
}

impl<T: Real> MagneticField<T> {
    pub fn constant(b0: T) -> Self {
        Self { b0, a1: T::zero(), a2: T::zero(), k: [T::zero(); 4] }
    }

    pub fn value(&self, x: T, y: T) -> T {
        let [k1, k2, k3, k4] = self.k;
        self.b0 + self.a1 * (k1 * x + k2 * y).cos() + self.a2 * (k3 * x + k4 * y).cos()
    }

    /// `(∂B/∂x, ∂B/∂y)`.
    pub fn gradient(&self, x: T, y: T) -> (T, T) {
        let [k1, k2, k3, k4] = self.k;
        let s1 = (k1 * x + k2 * y).sin();
        let s2 = (k3 * x + k4 * y).sin();
        (-self.a1 * k1 * s1 - self.a2 * k3 * s2, -self.a1 * k2 * s1 - self.a2 * k4 * s2)
    }
}

/// Reduced guiding-center-free model of a charged particle in `B(x,y) e_z`:
/// `v̇_x = B v_y`, `v̇_y = −B v_x`, `ẋ = ε v_x`, `ẏ = ε v_y`,
/// coordinates `(v_x, v_y, x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaParticle<T> {
    pub epsilon: T,
    pub field: MagneticField<T>,
}

impl<T: Real> AlphaParticle<T> {
    pub fn new(epsilon: T, field: MagneticField<T>) -> Self {
        Self { epsilon, field }
    }
}

impl<T: Real> HamiltonianSystem<T> for AlphaParticle<T> {
    fn name(&self) -> &'static str {
        "alpha"
    }

    fn dim(&self) -> usize {
        4
    }

    /// Kinetic proxy `½(v_x² + v_y²)`, conserved by the exact dynamics.
    fn energy(&self, u: &[T]) -> T {
        T::lit(0.5) * (u[0] * u[0] + u[1] * u[1])
    }

    fn gradient(&self, u: &[T]) -> Vec<T> {
        vec![u[0], u[1], T::zero(), T::zero()]
    }

    fn vector_field(&self, u: &[T]) -> Vec<T> {
        let b = self.field.value(u[2], u[3]);
        vec![b * u[1], -b * u[0], self.epsilon * u[0], self.epsilon * u[1]]
    }

    fn jacobian(&self, u: &[T]) -> Array2<T> {
        let (vx, vy) = (u[0], u[1]);
        let b = self.field.value(u[2], u[3]);
        let (bx, by) = self.field.gradient(u[2], u[3]);
        let mut j = Array2::zeros((4, 4));
        j[[0, 1]] = b;
        j[[0, 2]] = bx * vy;
        j[[0, 3]] = by * vy;
        j[[1, 0]] = -b;
        j[[1, 2]] = -bx * vx;
        j[[1, 3]] = -by * vx;
        j[[2, 0]] = self.epsilon;
        j[[3, 1]] = self.epsilon;
        j
    }

    fn velocity_indices(&self) -> Option<Vec<usize>> {
        Some(vec![0, 1])
    }
}
