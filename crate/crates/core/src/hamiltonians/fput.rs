use ndarray::Array2;

use super::{HamiltonianSystem, SeparableParts, SlowFastPartition};
use crate::scalar::Real;

/// Fermi–Pasta–Ulam–Tsingou chain in slow/fast variables,
/// coordinates `(y_s, x_s, y_f, x_f)`, each block of length `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fput<T> {
    pub m: usize,
    pub omega: T,
    /// Quartic springs `¼(Σ c_k x_k)⁴`, stored as sparse linear forms over
    /// full-state indices.
    quartic: Vec<Vec<(usize, T)>>,
}

/// Per-spring energies `I_j = ½(y_{f,j}² + ω² x_{f,j}²)` and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpringEnergies<T> {
    pub per_spring: Vec<T>,
    pub total: T,
}

impl<T: Real> Fput<T> {
    pub fn new(m: usize, omega: T) -> Self {
        assert!(m >= 1, "FPUT chain needs at least one stiff spring");
        let xs = |i: usize| m + i;
        let xf = |i: usize| 3 * m + i;
        let one = T::one();
        let mut quartic = vec![vec![(xs(0), one), (xf(0), -one)], vec![(xs(m - 1), one), (xf(m - 1), one)]];
        for i in 0..m - 1 {
            quartic.push(vec![(xs(i + 1), one), (xf(i + 1), -one), (xs(i), -one), (xf(i), -one)]);
        }
        Self { m, omega, quartic }
    }

    pub fn ys(&self, i: usize) -> usize {
        i
    }
    pub fn xs(&self, i: usize) -> usize {
        self.m + i
    }
    pub fn yf(&self, i: usize) -> usize {
        2 * self.m + i
    }
    pub fn xf(&self, i: usize) -> usize {
        3 * self.m + i
    }

    fn form(&self, term: &[(usize, T)], u: &[T]) -> T {
        term.iter().fold(T::zero(), |acc, &(i, c)| acc + c * u[i])
    }

    /// Sum of the quartic spring energies.
    pub fn quartic_potential(&self, u: &[T]) -> T {
        let quarter = T::lit(0.25);
        self.quartic.iter().map(|t| {
            let l = self.form(t, u);
            let l2 = l * l;
            quarter * l2 * l2
        }).fold(T::zero(), |a, b| a + b)
    }

    pub fn spring_energies(&self, u: &[T]) -> SpringEnergies<T> {
        let half = T::lit(0.5);
        let w2 = self.omega * self.omega;
        let per_spring: Vec<T> = (0..self.m)
            .map(|j| {
                let y = u[self.yf(j)];
                let x = u[self.xf(j)];
                half * (y * y + w2 * x * x)
            })
            .collect();
        let total = per_spring.iter().fold(T::zero(), |a, &b| a + b);
        SpringEnergies { per_spring, total }
    }

    /// `∇_x V` written into the position slots of a full-length vector.
    fn potential_gradient(&self, u: &[T]) -> Vec<T> {
        let mut g = vec![T::zero(); 4 * self.m];
        let w2 = self.omega * self.omega;
        for j in 0..self.m {
            g[self.xf(j)] = w2 * u[self.xf(j)];
        }
        for t in &self.quartic {
            let l = self.form(t, u);
            let l3 = l * l * l;
            for &(i, c) in t {
                g[i] += c * l3;
            }
        }
        g
    }
}

impl<T: Real> HamiltonianSystem<T> for Fput<T> {
    fn name(&self) -> &'static str {
        "fput"
    }

    fn dim(&self) -> usize {
        4 * self.m
    }

    fn energy(&self, u: &[T]) -> T {
        let half = T::lit(0.5);
        let w2 = self.omega * self.omega;
        let mut h = self.quartic_potential(u);
        for i in 0..self.m {
            let (ys, yf, xf) = (u[self.ys(i)], u[self.yf(i)], u[self.xf(i)]);
            h += half * (ys * ys + yf * yf) + half * w2 * xf * xf;
        }
        h
    }

    fn gradient(&self, u: &[T]) -> Vec<T> {
        let mut g = self.potential_gradient(u);
        for i in 0..self.m {
            g[self.ys(i)] = u[self.ys(i)];
            g[self.yf(i)] = u[self.yf(i)];
        }
        g
    }

    fn vector_field(&self, u: &[T]) -> Vec<T> {
        let g = self.potential_gradient(u);
        let mut f = vec![T::zero(); 4 * self.m];
        for i in 0..self.m {
            f[self.ys(i)] = -g[self.xs(i)];
            f[self.yf(i)] = -g[self.xf(i)];
            f[self.xs(i)] = u[self.ys(i)];
            f[self.xf(i)] = u[self.yf(i)];
        }
        f
    }

    fn jacobian(&self, u: &[T]) -> Array2<T> {
        let n = 4 * self.m;
        // Hessian of V over full-state indices (only position slots populated).
        let mut hess = Array2::<T>::zeros((n, n));
        let w2 = self.omega * self.omega;
        for j in 0..self.m {
            hess[[self.xf(j), self.xf(j)]] = w2;
        }
        let three = T::lit(3.0);
        for t in &self.quartic {
            let l = self.form(t, u);
            let s = three * l * l;
            for &(a, ca) in t {
                for &(b, cb) in t {
                    hess[[a, b]] += s * ca * cb;
                }
            }
        }
        let mut j = Array2::zeros((n, n));
        let pairs = [(0usize, self.m), (2 * self.m, 3 * self.m)];
        for &(pb, qb) in &pairs {
            for i in 0..self.m {
                j[[qb + i, pb + i]] = T::one();
                for &(_, qb2) in &pairs {
                    for k in 0..self.m {
                        j[[pb + i, qb2 + k]] = -hess[[qb + i, qb2 + k]];
                    }
                }
            }
        }
        j
    }

    fn canonical_pairs(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        let m = self.m;
        let p: Vec<usize> = (0..m).chain(2 * m..3 * m).collect();
        let q: Vec<usize> = (m..2 * m).chain(3 * m..4 * m).collect();
        Some((p, q))
    }

    fn separable(&self) -> Option<SeparableParts<T>> {
        let (momentum, position) = HamiltonianSystem::<T>::canonical_pairs(self)?;
        let inv_mass = vec![T::one(); momentum.len()];
        Some(SeparableParts { momentum, position, inv_mass })
    }

    fn potential(&self, u: &[T]) -> Option<T> {
        let half = T::lit(0.5);
        let w2 = self.omega * self.omega;
        let springs = (0..self.m).fold(T::zero(), |a, j| a + half * w2 * u[self.xf(j)] * u[self.xf(j)]);
        Some(springs + self.quartic_potential(u))
    }

    fn slow_fast(&self) -> Option<SlowFastPartition> {
        let m = self.m;
        Some(SlowFastPartition { slow: (0..2 * m).collect(), fast: (2 * m..4 * m).collect() })
    }
}
