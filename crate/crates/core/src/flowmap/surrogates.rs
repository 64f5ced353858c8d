//! Hand-built maps used as test doubles and reference points.

use std::sync::Arc;

use ndarray::Array2;

use super::FlowMap;
use crate::diffnet::{RowFunction, Tape, Var};
use crate::error::Result;
use crate::hamiltonians::System;
use crate::integrators::SchemeDescriptor;
use crate::scalar::Real;

/// `Φ(u, t) = u`, for every `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityFlow {
    pub dim: usize,
}

impl<T: Real> FlowMap<T> for IdentityFlow {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, tape: &mut Tape<T>, _: &[Var], _: &System<T>, u: Var, t: Var, _: Option<&[T]>) -> Result<Var> {
        // keep `t` on the tape so ∂ₜΦ = 0 is available as a tangent
        let zero = tape.scale(t, T::zero());
        Ok(tape.add(u, zero))
    }
}

/// Exact flow of the harmonic oscillator on `(p, q)`: rotation by `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RotationFlow;

struct Rotation;

impl<T: Real> RowFunction<T> for Rotation {
    fn value(&self, x: &[T], _: Option<T>) -> Vec<T> {
        let (p, q, t) = (x[0], x[1], x[2]);
        let (s, c) = t.sin_cos();
        vec![p * c - q * s, q * c + p * s]
    }

    fn jacobian(&self, x: &[T], _: Option<T>) -> Array2<T> {
        let (p, q, t) = (x[0], x[1], x[2]);
        let (s, c) = t.sin_cos();
        Array2::from_shape_vec((2, 3), vec![c, -s, -p * s - q * c, s, c, -q * s + p * c]).expect("2×3")
    }
}

impl<T: Real> FlowMap<T> for RotationFlow {
    fn state_dim(&self) -> usize {
        2
    }

    fn forward(&self, tape: &mut Tape<T>, _: &[Var], _: &System<T>, u: Var, t: Var, _: Option<&[T]>) -> Result<Var> {
        let x = tape.concat(&[u, t]);
        Ok(tape.row_map(x, Arc::new(Rotation), None))
    }
}

/// The scheme's own iterates from `u`, linearly interpolated between grid
/// points `n·h`. Jacobians come from central differences.
#[derive(Debug, Clone)]
pub struct SchemeIterateFlow<T> {
    pub scheme: SchemeDescriptor<T>,
    pub system: System<T>,
}

struct Iterates<T> {
    scheme: SchemeDescriptor<T>,
    system: System<T>,
}

impl<T: Real> Iterates<T> {
    fn at(&self, u: &[T], t: T) -> Vec<T> {
        let h = self.scheme.h;
        let pos = (t / h).max(T::zero());
        let n = pos.floor();
        let frac = pos - n;
        let mut cur = u.to_vec();
        for _ in 0..n.to_usize().unwrap_or(0) {
            cur = self.step(&cur);
        }
        if frac == T::zero() {
            return cur;
        }
        let next = self.step(&cur);
        cur.iter().zip(&next).map(|(&a, &b)| a + frac * (b - a)).collect()
    }

    fn step(&self, u: &[T]) -> Vec<T> {
        self.scheme.step(&self.system, u).map(|(v, _)| v).unwrap_or_else(|_| vec![T::nan(); u.len()])
    }
}

impl<T: Real> RowFunction<T> for Iterates<T> {
    fn value(&self, x: &[T], _: Option<T>) -> Vec<T> {
        let d = x.len() - 1;
        self.at(&x[..d], x[d])
    }

    fn jacobian(&self, x: &[T], _: Option<T>) -> Array2<T> {
        let d = x.len() - 1;
        let mut j = Array2::zeros((d, d + 1));
        let eps = T::epsilon().cbrt();
        for k in 0..=d {
            let step = eps * x[k].abs().max(T::one());
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[k] += step;
            b[k] -= step;
            let (fa, fb) = (self.value(&a, None), self.value(&b, None));
            for i in 0..d {
                j[[i, k]] = (fa[i] - fb[i]) / (step + step);
            }
        }
        j
    }
}

impl<T: Real> FlowMap<T> for SchemeIterateFlow<T> {
    fn state_dim(&self) -> usize {
        use crate::hamiltonians::HamiltonianSystem;
        self.system.dim()
    }

    fn forward(&self, tape: &mut Tape<T>, _: &[Var], _: &System<T>, u: Var, t: Var, _: Option<&[T]>) -> Result<Var> {
        let x = tape.concat(&[u, t]);
        let f = Iterates { scheme: self.scheme.clone(), system: self.system.clone() };
        Ok(tape.row_map(x, Arc::new(f), None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::ParameterSet;
    use crate::flowmap::{eval_map, rollout_compose, t0_centered_eval, FixedStepFlowMap};
    use crate::hamiltonians::{make_system, ParamTable, PhaseState};
    use std::f64::consts::FRAC_PI_2;

    fn harmonic() -> System<f64> {
        make_system("harmonic", &ParamTable::new()).unwrap()
    }

    #[test]
    fn rotation_composes_to_identity() {
        let ps = ParameterSet::new(0);
        let u0 = PhaseState::new(vec![0.3, -1.2]).unwrap();
        let out = rollout_compose(&RotationFlow, &ps, &harmonic(), &u0, FRAC_PI_2, 4).unwrap();
        assert_eq!(out.len(), 4);
        for (a, b) in out[3].coords.iter().zip(&u0.coords) {
            assert!((a - b).abs() < 1e-12);
        }
        let one = rollout_compose(&RotationFlow, &ps, &harmonic(), &u0, 0.7, 1).unwrap();
        assert_eq!(one[0], eval_map(&RotationFlow, &ps, &harmonic(), &u0, 0.7).unwrap());
    }

    #[test]
    fn rotation_quarter_turn() {
        let ps = ParameterSet::new(0);
        let u = PhaseState::new(vec![0.0, 1.0]).unwrap();
        let out = eval_map(&RotationFlow, &ps, &harmonic(), &u, FRAC_PI_2).unwrap();
        assert!((out.coords[0] + 1.0).abs() < 1e-15 && out.coords[1].abs() < 1e-15);
    }

    #[test]
    fn identity_ignores_time() {
        let ps = ParameterSet::new(0);
        let u = PhaseState::new(vec![0.4, 2.0]).unwrap();
        assert_eq!(eval_map(&IdentityFlow { dim: 2 }, &ps, &harmonic(), &u, 3.0).unwrap(), u);
    }

    #[test]
    fn scheme_iterates_hit_grid_points() {
        use crate::integrators::SchemeKind;
        let s = harmonic();
        let scheme = SchemeDescriptor::new(SchemeKind::VelocityVerlet, 0.25).unwrap();
        let map = SchemeIterateFlow { scheme: scheme.clone(), system: s.clone() };
        let ps = ParameterSet::new(0);
        let u = PhaseState::new(vec![0.0, 1.0]).unwrap();
        let at = eval_map(&map, &ps, &s, &u, 0.5).unwrap();
        let (one, _) = scheme.step(&s, &u.coords).unwrap();
        let (two, _) = scheme.step(&s, &one).unwrap();
        assert_eq!(at.coords, two);
    }

    #[test]
    fn t0_centered_rotations_add() {
        let s = harmonic();
        let mut ps = ParameterSet::new(0);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let fixed = FixedStepFlowMap::init(
            super::super::fixed::FixedConfig { t0: 0.5, hidden: vec![4], gated: false },
            &s,
            &mut ps,
            "",
            &mut rng,
        )
        .unwrap();
        // zero-initialized output layer: Φ_{T₀} ≡ 0
        let u = PhaseState::new(vec![0.2, 0.9]).unwrap();
        assert_eq!(eval_map(&fixed, &ps, &s, &u, 0.5).unwrap().coords, vec![0.0, 0.0]);
        let out = t0_centered_eval(&fixed, 0.5, &RotationFlow, &ps, &s, &u, 1.3).unwrap();
        assert_eq!(out.coords, vec![0.0, 0.0]);
        let both = t0_centered_eval(&RotationFlow, 0.5, &RotationFlow, &ps, &s, &u, 1.3).unwrap();
        let direct = eval_map(&RotationFlow, &ps, &s, &u, 1.3).unwrap();
        for (a, b) in both.coords.iter().zip(&direct.coords) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
