//! One-step integrators written as `Φ^Im_h(u_{n+1}) = Φ^Ex_h(u_n)`.
//!
//! | scheme           | `Φ^Ex_h(u)`                  | `Φ^Im_h(v)`             |
//! |------------------|------------------------------|-------------------------|
//! | forward Euler    | `u + h f(u)`                 | `v`                     |
//! | velocity Verlet  | half kick + drift            | `(p − h/2 F(q), q)`     |
//! | implicit Euler   | `u`                          | `v − h f(v)`            |
//! | RK4              | classical RK4 update         | `v`                     |
//!
//! The implicit midpoint rule couples both states through `f((u+v)/2)` and
//! therefore has no such split; it is handled through the general residual
//! `R(v, u) = v − u − h f((u+v)/2)` instead.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonians::{HamiltonianSystem, PhaseState, System};
use crate::linalg::{identity, matvec, solve};
use crate::scalar::{axpy, norm2, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    ForwardEuler,
    VelocityVerlet,
    ImplicitEuler,
    ImplicitMidpoint,
    Rk4,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::ForwardEuler,
        SchemeKind::VelocityVerlet,
        SchemeKind::ImplicitEuler,
        SchemeKind::ImplicitMidpoint,
        SchemeKind::Rk4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::ForwardEuler => "forward_euler",
            SchemeKind::VelocityVerlet => "velocity_verlet",
            SchemeKind::ImplicitEuler => "implicit_euler",
            SchemeKind::ImplicitMidpoint => "implicit_midpoint",
            SchemeKind::Rk4 => "rk4",
        }
    }

    pub fn order(self) -> u32 {
        match self {
            SchemeKind::ForwardEuler | SchemeKind::ImplicitEuler => 1,
            SchemeKind::VelocityVerlet | SchemeKind::ImplicitMidpoint => 2,
            SchemeKind::Rk4 => 4,
        }
    }

    /// `Φ^Im` is the identity.
    pub fn is_explicit(self) -> bool {
        matches!(self, SchemeKind::ForwardEuler | SchemeKind::Rk4)
    }

    /// Admits the split `Φ^Im(v) = Φ^Ex(u)`.
    pub fn is_imex(self) -> bool {
        self != SchemeKind::ImplicitMidpoint
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "forward_euler" | "fe" | "euler" => SchemeKind::ForwardEuler,
            "velocity_verlet" | "vv" | "verlet" => SchemeKind::VelocityVerlet,
            "implicit_euler" | "ie" => SchemeKind::ImplicitEuler,
            "implicit_midpoint" | "midpoint" | "im" => SchemeKind::ImplicitMidpoint,
            "rk4" => SchemeKind::Rk4,
            other => return Err(Error::InvalidParameter(format!("unknown scheme `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl NewtonSettings {
    /// `1e-12`, raised to a hundred ulps for single precision.
    pub fn for_scalar<T: Real>() -> Self {
        Self { tol: 1e-12f64.max(100.0 * T::epsilon().as_f64()), max_iter: 50 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepDiagnostics {
    pub iterations: usize,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeDescriptor<T> {
    pub kind: SchemeKind,
    pub h: T,
    pub newton: NewtonSettings,
}

fn check_step<T: Real>(h: T) -> Result<()> {
    if !(h.is_finite() && h >= T::zero()) {
        return Err(Error::InvalidParameter(format!("step size must be finite and non-negative, got {h}")));
    }
    Ok(())
}

struct Verlet<T> {
    p: Vec<usize>,
    q: Vec<usize>,
    inv_mass: Vec<T>,
}

impl<T: Real> SchemeDescriptor<T> {
    pub fn new(kind: SchemeKind, h: T) -> Result<Self> {
        check_step(h)?;
        Ok(Self { kind, h, newton: NewtonSettings::for_scalar::<T>() })
    }

    pub fn with_newton(mut self, newton: NewtonSettings) -> Self {
        self.newton = newton;
        self
    }

    pub fn order(&self) -> u32 {
        self.kind.order()
    }

    /// Errors unless the system supports this scheme.
    pub fn supports(&self, system: &System<T>) -> Result<()> {
        if self.kind == SchemeKind::VelocityVerlet && system.separable().is_none() {
            return Err(Error::UnsupportedScheme {
                scheme: self.kind.to_string(),
                reason: format!("`{}` is not separable", system.name()),
            });
        }
        Ok(())
    }

    fn verlet(&self, system: &System<T>) -> Result<Verlet<T>> {
        let sep = system.separable().ok_or_else(|| Error::UnsupportedScheme {
            scheme: self.kind.to_string(),
            reason: format!("`{}` is not separable", system.name()),
        })?;
        Ok(Verlet { p: sep.momentum, q: sep.position, inv_mass: sep.inv_mass })
    }

    fn no_split(&self) -> Error {
        Error::UnsupportedScheme {
            scheme: self.kind.to_string(),
            reason: "the scheme has no implicit-explicit split".into(),
        }
    }

    /// `Φ^Ex_h(u)`.
    pub fn explicit_map(&self, system: &System<T>, u: &[T]) -> Result<Vec<T>> {
        let h = self.h;
        match self.kind {
            SchemeKind::ForwardEuler => Ok(axpy(h, &system.vector_field(u), u)),
            SchemeKind::ImplicitEuler => Ok(u.to_vec()),
            SchemeKind::Rk4 => Ok(rk4_map(system, u, h)),
            SchemeKind::VelocityVerlet => {
                let v = self.verlet(system)?;
                let f = system.vector_field(u);
                let half = T::lit(0.5) * h;
                let mut out = u.to_vec();
                for (k, (&pi, &qi)) in v.p.iter().zip(&v.q).enumerate() {
                    let ph = u[pi] + half * f[pi];
                    out[pi] = ph;
                    out[qi] = u[qi] + h * v.inv_mass[k] * ph;
                }
                Ok(out)
            }
            SchemeKind::ImplicitMidpoint => Err(self.no_split()),
        }
    }

    /// `Φ^Im_h(v)`.
    pub fn implicit_map(&self, system: &System<T>, v: &[T]) -> Result<Vec<T>> {
        let h = self.h;
        match self.kind {
            SchemeKind::ForwardEuler | SchemeKind::Rk4 => Ok(v.to_vec()),
            SchemeKind::ImplicitEuler => Ok(axpy(-h, &system.vector_field(v), v)),
            SchemeKind::VelocityVerlet => {
                let vv = self.verlet(system)?;
                let f = system.vector_field(v);
                let half = T::lit(0.5) * h;
                let mut out = v.to_vec();
                for &pi in &vv.p {
                    out[pi] = v[pi] - half * f[pi];
                }
                Ok(out)
            }
            SchemeKind::ImplicitMidpoint => Err(self.no_split()),
        }
    }

    /// `DΦ^Ex_h(u)`.
    pub fn explicit_jacobian(&self, system: &System<T>, u: &[T]) -> Result<Array2<T>> {
        let n = u.len();
        let h = self.h;
        match self.kind {
            SchemeKind::ForwardEuler => Ok(identity::<T>(n) + &(system.jacobian(u) * h)),
            SchemeKind::ImplicitEuler => Ok(identity(n)),
            SchemeKind::Rk4 => Ok(rk4_jacobian(system, u, h)),
            SchemeKind::VelocityVerlet => {
                let v = self.verlet(system)?;
                let j = system.jacobian(u);
                let half = T::lit(0.5) * h;
                let mut d = identity::<T>(n);
                // rows of p_half: ∂/∂q = h/2 K, rows of q_new: ∂/∂p = h M⁻¹, ∂/∂q = I + h²/2 M⁻¹ K
                for (a, (&pa, &qa)) in v.p.iter().zip(&v.q).enumerate() {
                    d[[qa, pa]] = h * v.inv_mass[a];
                    for &qb in &v.q {
                        let k = j[[pa, qb]];
                        d[[pa, qb]] += half * k;
                        d[[qa, qb]] += h * v.inv_mass[a] * half * k;
                    }
                }
                Ok(d)
            }
            SchemeKind::ImplicitMidpoint => Err(self.no_split()),
        }
    }

    /// `DΦ^Im_h(v)`.
    pub fn implicit_jacobian(&self, system: &System<T>, v: &[T]) -> Result<Array2<T>> {
        let n = v.len();
        let h = self.h;
        match self.kind {
            SchemeKind::ForwardEuler | SchemeKind::Rk4 => Ok(identity(n)),
            SchemeKind::ImplicitEuler => Ok(identity::<T>(n) - &(system.jacobian(v) * h)),
            SchemeKind::VelocityVerlet => {
                let vv = self.verlet(system)?;
                let j = system.jacobian(v);
                let half = T::lit(0.5) * h;
                let mut d = identity::<T>(n);
                for &pa in &vv.p {
                    for &qb in &vv.q {
                        d[[pa, qb]] -= half * j[[pa, qb]];
                    }
                }
                Ok(d)
            }
            SchemeKind::ImplicitMidpoint => Err(self.no_split()),
        }
    }

    /// Scheme residual `R(next, prev)`; zero exactly when `next` is the
    /// scheme's step from `prev`.
    pub fn residual(&self, system: &System<T>, next: &[T], prev: &[T]) -> Result<Vec<T>> {
        if self.kind == SchemeKind::ImplicitMidpoint {
            let mid: Vec<T> = next.iter().zip(prev).map(|(&a, &b)| T::lit(0.5) * (a + b)).collect();
            let f = system.vector_field(&mid);
            return Ok(next.iter().zip(prev).zip(&f).map(|((&a, &b), &fi)| a - b - self.h * fi).collect());
        }
        let im = self.implicit_map(system, next)?;
        let ex = self.explicit_map(system, prev)?;
        Ok(im.iter().zip(&ex).map(|(&a, &b)| a - b).collect())
    }

    /// `(∂R/∂next, ∂R/∂prev)`; for split schemes `(DΦ^Im(next), −DΦ^Ex(prev))`.
    pub fn residual_jacobians(&self, system: &System<T>, next: &[T], prev: &[T]) -> Result<(Array2<T>, Array2<T>)> {
        if self.kind == SchemeKind::ImplicitMidpoint {
            let n = next.len();
            let mid: Vec<T> = next.iter().zip(prev).map(|(&a, &b)| T::lit(0.5) * (a + b)).collect();
            let a = system.jacobian(&mid) * (T::lit(0.5) * self.h);
            let p = identity::<T>(n) - &a;
            let q = -(identity::<T>(n) + &a);
            return Ok((p, q));
        }
        let p = self.implicit_jacobian(system, next)?;
        let q = -self.explicit_jacobian(system, prev)?;
        Ok((p, q))
    }

    /// Advances one step. Implicit schemes use Newton's method seeded with
    /// the forward Euler predictor.
    pub fn step(&self, system: &System<T>, u: &[T]) -> Result<(Vec<T>, StepDiagnostics)> {
        let h = self.h;
        match self.kind {
            SchemeKind::ForwardEuler => Ok((axpy(h, &system.vector_field(u), u), StepDiagnostics::default())),
            SchemeKind::Rk4 => Ok((rk4_map(system, u, h), StepDiagnostics::default())),
            SchemeKind::VelocityVerlet => {
                let v = self.verlet(system)?;
                let half = T::lit(0.5) * h;
                let mut out = u.to_vec();
                let f0 = system.vector_field(u);
                for (k, (&pi, &qi)) in v.p.iter().zip(&v.q).enumerate() {
                    out[pi] = u[pi] + half * f0[pi];
                    out[qi] = u[qi] + h * v.inv_mass[k] * out[pi];
                }
                // the force depends on positions only, so the stale momenta are harmless here
                let f1 = system.vector_field(&out);
                for &pi in &v.p {
                    out[pi] += half * f1[pi];
                }
                Ok((out, StepDiagnostics::default()))
            }
            SchemeKind::ImplicitEuler | SchemeKind::ImplicitMidpoint => self.newton_step(system, u),
        }
    }

    fn newton_step(&self, system: &System<T>, u: &[T]) -> Result<(Vec<T>, StepDiagnostics)> {
        let mut v = axpy(self.h, &system.vector_field(u), u);
        let scale = norm2(u).as_f64().max(1.0);
        let tol = self.newton.tol * scale;
        let mut r = self.residual(system, &v, u)?;
        let mut rn = norm2(&r).as_f64();
        let fail = |iterations: usize, residual: f64, v: &[T]| Error::StepFailure {
            step: None,
            iterations,
            residual,
            last_iterate: v.iter().map(|x| x.as_f64()).collect(),
        };
        for it in 0..self.newton.max_iter {
            if rn < tol {
                return Ok((v, StepDiagnostics { iterations: it, residual_norm: rn }));
            }
            let (p, _) = self.residual_jacobians(system, &v, u)?;
            let neg: Vec<T> = r.iter().map(|&x| -x).collect();
            let Some(dv) = solve(&p, &neg) else {
                return Err(fail(it, rn, &v));
            };
            for (vi, di) in v.iter_mut().zip(&dv) {
                *vi += *di;
            }
            r = self.residual(system, &v, u)?;
            rn = norm2(&r).as_f64();
            if !rn.is_finite() {
                return Err(fail(it + 1, rn, &v));
            }
        }
        if rn < tol {
            return Ok((v, StepDiagnostics { iterations: self.newton.max_iter, residual_norm: rn }));
        }
        Err(fail(self.newton.max_iter, rn, &v))
    }
}

fn rk4_stages<T: Real>(system: &System<T>, y: &[T], h: T) -> [(Vec<T>, Vec<T>); 4] {
    let half = T::lit(0.5) * h;
    let y1 = y.to_vec();
    let k1 = system.vector_field(&y1);
    let y2 = axpy(half, &k1, y);
    let k2 = system.vector_field(&y2);
    let y3 = axpy(half, &k2, y);
    let k3 = system.vector_field(&y3);
    let y4 = axpy(h, &k3, y);
    let k4 = system.vector_field(&y4);
    [(y1, k1), (y2, k2), (y3, k3), (y4, k4)]
}

fn rk4_map<T: Real>(system: &System<T>, y: &[T], h: T) -> Vec<T> {
    let [(_, k1), (_, k2), (_, k3), (_, k4)] = rk4_stages(system, y, h);
    let two = T::lit(2.0);
    let sixth = h / T::lit(6.0);
    (0..y.len()).map(|i| y[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i])).collect()
}

/// `I + h Σ bᵢ Dkᵢ` with `Dkᵢ = Df(Yᵢ)(I + h Σ aᵢⱼ Dkⱼ)`.
fn rk4_jacobian<T: Real>(system: &System<T>, y: &[T], h: T) -> Array2<T> {
    let n = y.len();
    let stages = rk4_stages(system, y, h);
    let half = T::lit(0.5) * h;
    let eye = identity::<T>(n);
    let dk1 = system.jacobian(&stages[0].0);
    let dk2 = system.jacobian(&stages[1].0).dot(&(&eye + &(&dk1 * half)));
    let dk3 = system.jacobian(&stages[2].0).dot(&(&eye + &(&dk2 * half)));
    let dk4 = system.jacobian(&stages[3].0).dot(&(&eye + &(&dk3 * h)));
    let two = T::lit(2.0);
    let sum = &dk1 + &(&dk2 * two) + &(&dk3 * two) + &dk4;
    eye + &(sum * (h / T::lit(6.0)))
}

/// `Df(u) f(u)`, the second Taylor coefficient of the exact flow (times two).
pub fn df_f<T: Real>(system: &System<T>, u: &[T]) -> Vec<T> {
    matvec(&system.jacobian(u), &system.vector_field(u))
}

fn checked_step<T: Real>(system: &System<T>, u: &PhaseState<T>, kind: SchemeKind, h: T) -> Result<PhaseState<T>> {
    if u.len() != system.dim() {
        return Err(Error::Dimension { expected: system.dim(), got: u.len() });
    }
    let scheme = SchemeDescriptor::new(kind, h)?;
    let sys = system.for_state(u);
    scheme.supports(&sys)?;
    let (next, _) = scheme.step(&sys, &u.coords)?;
    Ok(PhaseState { coords: next, param: u.param })
}

pub fn forward_euler_step<T: Real>(system: &System<T>, u: &PhaseState<T>, h: T) -> Result<PhaseState<T>> {
    checked_step(system, u, SchemeKind::ForwardEuler, h)
}

pub fn velocity_verlet_step<T: Real>(system: &System<T>, u: &PhaseState<T>, h: T) -> Result<PhaseState<T>> {
    checked_step(system, u, SchemeKind::VelocityVerlet, h)
}

pub fn implicit_euler_step<T: Real>(system: &System<T>, u: &PhaseState<T>, h: T) -> Result<PhaseState<T>> {
    checked_step(system, u, SchemeKind::ImplicitEuler, h)
}

pub fn implicit_midpoint_step<T: Real>(system: &System<T>, u: &PhaseState<T>, h: T) -> Result<PhaseState<T>> {
    checked_step(system, u, SchemeKind::ImplicitMidpoint, h)
}

pub fn rk4_step<T: Real>(system: &System<T>, u: &PhaseState<T>, h: T) -> Result<PhaseState<T>> {
    checked_step(system, u, SchemeKind::Rk4, h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
    /// One entry per step (length `states.len() - 1`).
    pub diagnostics: Vec<StepDiagnostics>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &[T] {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// Runs `n_steps` steps of `scheme` from `u0` at `t = 0`.
pub fn integrate<T: Real>(
    system: &System<T>,
    scheme: &SchemeDescriptor<T>,
    u0: &PhaseState<T>,
    n_steps: usize,
) -> Result<Trajectory<T>> {
    if u0.len() != system.dim() {
        return Err(Error::Dimension { expected: system.dim(), got: u0.len() });
    }
    let sys = system.for_state(u0);
    scheme.supports(&sys)?;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut diagnostics = Vec::with_capacity(n_steps);
    states.push(u0.coords.clone());
    for n in 0..n_steps {
        let (next, diag) = scheme.step(&sys, &states[n]).map_err(|e| match e {
            Error::StepFailure { iterations, residual, last_iterate, .. } => {
                Error::StepFailure { step: Some(n), iterations, residual, last_iterate }
            }
            other => other,
        })?;
        states.push(next);
        diagnostics.push(diag);
    }
    let times = (0..=n_steps).map(|k| T::from_usize_lossy(k) * scheme.h).collect();
    Ok(Trajectory { times, states, diagnostics })
}

/// Velocity Verlet step used for FPUT reference solutions at a given `ω`.
pub fn fput_reference_step<T: Real>(omega: T) -> T {
    if omega.as_f64() <= 50.0 {
        T::lit(2f64.powi(-11))
    } else {
        T::lit(2f64.powi(-15))
    }
}

const REFERENCE_STEP_BUDGET: usize = 1 << 24;

/// High-accuracy approximation of the exact flow `φ_t(u0)`.
///
/// FPUT uses velocity Verlet at its fixed fine step (`tol` is not consulted);
/// every other system doubles the number of RK4 steps until the Richardson
/// estimate `‖y_{2n} − y_n‖/15` drops below `tol`.
pub fn reference_flow<T: Real>(system: &System<T>, u0: &PhaseState<T>, t: T, tol: T) -> Result<PhaseState<T>> {
    if u0.len() != system.dim() {
        return Err(Error::Dimension { expected: system.dim(), got: u0.len() });
    }
    if !(t >= T::zero()) {
        return Err(Error::TimeOutOfRange { t: t.as_f64(), reason: "reference flow needs t ≥ 0".into() });
    }
    if t == T::zero() {
        return Ok(u0.clone());
    }
    let sys = system.for_state(u0);
    let run = |kind: SchemeKind, n: usize| -> Result<Vec<T>> {
        let scheme = SchemeDescriptor::new(kind, t / T::from_usize_lossy(n))?;
        let mut u = u0.coords.clone();
        for _ in 0..n {
            u = scheme.step(&sys, &u)?.0;
        }
        Ok(u)
    };
    if let Some(f) = sys.as_fput() {
        let h = fput_reference_step(f.omega);
        let n = (t / h).ceil().to_usize().unwrap_or(usize::MAX).max(1);
        if n > REFERENCE_STEP_BUDGET * 4 {
            return Err(Error::ToleranceUnreachable { tol: tol.as_f64(), max_steps: REFERENCE_STEP_BUDGET * 4, estimate: f64::NAN });
        }
        return Ok(PhaseState { coords: run(SchemeKind::VelocityVerlet, n)?, param: u0.param });
    }
    let mut n = (t / T::lit(0.05)).ceil().to_usize().unwrap_or(1).max(1);
    let mut coarse = run(SchemeKind::Rk4, n)?;
    let mut estimate = f64::INFINITY;
    while 2 * n <= REFERENCE_STEP_BUDGET {
        let fine = run(SchemeKind::Rk4, 2 * n)?;
        let diff: Vec<T> = fine.iter().zip(&coarse).map(|(&a, &b)| a - b).collect();
        estimate = norm2(&diff).as_f64() / 15.0;
        if estimate < tol.as_f64() {
            return Ok(PhaseState { coords: fine, param: u0.param });
        }
        coarse = fine;
        n *= 2;
    }
    Err(Error::ToleranceUnreachable { tol: tol.as_f64(), max_steps: REFERENCE_STEP_BUDGET, estimate })
}
