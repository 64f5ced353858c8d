//! Adjoint analysis of scheme-residual losses.
//!
//! For a flow map `Φ`, a state `u` and a uniform grid `tₙ = t₀ + n h`,
//! `n = 0..=N+1`, the residual chain is `wₙ = R_h[Φ](u, tₙ)` for `n ≤ N`. With
//! `Pₙ = ∂R/∂next` and `Qₙ = ∂R/∂prev` at `(Φ(tₙ₊₁), Φ(tₙ))`, stationarity of
//! `½ Σₙ ‖wₙ‖²` with respect to `Φ(t_k)` reads
//!
//! ```text
//! P_{k−1}ᵀ w_{k−1} + Q_kᵀ w_k = 0   (1 ≤ k ≤ N),      P_Nᵀ w_N = 0.
//! ```
//!
//! For split schemes `P = DΦ^Im` and `Q = −DΦ^Ex`. When every `Pₙ` is
//! invertible the terminal condition and the backward recurrence force all
//! `wₙ` to zero. Everything here measures these identities on concrete maps;
//! nothing certifies that a trained map is a critical point.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::diffnet::ParameterSet;
use crate::error::{Error, Result};
use crate::flowmap::{eval_batch, FlowMap};
use crate::hamiltonians::{HamiltonianSystem, PhaseState, System};
use crate::integrators::{SchemeDescriptor, SchemeKind};
use crate::linalg::{eigenvalues, identity, matvec, matvec_t, singular_values, solve};
use crate::scalar::{dot, norm2, Real};

/// Step of the ε central difference in [`first_variation_check`].
pub const FD_STEP: f64 = 1e-6;

/// Reciprocal condition number at or below which a transport matrix counts
/// as singular.
pub const SINGULAR_RCOND: f64 = 1e-12;

/// Midpoint margins at or below this are reported as degenerate.
pub const MARGIN_TOL: f64 = 1e-12;

/// Residual indices `0..=last` starting at `t0`; the map is evaluated on
/// `t0 + n h` for `n = 0..=last + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointGrid<T> {
    pub t0: T,
    pub last: usize,
}

impl<T: Real> AdjointGrid<T> {
    pub fn new(t0: T, last: usize) -> Self {
        Self { t0, last }
    }

    pub fn times(&self, h: T) -> Vec<T> {
        (0..=self.last + 1).map(|n| self.t0 + T::from_usize_lossy(n) * h).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointChain<T> {
    pub h: T,
    /// `t₀..t_{N+1}`.
    pub times: Vec<T>,
    /// `Φ(u, tₙ)` on every grid time.
    pub states: Vec<Vec<T>>,
    /// `w₀..w_N`.
    pub residuals: Vec<Vec<T>>,
    pub param: Option<T>,
}

impl<T: Real> AdjointChain<T> {
    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    pub fn max_residual_norm(&self) -> T {
        self.residuals.iter().map(|w| norm2(w)).fold(T::zero(), T::max)
    }

    /// `(Pₙ, Qₙ)` for every residual index.
    pub fn jacobians(&self, scheme: &SchemeDescriptor<T>, system: &System<T>) -> Result<Vec<(Array2<T>, Array2<T>)>> {
        let sys = self.system_for(system);
        (0..self.len())
            .map(|n| scheme.residual_jacobians(&sys, &self.states[n + 1], &self.states[n]))
            .collect()
    }

    /// `g_k = P_{k−1}ᵀ w_{k−1} + Q_kᵀ w_k` for `k = 1..=N+1` (no `Q` term at
    /// `N+1`): the gradient of `½ Σ ‖wₙ‖²` with respect to `Φ(t_k)`.
    pub fn stationarity(&self, jac: &[(Array2<T>, Array2<T>)]) -> Vec<Vec<T>> {
        let n = self.len();
        (1..=n)
            .map(|k| {
                let mut g = matvec_t(&jac[k - 1].0, &self.residuals[k - 1]);
                if k < n {
                    for (gi, qi) in g.iter_mut().zip(matvec_t(&jac[k].1, &self.residuals[k])) {
                        *gi += qi;
                    }
                }
                g
            })
            .collect()
    }

    fn system_for(&self, system: &System<T>) -> System<T> {
        match self.param {
            Some(p) if system.parameter().is_some() => system.with_parameter(p),
            _ => system.clone(),
        }
    }
}

fn map_states<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    system: &System<T>,
    u: &PhaseState<T>,
    times: &[T],
) -> Result<Vec<Vec<T>>> {
    if u.len() != map.state_dim() {
        return Err(Error::Dimension { expected: map.state_dim(), got: u.len() });
    }
    let rows = Array2::from_shape_fn((times.len(), u.len()), |(_, j)| u.coords[j]);
    let eps = u.param.map(|e| vec![e; times.len()]);
    let out = eval_batch(map, params, system, &rows, times, eps.as_deref())?;
    Ok(out.outer_iter().map(|r| r.to_vec()).collect())
}

/// `wₙ = R_h[Φ](u, tₙ)` on the grid.
pub fn residual_sequence<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    scheme: &SchemeDescriptor<T>,
    system: &System<T>,
    u: &PhaseState<T>,
    grid: &AdjointGrid<T>,
) -> Result<AdjointChain<T>> {
    scheme.supports(system)?;
    let times = grid.times(scheme.h);
    let states = map_states(map, params, system, u, &times)?;
    let sys = system.for_state(u);
    let residuals = (0..=grid.last)
        .map(|n| scheme.residual(&sys, &states[n + 1], &states[n]))
        .collect::<Result<Vec<_>>>()?;
    Ok(AdjointChain { h: scheme.h, times, states, residuals, param: u.param })
}

/// A perturbation direction `ψ(u, t)` of the flow map.
pub trait TestDirection<T>: Sync {
    fn eval(&self, u: &[T], t: T) -> Vec<T>;
}

impl<T, F> TestDirection<T> for F
where
    F: Fn(&[T], T) -> Vec<T> + Sync,
{
    fn eval(&self, u: &[T], t: T) -> Vec<T> {
        self(u, t)
    }
}

/// `ψ(u, t) = sin(ω (t − t₀)) (A u + b)`, which vanishes at `t₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct SineDirection<T> {
    pub t0: T,
    pub omega: T,
    pub a: Array2<T>,
    pub b: Vec<T>,
}

impl<T: Real> SineDirection<T> {
    /// Gaussian `A` (scaled by `1/√dim`) and `b`, `ω ∈ [0.5, 2)`.
    pub fn random<R: Rng + ?Sized>(dim: usize, t0: T, rng: &mut R) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let a = Array2::from_shape_fn((dim, dim), |_| T::lit(s * rng.sample::<f64, _>(StandardNormal)));
        let b = (0..dim).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
        Self { t0, omega: T::lit(rng.random_range(0.5..2.0)), a, b }
    }
}

impl<T: Real> TestDirection<T> for SineDirection<T> {
    fn eval(&self, u: &[T], t: T) -> Vec<T> {
        let s = (self.omega * (t - self.t0)).sin();
        matvec(&self.a, u).iter().zip(&self.b).map(|(&x, &b)| s * (x + b)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstVariation {
    /// `d/dε ½ Σₙ ‖R_h[Φ + εψ](u, tₙ)‖²` by central differences.
    pub lhs: f64,
    /// `Σₙ ⟨wₙ, Pₙ ψ(tₙ₊₁) + Qₙ ψ(tₙ)⟩`.
    pub rhs: f64,
    pub gap: f64,
    /// `Σ_k ‖g_k‖ ‖ψ(t_k)‖`, an upper bound for `|rhs|`.
    pub bound: f64,
}

/// Compares the ε-derivative of the discrete loss along `ψ` with the
/// first-variation formula built from the scheme Jacobians.
pub fn first_variation_check<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    scheme: &SchemeDescriptor<T>,
    system: &System<T>,
    u: &PhaseState<T>,
    grid: &AdjointGrid<T>,
    psi: &dyn TestDirection<T>,
) -> Result<FirstVariation> {
    let chain = residual_sequence(map, params, scheme, system, u, grid)?;
    let psis: Vec<Vec<T>> = chain.times.iter().map(|&t| psi.eval(&u.coords, t)).collect();
    if psis.iter().any(|p| p.len() != u.len()) {
        return Err(Error::Dimension { expected: u.len(), got: psis[0].len() });
    }
    if psis[0].iter().any(|v| *v != T::zero()) {
        return Err(Error::InvalidInput("test direction must vanish at the initial time".into()));
    }
    let sys = chain.system_for(system);
    let jac = chain.jacobians(scheme, system)?;

    let rhs = (0..chain.len())
        .map(|n| {
            let (p, q) = &jac[n];
            let d: Vec<T> = matvec(p, &psis[n + 1]).iter().zip(matvec(q, &psis[n])).map(|(&a, b)| a + b).collect();
            dot(&chain.residuals[n], &d).as_f64()
        })
        .sum::<f64>();

    let loss = |e: T| -> Result<f64> {
        let shifted: Vec<Vec<T>> =
            chain.states.iter().zip(&psis).map(|(s, p)| s.iter().zip(p).map(|(&a, &b)| a + e * b).collect()).collect();
        let mut acc = 0.0;
        for n in 0..chain.len() {
            let w = scheme.residual(&sys, &shifted[n + 1], &shifted[n])?;
            acc += 0.5 * dot(&w, &w).as_f64();
        }
        Ok(acc)
    };
    let e = T::lit(FD_STEP);
    let lhs = (loss(e)? - loss(-e)?) / (2.0 * FD_STEP);

    let bound = chain
        .stationarity(&jac)
        .iter()
        .zip(&psis[1..])
        .map(|(g, p)| norm2(g).as_f64() * norm2(p).as_f64())
        .sum();
    let gap = (lhs - rhs).abs() / (lhs.abs() + rhs.abs() + 1e-30);
    Ok(FirstVariation { lhs, rhs, gap, bound })
}

/// `(σ_min, σ_max / σ_min)`.
fn conditioning<T: Real>(a: &Array2<T>) -> (f64, f64) {
    let s = singular_values(a);
    let (hi, lo) = (s[0], *s.last().expect("non-empty matrix"));
    let cond = if lo == 0.0 { f64::INFINITY } else { hi / lo };
    (lo, cond)
}

fn is_singular(cond: f64) -> bool {
    !(cond.is_finite() && 1.0 / cond > SINGULAR_RCOND)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transport<T> {
    /// `w̃_N = w_N`, `w̃_{k−1} = −P_{k−1}⁻ᵀ Q_kᵀ w̃_k`; equals the residual
    /// chain at a critical point.
    pub transported: Vec<Vec<T>>,
    /// `‖g_k‖` for `k = 1..=N+1`.
    pub stationarity: Vec<T>,
    /// Condition number of `Pₙ` for every residual index.
    pub conditions: Vec<f64>,
}

impl<T: Real> Transport<T> {
    pub fn max_stationarity(&self) -> T {
        self.stationarity.iter().copied().fold(T::zero(), T::max)
    }
}

/// Solves the adjoint recurrence backward from the terminal index. Success
/// means every `Pₙ` is invertible, so a critical point of the discrete loss
/// has all `wₙ = 0`.
pub fn backward_transport<T: Real>(
    chain: &AdjointChain<T>,
    scheme: &SchemeDescriptor<T>,
    system: &System<T>,
) -> Result<Transport<T>> {
    let jac = chain.jacobians(scheme, system)?;
    let conditions: Vec<f64> = jac.iter().map(|(p, _)| conditioning(p).1).collect();
    let n = chain.len();
    let mut transported = vec![Vec::new(); n];
    transported[n - 1] = chain.residuals[n - 1].clone();
    for k in (0..n).rev() {
        if is_singular(conditions[k]) {
            return Err(Error::SingularTransport { step: k, condition: conditions[k] });
        }
        if k == 0 {
            break;
        }
        let rhs: Vec<T> = matvec_t(&jac[k].1, &transported[k]).iter().map(|&v| -v).collect();
        let pt = jac[k - 1].0.t().to_owned();
        transported[k - 1] =
            solve(&pt, &rhs).ok_or(Error::SingularTransport { step: k - 1, condition: conditions[k - 1] })?;
    }
    let stationarity = chain.stationarity(&jac).iter().map(|g| norm2(g)).collect();
    Ok(Transport { transported, stationarity, conditions })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepCondition {
    pub step: usize,
    pub t: f64,
    /// Midpoint: `min |1 + (h/2) λᵢ|` over eigenvalues and batch. Split
    /// schemes: minimum singular value of `DΦ^Im`.
    pub min_margin: f64,
    /// Largest condition number of the transport matrix over the batch.
    pub condition: f64,
    /// Eigenvalues `(re, im)` at the batch member with the smallest margin
    /// (midpoint only).
    pub eigenvalues: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub scheme: SchemeKind,
    pub h: f64,
    pub steps: Vec<StepCondition>,
}

#[derive(Serialize)]
struct ConditionRow {
    step: usize,
    min_margin: f64,
    condition: f64,
}

impl ConditionReport {
    pub fn min_margin(&self) -> f64 {
        self.steps.iter().map(|s| s.min_margin).fold(f64::INFINITY, f64::min)
    }

    pub fn degenerate_steps(&self) -> Vec<usize> {
        self.steps.iter().filter(|s| !(s.min_margin > MARGIN_TOL)).map(|s| s.step).collect()
    }

    pub fn passed(&self) -> bool {
        self.degenerate_steps().is_empty()
    }

    /// CSV with columns `step,min_margin,condition`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for s in &self.steps {
            w.serialize(ConditionRow { step: s.step, min_margin: s.min_margin, condition: s.condition })?;
        }
        w.flush()?;
        Ok(())
    }
}

fn step_condition<T: Real>(
    scheme: &SchemeDescriptor<T>,
    system: &System<T>,
    next: &[T],
    prev: &[T],
) -> Result<(f64, f64, Vec<(f64, f64)>)> {
    if scheme.kind == SchemeKind::ImplicitMidpoint {
        let mid: Vec<T> = next.iter().zip(prev).map(|(&a, &b)| T::lit(0.5) * (a + b)).collect();
        let a = system.jacobian(&mid);
        let half = 0.5 * scheme.h.as_f64();
        let eig = eigenvalues(&a);
        let margin = eig.iter().map(|&(re, im)| (1.0 + half * re).hypot(half * im)).fold(f64::INFINITY, f64::min);
        let p = identity::<T>(a.nrows()) - &(a * (T::lit(0.5) * scheme.h));
        return Ok((margin, conditioning(&p).1, eig));
    }
    let (lo, cond) = conditioning(&scheme.implicit_jacobian(system, next)?);
    Ok((lo, cond, Vec::new()))
}

/// Per-step invertibility margins of the adjoint recurrence over a batch of
/// initial states, evaluated in parallel over the batch.
pub fn condition_scan<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    scheme: &SchemeDescriptor<T>,
    system: &System<T>,
    batch: &[PhaseState<T>],
    grid: &AdjointGrid<T>,
) -> Result<ConditionReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    scheme.supports(system)?;
    let times = grid.times(scheme.h);
    let per_state: Vec<Vec<(f64, f64, Vec<(f64, f64)>)>> = batch
        .par_iter()
        .map(|u| {
            let states = map_states(map, params, system, u, &times)?;
            let sys = system.for_state(u);
            (0..=grid.last).map(|n| step_condition(scheme, &sys, &states[n + 1], &states[n])).collect()
        })
        .collect::<Result<_>>()?;
    let steps = (0..=grid.last)
        .map(|n| {
            let mut best = StepCondition {
                step: n,
                t: times[n].as_f64(),
                min_margin: f64::INFINITY,
                condition: 0.0,
                eigenvalues: Vec::new(),
            };
            for rows in &per_state {
                let (m, c, eig) = &rows[n];
                if !(*m >= best.min_margin) {
                    best.min_margin = *m;
                    best.eigenvalues = eig.clone();
                }
                best.condition = best.condition.max(*c);
            }
            best
        })
        .collect();
    Ok(ConditionReport { scheme: scheme.kind, h: scheme.h.as_f64(), steps })
}

/// [`condition_scan`] for the implicit midpoint rule with step `h`: margins
/// `|1 + (h/2) λᵢ|` with `λᵢ` the eigenvalues of `Df` at the averaged state
/// `(Φ(u, t) + Φ(u, t + h)) / 2`.
pub fn midpoint_condition_scan<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    system: &System<T>,
    batch: &[PhaseState<T>],
    grid: &AdjointGrid<T>,
    h: T,
) -> Result<ConditionReport> {
    let scheme = SchemeDescriptor::new(SchemeKind::ImplicitMidpoint, h)?;
    condition_scan(map, params, &scheme, system, batch, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::ParameterSet;
    use crate::flowmap::{IdentityFlow, SchemeIterateFlow, TaylorConfig, TaylorFlowMap};
    use crate::hamiltonians::{make_system, LinearFlow, ParamTable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn harmonic() -> System<f64> {
        make_system("harmonic", &ParamTable::new()).unwrap()
    }

    fn random_map(system: &System<f64>, seed: u64) -> (TaylorFlowMap, ParameterSet<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new(seed);
        let map = TaylorFlowMap::init(TaylorConfig::new(2, 8, 2, 1.0), system, &mut ps, "", &mut rng).unwrap();
        (map, ps)
    }

    #[test]
    fn scheme_iterates_have_zero_chain() {
        let s = harmonic();
        let scheme = SchemeDescriptor::new(SchemeKind::VelocityVerlet, 0.25).unwrap();
        let map = SchemeIterateFlow { scheme, system: s.clone() };
        let u = PhaseState::new(vec![0.4, -0.9]).unwrap();
        let chain = residual_sequence(&map, &ParameterSet::new(0), &scheme, &s, &u, &AdjointGrid::new(0.0, 10)).unwrap();
        assert_eq!(chain.len(), 11);
        assert!(chain.max_residual_norm() < 1e-12);
    }

    #[test]
    fn identity_chain_under_forward_euler() {
        let s = harmonic();
        let scheme = SchemeDescriptor::new(SchemeKind::ForwardEuler, 0.1).unwrap();
        let u = PhaseState::new(vec![0.3, 0.5]).unwrap();
        let chain =
            residual_sequence(&IdentityFlow { dim: 2 }, &ParameterSet::new(0), &scheme, &s, &u, &AdjointGrid::new(0.0, 5))
                .unwrap();
        let f = s.vector_field(&u.coords);
        for w in &chain.residuals {
            assert!((w[0] + 0.1 * f[0]).abs() < 1e-15 && (w[1] + 0.1 * f[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn first_variation_matches_on_every_scheme() {
        let s = harmonic();
        let (map, ps) = random_map(&s, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let psi = SineDirection::random(2, 0.0, &mut rng);
        let u = PhaseState::new(vec![0.7, -0.2]).unwrap();
        for kind in SchemeKind::ALL {
            let scheme = SchemeDescriptor::new(kind, 0.1).unwrap();
            let fv = first_variation_check(&map, &ps, &scheme, &s, &u, &AdjointGrid::new(0.0, 8), &psi).unwrap();
            assert!(fv.gap < 1e-6, "{kind}: {fv:?}");
            assert!(fv.rhs.abs() <= fv.bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn zero_direction_and_bad_direction() {
        let s = harmonic();
        let (map, ps) = random_map(&s, 5);
        let scheme = SchemeDescriptor::new(SchemeKind::ForwardEuler, 0.1).unwrap();
        let u = PhaseState::new(vec![0.1, 0.2]).unwrap();
        let grid = AdjointGrid::new(0.0, 4);
        let zero = |_: &[f64], _: f64| vec![0.0, 0.0];
        let fv = first_variation_check(&map, &ps, &scheme, &s, &u, &grid, &zero).unwrap();
        assert_eq!((fv.lhs, fv.rhs), (0.0, 0.0));
        let bad = |_: &[f64], t: f64| vec![1.0 + t, 0.0];
        assert!(matches!(
            first_variation_check(&map, &ps, &scheme, &s, &u, &grid, &bad),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn explicit_transport_is_never_singular() {
        let s = harmonic();
        let (map, ps) = random_map(&s, 8);
        let u = PhaseState::new(vec![0.5, 0.5]).unwrap();
        for kind in [SchemeKind::ForwardEuler, SchemeKind::Rk4] {
            let scheme = SchemeDescriptor::new(kind, 2.0).unwrap();
            let chain = residual_sequence(&map, &ps, &scheme, &s, &u, &AdjointGrid::new(0.0, 6)).unwrap();
            let tr = backward_transport(&chain, &scheme, &s).unwrap();
            assert!(tr.conditions.iter().all(|&c| (c - 1.0).abs() < 1e-12));
            // P = I, so the recurrence reads w_{k−1} = DΦ^Exᵀ w_k
            let jac = chain.jacobians(&scheme, &s).unwrap();
            let expect = matvec_t(&jac[3].1, &tr.transported[3]);
            assert!(tr.transported[2].iter().zip(&expect).all(|(a, b)| (a + b).abs() < 1e-12));
        }
    }

    #[test]
    fn implicit_euler_singular_step() {
        let lambda = 4.0;
        let s = System::Linear(LinearFlow::scalar(lambda));
        let scheme = SchemeDescriptor::new(SchemeKind::ImplicitEuler, 1.0 / lambda).unwrap();
        let u = PhaseState::new(vec![1.0]).unwrap();
        let chain =
            residual_sequence(&IdentityFlow { dim: 1 }, &ParameterSet::new(0), &scheme, &s, &u, &AdjointGrid::new(0.0, 3))
                .unwrap();
        match backward_transport(&chain, &scheme, &s) {
            Err(Error::SingularTransport { step, condition }) => {
                assert_eq!(step, 3);
                assert!(condition.is_infinite());
            }
            other => panic!("expected a singular step, got {other:?}"),
        }
        let fine = SchemeDescriptor::new(SchemeKind::ImplicitEuler, 0.1).unwrap();
        let chain = residual_sequence(&IdentityFlow { dim: 1 }, &ParameterSet::new(0), &fine, &s, &u, &AdjointGrid::new(0.0, 3))
            .unwrap();
        assert!(backward_transport(&chain, &fine, &s).is_ok());
    }

    #[test]
    fn harmonic_midpoint_margins() {
        let s = harmonic();
        let (map, ps) = random_map(&s, 2);
        let batch: Vec<_> = (0..4).map(|i| PhaseState::new(vec![0.2 * i as f64, 1.0]).unwrap()).collect();
        for h in [0.01, 0.5, 2.0, 7.0] {
            let rep = midpoint_condition_scan(&map, &ps, &s, &batch, &AdjointGrid::new(0.0, 5), h).unwrap();
            let want = (1.0 + h * h / 4.0).sqrt();
            assert!(rep.steps.iter().all(|st| (st.min_margin - want).abs() < 1e-10));
            assert!(rep.passed());
        }
    }

    #[test]
    fn degenerate_midpoint_margin_flagged() {
        let s = System::Linear(LinearFlow::scalar(-1.0));
        let u = vec![PhaseState::new(vec![0.3]).unwrap()];
        let rep =
            midpoint_condition_scan(&IdentityFlow { dim: 1 }, &ParameterSet::new(0), &s, &u, &AdjointGrid::new(0.0, 2), 2.0)
                .unwrap();
        assert_eq!(rep.degenerate_steps(), vec![0, 1, 2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cond.csv");
        rep.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("step,min_margin,condition\n0,0.0,"));
    }
}
