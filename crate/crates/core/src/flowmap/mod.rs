//! Trainable flow maps and analytic stand-ins.
//!
//! A flow map is an architecture (this module) plus a [`ParameterSet`]
//! holding its weights. Architectures register their arrays in a parameter
//! set at construction, so several maps can share one set and be trained
//! jointly.

mod fields;
mod fixed;
mod model;
mod surrogates;
mod taylor;

use ndarray::Array2;

pub use fields::{Field, FieldDf};
pub(crate) use fields::with_param;
pub use fixed::{FixedConfig, FixedStepFlowMap};
pub use model::{Architecture, ArchitectureDescriptor, Model, ARCHITECTURE_FILE, PARAMS_FILE};
pub use surrogates::{IdentityFlow, RotationFlow, SchemeIterateFlow};
pub use taylor::{TaylorConfig, TaylorFlowMap, TaylorOrders};

use crate::diffnet::{ParameterSet, Tape, Var};
use crate::error::{Error, Result};
use crate::hamiltonians::{PhaseState, System};
use crate::scalar::Real;

pub trait FlowMap<T: Real>: Send + Sync {
    /// Phase-space dimension the map acts on.
    fn state_dim(&self) -> usize;

    /// Whether a per-sample epsilon must be supplied.
    fn needs_epsilon(&self) -> bool {
        false
    }

    /// Taped batch evaluation `Φ(u, t)`.
    ///
    /// `u` is `R × 2d`, `t` is `R × 1` (its tangent, when present, is carried
    /// through so that `∂ₜΦ` is available), `vars` come from loading the
    /// parameter set onto the tape.
    fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        system: &System<T>,
        u: Var,
        t: Var,
        eps: Option<&[T]>,
    ) -> Result<Var>;
}

fn check_eps<T: Real>(map: &dyn FlowMap<T>, eps: Option<&[T]>, rows: usize) -> Result<()> {
    match eps {
        None if map.needs_epsilon() => Err(Error::MissingEpsilon),
        Some(e) if e.len() != rows => Err(Error::Dimension { expected: rows, got: e.len() }),
        _ => Ok(()),
    }
}

/// Untaped batch evaluation; rows of `u` pair with entries of `t`.
pub fn eval_batch<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    system: &System<T>,
    u: &Array2<T>,
    t: &[T],
    eps: Option<&[T]>,
) -> Result<Array2<T>> {
    if u.ncols() != map.state_dim() {
        return Err(Error::Dimension { expected: map.state_dim(), got: u.ncols() });
    }
    if t.len() != u.nrows() {
        return Err(Error::Dimension { expected: u.nrows(), got: t.len() });
    }
    check_eps(map, eps, u.nrows())?;
    let mut tape = Tape::new();
    let vars = params.load(&mut tape);
    let uv = tape.constant(u.clone());
    let tv = tape.constant(Array2::from_shape_vec((t.len(), 1), t.to_vec()).expect("column"));
    let out = map.forward(&mut tape, &vars, system, uv, tv, eps)?;
    Ok(tape.value(out).clone())
}

/// `Φ(u, t)` for a single state; the state's parameter slot supplies epsilon.
pub fn eval_map<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    system: &System<T>,
    u: &PhaseState<T>,
    t: T,
) -> Result<PhaseState<T>> {
    if !(t >= T::zero()) {
        return Err(Error::TimeOutOfRange { t: t.as_f64(), reason: "flow maps are evaluated at t ≥ 0".into() });
    }
    eval_map_signed(map, params, system, u, t)
}

/// As [`eval_map`] but also accepts `t < 0`, for finite-difference probes of
/// the time derivatives at `t = 0`.
pub fn eval_map_signed<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    system: &System<T>,
    u: &PhaseState<T>,
    t: T,
) -> Result<PhaseState<T>> {
    if u.len() != map.state_dim() {
        return Err(Error::Dimension { expected: map.state_dim(), got: u.len() });
    }
    let eps = u.param.map(|e| vec![e]);
    let row = Array2::from_shape_vec((1, u.len()), u.coords.clone()).expect("row");
    let out = eval_batch(map, params, system, &row, &[t], eps.as_deref())?;
    Ok(PhaseState { coords: out.row(0).to_vec(), param: u.param })
}

/// `Φ^{(k)}(u0, Δt)` for `k = 1..=K`.
pub fn rollout_compose<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    system: &System<T>,
    u0: &PhaseState<T>,
    dt: T,
    k_max: usize,
) -> Result<Vec<PhaseState<T>>> {
    let mut out = Vec::with_capacity(k_max);
    let mut u = u0.clone();
    for k in 1..=k_max {
        u = eval_map(map, params, system, &u, dt).map_err(|e| Error::Rollout { k, source: Box::new(e) })?;
        if u.coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Rollout { k, source: Box::new(Error::InvalidInput("non-finite state".into())) });
        }
        out.push(u.clone());
    }
    Ok(out)
}

/// Batched rollout: every row of `u0` is advanced `k_max` times; returns the
/// `k_max + 1` batch snapshots including the start.
pub fn rollout_batch<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    system: &System<T>,
    u0: &Array2<T>,
    dt: T,
    k_max: usize,
    eps: Option<&[T]>,
) -> Result<Vec<Array2<T>>> {
    let ts = vec![dt; u0.nrows()];
    let mut out = Vec::with_capacity(k_max + 1);
    out.push(u0.clone());
    for k in 1..=k_max {
        let next = eval_batch(map, params, system, &out[k - 1], &ts, eps)
            .map_err(|e| Error::Rollout { k, source: Box::new(e) })?;
        out.push(next);
    }
    Ok(out)
}

/// `Φ(Φ_{T₀}(u), t − T₀)`. The fixed map is evaluated at `t = T₀`.
#[allow(clippy::too_many_arguments)]
pub fn t0_centered_eval<T: Real>(
    fixed: &dyn FlowMap<T>,
    t0: T,
    var: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    system: &System<T>,
    u: &PhaseState<T>,
    t: T,
) -> Result<PhaseState<T>> {
    if !(t >= t0) {
        return Err(Error::TimeOutOfRange { t: t.as_f64(), reason: format!("T0-centered map needs t ≥ T0 = {t0}") });
    }
    let mid = eval_map(fixed, params, system, u, t0)?;
    eval_map(var, params, system, &mid, t - t0)
}

/// Taped version of [`t0_centered_eval`] for a batch.
#[allow(clippy::too_many_arguments)]
pub fn t0_centered_forward<T: Real>(
    fixed: &dyn FlowMap<T>,
    t0: T,
    var: &dyn FlowMap<T>,
    tape: &mut Tape<T>,
    vars: &[Var],
    system: &System<T>,
    u: Var,
    t: Var,
    eps: Option<&[T]>,
) -> Result<Var> {
    let rows = tape.shape(u).0;
    let t0_col = tape.constant(Array2::from_elem((rows, 1), t0));
    let mid = fixed.forward(tape, vars, system, u, t0_col, eps)?;
    let shifted = {
        let c = tape.scalar_constant(-t0);
        tape.add(t, c)
    };
    var.forward(tape, vars, system, mid, shifted, eps)
}
