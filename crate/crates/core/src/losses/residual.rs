use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;

use super::collocation::CollocationBatch;
use super::norm::NormSpec;
use crate::diffnet::{ParamGrads, ParameterSet, RowFunction, Tape, Var};
use crate::error::{Error, Result};
use crate::flowmap::{with_param, Field, FlowMap};
use crate::hamiltonians::{PhaseState, System};
use crate::integrators::{SchemeDescriptor, SchemeKind};
use crate::scalar::Real;

/// Rows per tape in batched loss evaluation. Fixed so that the reduction
/// order, and hence the result, does not depend on the thread count.
pub const CHUNK_ROWS: usize = 128;

/// A loss value with its parameter gradient when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval<T> {
    pub value: T,
    pub grads: Option<ParamGrads<T>>,
}

/// Evaluates `term` on consecutive row ranges of size [`CHUNK_ROWS`] in
/// parallel and sums the scalar results in range order.
pub(crate) fn chunked<T, F>(rows: usize, params: &ParameterSet<T>, want_grad: bool, term: F) -> Result<LossEval<T>>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var], std::ops::Range<usize>) -> Result<Var> + Sync,
{
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    let ranges: Vec<_> = (0..rows).step_by(CHUNK_ROWS).map(|s| s..(s + CHUNK_ROWS).min(rows)).collect();
    let parts: Vec<Result<(T, Option<ParamGrads<T>>)>> = ranges
        .into_par_iter()
        .map(|r| {
            let mut tape = Tape::new();
            let vars = params.load(&mut tape);
            let root = term(&mut tape, &vars, r)?;
            let value = tape.scalar(root);
            let grads = if want_grad { Some(ParamGrads::from_tape(params, tape.grad(root)?)) } else { None };
            Ok((value, grads))
        })
        .collect();
    let mut value = T::zero();
    let mut grads = want_grad.then(|| ParamGrads::zeros_like(params));
    for p in parts {
        let (v, g) = p?;
        value += v;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.add_assign(&g);
        }
    }
    Ok(LossEval { value, grads })
}

struct SchemePart<T> {
    scheme: SchemeDescriptor<T>,
    system: System<T>,
    implicit: bool,
}

impl<T: Real> RowFunction<T> for SchemePart<T> {
    fn value(&self, x: &[T], p: Option<T>) -> Vec<T> {
        let s = with_param(&self.system, p);
        let r = if self.implicit { self.scheme.implicit_map(&s, x) } else { self.scheme.explicit_map(&s, x) };
        r.expect("scheme support checked before taping")
    }

    fn jacobian(&self, x: &[T], p: Option<T>) -> Array2<T> {
        let s = with_param(&self.system, p);
        let r = if self.implicit { self.scheme.implicit_jacobian(&s, x) } else { self.scheme.explicit_jacobian(&s, x) };
        r.expect("scheme support checked before taping")
    }
}

fn row_params<T: Real>(system: &System<T>, eps: Option<&[T]>) -> Option<Vec<T>> {
    eps.filter(|_| system.parameter().is_some()).map(|e| e.to_vec())
}

/// `R(next, prev)` on the tape: `Φ^Im(next) − Φ^Ex(prev)`, or
/// `next − prev − h f((next + prev)/2)` for the midpoint rule.
pub fn scheme_update_residual<T: Real>(
    tape: &mut Tape<T>,
    scheme: &SchemeDescriptor<T>,
    system: &System<T>,
    next: Var,
    prev: Var,
    eps: Option<&[T]>,
) -> Var {
    let rp = row_params(system, eps);
    match scheme.kind {
        SchemeKind::ImplicitMidpoint => {
            let s = tape.add(next, prev);
            let mid = tape.scale(s, T::lit(0.5));
            let f = tape.row_map(mid, Arc::new(Field(system.clone())), rp);
            let hf = tape.scale(f, scheme.h);
            let d = tape.sub(next, prev);
            tape.sub(d, hf)
        }
        kind => {
            let part = |implicit| -> Arc<dyn RowFunction<T>> {
                Arc::new(SchemePart { scheme: scheme.clone(), system: system.clone(), implicit })
            };
            let im = if kind.is_explicit() { next } else { tape.row_map(next, part(true), rp.clone()) };
            let ex = if kind == SchemeKind::ImplicitEuler { prev } else { tape.row_map(prev, part(false), rp) };
            tape.sub(im, ex)
        }
    }
}

/// Taped scheme residual `R_h[Φ](u, t)` for a batch of rows.
#[allow(clippy::too_many_arguments)]
pub fn scheme_residual_forward<T: Real>(
    tape: &mut Tape<T>,
    vars: &[Var],
    map: &dyn FlowMap<T>,
    scheme: &SchemeDescriptor<T>,
    system: &System<T>,
    u: Var,
    t: Var,
    eps: Option<&[T]>,
) -> Result<Var> {
    let h = tape.scalar_constant(scheme.h);
    let t_next = tape.add(t, h);
    let next = map.forward(tape, vars, system, u, t_next, eps)?;
    let prev = map.forward(tape, vars, system, u, t, eps)?;
    Ok(scheme_update_residual(tape, scheme, system, next, prev, eps))
}

/// Taped exact residual `∂ₜΦ(u, t) − f(Φ(u, t))`; `t` must carry a unit
/// forward tangent.
pub fn exact_residual_forward<T: Real>(
    tape: &mut Tape<T>,
    vars: &[Var],
    map: &dyn FlowMap<T>,
    system: &System<T>,
    u: Var,
    t: Var,
    eps: Option<&[T]>,
) -> Result<Var> {
    let phi = map.forward(tape, vars, system, u, t, eps)?;
    let dphi = tape.tangent_of(phi)?;
    let f = tape.row_map(phi, Arc::new(Field(system.clone())), row_params(system, eps));
    Ok(tape.sub(dphi, f))
}

fn single_row<T: Real>(tape: &mut Tape<T>, u: &PhaseState<T>, t: T, unit_tangent: bool) -> (Var, Var) {
    let uv = tape.constant(Array2::from_shape_vec((1, u.len()), u.coords.clone()).expect("row"));
    let tv = tape.input(Array2::from_elem((1, 1), t), unit_tangent.then(|| Array2::from_elem((1, 1), T::one())));
    (uv, tv)
}

fn check_state<T: Real>(map: &dyn FlowMap<T>, u: &PhaseState<T>) -> Result<()> {
    if u.len() != map.state_dim() {
        return Err(Error::Dimension { expected: map.state_dim(), got: u.len() });
    }
    if map.needs_epsilon() && u.param.is_none() {
        return Err(Error::MissingEpsilon);
    }
    Ok(())
}

/// `Φ^Im_h(Φ(u, t+h)) − Φ^Ex_h(Φ(u, t))` at a single point.
pub fn scheme_residual<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    scheme: &SchemeDescriptor<T>,
    system: &System<T>,
    u: &PhaseState<T>,
    t: T,
) -> Result<Vec<T>> {
    check_state(map, u)?;
    scheme.supports(system)?;
    let mut tape = Tape::new();
    let vars = params.load(&mut tape);
    let (uv, tv) = single_row(&mut tape, u, t, false);
    let eps = u.param.map(|e| vec![e]);
    let r = scheme_residual_forward(&mut tape, &vars, map, scheme, system, uv, tv, eps.as_deref())?;
    Ok(tape.value(r).row(0).to_vec())
}

/// `∂ₜΦ(u, t) − f(Φ(u, t))` at a single point, with `∂ₜ` from forward-mode
/// differentiation.
pub fn exact_residual<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    system: &System<T>,
    u: &PhaseState<T>,
    t: T,
) -> Result<Vec<T>> {
    check_state(map, u)?;
    let mut tape = Tape::new();
    let vars = params.load(&mut tape);
    let (uv, tv) = single_row(&mut tape, u, t, true);
    let eps = u.param.map(|e| vec![e]);
    let r = exact_residual_forward(&mut tape, &vars, map, system, uv, tv, eps.as_deref())?;
    Ok(tape.value(r).row(0).to_vec())
}

fn check_batch<T: Real>(map: &dyn FlowMap<T>, batch: &CollocationBatch<T>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.points.ncols() != map.state_dim() {
        return Err(Error::Dimension { expected: map.state_dim(), got: batch.points.ncols() });
    }
    if map.needs_epsilon() && batch.eps.is_none() {
        return Err(Error::MissingEpsilon);
    }
    Ok(())
}

/// `(h/2) · mean_u Σₙ ‖R_h[Φ](u, tₙ)‖²` over the batch.
pub fn residual_loss<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    scheme: &SchemeDescriptor<T>,
    system: &System<T>,
    batch: &CollocationBatch<T>,
    norm: &NormSpec,
    want_grad: bool,
) -> Result<LossEval<T>> {
    check_batch(map, batch)?;
    scheme.supports(system)?;
    let weights = norm.column_weights::<T>(map.state_dim())?;
    let scale = T::lit(0.5) * scheme.h / T::from_usize_lossy(batch.n_points());
    chunked(batch.len(), params, want_grad, |tape, vars, range| {
        let (u, t, e) = batch.pairs(range);
        let uv = tape.constant(u);
        let tv = tape.constant(Array2::from_shape_vec((t.len(), 1), t).expect("column"));
        let r = scheme_residual_forward(tape, vars, map, scheme, system, uv, tv, e.as_deref())?;
        let s = tape.sum_squares(r, weights.as_deref());
        Ok(tape.scale(s, scale))
    })
}

/// `½ · mean_u Σₙ ‖∂ₜΦ(u, tₙ) − f(Φ(u, tₙ))‖²` over the batch.
pub fn exact_residual_loss<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    system: &System<T>,
    batch: &CollocationBatch<T>,
    norm: &NormSpec,
    want_grad: bool,
) -> Result<LossEval<T>> {
    check_batch(map, batch)?;
    let weights = norm.column_weights::<T>(map.state_dim())?;
    let scale = T::lit(0.5) / T::from_usize_lossy(batch.n_points());
    chunked(batch.len(), params, want_grad, |tape, vars, range| {
        let (u, t, e) = batch.pairs(range);
        let n = t.len();
        let uv = tape.constant(u);
        let tv = tape.input(
            Array2::from_shape_vec((n, 1), t).expect("column"),
            Some(Array2::from_elem((n, 1), T::one())),
        );
        let r = exact_residual_forward(tape, vars, map, system, uv, tv, e.as_deref())?;
        let s = tape.sum_squares(r, weights.as_deref());
        Ok(tape.scale(s, scale))
    })
}
