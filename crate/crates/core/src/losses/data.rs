use ndarray::Array2;
use rayon::prelude::*;

use super::collocation::CollocationBatch;
use super::norm::NormSpec;
use super::residual::{chunked, LossEval};
use crate::diffnet::{ParameterSet, Tape, Var};
use crate::error::{Error, Result};
use crate::flowmap::{t0_centered_forward, FlowMap};
use crate::hamiltonians::{HamiltonianSystem, PhaseState, System};
use crate::integrators::{reference_flow, SchemeDescriptor};
use crate::scalar::Real;

/// Inputs `u` with reference states `φ_{k·T₀}(u)` for `k = 1..=S`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset<T> {
    pub t0: T,
    pub inputs: Array2<T>,
    /// `targets[k - 1]` holds `φ_{k·T₀}` for every input row.
    pub targets: Vec<Array2<T>>,
    pub eps: Option<Vec<T>>,
}

impl<T: Real> TrajectoryDataset<T> {
    /// Builds targets with the reference integrator, one `T₀` segment at a time.
    pub fn from_reference(system: &System<T>, inputs: &[PhaseState<T>], t0: T, steps: usize, tol: T) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let d = system.dim();
        let rows: Vec<Result<Vec<PhaseState<T>>>> = inputs
            .par_iter()
            .map(|u| {
                let mut out = Vec::with_capacity(steps);
                let mut cur = u.clone();
                for _ in 0..steps {
                    let sys = system.for_state(&cur);
                    cur = PhaseState { param: cur.param, ..reference_flow(&sys, &cur, t0, tol)? };
                    out.push(cur.clone());
                }
                Ok(out)
            })
            .collect();
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let to_array = |rows: Vec<&[T]>| {
            let flat: Vec<T> = rows.iter().flat_map(|r| r.to_vec()).collect();
            Array2::from_shape_vec((inputs.len(), d), flat)
                .map_err(|_| Error::Dimension { expected: d, got: inputs[0].len() })
        };
        let x = to_array(inputs.iter().map(|u| u.coords.as_slice()).collect())?;
        let targets = (0..steps)
            .map(|k| to_array(rows.iter().map(|r| r[k].coords.as_slice()).collect()))
            .collect::<Result<Vec<_>>>()?;
        let eps = inputs.iter().map(|u| u.param).collect::<Option<Vec<_>>>();
        Ok(Self { t0, inputs: x, targets, eps })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Rows in `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            t0: self.t0,
            inputs: self.inputs.select(ndarray::Axis(0), idx),
            targets: self.targets.iter().map(|t| t.select(ndarray::Axis(0), idx)).collect(),
            eps: self.eps.as_ref().map(|e| idx.iter().map(|&i| e[i]).collect()),
        }
    }
}

/// `1/(2S) Σ_k mean_u ‖Φᵏ_{T₀}(u) − φ_{k·T₀}(u)‖²`.
pub fn data_loss<T: Real>(
    map: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    system: &System<T>,
    data: &TrajectoryDataset<T>,
    steps: usize,
    norm: &NormSpec,
    want_grad: bool,
) -> Result<LossEval<T>> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("data loss needs S ≥ 1".into()));
    }
    if data.targets.len() < steps {
        return Err(Error::MissingTargets(data.targets.len() + 1));
    }
    if data.inputs.ncols() != map.state_dim() {
        return Err(Error::Dimension { expected: map.state_dim(), got: data.inputs.ncols() });
    }
    if map.needs_epsilon() && data.eps.is_none() {
        return Err(Error::MissingEpsilon);
    }
    let weights = norm.column_weights::<T>(map.state_dim())?;
    let scale = T::one() / (T::lit(2.0) * T::from_usize_lossy(steps) * T::from_usize_lossy(data.len()));
    chunked(data.len(), params, want_grad, |tape, vars, range| {
        let rows = range.len();
        let eps = data.eps.as_ref().map(|e| e[range.clone()].to_vec());
        let u0 = data.inputs.slice(ndarray::s![range.clone(), ..]).to_owned();
        let mut u = tape.constant(u0);
        let t = tape.constant(Array2::from_elem((rows, 1), data.t0));
        let mut total: Option<Var> = None;
        for k in 0..steps {
            u = map.forward(tape, vars, system, u, t, eps.as_deref())?;
            let target = tape.constant(data.targets[k].slice(ndarray::s![range.clone(), ..]).to_owned());
            let d = tape.sub(u, target);
            let s = tape.sum_squares(d, weights.as_deref());
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s),
            });
        }
        Ok(tape.scale(total.expect("S ≥ 1"), scale))
    })
}

/// `Φ̃(u, t) = Φ(Φ_{T₀}(u), t − T₀)`, defined for `t ≥ T₀`.
pub struct T0Centered<'a, T> {
    pub fixed: &'a dyn FlowMap<T>,
    pub t0: T,
    pub var: &'a dyn FlowMap<T>,
}

impl<T: Real> FlowMap<T> for T0Centered<'_, T> {
    fn state_dim(&self) -> usize {
        self.var.state_dim()
    }

    fn needs_epsilon(&self) -> bool {
        self.fixed.needs_epsilon() || self.var.needs_epsilon()
    }

    fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        system: &System<T>,
        u: Var,
        t: Var,
        eps: Option<&[T]>,
    ) -> Result<Var> {
        t0_centered_forward(self.fixed, self.t0, self.var, tape, vars, system, u, t, eps)
    }
}

/// Data loss of the fixed map plus the residual loss of the T₀-centered map,
/// with the collocation times shifted to start at `T₀`.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<T: Real>(
    fixed: &dyn FlowMap<T>,
    var: &dyn FlowMap<T>,
    params: &ParameterSet<T>,
    scheme: &SchemeDescriptor<T>,
    system: &System<T>,
    data: &TrajectoryDataset<T>,
    steps: usize,
    batch: &CollocationBatch<T>,
    norm: &NormSpec,
    want_grad: bool,
) -> Result<LossEval<T>> {
    let d = data_loss(fixed, params, system, data, steps, norm, want_grad)?;
    let centered = T0Centered { fixed, t0: data.t0, var };
    let shifted = batch.shifted(data.t0);
    let r = super::residual::residual_loss(&centered, params, scheme, system, &shifted, norm, want_grad)?;
    let grads = match (d.grads, r.grads) {
        (Some(mut a), Some(b)) => {
            a.add_assign(&b);
            Some(a)
        }
        _ => None,
    };
    Ok(LossEval { value: d.value + r.value, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmap::{eval_map, IdentityFlow, RotationFlow};
    use crate::hamiltonians::{make_system, ParamTable};

    #[test]
    fn exact_targets_give_zero_and_mse_for_one_step() {
        let s: System<f64> = make_system("harmonic", &ParamTable::new()).unwrap();
        let ps = ParameterSet::new(0);
        let pts: Vec<_> = [[0.0, 1.0], [0.5, -0.2], [1.0, 1.0]].iter().map(|p| PhaseState::new(p.to_vec()).unwrap()).collect();
        let data = TrajectoryDataset::from_reference(&s, &pts, 0.3, 3, 1e-12).unwrap();
        let l = data_loss(&RotationFlow, &ps, &s, &data, 3, &NormSpec::Plain, false).unwrap();
        assert!(l.value < 1e-20, "{}", l.value);
        let id = IdentityFlow { dim: 2 };
        let l = data_loss(&id, &ps, &s, &data, 1, &NormSpec::Plain, false).unwrap();
        let mut mse = 0.0;
        for (i, u) in pts.iter().enumerate() {
            let out = eval_map(&id, &ps, &s, u, 0.3).unwrap();
            mse += (0..2).map(|j| (out.coords[j] - data.targets[0][[i, j]]).powi(2)).sum::<f64>();
        }
        assert!((l.value - 0.5 * mse / 3.0).abs() <= 1e-16);
        assert!(matches!(data_loss(&id, &ps, &s, &data, 4, &NormSpec::Plain, false), Err(Error::MissingTargets(4))));
    }
}
