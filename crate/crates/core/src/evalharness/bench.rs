use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{energy_error, traj_error, Record};
use crate::diffnet::ParameterSet;
use crate::error::{Error, Result};
use crate::flowmap::{rollout_batch, FlowMap};
use crate::hamiltonians::{PhaseState, System};
use crate::integrators::SchemeDescriptor;
use crate::scalar::Real;

/// Something that advances a batch of states to a horizon.
pub enum Solver<'a, T: Real> {
    Scheme(SchemeDescriptor<T>),
    /// Repeated application of `Φ(·, dt)`.
    FlowMap { name: String, map: &'a dyn FlowMap<T>, params: &'a ParameterSet<T>, dt: T },
}

fn steps_to<T: Real>(horizon: f64, step: T) -> usize {
    ((horizon / step.as_f64()).round() as usize).max(1)
}

impl<T: Real> Solver<'_, T> {
    pub fn name(&self) -> String {
        match self {
            Solver::Scheme(s) => format!("{}(h={})", s.kind, s.h),
            Solver::FlowMap { name, dt, .. } => format!("{name}(dt={dt})"),
        }
    }

    /// States reached at `horizon`, rounded to a whole number of steps.
    pub fn run(&self, system: &System<T>, batch: &[PhaseState<T>], horizon: f64) -> Result<Vec<Vec<T>>> {
        match self {
            Solver::Scheme(scheme) => {
                let n = steps_to(horizon, scheme.h);
                batch
                    .par_iter()
                    .map(|u| {
                        let sys = system.for_state(u);
                        scheme.supports(&sys)?;
                        let mut x = u.coords.clone();
                        for _ in 0..n {
                            x = scheme.step(&sys, &x)?.0;
                        }
                        Ok(x)
                    })
                    .collect()
            }
            Solver::FlowMap { map, params, dt, .. } => {
                let dim = batch[0].len();
                let u0 = Array2::from_shape_fn((batch.len(), dim), |(i, j)| batch[i].coords[j]);
                let eps: Option<Vec<T>> = batch.iter().map(|u| u.param).collect();
                let out = rollout_batch(*map, params, system, &u0, *dt, steps_to(horizon, *dt), eps.as_deref())?;
                Ok(out.last().expect("rollout keeps the start").outer_iter().map(|r| r.to_vec()).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSettings {
    /// Evaluation horizon `T_s` of one round.
    pub t_s: f64,
    /// Timed runs after one discarded warm-up run.
    pub repeats: usize,
    /// Rollouts cover `rounds · T_s`.
    pub rounds: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { t_s: 1.0, repeats: 3, rounds: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub solver: String,
    pub batch: usize,
    pub horizon: f64,
    /// Mean wall time of one batch rollout.
    pub wall_ms: f64,
    pub per_trajectory_ms: f64,
    /// Batch means at the horizon.
    pub traj_err: f64,
    pub h_err: f64,
    pub threads: usize,
}

#[derive(Serialize)]
struct BenchRow<'a> {
    solver: &'a str,
    batch: usize,
    #[serde(rename = "T")]
    horizon: f64,
    wall_ms: f64,
    traj_err: f64,
    #[serde(rename = "H_err")]
    h_err: f64,
}

impl Record for Vec<BenchmarkReport> {
    fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self {
            w.serialize(BenchRow {
                solver: &r.solver,
                batch: r.batch,
                horizon: r.horizon,
                wall_ms: r.wall_ms,
                traj_err: r.traj_err,
                h_err: r.h_err,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Times every solver on the batch and scores its end states against
/// `reference` (states at `rounds · t_s`, one per batch entry).
pub fn benchmark<T: Real>(
    solvers: &[Solver<'_, T>],
    system: &System<T>,
    batch: &[PhaseState<T>],
    reference: &[Vec<T>],
    settings: &BenchSettings,
) -> Result<Vec<BenchmarkReport>> {
    if solvers.is_empty() {
        return Ok(Vec::new());
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if reference.len() != batch.len() {
        return Err(Error::Dimension { expected: batch.len(), got: reference.len() });
    }
    if settings.repeats == 0 || settings.rounds == 0 || !(settings.t_s > 0.0) {
        return Err(Error::InvalidParameter("benchmark needs t_s > 0 and positive repeats and rounds".into()));
    }
    let horizon = settings.t_s * settings.rounds as f64;
    let n = batch.len() as f64;
    solvers
        .iter()
        .map(|solver| {
            let mut end = solver.run(system, batch, horizon)?;
            let start = Instant::now();
            for _ in 0..settings.repeats {
                end = solver.run(system, batch, horizon)?;
            }
            let wall_ms = start.elapsed().as_secs_f64() * 1e3 / settings.repeats as f64;
            let mut te = 0.0;
            let mut he = 0.0;
            for ((p, r), u) in end.iter().zip(reference).zip(batch) {
                te += traj_error(p, r)?.as_f64();
                he += energy_error(&system.for_state(u), p, r)?.as_f64();
            }
            Ok(BenchmarkReport {
                solver: solver.name(),
                batch: batch.len(),
                horizon,
                wall_ms,
                per_trajectory_ms: wall_ms / n,
                traj_err: te / n,
                h_err: he / n,
                threads: rayon::current_num_threads(),
            })
        })
        .collect()
}
