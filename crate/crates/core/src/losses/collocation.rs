use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TimeMode {
    /// `n` equally spaced points on `[0, t_max]`, shifted by `τ`.
    Grid { n: usize, t_max: f64, tau: Tau },
    /// `n` independent uniform draws on `[0, t_max]` per phase point.
    Uniform { n: usize, t_max: f64 },
    /// A single time `t0`.
    Fixed { t0: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tau {
    Fixed(f64),
    /// Fresh `τ ~ U[0, h)` per batch.
    Uniform { h: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PhaseMode {
    /// Axis-aligned box.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Coordinates in `indices` drawn with uniform direction and radius in
    /// `[r_min, r_max]`; all others uniform in the box.
    Shell { indices: Vec<usize>, r_min: f64, r_max: f64, lo: Vec<f64>, hi: Vec<f64> },
    /// A supplied point set.
    Samples {
        #[serde(skip)]
        points: Arc<Vec<Vec<f64>>>,
    },
}

/// Grows the time window during training: `t_max(k) = min(t_max, t_start + t_step·⌊k/every⌋)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveSchedule {
    pub t_start: f64,
    pub t_step: f64,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocationSpec {
    pub time: TimeMode,
    pub phase: PhaseMode,
    /// Phase points per batch; for sample sets, 0 or a size at least the set
    /// size means "all points, in order".
    pub batch: usize,
    /// Uniform range of ε per point, for ε-conditioned maps.
    pub epsilon: Option<(f64, f64)>,
    pub progressive: Option<ProgressiveSchedule>,
}

/// Sampled points with their collocation times (`times` is `points × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationBatch<T> {
    pub points: Array2<T>,
    pub times: Array2<T>,
    pub eps: Option<Vec<T>>,
}

impl<T: Real> CollocationBatch<T> {
    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.times.ncols()
    }

    /// Number of (point, time) pairs.
    pub fn len(&self) -> usize {
        self.points.nrows() * self.times.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened pairs `k ↦ (k / n, k % n)` as row-major arrays restricted to
    /// `range`: states (`len × d`), times, and per-row ε.
    pub fn pairs(&self, range: std::ops::Range<usize>) -> (Array2<T>, Vec<T>, Option<Vec<T>>) {
        let n = self.n_times();
        let d = self.points.ncols();
        let mut u = Array2::zeros((range.len(), d));
        let mut t = Vec::with_capacity(range.len());
        let mut e = self.eps.as_ref().map(|_| Vec::with_capacity(range.len()));
        for (r, k) in range.enumerate() {
            let (i, j) = (k / n, k % n);
            u.row_mut(r).assign(&self.points.row(i));
            t.push(self.times[[i, j]]);
            if let (Some(e), Some(src)) = (e.as_mut(), self.eps.as_ref()) {
                e.push(src[i]);
            }
        }
        (u, t, e)
    }

    /// Same batch with every time shifted by `dt`.
    pub fn shifted(&self, dt: T) -> Self {
        Self { points: self.points.clone(), times: self.times.mapv(|t| t + dt), eps: self.eps.clone() }
    }
}

impl CollocationSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        match &self.time {
            TimeMode::Grid { n, t_max, tau } => {
                if *n < 2 {
                    return bad(format!("grid needs at least 2 points, got {n}"));
                }
                if !(t_max.is_finite() && *t_max > 0.0) {
                    return bad(format!("time window must be positive, got {t_max}"));
                }
                match *tau {
                    Tau::Fixed(x) if !(x >= 0.0 && x.is_finite()) => return bad(format!("shift must be ≥ 0, got {x}")),
                    Tau::Uniform { h } if !(h > 0.0 && h.is_finite()) => return bad(format!("shift range must be positive, got {h}")),
                    _ => {}
                }
            }
            TimeMode::Uniform { n, t_max } => {
                if *n == 0 || !(t_max.is_finite() && *t_max > 0.0) {
                    return bad("uniform time mode needs n ≥ 1 and a positive window".into());
                }
            }
            TimeMode::Fixed { t0 } => {
                if !(t0.is_finite() && *t0 >= 0.0) {
                    return bad(format!("fixed time must be ≥ 0, got {t0}"));
                }
            }
        }
        let check_box = |lo: &Vec<f64>, hi: &Vec<f64>| {
            if lo.len() != dim || hi.len() != dim {
                return Err(Error::Dimension { expected: dim, got: lo.len().min(hi.len()) });
            }
            if lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                return Err(Error::InvalidParameter("box bounds must satisfy lo ≤ hi".into()));
            }
            Ok(())
        };
        match &self.phase {
            PhaseMode::Box { lo, hi } => check_box(lo, hi)?,
            PhaseMode::Shell { indices, r_min, r_max, lo, hi } => {
                check_box(lo, hi)?;
                if !(0.0 <= *r_min && r_min < r_max) {
                    return bad(format!("shell radii must satisfy 0 ≤ r_min < r_max, got [{r_min}, {r_max}]"));
                }
                if indices.is_empty() || indices.iter().any(|&i| i >= dim) {
                    return bad("shell indices out of range".into());
                }
            }
            PhaseMode::Samples { points } => {
                if points.is_empty() {
                    return Err(Error::EmptyBatch);
                }
                if let Some(p) = points.iter().find(|p| p.len() != dim) {
                    return Err(Error::Dimension { expected: dim, got: p.len() });
                }
            }
        }
        if let Some((a, b)) = self.epsilon {
            if !(a <= b && a.is_finite() && b.is_finite()) {
                return bad(format!("epsilon range [{a}, {b}] is invalid"));
            }
        }
        if self.batch == 0 && !matches!(self.phase, PhaseMode::Samples { .. }) {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    pub fn t_max(&self) -> f64 {
        match self.time {
            TimeMode::Grid { t_max, .. } | TimeMode::Uniform { t_max, .. } => t_max,
            TimeMode::Fixed { t0 } => t0,
        }
    }

    /// The spec in effect at training iteration `k` under the progressive
    /// schedule (unchanged without one).
    pub fn at_iteration(&self, k: usize) -> Self {
        let mut out = self.clone();
        if let Some(p) = self.progressive {
            let grown = (p.t_start + p.t_step * (k / p.every.max(1)) as f64).min(self.t_max());
            match &mut out.time {
                TimeMode::Grid { t_max, .. } | TimeMode::Uniform { t_max, .. } => *t_max = grown,
                TimeMode::Fixed { .. } => {}
            }
        }
        out
    }

    /// Whether the intervals `[t_n, t_n + h]` of a grid cover `[0, T]`.
    pub fn covers_window(&self, h: f64) -> bool {
        match self.time {
            TimeMode::Grid { n, t_max, .. } => t_max / (n - 1) as f64 <= h,
            _ => false,
        }
    }
}

fn unit_sphere<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    use rand_distr::StandardNormal;
    loop {
        let z: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return z.into_iter().map(|v| v / n).collect();
        }
    }
}

/// Draws a batch according to `spec`; deterministic for a seeded `rng`.
pub fn sample_collocation<T: Real, R: Rng>(spec: &CollocationSpec, dim: usize, rng: &mut R) -> Result<CollocationBatch<T>> {
    spec.validate(dim)?;
    let points: Vec<Vec<f64>> = match &spec.phase {
        PhaseMode::Box { lo, hi } => (0..spec.batch)
            .map(|_| lo.iter().zip(hi).map(|(&a, &b)| if a == b { a } else { rng.random_range(a..b) }).collect())
            .collect(),
        PhaseMode::Shell { indices, r_min, r_max, lo, hi } => (0..spec.batch)
            .map(|_| {
                let mut u: Vec<f64> =
                    lo.iter().zip(hi).map(|(&a, &b)| if a == b { a } else { rng.random_range(a..b) }).collect();
                let r = rng.random_range(*r_min..*r_max);
                for (&i, d) in indices.iter().zip(unit_sphere(indices.len(), rng)) {
                    u[i] = r * d;
                }
                u
            })
            .collect(),
        PhaseMode::Samples { points } => {
            if spec.batch == 0 || spec.batch >= points.len() {
                points.to_vec()
            } else {
                rand::seq::index::sample(rng, points.len(), spec.batch).into_iter().map(|i| points[i].clone()).collect()
            }
        }
    };
    let b = points.len();
    let flat: Vec<T> = points.iter().flatten().map(|&v| T::lit(v)).collect();
    let points = Array2::from_shape_vec((b, dim), flat).expect("rows of equal width");
    let times = match spec.time {
        TimeMode::Grid { n, t_max, tau } => {
            let shift = match tau {
                Tau::Fixed(x) => x,
                Tau::Uniform { h } => rng.random_range(0.0..h),
            };
            let dt = t_max / (n - 1) as f64;
            Array2::from_shape_fn((b, n), |(_, j)| T::lit(j as f64 * dt + shift))
        }
        TimeMode::Uniform { n, t_max } => Array2::from_shape_fn((b, n), |_| T::lit(rng.random_range(0.0..t_max))),
        TimeMode::Fixed { t0 } => Array2::from_elem((b, 1), T::lit(t0)),
    };
    let eps = spec.epsilon.map(|(a, c)| (0..b).map(|_| T::lit(if a == c { a } else { rng.random_range(a..c) })).collect());
    Ok(CollocationBatch { points, times, eps })
}

/// Splits a point set into a training part and a held-out part of
/// `⌈fraction·n⌉` points (at least one when `n ≥ 2`).
pub fn split_samples<R: Rng>(points: &[Vec<f64>], fraction: f64, rng: &mut R) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = points.len();
    let mut k = (fraction * n as f64).ceil() as usize;
    if n >= 2 {
        k = k.clamp(1, n - 1);
    } else {
        k = 0;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    idx.shuffle(rng);
    let (test, train) = idx.split_at(k);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train.iter().map(|&i| points[i].clone()).collect(), test.iter().map(|&i| points[i].clone()).collect())
}
