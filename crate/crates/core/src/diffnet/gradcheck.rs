use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamGrads, ParameterSet};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst probe.
    pub worst_index: usize,
    pub probes: usize,
}

/// Relative error with a small absolute floor so that coordinates whose true
/// gradient vanishes are judged against finite-difference noise.
pub fn relative_error(analytic: f64, numeric: f64, loss_scale: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6 * (1.0 + loss_scale.abs()));
    (analytic - numeric).abs() / scale
}

/// Central-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares `grad(params)` against central differences of `loss` on
/// `n_probes` random flat coordinates (all coordinates when there are fewer).
pub fn gradient_check<L, G>(loss: L, grad: G, params: &ParameterSet<f64>, n_probes: usize, seed: u64) -> GradCheckReport
where
    L: Fn(&ParameterSet<f64>) -> f64,
    G: Fn(&ParameterSet<f64>) -> ParamGrads<f64>,
{
    let total = params.count();
    let g = grad(params);
    let base = loss(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<usize> = if n_probes >= total {
        (0..total).collect()
    } else {
        (0..n_probes).map(|_| rng.random_range(0..total)).collect()
    };
    let mut worst = (0.0f64, 0usize);
    let mut p = params.clone();
    for &k in &probes {
        let x0 = p.flat_get(k);
        let step = FD_STEP * x0.abs().max(1.0);
        p.flat_set(k, x0 + step);
        let lp = loss(&p);
        p.flat_set(k, x0 - step);
        let lm = loss(&p);
        p.flat_set(k, x0);
        let fd = (lp - lm) / (2.0 * step);
        let e = relative_error(g.flat_get(k), fd, base);
        if e > worst.0 || !e.is_finite() {
            worst = (if e.is_finite() { e } else { f64::INFINITY }, k);
        }
    }
    GradCheckReport { max_rel_error: worst.0, worst_index: worst.1, probes: probes.len() }
}
