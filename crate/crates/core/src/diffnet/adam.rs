use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParameterSet};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Exponential learning-rate decay `lr · rate^(step / every)`.
    pub decay: Option<LrDecay>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub rate: f64,
    pub every: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay: None }
    }
}

impl AdamConfig {
    pub fn learning_rate(&self, step: u64) -> f64 {
        match self.decay {
            Some(d) if d.every > 0 => self.lr * d.rate.powf(step as f64 / d.every as f64),
            _ => self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros = || params.arrays().iter().map(|a| Array2::zeros(a.raw_dim())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update<T: Real>(params: &mut ParameterSet<T>, grads: &ParamGrads<T>, state: &mut AdamState<T>, cfg: &AdamConfig) {
    let lr = T::lit(cfg.learning_rate(state.step));
    state.step += 1;
    let (b1, b2, eps) = (T::lit(cfg.beta1), T::lit(cfg.beta2), T::lit(cfg.eps));
    let c1 = T::one() - b1.powi(state.step as i32);
    let c2 = T::one() - b2.powi(state.step as i32);
    let one = T::one();
    for (i, g) in grads.0.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.array_mut(i);
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(v: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new(0);
        p.push("x", array![[v]]);
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(1.5);
        let mut st = AdamState::new(&p);
        let g = ParamGrads(vec![array![[0.0]]]);
        adam_update(&mut p, &g, &mut st, &AdamConfig::default());
        assert_eq!(p.array(0)[[0, 0]], 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        let g = ParamGrads(vec![array![[-3.0]]]);
        let mut prev = 0.0;
        let mut last = 0.0;
        for k in 0..5000 {
            adam_update(&mut p, &g, &mut st, &cfg);
            let x = p.array(0)[[0, 0]];
            if k == 0 {
                assert!((x - prev).abs() <= cfg.lr * (1.0 + 1e-6));
            }
            last = x - prev;
            prev = x;
        }
        assert!(last > 0.0 && (last - cfg.lr).abs() / cfg.lr < 0.01);
    }

    #[test]
    fn decay_schedule() {
        let cfg = AdamConfig { decay: Some(LrDecay { rate: 0.5, every: 100 }), ..AdamConfig::default() };
        assert!((cfg.learning_rate(200) - 0.25e-3).abs() < 1e-15);
    }
}
