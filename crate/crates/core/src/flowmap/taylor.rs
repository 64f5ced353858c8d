use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::fields::{Field, FieldDf};
use super::FlowMap;
use crate::diffnet::{Mlp, MlpConfig, ParameterSet, RowFunction, Tape, Var};
use crate::error::{Error, Result};
use crate::hamiltonians::{HamiltonianSystem, System};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaylorOrders {
    Uniform(usize),
    SlowFast { slow: usize, fast: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorConfig {
    pub orders: TaylorOrders,
    pub hidden: Vec<usize>,
    pub gated: bool,
    /// Upper end of the training window; the network sees `t / t_train`.
    pub t_train: f64,
    pub epsilon_conditioned: bool,
    pub speed_preserving: bool,
}

impl TaylorConfig {
    pub fn new(order: usize, width: usize, depth: usize, t_train: f64) -> Self {
        Self {
            orders: TaylorOrders::Uniform(order),
            hidden: vec![width; depth],
            gated: true,
            t_train,
            epsilon_conditioned: false,
            speed_preserving: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Group {
    indices: Vec<usize>,
    order: usize,
    /// Parameter ids of the free gate parameters `a_i`, rates `w_i = exp(a_i)`.
    rates: Vec<usize>,
}

/// Variable-timestep map `Φ(u, t) = u + Ψ(u, t)` with saturating Taylor gates.
///
/// With `g_i = tanh(w_i t)/w_i`:
///
/// * order 0: `Ψ = tanh(w₁t) Δ`
/// * order 1: `Ψ = g₁ f + g₁ tanh(w₂t) Δ`
/// * order 2: `Ψ = g₁ f + ½ g₁g₂ Df f + g₁g₂ tanh(w₃t) Δ`
///
/// where `Δ = Δ(u, f(u), t[, ε])` is the remainder network. Slow/fast orders
/// apply these forms to each block of coordinates with separate gates.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorFlowMap {
    pub config: TaylorConfig,
    dim: usize,
    net: Mlp,
    groups: Vec<Group>,
    velocity: Option<Vec<usize>>,
}

impl TaylorFlowMap {
    pub fn init<T: Real, R: Rng>(
        config: TaylorConfig,
        system: &System<T>,
        params: &mut ParameterSet<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = system.dim();
        if !(config.t_train.is_finite() && config.t_train > 0.0) {
            return Err(Error::InvalidParameter("training window must be positive".into()));
        }
        let check = |p: usize| {
            if p > 2 {
                Err(Error::InvalidParameter(format!("Taylor order {p} not supported (0, 1 or 2)")))
            } else {
                Ok(p)
            }
        };
        let parts: Vec<(Vec<usize>, usize, &str)> = match config.orders {
            TaylorOrders::Uniform(p) => vec![((0..dim).collect(), check(p)?, "all")],
            TaylorOrders::SlowFast { slow, fast } => {
                let part = system.slow_fast().ok_or_else(|| {
                    Error::InvalidParameter(format!("`{}` has no slow/fast partition", system.name()))
                })?;
                vec![(part.slow, check(slow)?, "slow"), (part.fast, check(fast)?, "fast")]
            }
        };
        if config.epsilon_conditioned && system.parameter().is_none() {
            return Err(Error::InvalidParameter(format!("`{}` has no epsilon to condition on", system.name())));
        }
        let velocity = if config.speed_preserving {
            Some(system.velocity_indices().ok_or_else(|| {
                Error::InvalidParameter(format!("`{}` has no velocity block to preserve", system.name()))
            })?)
        } else {
            None
        };
        let input = 2 * dim + 1 + usize::from(config.epsilon_conditioned);
        let net = Mlp::init(
            MlpConfig { input, output: dim, hidden: config.hidden.clone(), gated: config.gated },
            params,
            &format!("{prefix}remainder."),
            rng,
        )?;
        let groups = parts
            .into_iter()
            .map(|(indices, order, name)| {
                let rates = (0..=order)
                    .map(|i| params.push(format!("{prefix}gate.{name}.{}", i + 1), Array2::zeros((1, 1))))
                    .collect();
                Group { indices, order, rates }
            })
            .collect();
        Ok(Self { config, dim, net, groups, velocity })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    /// Current gate rates `w_i` per coordinate group.
    pub fn gate_rates<T: Real>(&self, params: &ParameterSet<T>) -> Vec<Vec<T>> {
        self.groups.iter().map(|g| g.rates.iter().map(|&id| params.array(id)[[0, 0]].exp()).collect()).collect()
    }
}

impl<T: Real> FlowMap<T> for TaylorFlowMap {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn needs_epsilon(&self) -> bool {
        self.config.epsilon_conditioned
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
        let rows = tape.shape(u).0;
        if self.config.epsilon_conditioned && eps.is_none() {
            return Err(Error::MissingEpsilon);
        }
        let row_params = eps.filter(|_| system.parameter().is_some()).map(|e| e.to_vec());
        let field: Arc<dyn RowFunction<T>> = Arc::new(Field(system.clone()));
        let f = tape.row_map(u, field, row_params.clone());
        let need_dff = self.groups.iter().any(|g| g.order >= 2);
        let dff = if need_dff {
            let g: Arc<dyn RowFunction<T>> = Arc::new(FieldDf(system.clone()));
            Some(tape.row_map(u, g, row_params))
        } else {
            None
        };
        let ts = tape.scale(t, T::lit(1.0 / self.config.t_train));
        let mut inputs = vec![u, f, ts];
        if self.config.epsilon_conditioned {
            let e = eps.expect("checked above");
            inputs.push(tape.constant(Array2::from_shape_vec((rows, 1), e.to_vec()).expect("column")));
        }
        let x = tape.concat(&inputs);
        let delta = self.net.forward(tape, vars, x);

        let mut psi: Option<Var> = None;
        for g in &self.groups {
            let whole = g.indices.len() == self.dim;
            let pick = |tape: &mut Tape<T>, v: Var| if whole { v } else { tape.select(v, &g.indices) };
            let rates: Vec<Var> = g.rates.iter().map(|&id| tape.exp(vars[id])).collect();
            let d = pick(tape, delta);
            // saturating factor on the remainder: tanh(w_{p+1} t)
            let wlast = rates[g.order];
            let glast = tape.gate(t, wlast);
            let sat = tape.mul(glast, wlast);
            let part = match g.order {
                0 => tape.mul(d, sat),
                1 => {
                    let g1 = tape.gate(t, rates[0]);
                    let fg = pick(tape, f);
                    let a = tape.mul(fg, g1);
                    let r = tape.mul(g1, sat);
                    let b = tape.mul(d, r);
                    tape.add(a, b)
                }
                _ => {
                    let g1 = tape.gate(t, rates[0]);
                    let g2 = tape.gate(t, rates[1]);
                    let fg = pick(tape, f);
                    let dg = pick(tape, dff.expect("computed for order 2"));
                    let a = tape.mul(fg, g1);
                    let g12 = tape.mul(g1, g2);
                    let half = tape.scale(g12, T::lit(0.5));
                    let b = tape.mul(dg, half);
                    let r = tape.mul(g12, sat);
                    let c = tape.mul(d, r);
                    let ab = tape.add(a, b);
                    tape.add(ab, c)
                }
            };
            let full = if whole { part } else { tape.scatter(part, &g.indices, self.dim) };
            psi = Some(match psi {
                None => full,
                Some(p) => tape.add(p, full),
            });
        }
        let phi = tape.add(u, psi.expect("at least one group"));
        let Some(vel) = &self.velocity else {
            return Ok(phi);
        };
        let rest: Vec<usize> = (0..self.dim).filter(|i| !vel.contains(i)).collect();
        let v_in = tape.select(u, vel);
        let radius = tape.row_norm(v_in);
        let v_raw = tape.select(phi, vel);
        let v_out = tape.rescale_rows(v_raw, radius);
        let a = tape.scatter(v_out, vel, self.dim);
        let r = tape.select(phi, &rest);
        let b = tape.scatter(r, &rest, self.dim);
        Ok(tape.add(a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmap::{eval_map, eval_map_signed};
    use crate::hamiltonians::{make_system, ParamTable, PhaseState};
    use crate::integrators::df_f;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn npco() -> System<f64> {
        let mut p = ParamTable::new();
        p.insert("epsilon".into(), 0.1);
        make_system("npco", &p).unwrap()
    }

    fn randomize(ps: &mut ParameterSet<f64>, rng: &mut ChaCha8Rng, scale: f64) {
        for i in 0..ps.len() {
            ps.array_mut(i).mapv_inplace(|v| v + rng.random_range(-scale..scale));
        }
    }

    #[test]
    fn identity_at_zero_for_random_parameters() {
        let s = npco();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for order in 0..=2 {
            let mut ps = ParameterSet::new(3);
            let map = TaylorFlowMap::init(TaylorConfig::new(order, 16, 2, 5.0), &s, &mut ps, "", &mut rng).unwrap();
            randomize(&mut ps, &mut rng, 0.5);
            for _ in 0..50 {
                let u: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                let out = eval_map(&map, &ps, &s, &PhaseState::new(u.clone()).unwrap(), 0.0).unwrap();
                assert_eq!(out.coords, u);
            }
        }
    }

    #[test]
    fn derivative_matching_at_zero() {
        let s = npco();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParameterSet::new(4);
        let map = TaylorFlowMap::init(TaylorConfig::new(2, 16, 2, 5.0), &s, &mut ps, "", &mut rng).unwrap();
        randomize(&mut ps, &mut rng, 0.5);
        let u = PhaseState::new(vec![0.4, -0.3, 0.8, 0.1]).unwrap();
        let h = 1e-5;
        let plus = eval_map_signed(&map, &ps, &s, &u, h).unwrap().coords;
        let minus = eval_map_signed(&map, &ps, &s, &u, -h).unwrap().coords;
        let f = s.vector_field(&u.coords);
        for i in 0..4 {
            let d1 = (plus[i] - minus[i]) / (2.0 * h);
            assert!((d1 - f[i]).abs() / f[i].abs().max(1e-3) < 1e-6);
        }
        let h2 = 1e-3;
        let p2 = eval_map_signed(&map, &ps, &s, &u, h2).unwrap().coords;
        let m2 = eval_map_signed(&map, &ps, &s, &u, -h2).unwrap().coords;
        let dff = df_f(&s, &u.coords);
        for i in 0..4 {
            let d2 = (p2[i] - 2.0 * u.coords[i] + m2[i]) / (h2 * h2);
            assert!((d2 - dff[i]).abs() / dff[i].abs().max(1e-2) < 1e-4, "{i}: {d2} vs {}", dff[i]);
        }
    }

    #[test]
    fn slow_fast_and_speed_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamTable::new();
        p.insert("omega".into(), 50.0);
        p.insert("m".into(), 3.0);
        let fput: System<f64> = make_system("fput", &p).unwrap();
        let mut cfg = TaylorConfig::new(0, 8, 1, 1.0);
        cfg.orders = TaylorOrders::SlowFast { slow: 2, fast: 0 };
        let mut ps = ParameterSet::new(0);
        let map = TaylorFlowMap::init(cfg.clone(), &fput, &mut ps, "", &mut rng).unwrap();
        assert_eq!(map.gate_rates(&ps).iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 1]);
        let mut ps2 = ParameterSet::new(0);
        assert!(TaylorFlowMap::init(cfg, &npco(), &mut ps2, "", &mut rng).is_err());

        let mut pa = ParamTable::new();
        pa.insert("epsilon".into(), 0.1);
        let alpha: System<f64> = make_system("alpha", &pa).unwrap();
        let mut cfg = TaylorConfig::new(2, 8, 2, 5.0);
        cfg.speed_preserving = true;
        cfg.epsilon_conditioned = true;
        let mut ps = ParameterSet::new(0);
        let map = TaylorFlowMap::init(cfg, &alpha, &mut ps, "", &mut rng).unwrap();
        randomize(&mut ps, &mut rng, 0.3);
        let u = PhaseState::new(vec![0.9, -0.6, 1.0, 2.0]).unwrap();
        assert!(matches!(eval_map(&map, &ps, &alpha, &u, 1.0), Err(Error::MissingEpsilon)));
        let out = eval_map(&map, &ps, &alpha, &u.clone().with_param(0.2), 1.7).unwrap();
        let r0 = (0.9f64 * 0.9 + 0.6 * 0.6).sqrt();
        let r1 = (out.coords[0].powi(2) + out.coords[1].powi(2)).sqrt();
        assert!((r1 - r0).abs() <= 4.0 * f64::EPSILON);
        assert!(eval_map(&map, &ps, &alpha, &u.with_param(0.2), -1.0).is_err());
    }
}
