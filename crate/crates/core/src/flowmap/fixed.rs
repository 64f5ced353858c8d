use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::fields::Field;
use super::FlowMap;
use crate::diffnet::{Mlp, MlpConfig, ParameterSet, RowFunction, Tape, Var};
use crate::error::{Error, Result};
use crate::hamiltonians::{HamiltonianSystem, System};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedConfig {
    pub t0: f64,
    pub hidden: Vec<usize>,
    pub gated: bool,
}

/// Map for a single step size `T₀`: `Φ_{T₀}(u) = N(u, f(u))`.
///
/// The time argument is ignored; the map is only meaningful at `t = T₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedStepFlowMap {
    pub t0: f64,
    pub config: FixedConfig,
    dim: usize,
    net: Mlp,
}

impl FixedStepFlowMap {
    pub fn init<T: Real, R: Rng>(
        config: FixedConfig,
        system: &System<T>,
        params: &mut ParameterSet<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if !(config.t0.is_finite() && config.t0 > 0.0) {
            return Err(Error::InvalidParameter(format!("fixed step must be positive, got {}", config.t0)));
        }
        let dim = system.dim();
        let net = Mlp::init(
            MlpConfig { input: 2 * dim, output: dim, hidden: config.hidden.clone(), gated: config.gated },
            params,
            &format!("{prefix}fixed."),
            rng,
        )?;
        Ok(Self { t0: config.t0, config, dim, net })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }
}

impl<T: Real> FlowMap<T> for FixedStepFlowMap {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        system: &System<T>,
        u: Var,
        _t: Var,
        eps: Option<&[T]>,
    ) -> Result<Var> {
        let field: Arc<dyn RowFunction<T>> = Arc::new(Field(system.clone()));
        let row_params = eps.filter(|_| system.parameter().is_some()).map(|e| e.to_vec());
        let f = tape.row_map(u, field, row_params);
        let x = tape.concat(&[u, f]);
        Ok(self.net.forward(tape, vars, x))
    }
}
