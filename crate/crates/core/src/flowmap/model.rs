use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fixed::{FixedConfig, FixedStepFlowMap};
use super::taylor::{TaylorConfig, TaylorFlowMap};
use super::{t0_centered_forward, FlowMap};
use crate::diffnet::{load_params, save_params, ArraySpec, ParameterSet, Tape, Var};
use crate::error::{Error, Result};
use crate::hamiltonians::{HamiltonianSystem, System};
use crate::scalar::Real;

pub const ARCHITECTURE_FILE: &str = "architecture.json";
pub const PARAMS_FILE: &str = "params.hflw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Taylor(TaylorConfig),
    Fixed(FixedConfig),
    /// `Φ(Φ_{T₀}(u), t − T₀)` with a fixed-step map and a Taylor map.
    T0Centered { fixed: FixedConfig, var: TaylorConfig },
}

#[derive(Debug, Clone, PartialEq)]
enum Maps {
    Taylor(TaylorFlowMap),
    Fixed(FixedStepFlowMap),
    T0Centered(FixedStepFlowMap, TaylorFlowMap),
}

/// A flow map built from an [`Architecture`], usable as a [`FlowMap`] and
/// storable next to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub architecture: Architecture,
    maps: Maps,
}

/// What gets written to [`ARCHITECTURE_FILE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub system: String,
    pub state_dim: usize,
    pub architecture: Architecture,
    pub arrays: Vec<ArraySpec>,
}

impl Model {
    /// Registers the model's arrays in `params`, initialised from `seed`.
    pub fn init<T: Real>(architecture: Architecture, system: &System<T>, params: &mut ParameterSet<T>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = match &architecture {
            Architecture::Taylor(c) => Maps::Taylor(TaylorFlowMap::init(c.clone(), system, params, "", &mut rng)?),
            Architecture::Fixed(c) => Maps::Fixed(FixedStepFlowMap::init(c.clone(), system, params, "", &mut rng)?),
            Architecture::T0Centered { fixed, var } => Maps::T0Centered(
                FixedStepFlowMap::init(fixed.clone(), system, params, "", &mut rng)?,
                TaylorFlowMap::init(var.clone(), system, params, "var.", &mut rng)?,
            ),
        };
        Ok(Self { architecture, maps })
    }

    /// The fixed-step and variable-step parts of a T0-centered model.
    pub fn t0_parts(&self) -> Option<(&FixedStepFlowMap, &TaylorFlowMap)> {
        match &self.maps {
            Maps::T0Centered(f, v) => Some((f, v)),
            _ => None,
        }
    }

    pub fn descriptor<T: Real>(&self, system: &System<T>, params: &ParameterSet<T>) -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            system: system.name().to_string(),
            state_dim: system.dim(),
            architecture: self.architecture.clone(),
            arrays: params.specs(),
        }
    }

    /// Writes the descriptor and the parameters into `dir`.
    pub fn save<T: Real>(&self, dir: &Path, system: &System<T>, params: &ParameterSet<T>) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ARCHITECTURE_FILE), serde_json::to_string_pretty(&self.descriptor(system, params))?)?;
        save_params(&params.cast::<f64>(), &dir.join(PARAMS_FILE))
    }

    /// Rebuilds a model saved by [`Model::save`].
    pub fn load<T: Real>(dir: &Path, system: &System<T>) -> Result<(Self, ParameterSet<T>)> {
        let desc: ArchitectureDescriptor = serde_json::from_str(&fs::read_to_string(dir.join(ARCHITECTURE_FILE))?)?;
        if desc.system != system.name() || desc.state_dim != system.dim() {
            return Err(Error::Format(format!(
                "checkpoint was trained on `{}` (dimension {}), not `{}` (dimension {})",
                desc.system,
                desc.state_dim,
                system.name(),
                system.dim()
            )));
        }
        let stored: ParameterSet<f64> = load_params(&dir.join(PARAMS_FILE))?;
        let mut params = ParameterSet::new(stored.seed);
        let model = Self::init(desc.architecture, system, &mut params, stored.seed)?;
        params.assign_from(&stored.cast())?;
        Ok((model, params))
    }
}

impl<T: Real> FlowMap<T> for Model {
    fn state_dim(&self) -> usize {
        match &self.maps {
            Maps::Taylor(m) => FlowMap::<T>::state_dim(m),
            Maps::Fixed(m) => FlowMap::<T>::state_dim(m),
            Maps::T0Centered(f, _) => FlowMap::<T>::state_dim(f),
        }
    }

    fn needs_epsilon(&self) -> bool {
        match &self.maps {
            Maps::Taylor(m) => FlowMap::<T>::needs_epsilon(m),
            Maps::Fixed(m) => FlowMap::<T>::needs_epsilon(m),
            Maps::T0Centered(f, v) => FlowMap::<T>::needs_epsilon(f) || FlowMap::<T>::needs_epsilon(v),
        }
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
        match &self.maps {
            Maps::Taylor(m) => m.forward(tape, vars, system, u, t, eps),
            Maps::Fixed(m) => m.forward(tape, vars, system, u, t, eps),
            Maps::T0Centered(f, v) => t0_centered_forward(f, T::lit(f.t0), v, tape, vars, system, u, t, eps),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmap::eval_map;
    use crate::hamiltonians::{make_system, ParamTable, PhaseState};

    #[test]
    fn save_and_load_round_trip() {
        let s: System<f64> = make_system("harmonic", &ParamTable::new()).unwrap();
        let arch = Architecture::T0Centered {
            fixed: FixedConfig { t0: 0.5, hidden: vec![8], gated: true },
            var: TaylorConfig::new(2, 8, 2, 1.0),
        };
        let mut ps = ParameterSet::new(4);
        let model = Model::init(arch, &s, &mut ps, 4).unwrap();
        for k in 0..ps.count() {
            ps.flat_set(k, 0.01 * (k as f64).sin());
        }
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), &s, &ps).unwrap();
        let (back, ps2) = Model::load::<f64>(dir.path(), &s).unwrap();
        assert_eq!(back, model);
        assert_eq!(ps2, ps);
        let u = PhaseState::new(vec![0.3, 0.4]).unwrap();
        assert_eq!(eval_map(&back, &ps2, &s, &u, 0.8).unwrap(), eval_map(&model, &ps, &s, &u, 0.8).unwrap());
        let other: System<f64> = make_system("double_well", &ParamTable::new()).unwrap();
        assert!(matches!(Model::load::<f64>(dir.path(), &other), Err(Error::Format(_))));
    }
}
