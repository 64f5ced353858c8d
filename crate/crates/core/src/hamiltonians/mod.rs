//! Benchmark Hamiltonian systems with hand-coded analytic derivatives.
//!
//! Every system stores its coordinates in a fixed, documented order:
//!
//! | system     | `u`                                   |
//! |------------|---------------------------------------|
//! | harmonic   | `(p, q)`                              |
//! | npco       | `(p1, p2, q1, q2)`                    |
//! | fput       | `(y_s[1..m], x_s[1..m], y_f[1..m], x_f[1..m])` |
//! | alpha      | `(v_x, v_y, x, y)`                    |
//!
//! The alpha-particle system is non-canonical: its vector field comes from the
//! Lorentz-force ODE directly, and its "energy" is the kinetic proxy
//! `½(v_x² + v_y²)`.

mod alpha;
mod double_well;
mod fput;
mod harmonic;
mod linear;
mod npco;

use std::collections::BTreeMap;

use ndarray::Array2;

pub use alpha::{AlphaParticle, MagneticField};
pub use double_well::DoubleWell;
pub use fput::{Fput, SpringEnergies};
pub use harmonic::Harmonic;
pub use linear::LinearFlow;
pub use npco::Npco;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A point of phase space, optionally carrying a system parameter
/// (epsilon for the alpha-particle system) that overrides the system default.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState<T> {
    pub coords: Vec<T>,
    pub param: Option<T>,
}

impl<T: Real> PhaseState<T> {
    pub fn new(coords: Vec<T>) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("phase state has non-finite entries".into()));
        }
        Ok(Self { coords, param: None })
    }

    pub fn with_param(mut self, p: T) -> Self {
        self.param = Some(p);
        self
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Disjoint slow/fast index lists covering `0..2d`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SlowFastPartition {
    pub slow: Vec<usize>,
    pub fast: Vec<usize>,
}

impl SlowFastPartition {
    pub fn new(slow: Vec<usize>, fast: Vec<usize>, dim: usize) -> Result<Self> {
        let mut seen = vec![false; dim];
        for &i in slow.iter().chain(&fast) {
            if i >= dim || seen[i] {
                return Err(Error::InvalidParameter(format!(
                    "slow/fast partition index {i} repeated or out of range for dimension {dim}"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidParameter("slow/fast partition does not cover all coordinates".into()));
        }
        Ok(Self { slow, fast })
    }
}

/// Separable structure `H = ½ pᵀ M⁻¹ p + U(q)` with diagonal `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableParts<T> {
    pub momentum: Vec<usize>,
    pub position: Vec<usize>,
    pub inv_mass: Vec<T>,
}

pub trait HamiltonianSystem<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Phase-space dimension `2d`.
    fn dim(&self) -> usize;

    fn energy(&self, u: &[T]) -> T;

    fn gradient(&self, u: &[T]) -> Vec<T>;

    fn vector_field(&self, u: &[T]) -> Vec<T>;

    fn jacobian(&self, u: &[T]) -> Array2<T>;

    /// `(momentum indices, position indices)` for canonical systems.
    fn canonical_pairs(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        None
    }

    fn separable(&self) -> Option<SeparableParts<T>> {
        None
    }

    /// Potential energy `U(q)`; the momentum entries of `u` are ignored.
    fn potential(&self, _u: &[T]) -> Option<T> {
        None
    }

    fn slow_fast(&self) -> Option<SlowFastPartition> {
        None
    }

    /// Indices of a velocity block whose norm the dynamics preserves.
    fn velocity_indices(&self) -> Option<Vec<usize>> {
        None
    }
}

/// The closed set of systems this crate knows about.
#[derive(Debug, Clone, PartialEq)]
pub enum System<T> {
    Harmonic(Harmonic),
    Npco(Npco<T>),
    Fput(Fput<T>),
    Alpha(AlphaParticle<T>),
    Linear(LinearFlow<T>),
    DoubleWell(DoubleWell),
}

macro_rules! dispatch {
    ($self:ident, $s:ident => $e:expr) => {
        match $self {
            System::Harmonic($s) => $e,
            System::Npco($s) => $e,
            System::Fput($s) => $e,
            System::Alpha($s) => $e,
            System::Linear($s) => $e,
            System::DoubleWell($s) => $e,
        }
    };
}

impl<T: Real> HamiltonianSystem<T> for System<T> {
    fn name(&self) -> &'static str {
        dispatch!(self, s => HamiltonianSystem::<T>::name(s))
    }
    fn dim(&self) -> usize {
        dispatch!(self, s => HamiltonianSystem::<T>::dim(s))
    }
    fn energy(&self, u: &[T]) -> T {
        dispatch!(self, s => s.energy(u))
    }
    fn gradient(&self, u: &[T]) -> Vec<T> {
        dispatch!(self, s => s.gradient(u))
    }
    fn vector_field(&self, u: &[T]) -> Vec<T> {
        dispatch!(self, s => s.vector_field(u))
    }
    fn jacobian(&self, u: &[T]) -> Array2<T> {
        dispatch!(self, s => s.jacobian(u))
    }
    fn canonical_pairs(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        dispatch!(self, s => HamiltonianSystem::<T>::canonical_pairs(s))
    }
    fn separable(&self) -> Option<SeparableParts<T>> {
        dispatch!(self, s => s.separable())
    }
    fn potential(&self, u: &[T]) -> Option<T> {
        dispatch!(self, s => s.potential(u))
    }
    fn slow_fast(&self) -> Option<SlowFastPartition> {
        dispatch!(self, s => HamiltonianSystem::<T>::slow_fast(s))
    }
    fn velocity_indices(&self) -> Option<Vec<usize>> {
        dispatch!(self, s => HamiltonianSystem::<T>::velocity_indices(s))
    }
}

impl<T: Real> System<T> {
    /// The scalar parameter a phase state may override (epsilon for NPCO and
    /// the alpha particle).
    pub fn parameter(&self) -> Option<T> {
        match self {
            System::Npco(s) => Some(s.epsilon),
            System::Alpha(s) => Some(s.epsilon),
            _ => None,
        }
    }

    /// Copy of the system with its scalar parameter replaced.
    pub fn with_parameter(&self, p: T) -> Self {
        match self {
            System::Npco(_) => System::Npco(Npco { epsilon: p }),
            System::Alpha(s) => System::Alpha(AlphaParticle { epsilon: p, ..s.clone() }),
            other => other.clone(),
        }
    }

    /// Resolves the system a phase state should be evaluated with.
    pub fn for_state(&self, u: &PhaseState<T>) -> std::borrow::Cow<'_, Self> {
        match u.param {
            Some(p) if self.parameter().is_some() => std::borrow::Cow::Owned(self.with_parameter(p)),
            _ => std::borrow::Cow::Borrowed(self),
        }
    }

    pub fn as_fput(&self) -> Option<&Fput<T>> {
        match self {
            System::Fput(f) => Some(f),
            _ => None,
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.canonical_pairs().is_some()
    }

    fn check(&self, u: &PhaseState<T>) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: u.len() });
        }
        Ok(())
    }

    /// `J⁻¹∇H(u)` assembled from the gradient and the canonical pairing.
    pub fn canonical_vector_field(&self, u: &[T]) -> Option<Vec<T>> {
        let (p, q) = self.canonical_pairs()?;
        let g = self.gradient(u);
        let mut f = vec![T::zero(); u.len()];
        for (&pi, &qi) in p.iter().zip(&q) {
            f[pi] = -g[qi];
            f[qi] = g[pi];
        }
        Some(f)
    }
}

/// `H(u)` with dimension checking.
pub fn eval_hamiltonian<T: Real>(system: &System<T>, u: &PhaseState<T>) -> Result<T> {
    system.check(u)?;
    Ok(system.for_state(u).energy(&u.coords))
}

/// `du/dt` with dimension checking.
pub fn vector_field<T: Real>(system: &System<T>, u: &PhaseState<T>) -> Result<Vec<T>> {
    system.check(u)?;
    Ok(system.for_state(u).vector_field(&u.coords))
}

/// Analytic `Df(u)` with dimension checking.
pub fn jacobian<T: Real>(system: &System<T>, u: &PhaseState<T>) -> Result<Array2<T>> {
    system.check(u)?;
    Ok(system.for_state(u).jacobian(&u.coords))
}

/// Stiff-spring energies `I_j` of the FPUT chain and their sum.
pub fn stiff_spring_energies<T: Real>(system: &System<T>, u: &PhaseState<T>) -> Result<SpringEnergies<T>> {
    let fput = system.as_fput().ok_or_else(|| Error::WrongSystem("the FPUT system".into()))?;
    system.check(u)?;
    Ok(fput.spring_energies(&u.coords))
}

/// Named parameters for [`make_system`].
pub type ParamTable = BTreeMap<String, f64>;

pub const NPCO_DEFAULT_EPSILON: f64 = 0.05;

fn get(params: &ParamTable, key: &str) -> Option<f64> {
    params.get(key).copied()
}

fn positive(params: &ParamTable, key: &str, default: Option<f64>) -> Result<f64> {
    let v = get(params, key)
        .or(default)
        .ok_or_else(|| Error::InvalidParameter(format!("missing parameter `{key}`")))?;
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::InvalidParameter(format!("`{key}` must be positive, got {v}")));
    }
    Ok(v)
}

/// Builds one of the named benchmark systems.
///
/// Recognised keys: `epsilon` (npco, alpha), `omega` and `m` (fput),
/// `b0`, `a1`, `a2`, `k1`..`k4` (alpha magnetic field).
pub fn make_system<T: Real>(name: &str, params: &ParamTable) -> Result<System<T>> {
    let known: &[&str] = match name {
        "harmonic" | "double_well" => &[],
        "npco" => &["epsilon"],
        "fput" => &["omega", "m"],
        "alpha" => &["epsilon", "b0", "a1", "a2", "k1", "k2", "k3", "k4"],
        other => return Err(Error::UnknownSystem(other.to_string())),
    };
    if let Some(bad) = params.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::InvalidParameter(format!("`{bad}` is not a parameter of `{name}`")));
    }
    Ok(match name {
        "harmonic" => System::Harmonic(Harmonic),
        "double_well" => System::DoubleWell(DoubleWell),
        "npco" => System::Npco(Npco::new(T::lit(positive(params, "epsilon", Some(NPCO_DEFAULT_EPSILON))?))),
        "fput" => {
            let omega = positive(params, "omega", None)?;
            let m = positive(params, "m", None)?;
            if m.fract() != 0.0 {
                return Err(Error::InvalidParameter(format!("`m` must be an integer, got {m}")));
            }
            System::Fput(Fput::new(m as usize, T::lit(omega)))
        }
        "alpha" => {
            let eps = get(params, "epsilon")
                .ok_or_else(|| Error::InvalidParameter("missing parameter `epsilon`".into()))?;
            if !(eps.is_finite() && eps >= 0.0) {
                return Err(Error::InvalidParameter(format!("`epsilon` must be non-negative, got {eps}")));
            }
            let d = MagneticField::<f64>::default();
            let field = MagneticField {
                b0: T::lit(get(params, "b0").unwrap_or(d.b0)),
                a1: T::lit(get(params, "a1").unwrap_or(d.a1)),
                a2: T::lit(get(params, "a2").unwrap_or(d.a2)),
                k: [
                    T::lit(get(params, "k1").unwrap_or(d.k[0])),
                    T::lit(get(params, "k2").unwrap_or(d.k[1])),
                    T::lit(get(params, "k3").unwrap_or(d.k[2])),
                    T::lit(get(params, "k4").unwrap_or(d.k[3])),
                ],
            };
            System::Alpha(AlphaParticle { epsilon: T::lit(eps), field })
        }
        _ => unreachable!(),
    })
}
