use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Norm used to measure residual and data mismatches.
///
/// The energy-balanced norm is `Ω = diag(I₃ₘ, ω Iₘ)` on the FPUT layout
/// `(y_s, x_s, y_f, x_f)`; squared, it weights the fast positions by `ω²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NormSpec {
    #[default]
    Plain,
    EnergyBalanced { m: usize, omega: f64 },
}

impl NormSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NormSpec::Plain => Ok(()),
            NormSpec::EnergyBalanced { m, omega } => {
                if m == 0 {
                    return Err(Error::InvalidParameter("energy-balanced norm needs m ≥ 1".into()));
                }
                if !(omega.is_finite() && omega > 0.0) {
                    return Err(Error::InvalidParameter(format!("energy-balanced weight must be positive, got {omega}")));
                }
                Ok(())
            }
        }
    }

    /// Squared column weights, or `None` for the plain norm.
    pub fn column_weights<T: Real>(&self, dim: usize) -> Result<Option<Vec<T>>> {
        self.validate()?;
        match *self {
            NormSpec::Plain => Ok(None),
            NormSpec::EnergyBalanced { m, omega } => {
                if dim != 4 * m {
                    return Err(Error::Dimension { expected: 4 * m, got: dim });
                }
                let w2 = T::lit(omega * omega);
                Ok(Some((0..dim).map(|i| if i < 3 * m { T::one() } else { w2 }).collect()))
            }
        }
    }

    /// `‖v‖²` under this norm.
    pub fn norm_sq<T: Real>(&self, v: &[T]) -> Result<T> {
        let w = self.column_weights::<T>(v.len())?;
        let mut acc = T::zero();
        for (j, &x) in v.iter().enumerate() {
            acc += x * x * w.as_ref().map_or(T::one(), |w| w[j]);
        }
        Ok(acc)
    }
}
