use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Record;
use crate::error::{Error, Result};
use crate::hamiltonians::{HamiltonianSystem, System};
use crate::scalar::Real;

/// Stiff-spring energies `I_j`, their sum `I` and the total energy `H`
/// along an FPUT trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    pub times: Vec<f64>,
    /// `per_spring[k][j]` is `I_{j+1}` at `times[k]`.
    pub per_spring: Vec<Vec<f64>>,
    pub total: Vec<f64>,
    pub energy: Vec<f64>,
}

impl EnergyProfile {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `max_t |I(t) − I(0)| / I(0)`.
    pub fn total_drift(&self) -> f64 {
        let i0 = self.total[0];
        self.total.iter().map(|&i| (i - i0).abs() / i0).fold(0.0, f64::max)
    }

    /// `max_t |H(t) − H(0)| / |H(0)|`.
    pub fn energy_drift(&self) -> f64 {
        let h0 = self.energy[0];
        self.energy.iter().map(|&h| (h - h0).abs() / h0.abs()).fold(0.0, f64::max)
    }

    /// For each spring, `(max_t I_j − min_t I_j) / I(0)`.
    pub fn exchange_amplitudes(&self) -> Vec<f64> {
        let m = self.per_spring.first().map_or(0, Vec::len);
        let i0 = self.total[0];
        (0..m)
            .map(|j| {
                let (lo, hi) = self
                    .per_spring
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), row| (lo.min(row[j]), hi.max(row[j])));
                (hi - lo) / i0
            })
            .collect()
    }
}

impl Record for EnergyProfile {
    fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let m = self.per_spring.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=m).map(|j| format!("I{j}")));
        header.extend(["I".to_string(), "H".to_string()]);
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.per_spring[k].iter().map(f64::to_string));
            row.extend([self.total[k].to_string(), self.energy[k].to_string()]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Samples every `stride`-th state of an FPUT trajectory.
pub fn energy_exchange_profile<T: Real>(
    system: &System<T>,
    times: &[T],
    states: &[Vec<T>],
    stride: usize,
) -> Result<EnergyProfile> {
    let fput = system.as_fput().ok_or_else(|| Error::WrongSystem("the FPUT system".into()))?;
    if stride == 0 {
        return Err(Error::InvalidParameter("profile stride must be positive".into()));
    }
    if times.len() != states.len() {
        return Err(Error::Dimension { expected: times.len(), got: states.len() });
    }
    let mut out = EnergyProfile::default();
    for k in (0..states.len()).step_by(stride) {
        let u = &states[k];
        if u.len() != system.dim() {
            return Err(Error::Dimension { expected: system.dim(), got: u.len() });
        }
        let e = fput.spring_energies(u);
        out.times.push(times[k].as_f64());
        out.per_spring.push(e.per_spring.iter().map(|v| v.as_f64()).collect());
        out.total.push(e.total.as_f64());
        out.energy.push(system.energy(u).as_f64());
    }
    Ok(out)
}
