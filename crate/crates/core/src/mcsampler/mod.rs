//! Microcanonical sampling: HMC-H₀ chains on energy surfaces, narrowband
//! datasets, and momentum refreshment under linear constraints.

mod constrained;
mod hmc;

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use constrained::{constrained_refresh, LinearConstraintSpec};
pub use hmc::{hmc_h0_chain, narrowband_dataset, refresh_momentum};

use crate::diffnet::{save_params, ParameterSet};
use crate::error::{Error, Result};
use crate::hamiltonians::PhaseState;
use crate::integrators::SchemeKind;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSamplerConfig {
    /// Target energy `H₀`.
    pub h0: f64,
    /// Narrowband standard deviation as a fraction of `H₀`.
    pub band_fraction: f64,
    /// Mean `λ` of the exponential integration-time distribution.
    pub lambda: f64,
    pub scheme: SchemeKind,
    /// Proposal step; `min(0.01, λ/100)` when unset.
    pub h: Option<f64>,
    /// Samples per chain.
    pub n_samples: usize,
    /// Energy levels drawn by [`narrowband_dataset`].
    pub levels: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for McSamplerConfig {
    fn default() -> Self {
        Self {
            h0: 1.0,
            band_fraction: 0.1,
            lambda: 1.0,
            scheme: SchemeKind::VelocityVerlet,
            h: None,
            n_samples: 1000,
            levels: 16,
            max_retries: 10,
            seed: 0,
        }
    }
}

impl McSamplerConfig {
    pub fn step_size(&self) -> f64 {
        self.h.unwrap_or_else(|| (self.lambda / 100.0).min(0.01))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad(format!("λ must be positive, got {}", self.lambda));
        }
        if !self.h0.is_finite() {
            return bad(format!("H0 must be finite, got {}", self.h0));
        }
        let h = self.step_size();
        if !(h.is_finite() && h > 0.0) {
            return bad(format!("proposal step must be positive, got {h}"));
        }
        if !(self.band_fraction.is_finite() && self.band_fraction >= 0.0) {
            return bad(format!("band fraction must be ≥ 0, got {}", self.band_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub chain: usize,
    pub step: usize,
    /// Energy level the chain targets.
    pub level: T,
    pub coords: Vec<T>,
}

/// Samples ordered by chain, then step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet<T> {
    pub dim: usize,
    pub samples: Vec<Sample<T>>,
}

impl<T: Real> SampleSet<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn states(&self) -> Vec<PhaseState<T>> {
        self.samples.iter().map(|s| PhaseState { coords: s.coords.clone(), param: None }).collect()
    }

    pub fn points_f64(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.coords.iter().map(|v| v.as_f64()).collect()).collect()
    }

    /// Largest `|H(u) − E|/|E|` over the set.
    pub fn max_relative_drift(&self, energy: impl Fn(&[T]) -> T) -> f64 {
        self.samples
            .iter()
            .map(|s| ((energy(&s.coords) - s.level) / s.level).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// `chain,step,level,u0,…,u{2d-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["chain".to_string(), "step".into(), "level".into()];
        header.extend((0..self.dim).map(|i| format!("u{i}")));
        out.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.chain.to_string(), s.step.to_string(), s.level.as_f64().to_string()];
            row.extend(s.coords.iter().map(|v| v.as_f64().to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let dim = rd.headers()?.len().saturating_sub(3);
        let mut samples = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("bad sample field {i}")))
            };
            samples.push(Sample {
                chain: field(0)? as usize,
                step: field(1)? as usize,
                level: T::lit(field(2)?),
                coords: (0..dim).map(|i| field(3 + i).map(T::lit)).collect::<Result<_>>()?,
            });
        }
        Ok(Self { dim, samples })
    }

    /// Stores the set as one `n × (3 + 2d)` array in the checkpoint container.
    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut a = Array2::zeros((self.len(), 3 + self.dim));
        for (i, s) in self.samples.iter().enumerate() {
            a[[i, 0]] = s.chain as f64;
            a[[i, 1]] = s.step as f64;
            a[[i, 2]] = s.level.as_f64();
            for (j, v) in s.coords.iter().enumerate() {
                a[[i, 3 + j]] = v.as_f64();
            }
        }
        let mut ps = ParameterSet::new(0);
        ps.push("samples", a);
        save_params(&ps, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let set = SampleSet {
            dim: 2,
            samples: vec![
                Sample { chain: 0, step: 0, level: 0.5, coords: vec![0.1, -0.3] },
                Sample { chain: 1, step: 4, level: 0.25, coords: vec![1.0 / 3.0, 2.0] },
            ],
        };
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let back: SampleSet<f64> = SampleSet::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, set);
    }
}
