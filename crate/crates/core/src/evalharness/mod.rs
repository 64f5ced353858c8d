//! Rollout evaluation: error metrics, FPUT energy-exchange profiles,
//! Poincaré sections, error-growth fits and runtime benchmarks, plus CSV and
//! JSON export of every record.
//!
//! CSV schemas:
//!
//! | record            | columns                                   |
//! |-------------------|-------------------------------------------|
//! | [`ErrorSeries`]   | `t,traj_err,energy_err`                   |
//! | [`PoincareSection`] | `t,x,y`                                 |
//! | [`EnergyProfile`] | `t,I1..Im,I,H`                            |
//! | benchmark reports | `solver,batch,T,wall_ms,traj_err,H_err`   |

mod bench;
mod profile;
mod section;

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use bench::{benchmark, BenchSettings, BenchmarkReport, Solver};
pub use profile::{energy_exchange_profile, EnergyProfile};
pub use section::{hausdorff_distance, poincare_section, PoincareSection};

use crate::error::{Error, Result};
use crate::hamiltonians::{HamiltonianSystem, System};
use crate::scalar::Real;

/// `‖pred − reference‖₂`.
pub fn traj_error<T: Real>(pred: &[T], reference: &[T]) -> Result<T> {
    if pred.len() != reference.len() {
        return Err(Error::Dimension { expected: reference.len(), got: pred.len() });
    }
    Ok(pred.iter().zip(reference).fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b)).sqrt())
}

/// `|H(pred) − H(reference)| / |H(reference)|`.
pub fn energy_error<T: Real>(system: &System<T>, pred: &[T], reference: &[T]) -> Result<T> {
    if pred.len() != system.dim() || reference.len() != system.dim() {
        return Err(Error::Dimension { expected: system.dim(), got: pred.len().min(reference.len()) });
    }
    let h_ref = system.energy(reference);
    if !(h_ref.abs().as_f64() >= 1e-300) {
        return Err(Error::UndefinedMetric(format!("reference energy {h_ref:e} is too close to zero")));
    }
    Ok((system.energy(pred) - h_ref).abs() / h_ref.abs())
}

/// `err(t) ≈ δ₀ e^{L t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub delta0: f64,
    pub rate: f64,
}

impl GrowthFit {
    /// A negative rate means the errors shrink, so the fit says nothing about
    /// worst-case amplification.
    pub fn is_worst_case(&self) -> bool {
        self.rate >= 0.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSeries {
    pub times: Vec<f64>,
    pub traj_err: Vec<f64>,
    pub energy_err: Vec<f64>,
    pub growth: Option<GrowthFit>,
}

impl ErrorSeries {
    /// Pointwise errors of `pred` against `reference`, both sampled on `times`.
    pub fn compare<T: Real>(system: &System<T>, times: &[T], pred: &[Vec<T>], reference: &[Vec<T>]) -> Result<Self> {
        if pred.len() != times.len() || reference.len() != times.len() {
            return Err(Error::Dimension { expected: times.len(), got: pred.len().min(reference.len()) });
        }
        let mut out = Self::default();
        for ((t, p), r) in times.iter().zip(pred).zip(reference) {
            out.times.push(t.as_f64());
            out.traj_err.push(traj_error(p, r)?.as_f64());
            out.energy_err.push(energy_error(system, p, r)?.as_f64());
        }
        Ok(out)
    }

    /// Averages series sampled on the same times, e.g. over a batch of
    /// initial states.
    pub fn mean(series: &[ErrorSeries]) -> Result<Self> {
        let first = series.first().ok_or(Error::EmptyBatch)?;
        if series.iter().any(|s| s.times != first.times) {
            return Err(Error::InvalidInput("error series sampled on different times".into()));
        }
        let n = series.len() as f64;
        let avg = |f: fn(&ErrorSeries) -> &Vec<f64>| -> Vec<f64> {
            (0..first.times.len()).map(|i| series.iter().map(|s| f(s)[i]).sum::<f64>() / n).collect()
        };
        Ok(Self { times: first.times.clone(), traj_err: avg(|s| &s.traj_err), energy_err: avg(|s| &s.energy_err), growth: None })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn max_traj_err(&self) -> f64 {
        self.traj_err.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_energy_err(&self) -> f64 {
        self.energy_err.iter().copied().fold(0.0, f64::max)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut out = Self::default();
        for row in csv::Reader::from_path(path)?.records() {
            let row = row?;
            let field = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad errors row {:?}", row)))
            };
            out.times.push(field(0)?);
            out.traj_err.push(field(1)?);
            out.energy_err.push(field(2)?);
        }
        Ok(out)
    }
}

/// Least-squares fit of `log err = log δ₀ + L t` over the strictly positive
/// trajectory errors of `series`.
pub fn fit_error_growth(series: &ErrorSeries) -> Result<GrowthFit> {
    let pts: Vec<(f64, f64)> = series
        .times
        .iter()
        .zip(&series.traj_err)
        .filter(|(_, &e)| e > 0.0 && e.is_finite())
        .map(|(&t, &e)| (t, e.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::InvalidInput("growth fit needs at least two positive errors".into()));
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("growth fit needs at least two distinct times".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let rate = sxy / sxx;
    Ok(GrowthFit { delta0: (ym - rate * tm).exp(), rate })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidParameter(format!("unknown export format `{other}`"))),
        }
    }
}

/// A result record with a CSV layout; JSON goes through serde.
pub trait Record: Serialize + DeserializeOwned {
    fn write_csv(&self, path: &Path) -> Result<()>;
}

impl Record for ErrorSeries {
    fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "traj_err", "energy_err"])?;
        for i in 0..self.len() {
            w.write_record([self.times[i], self.traj_err[i], self.energy_err[i]].map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn export_results<R: Record>(record: &R, path: &Path, format: ExportFormat) -> Result<()> {
    match format {
        ExportFormat::Csv => record.write_csv(path),
        ExportFormat::Json => {
            let w = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(w, record)?;
            Ok(())
        }
    }
}

pub fn load_json<R: Record>(path: &Path) -> Result<R> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}
