use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Record;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Crossings of the section `θ = 0`, i.e. `v_y = 0` with `v_x > 0`, for
/// alpha-particle states `(v_x, v_y, x, y)`, located by linear
/// interpolation in time between bracketing samples.
///
/// Either direction of the sign change counts. With `B > 0` the gyration is
/// clockwise and every crossing has `v_y` decreasing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoincareSection {
    pub times: Vec<f64>,
    pub points: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct SectionRow {
    t: f64,
    x: f64,
    y: f64,
}

impl PoincareSection {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Largest distance between two crossing points.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                d = d.max((a.0 - b.0).hypot(a.1 - b.1));
            }
        }
        d
    }
}

impl Record for PoincareSection {
    fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (&t, &(x, y)) in self.times.iter().zip(&self.points) {
            w.serialize(SectionRow { t, x, y })?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn poincare_section<T: Real>(times: &[T], states: &[Vec<T>]) -> Result<PoincareSection> {
    if times.len() != states.len() {
        return Err(Error::Dimension { expected: times.len(), got: states.len() });
    }
    if let Some(s) = states.iter().find(|s| s.len() != 4) {
        return Err(Error::Dimension { expected: 4, got: s.len() });
    }
    let mut out = PoincareSection::default();
    for k in 1..states.len() {
        let (a, b) = (&states[k - 1], &states[k]);
        let (va, vb) = (a[1].as_f64(), b[1].as_f64());
        if !(va * vb < 0.0 || vb == 0.0 && va != 0.0) {
            continue;
        }
        let s = -va / (vb - va);
        let lerp = |i: usize| a[i].as_f64() + s * (b[i].as_f64() - a[i].as_f64());
        if lerp(0) <= 0.0 {
            continue;
        }
        let (ta, tb) = (times[k - 1].as_f64(), times[k].as_f64());
        out.times.push(ta + s * (tb - ta));
        out.points.push((lerp(2), lerp(3)));
    }
    Ok(out)
}

/// Symmetric Hausdorff distance between two point clouds; infinite when
/// exactly one of them is empty.
pub fn hausdorff_distance(a: &PoincareSection, b: &PoincareSection) -> f64 {
    let directed = |p: &[(f64, f64)], q: &[(f64, f64)]| {
        p.iter()
            .map(|x| q.iter().map(|y| (x.0 - y.0).hypot(x.1 - y.1)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 0.0,
        (false, false) => directed(&a.points, &b.points).max(directed(&b.points, &a.points)),
        _ => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonians::{AlphaParticle, MagneticField, PhaseState, System};
    use crate::integrators::{integrate, SchemeDescriptor, SchemeKind};

    #[test]
    fn frozen_guiding_center_collapses() {
        let s = System::Alpha(AlphaParticle::new(0.0, MagneticField::constant(1.0)));
        let scheme = SchemeDescriptor::new(SchemeKind::ImplicitMidpoint, 0.05).unwrap();
        let u = PhaseState::new(vec![0.3, -0.8, 0.25, -1.5]).unwrap();
        let tr = integrate(&s, &scheme, &u, 4000).unwrap();
        let sec = poincare_section(&tr.times, &tr.states).unwrap();
        assert!(sec.len() >= 30);
        assert!(sec.diameter() < 1e-6);
        assert!(sec.points.iter().all(|p| (p.0 - 0.25).abs() < 1e-12 && (p.1 + 1.5).abs() < 1e-12));
    }

    #[test]
    fn interpolated_crossings_are_accurate() {
        // v = (sin t, −cos t): v_y ascends through zero at t = π/2 (mod 2π), where v_x = 1
        let times: Vec<f64> = (0..2000).map(|i| 0.01 * i as f64).collect();
        let states: Vec<Vec<f64>> = times.iter().map(|&t| vec![t.sin(), -t.cos(), t, 2.0 * t]).collect();
        let sec = poincare_section(&times, &states).unwrap();
        assert!(!sec.is_empty());
        for &t in &sec.times {
            assert!(t.cos().abs() < 1e-3);
            assert!(t.sin() > 0.0);
        }
    }

    #[test]
    fn no_crossing_gives_empty_section() {
        let times = [0.0, 1.0, 2.0];
        let states = vec![vec![1.0, 0.5, 0.0, 0.0]; 3];
        assert!(poincare_section(&times, &states).unwrap().is_empty());
        assert!(matches!(poincare_section(&times, &states[..2]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hausdorff_examples() {
        let a = PoincareSection { times: vec![0.0, 1.0], points: vec![(0.0, 0.0), (1.0, 0.0)] };
        let b = PoincareSection { times: vec![0.0], points: vec![(0.0, 0.0)] };
        assert_eq!(hausdorff_distance(&a, &b), 1.0);
        assert_eq!(hausdorff_distance(&a, &a), 0.0);
        assert!(hausdorff_distance(&a, &PoincareSection::default()).is_infinite());
    }
}
