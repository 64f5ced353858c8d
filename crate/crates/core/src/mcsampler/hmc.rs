use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use rayon::prelude::*;

use super::{McSamplerConfig, Sample, SampleSet};
use crate::error::{Error, Result};
use crate::hamiltonians::{HamiltonianSystem, SeparableParts, System};
use crate::integrators::SchemeDescriptor;
use crate::scalar::Real;

fn parts<T: Real>(system: &System<T>) -> Result<SeparableParts<T>> {
    system.separable().ok_or_else(|| Error::WrongSystem("a separable Hamiltonian".into()))
}

fn potential<T: Real>(system: &System<T>, u: &[T]) -> Result<T> {
    system.potential(u).ok_or_else(|| Error::WrongSystem("a separable Hamiltonian".into()))
}

/// Momentum on the kinetic-energy sphere `½ pᵀM⁻¹p = H₀ − U(q)`, uniform
/// in the `M^{-1/2}`-whitened coordinates. The momentum entries of `u` are
/// ignored; the result is ordered like the system's momentum indices.
pub fn refresh_momentum<T: Real, R: Rng>(system: &System<T>, u: &[T], h0: T, rng: &mut R) -> Result<Vec<T>> {
    let sp = parts(system)?;
    let budget = h0 - potential(system, u)?;
    if budget < T::zero() || !budget.is_finite() {
        return Err(Error::InfeasiblePosition(budget.as_f64()));
    }
    let k = sp.momentum.len();
    if budget == T::zero() {
        return Ok(vec![T::zero(); k]);
    }
    let z: Vec<f64> = loop {
        let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        if z.iter().any(|v: &f64| *v != 0.0) {
            break z;
        }
    };
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = (T::lit(2.0) * budget).sqrt();
    let mut p: Vec<T> = z.iter().zip(&sp.inv_mass).map(|(&zi, &mi)| r * T::lit(zi / zn) / mi.sqrt()).collect();
    // one multiplicative correction so that H(p, q) lands on H₀ to rounding
    let kinetic = p.iter().zip(&sp.inv_mass).fold(T::zero(), |a, (&pi, &mi)| a + T::lit(0.5) * mi * pi * pi);
    if kinetic > T::zero() {
        let c = (budget / kinetic).sqrt();
        p.iter_mut().for_each(|v| *v *= c);
    }
    Ok(p)
}

fn with_momentum<T: Real>(u: &[T], sp: &SeparableParts<T>, p: &[T]) -> Vec<T> {
    let mut out = u.to_vec();
    for (&i, &v) in sp.momentum.iter().zip(p) {
        out[i] = v;
    }
    out
}

fn run_chain<T: Real>(
    system: &System<T>,
    u0: &[T],
    level: T,
    chain: usize,
    cfg: &McSamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample<T>>> {
    let sp = parts(system)?;
    let scheme = SchemeDescriptor::new(cfg.scheme, T::lit(cfg.step_size()))?;
    scheme.supports(system)?;
    let duration = Exp::new(1.0 / cfg.lambda).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let h = cfg.step_size();
    let start_budget = level - potential(system, u0)?;
    if !(start_budget > T::zero()) {
        return Err(Error::InfeasiblePosition(start_budget.as_f64()));
    }
    let mut current = u0.to_vec();
    let mut out = Vec::with_capacity(cfg.n_samples);
    for step in 0..cfg.n_samples {
        let mut attempt = 0;
        let next = loop {
            let p = refresh_momentum(system, &current, level, rng)?;
            let mut u = with_momentum(&current, &sp, &p);
            let t: f64 = duration.sample(rng);
            let n = ((t / h).round() as usize).max(1);
            for _ in 0..n {
                u = scheme.step(system, &u)?.0;
            }
            if potential(system, &u)? < level && u.iter().all(|v| v.is_finite()) {
                break u;
            }
            attempt += 1;
            if attempt > cfg.max_retries {
                return Err(Error::InfeasiblePosition((level - potential(system, &u)?).as_f64()));
            }
        };
        current = next;
        out.push(Sample { chain, step, level, coords: current.clone() });
    }
    Ok(out)
}

/// One HMC-H₀ chain of `cfg.n_samples` states at energy `cfg.h0`, started
/// from the positions of `u0`.
pub fn hmc_h0_chain<T: Real>(system: &System<T>, u0: &[T], cfg: &McSamplerConfig) -> Result<SampleSet<T>> {
    cfg.validate()?;
    if u0.len() != system.dim() {
        return Err(Error::Dimension { expected: system.dim(), got: u0.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = run_chain(system, u0, T::lit(cfg.h0), 0, cfg, &mut rng)?;
    Ok(SampleSet { dim: system.dim(), samples })
}

/// Chains on `cfg.levels` energies drawn from `N(H₀, (f·H₀)²)`, truncated
/// above the smallest potential in `pool`. Level `ℓ` starts from the first
/// pool entry (cyclically from `ℓ`) whose potential lies below its energy and
/// runs `per_level` steps on its own random stream.
pub fn narrowband_dataset<T: Real>(
    system: &System<T>,
    pool: &[Vec<T>],
    cfg: &McSamplerConfig,
    per_level: usize,
) -> Result<SampleSet<T>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let u_min = pool.iter().map(|q| potential(system, q).map(|v| v.as_f64())).collect::<Result<Vec<_>>>()?;
    let floor = u_min.iter().copied().fold(f64::INFINITY, f64::min);
    let band = Normal::new(cfg.h0, cfg.band_fraction * cfg.h0.abs()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut levels = Vec::with_capacity(cfg.levels);
    for _ in 0..cfg.levels {
        let e = (0..1000).map(|_| band.sample(&mut rng)).find(|&e| e > floor);
        levels.push(e.ok_or(Error::InfeasiblePosition(cfg.h0 - floor))?);
    }
    let chain_cfg = McSamplerConfig { n_samples: per_level, ..cfg.clone() };
    let chains: Vec<Result<Option<Vec<Sample<T>>>>> = levels
        .par_iter()
        .enumerate()
        .map(|(l, &e)| {
            let start = (0..pool.len()).map(|k| (l + k) % pool.len()).find(|&k| u_min[k] < e);
            let Some(k) = start else { return Ok(None) };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(l as u64 + 1);
            run_chain(system, &pool[k], T::lit(e), l, &chain_cfg, &mut rng).map(Some)
        })
        .collect();
    let mut samples = Vec::new();
    let mut any = false;
    for c in chains {
        if let Some(c) = c? {
            any = true;
            samples.extend(c);
        }
    }
    if !any {
        return Err(Error::InfeasiblePosition(cfg.h0 - floor));
    }
    Ok(SampleSet { dim: system.dim(), samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonians::{make_system, ParamTable};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn sys(name: &str) -> System<f64> {
        make_system(name, &ParamTable::new()).unwrap()
    }

    fn chi2_uniform(values: &[f64], lo: f64, hi: f64, bins: usize) -> f64 {
        let mut counts = vec![0usize; bins];
        for &v in values {
            let k = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
            counts[k.min(bins - 1)] += 1;
        }
        let expect = values.len() as f64 / bins as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn refresh_lands_on_energy() {
        let s = sys("harmonic");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = refresh_momentum(&s, &[9.0, 0.0], 0.5, &mut rng).unwrap();
        assert!((p[0].abs() - 1.0).abs() < 1e-15);
        assert_eq!(refresh_momentum(&s, &[0.0, 1.0], 0.5, &mut rng).unwrap(), vec![0.0]);
        assert!(matches!(refresh_momentum(&s, &[0.0, 2.0], 0.5, &mut rng), Err(Error::InfeasiblePosition(_))));
        let mut plus = 0usize;
        for _ in 0..10_000 {
            let p = refresh_momentum(&s, &[0.0, 0.3], 0.5, &mut rng).unwrap();
            assert!((s.energy(&[p[0], 0.3]) - 0.5).abs() <= 8.0 * f64::EPSILON * 0.5);
            plus += usize::from(p[0] > 0.0);
        }
        let stat = ((plus as f64 - 5000.0).powi(2) + (5000.0 - plus as f64).powi(2)) / 5000.0;
        assert!(1.0 - ChiSquared::new(1.0).unwrap().cdf(stat) > 0.01);
    }

    #[test]
    fn harmonic_chain_is_uniform_in_angle() {
        let s = sys("harmonic");
        let cfg = McSamplerConfig { h0: 0.5, lambda: 1.0, n_samples: 10_000, seed: 3, ..Default::default() };
        let set = hmc_h0_chain(&s, &[0.0, 0.2], &cfg).unwrap();
        assert_eq!(set.len(), 10_000);
        assert!(set.max_relative_drift(|u| s.energy(u)) < 1e-4 / 0.5);
        let angles: Vec<f64> = set.samples.iter().map(|x| x.coords[0].atan2(x.coords[1])).collect();
        let p = chi2_uniform(&angles, -std::f64::consts::PI, std::f64::consts::PI, 36);
        assert!(p > 0.01, "p = {p}");
        let empty = hmc_h0_chain(&s, &[0.0, 0.2], &McSamplerConfig { n_samples: 0, ..cfg }).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn double_well_histogram_is_stable() {
        let s = sys("double_well");
        let cfg = McSamplerConfig { h0: 0.5, lambda: 2.0, n_samples: 40_000, seed: 11, ..Default::default() };
        let set = hmc_h0_chain(&s, &[0.0, 1.0], &cfg).unwrap();
        let bins = 20;
        let hist = |xs: &[Sample<f64>]| {
            let mut h = vec![0.0; bins];
            for x in xs {
                let a = x.coords[0].atan2(x.coords[1]);
                let k = (((a + std::f64::consts::PI) / std::f64::consts::TAU) * bins as f64) as usize;
                h[k.min(bins - 1)] += 1.0 / xs.len() as f64;
            }
            h
        };
        let (a, b) = set.samples.split_at(20_000);
        let tv: f64 = hist(a).iter().zip(hist(b)).map(|(x, y)| (x - y).abs()).sum::<f64>() * 0.5;
        assert!(tv < 0.05, "{tv}");
    }

    #[test]
    fn narrowband_levels() {
        let s = sys("harmonic");
        let cfg = McSamplerConfig { h0: 0.5, lambda: 1.0, levels: 16, seed: 5, ..Default::default() };
        let pool = vec![vec![0.0, 0.0], vec![0.0, 0.5]];
        let set = narrowband_dataset(&s, &pool, &cfg, 20).unwrap();
        assert_eq!(set.len(), 16 * 20);
        let again = narrowband_dataset(&s, &pool, &cfg, 20).unwrap();
        assert_eq!(set, again);
        for x in &set.samples {
            assert!((s.energy(&x.coords) - x.level).abs() / x.level < 1e-3);
        }
        let far = vec![vec![0.0, 100.0]];
        assert!(narrowband_dataset(&s, &far, &cfg, 5).is_err());
    }
}
