use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `{x : A x = b, xᵀ M x = c}` with `A` of full row rank and `M` positive
/// definite.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraintSpec {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub m: DMatrix<f64>,
    pub c: f64,
}

/// Rank threshold relative to the largest pivot.
const RANK_TOL: f64 = 1e-12;

struct Prepared {
    xp: DVector<f64>,
    null: DMatrix<f64>,
    m: DMatrix<f64>,
    quad: f64,
}

impl LinearConstraintSpec {
    fn prepare(&self) -> Result<Prepared> {
        let d = self.m.nrows();
        if self.m.ncols() != d || self.a.ncols() != d {
            return Err(Error::Dimension { expected: d, got: self.a.ncols() });
        }
        if self.b.len() != self.a.nrows() {
            return Err(Error::Dimension { expected: self.a.nrows(), got: self.b.len() });
        }
        if !(self.c >= 0.0) {
            return Err(Error::InvalidParameter(format!("level c must be ≥ 0, got {}", self.c)));
        }
        if (&self.m - self.m.transpose()).amax() > 1e-12 * self.m.amax().max(1.0) {
            return Err(Error::InvalidParameter("metric M must be symmetric".into()));
        }
        let chol = self.m.clone().cholesky().ok_or_else(|| Error::InvalidParameter("metric M is not positive definite".into()))?;
        let k = self.a.nrows();
        // column-pivoted QR of [Aᵀ | 0]: the first k columns of Q span the row
        // space of A, the remaining d − k its null space
        let mut padded = DMatrix::zeros(d, d);
        padded.view_mut((0, 0), (d, k)).copy_from(&self.a.transpose());
        let qr = padded.col_piv_qr();
        let r = qr.r();
        let top = r[(0, 0)].abs();
        let rank = (0..k.min(d)).filter(|&i| r[(i, i)].abs() > RANK_TOL * top.max(f64::MIN_POSITIVE)).count();
        if rank < k {
            return Err(Error::InvalidParameter(format!("A must have full row rank {k}, got {rank}")));
        }
        let q = qr.q();
        let null = q.columns(k, d - k).into_owned();
        let minv_at = chol.solve(&self.a.transpose());
        let gram = &self.a * &minv_at;
        let y = gram.lu().solve(&self.b).ok_or_else(|| Error::InvalidParameter("A M⁻¹ Aᵀ is singular".into()))?;
        let xp = &minv_at * y;
        let quad = xp.dot(&(&self.m * &xp));
        Ok(Prepared { xp, null, m: self.m.clone(), quad })
    }
}

/// Draws `x` with `A x = b` and `xᵀ M x = c`: particular solution, random
/// null-space direction, then the quadratic correction along it with a
/// random choice between the two roots.
pub fn constrained_refresh<R: Rng>(spec: &LinearConstraintSpec, rng: &mut R) -> Result<DVector<f64>> {
    let p = spec.prepare()?;
    if p.quad > spec.c {
        return Err(Error::EmptyIntersection { quad: p.quad, level: spec.c });
    }
    let free = p.null.ncols();
    if free == 0 {
        if p.quad == spec.c {
            return Ok(p.xp);
        }
        return Err(Error::EmptyIntersection { quad: p.quad, level: spec.c });
    }
    loop {
        let z = DVector::from_fn(free, |_, _| rng.sample::<f64, _>(StandardNormal));
        let zn = z.norm();
        if zn == 0.0 {
            continue;
        }
        let w = &p.null * (z / zn);
        let mw = &p.m * &w;
        let qa = w.dot(&mw);
        if !(qa > 0.0) {
            continue;
        }
        let qb = 2.0 * p.xp.dot(&mw);
        let qc = p.quad - spec.c;
        let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let alpha = (-qb + sign * disc) / (2.0 * qa);
        return Ok(&p.xp + w * alpha);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn planar_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = LinearConstraintSpec {
            a: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            b: DVector::from_vec(vec![0.0]),
            m: DMatrix::identity(2, 2),
            c: 1.0,
        };
        let mut up = 0;
        for _ in 0..4000 {
            let x = constrained_refresh(&spec, &mut rng).unwrap();
            assert!(x[0].abs() < 1e-15 && (x[1].abs() - 1.0).abs() < 1e-15);
            up += usize::from(x[1] > 0.0);
        }
        assert!((up as f64 / 4000.0 - 0.5).abs() < 0.04);
        let mut s2 = LinearConstraintSpec { a: DMatrix::identity(2, 2), b: DVector::from_vec(vec![2.0, 0.0]), ..spec.clone() };
        assert!(matches!(constrained_refresh(&s2, &mut rng), Err(Error::EmptyIntersection { .. })));
        s2.b = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(constrained_refresh(&s2, &mut rng).unwrap(), DVector::from_vec(vec![1.0, 0.0]));
    }

    #[test]
    fn rejects_bad_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rank_deficient = LinearConstraintSpec {
            a: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]),
            b: DVector::zeros(2),
            m: DMatrix::identity(3, 3),
            c: 1.0,
        };
        assert!(constrained_refresh(&rank_deficient, &mut rng).is_err());
        let indefinite = LinearConstraintSpec {
            a: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            b: DVector::zeros(1),
            m: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            c: 1.0,
        };
        assert!(constrained_refresh(&indefinite, &mut rng).is_err());
    }
}
