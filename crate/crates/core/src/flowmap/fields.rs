//! Row-function adapters exposing a system's vector field to the tape.

use ndarray::Array2;

use crate::diffnet::RowFunction;
use crate::hamiltonians::{HamiltonianSystem, System};
use crate::linalg::matvec;
use crate::scalar::Real;

pub(crate) fn with_param<T: Real>(system: &System<T>, p: Option<T>) -> std::borrow::Cow<'_, System<T>> {
    match p {
        Some(p) if system.parameter().is_some() => std::borrow::Cow::Owned(system.with_parameter(p)),
        _ => std::borrow::Cow::Borrowed(system),
    }
}

/// `x ↦ f(x)`.
pub struct Field<T>(pub System<T>);

impl<T: Real> RowFunction<T> for Field<T> {
    fn value(&self, x: &[T], p: Option<T>) -> Vec<T> {
        with_param(&self.0, p).vector_field(x)
    }

    fn jacobian(&self, x: &[T], p: Option<T>) -> Array2<T> {
        with_param(&self.0, p).jacobian(x)
    }
}

/// `x ↦ Df(x) f(x)`. Its Jacobian `D²f[f] + Df·Df` uses a central difference
/// of the analytic `Df` along `f` for the second-derivative term.
pub struct FieldDf<T>(pub System<T>);

impl<T: Real> RowFunction<T> for FieldDf<T> {
    fn value(&self, x: &[T], p: Option<T>) -> Vec<T> {
        let s = with_param(&self.0, p);
        matvec(&s.jacobian(x), &s.vector_field(x))
    }

    fn jacobian(&self, x: &[T], p: Option<T>) -> Array2<T> {
        let s = with_param(&self.0, p);
        let j = s.jacobian(x);
        let f = s.vector_field(x);
        let second = Field(s.into_owned()).directional_jacobian(x, &f, p);
        second + &j.dot(&j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonians::{make_system, ParamTable};

    #[test]
    fn field_df_jacobian_matches_differences() {
        let mut p = ParamTable::new();
        p.insert("epsilon".into(), 0.2);
        let s: System<f64> = make_system("npco", &p).unwrap();
        let g = FieldDf(s);
        let x = [0.3, -0.5, 0.7, 0.2];
        let j = g.jacobian(&x, None);
        let d = 1e-6;
        for c in 0..4 {
            let mut a = x;
            let mut b = x;
            a[c] += d;
            b[c] -= d;
            let (va, vb) = (g.value(&a, None), g.value(&b, None));
            for r in 0..4 {
                let fd = (va[r] - vb[r]) / (2.0 * d);
                assert!((fd - j[[r, c]]).abs() < 1e-6 * fd.abs().max(1.0), "[{r},{c}] {fd} vs {}", j[[r, c]]);
            }
        }
    }
}
