//! Reverse-mode tape over dense row-batched matrices.
//!
//! Every node stores its value and, optionally, a forward tangent (the
//! derivative of the value along one input direction, in practice `∂/∂t`).
//! The backward sweep propagates cotangents for both, so a loss may depend on
//! tangents (`∂ₜΦ` in the exact residual) and still be differentiated exactly.
//!
//! Shapes follow the `(rows, cols)` convention where rows index the batch.
//! Binary elementwise ops broadcast `(1, C)`, `(R, 1)` and `(1, 1)` operands.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::linalg::{matvec, matvec_t};
use crate::scalar::{norm2, Real};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A map `ℝⁿ → ℝᵐ` applied independently to each row, with an optional
/// per-row scalar parameter.
pub trait RowFunction<T: Real>: Send + Sync {
    fn value(&self, x: &[T], param: Option<T>) -> Vec<T>;

    fn jacobian(&self, x: &[T], param: Option<T>) -> Array2<T>;

    /// `d/dδ J(x + δv)` at `δ = 0`, by default a central difference of the
    /// analytic Jacobian.
    fn directional_jacobian(&self, x: &[T], v: &[T], param: Option<T>) -> Array2<T> {
        let nv = norm2(v);
        if nv == T::zero() {
            let j = self.jacobian(x, param);
            return Array2::zeros(j.raw_dim());
        }
        let step = T::epsilon().cbrt() * norm2(x).max(T::one()) / nv;
        let xp: Vec<T> = x.iter().zip(v).map(|(&a, &b)| a + step * b).collect();
        let xm: Vec<T> = x.iter().zip(v).map(|(&a, &b)| a - step * b).collect();
        (self.jacobian(&xp, param) - self.jacobian(&xm, param)) / (T::lit(2.0) * step)
    }
}

enum Op<T: Real> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Exp(Var),
    Gate { t: Var, w: Var, dt: Array2<T>, dtt: Array2<T>, dw: Array2<T>, dtw: Array2<T> },
    Concat(Vec<Var>),
    Select(Var, Vec<usize>),
    Scatter(Var, Vec<usize>),
    RowNorm(Var),
    Rescale(Var, Var),
    SumSquares(Var, Option<Vec<T>>),
    Sum(Var),
    TangentOf(Var),
    RowMap { x: Var, f: Arc<dyn RowFunction<T>>, params: Option<Vec<T>>, jacs: Vec<Array2<T>> },
}

struct Node<T: Real> {
    value: Array2<T>,
    tangent: Option<Array2<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to every parameter loaded on the
/// tape, indexed by parameter id. Unreached parameters have `None`.
#[derive(Debug, Clone)]
pub struct TapeGradients<T> {
    pub params: Vec<Option<Array2<T>>>,
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    n_params: usize,
}

fn add_into<T: Real>(slot: &mut Option<Array2<T>>, g: Array2<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to<T: Real>(g: Array2<T>, shape: (usize, usize)) -> Array2<T> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn full<T: Real>(x: &Array2<T>, shape: (usize, usize)) -> Array2<T> {
    x.broadcast(shape).expect("broadcastable").to_owned()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), n_params: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn tangent(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.0].tangent.as_ref()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, tangent: Option<Array2<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, tangent, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input with an optional forward tangent.
    pub fn input(&mut self, value: Array2<T>, tangent: Option<Array2<T>>) -> Var {
        if let Some(t) = &tangent {
            assert_eq!(t.dim(), value.dim(), "tangent shape must match value shape");
        }
        self.push(value, tangent, Op::Leaf, false)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.input(value, None)
    }

    pub fn scalar_constant(&mut self, c: T) -> Var {
        self.constant(Array2::from_elem((1, 1), c))
    }

    /// Trainable parameter with id `id` (its position in the gradient output).
    pub fn param(&mut self, id: usize, value: Array2<T>) -> Var {
        self.n_params = self.n_params.max(id + 1);
        self.push(value, None, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimensions");
        let value = va.dot(vb);
        let tangent = match (&self.nodes[a.0].tangent, &self.nodes[b.0].tangent) {
            (None, None) => None,
            (ta, tb) => {
                let mut t = Array2::zeros(value.raw_dim());
                if let Some(ta) = ta {
                    t += &ta.dot(vb);
                }
                if let Some(tb) = tb {
                    t += &va.dot(tb);
                }
                Some(t)
            }
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(value, tangent, Op::MatMul(a, b), ng)
    }

    fn binary_shape(&self, a: Var, b: Var) -> (usize, usize) {
        broadcast_shape(self.shape(a), self.shape(b))
            .unwrap_or_else(|| panic!("shapes {:?} and {:?} do not broadcast", self.shape(a), self.shape(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_shape(a, b);
        let value = &full(&self.nodes[a.0].value, shape) + &self.nodes[b.0].value;
        let tangent = self.sum_tangents(a, b, shape, T::one());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, tangent, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_shape(a, b);
        let value = &full(&self.nodes[a.0].value, shape) - &self.nodes[b.0].value;
        let tangent = self.sum_tangents(a, b, shape, -T::one());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, tangent, Op::Sub(a, b), ng)
    }

    fn sum_tangents(&self, a: Var, b: Var, shape: (usize, usize), sign: T) -> Option<Array2<T>> {
        match (&self.nodes[a.0].tangent, &self.nodes[b.0].tangent) {
            (None, None) => None,
            (ta, tb) => {
                let mut t = Array2::zeros(shape);
                if let Some(ta) = ta {
                    t += ta;
                }
                if let Some(tb) = tb {
                    t.scaled_add(sign, tb);
                }
                Some(t)
            }
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_shape(a, b);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = &full(va, shape) * vb;
        let tangent = match (&self.nodes[a.0].tangent, &self.nodes[b.0].tangent) {
            (None, None) => None,
            (ta, tb) => {
                let mut t = Array2::zeros(shape);
                if let Some(ta) = ta {
                    t += &(&full(ta, shape) * vb);
                }
                if let Some(tb) = tb {
                    t += &(&full(va, shape) * tb);
                }
                Some(t)
            }
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(value, tangent, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = &self.nodes[a.0].value * c;
        let tangent = self.nodes[a.0].tangent.as_ref().map(|t| t * c);
        let ng = self.ng(a);
        self.push(value, tangent, Op::Scale(a, c), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.tanh());
        let tangent = self.nodes[x.0].tangent.as_ref().map(|t| {
            let mut d = value.mapv(|y| T::one() - y * y);
            d *= t;
            d
        });
        let ng = self.ng(x);
        self.push(value, tangent, Op::Tanh(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.exp());
        let tangent = self.nodes[x.0].tangent.as_ref().map(|t| &value * t);
        let ng = self.ng(x);
        self.push(value, tangent, Op::Exp(x), ng)
    }

    /// Saturating time gate `tanh(w t)/w` for a time column `t` (`R × 1`) and
    /// a positive rate `w` (`1 × 1`). Tangents on `w` are not supported.
    pub fn gate(&mut self, t: Var, w: Var) -> Var {
        assert_eq!(self.shape(w), (1, 1), "gate rate must be 1×1");
        assert_eq!(self.shape(t).1, 1, "gate time must be a column");
        assert!(self.nodes[w.0].tangent.is_none(), "gate rates cannot carry tangents");
        let wv = self.nodes[w.0].value[[0, 0]];
        let tv = &self.nodes[t.0].value;
        let n = tv.nrows();
        let mut value = Array2::zeros((n, 1));
        let mut dt = Array2::zeros((n, 1));
        let mut dtt = Array2::zeros((n, 1));
        let mut dw = Array2::zeros((n, 1));
        let mut dtw = Array2::zeros((n, 1));
        for i in 0..n {
            let d = gate_derivatives(tv[[i, 0]], wv);
            value[[i, 0]] = d.g;
            dt[[i, 0]] = d.g_t;
            dtt[[i, 0]] = d.g_tt;
            dw[[i, 0]] = d.g_w;
            dtw[[i, 0]] = d.g_tw;
        }
        let tangent = self.nodes[t.0].tangent.as_ref().map(|tt| &dt * tt);
        let ng = self.ng(t) || self.ng(w);
        self.push(value, tangent, Op::Gate { t, w, dt, dtt, dw, dtw }, ng)
    }

    /// Column-wise concatenation of nodes with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let views: Vec<_> = parts
            .iter()
            .map(|p| {
                assert_eq!(self.shape(*p).0, rows, "concat row mismatch");
                self.nodes[p.0].value.view()
            })
            .collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat");
        let tangent = if parts.iter().any(|p| self.nodes[p.0].tangent.is_some()) {
            let tv: Vec<Array2<T>> = parts
                .iter()
                .map(|p| {
                    self.nodes[p.0].tangent.clone().unwrap_or_else(|| Array2::zeros(self.nodes[p.0].value.raw_dim()))
                })
                .collect();
            let views: Vec<_> = tv.iter().map(|a| a.view()).collect();
            Some(ndarray::concatenate(Axis(1), &views).expect("concat"))
        } else {
            None
        };
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, tangent, Op::Concat(parts.to_vec()), ng)
    }

    /// Picks columns `cols` (in that order).
    pub fn select(&mut self, x: Var, cols: &[usize]) -> Var {
        let value = self.nodes[x.0].value.select(Axis(1), cols);
        let tangent = self.nodes[x.0].tangent.as_ref().map(|t| t.select(Axis(1), cols));
        let ng = self.ng(x);
        self.push(value, tangent, Op::Select(x, cols.to_vec()), ng)
    }

    /// Places the columns of `x` at positions `cols` of a zero matrix with
    /// `width` columns.
    pub fn scatter(&mut self, x: Var, cols: &[usize], width: usize) -> Var {
        let src = &self.nodes[x.0].value;
        assert_eq!(src.ncols(), cols.len());
        let place = |src: &Array2<T>| {
            let mut out = Array2::zeros((src.nrows(), width));
            for (k, &c) in cols.iter().enumerate() {
                out.column_mut(c).assign(&src.column(k));
            }
            out
        };
        let value = place(src);
        let tangent = self.nodes[x.0].tangent.as_ref().map(place);
        let ng = self.ng(x);
        self.push(value, tangent, Op::Scatter(x, cols.to_vec()), ng)
    }

    /// Euclidean norm of each row (`R × 1`).
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let value = xv.map_axis(Axis(1), |r| r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt()).insert_axis(Axis(1));
        let tangent = self.nodes[x.0].tangent.as_ref().map(|tx| {
            let mut t = Array2::zeros(value.raw_dim());
            for i in 0..xv.nrows() {
                let n = value[[i, 0]];
                if n > T::zero() {
                    let d = xv.row(i).dot(&tx.row(i));
                    t[[i, 0]] = d / n;
                }
            }
            t
        });
        let ng = self.ng(x);
        self.push(value, tangent, Op::RowNorm(x), ng)
    }

    /// `r_i x_i / ‖x_i‖` per row; rows with `‖x_i‖ = 0` are passed through
    /// unchanged, and rows with `r_i = ‖x_i‖` return `x_i` bit for bit.
    pub fn rescale_rows(&mut self, x: Var, r: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let rv = &self.nodes[r.0].value;
        assert_eq!(rv.dim(), (xv.nrows(), 1), "rescale radius must be a column");
        let mut value = xv.clone();
        for i in 0..xv.nrows() {
            let n = norm_row(xv, i);
            let ri = rv[[i, 0]];
            if n > T::zero() && ri != n {
                let c = ri / n;
                value.row_mut(i).mapv_inplace(|v| v * c);
                snap_norm(&mut value, i, ri);
            }
        }
        let tx = self.nodes[x.0].tangent.as_ref();
        let tr = self.nodes[r.0].tangent.as_ref();
        let tangent = if tx.is_none() && tr.is_none() {
            None
        } else {
            let mut t = Array2::zeros(xv.raw_dim());
            for i in 0..xv.nrows() {
                let n = norm_row(xv, i);
                if n == T::zero() {
                    if let Some(tx) = tx {
                        t.row_mut(i).assign(&tx.row(i));
                    }
                    continue;
                }
                let ri = rv[[i, 0]];
                let x_i = xv.row(i);
                let mut row = t.row_mut(i);
                if let Some(tr) = tr {
                    row.scaled_add(tr[[i, 0]] / n, &x_i);
                }
                if let Some(tx) = tx {
                    let dx = tx.row(i);
                    let xd = x_i.dot(&dx);
                    row.scaled_add(ri / n, &dx);
                    row.scaled_add(-ri * xd / (n * n * n), &x_i);
                }
            }
            Some(t)
        };
        let ng = self.ng(x) || self.ng(r);
        self.push(value, tangent, Op::Rescale(x, r), ng)
    }

    /// `Σ_ij w_j x_ij²` (`1 × 1`); `weights` are per column.
    pub fn sum_squares(&mut self, x: Var, weights: Option<&[T]>) -> Var {
        let xv = &self.nodes[x.0].value;
        if let Some(w) = weights {
            assert_eq!(w.len(), xv.ncols(), "one weight per column");
        }
        let col_w = |j: usize| weights.map_or(T::one(), |w| w[j]);
        let mut acc = T::zero();
        for row in xv.rows() {
            for (j, &v) in row.iter().enumerate() {
                acc += v * v * col_w(j);
            }
        }
        let tangent = self.nodes[x.0].tangent.as_ref().map(|tx| {
            let mut d = T::zero();
            for (row, trow) in xv.rows().into_iter().zip(tx.rows()) {
                for (j, (&v, &dv)) in row.iter().zip(trow.iter()).enumerate() {
                    d += T::lit(2.0) * v * dv * col_w(j);
                }
            }
            Array2::from_elem((1, 1), d)
        });
        let ng = self.ng(x);
        self.push(Array2::from_elem((1, 1), acc), tangent, Op::SumSquares(x, weights.map(|w| w.to_vec())), ng)
    }

    /// Sum of all entries (`1 × 1`).
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[x.0].value.sum());
        let tangent = self.nodes[x.0].tangent.as_ref().map(|t| Array2::from_elem((1, 1), t.sum()));
        let ng = self.ng(x);
        self.push(value, tangent, Op::Sum(x), ng)
    }

    /// Promotes the forward tangent of `x` to a value (its own tangent is
    /// dropped). Errors when `x` carries no tangent.
    pub fn tangent_of(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0]
            .tangent
            .clone()
            .ok_or_else(|| Error::Shape("node carries no forward tangent".into()))?;
        let ng = self.ng(x);
        Ok(self.push(value, None, Op::TangentOf(x), ng))
    }

    /// Applies `f` to every row of `x`; `params` supplies an optional
    /// per-row scalar.
    pub fn row_map(&mut self, x: Var, f: Arc<dyn RowFunction<T>>, params: Option<Vec<T>>) -> Var {
        let xv = &self.nodes[x.0].value;
        let rows = xv.nrows();
        if let Some(p) = &params {
            assert_eq!(p.len(), rows, "one parameter per row");
        }
        let pr = |i: usize| params.as_ref().map(|p| p[i]);
        let mut out: Option<Array2<T>> = None;
        let ng = self.ng(x);
        let tx = self.nodes[x.0].tangent.as_ref();
        let need_jac = ng || tx.is_some();
        let mut jacs = Vec::with_capacity(if need_jac { rows } else { 0 });
        let mut tangent: Option<Array2<T>> = None;
        for i in 0..rows {
            let xi = xv.row(i).to_vec();
            let yi = f.value(&xi, pr(i));
            let o = out.get_or_insert_with(|| Array2::zeros((rows, yi.len())));
            o.row_mut(i).assign(&ndarray::ArrayView1::from(&yi));
            if need_jac {
                let j = f.jacobian(&xi, pr(i));
                if let Some(tx) = tx {
                    let ti = matvec(&j, &tx.row(i).to_vec());
                    let t = tangent.get_or_insert_with(|| Array2::zeros((rows, ti.len())));
                    t.row_mut(i).assign(&ndarray::ArrayView1::from(&ti));
                }
                jacs.push(j);
            }
        }
        let value = out.unwrap_or_else(|| Array2::zeros((0, 0)));
        self.push(value, tangent, Op::RowMap { x, f, params, jacs }, ng)
    }

    /// Gradient of a `1 × 1` root with respect to the loaded parameters.
    pub fn grad(&self, root: Var) -> Result<TapeGradients<T>> {
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        Ok(self.backward(&[(root, Array2::from_elem((1, 1), T::one()), None)]))
    }

    /// General backward sweep from seeded primal and tangent cotangents.
    pub fn backward(&self, seeds: &[(Var, Array2<T>, Option<Array2<T>>)]) -> TapeGradients<T> {
        let n = self.nodes.len();
        let mut g: Vec<Option<Array2<T>>> = (0..n).map(|_| None).collect();
        let mut gt: Vec<Option<Array2<T>>> = (0..n).map(|_| None).collect();
        let mut last = 0;
        for (v, s, st) in seeds {
            add_into(&mut g[v.0], s.clone());
            if let (Some(st), Some(_)) = (st, &self.nodes[v.0].tangent) {
                add_into(&mut gt[v.0], st.clone());
            }
            last = last.max(v.0);
        }
        let mut params: Vec<Option<Array2<T>>> = (0..self.n_params).map(|_| None).collect();
        for i in (0..=last.min(n.saturating_sub(1))).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let gi = g[i].take();
            let gti = gt[i].take();
            if gi.is_none() && gti.is_none() {
                continue;
            }
            self.backward_node(node, gi, gti, &mut g, &mut gt, &mut params);
        }
        TapeGradients { params }
    }

    fn tangent_or_none(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.0].tangent.as_ref()
    }

    fn acc(&self, g: &mut [Option<Array2<T>>], v: Var, val: Array2<T>) {
        if self.nodes[v.0].needs_grad {
            let shape = self.shape(v);
            add_into(&mut g[v.0], reduce_to(val, shape));
        }
    }

    fn acc_t(&self, gt: &mut [Option<Array2<T>>], v: Var, val: Array2<T>) {
        if self.nodes[v.0].needs_grad && self.nodes[v.0].tangent.is_some() {
            let shape = self.shape(v);
            add_into(&mut gt[v.0], reduce_to(val, shape));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_node(
        &self,
        node: &Node<T>,
        gy: Option<Array2<T>>,
        gty: Option<Array2<T>>,
        g: &mut [Option<Array2<T>>],
        gt: &mut [Option<Array2<T>>],
        params: &mut [Option<Array2<T>>],
    ) {
        let shape = node.value.dim();
        let gy_full = || gy.clone().unwrap_or_else(|| Array2::zeros(shape));
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                if let Some(gy) = gy {
                    add_into(&mut params[*id], gy);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ta, tb) = (self.tangent_or_none(*a), self.tangent_or_none(*b));
                if let Some(gy) = &gy {
                    self.acc(g, *a, gy.dot(&vb.t()));
                    self.acc(g, *b, va.t().dot(gy));
                }
                if let Some(gty) = &gty {
                    if let Some(tb) = tb {
                        self.acc(g, *a, gty.dot(&tb.t()));
                    }
                    if let Some(ta) = ta {
                        self.acc(g, *b, ta.t().dot(gty));
                    }
                    self.acc_t(gt, *a, gty.dot(&vb.t()));
                    self.acc_t(gt, *b, va.t().dot(gty));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(gy) = &gy {
                    self.acc(g, *a, gy.clone());
                    self.acc(g, *b, gy * sign);
                }
                if let Some(gty) = &gty {
                    self.acc_t(gt, *a, gty.clone());
                    self.acc_t(gt, *b, gty * sign);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (full(self.value(*a), shape), full(self.value(*b), shape));
                let ta = self.tangent_or_none(*a).map(|t| full(t, shape));
                let tb = self.tangent_or_none(*b).map(|t| full(t, shape));
                let mut ga = gy.as_ref().map(|gy| gy * &vb);
                let mut gb = gy.as_ref().map(|gy| gy * &va);
                if let Some(gty) = &gty {
                    if let Some(tb) = &tb {
                        add_into(&mut ga, gty * tb);
                    }
                    if let Some(ta) = &ta {
                        add_into(&mut gb, gty * ta);
                    }
                    self.acc_t(gt, *a, gty * &vb);
                    self.acc_t(gt, *b, gty * &va);
                }
                if let Some(ga) = ga {
                    self.acc(g, *a, ga);
                }
                if let Some(gb) = gb {
                    self.acc(g, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                if let Some(gy) = &gy {
                    self.acc(g, *a, gy * *c);
                }
                if let Some(gty) = &gty {
                    self.acc_t(gt, *a, gty * *c);
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let d = y.mapv(|v| T::one() - v * v);
                let mut gx = gy_full() * &d;
                if let Some(gty) = &gty {
                    if let Some(tx) = self.tangent_or_none(*x) {
                        let mut sec = y * &d;
                        sec *= tx;
                        sec *= gty;
                        gx.scaled_add(-T::lit(2.0), &sec);
                    }
                    self.acc_t(gt, *x, gty * &d);
                }
                self.acc(g, *x, gx);
            }
            Op::Exp(x) => {
                let y = &node.value;
                let mut gx = gy_full() * y;
                if let Some(gty) = &gty {
                    if let Some(tx) = self.tangent_or_none(*x) {
                        gx += &(&(gty * tx) * y);
                    }
                    self.acc_t(gt, *x, gty * y);
                }
                self.acc(g, *x, gx);
            }
            Op::Gate { t, w, dt, dtt, dw, dtw } => {
                let gyv = gy_full();
                let mut g_t = &gyv * dt;
                let mut g_w = (&gyv * dw).sum();
                if let Some(gty) = &gty {
                    if let Some(tt) = self.tangent_or_none(*t) {
                        g_t += &(&(gty * tt) * dtt);
                        g_w += (&(gty * tt) * dtw).sum();
                    }
                    self.acc_t(gt, *t, gty * dt);
                }
                self.acc(g, *t, g_t);
                self.acc(g, *w, Array2::from_elem((1, 1), g_w));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if let Some(gy) = &gy {
                        self.acc(g, *p, gy.slice(s![.., off..off + w]).to_owned());
                    }
                    if let Some(gty) = &gty {
                        self.acc_t(gt, *p, gty.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::Select(x, cols) => {
                let width = self.shape(*x).1;
                let spread = |src: &Array2<T>| {
                    let mut out = Array2::zeros((src.nrows(), width));
                    for (k, &c) in cols.iter().enumerate() {
                        let mut col = out.column_mut(c);
                        col += &src.column(k);
                    }
                    out
                };
                if let Some(gy) = &gy {
                    self.acc(g, *x, spread(gy));
                }
                if let Some(gty) = &gty {
                    self.acc_t(gt, *x, spread(gty));
                }
            }
            Op::Scatter(x, cols) => {
                if let Some(gy) = &gy {
                    self.acc(g, *x, gy.select(Axis(1), cols));
                }
                if let Some(gty) = &gty {
                    self.acc_t(gt, *x, gty.select(Axis(1), cols));
                }
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let tx = self.tangent_or_none(*x);
                let mut gx = Array2::zeros(xv.raw_dim());
                let mut gtx = Array2::zeros(xv.raw_dim());
                for i in 0..xv.nrows() {
                    let n = node.value[[i, 0]];
                    if n == T::zero() {
                        continue;
                    }
                    let xi = xv.row(i);
                    if let Some(gy) = &gy {
                        gx.row_mut(i).scaled_add(gy[[i, 0]] / n, &xi);
                    }
                    if let Some(gty) = &gty {
                        let c = gty[[i, 0]];
                        if let Some(tx) = tx {
                            let dx = tx.row(i);
                            let xd = xi.dot(&dx);
                            gx.row_mut(i).scaled_add(c / n, &dx);
                            gx.row_mut(i).scaled_add(-c * xd / (n * n * n), &xi);
                        }
                        gtx.row_mut(i).scaled_add(c / n, &xi);
                    }
                }
                self.acc(g, *x, gx);
                if gty.is_some() {
                    self.acc_t(gt, *x, gtx);
                }
            }
            Op::Rescale(x, r) => self.backward_rescale(*x, *r, gy.as_ref(), gty.as_ref(), g, gt),
            Op::SumSquares(x, weights) => {
                let xv = self.value(*x);
                let two = T::lit(2.0);
                let wrow = |a: &Array2<T>| -> Array2<T> {
                    match weights {
                        Some(w) => {
                            let wr = Array2::from_shape_vec((1, w.len()), w.clone()).expect("weights");
                            a * &wr
                        }
                        None => a.clone(),
                    }
                };
                let mut gx = Array2::zeros(xv.raw_dim());
                if let Some(gy) = &gy {
                    gx.scaled_add(two * gy[[0, 0]], &wrow(xv));
                }
                if let Some(gty) = &gty {
                    let c = gty[[0, 0]];
                    if let Some(tx) = self.tangent_or_none(*x) {
                        gx.scaled_add(two * c, &wrow(tx));
                    }
                    self.acc_t(gt, *x, wrow(xv) * (two * c));
                }
                self.acc(g, *x, gx);
            }
            Op::Sum(x) => {
                let sx = self.shape(*x);
                if let Some(gy) = &gy {
                    self.acc(g, *x, Array2::from_elem(sx, gy[[0, 0]]));
                }
                if let Some(gty) = &gty {
                    self.acc_t(gt, *x, Array2::from_elem(sx, gty[[0, 0]]));
                }
            }
            Op::TangentOf(x) => {
                if let Some(gy) = gy {
                    self.acc_t(gt, *x, gy);
                }
            }
            Op::RowMap { x, f, params, jacs } => {
                let xv = self.value(*x);
                let tx = self.tangent_or_none(*x);
                let mut gx = Array2::zeros(xv.raw_dim());
                let mut gtx = Array2::zeros(xv.raw_dim());
                for (i, j) in jacs.iter().enumerate() {
                    if let Some(gy) = &gy {
                        let v = matvec_t(j, &gy.row(i).to_vec());
                        gx.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
                    }
                    if let Some(gty) = &gty {
                        let c = gty.row(i).to_vec();
                        if let Some(tx) = tx {
                            let xi = xv.row(i).to_vec();
                            let dj = f.directional_jacobian(&xi, &tx.row(i).to_vec(), params.as_ref().map(|p| p[i]));
                            let v = matvec_t(&dj, &c);
                            let mut row = gx.row_mut(i);
                            row += &ndarray::ArrayView1::from(&v);
                        }
                        let v = matvec_t(j, &c);
                        gtx.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
                    }
                }
                self.acc(g, *x, gx);
                if gty.is_some() {
                    self.acc_t(gt, *x, gtx);
                }
            }
        }
    }

    fn backward_rescale(
        &self,
        x: Var,
        r: Var,
        gy: Option<&Array2<T>>,
        gty: Option<&Array2<T>>,
        g: &mut [Option<Array2<T>>],
        gt: &mut [Option<Array2<T>>],
    ) {
        let xv = self.value(x);
        let rv = self.value(r);
        let tx = self.tangent_or_none(x);
        let tr = self.tangent_or_none(r);
        let rows = xv.nrows();
        let mut gx = Array2::zeros(xv.raw_dim());
        let mut gr = Array2::zeros((rows, 1));
        let mut gtx = Array2::zeros(xv.raw_dim());
        let mut gtr = Array2::zeros((rows, 1));
        for i in 0..rows {
            let n = norm_row(xv, i);
            let xi = xv.row(i);
            if n == T::zero() {
                if let Some(gy) = gy {
                    gx.row_mut(i).assign(&gy.row(i));
                }
                if let Some(gty) = gty {
                    gtx.row_mut(i).assign(&gty.row(i));
                }
                continue;
            }
            let ri = rv[[i, 0]];
            let n2 = n * n;
            let n3 = n2 * n;
            if let Some(gy) = gy {
                let gyi = gy.row(i);
                let gx_ = gyi.dot(&xi);
                gr[[i, 0]] += gx_ / n;
                let mut row = gx.row_mut(i);
                row.scaled_add(ri / n, &gyi);
                row.scaled_add(-ri * gx_ / n3, &xi);
            }
            if let Some(gty) = gty {
                let c = gty.row(i);
                let cx = c.dot(&xi);
                gtr[[i, 0]] += cx / n;
                {
                    let mut row = gtx.row_mut(i);
                    row.scaled_add(ri / n, &c);
                    row.scaled_add(-ri * cx / n3, &xi);
                }
                let dr = tr.map_or(T::zero(), |t| t[[i, 0]]);
                let mut row = gx.row_mut(i);
                if dr != T::zero() {
                    row.scaled_add(dr / n, &c);
                    row.scaled_add(-dr * cx / n3, &xi);
                }
                if let Some(tx) = tx {
                    let dx = tx.row(i);
                    let xd = xi.dot(&dx);
                    let cd = c.dot(&dx);
                    gr[[i, 0]] += cd / n - cx * xd / n3;
                    row.scaled_add(-ri * cd / n3, &xi);
                    row.scaled_add(-ri * xd / n3, &c);
                    row.scaled_add(-ri * cx / n3, &dx);
                    row.scaled_add(T::lit(3.0) * ri * cx * xd / (n3 * n2), &xi);
                }
            }
        }
        self.acc(g, x, gx);
        self.acc(g, r, gr);
        if gty.is_some() {
            self.acc_t(gt, x, gtx);
            self.acc_t(gt, r, gtr);
        }
    }
}

fn norm_row<T: Real>(x: &Array2<T>, i: usize) -> T {
    x.row(i).iter().fold(T::zero(), |a, &v| a + v * v).sqrt()
}

/// `ulp(v)`, the spacing of floats at `|v|`.
fn ulp<T: Real>(v: T) -> T {
    let (_, exp, _) = v.integer_decode();
    T::lit(2.0).powi(i32::from(exp))
}

/// Adjusts the row by a few ulps so that [`norm_row`] returns exactly `r`.
/// The computed norm is monotone in each `|x_ij|`, so one entry at a time is
/// found by bisection in a small window around its current value, largest
/// entry first, with windows up to `2¹⁴·eps·r`. When every single-entry
/// search steps over `r`, the largest entry is shifted by up to 64 ulps and
/// the search repeats. If nothing lands, the row is restored.
fn snap_norm<T: Real>(x: &mut Array2<T>, i: usize, r: T) {
    if norm_row(x, i) == r {
        return;
    }
    let start = x.row(i).to_owned();
    let Some(big) = (0..start.len()).max_by(|&a, &b| {
        start[a].abs().partial_cmp(&start[b].abs()).unwrap_or(std::cmp::Ordering::Equal)
    }) else {
        return;
    };
    let step = ulp(start[big]);
    for k in (0..=128).map(|k: i32| if k % 2 == 0 { k / 2 } else { -(k + 1) / 2 }) {
        x.row_mut(i).assign(&start);
        x[[i, big]] = start[big] + T::lit(f64::from(k)) * step;
        if snap_entry(x, i, r) {
            return;
        }
    }
    x.row_mut(i).assign(&start);
}

fn snap_entry<T: Real>(x: &mut Array2<T>, i: usize, r: T) -> bool {
    if norm_row(x, i) == r {
        return true;
    }
    let mut order: Vec<usize> = (0..x.ncols()).filter(|&j| x[[i, j]] != T::zero()).collect();
    order.sort_by(|&a, &b| x[[i, b]].abs().partial_cmp(&x[[i, a]].abs()).unwrap_or(std::cmp::Ordering::Equal));
    for j in order {
        let orig = x[[i, j]];
        let (mag, sign) = (orig.abs(), orig.signum());
        for widen in [4.0, 64.0, 1024.0, 16384.0] {
            let d = r * T::epsilon() * T::lit(widen);
            let (mut lo, mut hi) = ((mag - d).max(T::zero()), mag + d);
            x[[i, j]] = sign * lo;
            let below = norm_row(x, i) <= r;
            x[[i, j]] = sign * hi;
            if !below || norm_row(x, i) < r {
                continue;
            }
            for _ in 0..128 {
                let mid = lo + (hi - lo) * T::lit(0.5);
                if mid == lo || mid == hi {
                    break;
                }
                x[[i, j]] = sign * mid;
                let m = norm_row(x, i);
                if m == r {
                    return true;
                }
                if m < r {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            x[[i, j]] = sign * hi;
            if norm_row(x, i) == r {
                return true;
            }
            // the window brackets r but no value of this entry hits it
            break;
        }
        x[[i, j]] = orig;
    }
    false
}

/// Value and partial derivatives of `g(t, w) = tanh(w t)/w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDerivatives<T> {
    pub g: T,
    pub g_t: T,
    pub g_tt: T,
    pub g_w: T,
    pub g_tw: T,
}

/// Below this `|w t|` the gate switches to its Taylor series.
pub const GATE_SERIES_THRESHOLD: f64 = 1e-4;

pub fn gate_derivatives<T: Real>(t: T, w: T) -> GateDerivatives<T> {
    let s = w * t;
    let th = s.tanh();
    let sech2 = T::one() - th * th;
    let two = T::lit(2.0);
    let g_t = sech2;
    let g_tt = -two * w * th * sech2;
    let g_tw = -two * t * th * sech2;
    if s.abs() < T::lit(GATE_SERIES_THRESHOLD) {
        let s2 = s * s;
        let t2 = t * t;
        let g = t * (T::one() - s2 / T::lit(3.0) + T::lit(2.0 / 15.0) * s2 * s2);
        let g_w = t2 * (-two * s / T::lit(3.0) + T::lit(8.0 / 15.0) * s2 * s);
        GateDerivatives { g, g_t, g_tt, g_w, g_tw }
    } else {
        GateDerivatives { g: th / w, g_t, g_tt, g_w: (s * sech2 - th) / (w * w), g_tw }
    }
}

/// Elementwise helper used in tests and diagnostics.
pub fn max_abs_diff<T: Real>(a: &Array2<T>, b: &Array2<T>) -> T {
    let mut m = T::zero();
    Zip::from(a).and(b).for_each(|&x, &y| m = m.max((x - y).abs()));
    m
}
