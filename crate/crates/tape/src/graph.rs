//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every forward call appends a node holding its value; [`Graph::backward`]
//! walks the nodes in reverse creation order. Tensors are row-major and most
//! operations treat the last axis as the feature axis and everything before it
//! as rows.

use std::collections::HashMap;

use crate::real::{gemm, View};
use crate::{ParamId, ParamStore, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Column window `[col, col + dim)` of a row-major 2-D node, used to feed packed
/// projections (e.g. a fused QKV matrix) into attention without copying.
#[derive(Clone, Copy, Debug)]
pub struct Slot {
    pub var: Var,
    pub col: usize,
}

impl From<Var> for Slot {
    fn from(var: Var) -> Self {
        Slot { var, col: 0 }
    }
}

/// Shape of a batched multi-head attention call.
///
/// Queries are laid out as `groups` consecutive blocks of `tq` rows, keys and
/// values as `groups` blocks of `tk` rows; all have `dim` columns split evenly
/// over `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub groups: usize,
    pub tq: usize,
    pub tk: usize,
    pub heads: usize,
    pub dim: usize,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    RowScale { x: Var, s: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    Gelu { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Softplus { x: Var },
    Sqr { x: Var },
    Sqrt { x: Var },
    Recip { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Slot, k: Slot, v: Slot, spec: AttnSpec, probs: Vec<T> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows { xs: Vec<Var> },
    Reshape { x: Var },
    Transpose { x: Var },
    SumAll { x: Var },
    RowSum { x: Var },
    RowLogSumExp { x: Var },
    RowNormalizeSum { x: Var, sums: Vec<T> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single forward/backward pass.
///
/// Parameters are read from an optional [`ParamStore`]; each parameter is
/// materialised at most once per graph so its gradient is accumulated in one
/// place.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    store: Option<&'p ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let x2 = x * x;
    let u = c * (x + a * x2 * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let du = c * (T::one() + T::of(3.0) * a * x2);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), store: Some(store), param_vars: HashMap::new() }
    }

    /// Graph without parameters (pure functions of inputs).
    pub fn detached() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), store: None, param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on a tensor of shape {:?}", t.shape());
        t.data()[0].as_f64()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (readable with [`Self::grad`] after backward).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let value = store.value(id).clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    // ----- linear algebra -------------------------------------------------

    /// `op(a) @ op(b)` for 2-D nodes, with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2-D operands, got {sa:?} and {sb:?}");
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dims differ: {sa:?} (t={ta}) x {sb:?} (t={tb})");
        let mut out = vec![T::zero(); m * n];
        let va = view2(self.value(a).data(), sa[1], ta);
        let vb = view2(self.value(b).data(), sb[1], tb);
        gemm(m, k, n, T::one(), va, vb, T::zero(), &mut out, 0, n, 1);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul { a, b, ta, tb, m, k, n }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `x @ w + b` where `x` is `[.., in]`, `w` is `[in, out]` and `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *xs.last().unwrap();
        assert!(ws.len() == 2 && ws[0] == cin, "linear: input {xs:?} incompatible with weight {ws:?}");
        let cout = ws[1];
        let rows = self.value(x).len() / cin;
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), cout, "linear: bias length");
            for r in 0..rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            rows,
            cin,
            cout,
            T::one(),
            View::rows(self.value(x).data(), cin),
            View::rows(self.value(w).data(), cout),
            beta,
            &mut out,
            0,
            cout,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let ng = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        self.push(Tensor::new(&shape, out), Op::Linear { x, w, b }, ng)
    }

    // ----- elementwise ----------------------------------------------------

    /// `a + b` where `b` is tiled over `a` (its length must divide `a`'s).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.len();
        assert!(nb > 0 && av.len() % nb == 0, "add: {:?} cannot tile {:?}", bv.shape(), av.shape());
        let out: Vec<T> = av.data().iter().enumerate().map(|(i, &x)| x + bv.data()[i % nb]).collect();
        let shape = av.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out), Op::Add { a, b }, ng)
    }

    /// `a - b` for equal-length operands.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "sub: length mismatch {:?} vs {:?}", av.shape(), bv.shape());
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let shape = av.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out), Op::Sub { a, b }, ng)
    }

    /// `a * b` where `b` is tiled over `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.len();
        assert!(nb > 0 && av.len() % nb == 0, "mul: {:?} cannot tile {:?}", bv.shape(), av.shape());
        let out: Vec<T> = av.data().iter().enumerate().map(|(i, &x)| x * bv.data()[i % nb]).collect();
        let shape = av.shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out), Op::Mul { a, b }, ng)
    }

    /// Scales row `r` of `x` (`[N, D]`) by `s[r]` (`s` has N elements).
    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let n = xv.rows();
        let sv = self.value(s).data();
        assert_eq!(sv.len(), n, "row_scale: {} scales for {} rows", sv.len(), n);
        let out: Vec<T> = xv.data().iter().enumerate().map(|(i, &v)| v * sv[i / d]).collect();
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(s);
        self.push(Tensor::new(&shape, out), Op::RowScale { x, s }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v * c).collect();
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out), Op::Scale { x, c }, ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v + c).collect();
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out), Op::AddScalar { x }, ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| f(v)).collect();
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out), op, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp { x })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log { x })
    }

    /// `log(1 + e^x)`, evaluated stably for large `|x|`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus { x })
    }

    pub fn sqr(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Sqr { x })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt { x })
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.recip(), Op::Recip { x })
    }

    // ----- normalisation / attention ------------------------------------

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let n = xv.rows();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert!(g.len() == d && b.len() == d, "layer_norm: affine length mismatch");
        let eps = T::of(eps);
        let inv_d = T::of(1.0 / d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Tensor::new(&shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `key_mask[g * tk + j] == false` removes key `j` of group `g`; every query
    /// must keep at least one key.
    pub fn attention(&mut self, q: Slot, k: Slot, v: Slot, spec: AttnSpec, key_mask: Option<&[bool]>) -> Var {
        let AttnSpec { groups, tq, tk, heads, dim } = spec;
        assert!(heads > 0 && dim % heads == 0, "attention: dim {dim} not divisible by {heads} heads");
        let dh = dim / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qw = self.value(q.var).cols();
        let kw = self.value(k.var).cols();
        let vw = self.value(v.var).cols();
        assert_eq!(self.value(q.var).rows(), groups * tq, "attention: query rows");
        assert_eq!(self.value(k.var).rows(), groups * tk, "attention: key rows");
        assert_eq!(self.value(v.var).rows(), groups * tk, "attention: value rows");
        assert!(q.col + dim <= qw && k.col + dim <= kw && v.col + dim <= vw, "attention: slot outside tensor");
        if let Some(m) = key_mask {
            assert_eq!(m.len(), groups * tk, "attention: key mask length");
            assert!(m.chunks(tk).all(|c| c.contains(&true)), "attention: query with no visible key");
        }
        let qd = self.value(q.var).data();
        let kd = self.value(k.var).data();
        let vd = self.value(v.var).data();
        let mut probs = vec![T::zero(); groups * heads * tq * tk];
        let mut out = vec![T::zero(); groups * tq * dim];
        for g in 0..groups {
            for h in 0..heads {
                let p = &mut probs[(g * heads + h) * tq * tk..(g * heads + h + 1) * tq * tk];
                let qv = View::rows(qd, qw).at(g * tq * qw + q.col + h * dh);
                let kt = View::rows(kd, kw).at(g * tk * kw + k.col + h * dh).t();
                gemm(tq, dh, tk, scale, qv, kt, T::zero(), p, 0, tk, 1);
                for i in 0..tq {
                    let row = &mut p[i * tk..(i + 1) * tk];
                    if let Some(m) = key_mask {
                        for (j, r) in row.iter_mut().enumerate() {
                            if !m[g * tk + j] {
                                *r = T::neg_infinity();
                            }
                        }
                    }
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    if !mx.is_finite() {
                        // overflowed scores propagate as NaN for the caller to catch
                        row.iter_mut().for_each(|r| *r = T::nan());
                        continue;
                    }
                    let mut s = T::zero();
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        s += *r;
                    }
                    let inv = s.recip();
                    row.iter_mut().for_each(|r| *r *= inv);
                }
                let vv = View::rows(vd, vw).at(g * tk * vw + v.col + h * dh);
                gemm(tq, tk, dh, T::one(), View::rows(p, tk), vv, T::zero(), &mut out, g * tq * dim + h * dh, dim, 1);
            }
        }
        let ng = self.ng(q.var) || self.ng(k.var) || self.ng(v.var);
        self.push(Tensor::new(&[groups * tq, dim], out), Op::Attention { q, k, v, spec, probs }, ng)
    }

    // ----- indexing / layout ----------------------------------------------

    /// Selects rows (along the leading flattened axes) of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let n = xv.rows();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather_rows: index {i} out of {n}");
            out.extend_from_slice(&xv.data()[i * d..(i + 1) * d]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[idx.len(), d], out), Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    /// Stacks 2-D nodes with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat_rows of nothing");
        let d = self.value(xs[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let xv = self.value(x);
            assert_eq!(xv.cols(), d, "concat_rows: column mismatch");
            rows += xv.rows();
            out.extend_from_slice(xv.data());
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::new(&[rows, d], out), Op::ConcatRows { xs: xs.to_vec() }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        assert_eq!(n, xv.len(), "reshape {:?} -> {:?}", xv.shape(), shape);
        let out = xv.data().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::Reshape { x }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 2, "transpose needs a 2-D node");
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[c, r], out), Op::Transpose { x }, ng)
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over the last axis.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let out: Vec<T> = xv.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
        let n = out.len();
        let ng = self.ng(x);
        self.push(Tensor::new(&[n], out), Op::RowSum { x }, ng)
    }

    /// `log(sum(exp(row)))` over the last axis; `-inf` entries are ignored.
    pub fn row_logsumexp(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let out: Vec<T> = xv
            .data()
            .chunks(d)
            .map(|r| {
                let mx = r.iter().copied().fold(T::neg_infinity(), T::max);
                if !mx.is_finite() {
                    return mx;
                }
                mx + r.iter().map(|&v| (v - mx).exp()).sum::<T>().ln()
            })
            .collect();
        let n = out.len();
        let ng = self.ng(x);
        self.push(Tensor::new(&[n], out), Op::RowLogSumExp { x }, ng)
    }

    /// Divides each row by its sum; rows summing to (numerically) zero become
    /// uniform and pass no gradient.
    pub fn row_normalize_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let tiny = T::min_positive_value().sqrt();
        let mut sums = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for r in xv.data().chunks(d) {
            let s = r.iter().copied().sum::<T>();
            if s.abs() <= tiny {
                sums.push(T::zero());
                out.extend(std::iter::repeat_n(T::of(1.0 / d as f64), d));
            } else {
                sums.push(s);
                out.extend(r.iter().map(|&v| v / s));
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out), Op::RowNormalizeSum { x, sums }, ng)
    }

    /// Divides each row by its Euclidean norm. Panics on a zero row; callers
    /// validate first.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for r in xv.data().chunks(d) {
            let nrm = r.iter().map(|&v| v * v).sum::<T>().sqrt();
            assert!(nrm != T::zero(), "l2_normalize_rows: zero-norm row");
            norms.push(nrm);
            out.extend(r.iter().map(|&v| v / nrm));
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out), Op::L2NormalizeRows { x, norms }, ng)
    }

    // ----- backward -------------------------------------------------------

    /// Gradient of `v` after [`Self::backward`], if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter touched by this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        let mut out: Vec<(ParamId, &[T])> =
            self.param_vars.iter().filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Consumes the graph, returning owned parameter gradients (releases the
    /// borrow of the store so they can be accumulated into it).
    pub fn into_param_grads(self) -> Vec<(ParamId, Vec<T>)> {
        self.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect()
    }

    /// Reverse pass seeded with d(root)/d(root) = 1 (root must be a scalar).
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.backprop_node(i, &gout);
            let keep = matches!(self.nodes[i].op, Op::Leaf | Op::Param);
            if keep {
                self.grads[i] = Some(gout);
            }
        }
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    /// Removes the gradient buffer of `v` (creating it if absent) so node values
    /// can be borrowed while it is written; the caller puts it back.
    fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n]))
    }

    fn acc_with(&mut self, v: Var, f: impl Fn(usize) -> T) {
        if let Some(g) = self.acc(v) {
            for (i, x) in g.iter_mut().enumerate() {
                *x += f(i);
            }
        }
    }

    fn backprop_node(&mut self, i: usize, gout: &[T]) {
        // The op is moved out so node values can be borrowed while writing grads.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let gview = View::rows(gout, n);
                if let Some(mut g) = self.take_grad(a) {
                    let vb = view2(self.value(b).data(), sb[1], tb);
                    // dA viewed like op(A): dA += dC op(B)^T
                    let (rs, cs) = if ta { (1, sa[1]) } else { (sa[1], 1) };
                    gemm(m, n, k, T::one(), gview, vb.t(), T::one(), &mut g, 0, rs, cs);
                    self.grads[a.0] = Some(g);
                }
                if let Some(mut g) = self.take_grad(b) {
                    let va = view2(self.value(a).data(), sa[1], ta);
                    let (rs, cs) = if tb { (1, sb[1]) } else { (sb[1], 1) };
                    gemm(k, m, n, T::one(), va.t(), gview, T::one(), &mut g, 0, rs, cs);
                    self.grads[b.0] = Some(g);
                }
            }
            &Op::Linear { x, w, b } => {
                let cin = self.value(x).cols();
                let cout = self.value(w).cols();
                let rows = self.value(x).len() / cin;
                let gview = View::rows(gout, cout);
                if let Some(mut g) = self.take_grad(x) {
                    let wv = View::rows(self.value(w).data(), cout).t();
                    gemm(rows, cout, cin, T::one(), gview, wv, T::one(), &mut g, 0, cin, 1);
                    self.grads[x.0] = Some(g);
                }
                if let Some(mut g) = self.take_grad(w) {
                    let xv = View::rows(self.value(x).data(), cin).t();
                    gemm(cin, rows, cout, T::one(), xv, gview, T::one(), &mut g, 0, cout, 1);
                    self.grads[w.0] = Some(g);
                }
                if let Some(b) = b {
                    if let Some(g) = self.acc(b) {
                        for r in gout.chunks(cout) {
                            for (gb, &v) in g.iter_mut().zip(r) {
                                *gb += v;
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                self.acc_with(a, |j| gout[j]);
                if let Some(g) = self.acc(b) {
                    let nb = g.len();
                    for (j, &v) in gout.iter().enumerate() {
                        g[j % nb] += v;
                    }
                }
            }
            &Op::Sub { a, b } => {
                self.acc_with(a, |j| gout[j]);
                self.acc_with(b, |j| -gout[j]);
            }
            &Op::Mul { a, b } => {
                let nb = self.value(b).len();
                if let Some(mut g) = self.take_grad(a) {
                    let bv = self.value(b).data();
                    for (j, x) in g.iter_mut().enumerate() {
                        *x += gout[j] * bv[j % nb];
                    }
                    self.grads[a.0] = Some(g);
                }
                if let Some(mut g) = self.take_grad(b) {
                    for (j, (&go, &x)) in gout.iter().zip(self.value(a).data()).enumerate() {
                        g[j % nb] += go * x;
                    }
                    self.grads[b.0] = Some(g);
                }
            }
            &Op::RowScale { x, s } => {
                let d = self.value(x).cols();
                if let Some(mut g) = self.take_grad(x) {
                    let sv = self.value(s).data();
                    for (j, v) in g.iter_mut().enumerate() {
                        *v += gout[j] * sv[j / d];
                    }
                    self.grads[x.0] = Some(g);
                }
                if let Some(mut g) = self.take_grad(s) {
                    for (j, (&go, &v)) in gout.iter().zip(self.value(x).data()).enumerate() {
                        g[j / d] += go * v;
                    }
                    self.grads[s.0] = Some(g);
                }
            }
            &Op::Scale { x, c } => self.acc_with(x, |j| gout[j] * c),
            &Op::AddScalar { x } => self.acc_with(x, |j| gout[j]),
            &Op::Gelu { x } => {
                let xv = self.value(x).data().to_vec();
                self.acc_with(x, |j| gout[j] * gelu_parts(xv[j]).1);
            }
            &Op::Exp { x } => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_with(x, |j| gout[j] * y[j]);
            }
            &Op::Log { x } => {
                let xv = self.value(x).data().to_vec();
                self.acc_with(x, |j| gout[j] / xv[j]);
            }
            &Op::Softplus { x } => {
                let xv = self.value(x).data().to_vec();
                self.acc_with(x, |j| gout[j] * sigmoid(xv[j]));
            }
            &Op::Sqr { x } => {
                let xv = self.value(x).data().to_vec();
                self.acc_with(x, |j| gout[j] * T::of(2.0) * xv[j]);
            }
            &Op::Sqrt { x } => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_with(x, |j| gout[j] * T::of(0.5) / y[j]);
            }
            &Op::Recip { x } => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_with(x, |j| -gout[j] * y[j] * y[j]);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.value(x).cols();
                let n = rstd.len();
                if self.ng(gamma) {
                    let g = self.acc(gamma).unwrap();
                    for r in 0..n {
                        for c in 0..d {
                            g[c] += gout[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(g) = self.acc(beta) {
                    for r in gout.chunks(d) {
                        for (gb, &v) in g.iter_mut().zip(r) {
                            *gb += v;
                        }
                    }
                }
                if self.ng(x) {
                    let gam = self.value(gamma).data().to_vec();
                    let inv_d = T::of(1.0 / d as f64);
                    let g = self.acc(x).unwrap();
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..n {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            dxh[c] = gout[r * d + c] * gam[c];
                            m1 += dxh[c];
                            m2 += dxh[c] * xhat[r * d + c];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for c in 0..d {
                            g[r * d + c] += rstd[r] * (dxh[c] - m1 - xhat[r * d + c] * m2);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.backprop_attention(*q, *k, *v, *spec, probs, gout);
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let d = self.value(x).cols();
                if let Some(g) = self.acc(x) {
                    for (o, &src) in idx.iter().enumerate() {
                        for c in 0..d {
                            g[src * d + c] += gout[o * d + c];
                        }
                    }
                }
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.acc_with(x, |j| gout[off + j]);
                    off += n;
                }
            }
            &Op::Reshape { x } => self.acc_with(x, |j| gout[j]),
            &Op::Transpose { x } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                // out is [c, r]; out[j][i] = x[i][j]
                self.acc_with(x, |idx| {
                    let (ii, jj) = (idx / c, idx % c);
                    gout[jj * r + ii]
                });
            }
            &Op::SumAll { x } => {
                let go = gout[0];
                self.acc_with(x, |_| go);
            }
            &Op::RowSum { x } => {
                let d = self.value(x).cols();
                self.acc_with(x, |j| gout[j / d]);
            }
            &Op::RowLogSumExp { x } => {
                let d = self.value(x).cols();
                let y = self.nodes[i].value.data().to_vec();
                let xv = self.value(x).data().to_vec();
                self.acc_with(x, |j| {
                    let r = j / d;
                    if y[r].is_finite() {
                        gout[r] * (xv[j] - y[r]).exp()
                    } else {
                        T::zero()
                    }
                });
            }
            Op::RowNormalizeSum { x, sums } => {
                let x = *x;
                let d = self.value(x).cols();
                let y = self.nodes[i].value.data().to_vec();
                let dots: Vec<T> = (0..sums.len())
                    .map(|r| (0..d).map(|c| gout[r * d + c] * y[r * d + c]).sum())
                    .collect();
                self.acc_with(x, |j| {
                    let r = j / d;
                    if sums[r] == T::zero() {
                        T::zero()
                    } else {
                        (gout[j] - dots[r]) / sums[r]
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let x = *x;
                let d = self.value(x).cols();
                let y = self.nodes[i].value.data().to_vec();
                let dots: Vec<T> = (0..norms.len())
                    .map(|r| (0..d).map(|c| gout[r * d + c] * y[r * d + c]).sum())
                    .collect();
                self.acc_with(x, |j| {
                    let r = j / d;
                    (gout[j] - y[j] * dots[r]) / norms[r]
                });
            }
        }
        self.nodes[i].op = op;
    }

    fn backprop_attention(&mut self, q: Slot, k: Slot, v: Slot, spec: AttnSpec, probs: &[T], gout: &[T]) {
        let AttnSpec { groups, tq, tk, heads, dim } = spec;
        let dh = dim / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let need_q = self.ng(q.var);
        let need_k = self.ng(k.var);
        let need_v = self.ng(v.var);
        let (qw, kw, vw) = (self.value(q.var).cols(), self.value(k.var).cols(), self.value(v.var).cols());
        let mut dq = if need_q { vec![T::zero(); groups * tq * dim] } else { Vec::new() };
        let mut dk = if need_k { vec![T::zero(); groups * tk * dim] } else { Vec::new() };
        let mut dv = if need_v { vec![T::zero(); groups * tk * dim] } else { Vec::new() };
        {
            let qd = self.value(q.var).data();
            let kd = self.value(k.var).data();
            let vd = self.value(v.var).data();
            let mut dp = vec![T::zero(); tq * tk];
            for g in 0..groups {
                for h in 0..heads {
                    let p = &probs[(g * heads + h) * tq * tk..(g * heads + h + 1) * tq * tk];
                    let go = View::rows(gout, dim).at(g * tq * dim + h * dh);
                    if need_v {
                        gemm(tk, tq, dh, T::one(), View::rows(p, tk).t(), go, T::one(), &mut dv, g * tk * dim + h * dh, dim, 1);
                    }
                    if !(need_q || need_k) {
                        continue;
                    }
                    let vv = View::rows(vd, vw).at(g * tk * vw + v.col + h * dh);
                    gemm(tq, dh, tk, T::one(), go, vv.t(), T::zero(), &mut dp, 0, tk, 1);
                    for r in 0..tq {
                        let pr = &p[r * tk..(r + 1) * tk];
                        let dr = &mut dp[r * tk..(r + 1) * tk];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for (d, &pp) in dr.iter_mut().zip(pr) {
                            *d = pp * (*d - dot);
                        }
                    }
                    if need_q {
                        let kv = View::rows(kd, kw).at(g * tk * kw + k.col + h * dh);
                        gemm(tq, tk, dh, scale, View::rows(&dp, tk), kv, T::one(), &mut dq, g * tq * dim + h * dh, dim, 1);
                    }
                    if need_k {
                        let qv = View::rows(qd, qw).at(g * tq * qw + q.col + h * dh);
                        gemm(tk, tq, dh, scale, View::rows(&dp, tk).t(), qv, T::one(), &mut dk, g * tk * dim + h * dh, dim, 1);
                    }
                }
            }
        }
        for (slot, d, width, need) in [(q, dq, qw, need_q), (k, dk, kw, need_k), (v, dv, vw, need_v)] {
            if !need {
                continue;
            }
            let g = self.acc(slot.var).unwrap();
            for (r, row) in d.chunks(dim).enumerate() {
                for (c, &x) in row.iter().enumerate() {
                    g[r * width + slot.col + c] += x;
                }
            }
        }
    }
}

fn view2<T>(data: &[T], cols: usize, transposed: bool) -> View<'_, T> {
    let v = View::rows(data, cols);
    if transposed {
        v.t()
    } else {
        v
    }
}
