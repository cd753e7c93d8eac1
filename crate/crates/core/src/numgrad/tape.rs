//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] is built fresh for every forward pass and dropped after
//! [`Tape::backward`]. Nodes are dense row-major matrices; most ops act
//! row-wise so a batch of sample points is one node. Parameters live in a
//! borrowed [`ParamStore`] and their gradients come back as [`GroupGrads`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::params::{GroupGrads, GroupId, ParamStore};
use super::real::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Backward context handed to a [`CustomOp`].
pub struct BackwardCtx<'a, T: Real> {
    pub inputs: Vec<&'a Mat<T>>,
    /// Which inputs need a gradient back.
    pub wants: Vec<bool>,
    pub output: &'a Mat<T>,
    pub dout: &'a Mat<T>,
    pub store: &'a ParamStore<T>,
    pub grads: &'a mut GroupGrads<T>,
}

/// An op implemented outside the tape (hash encoding, rigid pose offsets).
///
/// The caller computes the forward value itself and records it with
/// [`Tape::custom`]; the op only supplies the backward rule.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Accumulates parameter gradients into `ctx.grads` and returns one
    /// optional gradient per input (`None` where `wants` is false).
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Mat<T>>>>;
}

enum Op<T: Real> {
    Constant,
    Variable,
    Param(GroupId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Gather {
        group: GroupId,
        index: Vec<u32>,
    },
    GatherRows {
        x: NodeId,
        index: Vec<u32>,
    },
    Concat(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    Shift(NodeId),
    AffineCols {
        x: NodeId,
        scale: Vec<T>,
    },
    Clamp {
        x: NodeId,
        lo: T,
        hi: T,
    },
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Huber(NodeId, T),
    GroupMean {
        x: NodeId,
        k: usize,
    },
    PairDiff {
        x: NodeId,
        k: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    Custom {
        op: Box<dyn CustomOp<T>>,
        inputs: Vec<NodeId>,
    },
}

struct Node<T: Real> {
    value: Mat<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct TapeGrads<T> {
    pub params: GroupGrads<T>,
    vars: BTreeMap<NodeId, Mat<T>>,
}

impl<T: Real> TapeGrads<T> {
    /// Gradient of a [`Tape::variable`] node, if anything depended on it.
    pub fn var(&self, id: NodeId) -> Option<&Mat<T>> {
        self.vars.get(&id)
    }
}

pub struct Tape<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Huber penalty with threshold `delta`.
#[inline]
pub fn huber<T: Real>(s: T, delta: T) -> T {
    let a = s.abs();
    if a <= delta {
        T::of(0.5) * s * s
    } else {
        delta * (a - T::of(0.5) * delta)
    }
}

impl<'s, T: Real> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_same(&self, a: NodeId, b: NodeId, what: &str) {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(
            va.same_shape(vb),
            "{what}: shapes {}x{} and {}x{}",
            va.rows,
            va.cols,
            vb.rows,
            vb.cols
        );
    }

    pub fn constant(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`TapeGrads::var`].
    pub fn variable(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Variable, true)
    }

    /// Leaf holding a copy of a parameter group (shape rows×cols).
    pub fn param(&mut self, group: GroupId) -> NodeId {
        let g = self.store.group(group);
        let value = g.as_mat();
        self.push(value, Op::Param(group), !g.frozen)
    }

    /// `y = x Wᵀ + b` with `W` stored out×in and `b` 1×out.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols, wv.cols, "linear: input width vs weight columns");
        assert_eq!(bv.len(), wv.rows, "linear: bias length");
        let (n, fin, fout) = (xv.rows, wv.cols, wv.rows);
        let mut out = Mat::zeros(n, fout);
        for r in 0..n {
            out.data[r * fout..(r + 1) * fout].copy_from_slice(&bv.data);
        }
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            &xv.data,
            fin as isize,
            1,
            &wv.data,
            1,
            fin as isize,
            T::one(),
            &mut out.data,
            fout as isize,
            1,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    /// Rows of a parameter group selected by `index` (embedding lookup).
    pub fn gather(&mut self, group: GroupId, index: Vec<u32>) -> Result<NodeId> {
        let g = self.store.group(group);
        let mut out = Mat::zeros(index.len(), g.cols);
        for (r, &i) in index.iter().enumerate() {
            let i = i as usize;
            if i >= g.rows {
                return Err(Error::OutOfRange {
                    what: "gather row",
                    index: i,
                    len: g.rows,
                });
            }
            out.data[r * g.cols..(r + 1) * g.cols]
                .copy_from_slice(&g.data[i * g.cols..(i + 1) * g.cols]);
        }
        let rg = !g.frozen;
        Ok(self.push(out, Op::Gather { group, index }, rg))
    }

    /// Rows of a node selected by `index`.
    pub fn gather_rows(&mut self, x: NodeId, index: Vec<u32>) -> Result<NodeId> {
        let xv = self.value(x);
        let cols = xv.cols;
        let mut out = Mat::zeros(index.len(), cols);
        for (r, &i) in index.iter().enumerate() {
            let i = i as usize;
            if i >= xv.rows {
                return Err(Error::OutOfRange {
                    what: "gather_rows row",
                    index: i,
                    len: xv.rows,
                });
            }
            out.data[r * cols..(r + 1) * cols].copy_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows { x, index }, rg))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows, vb.rows, "concat: row counts");
        let cols = va.cols + vb.cols;
        let mut out = Mat::zeros(va.rows, cols);
        for r in 0..va.rows {
            out.data[r * cols..r * cols + va.cols].copy_from_slice(va.row(r));
            out.data[r * cols + va.cols..(r + 1) * cols].copy_from_slice(vb.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Concat(a, b), rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice_cols out of range");
        let mut out = Mat::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> NodeId {
        self.check_same(a, b, what);
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn shift(&mut self, x: NodeId, c: T) -> NodeId {
        self.unary(x, |v| v + c, Op::Shift(x))
    }

    /// Per-column `x * scale[c] + shift[c]`.
    pub fn affine_cols(&mut self, x: NodeId, scale: Vec<T>, shift: Vec<T>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(scale.len(), xv.cols);
        assert_eq!(shift.len(), xv.cols);
        let mut out = xv.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                let i = r * out.cols + c;
                out.data[i] = out.data[i] * scale[c] + shift[c];
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::AffineCols { x, scale }, rg)
    }

    /// Clamp into `[lo, hi]`; gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn huber(&mut self, x: NodeId, delta: T) -> NodeId {
        self.unary(x, |v| huber(v, delta), Op::Huber(x, delta))
    }

    /// Mean over consecutive groups of `k` rows: (g·k)×c → g×c.
    pub fn group_mean(&mut self, x: NodeId, k: usize) -> NodeId {
        let xv = self.value(x);
        assert!(k > 0 && xv.rows % k == 0, "group_mean: rows not divisible by k");
        let g = xv.rows / k;
        let c = xv.cols;
        let mut out = Mat::zeros(g, c);
        let inv = 1.0 / k as f64;
        for gi in 0..g {
            for ci in 0..c {
                let mut acc = 0.0f64;
                for j in 0..k {
                    acc += xv.data[(gi * k + j) * c + ci].f64();
                }
                out.data[gi * c + ci] = T::of(acc * inv);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::GroupMean { x, k }, rg)
    }

    /// Within each group of `k` rows, row `p` minus row `p + k/2`:
    /// (g·k)×c → (g·k/2)×c.
    pub fn pair_diff(&mut self, x: NodeId, k: usize) -> NodeId {
        let xv = self.value(x);
        assert!(k >= 2 && k % 2 == 0 && xv.rows % k == 0, "pair_diff: bad k");
        let g = xv.rows / k;
        let h = k / 2;
        let c = xv.cols;
        let mut out = Mat::zeros(g * h, c);
        for gi in 0..g {
            for p in 0..h {
                for ci in 0..c {
                    out.data[(gi * h + p) * c + ci] =
                        xv.data[(gi * k + p) * c + ci] - xv.data[(gi * k + p + h) * c + ci];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::PairDiff { x, k }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data.iter().map(|v| v.f64()).sum();
        let rg = self.rg(x);
        self.push(Mat::scalar(T::of(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.len().max(1) as f64;
        let s: f64 = xv.data.iter().map(|v| v.f64()).sum();
        let rg = self.rg(x);
        self.push(Mat::scalar(T::of(s / n)), Op::Mean(x), rg)
    }

    /// Records a node whose value was computed outside the tape.
    pub fn custom(
        &mut self,
        inputs: Vec<NodeId>,
        value: Mat<T>,
        op: Box<dyn CustomOp<T>>,
        touches_params: bool,
    ) -> NodeId {
        let rg = touches_params || inputs.iter().any(|&i| self.rg(i));
        self.push(value, Op::Custom { op, inputs }, rg)
    }

    /// Propagates d(root)/d(·) back to every parameter and variable.
    ///
    /// Consumes the tape; the root must be a 1×1 node.
    pub fn backward(self, root: NodeId) -> Result<TapeGrads<T>> {
        let rv = &self.nodes[root.0].value;
        if rv.rows != 1 || rv.cols != 1 {
            return Err(Error::Contract(format!(
                "backward from a {}x{} node; the root must be scalar",
                rv.rows, rv.cols
            )));
        }
        let mut params = GroupGrads::zeros_like(self.store);
        let mut vars = BTreeMap::new();
        let mut adj: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Mat::scalar(T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(d) = adj[idx].take() else { continue };
            let want = |id: NodeId| self.nodes[id.0].requires_grad;
            let send = |adj: &mut Vec<Option<Mat<T>>>, id: NodeId, g: Mat<T>| {
                accumulate(&mut adj[id.0], g);
            };
            match &node.op {
                Op::Constant => {}
                Op::Variable => {
                    vars.insert(NodeId(idx), d);
                }
                Op::Param(gid) => {
                    let slot = params.slot(*gid, d.len());
                    for (s, v) in slot.iter_mut().zip(&d.data) {
                        *s += *v;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (n, fin, fout) = (xv.rows, wv.cols, wv.rows);
                    if want(*x) {
                        let mut dx = Mat::zeros(n, fin);
                        T::gemm(
                            n,
                            fout,
                            fin,
                            T::one(),
                            &d.data,
                            fout as isize,
                            1,
                            &wv.data,
                            fin as isize,
                            1,
                            T::zero(),
                            &mut dx.data,
                            fin as isize,
                            1,
                        );
                        send(&mut adj, *x, dx);
                    }
                    if want(*w) {
                        let mut dw = Mat::zeros(fout, fin);
                        T::gemm(
                            fout,
                            n,
                            fin,
                            T::one(),
                            &d.data,
                            1,
                            fout as isize,
                            &xv.data,
                            fin as isize,
                            1,
                            T::zero(),
                            &mut dw.data,
                            fin as isize,
                            1,
                        );
                        send(&mut adj, *w, dw);
                    }
                    if want(*b) {
                        let mut acc = vec![0.0f64; fout];
                        for r in 0..n {
                            for (a, v) in acc.iter_mut().zip(d.row(r)) {
                                *a += v.f64();
                            }
                        }
                        let db = Mat::from_vec(1, fout, acc.into_iter().map(T::of).collect());
                        send(&mut adj, *b, db);
                    }
                }
                Op::Gather { group, index } => {
                    let g = self.store.group(*group);
                    let cols = g.cols;
                    let slot = params.slot(*group, g.len());
                    for (r, &i) in index.iter().enumerate() {
                        let i = i as usize;
                        for c in 0..cols {
                            slot[i * cols + c] += d.data[r * cols + c];
                        }
                    }
                }
                Op::GatherRows { x, index } => {
                    let xv = &self.nodes[x.0].value;
                    let cols = xv.cols;
                    let mut dx = Mat::zeros(xv.rows, cols);
                    for (r, &i) in index.iter().enumerate() {
                        let i = i as usize;
                        for c in 0..cols {
                            dx.data[i * cols + c] += d.data[r * cols + c];
                        }
                    }
                    send(&mut adj, *x, dx);
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[a.0].value.cols;
                    let cb = self.nodes[b.0].value.cols;
                    let rows = d.rows;
                    if want(*a) {
                        let mut da = Mat::zeros(rows, ca);
                        for r in 0..rows {
                            da.data[r * ca..(r + 1) * ca].copy_from_slice(&d.row(r)[..ca]);
                        }
                        send(&mut adj, *a, da);
                    }
                    if want(*b) {
                        let mut db = Mat::zeros(rows, cb);
                        for r in 0..rows {
                            db.data[r * cb..(r + 1) * cb].copy_from_slice(&d.row(r)[ca..]);
                        }
                        send(&mut adj, *b, db);
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    let len = d.cols;
                    for r in 0..xv.rows {
                        dx.data[r * xv.cols + start..r * xv.cols + start + len]
                            .copy_from_slice(d.row(r));
                    }
                    send(&mut adj, *x, dx);
                }
                Op::Add(a, b) => {
                    if want(*a) {
                        send(&mut adj, *a, d.clone());
                    }
                    if want(*b) {
                        send(&mut adj, *b, d);
                    }
                }
                Op::Sub(a, b) => {
                    if want(*a) {
                        send(&mut adj, *a, d.clone());
                    }
                    if want(*b) {
                        send(&mut adj, *b, d.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if want(*a) {
                        send(&mut adj, *a, elementwise(&d, vb, |g, y| g * y));
                    }
                    if want(*b) {
                        send(&mut adj, *b, elementwise(&d, va, |g, x| g * x));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if want(*a) {
                        send(&mut adj, *a, elementwise(&d, vb, |g, y| g / y));
                    }
                    if want(*b) {
                        let data = d
                            .data
                            .iter()
                            .zip(&va.data)
                            .zip(&vb.data)
                            .map(|((&g, &x), &y)| -g * x / (y * y))
                            .collect();
                        send(&mut adj, *b, Mat::from_vec(d.rows, d.cols, data));
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    send(&mut adj, *x, d.map(|g| g * c));
                }
                Op::Shift(x) => send(&mut adj, *x, d),
                Op::AffineCols { x, scale } => {
                    let mut dx = d;
                    let cols = dx.cols;
                    for (i, v) in dx.data.iter_mut().enumerate() {
                        *v *= scale[i % cols];
                    }
                    send(&mut adj, *x, dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.nodes[x.0].value;
                    let (lo, hi) = (*lo, *hi);
                    send(
                        &mut adj,
                        *x,
                        elementwise(&d, xv, |g, v| if v < lo || v > hi { T::zero() } else { g }),
                    );
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    send(
                        &mut adj,
                        *x,
                        elementwise(&d, xv, |g, v| if v > T::zero() { g } else { T::zero() }),
                    );
                }
                Op::Softplus(x) => {
                    let xv = &self.nodes[x.0].value;
                    send(&mut adj, *x, elementwise(&d, xv, |g, v| g * sigmoid(v)));
                }
                Op::Exp(x) => {
                    send(&mut adj, *x, elementwise(&d, &node.value, |g, y| g * y));
                }
                Op::Log(x) => {
                    let xv = &self.nodes[x.0].value;
                    send(&mut adj, *x, elementwise(&d, xv, |g, v| g / v));
                }
                Op::Square(x) => {
                    let xv = &self.nodes[x.0].value;
                    send(&mut adj, *x, elementwise(&d, xv, |g, v| g * (v + v)));
                }
                Op::Abs(x) => {
                    let xv = &self.nodes[x.0].value;
                    send(&mut adj, *x, elementwise(&d, xv, |g, v| g * sign0(v)));
                }
                Op::Huber(x, delta) => {
                    let xv = &self.nodes[x.0].value;
                    let delta = *delta;
                    send(
                        &mut adj,
                        *x,
                        elementwise(&d, xv, |g, v| {
                            if v.abs() <= delta {
                                g * v
                            } else {
                                g * delta * sign0(v)
                            }
                        }),
                    );
                }
                Op::GroupMean { x, k } => {
                    let xv = &self.nodes[x.0].value;
                    let k = *k;
                    let c = xv.cols;
                    let inv = T::of(1.0 / k as f64);
                    let mut dx = Mat::zeros(xv.rows, c);
                    for r in 0..xv.rows {
                        let gi = r / k;
                        for ci in 0..c {
                            dx.data[r * c + ci] = d.data[gi * c + ci] * inv;
                        }
                    }
                    send(&mut adj, *x, dx);
                }
                Op::PairDiff { x, k } => {
                    let xv = &self.nodes[x.0].value;
                    let k = *k;
                    let h = k / 2;
                    let c = xv.cols;
                    let mut dx = Mat::zeros(xv.rows, c);
                    for gi in 0..xv.rows / k {
                        for p in 0..h {
                            for ci in 0..c {
                                let g = d.data[(gi * h + p) * c + ci];
                                dx.data[(gi * k + p) * c + ci] += g;
                                dx.data[(gi * k + p + h) * c + ci] -= g;
                            }
                        }
                    }
                    send(&mut adj, *x, dx);
                }
                Op::Sum(x) => {
                    let xv = &self.nodes[x.0].value;
                    let g = d.item();
                    send(&mut adj, *x, Mat::from_vec(xv.rows, xv.cols, vec![g; xv.len()]));
                }
                Op::Mean(x) => {
                    let xv = &self.nodes[x.0].value;
                    let g = d.item() / T::of(xv.len().max(1) as f64);
                    send(&mut adj, *x, Mat::from_vec(xv.rows, xv.cols, vec![g; xv.len()]));
                }
                Op::Custom { op, inputs } => {
                    let ctx = BackwardCtx {
                        inputs: inputs.iter().map(|i| &self.nodes[i.0].value).collect(),
                        wants: inputs.iter().map(|&i| want(i)).collect(),
                        output: &node.value,
                        dout: &d,
                        store: self.store,
                        grads: &mut params,
                    };
                    let gin = op.backward(ctx)?;
                    if gin.len() != inputs.len() {
                        return Err(Error::Contract(format!(
                            "custom op {} returned {} input gradients for {} inputs",
                            op.name(),
                            gin.len(),
                            inputs.len()
                        )));
                    }
                    for (&i, g) in inputs.iter().zip(gin) {
                        if let (true, Some(g)) = (want(i), g) {
                            send(&mut adj, i, g);
                        }
                    }
                }
            }
        }
        Ok(TapeGrads { params, vars })
    }
}

#[inline]
fn sign0<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn elementwise<T: Real>(d: &Mat<T>, x: &Mat<T>, f: impl Fn(T, T) -> T) -> Mat<T> {
    debug_assert!(d.same_shape(x));
    let data = d.data.iter().zip(&x.data).map(|(&g, &v)| f(g, v)).collect();
    Mat::from_vec(d.rows, d.cols, data)
}

fn accumulate<T: Real>(slot: &mut Option<Mat<T>>, g: Mat<T>) {
    match slot {
        Some(acc) => {
            debug_assert!(acc.same_shape(&g));
            for (a, v) in acc.data.iter_mut().zip(&g.data) {
                *a += *v;
            }
        }
        None => *slot = Some(g),
    }
}
