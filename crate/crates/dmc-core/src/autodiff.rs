//! Reverse-mode automatic differentiation over 2-d `f64` arrays.
//!
//! A [`Tape`] records every operation applied to tracked arrays and
//! replays them in reverse to accumulate gradients. Values are always
//! `Array2<f64>` with rows = batch; scalars live as 1x1 arrays and
//! per-feature vectors as 1xd rows. Binary elementwise ops broadcast
//! their *second* operand when it is 1x1, a 1xd row, or a Bx1 column
//! against the first operand's shape.
//!
//! The tape is deliberately minimal: no graph optimization, a fixed
//! deterministic order of accumulation, and gradients stored densely.
//! Determinism matters more here than raw speed — identical seeds must
//! produce bitwise-identical checkpoints.
//!
//! Tie-breaking at kinks follows the interior side: `maximum(a, b)` and
//! `minimum(a, b)` route the gradient to `a` on exact ties, so callers
//! put the pass-through operand first (e.g. `clamp(x, lo, hi)` keeps the
//! gradient on `x` when it sits exactly on a bound).

use ndarray::Array2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Index of this variable's node on its tape.
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    /// Trainable input or tracked state; gradient is accumulated.
    Leaf,
    /// Untracked data (weather, masks, labels); no gradient flows.
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    /// scalar - x (used for `1 - x` style expressions).
    SubFromScalar(usize),
    MatMul(usize, usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Neg(usize),
    /// Select `a` where the constant mask is 1, `b` where it is 0.
    Where(usize, usize, Array2<f64>),
    SumAll(usize),
    /// Row-wise sum: BxD -> Bx1.
    SumRows(usize),
    /// Column-wise sum: BxD -> 1xD.
    SumCols(usize),
    MeanAll(usize),
    /// Extract one column: BxD -> Bx1.
    Col(usize, usize),
    /// Tile a 1xD row down to RxD.
    BroadcastRows(usize),
    /// Horizontal concatenation of equal-row blocks.
    ConcatCols(Vec<usize>),
}

struct Node {
    op: Op,
    value: Array2<f64>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// How a binary operand pair broadcasts.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    /// b is 1x1.
    Scalar,
    /// b is a 1xd row, a is Bxd.
    Row,
    /// b is a Bx1 column, a is Bxd.
    Col,
}

fn bcast_of(a: (usize, usize), b: (usize, usize)) -> Bcast {
    if a == b {
        Bcast::Same
    } else if b == (1, 1) {
        Bcast::Scalar
    } else if b.0 == 1 && b.1 == a.1 {
        Bcast::Row
    } else if b.1 == 1 && b.0 == a.0 {
        Bcast::Col
    } else {
        panic!("incompatible shapes for broadcast: {a:?} vs {b:?}");
    }
}

/// Apply `f` elementwise with `b` broadcast against `a`'s shape.
fn zip_bcast(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    let (r, c) = a.dim();
    match bcast_of(a.dim(), b.dim()) {
        Bcast::Same => {
            let mut out = a.clone();
            out.zip_mut_with(b, |x, &y| *x = f(*x, y));
            out
        }
        Bcast::Scalar => {
            let s = b[[0, 0]];
            a.mapv(|x| f(x, s))
        }
        Bcast::Row => Array2::from_shape_fn((r, c), |(i, j)| f(a[[i, j]], b[[0, j]])),
        Bcast::Col => Array2::from_shape_fn((r, c), |(i, j)| f(a[[i, j]], b[[i, 0]])),
    }
}

/// Fold `grad` (shaped like `a`) back down to `b`'s shape.
fn reduce_to(grad: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if grad.dim() == shape {
        return grad.clone();
    }
    match bcast_of(grad.dim(), shape) {
        Bcast::Same => unreachable!(),
        Bcast::Scalar => Array2::from_elem((1, 1), grad.sum()),
        Bcast::Row => {
            let mut out = Array2::zeros((1, shape.1));
            for row in grad.rows() {
                for (j, v) in row.iter().enumerate() {
                    out[[0, j]] += v;
                }
            }
            out
        }
        Bcast::Col => {
            let mut out = Array2::zeros((shape.0, 1));
            for (i, row) in grad.rows().into_iter().enumerate() {
                out[[i, 0]] = row.sum();
            }
            out
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a variable.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Array2<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Track an array as a differentiable leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Record untracked data; gradients never flow into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Const, value, false)
    }

    /// 1x1 constant.
    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let rg = self.rg2(a, b);
        self.push(Op::Add(a.0, b.0), v, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let rg = self.rg2(a, b);
        self.push(Op::Sub(a.0, b.0), v, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let rg = self.rg2(a, b);
        self.push(Op::Mul(a.0, b.0), v, rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x / y);
        let rg = self.rg2(a, b);
        self.push(Op::Div(a.0, b.0), v, rg)
    }

    /// Elementwise minimum; gradient goes to `a` on ties.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(&self.nodes[a.0].value, &self.nodes[b.0].value, f64::min);
        let rg = self.rg2(a, b);
        self.push(Op::Minimum(a.0, b.0), v, rg)
    }

    /// Elementwise maximum; gradient goes to `a` on ties.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(&self.nodes[a.0].value, &self.nodes[b.0].value, f64::max);
        let rg = self.rg2(a, b);
        self.push(Op::Maximum(a.0, b.0), v, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + s);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::AddScalar(a.0), v, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * s);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::MulScalar(a.0, s), v, rg)
    }

    /// `s - a`, elementwise.
    pub fn sub_from_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| s - x);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::SubFromScalar(a.0), v, rg)
    }

    /// Matrix product `a.dot(b)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.rg2(a, b);
        self.push(Op::MatMul(a.0, b.0), v, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Relu(a.0), v, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Tanh(a.0), v, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Sigmoid(a.0), v, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Exp(a.0), v, rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Ln(a.0), v, rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Sqrt(a.0), v, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Square(a.0), v, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Neg(a.0), v, rg)
    }

    /// `mask * a + (1 - mask) * b` with a constant 0/1 mask shaped like
    /// the operands. The mask carries no gradient.
    pub fn where_mask(&mut self, mask: Array2<f64>, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dim(), mask.dim(), "where_mask: a vs mask shape");
        assert_eq!(bv.dim(), mask.dim(), "where_mask: b vs mask shape");
        let (r, c) = mask.dim();
        let v = Array2::from_shape_fn((r, c), |(i, j)| {
            if mask[[i, j]] != 0.0 { av[[i, j]] } else { bv[[i, j]] }
        });
        let rg = self.rg2(a, b);
        self.push(Op::Where(a.0, b.0, mask), v, rg)
    }

    /// Sum of all elements -> 1x1.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::SumAll(a.0), v, rg)
    }

    /// Per-row sum: BxD -> Bx1.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let (r, _) = src.dim();
        let mut v = Array2::zeros((r, 1));
        for (i, row) in src.rows().into_iter().enumerate() {
            v[[i, 0]] = row.sum();
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::SumRows(a.0), v, rg)
    }

    /// Per-column sum: BxD -> 1xD.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let (_, c) = src.dim();
        let mut v = Array2::zeros((1, c));
        for row in src.rows() {
            for (j, x) in row.iter().enumerate() {
                v[[0, j]] += x;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::SumCols(a.0), v, rg)
    }

    /// Mean of all elements -> 1x1.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let v = Array2::from_elem((1, 1), src.sum() / src.len() as f64);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::MeanAll(a.0), v, rg)
    }

    /// Extract column `j`: BxD -> Bx1.
    pub fn col(&mut self, a: Var, j: usize) -> Var {
        let src = &self.nodes[a.0].value;
        let (r, _) = src.dim();
        let v = Array2::from_shape_fn((r, 1), |(i, _)| src[[i, j]]);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Col(a.0, j), v, rg)
    }

    /// Tile a 1xD row down to `rows`xD.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let src = &self.nodes[a.0].value;
        assert_eq!(src.nrows(), 1, "broadcast_rows expects a 1xD row");
        let d = src.ncols();
        let v = Array2::from_shape_fn((rows, d), |(_, j)| src[[0, j]]);
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::BroadcastRows(a.0), v, rg)
    }

    /// Concatenate blocks with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut v = Array2::zeros((r, total));
        let mut off = 0;
        for p in parts {
            let block = &self.nodes[p.0].value;
            assert_eq!(block.nrows(), r, "concat_cols row mismatch");
            let w = block.ncols();
            v.slice_mut(ndarray::s![.., off..off + w]).assign(block);
            off += w;
        }
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), v, rg)
    }

    /// Clamp into `[lo, hi]`; gradient stays on `a` at the bounds.
    pub fn clamp_scalar(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let lo_v = self.constant_scalar(lo);
        let hi_v = self.constant_scalar(hi);
        let m = self.maximum(a, lo_v);
        self.minimum(m, hi_v)
    }

    /// Reverse pass from a 1x1 root; returns per-node gradients
    /// (`None` for nodes that don't require gradients).
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.dim(),
            (1, 1),
            "backward root must be a 1x1 scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Like [`Tape::backward`], but scans forward values before the
    /// pass and gradients after it; the first non-finite array aborts
    /// with the offending operation's name.
    pub fn backward_checked(&mut self, root: Var) -> Result<Gradients, String> {
        for node in &self.nodes {
            if node.value.iter().any(|v| !v.is_finite()) {
                return Err(op_name(&node.op).to_string());
            }
        }
        let grads = self.backward(root);
        for (i, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(format!("gradient of {}", op_name(&self.nodes[i].op)));
                }
            }
        }
        Ok(grads)
    }

    /// Push node `i`'s gradient `g` into its parents.
    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        // Gradient contributions accumulate in node order, which is fixed
        // for a given forward recording — reruns sum in the same order.
        let add_to = |idx: usize, delta: Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
            match &mut grads[idx] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let rg = |idx: usize| self.nodes[idx].requires_grad;

        match &self.nodes[i].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    add_to(*a, g.clone(), grads);
                }
                if rg(*b) {
                    add_to(*b, reduce_to(g, self.nodes[*b].value.dim()), grads);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    add_to(*a, g.clone(), grads);
                }
                if rg(*b) {
                    add_to(*b, reduce_to(&g.mapv(|x| -x), self.nodes[*b].value.dim()), grads);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if rg(*a) {
                    add_to(*a, zip_bcast(g, bv, |x, y| x * y), grads);
                }
                if rg(*b) {
                    let full = g * av;
                    add_to(*b, reduce_to(&full, bv.dim()), grads);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if rg(*a) {
                    add_to(*a, zip_bcast(g, bv, |x, y| x / y), grads);
                }
                if rg(*b) {
                    // d(a/b)/db = -a / b^2
                    let quotient = zip_bcast(av, bv, |x, y| -x / (y * y));
                    let full = g * &quotient;
                    add_to(*b, reduce_to(&full, bv.dim()), grads);
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                // Ties route to `a`.
                let pick_a = zip_bcast(av, bv, |x, y| if x <= y { 1.0 } else { 0.0 });
                if rg(*a) {
                    add_to(*a, g * &pick_a, grads);
                }
                if rg(*b) {
                    let full = g * &pick_a.mapv(|m| 1.0 - m);
                    add_to(*b, reduce_to(&full, bv.dim()), grads);
                }
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let pick_a = zip_bcast(av, bv, |x, y| if x >= y { 1.0 } else { 0.0 });
                if rg(*a) {
                    add_to(*a, g * &pick_a, grads);
                }
                if rg(*b) {
                    let full = g * &pick_a.mapv(|m| 1.0 - m);
                    add_to(*b, reduce_to(&full, bv.dim()), grads);
                }
            }
            Op::AddScalar(a) => {
                if rg(*a) {
                    add_to(*a, g.clone(), grads);
                }
            }
            Op::MulScalar(a, s) => {
                if rg(*a) {
                    add_to(*a, g.mapv(|x| x * s), grads);
                }
            }
            Op::SubFromScalar(a) => {
                if rg(*a) {
                    add_to(*a, g.mapv(|x| -x), grads);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if rg(*a) {
                    add_to(*a, g.dot(&bv.t()), grads);
                }
                if rg(*b) {
                    add_to(*b, av.t().dot(g), grads);
                }
            }
            Op::Relu(a) => {
                if rg(*a) {
                    let av = &self.nodes[*a].value;
                    let mut d = g.clone();
                    d.zip_mut_with(av, |x, &v| {
                        if v <= 0.0 {
                            *x = 0.0;
                        }
                    });
                    add_to(*a, d, grads);
                }
            }
            Op::Tanh(a) => {
                if rg(*a) {
                    let out = &self.nodes[i].value;
                    let mut d = g.clone();
                    d.zip_mut_with(out, |x, &y| *x *= 1.0 - y * y);
                    add_to(*a, d, grads);
                }
            }
            Op::Sigmoid(a) => {
                if rg(*a) {
                    let out = &self.nodes[i].value;
                    let mut d = g.clone();
                    d.zip_mut_with(out, |x, &y| *x *= y * (1.0 - y));
                    add_to(*a, d, grads);
                }
            }
            Op::Exp(a) => {
                if rg(*a) {
                    let out = &self.nodes[i].value;
                    add_to(*a, g * out, grads);
                }
            }
            Op::Ln(a) => {
                if rg(*a) {
                    let av = &self.nodes[*a].value;
                    let mut d = g.clone();
                    d.zip_mut_with(av, |x, &v| *x /= v);
                    add_to(*a, d, grads);
                }
            }
            Op::Sqrt(a) => {
                if rg(*a) {
                    let out = &self.nodes[i].value;
                    let mut d = g.clone();
                    d.zip_mut_with(out, |x, &y| *x *= 0.5 / y);
                    add_to(*a, d, grads);
                }
            }
            Op::Square(a) => {
                if rg(*a) {
                    let av = &self.nodes[*a].value;
                    let mut d = g.clone();
                    d.zip_mut_with(av, |x, &v| *x *= 2.0 * v);
                    add_to(*a, d, grads);
                }
            }
            Op::Neg(a) => {
                if rg(*a) {
                    add_to(*a, g.mapv(|x| -x), grads);
                }
            }
            Op::Where(a, b, mask) => {
                if rg(*a) {
                    add_to(*a, g * mask, grads);
                }
                if rg(*b) {
                    add_to(*b, g * &mask.mapv(|m| 1.0 - m), grads);
                }
            }
            Op::SumAll(a) => {
                if rg(*a) {
                    let s = g[[0, 0]];
                    add_to(*a, Array2::from_elem(self.nodes[*a].value.dim(), s), grads);
                }
            }
            Op::SumRows(a) => {
                if rg(*a) {
                    let dim = self.nodes[*a].value.dim();
                    let d = Array2::from_shape_fn(dim, |(i2, _)| g[[i2, 0]]);
                    add_to(*a, d, grads);
                }
            }
            Op::SumCols(a) => {
                if rg(*a) {
                    let dim = self.nodes[*a].value.dim();
                    let d = Array2::from_shape_fn(dim, |(_, j)| g[[0, j]]);
                    add_to(*a, d, grads);
                }
            }
            Op::MeanAll(a) => {
                if rg(*a) {
                    let dim = self.nodes[*a].value.dim();
                    let s = g[[0, 0]] / (dim.0 * dim.1) as f64;
                    add_to(*a, Array2::from_elem(dim, s), grads);
                }
            }
            Op::Col(a, j) => {
                if rg(*a) {
                    let dim = self.nodes[*a].value.dim();
                    let mut d = Array2::zeros(dim);
                    for i2 in 0..dim.0 {
                        d[[i2, *j]] = g[[i2, 0]];
                    }
                    add_to(*a, d, grads);
                }
            }
            Op::BroadcastRows(a) => {
                if rg(*a) {
                    let d = self.nodes[*a].value.ncols();
                    let mut out = Array2::zeros((1, d));
                    for row in g.rows() {
                        for (j, v) in row.iter().enumerate() {
                            out[[0, j]] += v;
                        }
                    }
                    add_to(*a, out, grads);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[*p].value.ncols();
                    if rg(*p) {
                        let block = g.slice(ndarray::s![.., off..off + w]).to_owned();
                        add_to(*p, block, grads);
                    }
                    off += w;
                }
            }
        }
    }
}

/// Human-readable name of an operation, for error messages.
fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Const => "constant",
        Op::Add(..) => "add",
        Op::Sub(..) => "subtract",
        Op::Mul(..) => "multiply",
        Op::Div(..) => "divide",
        Op::Minimum(..) => "minimum",
        Op::Maximum(..) => "maximum",
        Op::AddScalar(..) => "add-scalar",
        Op::MulScalar(..) => "multiply-scalar",
        Op::SubFromScalar(..) => "subtract-from-scalar",
        Op::MatMul(..) => "matrix-multiply",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Sqrt(..) => "sqrt",
        Op::Square(..) => "square",
        Op::Neg(..) => "negate",
        Op::Where(..) => "where-mask",
        Op::SumAll(..) => "sum-all",
        Op::SumRows(..) => "sum-rows",
        Op::SumCols(..) => "sum-columns",
        Op::MeanAll(..) => "mean-all",
        Op::Col(..) => "column",
        Op::BroadcastRows(..) => "broadcast-rows",
        Op::ConcatCols(..) => "concat-columns",
    }
}

/// Result of a backward pass: gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`. Zero-shaped `None`
    /// means no path connected `v` to the root (or `v` was constant).
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape if disconnected.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
