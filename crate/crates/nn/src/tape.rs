use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops;

use ndarray::{s, Array2, Axis, Zip};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Silu(usize),
    SiluGrad(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    Min(usize, usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    SumCols(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    LogSoftmax(usize),
    Transpose(usize),
}

#[derive(Default)]
struct Inner {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

/// Operation record. Not `Sync`; build one tape per thread.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn silu_grad(x: f64) -> f64 {
    let sg = sigmoid(x);
    sg * (1.0 + x * (1.0 - sg))
}

fn silu_grad2(x: f64) -> f64 {
    let sg = sigmoid(x);
    sg * (1.0 - sg) * (2.0 + x * (1.0 - 2.0 * sg))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a value with no parents. Parameters and inputs are both leaves.
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.ops.push(op);
        Var {
            tape: self,
            id: inner.values.len() - 1,
        }
    }

    fn values(&self) -> Ref<'_, Vec<Array2<f64>>> {
        Ref::map(self.inner.borrow(), |i| &i.values)
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let v = self.values()[a].mapv(f);
        self.push(v, op)
    }

    /// Reverse pass seeded with ones at `output` (which need not be scalar).
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(output.tape, self), "variable from another tape");
        let inner = self.inner.borrow();
        let values = &inner.values;
        let n = output.id + 1;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[output.id] = Some(Array2::ones(values[output.id].dim()));

        fn acc(grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
            match &mut grads[id] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let out = &values[id];
            match &inner.ops[id] {
                Op::Leaf => {}
                &Op::MatMul(a, b) => {
                    acc(&mut grads, a, g.dot(&values[b].t()));
                    acc(&mut grads, b, values[a].t().dot(&g));
                }
                &Op::Add(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.clone());
                }
                &Op::Sub(a, b) => {
                    acc(&mut grads, b, -&g);
                    acc(&mut grads, a, g.clone());
                }
                &Op::Mul(a, b) => {
                    acc(&mut grads, a, &g * &values[b]);
                    acc(&mut grads, b, &g * &values[a]);
                }
                &Op::AddRow(a, r) => {
                    acc(&mut grads, r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, a, g.clone());
                }
                &Op::MulRow(a, r) => {
                    let gr = (&g * &values[a]).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, a, &g * &values[r]);
                    acc(&mut grads, r, gr);
                }
                &Op::AddCol(a, c) => {
                    acc(&mut grads, c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc(&mut grads, a, g.clone());
                }
                &Op::MulCol(a, c) => {
                    let gc = (&g * &values[a]).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, a, &g * &values[c]);
                    acc(&mut grads, c, gc);
                }
                &Op::Scale(a, k) => acc(&mut grads, a, &g * k),
                &Op::AddScalar(a) => acc(&mut grads, a, g.clone()),
                &Op::Exp(a) => acc(&mut grads, a, &g * out),
                &Op::Log(a) => acc(&mut grads, a, &g / &values[a]),
                &Op::Tanh(a) => acc(&mut grads, a, &g * &out.mapv(|y| 1.0 - y * y)),
                &Op::Relu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(&values[a])
                        .for_each(|gi, &x| if x <= 0.0 { *gi = 0.0 });
                    acc(&mut grads, a, ga);
                }
                &Op::Silu(a) => acc(&mut grads, a, &g * &values[a].mapv(silu_grad)),
                &Op::SiluGrad(a) => acc(&mut grads, a, &g * &values[a].mapv(silu_grad2)),
                &Op::Sigmoid(a) => acc(&mut grads, a, &g * &out.mapv(|y| y * (1.0 - y))),
                &Op::Softplus(a) => acc(&mut grads, a, &g * &values[a].mapv(sigmoid)),
                &Op::Square(a) => acc(&mut grads, a, &g * &(&values[a] * 2.0)),
                &Op::Min(a, b) => {
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(&values[a])
                        .and(&values[b])
                        .for_each(|ga, gb, &x, &y| {
                            if x <= y {
                                *gb = 0.0
                            } else {
                                *ga = 0.0
                            }
                        });
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                &Op::Clamp(a, lo, hi) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(&values[a]).for_each(|gi, &x| {
                        if x < lo || x > hi {
                            *gi = 0.0
                        }
                    });
                    acc(&mut grads, a, ga);
                }
                &Op::SumAll(a) => {
                    acc(&mut grads, a, Array2::from_elem(values[a].dim(), g[[0, 0]]));
                }
                &Op::MeanAll(a) => {
                    let k = g[[0, 0]] / values[a].len() as f64;
                    acc(&mut grads, a, Array2::from_elem(values[a].dim(), k));
                }
                &Op::SumRows(a) => {
                    let (r, c) = values[a].dim();
                    let ga = g.broadcast((r, c)).expect("column broadcast").to_owned();
                    acc(&mut grads, a, ga);
                }
                &Op::SumCols(a) => {
                    let (r, c) = values[a].dim();
                    let ga = g.broadcast((r, c)).expect("row broadcast").to_owned();
                    acc(&mut grads, a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = values[p].ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                &Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(values[a].dim());
                    let w = g.ncols();
                    ga.slice_mut(s![.., start..start + w]).assign(&g);
                    acc(&mut grads, a, ga);
                }
                &Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(values[a].dim());
                    let h = g.nrows();
                    ga.slice_mut(s![start..start + h, ..]).assign(&g);
                    acc(&mut grads, a, ga);
                }
                &Op::Transpose(a) => acc(&mut grads, a, g.t().to_owned()),
                &Op::LogSoftmax(a) => {
                    let sum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let soft = out.mapv(f64::exp);
                    acc(&mut grads, a, &g - &(&soft * &sum));
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

/// Result of [`Tape::backward`]. Nodes that do not influence the output have no entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Array2<f64>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when the output does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(v.shape()))
    }
}

macro_rules! unary_op {
    ($(#[$m:meta])* $name:ident, $op:ident, $f:expr) => {
        $(#[$m])*
        pub fn $name(self) -> Var<'t> {
            self.tape.unary(self.id, Op::$op(self.id), $f)
        }
    };
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.values()[self.id].dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn value(&self) -> Array2<f64> {
        self.tape.values()[self.id].clone()
    }

    /// Value of a `1×1` node.
    pub fn item(&self) -> f64 {
        let v = &self.tape.values()[self.id];
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Array2<f64>) -> R) -> R {
        f(&self.tape.values()[self.id])
    }

    /// Same value, cut off from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.leaf(self.value())
    }

    fn binary(self, other: Var<'t>, name: &str, op: Op, f: impl Fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "variables from different tapes");
        let v = {
            let vals = self.tape.values();
            let (a, b) = (&vals[self.id], &vals[other.id]);
            check_shapes(name, a, b);
            f(a, b)
        };
        self.tape.push(v, op)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let v = {
            let vals = self.tape.values();
            let (a, b) = (&vals[self.id], &vals[rhs.id]);
            assert_eq!(a.ncols(), b.nrows(), "matmul {:?} x {:?}", a.dim(), b.dim());
            a.dot(b)
        };
        self.tape.push(v, Op::MatMul(self.id, rhs.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "add", Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "sub", Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "mul", Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    /// Adds a `1×D` row to every row of an `N×D` node.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let v = {
            let vals = self.tape.values();
            let (a, r) = (&vals[self.id], &vals[row.id]);
            assert!(r.nrows() == 1 && r.ncols() == a.ncols(), "add_row {:?} + {:?}", a.dim(), r.dim());
            a + r
        };
        self.tape.push(v, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row of an `N×D` node by a `1×D` row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let v = {
            let vals = self.tape.values();
            let (a, r) = (&vals[self.id], &vals[row.id]);
            assert!(r.nrows() == 1 && r.ncols() == a.ncols(), "mul_row {:?} * {:?}", a.dim(), r.dim());
            a * r
        };
        self.tape.push(v, Op::MulRow(self.id, row.id))
    }

    /// Adds an `N×1` column to every column of an `N×D` node.
    pub fn add_col(self, col: Var<'t>) -> Var<'t> {
        let v = {
            let vals = self.tape.values();
            let (a, c) = (&vals[self.id], &vals[col.id]);
            assert!(c.ncols() == 1 && c.nrows() == a.nrows(), "add_col {:?} + {:?}", a.dim(), c.dim());
            a + c
        };
        self.tape.push(v, Op::AddCol(self.id, col.id))
    }

    /// Multiplies every column of an `N×D` node by an `N×1` column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let v = {
            let vals = self.tape.values();
            let (a, c) = (&vals[self.id], &vals[col.id]);
            assert!(c.ncols() == 1 && c.nrows() == a.nrows(), "mul_col {:?} * {:?}", a.dim(), c.dim());
            a * c
        };
        self.tape.push(v, Op::MulCol(self.id, col.id))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, k), |x| x * k)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::AddScalar(self.id), |x| x + k)
    }

    unary_op!(exp, Exp, f64::exp);
    unary_op!(log, Log, f64::ln);
    unary_op!(tanh, Tanh, f64::tanh);
    unary_op!(relu, Relu, |x: f64| x.max(0.0));
    unary_op!(silu, Silu, |x: f64| x * sigmoid(x));
    unary_op!(
        /// Elementwise derivative of SiLU, itself differentiable.
        silu_grad, SiluGrad, silu_grad
    );
    unary_op!(sigmoid, Sigmoid, sigmoid);
    unary_op!(softplus, Softplus, softplus);
    unary_op!(square, Square, |x: f64| x * x);

    pub fn min(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "min", Op::Min(self.id, rhs.id), |a, b| {
            Zip::from(a).and(b).map_collect(|&x, &y| x.min(y))
        })
    }

    /// Hard clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Clamp(self.id, lo, hi), move |x| x.clamp(lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Array2::from_elem((1, 1), self.with_value(|a| a.sum()));
        self.tape.push(v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = Array2::from_elem((1, 1), self.with_value(|a| a.sum() / a.len() as f64));
        self.tape.push(v, Op::MeanAll(self.id))
    }

    /// Sums across columns: `N×D → N×1`.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.with_value(|a| a.sum_axis(Axis(1)).insert_axis(Axis(1)));
        self.tape.push(v, Op::SumRows(self.id))
    }

    /// Sums across rows: `N×D → 1×D`.
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.with_value(|a| a.sum_axis(Axis(0)).insert_axis(Axis(0)));
        self.tape.push(v, Op::SumCols(self.id))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let v = {
            let vals = tape.values();
            let views: Vec<_> = parts.iter().map(|p| vals[p.id].view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts")
        };
        tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let v = self.with_value(|a| a.slice(s![.., start..end]).to_owned());
        self.tape.push(v, Op::SliceCols(self.id, start))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        let v = self.with_value(|a| a.slice(s![start..end, ..]).to_owned());
        self.tape.push(v, Op::SliceRows(self.id, start))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.with_value(|a| a.t().to_owned());
        self.tape.push(v, Op::Transpose(self.id))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Var<'t> {
        let v = self.with_value(|a| {
            let mut out = a.clone();
            for mut row in out.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
                row.mapv_inplace(|x| x - lse);
            }
            out
        });
        self.tape.push(v, Op::LogSoftmax(self.id))
    }
}

fn check_shapes(name: &str, a: &Array2<f64>, b: &Array2<f64>) {
    assert_eq!(a.dim(), b.dim(), "{name}: shape mismatch {:?} vs {:?}", a.dim(), b.dim());
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5))
    }

    /// Central finite differences of `f` at `x`, compared to the tape gradient.
    fn check_grad(x: Array2<f64>, f: impl Fn(Var<'_>) -> Var<'_>) {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = f(xv).sum();
        let g = tape.backward(y).wrt(xv);
        let h = 1e-6;
        for idx in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let t = Tape::new();
                let v = t.leaf(xp);
                f(v).sum().item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "idx {idx}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 3, 4);
        check_grad(x.clone(), |v| v.tanh());
        check_grad(x.clone(), |v| v.silu());
        check_grad(x.clone(), |v| v.silu_grad());
        check_grad(x.clone(), |v| v.sigmoid());
        check_grad(x.clone(), |v| v.softplus());
        check_grad(x.clone(), |v| v.square().scale(0.3).add_scalar(1.0));
        check_grad(x.clone(), |v| v.exp());
        check_grad(x.mapv(|a| a.abs() + 0.5), |v| v.log());
        check_grad(x.clone(), |v| v.log_softmax());
        check_grad(x.clone(), |v| v.sum_rows().square());
        check_grad(x.clone(), |v| v.sum_cols().square());
        check_grad(x.clone(), |v| v.slice_cols(1, 3).square());
        check_grad(x.clone(), |v| v.slice_rows(1, 2).exp());
        check_grad(x, |v| v.mean().square());
    }

    #[test]
    fn binary_and_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 4, 2);
        let row = rand_mat(&mut rng, 1, 4);
        let col = rand_mat(&mut rng, 3, 1);
        let b = rand_mat(&mut rng, 3, 4);
        {
            let w = w.clone();
            check_grad(a.clone(), move |v| v.matmul(v.tape().leaf(w.clone())).tanh());
        }
        {
            let a = a.clone();
            check_grad(w, move |v| v.tape().leaf(a.clone()).matmul(v).square());
        }
        {
            let a = a.clone();
            check_grad(row.clone(), move |r| r.tape().leaf(a.clone()).mul_row(r).add_row(r).square());
        }
        {
            let a = a.clone();
            check_grad(col, move |c| c.tape().leaf(a.clone()).mul_col(c).add_col(c).tanh());
        }
        {
            let b = b.clone();
            check_grad(a.clone(), move |v| {
                let bv = v.tape().leaf(b.clone());
                (v * bv - bv + v).min(bv.scale(0.5))
            });
        }
        check_grad(a.clone(), move |v| Var::concat_cols(&[v, v.square()]).tanh());
        check_grad(a, move |v| v.t().matmul(v).tanh());
    }

    #[test]
    fn second_order_through_silu_grad() {
        // d/dw of f'(w x) where f = silu: exercises the silu_grad node's own derivative.
        let x = array![[0.3, -1.2], [2.0, 0.7]];
        check_grad(array![[0.8, -0.4]], move |w| {
            let xv = w.tape().leaf(x.clone());
            xv.mul_row(w).silu_grad()
        });
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0]]);
        let b = tape.leaf(array![[3.0]]);
        let y = a.square().sum();
        let g = tape.backward(y);
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(b), array![[0.0]]);
        assert_eq!(g.wrt(a), array![[2.0, 4.0]]);
    }
}
