//! Arena-backed reverse-mode differentiation over 2-D tensors.
//!
//! Every node is evaluated eagerly when it is pushed. [`Tape::grad`] writes
//! the vector-Jacobian products back onto the same tape as ordinary nodes,
//! so a gradient is itself differentiable: calling `grad` on a function of
//! a previous gradient yields Hessian-vector products and, one level
//! further, the third-order terms the support attack needs.
//!
//! The rectifier's derivative is recorded as a constant mask, which makes
//! all derivatives of order two and above exact away from the kink.

use super::tensor::{matmul, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// `op(a) * op(b)` with optional transposes.
    MatMul(Var, bool, Var, bool),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[n x m] + [1 x m]`, bias broadcast over rows.
    AddRow(Var, Var),
    /// `[n x m] -> [1 x m]`
    SumRows(Var),
    /// `[1 x m] -> [n x m]`
    BroadcastRows(Var),
    /// `[n x m] -> [n x 1]`
    SumCols(Var),
    /// `[n x 1] -> [n x m]`
    BroadcastCols(Var),
    /// any shape -> `[1 x 1]`
    SumAll(Var),
    /// `[1 x 1] -> [r x c]`
    Fill(Var),
    Relu(Var),
    /// Heaviside step of the argument; derivative taken as zero.
    Step,
    Exp(Var),
    LogSoftmax(Var),
    Sqrt(Var),
    Recip(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Inputs are differentiable only when later named in `grad`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let (rows, cols) = (value.rows(), value.cols());
        self.push(Tensor::matrix(rows, cols, value.into_data()), Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = matmul(self.value(a), ta, self.value(b), tb);
        self.push(value, Op::MatMul(a, ta, b, tb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        let cols = x.cols();
        assert_eq!(b.len(), cols, "bias width {} vs {} columns", b.len(), cols);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let value = Tensor::matrix(x.rows(), cols, out);
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = vec![0.0; cols];
        for row in x.data().chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(Tensor::matrix(1, cols, out), Op::SumRows(a))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows * x.len());
        for _ in 0..rows {
            out.extend_from_slice(x.data());
        }
        let value = Tensor::matrix(rows, x.len(), out);
        self.push(value, Op::BroadcastRows(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out: Vec<f64> = x.data().chunks(x.cols()).map(|r| r.iter().sum()).collect();
        let value = Tensor::matrix(x.rows(), 1, out);
        self.push(value, Op::SumCols(a))
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let x = self.value(a);
        let mut out = Vec::with_capacity(x.len() * cols);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, cols));
        }
        let value = Tensor::matrix(x.len(), cols, out);
        self.push(value, Op::BroadcastCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn fill(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let s = self.scalar_value(a);
        let value = Tensor::matrix(rows, cols, vec![s; rows * cols]);
        self.push(value, Op::Fill(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    fn step(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(value, Op::Step)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::matrix(x.rows(), cols, out);
        self.push(value, Op::LogSoftmax(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / x);
        self.push(value, Op::Recip(a))
    }

    /// Sum of elementwise products, `[1 x 1]`.
    pub fn inner(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    fn parents(op: Op) -> [Option<Var>; 2] {
        match op {
            Op::Leaf => [None, None],
            Op::MatMul(a, _, b, _) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                [Some(a), Some(b)]
            }
            Op::Step => [None, None],
            Op::Scale(a, _)
            | Op::SumRows(a)
            | Op::BroadcastRows(a)
            | Op::SumCols(a)
            | Op::BroadcastCols(a)
            | Op::SumAll(a)
            | Op::Fill(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::LogSoftmax(a)
            | Op::Sqrt(a)
            | Op::Recip(a) => [Some(a), None],
        }
    }

    /// Gradient of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned handles are nodes on this tape and may be differentiated
    /// again. A `wrt` entry that `output` does not depend on gets a zero node.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.value(output).len(), 1, "grad needs a scalar output");
        let end = output.0 + 1;

        // nodes on a path from some `wrt` entry
        let mut live = vec![false; end];
        for w in wrt {
            if w.0 < end {
                live[w.0] = true;
            }
        }
        for i in 0..end {
            if live[i] {
                continue;
            }
            live[i] = Self::parents(self.nodes[i].op).iter().flatten().any(|p| live[p.0]);
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        if live[output.0] {
            adj[output.0] = Some(self.constant_scalar(1.0));
        }

        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !live[i] {
                continue;
            }
            let op = self.nodes[i].op;
            let me = Var(i);
            match op {
                Op::Leaf | Op::Step => {}
                Op::MatMul(a, ta, b, tb) => {
                    if live[a.0] {
                        let ga = if ta {
                            self.matmul(b, tb, g, true)
                        } else {
                            self.matmul(g, false, b, !tb)
                        };
                        self.accumulate(&mut adj, a, ga);
                    }
                    if live[b.0] {
                        let gb = if tb {
                            self.matmul(g, true, a, ta)
                        } else {
                            self.matmul(a, !ta, g, false)
                        };
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if live[a.0] {
                        self.accumulate(&mut adj, a, g);
                    }
                    if live[b.0] {
                        self.accumulate(&mut adj, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if live[a.0] {
                        self.accumulate(&mut adj, a, g);
                    }
                    if live[b.0] {
                        let gb = self.scale(g, -1.0);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    if live[a.0] {
                        let ga = self.mul(g, b);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if live[b.0] {
                        let gb = self.mul(g, a);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::AddRow(a, bias) => {
                    if live[a.0] {
                        self.accumulate(&mut adj, a, g);
                    }
                    if live[bias.0] {
                        let gb = self.sum_rows(g);
                        self.accumulate(&mut adj, bias, gb);
                    }
                }
                Op::SumRows(a) => {
                    let rows = self.value(a).rows();
                    let ga = self.broadcast_rows(g, rows);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::BroadcastRows(a) => {
                    let ga = self.sum_rows(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SumCols(a) => {
                    let cols = self.value(a).cols();
                    let ga = self.broadcast_cols(g, cols);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::BroadcastCols(a) => {
                    let ga = self.sum_cols(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = (self.value(a).rows(), self.value(a).cols());
                    let ga = self.fill(g, r, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Fill(a) => {
                    let ga = self.sum_all(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Relu(a) => {
                    let mask = self.step(a);
                    let ga = self.mul(g, mask);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, me);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::LogSoftmax(a) => {
                    // g - softmax * rowsum(g)
                    let cols = self.value(a).cols();
                    let soft = self.exp(me);
                    let rs = self.sum_cols(g);
                    let rs = self.broadcast_cols(rs, cols);
                    let t = self.mul(soft, rs);
                    let ga = self.sub(g, t);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Sqrt(a) => {
                    let r = self.recip(me);
                    let r = self.scale(r, 0.5);
                    let ga = self.mul(g, r);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Recip(a) => {
                    let sq = self.mul(me, me);
                    let sq = self.scale(sq, -1.0);
                    let ga = self.mul(g, sq);
                    self.accumulate(&mut adj, a, ga);
                }
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.value(*w).shape().to_vec();
                    self.push(Tensor::zeros(shape), Op::Leaf)
                }
            })
            .collect()
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, g: Var) {
        adj[target.0] = Some(match adj[target.0] {
            None => g,
            Some(prev) => self.add(prev, g),
        });
    }
}
