//! Tensor-valued reverse-mode differentiation on an explicit tape.
//!
//! Nodes are evaluated eagerly as they are pushed; the tape records enough to
//! run the chain rule backwards from any scalar node. Besides elementwise and
//! matrix primitives, the op set includes three fused domain ops that keep
//! graphs small: a linear solve (for the bilinear discretization), the
//! normal-plus-low-rank matrix assembly, and a multi-channel state-space scan
//! with native backpropagation through time.

pub mod tensor;

pub use tensor::Tensor;

use crate::linalg::{self, LinalgError, Lu};
use crate::ssm::nplr::SpectrumBasis;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward requires a scalar output node (got shape {0:?})")]
    NonScalarOutput(Vec<usize>),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    /// Elementwise product with a constant tensor.
    MulConst(NodeId, Tensor),
    Scale(NodeId, f64),
    /// Elementwise sum with a constant tensor.
    AddConst(NodeId),
    /// Row-broadcast add: (L x H) + (H).
    AddBroadcast(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Smooth tanh-based approximation of the Gaussian-error linear unit.
    TanhGelu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Clamp(NodeId, f64, f64),
    SumAll(NodeId),
    /// Weighted sum against a constant tensor; yields a scalar.
    DotConst(NodeId, Tensor),
    /// Identity forward; upstream adjoint multiplied by -mu.
    GradReverse(NodeId, f64),
    /// out = k * s * x with s a scalar node.
    ScaleByNode {
        x: NodeId,
        s: NodeId,
        k: f64,
    },
    /// out = a^1 b with the factorization cached from the forward pass.
    Solve {
        a: NodeId,
        b: NodeId,
        lu: Lu,
    },
    /// Assemble the real matrix sum_j (re_j, im_j) . basis + lone - p q^T from
    /// a flat spectrum vector and the rank-1 factors.
    NplrAssemble {
        lambda: NodeId,
        p: NodeId,
        q: NodeId,
        basis: Rc<SpectrumBasis>,
    },
    /// Per-channel linear recurrence over an (L x H) input, with the
    /// post-update states cached for backpropagation through time.
    ScanChannels {
        a_bars: Vec<NodeId>,
        b_bars: Vec<NodeId>,
        cs: Vec<NodeId>,
        input: NodeId,
        states: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Adjoints produced by a backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul_elem: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::MulElem(a, b), out)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Tensor) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape(), "mul_const: shape mismatch");
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::MulConst(a, c), out)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| k * x).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::Scale(a, k), out)
    }

    pub fn add_const(&mut self, a: NodeId, c: Tensor) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape(), "add_const: shape mismatch");
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::AddConst(a), out)
    }

    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let cols = vb.len();
        assert_eq!(
            va.cols(),
            cols,
            "add_broadcast: row width {} vs bias length {}",
            va.cols(),
            cols
        );
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(Op::AddBroadcast(a, b), out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul: inner dimension mismatch ({k} vs {k2})");
        let mut data = vec![0.0; m * n];
        mm_acc_nn(va.data(), vb.data(), &mut data, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, data))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::Tanh(a), out)
    }

    pub fn tanh_gelu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::TanhGelu(a), out)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::Exp(a), out)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::Ln(a), out)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo < hi, "clamp: empty interval");
        let data = self.value(a).data().iter().map(|x| x.clamp(lo, hi)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data);
        self.push(Op::Clamp(a, lo, hi), out)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn dot_const(&mut self, a: NodeId, w: Tensor) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.len(), w.len(), "dot_const: length mismatch");
        let s = va.data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        self.push(Op::DotConst(a, w), Tensor::scalar(s))
    }

    pub fn grad_reverse(&mut self, a: NodeId, mu: f64) -> NodeId {
        assert!(mu >= 0.0, "grad_reverse: mu must be nonnegative");
        let out = self.value(a).clone();
        self.push(Op::GradReverse(a, mu), out)
    }

    pub fn scale_by_node(&mut self, x: NodeId, s: NodeId, k: f64) -> NodeId {
        assert!(self.value(s).is_scalar(), "scale_by_node: s must be scalar");
        let sv = self.value(s).scalar_value();
        let data = self.value(x).data().iter().map(|v| k * sv * v).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data);
        self.push(Op::ScaleByNode { x, s, k }, out)
    }

    /// Solve `A X = B` for X, where A is square and B is a matching matrix or
    /// vector. Fails if A is numerically singular.
    pub fn solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, LinalgError> {
        let va = self.value(a);
        let n = va.rows();
        assert_eq!(va.cols(), n, "solve: A must be square");
        assert_eq!(self.value(b).rows(), n, "solve: B row count mismatch");
        let lu = linalg::lu_factor(&va.to_mat())?;
        let vb = self.value(b);
        let out = if vb.shape().len() == 1 {
            Tensor::vector(lu.solve_vec(vb.data()))
        } else {
            let x = lu.solve_mat(&vb.to_mat());
            Tensor::matrix(n, vb.cols(), x.data().to_vec())
        };
        Ok(self.push(Op::Solve { a, b, lu }, out))
    }

    /// Assemble `sum_j (lambda_re_j, lambda_im_j) · basis_j [+ lone] − p qᵀ`.
    /// `lambda` follows the flattened pair layout of the spectrum basis.
    pub fn nplr_assemble(
        &mut self,
        lambda: NodeId,
        p: NodeId,
        q: NodeId,
        basis: Rc<SpectrumBasis>,
    ) -> NodeId {
        let n = self.value(p).len();
        assert_eq!(self.value(q).len(), n, "nplr_assemble: q length mismatch");
        assert_eq!(
            self.value(lambda).len(),
            n,
            "nplr_assemble: spectrum length mismatch"
        );
        let pairs = basis.pair_re.len();
        assert_eq!(basis.lone.is_some(), n % 2 == 1);
        let lam = self.value(lambda).data();
        let pv = self.value(p).data();
        let qv = self.value(q).data();
        let mut data = vec![0.0; n * n];
        for j in 0..pairs {
            let (re, im) = (lam[2 * j], lam[2 * j + 1]);
            let (mre, mim) = (basis.pair_re[j].data(), basis.pair_im[j].data());
            for i in 0..n * n {
                data[i] += re * mre[i] + im * mim[i];
            }
        }
        if let Some(lone) = &basis.lone {
            let a = lam[n - 1];
            for (d, m) in data.iter_mut().zip(lone.data()) {
                *d += a * m;
            }
        }
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] -= pv[i] * qv[j];
            }
        }
        self.push(
            Op::NplrAssemble { lambda, p, q, basis },
            Tensor::matrix(n, n, data),
        )
    }

    /// Run H independent linear recurrences, one per input column:
    /// `x_k = Abar_h x_{k-1} + bbar_h u[k,h]`, `out[k,h] = c_h · x_k`.
    pub fn scan_channels(
        &mut self,
        a_bars: Vec<NodeId>,
        b_bars: Vec<NodeId>,
        cs: Vec<NodeId>,
        input: NodeId,
    ) -> NodeId {
        let h_count = a_bars.len();
        assert_eq!(b_bars.len(), h_count, "scan_channels: b_bars count");
        assert_eq!(cs.len(), h_count, "scan_channels: cs count");
        let vin = self.value(input);
        assert_eq!(vin.cols(), h_count, "scan_channels: input width mismatch");
        let l = vin.rows();
        let n = self.value(b_bars[0]).len();
        let mut out = vec![0.0; l * h_count];
        let mut states = vec![0.0; h_count * l * n];
        let u = self.value(input).data().to_vec();
        for h in 0..h_count {
            let a = self.value(a_bars[h]).data();
            let b = self.value(b_bars[h]).data();
            let c = self.value(cs[h]).data();
            assert_eq!(a.len(), n * n, "scan_channels: Abar size mismatch");
            assert_eq!(b.len(), n, "scan_channels: bbar size mismatch");
            assert_eq!(c.len(), n, "scan_channels: c size mismatch");
            let chan = &mut states[h * l * n..(h + 1) * l * n];
            let mut prev = vec![0.0; n];
            for k in 0..l {
                let uk = u[k * h_count + h];
                let xk = &mut chan[k * n..(k + 1) * n];
                for i in 0..n {
                    let row = &a[i * n..(i + 1) * n];
                    let mut acc = b[i] * uk;
                    for (aij, xj) in row.iter().zip(prev.iter()) {
                        acc += aij * xj;
                    }
                    xk[i] = acc;
                }
                prev.copy_from_slice(xk);
                let mut y = 0.0;
                for (ci, xi) in c.iter().zip(xk.iter()) {
                    y += ci * xi;
                }
                out[k * h_count + h] = y;
            }
        }
        self.push(
            Op::ScanChannels {
                a_bars,
                b_bars,
                cs,
                input,
                states,
            },
            Tensor::matrix(l, h_count, out),
        )
    }

    /// Reverse pass from a scalar node; returns adjoints for every node
    /// reachable backwards from `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, AutodiffError> {
        let shape = self.value(output).shape().to_vec();
        if !self.value(output).is_scalar() {
            return Err(AutodiffError::NonScalarOutput(shape));
        }
        let mut seeds = Gradients {
            grads: self.nodes.iter().map(|n| Tensor::zeros_like(&n.value)).collect(),
        };
        seeds.grads[output.0] = Tensor::scalar(1.0);
        Ok(self.backward_from(seeds, output.0))
    }

    fn backward_from(&self, mut g: Gradients, start: usize) -> Gradients {
        let mut reached = vec![false; self.nodes.len()];
        reached[start] = true;
        for i in (0..=start).rev() {
            if !reached[i] {
                continue;
            }
            let upstream = g.grads[i].clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut g.grads[a.0], upstream.data(), 1.0);
                    acc(&mut g.grads[b.0], upstream.data(), 1.0);
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Sub(a, b) => {
                    acc(&mut g.grads[a.0], upstream.data(), 1.0);
                    acc(&mut g.grads[b.0], upstream.data(), -1.0);
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::MulElem(a, b) => {
                    let (va, vb) = (
                        self.nodes[a.0].value.data().to_vec(),
                        self.nodes[b.0].value.data().to_vec(),
                    );
                    acc_mul(&mut g.grads[a.0], upstream.data(), &vb);
                    acc_mul(&mut g.grads[b.0], upstream.data(), &va);
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::MulConst(a, c) => {
                    acc_mul(&mut g.grads[a.0], upstream.data(), c.data());
                    reached[a.0] = true;
                }
                Op::Scale(a, k) => {
                    acc(&mut g.grads[a.0], upstream.data(), *k);
                    reached[a.0] = true;
                }
                Op::AddConst(a) => {
                    acc(&mut g.grads[a.0], upstream.data(), 1.0);
                    reached[a.0] = true;
                }
                Op::AddBroadcast(a, b) => {
                    acc(&mut g.grads[a.0], upstream.data(), 1.0);
                    let cols = self.nodes[b.0].value.len();
                    let gb = g.grads[b.0].data_mut();
                    for row in upstream.data().chunks(cols) {
                        for (d, u) in gb.iter_mut().zip(row) {
                            *d += u;
                        }
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    let vad = va.data().to_vec();
                    let vbd = vb.data().to_vec();
                    mm_acc_nt(upstream.data(), &vbd, g.grads[a.0].data_mut(), m, k, n);
                    mm_acc_tn(&vad, upstream.data(), g.grads[b.0].data_mut(), m, k, n);
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Sigmoid(a) => {
                    let out = self.nodes[i].value.data();
                    let ga = g.grads[a.0].data_mut();
                    for ((d, u), s) in ga.iter_mut().zip(upstream.data()).zip(out) {
                        *d += u * s * (1.0 - s);
                    }
                    reached[a.0] = true;
                }
                Op::Tanh(a) => {
                    let out = self.nodes[i].value.data();
                    let ga = g.grads[a.0].data_mut();
                    for ((d, u), t) in ga.iter_mut().zip(upstream.data()).zip(out) {
                        *d += u * (1.0 - t * t);
                    }
                    reached[a.0] = true;
                }
                Op::TanhGelu(a) => {
                    let xin = self.nodes[a.0].value.data().to_vec();
                    let ga = g.grads[a.0].data_mut();
                    for ((d, u), x) in ga.iter_mut().zip(upstream.data()).zip(&xin) {
                        *d += u * gelu_deriv(*x);
                    }
                    reached[a.0] = true;
                }
                Op::Exp(a) => {
                    let out = self.nodes[i].value.data();
                    let ga = g.grads[a.0].data_mut();
                    for ((d, u), e) in ga.iter_mut().zip(upstream.data()).zip(out) {
                        *d += u * e;
                    }
                    reached[a.0] = true;
                }
                Op::Ln(a) => {
                    let xin = self.nodes[a.0].value.data().to_vec();
                    let ga = g.grads[a.0].data_mut();
                    for ((d, u), x) in ga.iter_mut().zip(upstream.data()).zip(&xin) {
                        *d += u / x;
                    }
                    reached[a.0] = true;
                }
                Op::Clamp(a, lo, hi) => {
                    let xin = self.nodes[a.0].value.data().to_vec();
                    let ga = g.grads[a.0].data_mut();
                    for ((d, u), x) in ga.iter_mut().zip(upstream.data()).zip(&xin) {
                        if *x > *lo && *x < *hi {
                            *d += u;
                        }
                    }
                    reached[a.0] = true;
                }
                Op::SumAll(a) => {
                    let u = upstream.scalar_value();
                    for d in g.grads[a.0].data_mut() {
                        *d += u;
                    }
                    reached[a.0] = true;
                }
                Op::DotConst(a, w) => {
                    let u = upstream.scalar_value();
                    acc(&mut g.grads[a.0], w.data(), u);
                    reached[a.0] = true;
                }
                Op::GradReverse(a, mu) => {
                    acc(&mut g.grads[a.0], upstream.data(), -mu);
                    reached[a.0] = true;
                }
                Op::ScaleByNode { x, s, k } => {
                    let sv = self.nodes[s.0].value.scalar_value();
                    let xv = self.nodes[x.0].value.data().to_vec();
                    acc(&mut g.grads[x.0], upstream.data(), k * sv);
                    let mut ds = 0.0;
                    for (u, xi) in upstream.data().iter().zip(&xv) {
                        ds += u * xi;
                    }
                    g.grads[s.0].data_mut()[0] += k * ds;
                    reached[x.0] = true;
                    reached[s.0] = true;
                }
                Op::Solve { a, b, lu } => {
                    // X = A_inv B. With upstream G: dB = A_invT G, dA = -dB X^T.
                    let x = &self.nodes[i].value;
                    let n = x.rows();
                    let cols = x.cols();
                    let gb: Vec<f64> = if cols == 1 && x.shape().len() == 1 {
                        lu.solve_transpose_vec(upstream.data())
                    } else {
                        let gm = Tensor::new(x.shape().to_vec(), upstream.data().to_vec());
                        lu.solve_transpose_mat(&gm.to_mat()).data().to_vec()
                    };
                    acc(&mut g.grads[b.0], &gb, 1.0);
                    let xv = x.data().to_vec();
                    let ga = g.grads[a.0].data_mut();
                    for r in 0..n {
                        for c in 0..n {
                            let mut s = 0.0;
                            for col in 0..cols {
                                s += gb[r * cols + col] * xv[c * cols + col];
                            }
                            ga[r * n + c] -= s;
                        }
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::NplrAssemble { lambda, p, q, basis } => {
                    let n = self.nodes[p.0].value.len();
                    let pairs = basis.pair_re.len();
                    let gu = upstream.data();
                    {
                        let gl = g.grads[lambda.0].data_mut();
                        for j in 0..pairs {
                            let mut dre = 0.0;
                            let mut dim = 0.0;
                            let (mre, mim) = (basis.pair_re[j].data(), basis.pair_im[j].data());
                            for i in 0..n * n {
                                dre += gu[i] * mre[i];
                                dim += gu[i] * mim[i];
                            }
                            gl[2 * j] += dre;
                            gl[2 * j + 1] += dim;
                        }
                        if let Some(lone) = &basis.lone {
                            let mut dl = 0.0;
                            for (u, m) in gu.iter().zip(lone.data()) {
                                dl += u * m;
                            }
                            gl[n - 1] += dl;
                        }
                    }
                    let pv = self.nodes[p.0].value.data().to_vec();
                    let qv = self.nodes[q.0].value.data().to_vec();
                    {
                        let gp = g.grads[p.0].data_mut();
                        for i in 0..n {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gu[i * n + j] * qv[j];
                            }
                            gp[i] -= s;
                        }
                    }
                    {
                        let gq = g.grads[q.0].data_mut();
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..n {
                                s += gu[i * n + j] * pv[i];
                            }
                            gq[j] -= s;
                        }
                    }
                    reached[lambda.0] = true;
                    reached[p.0] = true;
                    reached[q.0] = true;
                }
                Op::ScanChannels {
                    a_bars,
                    b_bars,
                    cs,
                    input,
                    states,
                } => {
                    let h_count = a_bars.len();
                    let vin = &self.nodes[input.0].value;
                    let l = vin.rows();
                    let n = self.nodes[b_bars[0].0].value.len();
                    let u = vin.data().to_vec();
                    let gu = upstream.data();
                    let mut g_input = vec![0.0; l * h_count];
                    for h in 0..h_count {
                        let a = self.nodes[a_bars[h].0].value.data().to_vec();
                        let b = self.nodes[b_bars[h].0].value.data().to_vec();
                        let c = self.nodes[cs[h].0].value.data().to_vec();
                        let chan = &states[h * l * n..(h + 1) * l * n];
                        let mut ga = vec![0.0; n * n];
                        let mut gb = vec![0.0; n];
                        let mut gc = vec![0.0; n];
                        let mut carry = vec![0.0; n];
                        let mut xbar = vec![0.0; n];
                        let mut next_carry = vec![0.0; n];
                        for k in (0..l).rev() {
                            let gy = gu[k * h_count + h];
                            let xk = &chan[k * n..(k + 1) * n];
                            for i in 0..n {
                                xbar[i] = carry[i] + c[i] * gy;
                                gc[i] += gy * xk[i];
                            }
                            let uk = u[k * h_count + h];
                            let mut du = 0.0;
                            for i in 0..n {
                                du += b[i] * xbar[i];
                                gb[i] += xbar[i] * uk;
                            }
                            g_input[k * h_count + h] = du;
                            if k > 0 {
                                let xprev = &chan[(k - 1) * n..k * n];
                                for i in 0..n {
                                    let xb = xbar[i];
                                    let row = &mut ga[i * n..(i + 1) * n];
                                    for (gaij, xp) in row.iter_mut().zip(xprev) {
                                        *gaij += xb * xp;
                                    }
                                }
                            }
                            next_carry.iter_mut().for_each(|v| *v = 0.0);
                            for i in 0..n {
                                let xb = xbar[i];
                                let row = &a[i * n..(i + 1) * n];
                                for (nc, aij) in next_carry.iter_mut().zip(row) {
                                    *nc += aij * xb;
                                }
                            }
                            std::mem::swap(&mut carry, &mut next_carry);
                        }
                        acc(&mut g.grads[a_bars[h].0], &ga, 1.0);
                        acc(&mut g.grads[b_bars[h].0], &gb, 1.0);
                        acc(&mut g.grads[cs[h].0], &gc, 1.0);
                        reached[a_bars[h].0] = true;
                        reached[b_bars[h].0] = true;
                        reached[cs[h].0] = true;
                    }
                    acc(&mut g.grads[input.0], &g_input, 1.0);
                    reached[input.0] = true;
                }
            }
        }
        g
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn acc(dst: &mut Tensor, src: &[f64], k: f64) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += k * s;
    }
}

fn acc_mul(dst: &mut Tensor, upstream: &[f64], other: &[f64]) {
    for ((d, u), o) in dst.data_mut().iter_mut().zip(upstream).zip(other) {
        *d += u * o;
    }
}

/// out(m,n) += a(m,k) · b(k,n)
fn mm_acc_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for kk in 0..k {
            let t = a[i * k + kk];
            if t == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += t * bv;
            }
        }
    }
}

/// out(m,k) += g(m,n) · b(k,n)ᵀ
fn mm_acc_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + kk] += s;
        }
    }
}

/// out(k,n) += a(m,k)ᵀ · g(m,n)
fn mm_acc_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let t = a[i * k + kk];
            if t == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += t * gv;
            }
        }
    }
}
