//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends one node holding its forward value and the ids
//! of its inputs. [`Tape::backward`] walks the nodes in reverse and applies
//! each operation's gradient rule. Nodes whose inputs never require a
//! gradient (frozen parameters, data, masks) are skipped entirely.

use rand::Rng;

use crate::error::{dim_err, shape_err, Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::{gelu_grad, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: receives the input values, the
/// forward output, and the upstream gradient; returns one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Value<'_, T> {
    #[inline]
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    Scale(usize, T),
    Tanh(usize),
    Gelu(usize),
    Relu(usize),
    Outer(usize, usize),
    Kron(usize, usize),
    Reshape(usize),
    AddN(Vec<usize>),
    SumAll(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    CrossEntropy {
        logits: usize,
        target: usize,
        weight: T,
        probs: Vec<T>,
    },
    Custom {
        inputs: Vec<usize>,
        backward: CustomBackward<T>,
    },
}

struct Node<'p, T: Scalar> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records tensor operations for one forward pass.
///
/// `'p` is the lifetime of parameter tensors borrowed without copying.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Leaf tracked for gradients.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf borrowing a tensor that outlives the tape.
    pub fn borrowed(&mut self, t: &'p Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul(a.0, b.0), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = strict2(av, "matmul_nt")?;
        let (n, k2) = strict2(bv, "matmul_nt")?;
        if k != k2 {
            return Err(dim_err("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        let out = Tensor::new([m, n], out)?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMulNt(a.0, b.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(out, Op::Transpose(a.0), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), ng))
    }

    /// Adds vector `bias` to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row_bias(self.value(bias))?;
        let ng = self.ng(&[x.0, bias.0]);
        Ok(self.push(out, Op::AddRowBias(x.0, bias.0), ng))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).scale(k);
        let ng = self.ng(&[x.0]);
        self.push(out, Op::Scale(x.0, k), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).tanh();
        let ng = self.ng(&[x.0]);
        self.push(out, Op::Tanh(x.0), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).gelu();
        let ng = self.ng(&[x.0]);
        self.push(out, Op::Gelu(x.0), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        let ng = self.ng(&[x.0]);
        self.push(out, Op::Relu(x.0), ng)
    }

    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let out = Tensor::outer(self.value(u), self.value(v))?;
        let ng = self.ng(&[u.0, v.0]);
        Ok(self.push(out, Op::Outer(u.0, v.0), ng))
    }

    pub fn kron(&mut self, s: Var, a: Var) -> Result<Var> {
        let out = Tensor::kron(self.value(s), self.value(a))?;
        let ng = self.ng(&[s.0, a.0]);
        Ok(self.push(out, Op::Kron(s.0, a.0), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(&[x.0]);
        Ok(self.push(out, Op::Reshape(x.0), ng))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err("add_n", "no operands"))?;
        let mut out = self.value(*first).clone();
        for x in &xs[1..] {
            out.add_assign(self.value(*x))?;
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(out, Op::AddN(ids), ng))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x.0]);
        self.push(out, Op::SumAll(x.0), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, T::one() / c::<T>(n as f64))
    }

    /// Softmax over the last axis of a matrix (or a vector).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, n) = xv.dims2("softmax_rows")?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.ng(&[x.0]);
        Ok(self.push(out, Op::SoftmaxRows(x.0), ng))
    }

    /// Row-wise layer normalisation with learned gain and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, n) = xv.dims2("layer_norm")?;
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(dim_err("layer_norm", xv.shape(), gv.shape()));
        }
        let nf: T = c(n as f64);
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..n {
                let h = (row[i] - mean) * rs;
                xhat[r * n + i] = h;
                out[r * n + i] = gv.data()[i] * h + bv.data()[i];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Rows `ids` of a `vocab × d` table, as an `ids.len() × d` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = strict2(tv, "gather_rows")?;
        if ids.is_empty() {
            return Err(shape_err("gather_rows", "no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(shape_err("gather_rows", format!("row {id} of {vocab}")));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new([ids.len(), d], out)?;
        let ng = self.ng(&[table.0]);
        Ok(self.push(
            out,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no operands"))?;
        let (_, d) = strict2(self.value(*first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for x in xs {
            let v = self.value(*x);
            let (r, d2) = strict2(v, "concat_rows")?;
            if d2 != d {
                return Err(dim_err(
                    "concat_rows",
                    self.value(*first).shape(),
                    v.shape(),
                ));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new([rows, d], data)?;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(out, Op::ConcatRows(ids), ng))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, d) = strict2(xv, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(shape_err(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let out = Tensor::new([len, d], xv.data()[start * d..(start + len) * d].to_vec())?;
        let ng = self.ng(&[x.0]);
        Ok(self.push(out, Op::SliceRows { x: x.0, start }, ng))
    }

    /// Multiplies by an inverted-dropout mask drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let inv: T = c(1.0 / keep);
        let shape = self.value(x).shape().to_vec();
        let mask = Tensor::from_fn(shape, |_| {
            if rng.random::<f64>() < keep {
                inv
            } else {
                T::zero()
            }
        });
        let m = self.constant(mask);
        self.mul(x, m).expect("mask has the input's shape")
    }

    /// `weight · (−log softmax(logits)[target])` for a single example.
    pub fn cross_entropy(&mut self, logits: Var, target: usize, weight: T) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.numel();
        if lv.rank() > 2 || (lv.rank() == 2 && lv.shape()[0] != 1) {
            return Err(shape_err(
                "cross_entropy",
                format!("expected one row of logits, got {:?}", lv.shape()),
            ));
        }
        if target >= n {
            return Err(Error::LabelOutOfRange {
                task: 0,
                label: target,
                n_classes: n,
            });
        }
        let m = lv.data().iter().copied().fold(T::neg_infinity(), T::max);
        let mut probs: Vec<T> = lv.data().iter().map(|&v| (v - m).exp()).collect();
        let z: T = probs.iter().copied().sum();
        for p in probs.iter_mut() {
            *p /= z;
        }
        let nll = -(lv.data()[target] - m - z.ln());
        let out = Tensor::scalar(weight * nll);
        let ng = self.ng(&[logits.0]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits: logits.0,
                target,
                weight,
                probs,
            },
            ng,
        ))
    }

    /// Operation with a caller-supplied forward value and gradient rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let ng = self.ng(&ids);
        self.push(
            value,
            Op::Custom {
                inputs: ids,
                backward,
            },
            ng,
        )
    }

    /// Gradients of the scalar `output` with respect to every node that
    /// requires one. Only leaf gradients are retained.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape().to_vec(), T::one()));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |i: usize| self.nodes[i].value.get();
        let wants = |i: usize| self.nodes[i].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = strict2(av, "matmul")?;
                let n = bv.shape()[1];
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    acc(grads, *a, Tensor::new([m, k], da)?)?;
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(av.data(), g.data(), &mut db, k, m, n);
                    acc(grads, *b, Tensor::new([k, n], db)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = strict2(av, "matmul_nt")?;
                let n = bv.shape()[0];
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(g.data(), bv.data(), &mut da, m, n, k);
                    acc(grads, *a, Tensor::new([m, k], da)?)?;
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(g.data(), av.data(), &mut db, n, m, k);
                    acc(grads, *b, Tensor::new([n, k], db)?)?;
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    acc(grads, *a, g.transpose()?)?;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(grads, *a, g.clone())?;
                }
                if wants(*b) {
                    acc(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(grads, *a, g.clone())?;
                }
                if wants(*b) {
                    acc(grads, *b, g.scale(-T::one()))?;
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(grads, *a, g.mul(val(*b))?)?;
                }
                if wants(*b) {
                    acc(grads, *b, g.mul(val(*a))?)?;
                }
            }
            Op::AddRowBias(x, b) => {
                if wants(*x) {
                    acc(grads, *x, g.clone())?;
                }
                if wants(*b) {
                    let n = val(*b).numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, Tensor::vector(db))?;
                }
            }
            Op::Scale(x, k) => {
                if wants(*x) {
                    acc(grads, *x, g.scale(*k))?;
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let y = node.value.get();
                    acc(
                        grads,
                        *x,
                        g.zip_map(y, "tanh", |gv, yv| gv * (T::one() - yv * yv))?,
                    )?;
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    acc(
                        grads,
                        *x,
                        g.zip_map(val(*x), "gelu", |gv, xv| gv * gelu_grad(xv))?,
                    )?;
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let d =
                        g.zip_map(
                            val(*x),
                            "relu",
                            |gv, xv| if xv > T::zero() { gv } else { T::zero() },
                        )?;
                    acc(grads, *x, d)?;
                }
            }
            Op::Outer(u, v) => {
                let (uv, vv) = (val(*u), val(*v));
                let (m, n) = (uv.numel(), vv.numel());
                if wants(*u) {
                    let du = (0..m)
                        .map(|i| {
                            g.data()[i * n..(i + 1) * n]
                                .iter()
                                .zip(vv.data())
                                .map(|(&a, &b)| a * b)
                                .sum()
                        })
                        .collect();
                    acc(grads, *u, Tensor::vector(du))?;
                }
                if wants(*v) {
                    let mut dv = vec![T::zero(); n];
                    for i in 0..m {
                        let ui = uv.data()[i];
                        for (d, &gv) in dv.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                            *d += gv * ui;
                        }
                    }
                    acc(grads, *v, Tensor::vector(dv))?;
                }
            }
            Op::Kron(s, a) => {
                let (sv, av) = (val(*s), val(*a));
                let (p, q) = strict2(sv, "kron")?;
                let (r, t) = strict2(av, "kron")?;
                let cols = q * t;
                let mut ds = vec![T::zero(); p * q];
                let mut da = vec![T::zero(); r * t];
                for i in 0..p {
                    for j in 0..q {
                        let sij = sv.data()[i * q + j];
                        let mut acc_s = T::zero();
                        for k in 0..r {
                            let row = (i * r + k) * cols + j * t;
                            let gblk = &g.data()[row..row + t];
                            let arow = &av.data()[k * t..(k + 1) * t];
                            for l in 0..t {
                                acc_s += gblk[l] * arow[l];
                                da[k * t + l] += gblk[l] * sij;
                            }
                        }
                        ds[i * q + j] = acc_s;
                    }
                }
                if wants(*s) {
                    acc(grads, *s, Tensor::new([p, q], ds)?)?;
                }
                if wants(*a) {
                    acc(grads, *a, Tensor::new([r, t], da)?)?;
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    acc(grads, *x, g.reshape(val(*x).shape().to_vec())?)?;
                }
            }
            Op::AddN(xs) => {
                for x in xs {
                    if wants(*x) {
                        acc(grads, *x, g.clone())?;
                    }
                }
            }
            Op::SumAll(x) => {
                if wants(*x) {
                    acc(grads, *x, Tensor::full(val(*x).shape().to_vec(), g.item()))?;
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    let y = node.value.get();
                    let (_, n) = y.dims2("softmax_rows")?;
                    let mut dx = g.clone();
                    for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for (d, &yv) in drow.iter_mut().zip(yrow) {
                            *d = yv * (*d - dot);
                        }
                    }
                    acc(grads, *x, dx)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma);
                let n = gv.numel();
                let rows = rstd.len();
                let nf: T = c(n as f64);
                if wants(*gamma) || wants(*beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for r in 0..rows {
                        for i in 0..n {
                            let gi = g.data()[r * n + i];
                            dg[i] += gi * xhat[r * n + i];
                            db[i] += gi;
                        }
                    }
                    if wants(*gamma) {
                        acc(grads, *gamma, Tensor::vector(dg))?;
                    }
                    if wants(*beta) {
                        acc(grads, *beta, Tensor::vector(db))?;
                    }
                }
                if wants(*x) {
                    let mut dx = vec![T::zero(); rows * n];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..n {
                            let dxh = g.data()[r * n + i] * gv.data()[i];
                            s1 += dxh;
                            s2 += dxh * xhat[r * n + i];
                        }
                        for i in 0..n {
                            let dxh = g.data()[r * n + i] * gv.data()[i];
                            dx[r * n + i] = rstd[r] / nf * (nf * dxh - s1 - xhat[r * n + i] * s2);
                        }
                    }
                    acc(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx)?)?;
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let tv = val(*table);
                    let d = tv.shape()[1];
                    let mut dt = Tensor::zeros(tv.shape().to_vec());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    acc(grads, *table, dt)?;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let shape = val(*x).shape().to_vec();
                    let n = shape[0] * shape[1];
                    if wants(*x) {
                        acc(
                            grads,
                            *x,
                            Tensor::new(shape, g.data()[offset..offset + n].to_vec())?,
                        )?;
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let xv = val(*x);
                    let d = xv.shape()[1];
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    dx.data_mut()[start * d..start * d + g.numel()].copy_from_slice(g.data());
                    acc(grads, *x, dx)?;
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                weight,
                probs,
            } => {
                if wants(*logits) {
                    let scale = g.item() * *weight;
                    let d: Vec<T> = probs
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| {
                            scale * (p - if i == *target { T::one() } else { T::zero() })
                        })
                        .collect();
                    acc(
                        grads,
                        *logits,
                        Tensor::new(val(*logits).shape().to_vec(), d)?,
                    )?;
                }
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
                let gs = backward(&ins, node.value.get(), g);
                if gs.len() != inputs.len() {
                    return Err(Error::Contract("custom backward arity".into()));
                }
                for (&i, gi) in inputs.iter().zip(gs) {
                    if wants(i) {
                        acc(grads, i, gi)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn strict2<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}
