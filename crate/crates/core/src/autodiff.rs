//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is built fresh for every forward pass. Each primitive checks
//! shapes before computing, appends a node holding its output value plus
//! whatever the backward rule needs, and returns a [`Var`] handle.
//! [`Tape::backward`] then walks the nodes in reverse insertion order, which is
//! a valid topological order because a node can only reference earlier nodes.
//!
//! Broadcasting rules are explicit per primitive: `add_row` adds a length-`c`
//! vector to every row of an `r×c` matrix; every other binary elementwise
//! primitive requires identical shapes.

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{self, SymEigen};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Maximum(Var, Var),
    Sum(Var),
    Mean(Var),
    DiagEmbed(Var),
    Transpose(Var),
    Symmetrize(Var),
    Reshape(Var),
    Row(Var, usize),
    Element(Var, usize),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Apl {
        x: Var,
        alpha: Var,
        beta: Var,
    },
    Gram {
        beta: Var,
        /// `P_ij = ∂/∂β_i of ∫ ReLU(β_i − x) ReLU(β_j − x) N(x) dx`, one factor only.
        partials: Vec<f64>,
        jitter_coef: f64,
    },
    EigValues {
        input: Var,
        eig: Rc<SymEigen>,
    },
    EigVectors {
        input: Var,
        eig: Rc<SymEigen>,
    },
    CausalAttention {
        query: Var,
        keys: Vec<Var>,
        values: Vec<Var>,
        weights: Vec<f64>,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eigenvalue gaps below this are treated as degenerate in the eigenvector
/// backward rule.
pub const EIG_DEGENERACY_TOL: f64 = 1e-10;

/// Recorded computation. Values are immutable once pushed.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; like.numel()])
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Stores the gradient of `v` in `target.grad`, accumulating with any
    /// gradient already there.
    pub fn write_into(&self, v: Var, target: &mut Tensor) {
        let g = self.get_or_zeros(v, target);
        match &mut target.grad {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            None => target.grad = Some(g),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() == rank {
        Ok(())
    } else {
        shape_err(op, format!("expected rank {rank}, got shape {:?}", t.shape()))
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("shape preserved")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shape preserved")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: &Tensor) -> Var {
        let mut value = value.clone();
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound either as a parameter or as a constant.
    pub fn leaf(&mut self, value: &Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value.clone())
        }
    }

    /// Constant copy of `v`'s current value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `matrix[r×c] + row[c]`, the row added to every row.
    pub fn add_row(&mut self, matrix: Var, row: Var) -> Result<Var> {
        let (m, r) = (self.value(matrix), self.value(row));
        expect_rank("add_row", m, 2)?;
        if r.rank() != 1 || r.numel() != m.cols() {
            return shape_err("add_row", format!("{:?} + {:?}", m.shape(), r.shape()));
        }
        let cols = m.cols();
        let mut out = m.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r.data()[i % cols];
        }
        Ok(self.push(out, Op::AddRow(matrix, row), &[matrix, row]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| s * x);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.value(a), |x| x + c);
        self.push(out, Op::Offset(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", ta, 2)?;
        expect_rank("matmul", tb, 2)?;
        if ta.cols() != tb.rows() {
            return shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        linalg::matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul_nt", ta, 2)?;
        expect_rank("matmul_nt", tb, 2)?;
        if ta.cols() != tb.cols() {
            return shape_err(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape()),
            );
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        linalg::matmul_nt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    /// Concatenation along `axis`: axis 0 of vectors, or axis 0/1 of matrices.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let rank = self.value(first).rank();
        if rank == 0 || rank > 2 || axis >= rank {
            return shape_err("concat", format!("axis {axis} on rank {rank}"));
        }
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != rank {
                return shape_err("concat", "mixed ranks");
            }
            if rank == 2 {
                let other = 1 - axis;
                if s[other] != self.value(first).shape()[other] {
                    return shape_err(
                        "concat",
                        format!(
                            "{:?} vs {:?} along axis {axis}",
                            self.value(first).shape(),
                            s
                        ),
                    );
                }
            }
        }
        let out = if rank == 1 || axis == 0 {
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|&p| self.value(p).data().iter().copied())
                .collect();
            let mut shape = self.value(first).shape().to_vec();
            shape[0] = parts.iter().map(|&p| self.value(p).shape()[0]).sum();
            Tensor::new(shape, data)?
        } else {
            let rows = self.value(first).rows();
            let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::matrix(rows, total, data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &x)| !(x > 0.0))
        {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        let out = map(self.value(a), f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    /// Elementwise maximum. At exact ties the gradient flows to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("maximum", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| if x >= y { x } else { y });
        Ok(self.push(out, Op::Maximum(a, b), &[a, b]))
    }

    /// Sum of all entries, left to right.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(0.0, |acc, x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().fold(0.0, |acc, x| acc + x) / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Vector `[n]` to diagonal matrix `[n×n]`.
    pub fn diag_embed(&mut self, a: Var) -> Result<Var> {
        expect_rank("diag_embed", self.value(a), 1)?;
        let v = self.value(a).data();
        let n = v.len();
        let mut out = Tensor::zeros(&[n, n]);
        for (i, &x) in v.iter().enumerate() {
            out.set(i, i, x);
        }
        Ok(self.push(out, Op::DiagEmbed(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        expect_rank("transpose", self.value(a), 2)?;
        let out = linalg::transpose(self.value(a));
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// `(A + Aᵀ)/2` of a square matrix.
    pub fn symmetrize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.rows() != t.cols() {
            return shape_err("symmetrize", format!("{:?}", t.shape()));
        }
        let out = linalg::symmetrize(t);
        Ok(self.push(out, Op::Symmetrize(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        expect_rank("row", t, 2)?;
        if i >= t.rows() {
            return shape_err("row", format!("row {i} of {:?}", t.shape()));
        }
        let out = Tensor::vector(t.row(i).to_vec());
        Ok(self.push(out, Op::Row(a, i), &[a]))
    }

    /// Entry at flat index `i`, as a scalar.
    pub fn element(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.numel() {
            return shape_err("element", format!("index {i} of {:?}", t.shape()));
        }
        let out = Tensor::scalar(t.data()[i]);
        Ok(self.push(out, Op::Element(a, i), &[a]))
    }

    /// Mean over rows of `−log softmax(logits_r)[target_r]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let t2;
        let t = if t.rank() == 1 {
            t2 = t.clone().reshaped(vec![1, t.numel()])?;
            &t2
        } else {
            t
        };
        expect_rank("softmax_cross_entropy", t, 2)?;
        let (rows, cols) = (t.rows(), t.cols());
        if targets.len() != rows {
            return shape_err(
                "softmax_cross_entropy",
                format!("{rows} rows but {} targets", targets.len()),
            );
        }
        if let Some((index, &c)) = targets.iter().enumerate().find(|(_, &c)| c >= cols) {
            return Err(Error::Domain {
                op: "softmax_cross_entropy",
                index,
                value: c as f64,
            });
        }
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = t.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                probs[r * cols + c] /= z;
            }
            loss += -(row[targets[r]] - max - z.ln());
        }
        let out = Tensor::scalar(loss / rows as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Adaptive piecewise-linear activation, applied elementwise:
    /// `ReLU(x) + Σ_m α_m ReLU(β_m − x)`.
    pub fn apl(&mut self, x: Var, alpha: Var, beta: Var) -> Result<Var> {
        let (a, b) = (self.value(alpha), self.value(beta));
        if a.rank() != 1 || b.rank() != 1 || a.numel() != b.numel() {
            return shape_err(
                "apl",
                format!("alpha {:?} vs beta {:?}", a.shape(), b.shape()),
            );
        }
        let (ad, bd) = (a.data(), b.data());
        let out = map(self.value(x), |v| {
            let mut y = if v > 0.0 { v } else { 0.0 };
            for (&am, &bm) in ad.iter().zip(bd) {
                let r = bm - v;
                if r > 0.0 {
                    y += am * r;
                }
            }
            y
        });
        Ok(self.push(out, Op::Apl { x, alpha, beta }, &[x, alpha, beta]))
    }

    /// Records a Gram-matrix node computed outside the tape, together with
    /// the one-sided partials needed for its backward rule.
    pub(crate) fn push_gram(
        &mut self,
        beta: Var,
        value: Tensor,
        partials: Vec<f64>,
        jitter_coef: f64,
    ) -> Var {
        self.push(
            value,
            Op::Gram {
                beta,
                partials,
                jitter_coef,
            },
            &[beta],
        )
    }

    /// Symmetric eigendecomposition of `x` (symmetrized first). Returns
    /// `(eigenvectors as columns, eigenvalues descending)`.
    pub fn sym_eig(&mut self, x: Var) -> Result<(Var, Var)> {
        let eig = Rc::new(linalg::sym_eigen(self.value(x))?);
        let u = eig.vectors.clone();
        let lambda = Tensor::vector(eig.values.clone());
        let vu = self.push(
            u,
            Op::EigVectors {
                input: x,
                eig: Rc::clone(&eig),
            },
            &[x],
        );
        let vl = self.push(lambda, Op::EigValues { input: x, eig }, &[x]);
        Ok((vu, vl))
    }

    /// Single-head scaled dot-product attention of `query[B×d]` over the
    /// causally ordered `keys`/`values` (each `[B×d]`), row by row.
    pub fn causal_attention(&mut self, query: Var, keys: &[Var], values: &[Var]) -> Result<Var> {
        if keys.is_empty() || keys.len() != values.len() {
            return shape_err(
                "causal_attention",
                format!("{} keys vs {} values", keys.len(), values.len()),
            );
        }
        let q = self.value(query);
        expect_rank("causal_attention", q, 2)?;
        for &k in keys.iter().chain(values) {
            same_shape("causal_attention", q, self.value(k))?;
        }
        let (b, d) = (q.rows(), q.cols());
        let n = keys.len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut weights = vec![0.0; b * n];
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            let qr = q.row(r);
            let scores: Vec<f64> = keys
                .iter()
                .map(|&k| {
                    let kr = self.value(k).row(r);
                    scale * qr.iter().zip(kr).map(|(x, y)| x * y).sum::<f64>()
                })
                .collect();
            let max = scores.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let w = (s - max).exp() / z;
                weights[r * n + j] = w;
                let vr = self.value(values[j]).row(r);
                for c in 0..d {
                    out[r * d + c] += w * vr[c];
                }
            }
        }
        let out = Tensor::matrix(b, d, out)?;
        let mut inputs = vec![query];
        inputs.extend_from_slice(keys);
        inputs.extend_from_slice(values);
        Ok(self.push(
            out,
            Op::CausalAttention {
                query,
                keys: keys.to_vec(),
                values: values.to_vec(),
                weights,
                scale,
            },
            &inputs,
        ))
    }

    /// Reverse sweep from a scalar `root`. A tape can be swept only once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::AddRow(m, r) => {
                acc(*m, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let cols = nodes[r.0].value.numel();
                acc(*r, &|s| {
                    for (i, y) in g.iter().enumerate() {
                        s[i % cols] += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, k) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y));
            }
            Op::Offset(a) | Op::Reshape(a) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &|s| {
                    let mut tmp = vec![0.0; m * k];
                    linalg::matmul_nt_into(g, tb.data(), &mut tmp, m, n, k);
                    s.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                });
                acc(*b, &|s| linalg::matmul_tn_acc(ta.data(), g, s, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                acc(*a, &|s| {
                    let mut tmp = vec![0.0; m * k];
                    linalg::matmul_into(g, tb.data(), &mut tmp, m, n, k);
                    s.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
                });
                acc(*b, &|s| linalg::matmul_tn_acc(g, ta.data(), s, m, n, k));
            }
            Op::Concat { parts, axis } => {
                if out.rank() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.numel();
                        let chunk = &g[offset..offset + len];
                        acc(*p, &|s| s.iter_mut().zip(chunk).for_each(|(x, y)| *x += y));
                        offset += len;
                    }
                } else {
                    let (rows, total) = (out.rows(), out.cols());
                    let mut col = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        acc(*p, &|s| {
                            for r in 0..rows {
                                for c in 0..w {
                                    s[r * w + c] += g[r * total + col + c];
                                }
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                });
            }
            Op::Abs(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        } else if x[i] < 0.0 {
                            s[i] -= g[i];
                        }
                    }
                });
            }
            Op::Maximum(a, b) => {
                let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if xa[i] >= xb[i] {
                            s[i] += g[i];
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        if xa[i] < xb[i] {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::DiagEmbed(a) => {
                let n = nodes[a.0].value.numel();
                acc(*a, &|s| {
                    for i in 0..n {
                        s[i] += g[i * n + i];
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                // out is r×c, input is c×r
                acc(*a, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Symmetrize(a) => {
                let n = out.rows();
                acc(*a, &|s| {
                    for i in 0..n {
                        for j in 0..n {
                            s[i * n + j] += 0.5 * (g[i * n + j] + g[j * n + i]);
                        }
                    }
                });
            }
            Op::Row(a, i) => {
                let c = out.numel();
                acc(*a, &|s| {
                    for j in 0..c {
                        s[i * c + j] += g[j];
                    }
                });
            }
            Op::Element(a, i) => {
                acc(*a, &|s| s[*i] += g[0]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let k = g[0] / rows as f64;
                acc(*logits, &|s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            s[r * cols + c] += k * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
            Op::Apl { x, alpha, beta } => {
                let xv = nodes[x.0].value.data();
                let ad = nodes[alpha.0].value.data();
                let bd = nodes[beta.0].value.data();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        let v = xv[i];
                        let mut d = if v > 0.0 { 1.0 } else { 0.0 };
                        for (&am, &bm) in ad.iter().zip(bd) {
                            if bm - v > 0.0 {
                                d -= am;
                            }
                        }
                        s[i] += g[i] * d;
                    }
                });
                acc(*alpha, &|s| {
                    for (m, &bm) in bd.iter().enumerate() {
                        let mut t = 0.0;
                        for (i, &v) in xv.iter().enumerate() {
                            let r = bm - v;
                            if r > 0.0 {
                                t += g[i] * r;
                            }
                        }
                        s[m] += t;
                    }
                });
                acc(*beta, &|s| {
                    for (m, (&am, &bm)) in ad.iter().zip(bd).enumerate() {
                        let mut t = 0.0;
                        for (i, &v) in xv.iter().enumerate() {
                            if bm - v > 0.0 {
                                t += g[i];
                            }
                        }
                        s[m] += am * t;
                    }
                });
            }
            Op::Gram {
                beta,
                partials,
                jitter_coef,
            } => {
                let m = nodes[beta.0].value.numel();
                let trace_g: f64 = (0..m).map(|i| g[i * m + i]).sum();
                acc(*beta, &|s| {
                    for k in 0..m {
                        let mut t = 0.0;
                        for j in 0..m {
                            t += g[k * m + j] * partials[k * m + j];
                            t += g[j * m + k] * partials[k * m + j];
                        }
                        t += jitter_coef * trace_g * 2.0 * partials[k * m + k];
                        s[k] += t;
                    }
                });
            }
            Op::EigValues { input, eig } => {
                let n = eig.values.len();
                let u = eig.vectors.data();
                acc(*input, &|s| {
                    for i in 0..n {
                        for j in 0..n {
                            let mut t = 0.0;
                            for k in 0..n {
                                t += u[i * n + k] * g[k] * u[j * n + k];
                            }
                            s[i * n + j] += t;
                        }
                    }
                });
            }
            Op::EigVectors { input, eig } => {
                let n = eig.values.len();
                let u = &eig.vectors;
                let lam = &eig.values;
                // inner = F ∘ (Uᵀ g)
                let mut utg = vec![0.0; n * n];
                linalg::matmul_tn_acc(u.data(), g, &mut utg, n, n, n);
                for i in 0..n {
                    for j in 0..n {
                        let gap = lam[j] - lam[i];
                        utg[i * n + j] = if i == j || gap.abs() < EIG_DEGENERACY_TOL {
                            0.0
                        } else {
                            utg[i * n + j] / gap
                        };
                    }
                }
                let mut left = vec![0.0; n * n];
                linalg::matmul_into(u.data(), &utg, &mut left, n, n, n);
                let mut full = vec![0.0; n * n];
                linalg::matmul_nt_into(&left, u.data(), &mut full, n, n, n);
                acc(*input, &|s| {
                    for i in 0..n {
                        for j in 0..n {
                            s[i * n + j] += 0.5 * (full[i * n + j] + full[j * n + i]);
                        }
                    }
                });
            }
            Op::CausalAttention {
                query,
                keys,
                values,
                weights,
                scale,
            } => {
                let q = &nodes[query.0].value;
                let (b, d) = (q.rows(), q.cols());
                let n = keys.len();
                // dscore[r, j] = w_rj (g_r·v_jr − Σ_l w_rl g_r·v_lr)
                let mut dscore = vec![0.0; b * n];
                for r in 0..b {
                    let gr = &g[r * d..(r + 1) * d];
                    let dw: Vec<f64> = values
                        .iter()
                        .map(|&v| {
                            nodes[v.0]
                                .value
                                .row(r)
                                .iter()
                                .zip(gr)
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    let mean: f64 = (0..n).map(|j| weights[r * n + j] * dw[j]).sum();
                    for j in 0..n {
                        dscore[r * n + j] = weights[r * n + j] * (dw[j] - mean) * scale;
                    }
                }
                acc(*query, &|s| {
                    for r in 0..b {
                        for (j, &k) in keys.iter().enumerate() {
                            let kr = nodes[k.0].value.row(r);
                            let ds = dscore[r * n + j];
                            for c in 0..d {
                                s[r * d + c] += ds * kr[c];
                            }
                        }
                    }
                });
                for (j, &k) in keys.iter().enumerate() {
                    acc(k, &|s| {
                        for r in 0..b {
                            let ds = dscore[r * n + j];
                            let qr = q.row(r);
                            for c in 0..d {
                                s[r * d + c] += ds * qr[c];
                            }
                        }
                    });
                }
                for (j, &v) in values.iter().enumerate() {
                    acc(v, &|s| {
                        for r in 0..b {
                            let w = weights[r * n + j];
                            for c in 0..d {
                                s[r * d + c] += w * g[r * d + c];
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Central finite-difference gradient of a scalar function of a flat vector.
pub fn finite_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    step: f64,
    coords: &[usize],
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|analytic − numeric| / max(1, |analytic|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecv(t: &mut Tape, v: &[f64], trainable: bool) -> Var {
        t.leaf(&Tensor::vector(v.to_vec()), trainable)
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = vecv(&mut t, &[-1.0, 0.0, 2.0], true);
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(3));
        let a = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let av = t.param(&a);
        let out = t.matmul(i, av).unwrap();
        assert_eq!(t.value(out).data(), a.data());
    }

    #[test]
    fn uniform_cross_entropy_is_ln3() {
        let mut t = Tape::new();
        let z = t.param(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let l = t.softmax_cross_entropy(z, &[1]).unwrap();
        assert!((t.scalar(l) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = vecv(&mut t, &[1.0, 2.0], true);
        let sq = t.mul(x, x).unwrap();
        let r = t.sum(sq);
        let g = t.backward(r).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::scalar(-1.0));
        let y = t.relu(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::scalar(0.0));
        let y = t.relu(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0]);
    }

    #[test]
    fn double_backward_rejected() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::scalar(2.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = vecv(&mut t, &[1.0, 2.0], true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = vecv(&mut t, &[1.0, 2.0], true);
        let b = vecv(&mut t, &[1.0, 2.0, 3.0], true);
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
        let m = t.constant(Tensor::zeros(&[2, 3]));
        assert!(t.matmul(m, m).is_err());
        assert_eq!(t.len(), 3, "rejected ops must not record nodes");
    }

    #[test]
    fn log_domain_reports_index() {
        let mut t = Tape::new();
        let a = vecv(&mut t, &[1.0, 0.5, -2.0], true);
        match t.log(a) {
            Err(Error::Domain { index, value, .. }) => {
                assert_eq!(index, 2);
                assert_eq!(value, -2.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::scalar(3.0));
        let a = t.scale(x, 2.0);
        let b = t.mul(x, x).unwrap();
        let c = t.add(a, b).unwrap();
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0 + 6.0]);
    }

    #[test]
    fn concat_gradient_splits_exactly() {
        let mut t = Tape::new();
        let a = t.param(&Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = t.param(&Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = t.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let p = t.mul(c, w).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 4.0]);
        assert_eq!(g.get(b).unwrap(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(5.0));
        let y = t.mul(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[5.0]);
    }

    #[test]
    fn maximum_tie_goes_to_first_operand() {
        let mut t = Tape::new();
        let a = t.param(&Tensor::scalar(1.0));
        let b = t.param(&Tensor::scalar(1.0));
        let m = t.maximum(a, b).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0]);
        assert_eq!(g.get(b).unwrap(), &[0.0]);
    }

    #[test]
    fn write_into_accumulates() {
        let mut t = Tape::new();
        let mut p = Tensor::vector(vec![1.0, -1.0]);
        let x = t.param(&p);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        g.write_into(x, &mut p);
        g.write_into(x, &mut p);
        assert_eq!(p.grad.as_deref(), Some(&[2.0, 2.0][..]));
    }
}
