//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A forward pass pushes nodes onto the tape; [`Tape::backward`] walks the
//! recorded ops in reverse, accumulating gradients into per-node buffers.
//! Leaves may be tagged with a [`LeafSource`] so the accumulated gradients
//! can be deposited back into a parameter store after the pass.
//!
//! The op set is the small fixed vocabulary the model needs: matrix product,
//! transpose, reshape, ReLU, softmax, concatenation/stacking, row mean,
//! scaling, addition, sum and cross-entropy. There is no broadcasting.

use crate::error::{Result, TcnError};
use crate::tensor::Tensor;
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tid(usize);

/// Where a leaf's gradient should be deposited on accumulation.
#[derive(Debug, Clone, Copy)]
pub enum LeafSource {
    /// A whole parameter tensor, by index in the owning store.
    Param(usize),
    /// A single row of a matrix parameter (used for embedding rows).
    ParamRow(usize, usize),
}

enum Op {
    Leaf(Option<LeafSource>),
    Add(Tid, Tid),
    Scale(Tid, f64),
    MatMul(Tid, Tid),
    Transpose(Tid),
    Reshape(Tid),
    Relu(Tid),
    /// Softmax over the last axis: a vector, or each row of a matrix.
    Softmax(Tid),
    ConcatVec(Vec<Tid>),
    /// Stack equal-length vectors as the rows of a matrix.
    StackRows(Vec<Tid>),
    MeanRows(Tid),
    SumAll(Tid),
    CrossEntropy {
        logits: Tid,
        class: usize,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tid) -> &Tensor {
        &self.nodes[t.0].value
    }

    /// Gradient of the last `backward` output w.r.t. node `t`, if reached.
    pub fn grad(&self, t: Tid) -> Option<&Tensor> {
        self.grads[t.0].as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Tid {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        self.grads.push(None);
        Tid(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arc<Tensor>, source: Option<LeafSource>) -> Tid {
        self.nodes.push(Node {
            value,
            op: Op::Leaf(source),
        });
        self.grads.push(None);
        Tid(self.nodes.len() - 1)
    }

    /// A node gradients flow into but that is not tied to any parameter.
    pub fn constant(&mut self, value: Tensor) -> Tid {
        self.leaf(Arc::new(value), None)
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(TcnError::Shape(format!(
                "add {:?} + {:?}",
                va.shape, vb.shape
            )));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let shape = va.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Tid, c: f64) -> Tid {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| x * c).collect(),
        };
        self.push(out, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let out = crate::tensor::mat_mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Tid) -> Result<Tid> {
        let out = crate::tensor::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Tid, shape: Vec<usize>) -> Result<Tid> {
        let va = self.value(a);
        let n: usize = shape.iter().product();
        if n != va.len() {
            return Err(TcnError::Shape(format!(
                "reshape {:?} -> {:?}",
                va.shape, shape
            )));
        }
        let out = Tensor {
            shape,
            data: va.data.clone(),
        };
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| x.max(0.0)).collect(),
        };
        self.push(out, Op::Relu(a))
    }

    /// Shift-stabilized softmax over the last axis.
    pub fn softmax(&mut self, a: Tid) -> Result<Tid> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(TcnError::Shape("softmax of empty tensor".into()));
        }
        let cols = va.cols();
        let mut data = vec![0.0; va.len()];
        for r in 0..va.rows() {
            let row = &va.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (i, x) in row.iter().enumerate() {
                let e = (x - max).exp();
                data[r * cols + i] = e;
                sum += e;
            }
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v /= sum;
            }
        }
        let shape = va.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Softmax(a)))
    }

    /// Concatenate vectors into one vector.
    pub fn concat(&mut self, parts: &[Tid]) -> Result<Tid> {
        if parts.is_empty() {
            return Err(TcnError::Shape("concat of no tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if !v.is_vector() {
                return Err(TcnError::Shape(format!(
                    "concat expects vectors, got {:?}",
                    v.shape
                )));
            }
            data.extend_from_slice(&v.data);
        }
        let n = data.len();
        Ok(self.push(
            Tensor {
                shape: vec![n],
                data,
            },
            Op::ConcatVec(parts.to_vec()),
        ))
    }

    /// Stack equal-length vectors as matrix rows, `k x d`.
    pub fn stack_rows(&mut self, rows: &[Tid]) -> Result<Tid> {
        if rows.is_empty() {
            return Err(TcnError::Shape("stack of no rows".into()));
        }
        let d = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let v = self.value(r);
            if !v.is_vector() || v.len() != d {
                return Err(TcnError::Shape(format!(
                    "stack rows: expected vector of {d}, got {:?}",
                    v.shape
                )));
            }
            data.extend_from_slice(&v.data);
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), d],
                data,
            },
            Op::StackRows(rows.to_vec()),
        ))
    }

    /// Arithmetic mean over the rows of a matrix, `r x c -> c`.
    pub fn mean_rows(&mut self, a: Tid) -> Result<Tid> {
        let va = self.value(a);
        if !va.is_matrix() {
            return Err(TcnError::Shape(format!("mean_rows of {:?}", va.shape)));
        }
        let (r, c) = (va.shape[0], va.shape[1]);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += va.data[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        Ok(self.push(
            Tensor {
                shape: vec![c],
                data,
            },
            Op::MeanRows(a),
        ))
    }

    pub fn sum_all(&mut self, a: Tid) -> Tid {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// `-log softmax(logits)[class]`, computed via a shift-stabilized
    /// log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Tid, class: usize) -> Result<Tid> {
        let v = self.value(logits);
        if !v.is_vector() || v.is_empty() {
            return Err(TcnError::Shape(format!(
                "cross_entropy expects a non-empty vector of logits, got {:?}",
                v.shape
            )));
        }
        if class >= v.len() {
            return Err(TcnError::Shape(format!(
                "cross_entropy class {class} out of range for {} logits",
                v.len()
            )));
        }
        let max = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.data.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - v.data[class];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, class }))
    }

    // ---- convenience compositions -------------------------------------

    /// `w [p x q] * x`, where `x` is a vector `[q]` (result `[p]`) or a
    /// matrix `[n x q]` (result `[n x p]`, i.e. the batched form).
    pub fn linear(&mut self, w: Tid, x: Tid) -> Result<Tid> {
        let (ws, xs) = (self.value(w).shape.clone(), self.value(x).shape.clone());
        if ws.len() != 2 {
            return Err(TcnError::Shape(format!("linear weight {ws:?} with input {xs:?}")));
        }
        if xs.len() == 1 {
            if ws[1] != xs[0] {
                return Err(TcnError::Shape(format!("linear {ws:?} x {xs:?}")));
            }
            let col = self.reshape(x, vec![xs[0], 1])?;
            let prod = self.matmul(w, col)?;
            self.reshape(prod, vec![ws[0]])
        } else {
            if ws[1] != xs[1] {
                return Err(TcnError::Shape(format!("linear {ws:?} x {xs:?}")));
            }
            let wt = self.transpose(w)?;
            self.matmul(x, wt)
        }
    }

    /// Dot product of each row of `e [n x d]` with vector `x [d] -> [n]`.
    pub fn dot_rows(&mut self, e: Tid, x: Tid) -> Result<Tid> {
        let d = self.value(x).len();
        let n = self.value(e).rows();
        let col = self.reshape(x, vec![d, 1])?;
        let prod = self.matmul(e, col)?;
        self.reshape(prod, vec![n])
    }

    /// Weighted sum of the rows of `e [n x d]` with weights `w [n] -> [d]`.
    pub fn weighted_row_sum(&mut self, e: Tid, w: Tid) -> Result<Tid> {
        let n = self.value(w).len();
        let d = self.value(e).cols();
        let wrow = self.reshape(w, vec![1, n])?;
        let prod = self.matmul(wrow, e)?;
        self.reshape(prod, vec![d])
    }

    // ---- backward ------------------------------------------------------

    fn add_grad(&mut self, t: Tid, delta: &Tensor) {
        match &mut self.grads[t.0] {
            Some(g) => {
                for (gi, di) in g.data.iter_mut().zip(&delta.data) {
                    *gi += di;
                }
            }
            slot => {
                *slot = Some(delta.clone());
            }
        }
    }

    /// Reverse pass from a scalar output. Earlier gradients on this tape are
    /// cleared first.
    pub fn backward(&mut self, out: Tid) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(TcnError::Shape(format!(
                "backward from non-scalar {:?}",
                self.value(out).shape
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[out.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(go) = self.grads[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf(_) => {
                    self.grads[i] = Some(go);
                    continue;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, &go);
                    self.add_grad(b, &go);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let d = Tensor {
                        shape: go.shape.clone(),
                        data: go.data.iter().map(|x| x * c).collect(),
                    };
                    self.add_grad(a, &d);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (p, q) = (self.value(a).shape[0], self.value(a).shape[1]);
                    let r = self.value(b).shape[1];
                    // dA = dC . B^T ; dB = A^T . dC
                    let mut da = vec![0.0; p * q];
                    let mut db = vec![0.0; q * r];
                    {
                        let va = &self.value(a).data;
                        let vb = &self.value(b).data;
                        for i2 in 0..p {
                            for k in 0..r {
                                let g = go.data[i2 * r + k];
                                if g == 0.0 {
                                    continue;
                                }
                                for j in 0..q {
                                    da[i2 * q + j] += g * vb[j * r + k];
                                    db[j * r + k] += va[i2 * q + j] * g;
                                }
                            }
                        }
                    }
                    self.add_grad(a, &Tensor::new(vec![p, q], da)?);
                    self.add_grad(b, &Tensor::new(vec![q, r], db)?);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let d = crate::tensor::transpose(&go)?;
                    self.add_grad(a, &d);
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let shape = self.value(a).shape.clone();
                    let d = Tensor {
                        shape,
                        data: go.data.clone(),
                    };
                    self.add_grad(a, &d);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let data = self
                        .value(a)
                        .data
                        .iter()
                        .zip(&go.data)
                        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    let d = Tensor {
                        shape: go.shape.clone(),
                        data,
                    };
                    self.add_grad(a, &d);
                }
                Op::Softmax(a) => {
                    let a = *a;
                    // dx = y * (dy - <y, dy>) per rowterm
                    let y = &self.nodes[i].value;
                    let cols = y.cols();
                    let mut data = vec![0.0; y.len()];
                    for r2 in 0..y.rows() {
                        let yr = &y.data[r2 * cols..(r2 + 1) * cols];
                        let gr = &go.data[r2 * cols..(r2 + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..cols {
                            data[r2 * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    let d = Tensor {
                        shape: go.shape.clone(),
                        data,
                    };
                    self.add_grad(a, &d);
                }
                Op::ConcatVec(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(p).len();
                        let d = Tensor::vector(go.data[offset..offset + n].to_vec());
                        self.add_grad(p, &d);
                        offset += n;
                    }
                }
                Op::StackRows(rows) => {
                    let rows = rows.clone();
                    let d = go.cols();
                    for (r2, t) in rows.into_iter().enumerate() {
                        let slice = Tensor::vector(go.data[r2 * d..(r2 + 1) * d].to_vec());
                        self.add_grad(t, &slice);
                    }
                }
                Op::MeanRows(a) => {
                    let a = *a;
                    let (r2, c) = (self.value(a).shape[0], self.value(a).shape[1]);
                    let mut data = vec![0.0; r2 * c];
                    for i2 in 0..r2 {
                        for j in 0..c {
                            data[i2 * c + j] = go.data[j] / r2 as f64;
                        }
                    }
                    self.add_grad(a, &Tensor::new(vec![r2, c], data)?);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let shape = self.value(a).shape.clone();
                    let n = self.value(a).len();
                    let d = Tensor {
                        shape,
                        data: vec![go.data[0]; n],
                    };
                    self.add_grad(a, &d);
                }
                Op::CrossEntropy { logits, class } => {
                    let (logits, class) = (*logits, *class);
                    // d logits = softmax(logits) - onehot(class)
                    let v = self.value(logits);
                    let max = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = v.data.iter().map(|x| (x - max).exp()).sum();
                    let g = go.data[0];
                    let mut data: Vec<f64> =
                        v.data.iter().map(|x| g * (x - max).exp() / sum).collect();
                    data[class] -= g;
                    let d = Tensor::vector(data);
                    self.add_grad(logits, &d);
                }
            }
            self.grads[i] = Some(go);
        }
        Ok(())
    }

    /// Deposit leaf gradients into their parameter slots.
    pub fn accumulate_into(&self, store: &mut crate::params::ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            let Op::Leaf(Some(source)) = &node.op else {
                continue;
            };
            let Some(grad) = &self.grads[i] else {
                continue;
            };
            match source {
                LeafSource::Param(p) => store.accumulate(*p, grad),
                LeafSource::ParamRow(p, row) => store.accumulate_row(*p, *row, grad),
            }
        }
        store.mark_gradients();
    }
}
