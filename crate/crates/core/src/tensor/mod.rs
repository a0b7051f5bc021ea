//! Dense f64 tensors with taped reverse-mode automatic differentiation.
//!
//! The graph is dynamic: every operation allocates a node that records its
//! parents and a backward closure. `backward()` on a scalar loss walks the
//! recorded graph in reverse topological order and accumulates gradients
//! into every `requires_grad` ancestor. Completed tensors are immutable;
//! training code creates fresh leaves from raw parameter buffers each step.
//!
//! Everything is f64 and row-major. Graph construction and backward are
//! single-threaded per graph instance; parallelism belongs to callers
//! (data-parallel over batches), never inside a graph.

pub mod checkpoint;
pub mod gradcheck;
pub mod linalg;

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{DlabError, Result};

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

type BackwardFn = Box<dyn Fn(&Node, &[f64])>;

pub struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(DlabError::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf: gradients will be accumulated here by backward().
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(DlabError::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::leaf(data, shape.to_vec(), true))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![v], vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![0.0; numel_of(shape)], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![1.0; numel_of(shape)], shape.to_vec(), false)
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        Tensor {
            node: Rc::new(Node {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward: if requires_grad { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(DlabError::contract(format!(
                "item() requires a scalar tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.node.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Reverse-mode gradient pass from a scalar loss. Repeated calls
    /// accumulate into existing gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(DlabError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.requires_grad {
            return Ok(());
        }
        // Topological order over the requires_grad subgraph.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        // Iterative DFS: (tensor, child_index).
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.node));
        while let Some((t, ci)) = stack.pop() {
            let parents = &t.node.parents;
            if ci < parents.len() {
                let next = parents[ci].clone();
                stack.push((t, ci + 1));
                if next.node.requires_grad && visited.insert(Rc::as_ptr(&next.node)) {
                    stack.push((next, 0));
                }
            } else {
                topo.push(t);
            }
        }
        // Gradients already present (from earlier backward calls) are set
        // aside so this pass propagates cleanly, then merged back in: every
        // requires_grad ancestor accumulates across repeated calls.
        let saved: Vec<Option<Vec<f64>>> =
            topo.iter().map(|t| t.node.grad.borrow_mut().take()).collect();
        add_into(self, &[1.0]);
        for t in topo.iter().rev() {
            let g = t.node.grad.borrow().clone();
            if let (Some(g), Some(back)) = (g, t.node.backward.as_ref()) {
                back(&t.node, &g);
            }
        }
        for (t, s) in topo.iter().zip(saved) {
            if let Some(s) = s {
                add_into(t, &s);
            }
        }
        Ok(())
    }

    // ── elementwise / unary ──────────────────────────────────────────

    pub fn neg(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| -v).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|node, g| {
                with_grad(&node.parents[0], |buf| {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b -= gv;
                    }
                });
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|node, g| {
                let out = &node.data;
                with_grad(&node.parents[0], |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * out[i];
                    }
                });
            }),
        )
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| **v <= 0.0 || v.is_nan()) {
            return Err(DlabError::numeric(format!(
                "log of nonpositive value {v}"
            )));
        }
        let data: Vec<f64> = self.data().iter().map(|v| v.ln()).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|node, g| {
                let x = node.parents[0].node.data.clone();
                with_grad(&node.parents[0], |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / x[i];
                    }
                });
            }),
        ))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| linalg::sigmoid(v)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|node, g| {
                let out = &node.data;
                with_grad(&node.parents[0], |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }),
        )
    }

    pub fn softplus(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| linalg::softplus(v)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|node, g| {
                let x = node.parents[0].node.data.clone();
                with_grad(&node.parents[0], |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * linalg::sigmoid(x[i]);
                    }
                });
            }),
        )
    }

    pub fn silu(&self) -> Tensor {
        self.mul(&self.sigmoid()).expect("same shape")
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |node, g| {
                with_grad(&node.parents[0], |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * c;
                    }
                });
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|node, g| {
                with_grad(&node.parents[0], |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i];
                    }
                });
            }),
        )
    }

    // ── binary with broadcasting ─────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinOp::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinOp::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, BinOp::Div)
    }

    fn binary(&self, rhs: &Tensor, op: BinOp) -> Result<Tensor> {
        let out_shape = broadcast_shapes(self.shape(), rhs.shape())?;
        let n = numel_of(&out_shape);
        let mut data = vec![0.0; n];
        let a = self.data();
        let b = rhs.data();
        if self.shape() == rhs.shape() {
            for i in 0..n {
                data[i] = op.apply(a[i], b[i]);
            }
        } else {
            let mut i = 0;
            for_each_broadcast(&out_shape, self.shape(), rhs.shape(), |ao, bo| {
                data[i] = op.apply(a[ao], b[bo]);
                i += 1;
            });
        }
        let out_shape_c = out_shape.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), rhs.clone()],
            Box::new(move |node, g| {
                let pa = &node.parents[0];
                let pb = &node.parents[1];
                let (da, db) = op.grads(&pa.node.data, &pb.node.data, &node.data, g, &out_shape_c, pa.shape(), pb.shape());
                if let Some(da) = da {
                    add_into(pa, &da);
                }
                if let Some(db) = db {
                    add_into(pb, &db);
                }
            }),
        ))
    }

    // ── matmul ───────────────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DlabError::shape(format!(
                "matmul dimension mismatch: {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        linalg::matmul_nn(self.data(), rhs.data(), m, k, n, &mut data);
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            Box::new(move |node, g| {
                let a = &node.parents[0];
                let b = &node.parents[1];
                with_grad(a, |buf| {
                    // dA = G @ B^T
                    linalg::matmul_nt_acc(g, &b.node.data, m, n, k, buf);
                });
                with_grad(b, |buf| {
                    // dB = A^T @ G
                    linalg::matmul_tn_acc(&a.node.data, g, k, m, n, buf);
                });
            }),
        ))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(|node, g| {
                with_grad(&node.parents[0], |buf| {
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                });
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().sum::<f64>() / n;
        Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |node, g| {
                with_grad(&node.parents[0], |buf| {
                    let gv = g[0] / n;
                    for b in buf.iter_mut() {
                        *b += gv;
                    }
                });
            }),
        )
    }

    /// Sum over one axis (the axis disappears from the shape).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(DlabError::shape(format!(
                "sum_axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let (outer, mid, inner) = split3(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![0.0; outer * inner];
        let x = self.data();
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let orow = &mut data[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    orow[i] += x[base + i];
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |node, g| {
                with_grad(&node.parents[0], |buf| {
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i in 0..inner {
                                buf[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }),
        ))
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(DlabError::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|node, g| {
                add_into(&node.parents[0], g);
            }),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(DlabError::shape(format!(
                "transpose requires a 2-D tensor, got {:?}",
                s
            )));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![n, m],
            vec![self.clone()],
            Box::new(move |node, g| {
                with_grad(&node.parents[0], |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }),
        ))
    }

    /// Slice `[start, end)` along one axis.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(DlabError::shape(format!(
                "slice [{start}, {end}) on axis {axis} invalid for shape {shape:?}"
            )));
        }
        let (outer, mid, inner) = split3(shape, axis);
        let keep = end - start;
        let mut out_shape = shape.to_vec();
        out_shape[axis] = keep;
        let mut data = vec![0.0; outer * keep * inner];
        let x = self.data();
        for o in 0..outer {
            for m in 0..keep {
                let src = (o * mid + start + m) * inner;
                let dst = (o * keep + m) * inner;
                data[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
            }
        }
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |node, g| {
                with_grad(&node.parents[0], |buf| {
                    for o in 0..outer {
                        for m in 0..keep {
                            let dst = (o * mid + start + m) * inner;
                            let src = (o * keep + m) * inner;
                            for i in 0..inner {
                                buf[dst + i] += g[src + i];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Concatenate along one axis.
    pub fn concat(axis: usize, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(DlabError::contract("concat of zero tensors".to_string()));
        }
        let first = parts[0].shape().to_vec();
        if axis >= first.len() {
            return Err(DlabError::shape(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() {
                return Err(DlabError::shape("concat rank mismatch".to_string()));
            }
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(DlabError::shape(format!(
                        "concat shape mismatch: {:?} vs {:?}",
                        s, first
                    )));
                }
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split3(&out_shape, axis);
        let mut data = vec![0.0; numel_of(&out_shape)];
        let mut offset = 0;
        for p in parts {
            let mid = p.shape()[axis];
            let x = p.data();
            for o in 0..outer {
                for m in 0..mid {
                    let dst = (o * total + offset + m) * inner;
                    let src = (o * mid + m) * inner;
                    data[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
                }
            }
            offset += mid;
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            parts.to_vec(),
            Box::new(move |node, g| {
                let mut offset = 0;
                for (pi, &mid) in sizes.iter().enumerate() {
                    let p = &node.parents[pi];
                    with_grad(p, |buf| {
                        for o in 0..outer {
                            for m in 0..mid {
                                let src = (o * total + offset + m) * inner;
                                let dst = (o * mid + m) * inner;
                                for i in 0..inner {
                                    buf[dst + i] += g[src + i];
                                }
                            }
                        }
                    });
                    offset += mid;
                }
            }),
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let out_shape = broadcast_shapes(self.shape(), shape)?;
        if out_shape != shape {
            return Err(DlabError::shape(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape(),
                shape
            )));
        }
        let n = numel_of(&out_shape);
        let mut data = vec![0.0; n];
        let x = self.data();
        let mut i = 0;
        for_each_broadcast(&out_shape, self.shape(), self.shape(), |ao, _| {
            data[i] = x[ao];
            i += 1;
        });
        let src_shape = self.shape().to_vec();
        let out_shape_c = out_shape.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |node, g| {
                let red = reduce_to_shape(g, &out_shape_c, &src_shape);
                add_into(&node.parents[0], &red);
            }),
        ))
    }

    // ── row softmax family (last axis) ───────────────────────────────

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let shape = self.shape();
        let cols = *shape.last().ok_or_else(|| DlabError::shape("softmax on 0-d tensor"))?;
        if self.data().iter().any(|v| v.is_nan()) {
            return Err(DlabError::numeric("softmax input contains NaN"));
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(cols) {
            linalg::softmax_row_inplace(row);
        }
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |node, g| {
                let y = &node.data;
                with_grad(&node.parents[0], |buf| {
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot = linalg::dot(gr, yr);
                        let br = &mut buf[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            br[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }),
        ))
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let shape = self.shape();
        let cols = *shape.last().ok_or_else(|| DlabError::shape("log_softmax on 0-d tensor"))?;
        if self.data().iter().any(|v| v.is_nan()) {
            return Err(DlabError::numeric("log_softmax input contains NaN"));
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |node, g| {
                let ls = &node.data;
                with_grad(&node.parents[0], |buf| {
                    for r in 0..ls.len() / cols {
                        let lr = &ls[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        let br = &mut buf[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            br[i] += gr[i] - lr[i].exp() * gsum;
                        }
                    }
                });
            }),
        ))
    }

    /// RMS normalization over the last axis: y = x / sqrt(mean(x^2) + eps) * w.
    pub fn rmsnorm(&self, weight: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape();
        let cols = *shape.last().ok_or_else(|| DlabError::shape("rmsnorm on 0-d tensor"))?;
        if weight.shape() != [cols] {
            return Err(DlabError::shape(format!(
                "rmsnorm weight shape {:?} does not match last axis {}",
                weight.shape(),
                cols
            )));
        }
        let x = self.data();
        let w = weight.data();
        let rows = x.len() / cols;
        let mut data = vec![0.0; x.len()];
        let mut invs = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            invs[r] = inv;
            let orow = &mut data[r * cols..(r + 1) * cols];
            for i in 0..cols {
                orow[i] = xr[i] * inv * w[i];
            }
        }
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            vec![self.clone(), weight.clone()],
            Box::new(move |node, g| {
                let xp = &node.parents[0];
                let wp = &node.parents[1];
                let x = &xp.node.data;
                let w = &wp.node.data;
                with_grad(xp, |buf| {
                    for r in 0..invs.len() {
                        let xr = &x[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inv = invs[r];
                        let mut acc = 0.0;
                        for i in 0..cols {
                            acc += gr[i] * w[i] * xr[i];
                        }
                        let c = inv * inv * inv * acc / cols as f64;
                        let br = &mut buf[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            br[i] += gr[i] * w[i] * inv - xr[i] * c;
                        }
                    }
                });
                with_grad(wp, |buf| {
                    for r in 0..invs.len() {
                        let xr = &x[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inv = invs[r];
                        for i in 0..cols {
                            buf[i] += gr[i] * xr[i] * inv;
                        }
                    }
                });
            }),
        ))
    }

    /// Cumulative sum along one axis; backward is the reversed suffix sum.
    pub fn cumsum(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(DlabError::shape(format!(
                "cumsum axis {} out of range for {:?}",
                axis, shape
            )));
        }
        let (outer, mid, inner) = split3(shape, axis);
        let x = self.data();
        let mut data = x.to_vec();
        for o in 0..outer {
            for m in 1..mid {
                let prev = (o * mid + m - 1) * inner;
                let cur = (o * mid + m) * inner;
                for i in 0..inner {
                    data[cur + i] += data[prev + i];
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |node, g| {
                with_grad(&node.parents[0], |buf| {
                    // suffix sums of g along the axis
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut acc = 0.0;
                            for m in (0..mid).rev() {
                                acc += g[(o * mid + m) * inner + i];
                                buf[(o * mid + m) * inner + i] += acc;
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Gather rows from a `[V, D]` table: out[i] = table[ids[i]].
    pub fn rows(&self, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(DlabError::shape(format!("rows requires a 2-D table, got {:?}", s)));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(DlabError::data(format!(
                "row index {bad} out of range for table with {v} rows"
            )));
        }
        let x = self.data();
        let mut data = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&x[id * d..(id + 1) * d]);
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![ids.len(), d],
            vec![self.clone()],
            Box::new(move |node, g| {
                with_grad(&node.parents[0], |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id * d..(id + 1) * d];
                        let src = &g[i * d..(i + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                });
            }),
        ))
    }

    /// Pick one element per row of a `[n, V]` matrix: out[i] = x[i, ids[i]].
    pub fn pick(&self, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || ids.len() != s[0] {
            return Err(DlabError::shape(format!(
                "pick expects [n, V] input with n ids; got {:?} and {} ids",
                s,
                ids.len()
            )));
        }
        let v = s[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(DlabError::data(format!(
                "pick index {bad} out of range for {v} columns"
            )));
        }
        let x = self.data();
        let data: Vec<f64> = ids.iter().enumerate().map(|(i, &id)| x[i * v + id]).collect();
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![ids.len()],
            vec![self.clone()],
            Box::new(move |node, g| {
                with_grad(&node.parents[0], |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        buf[i * v + id] += g[i];
                    }
                });
            }),
        ))
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// Full-size gradients for both operands, reduced to their shapes.
    #[allow(clippy::too_many_arguments)]
    fn grads(
        self,
        a: &[f64],
        b: &[f64],
        _out: &[f64],
        g: &[f64],
        out_shape: &[usize],
        a_shape: &[usize],
        b_shape: &[usize],
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let n = g.len();
        let mut da = vec![0.0; n];
        let mut db = vec![0.0; n];
        if a_shape == b_shape {
            for i in 0..n {
                let (ga, gb) = self.pair(a[i], b[i], g[i]);
                da[i] = ga;
                db[i] = gb;
            }
        } else {
            let mut i = 0;
            for_each_broadcast(out_shape, a_shape, b_shape, |ao, bo| {
                let (ga, gb) = self.pair(a[ao], b[bo], g[i]);
                da[i] = ga;
                db[i] = gb;
                i += 1;
            });
        }
        (
            Some(reduce_to_shape(&da, out_shape, a_shape)),
            Some(reduce_to_shape(&db, out_shape, b_shape)),
        )
    }

    fn pair(self, a: f64, b: f64, g: f64) -> (f64, f64) {
        match self {
            BinOp::Add => (g, g),
            BinOp::Sub => (g, -g),
            BinOp::Mul => (g * b, g * a),
            BinOp::Div => (g / b, -g * a / (b * b)),
        }
    }
}

fn with_grad(t: &Tensor, f: impl FnOnce(&mut [f64])) {
    if !t.node.requires_grad {
        return;
    }
    let mut g = t.node.grad.borrow_mut();
    let buf = g.get_or_insert_with(|| vec![0.0; t.numel()]);
    f(buf);
}

fn add_into(t: &Tensor, delta: &[f64]) {
    with_grad(t, |buf| {
        for (b, &d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    });
}

/// (product of dims before axis, dim at axis, product of dims after axis)
fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(DlabError::shape(format!(
                "shapes {:?} and {:?} are not broadcast-compatible",
                a, b
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Right-aligned broadcast strides (0 stride where the input is broadcast).
fn bstrides(shape: &[usize], nd: usize) -> Vec<usize> {
    let mut strides = vec![0usize; nd];
    let offset = nd - shape.len();
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let nd = out_shape.len();
    let a_str = bstrides(a_shape, nd);
    let b_str = bstrides(b_shape, nd);
    let total = numel_of(out_shape);
    let mut coords = vec![0usize; nd];
    let (mut ao, mut bo) = (0usize, 0usize);
    for _ in 0..total {
        f(ao, bo);
        for d in (0..nd).rev() {
            coords[d] += 1;
            ao += a_str[d];
            bo += b_str[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ao -= a_str[d] * out_shape[d];
            bo -= b_str[d] * out_shape[d];
        }
    }
}

/// Sum `grad` (shaped like `from`) down to `to` (right-aligned broadcast).
pub fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let nd = from.len();
    let strides = bstrides(to, nd);
    let mut out = vec![0.0; numel_of(to)];
    let mut coords = vec![0usize; nd];
    let mut off = 0usize;
    for &g in grad {
        out[off] += g;
        for d in (0..nd).rev() {
            coords[d] += 1;
            off += strides[d];
            if coords[d] < from[d] {
                break;
            }
            coords[d] = 0;
            off -= strides[d] * from[d];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    fn p(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t(&[1., 0., 0., 1.], &[2, 2]);
        let out = i2.matmul(&i2).unwrap();
        assert_eq!(out.data(), &[1., 0., 0., 1.]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[1., 2., 3., 4.], &[2, 2]);
        let b = t(&[1., 1.], &[2, 1]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[0.0; 6], &[2, 3]);
        let b = t(&[0.0; 4], &[2, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_bt() {
        // d sum(A@B) / dA = ones(m,n) @ B^T
        let a = p(&[0.3, -0.7, 1.2, 0.4, 0.0, 2.0], &[2, 3]);
        let b = t(&[1., 2., 3., 4., 5., 6.], &[3, 2]);
        let loss = a.matmul(&b).unwrap().sum_all();
        loss.backward().unwrap();
        let g = a.grad().unwrap();
        // ones(2,2) @ B^T: each row of dA is the row sums of B.
        let expect = [3., 7., 11., 3., 7., 11.];
        for (gv, ev) in g.iter().zip(expect.iter()) {
            assert!((gv - ev).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = t(&[0., 0., 1000., 1000.], &[2, 2]);
        let y = x.softmax_rows().unwrap();
        for v in y.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_hand_case() {
        let x = t(&[0.0, 3f64.ln()], &[1, 2]);
        let y = x.softmax_rows().unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_large_magnitude() {
        let mut rng = 7u64;
        let mut vals = Vec::new();
        for _ in 0..64 {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1);
            vals.push(((rng >> 33) as f64 / 2e9 - 0.5) * 2e4);
        }
        let x = t(&vals, &[8, 8]);
        let y = x.softmax_rows().unwrap();
        for row in y.data().chunks(8) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = t(&[f64::NAN, 1.0], &[1, 2]);
        assert!(matches!(x.softmax_rows(), Err(DlabError::Numeric(_))));
    }

    #[test]
    fn exp_of_zero() {
        let x = t(&[0.0], &[1]);
        assert_eq!(x.exp().data(), &[1.0]);
    }

    #[test]
    fn log_rejects_nonpositive() {
        let x = t(&[-1.0], &[1]);
        assert!(matches!(x.log(), Err(DlabError::Numeric(_))));
    }

    #[test]
    fn rmsnorm_constant_vector_closed_form() {
        let c = 3.0;
        let eps = 1e-5;
        let x = t(&[c; 4], &[1, 4]);
        let w = Tensor::ones(&[4]);
        let y = x.rmsnorm(&w, eps).unwrap();
        let expect = c / (c * c + eps).sqrt();
        for v in y.data() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_backward_is_ones() {
        let x = p(&[1., 2., 3.], &[3]);
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1., 1., 1.]);
    }

    #[test]
    fn backward_scalar_identity() {
        let x = p(&[5.0], &[1]);
        let loss = x.scale(1.0);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_square_at_three() {
        let x = p(&[3.0], &[1]);
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = p(&[1.0, 2.0], &[2]);
        assert!(matches!(x.backward(), Err(DlabError::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = p(&[2.0], &[1]);
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn broadcast_add_bias() {
        let x = t(&[1., 2., 3., 4.], &[2, 2]);
        let b = t(&[10., 20.], &[2]);
        let y = x.add(&b).unwrap();
        assert_eq!(y.data(), &[11., 22., 13., 24.]);
    }

    #[test]
    fn broadcast_grad_reduces() {
        let x = t(&[1., 2., 3., 4.], &[2, 2]);
        let b = p(&[10., 20.], &[2]);
        let loss = x.add(&b).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2., 2.]);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let x = t(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
        let a = x.slice(1, 0, 1).unwrap();
        let b = x.slice(1, 1, 3).unwrap();
        let y = Tensor::concat(1, &[a, b]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn cumsum_values() {
        let x = t(&[1., 2., 3., 4.], &[4]);
        let y = x.cumsum(0).unwrap();
        assert_eq!(y.data(), &[1., 3., 6., 10.]);
    }

    #[test]
    fn rows_gather_and_scatter() {
        let table = p(&[1., 2., 3., 4., 5., 6.], &[3, 2]);
        let out = table.rows(&[2, 0, 2]).unwrap();
        assert_eq!(out.data(), &[5., 6., 1., 2., 5., 6.]);
        let loss = out.sum_all();
        loss.backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn rows_rejects_out_of_range() {
        let table = t(&[0.0; 6], &[3, 2]);
        assert!(matches!(table.rows(&[3]), Err(DlabError::Data(_))));
    }

    #[test]
    fn graph_evaluation_is_deterministic() {
        let run = || {
            let x = t(&[0.3, -0.2, 0.9, 0.5], &[2, 2]);
            let w = t(&[1.5, -0.5, 0.25, 2.0], &[2, 2]);
            x.matmul(&w)
                .unwrap()
                .softmax_rows()
                .unwrap()
                .sum_all()
                .item()
                .unwrap()
                .to_bits()
        };
        assert_eq!(run(), run());
    }
}
