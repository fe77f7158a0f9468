//! Reverse-mode tape over the operations in [`super::ops`].
//!
//! A [`Graph`] records every intermediate value. Parameters enter as leaves
//! bound to a [`ParamStore`]; after [`Graph::backward`] their gradients can be
//! folded back into the store with [`Graph::accumulate_into`].

use std::collections::HashMap;

use super::ops;
use super::param::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    ScaleConst(NodeId, T),
    ScaleBy(NodeId, NodeId),
    Gelu(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Reshape(NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    AvgPool(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        weights: Tensor<T>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    MaskedLoss {
        logits: NodeId,
        dlogits: Tensor<T>,
    },
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    bound: HashMap<usize, NodeId>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            bound: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// The leaf for a named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let id = self.params.id(name)?;
        if let Some(&node) = self.bound.get(&id) {
            return Ok(node);
        }
        let node = self.push(self.params.by_index(id).value.clone(), Op::Leaf);
        self.bound.insert(id, node);
        Ok(node)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Add a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let mut v = self.value(x).clone();
        ops::add_row_bias(&mut v, self.value(b))?;
        Ok(self.push(v, Op::AddBias(x, b)))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let v = self.value(x).scale(s);
        self.push(v, Op::ScaleConst(x, s))
    }

    /// Multiply by a one-element node (a learnable scalar).
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!(
                "scale_by expects a scalar, got {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x).scale(sv);
        Ok(self.push(v, Op::ScaleBy(x, s)))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(ops::gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (_, din) = self.value(x).ensure_matrix("linear input")?;
        let (wr, _) = self.value(w).ensure_matrix("linear weight")?;
        if din != wr {
            return Err(Error::Shape(format!(
                "linear: input width {din} does not match weight rows {wr}"
            )));
        }
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&refs)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&refs)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(x, start)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let v = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Global average pool of an `H x W x C` map into a `1 x C` row.
    pub fn avgpool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::avgpool_global(self.value(x))?;
        let c = v.len();
        let v = v.reshape(&[1, c])?;
        Ok(self.push(v, Op::AvgPool(x)))
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, causal_offset: Option<usize>) -> Result<NodeId> {
        let out = ops::attention(self.value(q), self.value(k), self.value(v), causal_offset)?;
        Ok(self.push(
            out.output,
            Op::Attention {
                q,
                k,
                v,
                weights: out.weights,
            },
        ))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, cols) = t.ensure_matrix("gather table")?;
        if ids.is_empty() {
            return Err(Error::Shape("gather of no rows".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::Invalid(format!("row {i} outside table of {rows}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn masked_lm_loss(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let (loss, dlogits) = ops::masked_lm_loss_with_grad(self.value(logits), targets, mask)?;
        Ok(self.push(Tensor::scalar(loss), Op::MaskedLoss { logits, dlogits }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Backpropagate from a one-element node.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.local_grads(id, &g)?;
            for (target, dg) in contributions {
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&dg)?,
                    slot @ None => *slot = Some(dg),
                }
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn local_grads(&self, id: NodeId, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[id];
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.value(*b).transpose()?)?;
                let db = self.value(*a).transpose()?.matmul(g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddBias(x, b) => {
                let db = ops::column_sums(g).reshape(self.value(*b).shape())?;
                vec![(*x, g.clone()), (*b, db)]
            }
            Op::ScaleConst(x, s) => vec![(*x, g.scale(*s))],
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).data()[0];
                let ds: T = g.data().iter().zip(self.value(*x).data()).map(|(&a, &b)| a * b).sum();
                vec![(*x, g.scale(sv)), (*s, Tensor::full(self.value(*s).shape(), ds))]
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).zip_map(g, |xv, gv| ops::gelu_grad(xv) * gv)?;
                vec![(*x, dx)]
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let r = self.value(p).rows();
                    out.push((p, g.slice_rows(start, r)?));
                    start += r;
                }
                out
            }
            Op::SliceRows(x, start) => {
                let src = self.value(*x);
                let mut dx = Tensor::zeros(src.shape());
                let cols = src.cols();
                let off = start * cols;
                dx.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.value(p).cols();
                    out.push((p, g.slice_cols(start, c)?));
                    start += c;
                }
                out
            }
            Op::SliceCols(x, start) => {
                let src = self.value(*x);
                let (rows, cols) = (src.rows(), src.cols());
                let w = g.cols();
                let mut dx = Tensor::zeros(src.shape());
                for i in 0..rows {
                    dx.data_mut()[i * cols + start..i * cols + start + w].copy_from_slice(g.row(i));
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.value(*x).shape())?)],
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (dx, dk, db) = ops::conv2d_backward(self.value(*input), self.value(*kernel), *stride, *padding, g)?;
                vec![(*input, dx), (*kernel, dk), (*bias, db)]
            }
            Op::AvgPool(x) => {
                let dy = g.clone().reshape(&[g.len()])?;
                vec![(*x, ops::avgpool_global_backward(self.value(*x).shape(), &dy))]
            }
            Op::Attention { q, k, v, weights } => {
                let (dq, dk, dv) = ops::attention_backward(self.value(*q), self.value(*k), self.value(*v), weights, g)?;
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let cols = t.cols();
                let mut dt = Tensor::zeros(t.shape());
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[i * cols..(i + 1) * cols];
                    for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                        *d = *d + s;
                    }
                }
                vec![(*table, dt)]
            }
            Op::MaskedLoss { logits, dlogits } => {
                vec![(*logits, dlogits.scale(g.data()[0]))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), g.data()[0]))],
        })
    }

    /// Gradient of the last `backward` root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound parameter, keyed by store index.
    pub fn param_grads(&self) -> Vec<(usize, Tensor<T>)> {
        let mut out: Vec<(usize, Tensor<T>)> = self
            .bound
            .iter()
            .map(|(&pid, &node)| {
                let g = self
                    .grad(node)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(node).shape()));
                (pid, g)
            })
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }
}

/// Fold the graph's parameter gradients into `store` (frozen ones ignored).
pub fn accumulate_into<T: Real>(grads: &[(usize, Tensor<T>)], store: &mut ParamStore<T>) -> Result<()> {
    for (pid, g) in grads {
        store.accumulate_grad(*pid, g)?;
    }
    Ok(())
}
