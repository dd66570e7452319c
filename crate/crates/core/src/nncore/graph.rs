//! Tape-based reverse-mode differentiation over a small op set.

use std::collections::HashMap;
use std::sync::Arc;

use super::functional::{
    self, axis_taps, col2im, conv2d_with, im2col, layer_norm_fwd, resize_backward, resize_with, sigmoid, softmax_rows_in_place,
    softplus, tconv2d_with, AxisTaps, ConvGeom,
};
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{contract, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Gather(Var, Arc<Vec<usize>>),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    TConv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    Resize {
        x: Var,
        h: usize,
        w: usize,
        th: Arc<AxisTaps>,
        tw: Arc<AxisTaps>,
    },
    L2NormRows(Var, Vec<f64>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy(Var, usize),
    BceLogits(Var, Arc<Tensor>),
    SoftIou(Var, Arc<Tensor>),
    Mse(Var, Arc<Tensor>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

/// A computation recorded against a read-only parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients (pure evaluation).
    pub fn inference(store: &'s ParamStore) -> Self {
        let mut g = Self::new(store);
        g.grad_enabled = false;
        g
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs_need: bool) -> Var {
        let needs_grad = self.grad_enabled && inputs_need;
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).as_matrix()
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Gradients::leaf`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let t = self.store.tensor(id).clone();
        let trainable = self.store.is_trainable(id);
        let v = self.push(t, Op::Param(id), trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        contract!(k == k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            m,
            k,
            false,
            self.value(b).data(),
            k2,
            n,
            false,
            &mut out,
            false,
        );
        let need = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), need))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        contract!(k == k2, "matmul_t inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            m,
            k,
            false,
            self.value(b).data(),
            n,
            k2,
            true,
            &mut out,
            false,
        );
        let need = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulT(a, b), need))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let need = self.needs(a);
        self.push(Tensor::new(&[n, m], out).unwrap(), Op::Transpose(a), need)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        contract!(
            ta.len() == tb.len(),
            "{what}: shapes {:?} and {:?} differ",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let need = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), need))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let need = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), need))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let need = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), need))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        contract!(
            self.value(row).len() == n,
            "add_row: row has {} values, matrix has {n} columns",
            self.value(row).len()
        );
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        let need = self.needs(a) || self.needs(row);
        Ok(self.push(t, Op::AddRow(a, row), need))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        let need = self.needs(a);
        self.push(t, Op::Scale(a, s), need)
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        contract!(self.value(s).len() == 1, "scale_by expects a scalar");
        let sv = self.value(s).data()[0];
        let t = self.value(a).map(|v| v * sv);
        let need = self.needs(a) || self.needs(s);
        Ok(self.push(t, Op::ScaleBy(a, s), need))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let need = self.needs(a);
        self.push(t, Op::Exp(a), need)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let need = self.needs(a);
        self.push(t, Op::Relu(a), need)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| gelu_fwd(x).0);
        let need = self.needs(a);
        self.push(t, Op::Gelu(a), need)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let need = self.needs(a);
        self.push(t, Op::Sigmoid(a), need)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = functional::softmax_rows(self.value(a));
        let need = self.needs(a);
        self.push(t, Op::SoftmaxRows(a), need)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        contract!(d >= 2, "layer_norm needs at least two features");
        contract!(
            self.value(gain).len() == d && self.value(bias).len() == d,
            "layer_norm affine width mismatch"
        );
        let (y, xhat, rstd) = layer_norm_fwd(self.value(x).data(), d, self.value(gain).data(), self.value(bias).data());
        let t = Tensor::new(self.value(x).shape(), y)?;
        let need = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            need,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        contract!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            contract!(c == n, "concat_rows: widths {c} and {n} differ");
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let need = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(&[rows, n], data)?, Op::ConcatRows(parts.to_vec()), need))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        contract!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            contract!(self.value(p).rows() == m, "concat_cols: row counts differ");
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let need = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::ConcatCols(parts.to_vec()), need))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        contract!(len > 0 && start + len <= m, "slice_rows {start}+{len} out of {m}");
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let need = self.needs(a);
        Ok(self.push(Tensor::new(&[len, n], data)?, Op::SliceRows(a, start), need))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        contract!(len > 0 && start + len <= n, "slice_cols {start}+{len} out of {n}");
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let need = self.needs(a);
        Ok(self.push(Tensor::new(&[m, len], data)?, Op::SliceCols(a, start), need))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let need = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), need))
    }

    /// `out[i] = a[index[i]]`, producing a tensor of the given shape.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        contract!(index.iter().all(|&i| i < src.len()), "gather index out of range");
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        let need = self.needs(a);
        Ok(self.push(t, Op::Gather(a, index), need))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = functional::conv_geom(self.value(x), self.value(k), stride, pad)?;
        let t = conv2d_with(self.value(x).data(), self.value(k).data(), &geom);
        let need = self.needs(x) || self.needs(k);
        Ok(self.push(t, Op::Conv2d { x, k, geom }, need))
    }

    pub fn tconv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let geom = functional::tconv_geom(self.value(x), self.value(k), stride)?;
        let t = tconv2d_with(self.value(x).data(), self.value(k).data(), &geom);
        let need = self.needs(x) || self.needs(k);
        Ok(self.push(t, Op::TConv2d { x, k, geom }, need))
    }

    /// Bilinear resize of an `h x w x c` map.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        contract!(s.len() == 3, "resize expects h x w x c, got {:?}", s);
        let (h, w, c) = (s[0], s[1], s[2]);
        let th = Arc::new(axis_taps(h, out_h));
        let tw = Arc::new(axis_taps(w, out_w));
        let t = resize_with(self.value(x).data(), h, w, c, &th, &tw);
        let need = self.needs(x);
        Ok(self.push(t, Op::Resize { x, h, w, th, tw }, need))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let mut t = self.value(a).clone();
        let mut norms = Vec::new();
        for row in t.data_mut().chunks_mut(n) {
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(nr);
            row.iter_mut().for_each(|v| *v /= nr);
        }
        let need = self.needs(a);
        self.push(t, Op::L2NormRows(a, norms), need)
    }

    /// Column means, `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let need = self.needs(a);
        self.push(Tensor::new(&[1, n], out).unwrap(), Op::MeanRows(a), need)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let need = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), need)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        let need = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), need)
    }

    /// Softmax cross-entropy of a single `1 x n` logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        contract!(t.rows() == 1, "cross_entropy expects one row of logits");
        contract!(label < t.cols(), "label {label} outside {} classes", t.cols());
        let row = t.data();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - row[label];
        let need = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, label), need))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, target: Arc<Tensor>) -> Result<Var> {
        let z = self.value(logits);
        contract!(z.len() == target.len(), "bce: {} logits vs {} targets", z.len(), target.len());
        let s: f64 = z.data().iter().zip(target.data()).map(|(&x, &t)| softplus(x) - x * t).sum();
        let loss = s / z.len() as f64;
        let need = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits(logits, target), need))
    }

    /// `1 - sum(p g) / sum(p + g - p g)` with `p = sigmoid(logits)`.
    pub fn soft_iou_loss(&mut self, logits: Var, target: Arc<Tensor>) -> Result<Var> {
        let z = self.value(logits);
        contract!(z.len() == target.len(), "soft iou: size mismatch");
        let (i, u) = soft_iou_terms(z.data(), target.data());
        let need = self.needs(logits);
        Ok(self.push(Tensor::scalar(1.0 - i / u), Op::SoftIou(logits, target), need))
    }

    pub fn mse(&mut self, a: Var, target: Arc<Tensor>) -> Result<Var> {
        let x = self.value(a);
        contract!(x.len() == target.len(), "mse: size mismatch");
        let s: f64 = x.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        let loss = s / x.len() as f64;
        let need = self.needs(a);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, target), need))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        self.backward_seeded(&[(root, Tensor::new(self.value(root).shape(), vec![1.0]).unwrap())])
    }

    /// Reverse pass from arbitrary nodes with given output gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut hi = 0;
        for (v, g) in seeds {
            assert_eq!(g.len(), self.value(*v).len(), "seed gradient size mismatch");
            accumulate(&mut grads, *v, g.clone());
            hi = hi.max(v.0 + 1);
        }
        let mut out = Gradients::default();
        for i in (0..hi).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(Var(i), &node.op, g, &mut grads, &mut out);
        }
        out
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.needs(v) {
            accumulate(grads, v, g);
        }
    }

    fn propagate(&self, me: Var, op: &Op, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let y = &self.nodes[me.0].value;
        match op {
            Op::Leaf => {
                out.leaves.insert(me, g);
            }
            Op::Param(id) => {
                out.params.insert(*id, g);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(g.data(), m, n, false, self.value(*b).data(), k, n, true, &mut da, false);
                    self.send(grads, *a, Tensor::new(self.shape(*a), da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(self.value(*a).data(), m, k, true, g.data(), m, n, false, &mut db, false);
                    self.send(grads, *b, Tensor::new(self.shape(*b), db).unwrap());
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a);
                let (n, _) = self.dims(*b);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(g.data(), m, n, false, self.value(*b).data(), n, k, false, &mut da, false);
                    self.send(grads, *a, Tensor::new(self.shape(*a), da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(g.data(), m, n, true, self.value(*a).data(), m, k, false, &mut db, false);
                    self.send(grads, *b, Tensor::new(self.shape(*b), db).unwrap());
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g.data()[j * m + i];
                    }
                }
                self.send(grads, *a, Tensor::new(self.shape(*a), da).unwrap());
            }
            Op::Add(a, b) => {
                self.send(grads, *a, reshaped(&g, self.shape(*a)));
                self.send(grads, *b, reshaped(&g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, reshaped(&g, self.shape(*a)));
                self.send(grads, *b, reshaped(&g.map(|v| -v), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = zip_with(&g, self.value(*b), |x, y| x * y);
                    self.send(grads, *a, reshaped(&d, self.shape(*a)));
                }
                if self.needs(*b) {
                    let d = zip_with(&g, self.value(*a), |x, y| x * y);
                    self.send(grads, *b, reshaped(&d, self.shape(*b)));
                }
            }
            Op::AddRow(a, row) => {
                self.send(grads, *a, reshaped(&g, self.shape(*a)));
                if self.needs(*row) {
                    let n = self.value(*row).len();
                    let mut dr = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.send(grads, *row, Tensor::new(self.shape(*row), dr).unwrap());
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.send(grads, *a, reshaped(&g.map(|v| v * s), self.shape(*a)));
            }
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.needs(*a) {
                    self.send(grads, *a, reshaped(&g.map(|v| v * sv), self.shape(*a)));
                }
                if self.needs(*s) {
                    let ds = g.dot(self.value(*a));
                    self.send(grads, *s, Tensor::new(self.shape(*s), vec![ds]).unwrap());
                }
            }
            Op::Exp(a) => {
                let d = zip_with(&g, y, |x, e| x * e);
                self.send(grads, *a, reshaped(&d, self.shape(*a)));
            }
            Op::Relu(a) => {
                let d = zip_with(&g, self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                self.send(grads, *a, reshaped(&d, self.shape(*a)));
            }
            Op::Gelu(a) => {
                let d = zip_with(&g, self.value(*a), |x, v| x * gelu_fwd(v).1);
                self.send(grads, *a, reshaped(&d, self.shape(*a)));
            }
            Op::Sigmoid(a) => {
                let d = zip_with(&g, y, |x, s| x * s * (1.0 - s));
                self.send(grads, *a, reshaped(&d, self.shape(*a)));
            }
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, *a, Tensor::new(self.shape(*a), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).cols();
                let gv = self.value(*gain).data();
                if self.needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, xr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    self.send(grads, *gain, Tensor::new(self.shape(*gain), dg).unwrap());
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.data().chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    self.send(grads, *bias, Tensor::new(self.shape(*bias), db).unwrap());
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((dxr, gr), xr)) in dx.chunks_mut(d).zip(g.data().chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let dxh: Vec<f64> = (0..d).map(|j| gr[j] * gv[j]).collect();
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dxr[j] = rstd[r] * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.send(grads, *x, Tensor::new(self.shape(*x), dx).unwrap());
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        let d = g.data()[off..off + len].to_vec();
                        self.send(grads, p, Tensor::new(self.shape(p), d).unwrap());
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = y.cols();
                let m = y.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g.data()[i * n + off..i * n + off + w]);
                        }
                        self.send(grads, p, Tensor::new(self.shape(p), d).unwrap());
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = y.cols();
                let mut d = vec![0.0; self.value(*a).len()];
                d[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.send(grads, *a, Tensor::new(self.shape(*a), d).unwrap());
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims(*a);
                let w = y.cols();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.send(grads, *a, Tensor::new(self.shape(*a), d).unwrap());
            }
            Op::Reshape(a) => {
                self.send(grads, *a, reshaped(&g, self.shape(*a)));
            }
            Op::Gather(a, index) => {
                let mut d = vec![0.0; self.value(*a).len()];
                for (o, &i) in index.iter().enumerate() {
                    d[i] += g.data()[o];
                }
                self.send(grads, *a, Tensor::new(self.shape(*a), d).unwrap());
            }
            Op::Conv2d { x, k, geom } => {
                let rows = geom.h_out * geom.w_out;
                let pl = geom.patch_len();
                if self.needs(*k) {
                    let cols = im2col(self.value(*x).data(), geom);
                    let mut dk = vec![0.0; pl * geom.c_out];
                    gemm(&cols, rows, pl, true, g.data(), rows, geom.c_out, false, &mut dk, false);
                    self.send(grads, *k, Tensor::new(self.shape(*k), dk).unwrap());
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; rows * pl];
                    gemm(
                        g.data(),
                        rows,
                        geom.c_out,
                        false,
                        self.value(*k).data(),
                        pl,
                        geom.c_out,
                        true,
                        &mut dcols,
                        false,
                    );
                    let dx = col2im(&dcols, geom);
                    self.send(grads, *x, Tensor::new(self.shape(*x), dx).unwrap());
                }
            }
            Op::TConv2d { x, k, geom } => {
                let rows = geom.h_out * geom.w_out;
                let pl = geom.patch_len();
                let dcols = im2col(g.data(), geom);
                if self.needs(*k) {
                    let mut dk = vec![0.0; pl * geom.c_out];
                    gemm(
                        &dcols,
                        rows,
                        pl,
                        true,
                        self.value(*x).data(),
                        rows,
                        geom.c_out,
                        false,
                        &mut dk,
                        false,
                    );
                    self.send(grads, *k, Tensor::new(self.shape(*k), dk).unwrap());
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * geom.c_out];
                    gemm(
                        &dcols,
                        rows,
                        pl,
                        false,
                        self.value(*k).data(),
                        pl,
                        geom.c_out,
                        false,
                        &mut dx,
                        false,
                    );
                    self.send(grads, *x, Tensor::new(self.shape(*x), dx).unwrap());
                }
            }
            Op::Resize { x, h, w, th, tw } => {
                let c = y.shape()[2];
                let dx = resize_backward(g.data(), *h, *w, c, th, tw);
                self.send(grads, *x, Tensor::new(self.shape(*x), dx).unwrap());
            }
            Op::L2NormRows(a, norms) => {
                let n = y.cols();
                let mut d = vec![0.0; y.len()];
                for (r, ((dr, gr), yr)) in d.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.send(grads, *a, Tensor::new(self.shape(*a), d).unwrap());
            }
            Op::MeanRows(a) => {
                let (m, n) = self.dims(*a);
                let mut d = vec![0.0; m * n];
                for row in d.chunks_mut(n) {
                    for (v, gv) in row.iter_mut().zip(g.data()) {
                        *v = gv / m as f64;
                    }
                }
                self.send(grads, *a, Tensor::new(self.shape(*a), d).unwrap());
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.send(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let gv = g.data()[0] / self.value(*a).len() as f64;
                self.send(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::CrossEntropy(a, label) => {
                let gv = g.data()[0];
                let mut p = self.value(*a).data().to_vec();
                let n = p.len();
                softmax_rows_in_place(&mut p, n);
                p[*label] -= 1.0;
                p.iter_mut().for_each(|v| *v *= gv);
                self.send(grads, *a, Tensor::new(self.shape(*a), p).unwrap());
            }
            Op::BceLogits(a, target) => {
                let gv = g.data()[0] / target.len() as f64;
                let d = zip_with(self.value(*a), target, |z, t| gv * (sigmoid(z) - t));
                self.send(grads, *a, reshaped(&d, self.shape(*a)));
            }
            Op::SoftIou(a, target) => {
                let gv = g.data()[0];
                let z = self.value(*a).data();
                let (i, u) = soft_iou_terms(z, target.data());
                let d: Vec<f64> = z
                    .iter()
                    .zip(target.data())
                    .map(|(&zz, &t)| {
                        let p = sigmoid(zz);
                        // dI/dp = t, dU/dp = 1 - t
                        let dl_dp = -(t * u - i * (1.0 - t)) / (u * u);
                        gv * dl_dp * p * (1.0 - p)
                    })
                    .collect();
                self.send(grads, *a, Tensor::new(self.shape(*a), d).unwrap());
            }
            Op::Mse(a, target) => {
                let gv = 2.0 * g.data()[0] / target.len() as f64;
                let d = zip_with(self.value(*a), target, |p, t| gv * (p - t));
                self.send(grads, *a, reshaped(&d, self.shape(*a)));
            }
        }
    }
}

fn soft_iou_terms(z: &[f64], t: &[f64]) -> (f64, f64) {
    let mut i = 0.0;
    let mut u = 0.0;
    for (&zz, &tt) in z.iter().zip(t) {
        let p = sigmoid(zz);
        i += p * tt;
        u += p + tt - p * tt;
    }
    (i, u.max(1e-12))
}

/// GELU (tanh form) and its derivative.
fn gelu_fwd(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reshaped(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g.clone()
    } else {
        g.clone().reshape(shape).expect("gradient size matches input")
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}
