//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation appends a
//! node holding its forward value and, when any input requires a gradient, a
//! closure that maps the output gradient to one gradient per parent. Because
//! parents always precede their children in the arena, the graph is acyclic by
//! construction and backward is a single reverse sweep.
//!
//! Only the operations the tiny language model and the preference losses need
//! are provided. Broadcasting is limited to adding a row vector to every row
//! of a matrix.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} cannot hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for extent {extent} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward already ran on this graph; call reset() before running it again")]
    BackwardTwice,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Immutable row-major array of `f64`. Cloning shares the underlying buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl Tensor {
    /// Every extent must be positive and their product must equal `data.len()`.
    /// An empty shape denotes a scalar.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(TensorError::BadShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value].into(),
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n].into(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new shape.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(TensorError::BadShape {
                shape,
                len: self.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Copy with element `index` replaced; used by finite-difference checks.
    pub fn with_value(&self, index: usize, value: f64) -> Self {
        let mut data = self.data.to_vec();
        data[index] = value;
        Tensor {
            shape: self.shape.clone(),
            data: data.into(),
        }
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: data.into(),
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![0, 0],
            }),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&self.data[..])
            .finish()
    }
}

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Computation graph. Single-threaded; build one graph per independent
/// computation and share only [`Tensor`] values between threads.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input that receives a gradient during backward.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, false)
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an operation with an explicit backprop rule.
    ///
    /// `backward` receives the gradient of the root with respect to this
    /// node's value and must return one gradient per parent, each shaped like
    /// that parent's value. The closure is dropped when no parent needs a
    /// gradient. The forward value must be finite.
    pub fn custom<'g, F>(
        &'g self,
        op: &'static str,
        parents: &[Var<'g>],
        value: Tensor,
        backward: F,
    ) -> Result<Var<'g>>
    where
        F: Fn(&Tensor) -> Vec<Tensor> + 'static,
    {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push(value, ids, backward, requires_grad))
    }

    /// Reverse sweep from a scalar root. Gradients land on every node that
    /// requires one and are read back with [`Graph::grad`]. Running backward
    /// twice without [`Graph::reset`] is an error.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        if self.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        let mut nodes = self.nodes.borrow_mut();
        let root_value = &nodes[root.id].value;
        if !root_value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.backward_done.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = Tensor::from_parts(node.value.shape().to_vec(), g);
            if let Some(rule) = &node.backward {
                let parent_grads = rule(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    let parent = &nodes[pid];
                    if !parent.requires_grad {
                        continue;
                    }
                    if pg.shape() != parent.value.shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: "backward",
                            left: parent.value.shape().to_vec(),
                            right: pg.shape().to_vec(),
                        });
                    }
                    match &mut grads[pid] {
                        Some(acc) => acc.iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(pg.data().to_vec()),
                    }
                }
            }
            nodes[id].grad = Some(g);
        }
        Ok(())
    }

    /// Clears stored gradients so backward may run again.
    pub fn reset(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
        self.backward_done.set(false);
    }

    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[var.id].grad.clone()
    }

    pub fn value(&self, var: Var<'_>) -> Tensor {
        self.nodes.borrow()[var.id].value.clone()
    }

    /// Sum of scalar nodes, folded left to right.
    pub fn sum_scalars<'g>(&'g self, vars: &[Var<'g>]) -> Result<Var<'g>> {
        let (first, rest) = vars
            .split_first()
            .ok_or(TensorError::BadShape { shape: vec![], len: 0 })?;
        rest.iter().try_fold(*first, |acc, v| acc.add(*v))
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// `c = a (m×k) · b (k×n)`, plain triple loop in i-k-j order.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow for large |x|.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::BadAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        check_same("add", &a, &b)?;
        let out = zip(&a, &b, |x, y| x + y);
        self.graph
            .custom("add", &[self, other], out, |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        check_same("sub", &a, &b)?;
        let out = zip(&a, &b, |x, y| x - y);
        self.graph.custom("sub", &[self, other], out, |g| {
            vec![g.clone(), map(g, |v| -v)]
        })
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        check_same("mul", &a, &b)?;
        let out = zip(&a, &b, |x, y| x * y);
        self.graph.custom("mul", &[self, other], out, move |g| {
            vec![zip(g, &b, |u, y| u * y), zip(g, &a, |u, x| u * x)]
        })
    }

    pub fn scalar_mul(self, c: f64) -> Result<Var<'g>> {
        let out = map(&self.value(), |x| c * x);
        self.graph
            .custom("scalar_mul", &[self], out, move |g| vec![map(g, |v| c * v)])
    }

    /// Adds a `[d]` vector to every row of an `[n, d]` matrix.
    pub fn add_row(self, bias: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), bias.value());
        let (n, d) = a.dims2("add_row")?;
        if b.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(b.data()).for_each(|(o, v)| *o += v);
        }
        let out = Tensor::from_parts(vec![n, d], out);
        self.graph.custom("add_row", &[self, bias], out, move |g| {
            let mut db = vec![0.0; d];
            for row in g.data().chunks(d) {
                db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            vec![g.clone(), Tensor::from_parts(vec![d], db)]
        })
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let out = Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n));
        self.graph.custom("matmul", &[self, other], out, move |g| {
            // dA = G Bᵀ, dB = Aᵀ G
            let bt = transpose_raw(b.data(), k, n);
            let at = transpose_raw(a.data(), m, k);
            vec![
                Tensor::from_parts(vec![m, k], matmul_raw(g.data(), &bt, m, n, k)),
                Tensor::from_parts(vec![k, n], matmul_raw(&at, g.data(), k, m, n)),
            ]
        })
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let a = self.value();
        let (r, c) = a.dims2("transpose")?;
        let out = Tensor::from_parts(vec![c, r], transpose_raw(a.data(), r, c));
        self.graph.custom("transpose", &[self], out, move |g| {
            vec![Tensor::from_parts(vec![r, c], transpose_raw(g.data(), c, r))]
        })
    }

    /// Rows `ids` of a `[vocab, d]` table, stacked into `[ids.len(), d]`.
    pub fn embedding_gather(self, ids: &[usize]) -> Result<Var<'g>> {
        let table = self.value();
        let (v, d) = table.dims2("embedding_gather")?;
        if ids.is_empty() {
            return Err(TensorError::BadShape { shape: vec![0, d], len: 0 });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_gather",
                    index: i,
                    extent: v,
                });
            }
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], out);
        let ids = ids.to_vec();
        self.graph.custom("embedding_gather", &[self], out, move |g| {
            let mut dt = vec![0.0; v * d];
            for (row, &i) in g.data().chunks(d).zip(&ids) {
                dt[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, b)| *a += b);
            }
            vec![Tensor::from_parts(vec![v, d], dt)]
        })
    }

    /// Contiguous block of `len` rows starting at `start`.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        let (n, d) = a.dims2("slice_rows")?;
        if len == 0 || start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                extent: n,
            });
        }
        let out = Tensor::from_parts(vec![len, d], a.data()[start * d..(start + len) * d].to_vec());
        self.graph.custom("slice_rows", &[self], out, move |g| {
            let mut da = vec![0.0; n * d];
            da[start * d..(start + len) * d].copy_from_slice(g.data());
            vec![Tensor::from_parts(vec![n, d], da)]
        })
    }

    /// Contiguous block of `len` columns starting at `start`.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        let (n, d) = a.dims2("slice_cols")?;
        if len == 0 || start + len > d {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: d,
            });
        }
        let out: Vec<f64> = a
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::from_parts(vec![n, len], out);
        self.graph.custom("slice_cols", &[self], out, move |g| {
            let mut da = vec![0.0; n * d];
            for (drow, grow) in da.chunks_mut(d).zip(g.data().chunks(len)) {
                drow[start..start + len].copy_from_slice(grow);
            }
            vec![Tensor::from_parts(vec![n, d], da)]
        })
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or(TensorError::BadShape { shape: vec![], len: 0 })?;
        let graph = first.graph;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let (n, _) = values[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (r, c) = v.dims2("concat_cols")?;
            if r != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: values[0].shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![n, total], out);
        graph.custom("concat_cols", parts, out, move |g| {
            let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(n * w)).collect();
            for row in g.data().chunks(total) {
                let mut off = 0;
                for (dst, &w) in grads.iter_mut().zip(&widths) {
                    dst.extend_from_slice(&row[off..off + w]);
                    off += w;
                }
            }
            grads
                .into_iter()
                .zip(&widths)
                .map(|(d, &w)| Tensor::from_parts(vec![n, w], d))
                .collect()
        })
    }

    /// Row-wise layer normalization of `[n, d]` with affine `gamma`, `beta` of shape `[d]`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let (n, d) = x.dims2("layer_norm")?;
        for p in [&gm, &bt] {
            if p.shape() != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: x.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &x.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                xhat[i * d + j] = (row[j] - mean) * r;
            }
        }
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(idx, &h)| gm.data()[idx % d] * h + bt.data()[idx % d])
            .collect();
        let out = Tensor::from_parts(vec![n, d], out);
        self.graph
            .custom("layer_norm", &[self, gamma, beta], out, move |g| {
                let gd = g.data();
                let mut dx = vec![0.0; n * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (i, &r) in rstd.iter().enumerate() {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let k = i * d + j;
                        dgamma[j] += gd[k] * xhat[k];
                        dbeta[j] += gd[k];
                        let dh = gd[k] * gm.data()[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[k];
                    }
                    for j in 0..d {
                        let k = i * d + j;
                        let dh = gd[k] * gm.data()[j];
                        dx[k] = r / d as f64 * (d as f64 * dh - sum_dh - xhat[k] * sum_dh_h);
                    }
                }
                vec![
                    Tensor::from_parts(vec![n, d], dx),
                    Tensor::from_parts(vec![d], dgamma),
                    Tensor::from_parts(vec![d], dbeta),
                ]
            })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'g>> {
        let x = self.value();
        let out = map(&x, gelu);
        self.graph.custom("gelu", &[self], out, move |g| {
            vec![zip(g, &x, |u, v| u * gelu_grad(v))]
        })
    }

    /// Log-probabilities along `axis` via max-subtracted log-sum-exp.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (outer, extent, inner) = axis_split(x.shape(), axis)?;
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * extent * inner + k * inner + i;
                let max = (0..extent).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..extent).map(|k| (xd[idx(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..extent {
                    out[idx(k)] = xd[idx(k)] - lse;
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let saved = out.clone();
        self.graph.custom("log_softmax", &[self], out, move |g| {
            let (gd, yd) = (g.data(), saved.data());
            let mut dx = vec![0.0; gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| o * extent * inner + k * inner + i;
                    let sum: f64 = (0..extent).map(|k| gd[idx(k)]).sum();
                    for k in 0..extent {
                        dx[idx(k)] = gd[idx(k)] - yd[idx(k)].exp() * sum;
                    }
                }
            }
            vec![Tensor::from_parts(saved.shape().to_vec(), dx)]
        })
    }

    /// Row-wise softmax of a square `[n, n]` score matrix restricted to
    /// columns `j <= i`; masked entries are exactly zero.
    pub fn causal_softmax(self) -> Result<Var<'g>> {
        let x = self.value();
        let (n, m) = x.dims2("causal_softmax")?;
        if n != m {
            return Err(TensorError::ShapeMismatch {
                op: "causal_softmax",
                left: vec![n, m],
                right: vec![n, n],
            });
        }
        let xd = x.data();
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            let row = &xd[i * n..i * n + i + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                p[i * n + j] = e;
                z += e;
            }
            for j in 0..=i {
                p[i * n + j] /= z;
            }
        }
        let out = Tensor::from_parts(vec![n, n], p);
        let saved = out.clone();
        self.graph.custom("causal_softmax", &[self], out, move |g| {
            let (gd, pd) = (g.data(), saved.data());
            let mut dx = vec![0.0; n * n];
            for i in 0..n {
                let dot: f64 = (0..=i).map(|j| pd[i * n + j] * gd[i * n + j]).sum();
                for j in 0..=i {
                    dx[i * n + j] = pd[i * n + j] * (gd[i * n + j] - dot);
                }
            }
            vec![Tensor::from_parts(vec![n, n], dx)]
        })
    }

    /// From `[n, vocab]` log-probabilities, picks `token_ids[i]` in row `i`; returns `[n]`.
    pub fn gather_logprob(self, token_ids: &[usize]) -> Result<Var<'g>> {
        let lp = self.value();
        let (n, v) = lp.dims2("gather_logprob")?;
        if token_ids.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "gather_logprob",
                left: vec![n, v],
                right: vec![token_ids.len()],
            });
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_logprob",
                index: bad,
                extent: v,
            });
        }
        let out: Vec<f64> = token_ids
            .iter()
            .enumerate()
            .map(|(i, &t)| lp.data()[i * v + t])
            .collect();
        let out = Tensor::from_parts(vec![n], out);
        let ids = token_ids.to_vec();
        self.graph.custom("gather_logprob", &[self], out, move |g| {
            let mut d = vec![0.0; n * v];
            for (i, (&t, &gv)) in ids.iter().zip(g.data()).enumerate() {
                d[i * v + t] = gv;
            }
            vec![Tensor::from_parts(vec![n, v], d)]
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.data().iter().sum());
        self.graph.custom("sum", &[self], out, move |g| {
            vec![Tensor::full(&shape, g.item())]
        })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(self) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = x.len() as f64;
        let out = Tensor::scalar(x.data().iter().sum::<f64>() / n);
        self.graph.custom("mean", &[self], out, move |g| {
            vec![Tensor::full(&shape, g.item() / n)]
        })
    }

    /// Hinge `max(0, x)`; the subgradient at 0 is 0.
    pub fn max_with_zero(self) -> Result<Var<'g>> {
        let x = self.value();
        let out = map(&x, |v| v.max(0.0));
        self.graph.custom("max_with_zero", &[self], out, move |g| {
            vec![zip(g, &x, |u, v| if v > 0.0 { u } else { 0.0 })]
        })
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        let out = map(&self.value(), sigmoid);
        let saved = out.clone();
        self.graph.custom("sigmoid", &[self], out, move |g| {
            vec![zip(g, &saved, |u, s| u * s * (1.0 - s))]
        })
    }

    /// `log σ(x)`, stable for large |x|.
    pub fn log_sigmoid(self) -> Result<Var<'g>> {
        let x = self.value();
        let out = map(&x, log_sigmoid);
        self.graph.custom("log_sigmoid", &[self], out, move |g| {
            vec![zip(g, &x, |u, v| u * sigmoid(-v))]
        })
    }

    pub fn exp(self) -> Result<Var<'g>> {
        let out = map(&self.value(), f64::exp);
        let saved = out.clone();
        self.graph
            .custom("exp", &[self], out, move |g| vec![zip(g, &saved, |u, e| u * e)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::BadShape { .. })
        ));
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::scalar(1.5).is_scalar());
    }

    #[test]
    fn log_sigmoid_at_zero() {
        let g = Graph::new();
        let w = g.leaf(Tensor::scalar(0.0));
        let y = w.log_sigmoid().unwrap();
        assert!((y.item() + LN2).abs() < 1e-15);
        g.backward(y).unwrap();
        assert_eq!(w.grad().unwrap().item(), 0.5);
    }

    #[test]
    fn hinge_values() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-3.2, 3.2]).unwrap());
        assert_eq!(x.max_with_zero().unwrap().value().data(), &[0.0, 3.2]);
    }

    #[test]
    fn uniform_log_softmax() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0; 4]).unwrap());
        let lp = x.log_softmax(0).unwrap().value();
        for v in lp.data() {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_is_stable_for_large_logits() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
        let lp = x.log_softmax(0).unwrap().value();
        assert_eq!(lp.data()[0], 0.0);
        assert!((lp.data()[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_along_first_axis() {
        let g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 0.0, -1.0]).unwrap());
        let lp = x.log_softmax(0).unwrap().value();
        for j in 0..3 {
            let s = lp.data()[j].exp() + lp.data()[3 + j].exp();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(matches!(x.log_softmax(2), Err(TensorError::BadAxis { .. })));
    }

    #[test]
    fn sum_root_gives_ones() {
        let g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let s = x.sum().unwrap();
        g.backward(s).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_root_and_second_call() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
        let s = x.sum().unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(TensorError::BackwardTwice));
        g.reset();
        assert!(x.grad().is_none());
        g.backward(s).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let g = Graph::new();
        let x = g.constant(Tensor::scalar(1000.0));
        assert_eq!(x.exp().unwrap_err(), TensorError::NonFinite { op: "exp" });
    }

    #[test]
    fn gather_rejects_out_of_vocab() {
        let g = Graph::new();
        let t = g.constant(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        assert!(matches!(
            t.embedding_gather(&[0, 3]),
            Err(TensorError::IndexOutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let g = Graph::new();
        let s = g.constant(Tensor::matrix(2, 2, vec![0.3, 9.0, 0.0, 0.0]).unwrap());
        let p = s.causal_softmax().unwrap().value();
        assert_eq!(p.data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn constants_record_no_backward_rule() {
        let g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = a.scalar_mul(3.0).unwrap();
        assert!(g.nodes.borrow()[b.id].backward.is_none());
    }
}
