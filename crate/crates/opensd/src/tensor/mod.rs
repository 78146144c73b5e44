//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The graph is recorded dynamically as operations execute: every op output
//! keeps handles to its parents plus a closure that maps the upstream
//! gradient to per-parent gradients. `backward` on a scalar walks the graph
//! in reverse topological order and accumulates into leaf `grad` buffers.
//!
//! Tensors are immutable after creation except for their grad buffers, and a
//! graph lives on a single thread (`Rc`, not `Arc` — the compiler enforces
//! the confinement). Parallelism happens across independent graphs, never
//! within one.
//!
//! Every op checks its output for NaN/Inf and surfaces
//! [`Error::NonFinite`](crate::Error::NonFinite) instead of letting bad
//! values propagate.

mod optim;
mod store;

pub use optim::Adam;
pub use store::{Binding, ParamStore};

use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Vector-Jacobian product: (upstream grad, own output data, parent data
/// slices) -> one gradient buffer per parent, in parent order.
type VjpFn = Box<dyn Fn(&[f64], &[f64], &[&[f64]]) -> Vec<Vec<f64>>>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Leaf parameter flag; only leaves retain grads across `backward`.
    requires_grad: bool,
    /// True if this node or any ancestor requires grad.
    needs_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    vjp: Option<VjpFn>,
}

/// A dense row-major tensor. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    /// Constant (non-trainable) tensor from raw data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        check_finite(&data, "leaf")?;
        Ok(Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                shape: shape.to_vec(),
                data,
                requires_grad,
                needs_grad: requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                vjp: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::from_vec(vec![0.0; n], shape).expect("zeros is always valid")
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::from_vec(vec![v], &[1])
    }

    fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        vjp: VjpFn,
        op: &'static str,
    ) -> Result<Self> {
        check_finite(&data, op)?;
        let needs_grad = parents.iter().any(|p| p.inner.needs_grad);
        Ok(Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                shape,
                data,
                requires_grad: false,
                needs_grad,
                grad: RefCell::new(None),
                parents: if needs_grad { parents } else { Vec::new() },
                vjp: if needs_grad { Some(vjp) } else { None },
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn value(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Sole element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() == 1 {
            Ok(self.inner.data[0])
        } else {
            Err(Error::NotScalar(self.inner.shape.clone()))
        }
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Detached constant with the same data.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.inner.data.clone(), &self.inner.shape)
            .expect("detach of a valid tensor is valid")
    }

    fn rows_cols(&self) -> Result<(usize, usize)> {
        match self.inner.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected 2-d tensor, got {s:?}"))),
        }
    }

    // ---- reverse pass ----------------------------------------------------

    /// Backpropagate from a scalar. Leaf gradients accumulate additively
    /// across repeated calls until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.inner.shape.clone()));
        }
        // Post-order DFS, iterative; only the needs-grad subgraph is walked.
        let mut order: Vec<Rc<Node>> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack: Vec<(Rc<Node>, usize)> = vec![(self.inner.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, pi)) = stack.pop() {
            if pi < node.parents.len() {
                let parent = node.parents[pi].inner.clone();
                stack.push((node, pi + 1));
                if parent.needs_grad && !visited.contains(&parent.id) {
                    visited.insert(parent.id);
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        {
            let mut g = self.inner.grad.borrow_mut();
            match g.as_mut() {
                Some(buf) => buf[0] += 1.0,
                None => *g = Some(vec![1.0]),
            }
        }

        for node in order.iter().rev() {
            let Some(vjp) = node.vjp.as_ref() else { continue };
            // Intermediate grads are consumed; leaves keep theirs.
            let upstream = match node.grad.borrow_mut().take() {
                Some(g) => g,
                None => continue,
            };
            let parent_data: Vec<&[f64]> =
                node.parents.iter().map(|p| p.inner.data.as_slice()).collect();
            let grads = vjp(&upstream, &node.data, &parent_data);
            debug_assert_eq!(grads.len(), node.parents.len());
            for (parent, g) in node.parents.iter().zip(grads) {
                if !parent.inner.needs_grad {
                    continue;
                }
                let mut slot = parent.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(buf) => {
                        for (b, v) in buf.iter_mut().zip(&g) {
                            *b += v;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    // ---- elementwise arithmetic -------------------------------------------

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.inner.shape == other.inner.shape {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.inner.shape, other.inner.shape
            )))
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self
            .value()
            .iter()
            .zip(other.value())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![g.to_vec(), g.to_vec()]),
            "add",
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self
            .value()
            .iter()
            .zip(other.value())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![g.to_vec(), g.iter().map(|v| -v).collect()]),
            "sub",
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self
            .value()
            .iter()
            .zip(other.value())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, p| {
                let (a, b) = (p[0], p[1]);
                vec![
                    g.iter().zip(b).map(|(g, b)| g * b).collect(),
                    g.iter().zip(a).map(|(g, a)| g * a).collect(),
                ]
            }),
            "mul",
        )
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "div")?;
        let data = self
            .value()
            .iter()
            .zip(other.value())
            .map(|(a, b)| a / b)
            .collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, p| {
                let (a, b) = (p[0], p[1]);
                vec![
                    g.iter().zip(b).map(|(g, b)| g / b).collect(),
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect(),
                ]
            }),
            "div",
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.value().iter().map(|v| v + c).collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![g.to_vec()]),
            "add_scalar",
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.value().iter().map(|v| v * c).collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![g.iter().map(|v| v * c).collect()]),
            "mul_scalar",
        )
    }

    /// Elementwise max; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "maximum")?;
        let data = self
            .value()
            .iter()
            .zip(other.value())
            .map(|(a, b)| a.max(*b))
            .collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, p| {
                let (a, b) = (p[0], p[1]);
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if a[i] >= b[i] {
                        ga[i] = g[i];
                    } else {
                        gb[i] = g[i];
                    }
                }
                vec![ga, gb]
            }),
            "maximum",
        )
    }

    /// Elementwise min; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "minimum")?;
        let data = self
            .value()
            .iter()
            .zip(other.value())
            .map(|(a, b)| a.min(*b))
            .collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _, p| {
                let (a, b) = (p[0], p[1]);
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if a[i] <= b[i] {
                        ga[i] = g[i];
                    } else {
                        gb[i] = g[i];
                    }
                }
                vec![ga, gb]
            }),
            "minimum",
        )
    }

    // ---- unary maps --------------------------------------------------------

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.value().iter().map(|&x| sigmoid(x)).collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone()],
            Box::new(|g, y, _| vec![g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()]),
            "sigmoid",
        )
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.value().iter().map(|v| v.tanh()).collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone()],
            Box::new(|g, y, _| vec![g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()]),
            "tanh",
        )
    }

    /// x * sigmoid(x): the smooth nonlinearity used throughout the model.
    pub fn silu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.value().iter().map(|&x| x * sigmoid(x)).collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone()],
            Box::new(|g, _, p| {
                vec![g
                    .iter()
                    .zip(p[0])
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect()]
            }),
            "silu",
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.value().iter().map(|v| v.exp()).collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone()],
            Box::new(|g, y, _| vec![g.iter().zip(y).map(|(g, y)| g * y).collect()]),
            "exp",
        )
    }

    pub fn ln(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.value().iter().map(|v| v.ln()).collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone()],
            Box::new(|g, _, p| vec![g.iter().zip(p[0]).map(|(g, x)| g / x).collect()]),
            "ln",
        )
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.value().iter().map(|v| v.sqrt()).collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone()],
            Box::new(|g, y, _| vec![g.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect()]),
            "sqrt",
        )
    }

    pub fn abs(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.value().iter().map(|v| v.abs()).collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone()],
            Box::new(|g, _, p| {
                vec![g
                    .iter()
                    .zip(p[0])
                    .map(|(g, x)| g * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 })
                    .collect()]
            }),
            "abs",
        )
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?}",
                self.inner.shape, shape
            )));
        }
        Tensor::from_op(
            self.inner.data.clone(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![g.to_vec()]),
            "reshape",
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols()?;
        let src = self.value();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Tensor::from_op(
            data,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut out = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        out[i * c + j] = g[j * r + i];
                    }
                }
                vec![out]
            }),
            "transpose",
        )
    }

    /// Columns `[start, start+len)` of a 2-d tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.rows_cols()?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} out of {c}",
                start + len
            )));
        }
        let src = self.value();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Tensor::from_op(
            data,
            vec![r, len],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![out]
            }),
            "slice_cols",
        )
    }

    /// Gather rows by index. Repeated indices accumulate gradients.
    pub fn index_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.rows_cols()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("row index {bad} out of {r}")));
        }
        let src = self.value();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let idx = idx.to_vec();
        Tensor::from_op(
            data,
            vec![idx.len(), c],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut out = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] += g[k * c + j];
                    }
                }
                vec![out]
            }),
            "index_rows",
        )
    }

    /// Concatenate 2-d tensors along columns; all must share the row count.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: empty input".into()));
        }
        let (r, _) = parts[0].rows_cols()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.rows_cols()?;
            if pr != r {
                return Err(Error::Shape(format!("concat_cols rows {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.value()[i * w..(i + 1) * w]);
            }
        }
        let widths_c = widths.clone();
        Tensor::from_op(
            data,
            vec![r, total],
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let mut outs: Vec<Vec<f64>> =
                    widths_c.iter().map(|w| Vec::with_capacity(r * w)).collect();
                for i in 0..r {
                    let mut off = 0;
                    for (k, &w) in widths_c.iter().enumerate() {
                        outs[k].extend_from_slice(&g[i * total + off..i * total + off + w]);
                        off += w;
                    }
                }
                outs
            }),
            "concat_cols",
        )
    }

    /// Concatenate 2-d tensors along rows; all must share the column count.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: empty input".into()));
        }
        let (_, c) = parts[0].rows_cols()?;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.rows_cols()?;
            if pc != c {
                return Err(Error::Shape(format!("concat_rows cols {pc} vs {c}")));
            }
            rows += pr;
            sizes.push(pr * c);
            data.extend_from_slice(p.value());
        }
        Tensor::from_op(
            data,
            vec![rows, c],
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let mut outs = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &n in &sizes {
                    outs.push(g[off..off + n].to_vec());
                    off += n;
                }
                outs
            }),
            "concat_rows",
        )
    }

    /// Stack 1-d tensors of equal length into a matrix, one per row.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Shape("stack_rows: empty input".into()));
        }
        let c = rows[0].numel();
        let mut data = Vec::with_capacity(rows.len() * c);
        for row in rows {
            if row.numel() != c {
                return Err(Error::Shape(format!(
                    "stack_rows: {} vs {c} elements",
                    row.numel()
                )));
            }
            data.extend_from_slice(row.value());
        }
        Tensor::from_op(
            data,
            vec![rows.len(), c],
            rows.to_vec(),
            Box::new(move |g, _, _| {
                g.chunks(c).map(|chunk| chunk.to_vec()).collect()
            }),
            "stack_rows",
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.value().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![vec![g[0]; n]]),
            "sum",
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        let s: f64 = self.value().iter().sum();
        Tensor::from_op(
            vec![s / n as f64],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![vec![g[0] / n as f64; n]]),
            "mean",
        )
    }

    // ---- structured ops ------------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols()?;
        let (k2, n) = other.rows_cols()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let a = self.value();
        let b = other.value();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Tensor::from_op(
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let (a, b) = (p[0], p[1]);
                // da = g . b^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for q in 0..k {
                            da[i * k + q] += gv * b[q * n + j];
                        }
                    }
                }
                // db = a^T . g
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for q in 0..k {
                        let av = a[i * k + q];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[q * n + j] += av * g[i * n + j];
                        }
                    }
                }
                vec![da, db]
            }),
            "matmul",
        )
    }

    /// Add a length-`c` bias to every row of an `[r, c]` tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = self.rows_cols()?;
        if bias.shape() != [c] {
            return Err(Error::Shape(format!(
                "add_row bias {:?} for width {c}",
                bias.shape()
            )));
        }
        let b = bias.value();
        let data = self
            .value()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, _| {
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
                vec![g.to_vec(), gb]
            }),
            "add_row",
        )
    }

    /// Numerically stabilized softmax along `axis`; each slice sums to 1.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.inner.shape.clone();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let alen = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.value();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * alen * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..alen {
                    mx = mx.max(src[base + k * inner]);
                }
                let mut denom = 0.0;
                for k in 0..alen {
                    let e = (src[base + k * inner] - mx).exp();
                    data[base + k * inner] = e;
                    denom += e;
                }
                for k in 0..alen {
                    data[base + k * inner] /= denom;
                }
            }
        }
        Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * alen * inner + i;
                        let mut dot = 0.0;
                        for k in 0..alen {
                            dot += g[base + k * inner] * y[base + k * inner];
                        }
                        for k in 0..alen {
                            let idx = base + k * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![dx]
            }),
            "softmax",
        )
    }

    /// Row-wise softmax over an `[r, c]` tensor where `mask[i*c + j] == false`
    /// entries receive exactly zero weight. A row whose mask is entirely
    /// false falls back to full attention over the row.
    pub fn masked_softmax_rows(&self, mask: &[bool]) -> Result<Tensor> {
        let (r, c) = self.rows_cols()?;
        if mask.len() != r * c {
            return Err(Error::Shape(format!(
                "mask length {} for [{r},{c}]",
                mask.len()
            )));
        }
        let src = self.value();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row_mask = &mask[i * c..(i + 1) * c];
            let any = row_mask.iter().any(|&m| m);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if !any || row_mask[j] {
                    mx = mx.max(src[i * c + j]);
                }
            }
            let mut denom = 0.0;
            for j in 0..c {
                if !any || row_mask[j] {
                    let e = (src[i * c + j] - mx).exp();
                    data[i * c + j] = e;
                    denom += e;
                }
            }
            for j in 0..c {
                data[i * c + j] /= denom;
            }
        }
        Tensor::from_op(
            data,
            vec![r, c],
            vec![self.clone()],
            // Masked entries have y = 0, so the softmax vjp already yields
            // exact zeros there.
            Box::new(move |g, y, _| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
                vec![dx]
            }),
            "masked_softmax_rows",
        )
    }

    /// Rows scaled to unit L2 norm. Errors on an exactly zero row.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols()?;
        let src = self.value();
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let mut s = 0.0;
            for j in 0..c {
                s += src[i * c + j] * src[i * c + j];
            }
            if s == 0.0 {
                return Err(Error::ZeroNorm("normalize_rows"));
            }
            norms[i] = s.sqrt();
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = src[i * c + j] / norms[i];
            }
        }
        Tensor::from_op(
            data,
            vec![r, c],
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        let idx = i * c + j;
                        dx[idx] = (g[idx] - y[idx] * dot) / norms[i];
                    }
                }
                vec![dx]
            }),
            "normalize_rows",
        )
    }

    /// Per-row layer normalization with learnable scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = self.rows_cols()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "layer_norm params {:?}/{:?} for width {c}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let src = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean: f64 = row.iter().sum::<f64>() / c as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[i * c + j] = xh;
                data[i * c + j] = gm[j] * xh + bt[j];
            }
        }
        Tensor::from_op(
            data,
            vec![r, c],
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _, p| {
                let gm = p[1];
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let idx = i * c + j;
                        let dxhat = g[idx] * gm[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat[idx];
                        dgamma[j] += g[idx] * xhat[idx];
                        dbeta[j] += g[idx];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let idx = i * c + j;
                        let dxhat = g[idx] * gm[j];
                        dx[idx] = inv_std[i]
                            * (dxhat - sum_dxhat / cf - xhat[idx] * sum_dxhat_xhat / cf);
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
            "layer_norm",
        )
    }

    /// Stable elementwise binary cross-entropy on logits:
    /// `max(z,0) - z*t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != self.numel() {
            return Err(Error::Shape(format!(
                "bce targets {} vs {}",
                targets.len(),
                self.numel()
            )));
        }
        let data: Vec<f64> = self
            .value()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let t = targets.to_vec();
        Tensor::from_op(
            data,
            self.inner.shape.clone(),
            vec![self.clone()],
            Box::new(move |g, _, p| {
                vec![g
                    .iter()
                    .zip(p[0].iter().zip(&t))
                    .map(|(g, (&z, &t))| g * (sigmoid(z) - t))
                    .collect()]
            }),
            "bce_with_logits",
        )
    }

    /// Bilinear upsampling of each row of an `[n, h*w]` tensor to `[n, oh*ow]`
    /// (corner-aligned).
    pub fn upsample_bilinear_rows(
        &self,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) -> Result<Tensor> {
        let (n, hw) = self.rows_cols()?;
        if hw != h * w {
            return Err(Error::Shape(format!("upsample rows {hw} != {h}x{w}")));
        }
        let sy = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
        let sx = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
        // Interpolation stencil is shared by every row.
        let mut stencil = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            let fy = oy as f64 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..ow {
                let fx = ox as f64 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                stencil.push((y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1, wy, wx));
            }
        }
        let src = self.value();
        let mut data = vec![0.0; n * oh * ow];
        for i in 0..n {
            let row = &src[i * hw..(i + 1) * hw];
            let out = &mut data[i * oh * ow..(i + 1) * oh * ow];
            for (k, &(i00, i01, i10, i11, wy, wx)) in stencil.iter().enumerate() {
                let top = row[i00] * (1.0 - wx) + row[i01] * wx;
                let bot = row[i10] * (1.0 - wx) + row[i11] * wx;
                out[k] = top * (1.0 - wy) + bot * wy;
            }
        }
        let stencil_b = stencil.clone();
        Tensor::from_op(
            data,
            vec![n, oh * ow],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; n * hw];
                for i in 0..n {
                    let gr = &g[i * oh * ow..(i + 1) * oh * ow];
                    let dr = &mut dx[i * hw..(i + 1) * hw];
                    for (k, &(i00, i01, i10, i11, wy, wx)) in stencil_b.iter().enumerate() {
                        let gv = gr[k];
                        dr[i00] += gv * (1.0 - wy) * (1.0 - wx);
                        dr[i01] += gv * (1.0 - wy) * wx;
                        dr[i10] += gv * wy * (1.0 - wx);
                        dr[i11] += gv * wy * wx;
                    }
                }
                vec![dx]
            }),
            "upsample_bilinear_rows",
        )
    }

    /// Bilinear sampling of an `[h, w, d]` feature map at `[n, 2]` pixel
    /// coordinates (x, y). Out-of-range coordinates clamp to the border;
    /// gradients flow to both the feature map and the coordinates (zero for
    /// the clamped ones).
    pub fn bilinear_sample(&self, coords: &Tensor) -> Result<Tensor> {
        let [h, w, d] = match self.inner.shape.as_slice() {
            &[h, w, d] => [h, w, d],
            s => return Err(Error::Shape(format!("bilinear_sample on {s:?}"))),
        };
        let (n, two) = coords.rows_cols()?;
        if two != 2 {
            return Err(Error::Shape(format!("coords [{n},{two}], expected [n,2]")));
        }
        let feat = self.value();
        let cs = coords.value();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let x = cs[i * 2].clamp(0.0, (w - 1) as f64);
            let y = cs[i * 2 + 1].clamp(0.0, (h - 1) as f64);
            let x0 = x.floor() as usize;
            let y0 = y.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = x - x0 as f64;
            let fy = y - y0 as f64;
            for c in 0..d {
                let v00 = feat[(y0 * w + x0) * d + c];
                let v01 = feat[(y0 * w + x1) * d + c];
                let v10 = feat[(y1 * w + x0) * d + c];
                let v11 = feat[(y1 * w + x1) * d + c];
                data[i * d + c] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
        Tensor::from_op(
            data,
            vec![n, d],
            vec![self.clone(), coords.clone()],
            Box::new(move |g, _, p| {
                let (feat, cs) = (p[0], p[1]);
                let mut dfeat = vec![0.0; h * w * d];
                let mut dcoords = vec![0.0; n * 2];
                for i in 0..n {
                    let rx = cs[i * 2];
                    let ry = cs[i * 2 + 1];
                    let x = rx.clamp(0.0, (w - 1) as f64);
                    let y = ry.clamp(0.0, (h - 1) as f64);
                    let x_clamped = rx != x;
                    let y_clamped = ry != y;
                    let x0 = x.floor() as usize;
                    let y0 = y.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let fx = x - x0 as f64;
                    let fy = y - y0 as f64;
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for c in 0..d {
                        let gv = g[i * d + c];
                        let v00 = feat[(y0 * w + x0) * d + c];
                        let v01 = feat[(y0 * w + x1) * d + c];
                        let v10 = feat[(y1 * w + x0) * d + c];
                        let v11 = feat[(y1 * w + x1) * d + c];
                        dfeat[(y0 * w + x0) * d + c] += gv * (1.0 - fy) * (1.0 - fx);
                        dfeat[(y0 * w + x1) * d + c] += gv * (1.0 - fy) * fx;
                        dfeat[(y1 * w + x0) * d + c] += gv * fy * (1.0 - fx);
                        dfeat[(y1 * w + x1) * d + c] += gv * fy * fx;
                        gx += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                        gy += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                    dcoords[i * 2] = if x_clamped { 0.0 } else { gx };
                    dcoords[i * 2 + 1] = if y_clamped { 0.0 } else { gy };
                }
                vec![dfeat, dcoords]
            }),
            "bilinear_sample",
        )
    }

    /// Grouped weighted sum: `samples` is `[q*p, d]`, `weights` is `[q, p]`;
    /// output row `q` is `sum_p weights[q,p] * samples[q*p + p]`.
    pub fn weighted_group_sum(samples: &Tensor, weights: &Tensor) -> Result<Tensor> {
        let (qp, d) = samples.rows_cols()?;
        let (q, p) = weights.rows_cols()?;
        if qp != q * p {
            return Err(Error::Shape(format!(
                "weighted_group_sum [{qp},{d}] vs [{q},{p}]"
            )));
        }
        let s = samples.value();
        let w = weights.value();
        let mut data = vec![0.0; q * d];
        for i in 0..q {
            for k in 0..p {
                let wv = w[i * p + k];
                let srow = &s[(i * p + k) * d..(i * p + k + 1) * d];
                let orow = &mut data[i * d..(i + 1) * d];
                for c in 0..d {
                    orow[c] += wv * srow[c];
                }
            }
        }
        Tensor::from_op(
            data,
            vec![q, d],
            vec![samples.clone(), weights.clone()],
            Box::new(move |g, _, pd| {
                let (s, w) = (pd[0], pd[1]);
                let mut ds = vec![0.0; q * p * d];
                let mut dw = vec![0.0; q * p];
                for i in 0..q {
                    let grow = &g[i * d..(i + 1) * d];
                    for k in 0..p {
                        let wv = w[i * p + k];
                        let srow = &s[(i * p + k) * d..(i * p + k + 1) * d];
                        let drow = &mut ds[(i * p + k) * d..(i * p + k + 1) * d];
                        let mut dot = 0.0;
                        for c in 0..d {
                            drow[c] = wv * grow[c];
                            dot += grow[c] * srow[c];
                        }
                        dw[i * p + k] = dot;
                    }
                }
                vec![ds, dw]
            }),
            "weighted_group_sum",
        )
    }

    /// Extract non-overlapping `p x p` patches from an `[h, w, c]` image into
    /// `[h/p * w/p, p*p*c]` rows.
    pub fn patchify(&self, p: usize) -> Result<Tensor> {
        let [h, w, c] = match self.inner.shape.as_slice() {
            &[h, w, c] => [h, w, c],
            s => return Err(Error::Shape(format!("patchify on {s:?}"))),
        };
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} not divisible by patch {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let src = self.value();
        let mut data = Vec::with_capacity(gh * gw * p * p * c);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let base = ((py * p + dy) * w + px * p + dx) * c;
                        data.extend_from_slice(&src[base..base + c]);
                    }
                }
            }
        }
        Tensor::from_op(
            data,
            vec![gh * gw, p * p * c],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; h * w * c];
                let mut k = 0;
                for py in 0..gh {
                    for px in 0..gw {
                        for dy in 0..p {
                            for ddx in 0..p {
                                let base = ((py * p + dy) * w + px * p + ddx) * c;
                                for ch in 0..c {
                                    dx[base + ch] += g[k];
                                    k += 1;
                                }
                            }
                        }
                    }
                }
                vec![dx]
            }),
            "patchify",
        )
    }

    /// 3x3 zero-padded im2col over an `[h, w, c]` map: output `[h*w, 9*c]`.
    /// A convolution is then a single matmul with a `[9*c, c_out]` kernel.
    pub fn im2col3x3(&self) -> Result<Tensor> {
        let [h, w, c] = match self.inner.shape.as_slice() {
            &[h, w, c] => [h, w, c],
            s => return Err(Error::Shape(format!("im2col3x3 on {s:?}"))),
        };
        let src = self.value();
        let mut data = vec![0.0; h * w * 9 * c];
        let mut k = 0;
        for y in 0..h as isize {
            for x in 0..w as isize {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            let base = ((yy as usize) * w + xx as usize) * c;
                            data[k..k + c].copy_from_slice(&src[base..base + c]);
                        }
                        k += c;
                    }
                }
            }
        }
        Tensor::from_op(
            data,
            vec![h * w, 9 * c],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; h * w * c];
                let mut k = 0;
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        for dy in -1..=1 {
                            for dx2 in -1..=1 {
                                let (yy, xx) = (y + dy, x + dx2);
                                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                    let base = ((yy as usize) * w + xx as usize) * c;
                                    for ch in 0..c {
                                        dx[base + ch] += g[k + ch];
                                    }
                                }
                                k += c;
                            }
                        }
                    }
                }
                vec![dx]
            }),
            "im2col3x3",
        )
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity between two 1-d tensors as a scalar graph node.
/// Errors if either vector has exactly zero norm.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 1 || a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "cosine expects equal 1-d shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let norm = |t: &Tensor| t.value().iter().map(|v| v * v).sum::<f64>();
    if norm(a) == 0.0 || norm(b) == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    let d = a.numel();
    let an = a.reshape(&[1, d])?.normalize_rows()?;
    let bn = b.reshape(&[d, 1])?;
    let bn = bn.transpose()?.normalize_rows()?.transpose()?;
    an.matmul(&bn)?.reshape(&[1])
}
