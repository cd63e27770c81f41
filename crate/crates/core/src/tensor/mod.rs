//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation as it is evaluated. Values are computed
//! eagerly; [`Tape::backward`] then walks the recorded nodes in reverse
//! insertion order, which is a reverse topological order because a node can
//! only reference nodes created before it. Each node is visited once and
//! gradients from shared subexpressions accumulate.
//!
//! ```
//! use stack_nmn::tensor::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&[2], vec![2.0, -1.0]);
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), vec![4.0, -2.0]);
//! ```

mod adam;
mod broadcast;
pub mod lstm;
pub mod params;

pub use adam::{AdamConfig, AdamState};
pub use lstm::{bilstm_encode, lstm_cell, LstmIds};
pub use params::{xavier_uniform, Bound, Param, ParamId, ParamStore};

use std::cell::RefCell;

use crate::error::{Error, Result};
use broadcast::Broadcast;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Minimum,
    Maximum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftDirection {
    /// `out[i] = p[i - 1]`, zero at row 0.
    Up,
    /// `out[i] = p[i + 1]`, zero at the last row.
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Elu,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        map: Broadcast,
    },
    Affine {
        a: usize,
        scale: f64,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape {
        a: usize,
    },
    Shift {
        a: usize,
        dir: ShiftDirection,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        a: usize,
        len: usize,
    },
    AttendedSum {
        a: usize,
        x: usize,
        cells: usize,
        depth: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Sum {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Slice {
        a: usize,
        start: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
        width: usize,
    },
    SmoothL1 {
        a: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recording of a computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input.
    pub fn leaf(&self, shape: &[usize], values: Vec<f64>) -> Tensor {
        self.input(shape, values, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> Tensor {
        self.input(shape, values, false)
    }

    pub fn input(&self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            numel(shape),
            values.len(),
            "shape {shape:?} does not match {} values",
            values.len()
        );
        self.push(shape.to_vec(), values, requires_grad, Op::Leaf)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        self.constant(shape, vec![0.0; numel(shape)])
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Tensor(nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn shape(&self, t: Tensor) -> Vec<usize> {
        self.nodes.borrow()[t.0].shape.clone()
    }

    pub fn numel(&self, t: Tensor) -> usize {
        self.nodes.borrow()[t.0].value.len()
    }

    pub fn value(&self, t: Tensor) -> Vec<f64> {
        self.nodes.borrow()[t.0].value.clone()
    }

    /// Runs `f` against the node's values without copying them.
    pub fn with_value<R>(&self, t: Tensor, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.nodes.borrow()[t.0].value)
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        let nodes = self.nodes.borrow();
        let v = &nodes[t.0].value;
        assert_eq!(v.len(), 1, "scalar() on a tensor with {} elements", v.len());
        v[0]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes.borrow()[t.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, t: Tensor) -> Option<Vec<f64>> {
        self.nodes.borrow()[t.0].grad.clone()
    }

    // ---------------------------------------------------------------- ops

    pub fn binary(&self, kind: BinaryKind, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (shape, value, map) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let map = Broadcast::new(&na.shape, &nb.shape).ok_or_else(|| {
                Error::shape(
                    "elementwise",
                    format!("cannot broadcast {:?} with {:?}", na.shape, nb.shape),
                )
            })?;
            let f: fn(f64, f64) -> f64 = match kind {
                BinaryKind::Add => |x, y| x + y,
                BinaryKind::Sub => |x, y| x - y,
                BinaryKind::Mul => |x, y| x * y,
                BinaryKind::Minimum => |x, y| if x <= y { x } else { y },
                BinaryKind::Maximum => |x, y| if x >= y { x } else { y },
            };
            let value = map.apply(&na.value, &nb.value, f);
            (map.shape().to_vec(), value, map)
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                map,
            },
        ))
    }

    pub fn add(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Minimum, a, b)
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Maximum, a, b)
    }

    /// `scale * a + shift`.
    pub fn affine(&self, a: Tensor, scale: f64, shift: f64) -> Tensor {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (
                n.shape.clone(),
                n.value.iter().map(|v| scale * v + shift).collect(),
            )
        };
        let rg = self.needs_grad(&[a.0]);
        self.push(shape, value, rg, Op::Affine { a: a.0, scale })
    }

    pub fn scale(&self, a: Tensor, factor: f64) -> Tensor {
        self.affine(a, factor, 0.0)
    }

    /// Matrix product. A 1-d left operand is treated as a row vector and the
    /// result is then 1-d as well.
    pub fn matmul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (shape, value, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (m, k, row_vec) = match na.shape.as_slice() {
                [k] => (1, *k, true),
                [m, k] => (*m, *k, false),
                s => return Err(Error::shape("matmul", format!("left operand has shape {s:?}"))),
            };
            let n = match nb.shape.as_slice() {
                [kb, n] if *kb == k => *n,
                s => {
                    return Err(Error::shape(
                        "matmul",
                        format!("inner dimensions disagree: {:?} x {s:?}", na.shape),
                    ))
                }
            };
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for kk in 0..k {
                    let av = na.value[i * k + kk];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &nb.value[kk * n..(kk + 1) * n];
                    for (o, bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            let shape = if row_vec { vec![n] } else { vec![m, n] };
            (shape, out, m, k, n)
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
        ))
    }

    pub fn reshape(&self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        let value = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if numel(shape) != n.value.len() {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} -> {shape:?}", n.shape),
                ));
            }
            n.value.clone()
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape { a: a.0 }))
    }

    /// Per-cell affine map: `x[H, W, Din] · w[Din, Dout] + b[Dout]`.
    ///
    /// Any number of leading spatial axes is accepted; only the last axis is
    /// contracted.
    pub fn conv_1x1(&self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (din, dout) = match ws.as_slice() {
            [i, o] => (*i, *o),
            s => return Err(Error::shape("conv_1x1", format!("weight shape {s:?}"))),
        };
        if xs.last() != Some(&din) {
            return Err(Error::shape(
                "conv_1x1",
                format!("input channels {xs:?} vs weight {ws:?}"),
            ));
        }
        if self.shape(b) != [dout] {
            return Err(Error::shape(
                "conv_1x1",
                format!("bias shape {:?}, expected [{dout}]", self.shape(b)),
            ));
        }
        let cells = numel(&xs[..xs.len() - 1]);
        let flat = self.reshape(x, &[cells, din])?;
        let y = self.matmul(flat, w)?;
        let y = self.add(y, b)?;
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(dout);
        self.reshape(y, &out_shape)
    }

    /// Zero-padded one-step shift of a 1-d tensor.
    pub fn shift_1d(&self, p: Tensor, dir: ShiftDirection) -> Result<Tensor> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[p.0];
            if n.shape.len() != 1 || n.shape[0] == 0 {
                return Err(Error::shape("shift_1d", format!("shape {:?}", n.shape)));
            }
            let l = n.shape[0];
            let mut out = vec![0.0; l];
            match dir {
                ShiftDirection::Up => out[1..].copy_from_slice(&n.value[..l - 1]),
                ShiftDirection::Down => out[..l - 1].copy_from_slice(&n.value[1..]),
            }
            (n.shape.clone(), out)
        };
        let rg = self.needs_grad(&[p.0]);
        Ok(self.push(shape, value, rg, Op::Shift { a: p.0, dir }))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, v: Tensor, axis: usize) -> Result<Tensor> {
        let (shape, value, outer, len, inner) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[v.0];
            if axis >= n.shape.len() || n.shape[axis] == 0 {
                return Err(Error::shape(
                    "softmax",
                    format!("axis {axis} of shape {:?}", n.shape),
                ));
            }
            let outer = numel(&n.shape[..axis]);
            let len = n.shape[axis];
            let inner = numel(&n.shape[axis + 1..]);
            let mut out = vec![0.0; n.value.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len)
                        .map(|j| n.value[idx(j)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    if !max.is_finite() {
                        return Err(Error::Input(format!("softmax over non-finite input (max {max})")));
                    }
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (n.value[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        out[idx(j)] /= total;
                    }
                }
            }
            (n.shape.clone(), out, outer, len, inner)
        };
        let rg = self.needs_grad(&[v.0]);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Softmax {
                a: v.0,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, v: Tensor) -> Result<Tensor> {
        let (shape, value, len) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[v.0];
            let len = match n.shape.last() {
                Some(&l) if l > 0 => l,
                _ => return Err(Error::shape("log_softmax", format!("shape {:?}", n.shape))),
            };
            let mut out = vec![0.0; n.value.len()];
            for (src, dst) in n.value.chunks(len).zip(out.chunks_mut(len)) {
                let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return Err(Error::Input(format!("log_softmax over non-finite input (max {max})")));
                }
                let lse = max + src.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s - lse;
                }
            }
            (n.shape.clone(), out, len)
        };
        let rg = self.needs_grad(&[v.0]);
        Ok(self.push(shape, value, rg, Op::LogSoftmax { a: v.0, len }))
    }

    /// `out[d] = Σ_cells a[cell] · x[cell, d]` where `x` has the shape of `a`
    /// plus one trailing channel axis.
    pub fn attended_sum(&self, a: Tensor, x: Tensor) -> Result<Tensor> {
        let (value, cells, depth) = {
            let nodes = self.nodes.borrow();
            let (na, nx) = (&nodes[a.0], &nodes[x.0]);
            if nx.shape.len() != na.shape.len() + 1 || nx.shape[..na.shape.len()] != na.shape[..] {
                return Err(Error::shape(
                    "attended_sum",
                    format!("attention {:?} vs features {:?}", na.shape, nx.shape),
                ));
            }
            let depth = *nx.shape.last().unwrap();
            let cells = na.value.len();
            let mut out = vec![0.0; depth];
            for (c, &w) in na.value.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, xv) in out.iter_mut().zip(&nx.value[c * depth..(c + 1) * depth]) {
                    *o += w * xv;
                }
            }
            (out, cells, depth)
        };
        let rg = self.needs_grad(&[a.0, x.0]);
        Ok(self.push(
            vec![depth],
            value,
            rg,
            Op::AttendedSum {
                a: a.0,
                x: x.0,
                cells,
                depth,
            },
        ))
    }

    fn unary(&self, kind: UnaryKind, a: Tensor) -> Tensor {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let f: fn(f64) -> f64 = match kind {
                UnaryKind::Tanh => f64::tanh,
                UnaryKind::Sigmoid => |x| {
                    if x >= 0.0 {
                        1.0 / (1.0 + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (1.0 + e)
                    }
                },
                UnaryKind::Elu => |x| if x > 0.0 { x } else { x.exp_m1() },
                UnaryKind::Exp => f64::exp,
            };
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        let rg = self.needs_grad(&[a.0]);
        self.push(shape, value, rg, Op::Unary { kind, a: a.0 })
    }

    pub fn tanh(&self, a: Tensor) -> Tensor {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&self, a: Tensor) -> Tensor {
        self.unary(UnaryKind::Sigmoid, a)
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(&self, a: Tensor) -> Tensor {
        self.unary(UnaryKind::Elu, a)
    }

    pub fn exp(&self, a: Tensor) -> Tensor {
        self.unary(UnaryKind::Exp, a)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Tensor) -> Tensor {
        let total = self.with_value(a, |v| v.iter().sum::<f64>());
        let rg = self.needs_grad(&[a.0]);
        self.push(vec![1], vec![total], rg, Op::Sum { a: a.0 })
    }

    /// Concatenates the flattened parts and gives the result `shape`.
    pub fn concat_as(&self, parts: &[Tensor], shape: &[usize]) -> Result<Tensor> {
        let value = {
            let nodes = self.nodes.borrow();
            let mut v = Vec::new();
            for p in parts {
                v.extend_from_slice(&nodes[p.0].value);
            }
            v
        };
        if value.len() != numel(shape) {
            return Err(Error::shape(
                "concat",
                format!("{} values into shape {shape:?}", value.len()),
            ));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(shape.to_vec(), value, rg, Op::Concat { parts: ids }))
    }

    /// Concatenation of 1-d tensors.
    pub fn concat(&self, parts: &[Tensor]) -> Result<Tensor> {
        let total = parts.iter().map(|&p| self.numel(p)).sum::<usize>();
        self.concat_as(parts, &[total])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack_rows(&self, rows: &[Tensor]) -> Result<Tensor> {
        let first = rows
            .first()
            .ok_or_else(|| Error::shape("stack_rows", "no rows"))?;
        let row_shape = self.shape(*first);
        if rows.iter().any(|&r| self.shape(r) != row_shape) {
            return Err(Error::shape("stack_rows", "rows differ in shape"));
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&row_shape);
        self.concat_as(rows, &shape)
    }

    /// Flat range `[start, start + numel(shape))` of `a`, reshaped to `shape`.
    pub fn slice_as(&self, a: Tensor, start: usize, shape: &[usize]) -> Result<Tensor> {
        let len = numel(shape);
        let value = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if start + len > n.value.len() {
                return Err(Error::shape(
                    "slice",
                    format!("[{start}, {}) of {:?}", start + len, n.shape),
                ));
            }
            n.value[start..start + len].to_vec()
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(shape.to_vec(), value, rg, Op::Slice { a: a.0, start }))
    }

    /// Sub-range of a 1-d tensor.
    pub fn slice(&self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.slice_as(a, start, &[len])
    }

    /// Row `i` of a 2-d tensor.
    pub fn row(&self, a: Tensor, i: usize) -> Result<Tensor> {
        let shape = self.shape(a);
        match shape.as_slice() {
            [rows, cols] if i < *rows => self.slice_as(a, i * cols, &[*cols]),
            _ => Err(Error::shape("row", format!("row {i} of {shape:?}"))),
        }
    }

    /// Single element as a `[1]` tensor.
    pub fn pick(&self, a: Tensor, index: usize) -> Result<Tensor> {
        self.slice_as(a, index, &[1])
    }

    /// Rows of a `[V, width]` table, giving `[ids.len(), width]`.
    pub fn gather_rows(&self, table: Tensor, ids: &[usize]) -> Result<Tensor> {
        let (value, width) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[table.0];
            let (rows, width) = match n.shape.as_slice() {
                [r, w] => (*r, *w),
                s => return Err(Error::shape("gather_rows", format!("table shape {s:?}"))),
            };
            let mut v = Vec::with_capacity(ids.len() * width);
            for &id in ids {
                if id >= rows {
                    return Err(Error::Index {
                        what: "gather_rows",
                        index: id,
                        limit: rows,
                    });
                }
                v.extend_from_slice(&n.value[id * width..(id + 1) * width]);
            }
            (v, width)
        };
        let rg = self.needs_grad(&[table.0]);
        Ok(self.push(
            vec![ids.len(), width],
            value,
            rg,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
                width,
            },
        ))
    }

    /// Elementwise smooth-L1 (Huber with unit threshold).
    pub fn smooth_l1(&self, a: Tensor) -> Tensor {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let v = n
                .value
                .iter()
                .map(|&x| {
                    if x.abs() < 1.0 {
                        0.5 * x * x
                    } else {
                        x.abs() - 0.5
                    }
                })
                .collect();
            (n.shape.clone(), v)
        };
        let rg = self.needs_grad(&[a.0]);
        self.push(shape, value, rg, Op::SmoothL1 { a: a.0 })
    }

    /// `-log softmax(logits)[target]`, shape `[1]`.
    pub fn cross_entropy(&self, logits: Tensor, target: usize) -> Result<Tensor> {
        let len = self.numel(logits);
        if target >= len {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: target,
                limit: len,
            });
        }
        let lp = self.log_softmax(logits)?;
        let picked = self.pick(lp, target)?;
        Ok(self.scale(picked, -1.0))
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from `root`, seeding its gradient with ones.
    ///
    /// Gradients from a previous call are discarded.
    pub fn backward(&self, root: Tensor) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root.0 >= nodes.len() {
            return Err(Error::Index {
                what: "backward root",
                index: root.0,
                limit: nodes.len(),
            });
        }
        grads[root.0] = Some(vec![1.0; nodes[root.0].value.len()]);
        let nodes_ref: &[Node] = &nodes;
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes_ref[id];
            if node.requires_grad {
                propagate(nodes_ref, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (n, g) in nodes.iter_mut().zip(grads) {
            n.grad = if n.requires_grad { g } else { None };
        }
        Ok(())
    }
}

fn accumulate<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, map } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            // Local derivatives wrt each operand, per output element.
            let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                BinaryKind::Add => (g.to_vec(), g.to_vec()),
                BinaryKind::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                BinaryKind::Mul => {
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    map.for_each(|o, ia, ib| {
                        da[o] = g[o] * bv[ib];
                        db[o] = g[o] * av[ia];
                    });
                    (da, db)
                }
                BinaryKind::Minimum | BinaryKind::Maximum => {
                    let min = *kind == BinaryKind::Minimum;
                    let mut da = vec![0.0; g.len()];
                    let mut db = vec![0.0; g.len()];
                    map.for_each(|o, ia, ib| {
                        let first = if min { av[ia] <= bv[ib] } else { av[ia] >= bv[ib] };
                        if first {
                            da[o] = g[o];
                        } else {
                            db[o] = g[o];
                        }
                    });
                    (da, db)
                }
            };
            if let Some(ga) = accumulate(nodes, grads, *a) {
                map.reduce_a(&da, ga);
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                map.reduce_b(&db, gb);
            }
        }
        Op::Affine { a, scale } => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += scale * y;
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &bv[kk * n..(kk + 1) * n];
                        ga[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let av_ik = av[i * k + kk];
                        if av_ik == 0.0 {
                            continue;
                        }
                        for (x, y) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                            *x += av_ik * y;
                        }
                    }
                }
            }
        }
        Op::Reshape { a } | Op::Sum { a } => {
            let is_sum = matches!(node.op, Op::Sum { .. });
            if let Some(ga) = accumulate(nodes, grads, *a) {
                if is_sum {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                } else {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
        Op::Shift { a, dir } => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                let l = g.len();
                match dir {
                    ShiftDirection::Up => {
                        for i in 0..l - 1 {
                            ga[i] += g[i + 1];
                        }
                    }
                    ShiftDirection::Down => {
                        for i in 1..l {
                            ga[i] += g[i - 1];
                        }
                    }
                }
            }
        }
        Op::Softmax {
            a,
            outer,
            len,
            inner,
        } => {
            let y = &node.value;
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*len {
                            ga[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { a, len } => {
            let y = &node.value;
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for ((gy, yy), gx) in g.chunks(*len).zip(y.chunks(*len)).zip(ga.chunks_mut(*len)) {
                    let total: f64 = gy.iter().sum();
                    for j in 0..*len {
                        gx[j] += gy[j] - yy[j].exp() * total;
                    }
                }
            }
        }
        Op::AttendedSum { a, x, cells, depth } => {
            let (av, xv) = (&nodes[*a].value, &nodes[*x].value);
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for c in 0..*cells {
                    ga[c] += xv[c * depth..(c + 1) * depth]
                        .iter()
                        .zip(g)
                        .map(|(p, q)| p * q)
                        .sum::<f64>();
                }
            }
            if let Some(gx) = accumulate(nodes, grads, *x) {
                for c in 0..*cells {
                    let w = av[c];
                    for (p, q) in gx[c * depth..(c + 1) * depth].iter_mut().zip(g) {
                        *p += w * q;
                    }
                }
            }
        }
        Op::Unary { kind, a } => {
            let (xv, y) = (&nodes[*a].value, &node.value);
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for i in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Tanh => 1.0 - y[i] * y[i],
                        UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                        UnaryKind::Elu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                y[i] + 1.0
                            }
                        }
                        UnaryKind::Exp => y[i],
                    };
                    ga[i] += g[i] * d;
                }
            }
        }
        Op::Concat { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = accumulate(nodes, grads, p) {
                    for (x, y) in gp.iter_mut().zip(&g[offset..offset + len]) {
                        *x += y;
                    }
                }
                offset += len;
            }
        }
        Op::Slice { a, start } => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for (x, y) in ga[*start..*start + g.len()].iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        Op::Gather { table, ids, width } => {
            if let Some(gt) = accumulate(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for (x, y) in gt[id * width..(id + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                    {
                        *x += y;
                    }
                }
            }
        }
        Op::SmoothL1 { a } => {
            let xv = &nodes[*a].value;
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for i in 0..g.len() {
                    let d = if xv[i].abs() < 1.0 { xv[i] } else { xv[i].signum() };
                    ga[i] += g[i] * d;
                }
            }
        }
    }
}
