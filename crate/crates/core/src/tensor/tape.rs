use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::{axis_split, matmul_kernel, ParamId, ParamStore, Tensor, TensorError};

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Affine(usize, f64),
    Transpose(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    Embedding(usize, Vec<u32>),
    Gather(usize, Vec<u32>),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    LayerNorm(usize, f64),
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations in execution order; node ids are topologically sorted
/// by construction since an op can only reference existing nodes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn checked(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(value, op))
    }

    /// A leaf that receives gradients but is not a parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value)
    }

    /// Parameter leaf; repeated calls for the same id share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let v = self.push(store.get(id).value.clone(), Op::Param);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, TensorError> {
        let nodes = self.nodes.borrow();
        let first = parts.first().ok_or(TensorError::BadAxis {
            op: "concat",
            axis,
            shape: vec![],
        })?;
        let base = nodes[first.id].value.shape().to_vec();
        axis_split("concat", &base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split("concat", &shape, axis)?;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = &nodes[p.id].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        drop(nodes);
        self.checked("concat", Tensor { shape, data }, Op::Concat(ids, axis))
    }

    /// Reverse pass from a scalar loss. Gradients are returned, not applied.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = self
            .params
            .borrow()
            .iter()
            .filter(|(_, &node)| node <= loss.id)
            .map(|(&p, &node)| (p, node))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose2(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    let like = |shape: &[usize], data: Vec<f64>| Tensor {
        shape: shape.to_vec(),
        data,
    };
    match &node.op {
        Op::Leaf | Op::Param => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            // dA = G·Bᵀ, dB = Aᵀ·G
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                let grow = &g.data[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &bv.data[p * n..(p + 1) * n];
                    da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                let grow = &g.data[i * n..(i + 1) * n];
                for p in 0..k {
                    let aval = av.data[i * k + p];
                    if aval == 0.0 {
                        continue;
                    }
                    for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                        *d += aval * gv;
                    }
                }
            }
            accumulate(grads, a, like(&av.shape, da));
            accumulate(grads, b, like(&bv.shape, db));
        }
        &Op::Add(a, b) => {
            accumulate(grads, a, g.clone());
            accumulate(grads, b, g.clone());
        }
        &Op::Sub(a, b) => {
            accumulate(grads, a, g.clone());
            accumulate(
                grads,
                b,
                like(&g.shape, g.data.iter().map(|v| -v).collect()),
            );
        }
        &Op::Mul(a, b) => {
            accumulate(
                grads,
                a,
                like(&g.shape, map2(&g.data, &val(b).data, |x, y| x * y)),
            );
            accumulate(
                grads,
                b,
                like(&g.shape, map2(&g.data, &val(a).data, |x, y| x * y)),
            );
        }
        &Op::AddRow(a, bias) => {
            accumulate(grads, a, g.clone());
            let n = val(bias).len();
            let mut db = vec![0.0; n];
            for chunk in g.data.chunks(n) {
                for (d, v) in db.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            accumulate(grads, bias, like(&val(bias).shape, db));
        }
        &Op::MulRow(a, w) => {
            let (av, wv) = (val(a), val(w));
            let n = wv.len();
            let mut da = Vec::with_capacity(g.len());
            let mut dw = vec![0.0; n];
            for (grow, arow) in g.data.chunks(n).zip(av.data.chunks(n)) {
                for i in 0..n {
                    da.push(grow[i] * wv.data[i]);
                    dw[i] += grow[i] * arow[i];
                }
            }
            accumulate(grads, a, like(&av.shape, da));
            accumulate(grads, w, like(&wv.shape, dw));
        }
        &Op::Affine(a, scale) => {
            accumulate(
                grads,
                a,
                like(&g.shape, g.data.iter().map(|v| v * scale).collect()),
            );
        }
        &Op::Transpose(a) => {
            let (r, c) = (g.shape[0], g.shape[1]);
            accumulate(grads, a, like(&val(a).shape, transpose2(&g.data, r, c)));
        }
        Op::Concat(parts, axis) => {
            let (outer, _, inner) = axis_split("concat", &g.shape, *axis).expect("recorded shape");
            let mut offset = 0;
            let total = g.shape[*axis] * inner;
            for &p in parts {
                let pv = val(p);
                let chunk = pv.shape[*axis] * inner;
                let mut d = Vec::with_capacity(pv.len());
                for o in 0..outer {
                    let start = o * total + offset;
                    d.extend_from_slice(&g.data[start..start + chunk]);
                }
                offset += chunk;
                accumulate(grads, p, like(&pv.shape, d));
            }
        }
        &Op::Slice(a, axis, start) => {
            let av = val(a);
            let (outer, n, inner) = axis_split("slice", &av.shape, axis).expect("recorded shape");
            let len = g.shape[axis];
            let mut d = vec![0.0; av.len()];
            for o in 0..outer {
                let src = &g.data[o * len * inner..(o + 1) * len * inner];
                let dst = o * n * inner + start * inner;
                d[dst..dst + len * inner].copy_from_slice(src);
            }
            accumulate(grads, a, like(&av.shape, d));
        }
        Op::Embedding(table, ids) => {
            let tv = val(*table);
            let e = tv.shape[1];
            let mut d = vec![0.0; tv.len()];
            for (r, &id) in ids.iter().enumerate() {
                let row = &mut d[id as usize * e..(id as usize + 1) * e];
                for (x, gv) in row.iter_mut().zip(&g.data[r * e..(r + 1) * e]) {
                    *x += gv;
                }
            }
            accumulate(grads, *table, like(&tv.shape, d));
        }
        Op::Gather(a, ids) => {
            let av = val(*a);
            let v = av.shape[1];
            let mut d = vec![0.0; av.len()];
            for (r, &id) in ids.iter().enumerate() {
                d[r * v + id as usize] += g.data[r];
            }
            accumulate(grads, *a, like(&av.shape, d));
        }
        &Op::Softmax(a, axis) => {
            let y = &node.value;
            let (outer, n, inner) = axis_split("softmax", &y.shape, axis).expect("recorded shape");
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + r;
                    let dot: f64 = (0..n).map(|i| g.data[idx(i)] * y.data[idx(i)]).sum();
                    for i in 0..n {
                        d[idx(i)] = y.data[idx(i)] * (g.data[idx(i)] - dot);
                    }
                }
            }
            accumulate(grads, a, like(&y.shape, d));
        }
        &Op::LogSoftmax(a, axis) => {
            let y = &node.value;
            let (outer, n, inner) =
                axis_split("log_softmax", &y.shape, axis).expect("recorded shape");
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + r;
                    let gsum: f64 = (0..n).map(|i| g.data[idx(i)]).sum();
                    for i in 0..n {
                        d[idx(i)] = g.data[idx(i)] - y.data[idx(i)].exp() * gsum;
                    }
                }
            }
            accumulate(grads, a, like(&y.shape, d));
        }
        &Op::Sigmoid(a) => {
            let d = map2(&g.data, &node.value.data, |gv, y| gv * y * (1.0 - y));
            accumulate(grads, a, like(&g.shape, d));
        }
        &Op::Tanh(a) => {
            let d = map2(&g.data, &node.value.data, |gv, y| gv * (1.0 - y * y));
            accumulate(grads, a, like(&g.shape, d));
        }
        &Op::Relu(a) => {
            let d = map2(
                &g.data,
                &val(a).data,
                |gv, x| if x > 0.0 { gv } else { 0.0 },
            );
            accumulate(grads, a, like(&g.shape, d));
        }
        &Op::Ln(a) => {
            let d = map2(&g.data, &val(a).data, |gv, x| gv / x);
            accumulate(grads, a, like(&g.shape, d));
        }
        &Op::Clamp(a, lo, hi) => {
            let d = map2(&g.data, &val(a).data, |gv, x| {
                if (lo..=hi).contains(&x) {
                    gv
                } else {
                    0.0
                }
            });
            accumulate(grads, a, like(&g.shape, d));
        }
        &Op::LayerNorm(a, eps) => {
            let (x, y) = (val(a), &node.value);
            let n = *x.shape.last().expect("layer_norm input has an axis");
            let mut d = vec![0.0; x.len()];
            for ((xr, yr), (gr, dr)) in x
                .data
                .chunks(n)
                .zip(y.data.chunks(n))
                .zip(g.data.chunks(n).zip(d.chunks_mut(n)))
            {
                let mean = xr.iter().sum::<f64>() / n as f64;
                let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                let gmean = gr.iter().sum::<f64>() / n as f64;
                let gymean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for i in 0..n {
                    dr[i] = inv_std * (gr[i] - gmean - yr[i] * gymean);
                }
            }
            accumulate(grads, a, like(&x.shape, d));
        }
        &Op::Sum(a, axis) | &Op::Mean(a, axis) => {
            let av = val(a);
            let (outer, n, inner) = axis_split("sum", &av.shape, axis).expect("recorded shape");
            let scale = if matches!(node.op, Op::Mean(..)) {
                1.0 / n as f64
            } else {
                1.0
            };
            let mut d = vec![0.0; av.len()];
            for o in 0..outer {
                for i in 0..n {
                    for r in 0..inner {
                        d[(o * n + i) * inner + r] = g.data[o * inner + r] * scale;
                    }
                }
            }
            accumulate(grads, a, like(&av.shape, d));
        }
        &Op::SumAll(a) => {
            let av = val(a);
            accumulate(grads, a, Tensor::full(&av.shape, g.data[0]));
        }
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to any recorded value; `None` if unreachable.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradients of every reachable parameter, ordered by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|&(p, node)| self.grads[node].clone().map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(&Tensor) -> Result<Tensor, TensorError>,
        op: Op,
    ) -> Result<Var<'t>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)?
        };
        self.tape.checked(name, out, op)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor, TensorError>,
        op: Op,
    ) -> Result<Var<'t>, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        self.tape.checked(name, out, op)
    }

    fn elementwise(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, TensorError> {
        self.binary(
            other,
            name,
            |a, b| {
                if a.shape != b.shape {
                    return Err(TensorError::ShapeMismatch {
                        op: name,
                        left: a.shape.clone(),
                        right: b.shape.clone(),
                    });
                }
                Ok(Tensor {
                    shape: a.shape.clone(),
                    data: map2(&a.data, &b.data, f),
                })
            },
            op,
        )
    }

    fn map(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, TensorError> {
        self.unary(
            name,
            |a| {
                Ok(Tensor {
                    shape: a.shape.clone(),
                    data: a.data.iter().map(|&v| f(v)).collect(),
                })
            },
            op,
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(
            other,
            "matmul",
            |a, b| {
                if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                    return Err(TensorError::ShapeMismatch {
                        op: "matmul",
                        left: a.shape.clone(),
                        right: b.shape.clone(),
                    });
                }
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                Ok(Tensor {
                    shape: vec![m, n],
                    data: matmul_kernel(&a.data, &b.data, m, k, n),
                })
            },
            Op::MatMul(self.id, other.id),
        )
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a 1-D tensor to every row (last axis) of `self`.
    pub fn add_row(&self, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(
            bias,
            "add_row",
            |a, b| {
                let n = *a.shape.last().unwrap_or(&0);
                if b.shape != [n] || n == 0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "add_row",
                        left: a.shape.clone(),
                        right: b.shape.clone(),
                    });
                }
                let data = a
                    .data
                    .chunks(n)
                    .flat_map(|row| row.iter().zip(&b.data).map(|(x, y)| x + y))
                    .collect();
                Ok(Tensor {
                    shape: a.shape.clone(),
                    data,
                })
            },
            Op::AddRow(self.id, bias.id),
        )
    }

    /// Multiplies every row (last axis) of `self` elementwise by a 1-D tensor.
    pub fn mul_row(&self, weights: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(
            weights,
            "mul_row",
            |a, w| {
                let n = *a.shape.last().unwrap_or(&0);
                if w.shape != [n] || n == 0 {
                    return Err(TensorError::ShapeMismatch {
                        op: "mul_row",
                        left: a.shape.clone(),
                        right: w.shape.clone(),
                    });
                }
                let data = a
                    .data
                    .chunks(n)
                    .flat_map(|row| row.iter().zip(&w.data).map(|(x, y)| x * y))
                    .collect();
                Ok(Tensor {
                    shape: a.shape.clone(),
                    data,
                })
            },
            Op::MulRow(self.id, weights.id),
        )
    }

    /// `scale · x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Var<'t>, TensorError> {
        self.map("affine", |v| scale * v + shift, Op::Affine(self.id, scale))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>, TensorError> {
        self.affine(s, 0.0)
    }

    pub fn transpose(&self) -> Result<Var<'t>, TensorError> {
        self.unary(
            "transpose",
            |a| {
                if a.shape.len() != 2 {
                    return Err(TensorError::BadAxis {
                        op: "transpose",
                        axis: 1,
                        shape: a.shape.clone(),
                    });
                }
                Ok(Tensor {
                    shape: vec![a.shape[1], a.shape[0]],
                    data: transpose2(&a.data, a.shape[0], a.shape[1]),
                })
            },
            Op::Transpose(self.id),
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        self.unary(
            "slice",
            |a| {
                let (outer, n, inner) = axis_split("slice", &a.shape, axis)?;
                if start + len > n || len == 0 {
                    return Err(TensorError::IndexOutOfRange {
                        op: "slice",
                        index: start + len,
                        bound: n,
                    });
                }
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let s = o * n * inner + start * inner;
                    data.extend_from_slice(&a.data[s..s + len * inner]);
                }
                let mut shape = a.shape.clone();
                shape[axis] = len;
                Ok(Tensor { shape, data })
            },
            Op::Slice(self.id, axis, start),
        )
    }

    /// Rows of a `[V, E]` table selected by `ids`, giving `[ids.len(), E]`.
    pub fn embedding(&self, ids: &[u32]) -> Result<Var<'t>, TensorError> {
        self.unary(
            "embedding",
            |t| {
                if t.shape.len() != 2 {
                    return Err(TensorError::BadAxis {
                        op: "embedding",
                        axis: 1,
                        shape: t.shape.clone(),
                    });
                }
                let (v, e) = (t.shape[0], t.shape[1]);
                let mut data = Vec::with_capacity(ids.len() * e);
                for &id in ids {
                    let id = id as usize;
                    if id >= v {
                        return Err(TensorError::IndexOutOfRange {
                            op: "embedding",
                            index: id,
                            bound: v,
                        });
                    }
                    data.extend_from_slice(&t.data[id * e..(id + 1) * e]);
                }
                Ok(Tensor {
                    shape: vec![ids.len(), e],
                    data,
                })
            },
            Op::Embedding(self.id, ids.to_vec()),
        )
    }

    /// Picks `x[i, ids[i]]` from a `[n, V]` matrix, giving `[n]`.
    pub fn gather_rows(&self, ids: &[u32]) -> Result<Var<'t>, TensorError> {
        self.unary(
            "gather_rows",
            |a| {
                if a.shape.len() != 2 || a.shape[0] != ids.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "gather_rows",
                        left: a.shape.clone(),
                        right: vec![ids.len()],
                    });
                }
                let v = a.shape[1];
                let mut data = Vec::with_capacity(ids.len());
                for (r, &id) in ids.iter().enumerate() {
                    if id as usize >= v {
                        return Err(TensorError::IndexOutOfRange {
                            op: "gather_rows",
                            index: id as usize,
                            bound: v,
                        });
                    }
                    data.push(a.data[r * v + id as usize]);
                }
                Ok(Tensor::vector(data))
            },
            Op::Gather(self.id, ids.to_vec()),
        )
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.unary(
            "softmax",
            |a| softmax_forward(a, axis, false),
            Op::Softmax(self.id, axis),
        )
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.unary(
            "log_softmax",
            |a| softmax_forward(a, axis, true),
            Op::LogSoftmax(self.id, axis),
        )
    }

    pub fn sigmoid(&self) -> Result<Var<'t>, TensorError> {
        self.map(
            "sigmoid",
            |v| 1.0 / (1.0 + (-v).exp()),
            Op::Sigmoid(self.id),
        )
    }

    pub fn tanh(&self) -> Result<Var<'t>, TensorError> {
        self.map("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Result<Var<'t>, TensorError> {
        self.map("relu", |v| v.max(0.0), Op::Relu(self.id))
    }

    /// Natural logarithm.
    pub fn ln(&self) -> Result<Var<'t>, TensorError> {
        self.map("ln", f64::ln, Op::Ln(self.id))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>, TensorError> {
        self.map("clamp", |v| v.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>, TensorError> {
        self.unary(
            "layer_norm",
            |a| {
                let n = *a.shape.last().ok_or(TensorError::BadAxis {
                    op: "layer_norm",
                    axis: 0,
                    shape: vec![],
                })?;
                let mut data = Vec::with_capacity(a.len());
                for row in a.data.chunks(n) {
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    data.extend(row.iter().map(|v| (v - mean) * inv));
                }
                Ok(Tensor {
                    shape: a.shape.clone(),
                    data,
                })
            },
            Op::LayerNorm(self.id, eps),
        )
    }

    /// Sum along `axis`, removing it.
    pub fn sum(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.unary(
            "sum",
            |a| reduce_axis(a, axis, false),
            Op::Sum(self.id, axis),
        )
    }

    /// Mean along `axis`, removing it.
    pub fn mean(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.unary(
            "mean",
            |a| reduce_axis(a, axis, true),
            Op::Mean(self.id, axis),
        )
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&self) -> Result<Var<'t>, TensorError> {
        self.unary(
            "sum_all",
            |a| Ok(Tensor::scalar(a.data.iter().sum())),
            Op::SumAll(self.id),
        )
    }
}

fn softmax_forward(a: &Tensor, axis: usize, log: bool) -> Result<Tensor, TensorError> {
    let (outer, n, inner) =
        axis_split(if log { "log_softmax" } else { "softmax" }, &a.shape, axis)?;
    let mut out = vec![0.0; a.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + r;
            let max = (0..n)
                .map(|i| a.data[idx(i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..n).map(|i| (a.data[idx(i)] - max).exp()).sum();
            if log {
                let lse = max + sum.ln();
                for i in 0..n {
                    out[idx(i)] = a.data[idx(i)] - lse;
                }
            } else {
                for i in 0..n {
                    out[idx(i)] = (a.data[idx(i)] - max).exp() / sum;
                }
            }
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: out,
    })
}

fn reduce_axis(a: &Tensor, axis: usize, mean: bool) -> Result<Tensor, TensorError> {
    let (outer, n, inner) = axis_split(if mean { "mean" } else { "sum" }, &a.shape, axis)?;
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..n {
            for r in 0..inner {
                out[o * inner + r] += a.data[(o * n + i) * inner + r];
            }
        }
    }
    if mean {
        for v in &mut out {
            *v /= n as f64;
        }
    }
    let mut shape = a.shape.clone();
    shape.remove(axis);
    Ok(Tensor { shape, data: out })
}
