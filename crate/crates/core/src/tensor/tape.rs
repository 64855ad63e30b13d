use std::cell::RefCell;

use super::{broadcast_index_map, broadcast_shape, shape_err, TResult, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul { a: usize, b: usize, shared_b: bool },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    BroadcastTo(usize),
    Concat(Vec<usize>),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Gelu(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    LogSumExp(usize),
    PairwiseSqDist(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass. Drop it to release the graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Var::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.id].as_ref().map(|g| Tensor {
            shape: self.shapes[v.id].clone(),
            data: g.clone(),
        })
    }

    /// Gradient or zeros when the value did not influence the output.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|i| nodes[*i].requires_grad)
    }

    fn with<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }
}

fn elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> TResult<Tensor> {
    let shape = broadcast_shape(&a.shape, &b.shape)
        .ok_or_else(|| shape_err(op, format!("{:?} vs {:?}", a.shape, b.shape)))?;
    if a.shape == shape && b.shape == shape {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
        return Ok(Tensor { shape, data });
    }
    let ma = broadcast_index_map(&a.shape, &shape);
    let mb = broadcast_index_map(&b.shape, &shape);
    let data = ma.iter().zip(&mb).map(|(i, j)| f(a.data[*i], b.data[*j])).collect();
    Ok(Tensor { shape, data })
}

/// Sums `grad` (shaped like the broadcast output) back onto `in_shape`.
fn reduce_to(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let map = broadcast_index_map(in_shape, out_shape);
    let mut out = vec![0.0; in_shape.iter().product()];
    for (g, idx) in grad.iter().zip(map) {
        out[idx] += g;
    }
    out
}

fn last_dim(op: &'static str, t: &Tensor) -> TResult<usize> {
    t.shape
        .last()
        .copied()
        .filter(|d| *d > 0)
        .ok_or_else(|| shape_err(op, "tensor needs a nonempty last axis"))
}

fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let n = t.shape.len();
    let mut strides = vec![1usize; n];
    for ax in (0..n.saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * t.shape[ax + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|p| t.shape[*p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|p| strides[*p]).collect();
    let total = t.data.len();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut flat = 0usize;
    for _ in 0..total {
        data.push(t.data[flat]);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            flat += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor {
        shape: out_shape,
        data,
    }
}

/// `c[m x n] += a[m x k] * b[k x n]` with optional transposes expressed by strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    c: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
            if av == 0.0 {
                continue;
            }
            if trans_b {
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.with(self.id, |t| t.clone())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with(self.id, |t| t.shape.clone())
    }

    pub fn item(&self) -> f64 {
        self.tape.with(self.id, |t| t.data[0])
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> TResult<Tensor>) -> TResult<Var<'t>> {
        let v = self.tape.with(self.id, f)?;
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(v, op, rg))
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> TResult<Tensor>,
    ) -> TResult<Var<'t>> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(v, op, rg))
    }

    /// Broadcasting addition.
    pub fn add(&self, other: Var<'t>) -> TResult<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| elementwise("add", a, b, |x, y| x + y))
    }

    pub fn sub(&self, other: Var<'t>) -> TResult<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| elementwise("sub", a, b, |x, y| x - y))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: Var<'t>) -> TResult<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| elementwise("mul", a, b, |x, y| x * y))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| {
            Ok(Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().map(|x| c * x).collect(),
            })
        })
        .expect("scale is shape preserving")
    }

    /// `[..., m, k] x [k, n]` (shared right factor) or `[..., m, k] x [..., k, n]`.
    pub fn matmul(&self, other: Var<'t>) -> TResult<Var<'t>> {
        let (shared_b, out) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape.len() < 2 || b.shape.len() < 2 {
                return Err(shape_err("matmul", "operands need rank >= 2"));
            }
            let (m, k) = (a.shape[a.shape.len() - 2], a.shape[a.shape.len() - 1]);
            let (kb, n) = (b.shape[b.shape.len() - 2], b.shape[b.shape.len() - 1]);
            if k != kb {
                return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
            }
            let shared = b.shape.len() == 2;
            let batch_a = &a.shape[..a.shape.len() - 2];
            if !shared && batch_a != &b.shape[..b.shape.len() - 2] {
                return Err(shape_err("matmul", format!("batch dims {:?} x {:?}", a.shape, b.shape)));
            }
            let batches: usize = batch_a.iter().product();
            let mut data = vec![0.0; batches * m * n];
            if shared {
                gemm_acc(&mut data, &a.data, &b.data, batches * m, k, n, false, false);
            } else {
                for bt in 0..batches {
                    gemm_acc(
                        &mut data[bt * m * n..(bt + 1) * m * n],
                        &a.data[bt * m * k..(bt + 1) * m * k],
                        &b.data[bt * k * n..(bt + 1) * k * n],
                        m,
                        k,
                        n,
                        false,
                        false,
                    );
                }
            }
            let mut shape = batch_a.to_vec();
            shape.extend([m, n]);
            (shared, Tensor { shape, data })
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                shared_b,
            },
            rg,
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> TResult<Var<'t>> {
        let p = perm.to_vec();
        self.unary(Op::Permute(self.id, p.clone()), move |a| {
            let mut seen = vec![false; a.shape.len()];
            if p.len() != a.shape.len() || p.iter().any(|x| *x >= seen.len() || std::mem::replace(&mut seen[*x], true)) {
                return Err(shape_err("permute", format!("{p:?} for rank {}", a.shape.len())));
            }
            Ok(permute_data(a, &p))
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> TResult<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(shape_err("transpose_last", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> TResult<Var<'t>> {
        let s = shape.to_vec();
        self.unary(Op::Reshape(self.id), move |a| {
            if s.iter().product::<usize>() != a.data.len() {
                return Err(shape_err("reshape", format!("{:?} -> {s:?}", a.shape)));
            }
            Ok(Tensor {
                shape: s,
                data: a.data.clone(),
            })
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> TResult<Var<'t>> {
        let s = shape.to_vec();
        self.unary(Op::BroadcastTo(self.id), move |a| {
            if broadcast_shape(&a.shape, &s).as_deref() != Some(&s[..]) {
                return Err(shape_err("broadcast_to", format!("{:?} -> {s:?}", a.shape)));
            }
            let map = broadcast_index_map(&a.shape, &s);
            Ok(Tensor {
                data: map.iter().map(|i| a.data[*i]).collect(),
                shape: s,
            })
        })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(parts: &[Var<'t>]) -> TResult<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?
            .tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let out = {
            let nodes = tape.nodes.borrow();
            let lead = &nodes[ids[0]].value.shape;
            let prefix = &lead[..lead.len() - 1];
            let mut widths = Vec::new();
            for id in &ids {
                let s = &nodes[*id].value.shape;
                if s.len() != lead.len() || &s[..s.len() - 1] != prefix {
                    return Err(shape_err("concat", format!("{lead:?} vs {s:?}")));
                }
                widths.push(s[s.len() - 1]);
            }
            let total: usize = widths.iter().sum();
            let rows: usize = prefix.iter().product();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (id, w) in ids.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[*id].value.data[r * w..(r + 1) * w]);
                }
            }
            let mut shape = prefix.to_vec();
            shape.push(total);
            Tensor { shape, data }
        };
        let rg = tape.rg(&ids);
        Ok(tape.push(out, Op::Concat(ids), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> TResult<Var<'t>> {
        self.unary(Op::Softmax(self.id), |a| {
            let d = last_dim("softmax", a)?;
            let mut data = a.data.clone();
            for row in data.chunks_mut(d) {
                crate::math::softmax_in_place(row);
            }
            Ok(Tensor {
                shape: a.shape.clone(),
                data,
            })
        })
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layer_norm(&self, eps: f64) -> TResult<Var<'t>> {
        let (out, inv_std) = self.tape.with(self.id, |a| -> TResult<(Tensor, Vec<f64>)> {
            let d = last_dim("layer_norm", a)?;
            let mut data = a.data.clone();
            let mut inv = Vec::with_capacity(data.len() / d);
            for row in data.chunks_mut(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * s;
                }
                inv.push(s);
            }
            Ok((
                Tensor {
                    shape: a.shape.clone(),
                    data,
                },
                inv,
            ))
        })?;
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(out, Op::LayerNorm { x: self.id, inv_std }, rg))
    }

    /// Tanh-approximated GeLU.
    pub fn gelu(&self) -> Var<'t> {
        self.map(Op::Gelu(self.id), gelu)
    }

    pub fn relu(&self) -> Var<'t> {
        self.map(Op::Relu(self.id), |x| x.max(0.0))
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        self.unary(op, |a| {
            Ok(Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().map(|x| f(*x)).collect(),
            })
        })
        .expect("elementwise map is shape preserving")
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Ok(Tensor::scalar(a.data.iter().sum())))
            .expect("sum always succeeds")
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |a| {
            Ok(Tensor::scalar(a.data.iter().sum::<f64>() / a.data.len().max(1) as f64))
        })
        .expect("mean always succeeds")
    }

    /// `log sum exp` over the last axis, which is removed.
    pub fn logsumexp_last(&self) -> TResult<Var<'t>> {
        self.unary(Op::LogSumExp(self.id), |a| {
            let d = last_dim("logsumexp", a)?;
            let data: Vec<f64> = a.data.chunks(d).map(crate::math::log_sum_exp).collect();
            let mut shape = a.shape[..a.shape.len() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            Ok(Tensor { shape, data })
        })
    }

    /// `[..., S, d]` and `[..., K, d]` to `[..., S, K]` squared distances.
    pub fn pairwise_sq_dist(&self, other: Var<'t>) -> TResult<Var<'t>> {
        self.binary(other, Op::PairwiseSqDist(self.id, other.id), |x, y| {
            let (rx, ry) = (x.shape.len(), y.shape.len());
            if rx < 2 || rx != ry || x.shape[..rx - 2] != y.shape[..ry - 2] || x.shape[rx - 1] != y.shape[ry - 1] {
                return Err(shape_err("pairwise_sq_dist", format!("{:?} vs {:?}", x.shape, y.shape)));
            }
            let (s, k, d) = (x.shape[rx - 2], y.shape[ry - 2], x.shape[rx - 1]);
            let batches: usize = x.shape[..rx - 2].iter().product();
            let mut data = Vec::with_capacity(batches * s * k);
            for b in 0..batches {
                for i in 0..s {
                    let xi = &x.data[(b * s + i) * d..(b * s + i + 1) * d];
                    for j in 0..k {
                        let yj = &y.data[(b * k + j) * d..(b * k + j + 1) * d];
                        data.push(crate::model::squared_distance(xi, yj));
                    }
                }
            }
            let mut shape = x.shape[..rx - 2].to_vec();
            shape.extend([s, k]);
            Ok(Tensor { shape, data })
        })
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self) -> TResult<Gradients> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.numel() != 1 {
            return Err(shape_err("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);
        let acc = |grads: &mut Vec<Option<Vec<f64>>>, id: usize, g: Vec<f64>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(g) {
                        *e += v;
                    }
                }
                slot => *slot = Some(g),
            }
        };
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let ga = reduce_to(&g, &out.shape, &nodes[*a].value.shape);
                    let mut gb = reduce_to(&g, &out.shape, &nodes[*b].value.shape);
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let ma = broadcast_index_map(&va.shape, &out.shape);
                    let mb = broadcast_index_map(&vb.shape, &out.shape);
                    if nodes[*a].requires_grad {
                        let full: Vec<f64> = g.iter().zip(&mb).map(|(gv, j)| gv * vb.data[*j]).collect();
                        acc(&mut grads, *a, reduce_to(&full, &out.shape, &va.shape));
                    }
                    if nodes[*b].requires_grad {
                        let full: Vec<f64> = g.iter().zip(&ma).map(|(gv, i)| gv * va.data[*i]).collect();
                        acc(&mut grads, *b, reduce_to(&full, &out.shape, &vb.shape));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.iter().map(|v| v * c).collect()),
                Op::MatMul { a, b, shared_b } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = (va.shape[va.shape.len() - 2], va.shape[va.shape.len() - 1]);
                    let n = vb.shape[vb.shape.len() - 1];
                    let batches = va.data.len() / (m * k);
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; va.data.len()];
                        if *shared_b {
                            gemm_acc(&mut ga, &g, &vb.data, batches * m, n, k, false, true);
                        } else {
                            for bt in 0..batches {
                                gemm_acc(
                                    &mut ga[bt * m * k..(bt + 1) * m * k],
                                    &g[bt * m * n..(bt + 1) * m * n],
                                    &vb.data[bt * k * n..(bt + 1) * k * n],
                                    m,
                                    n,
                                    k,
                                    false,
                                    true,
                                );
                            }
                        }
                        acc(&mut grads, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; vb.data.len()];
                        if *shared_b {
                            gemm_acc(&mut gb, &va.data, &g, k, batches * m, n, true, false);
                        } else {
                            for bt in 0..batches {
                                gemm_acc(
                                    &mut gb[bt * k * n..(bt + 1) * k * n],
                                    &va.data[bt * m * k..(bt + 1) * m * k],
                                    &g[bt * m * n..(bt + 1) * m * n],
                                    k,
                                    m,
                                    n,
                                    true,
                                    false,
                                );
                            }
                        }
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, p) in perm.iter().enumerate() {
                        inv[*p] = i;
                    }
                    let gt = Tensor {
                        shape: out.shape.clone(),
                        data: g,
                    };
                    acc(&mut grads, *a, permute_data(&gt, &inv).data);
                }
                Op::Reshape(a) => acc(&mut grads, *a, g),
                Op::BroadcastTo(a) => {
                    acc(&mut grads, *a, reduce_to(&g, &out.shape, &nodes[*a].value.shape));
                }
                Op::Concat(ids) => {
                    let total = out.shape[out.shape.len() - 1];
                    let rows = out.data.len() / total.max(1);
                    let mut offset = 0;
                    for id in ids {
                        let s = &nodes[*id].value.shape;
                        let w = s[s.len() - 1];
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(&mut grads, *id, part);
                        offset += w;
                    }
                }
                Op::Softmax(a) => {
                    let d = out.shape[out.shape.len() - 1];
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), xr) in g.chunks(d).zip(out.data.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((x, gv), y) in xr.iter_mut().zip(gr).zip(yr) {
                            *x = y * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let d = out.shape[out.shape.len() - 1];
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((gr, yr), xr)) in g.chunks(d).zip(out.data.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, gv), y) in xr.iter_mut().zip(gr).zip(yr) {
                            *o = inv_std[r] * (gv - mg - y * mgy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(a) => {
                    let va = &nodes[*a].value;
                    acc(&mut grads, *a, g.iter().zip(&va.data).map(|(gv, x)| gv * gelu_grad(*x)).collect());
                }
                Op::Relu(a) => {
                    let va = &nodes[*a].value;
                    acc(
                        &mut grads,
                        *a,
                        g.iter().zip(&va.data).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect(),
                    );
                }
                Op::Sum(a) => acc(&mut grads, *a, vec![g[0]; nodes[*a].value.numel()]),
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel();
                    acc(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::LogSumExp(a) => {
                    let va = &nodes[*a].value;
                    let d = va.shape[va.shape.len() - 1];
                    let mut gx = Vec::with_capacity(va.data.len());
                    for (r, row) in va.data.chunks(d).enumerate() {
                        for x in row {
                            gx.push(g[r] * (x - out.data[r]).exp());
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::PairwiseSqDist(xa, ya) => {
                    let (x, y) = (&nodes[*xa].value, &nodes[*ya].value);
                    let r = x.shape.len();
                    let (s, k, d) = (x.shape[r - 2], y.shape[r - 2], x.shape[r - 1]);
                    let batches = x.data.len() / (s * d);
                    let mut gx = vec![0.0; x.data.len()];
                    let mut gy = vec![0.0; y.data.len()];
                    for b in 0..batches {
                        for i in 0..s {
                            for j in 0..k {
                                let gv = 2.0 * g[(b * s + i) * k + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c in 0..d {
                                    let diff = x.data[(b * s + i) * d + c] - y.data[(b * k + j) * d + c];
                                    gx[(b * s + i) * d + c] += gv * diff;
                                    gy[(b * k + j) * d + c] -= gv * diff;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *xa, gx);
                    acc(&mut grads, *ya, gy);
                }
            }
        }
        let shapes = nodes[..=self.id].iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central-difference check of `f` against its tape gradient.
    fn check(inputs: Vec<Tensor>, f: impl for<'a> Fn(&[Var<'a>]) -> Var<'a>) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&vars);
        let grads = out.backward().unwrap();
        let h = 1e-6;
        for (vi, x) in inputs.iter().enumerate() {
            let g = grads.get_or_zero(vars[vi]);
            for e in 0..x.numel() {
                let eval = |delta: f64| {
                    let tape = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, v)| {
                            let mut v = v.clone();
                            if k == vi {
                                v.data[e] += delta;
                            }
                            tape.param(v)
                        })
                        .collect();
                    f(&vs).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.data[e];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "input {vi} elem {e}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn matmul_values() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[17.0, 39.0]);
    }

    #[test]
    fn grad_matmul_shared_and_batched() {
        let a = t(&[2, 2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, 0.9, -1.0, 1.1, 1.2]);
        let w = t(&[3, 2], &[0.3, -0.1, 0.2, 0.5, -0.4, 0.6]);
        let bb = t(&[2, 3, 2], &[0.3, -0.1, 0.2, 0.5, -0.4, 0.6, 1.0, 0.2, -0.3, 0.4, 0.1, 0.9]);
        check(vec![a.clone(), w], |v| v[0].matmul(v[1]).unwrap().gelu().sum());
        check(vec![a, bb], |v| v[0].matmul(v[1]).unwrap().gelu().sum());
    }

    #[test]
    fn grad_broadcast_ops() {
        let a = t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let b = t(&[3], &[1.0, 2.0, -0.5]);
        let c = t(&[2, 1], &[0.7, -1.3]);
        check(vec![a.clone(), b.clone(), c.clone()], |v| {
            v[0].add(v[1]).unwrap().mul(v[2]).unwrap().sub(v[1]).unwrap().gelu().sum()
        });
        check(vec![b], |v| v[0].broadcast_to(&[4, 3]).unwrap().scale(0.5).gelu().mean());
    }

    #[test]
    fn grad_softmax_layernorm_lse() {
        let a = t(&[2, 4], &[0.1, -0.2, 0.3, 0.9, 0.4, 0.5, -0.6, 0.0]);
        let w = t(&[2, 4], &[1.0, 2.0, -0.5, 0.3, 0.2, -1.0, 0.7, 0.1]);
        check(vec![a.clone(), w.clone()], |v| v[0].softmax().unwrap().mul(v[1]).unwrap().sum());
        check(vec![a.clone(), w.clone()], |v| v[0].layer_norm(1e-5).unwrap().mul(v[1]).unwrap().sum());
        check(vec![a, w], |v| v[0].mul(v[1]).unwrap().logsumexp_last().unwrap().sum());
    }

    #[test]
    fn grad_permute_reshape_concat() {
        let a = t(&[2, 3, 2], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, 0.9, -1.0, 1.1, 1.2]);
        let w = t(&[3, 2, 2], &[1.0, 2.0, -0.5, 0.3, 0.2, -1.0, 0.7, 0.1, 0.4, 0.4, -0.2, 0.8]);
        check(vec![a.clone(), w], |v| v[0].permute(&[1, 0, 2]).unwrap().mul(v[1]).unwrap().gelu().sum());
        let b = t(&[2, 3, 1], &[0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
        check(vec![a, b], |v| {
            let c = Var::concat_last(&[v[0], v[1]]).unwrap();
            c.reshape(&[6, 3]).unwrap().gelu().softmax().unwrap().mul(c.reshape(&[6, 3]).unwrap()).unwrap().sum()
        });
    }

    #[test]
    fn grad_pairwise_and_relu() {
        let x = t(&[1, 3, 2], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let y = t(&[1, 2, 2], &[1.0, 0.2, -0.5, 0.3]);
        check(vec![x, y], |v| v[0].pairwise_sq_dist(v[1]).unwrap().relu().gelu().sum());
    }

    #[test]
    fn pairwise_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]));
        let y = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        assert_eq!(x.pairwise_sq_dist(y).unwrap().value().data(), &[25.0, 13.0]);
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(a.matmul(b).is_err());
        assert!(a.add(tape.constant(Tensor::zeros(&[2]))).is_err());
        assert!(a.reshape(&[5]).is_err());
        assert!(a.backward().is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::filled(&[2], 1.0));
        let b = tape.param(Tensor::filled(&[2], 3.0));
        let g = a.mul(b).unwrap().sum().backward().unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
