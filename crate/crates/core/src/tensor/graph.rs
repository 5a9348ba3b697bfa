use super::{numel, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Tile(Var),
    IndexSelect { x: Var, indices: Vec<usize> },
    Sum(Var),
    StraightThrough { target: Var },
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Record of executed operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and [`Graph::backward`] walks it in reverse, visiting
/// each operation once. Operations whose inputs need no gradient are stored
/// as constants, which keeps inference over frozen weights free of
/// bookkeeping.
///
/// `stop_gradient` and `straight_through` record the constant part of their
/// output. A graph built with [`Graph::replaying`] substitutes those recorded
/// constants, which turns a re-evaluation into the function the analytic
/// gradient actually differentiates (blocked paths held fixed).
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    constants: Vec<Vec<f64>>,
    replay: Option<Vec<Vec<f64>>>,
    replay_cursor: usize,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// `c = a·b + beta·c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose stop-gradient and straight-through nodes reuse the
    /// constants recorded by an earlier evaluation of the same program.
    pub fn replaying(constants: Vec<Vec<f64>>) -> Self {
        Self {
            replay: Some(constants),
            ..Self::default()
        }
    }

    /// Constants recorded by stop-gradient and straight-through nodes, in
    /// creation order.
    pub fn take_constants(&mut self) -> Vec<Vec<f64>> {
        std::mem::take(&mut self.constants)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Leaf node. The tensor's `requires_grad` flag decides whether
    /// gradients are tracked.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let value = Tensor {
            grad: None,
            requires_grad: false,
            ..tensor
        };
        self.push(value, rg, Op::Leaf)
    }

    /// Leaf node copied from a parameter tensor.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let rg = tensor.requires_grad();
        let value = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())
            .expect("tensor invariant");
        self.push(value, rg, Op::Leaf)
    }

    /// Leaf node that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn expect_rank(&self, v: Var, rank: usize, what: &str) -> Result<&[usize]> {
        let shape = self.shape(v);
        if shape.len() != rank {
            return Err(Error::dim(format!(
                "{what} expects rank {rank}, got shape {shape:?}"
            )));
        }
        Ok(shape)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.expect_rank(a, 2, "matmul")?.to_vec();
        let sb = self.expect_rank(b, 2, "matmul")?.to_vec();
        if sa[1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k, 1), self.data(b), (n, 1), 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b }))
    }

    fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.expect_rank(a, 3, "bmm")?.to_vec();
        let sb = self.expect_rank(b, 3, "bmm")?.to_vec();
        let (bk, bn) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if sa[0] != sb[0] || sa[2] != bk {
            return Err(Error::dim(format!(
                "bmm shapes incompatible: {sa:?} x {sb:?} (transposed: {trans_b})"
            )));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], bn);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                (k, 1),
                &db[i * k * n..(i + 1) * k * n],
                b_strides,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            rg,
            Op::BatchMatMul { a, b, trans_b },
        ))
    }

    /// Batched product of `[b, m, k]` and `[b, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul(a, b, false)
    }

    /// Batched product of `[b, m, k]` with the transpose of `[b, n, k]`.
    pub fn bmm_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul(a, b, true)
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    /// Adds a vector of length `n` to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [n] {
            return Err(Error::dim(format!(
                "bias {:?} does not match trailing dim of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(r, b)| r + b))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, rg, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Scale(x, c)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Tanh(x)))
    }

    /// Softmax along `axis`, shifted by the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dim(format!("softmax over empty axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("layer_norm on a scalar"))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dim(format!(
                "layer_norm scale/offset must be [{n}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (src, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = if rg {
            Op::LayerNorm { x, gamma, beta, xhat, rstd }
        } else {
            Op::Leaf
        };
        Ok(self.push(Tensor::new(shape, out)?, rg, op))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let t = Tensor::new(shape.to_vec(), self.data(x).to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!("invalid permutation {axes:?} for {shape:?}")));
        }
        let (out, out_shape) = permute_data(self.data(x), &shape, axes);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::Permute { x, axes: axes.to_vec() },
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.expect_rank(x, 2, "transpose")?;
        self.permute(x, &[1, 0])
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along {axis}: {s:?} does not match {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Concat { parts: parts.to_vec(), axis },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::Narrow { x, axis, start }))
    }

    /// Stacks `reps` copies of `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, reps: usize) -> Result<Var> {
        let mut shape = vec![reps];
        shape.extend_from_slice(self.shape(x));
        let out = self.data(x).repeat(reps);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Tile(x)))
    }

    /// Gathers entries of the leading axis.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::dim("index_select on a scalar"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("index {bad} out of range for {shape:?}")));
        }
        let width = numel(&shape[1..]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            rg,
            Op::IndexSelect { x, indices: indices.to_vec() },
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Squared Euclidean norm of all entries.
    pub fn squared_norm(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    fn next_constant(&mut self, fresh: Vec<f64>) -> Result<Vec<f64>> {
        match &self.replay {
            Some(recorded) => {
                let c = recorded
                    .get(self.replay_cursor)
                    .cloned()
                    .ok_or_else(|| Error::contract("replay ran past the recorded constants"))?;
                if c.len() != fresh.len() {
                    return Err(Error::contract("replayed constant has the wrong length"));
                }
                self.replay_cursor += 1;
                Ok(c)
            }
            None => {
                self.constants.push(fresh.clone());
                Ok(fresh)
            }
        }
    }

    /// Identity in the forward pass; contributes no gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let data = self.next_constant(self.data(x).to_vec())?;
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, false, Op::Leaf))
    }

    /// Outputs `forward_value`; backward routes the whole incoming gradient
    /// to `gradient_target` and none to `forward_value`.
    pub fn straight_through(&mut self, forward_value: Var, gradient_target: Var) -> Result<Var> {
        self.same_shape(forward_value, gradient_target, "straight_through")?;
        let offset: Vec<f64> = self
            .data(forward_value)
            .iter()
            .zip(self.data(gradient_target))
            .map(|(v, t)| v - t)
            .collect();
        let data = if self.replay.is_some() {
            let offset = self.next_constant(offset)?;
            self.data(gradient_target)
                .iter()
                .zip(&offset)
                .map(|(t, o)| t + o)
                .collect()
        } else {
            self.next_constant(offset)?;
            self.data(forward_value).to_vec()
        };
        let t = Tensor::new(self.shape(forward_value).to_vec(), data)?;
        let rg = self.rg(&[gradient_target]);
        Ok(self.push(t, rg, Op::StraightThrough { target: gradient_target }))
    }

    /// Mean softmax cross-entropy over a `[batch, classes]` logit matrix,
    /// restricted to the classes flagged in `active`. Inactive logits take
    /// no part in the loss and receive exactly zero gradient.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Result<Var> {
        let shape = self.expect_rank(logits, 2, "cross_entropy")?.to_vec();
        let (batch, classes) = (shape[0], shape[1]);
        if targets.len() != batch || active.len() != classes {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets and {} mask entries for logits {shape:?}",
                targets.len(),
                active.len()
            )));
        }
        if batch == 0 {
            return Err(Error::contract("cross_entropy over an empty batch"));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes || !active[t]) {
            return Err(Error::contract(format!("label {t} is not an active class")));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row
                .iter()
                .zip(active)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in (0..classes).filter(|&c| active[c]) {
                let e = (row[c] - max).exp();
                probs[r * classes + c] = e;
                total += e;
            }
            for c in (0..classes).filter(|&c| active[c]) {
                probs[r * classes + c] /= total;
            }
            loss += max + total.ln() - row[target];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / batch as f64),
            rg,
            Op::CrossEntropy { logits, probs, targets: targets.to_vec() },
        ))
    }

    /// Gradient of the last `backward` call with respect to `v`, if any
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Graph::grad`], with unreached nodes reported as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.numel();
        let data = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();
        let out = &nodes[idx].value;

        let add_into = |grads: &mut [Option<Vec<f64>>], v: Var, src: &[f64], c: f64| {
            let buf = accumulate(&mut grads[v.0], len(v));
            buf.iter_mut().zip(src).for_each(|(b, s)| *b += c * s);
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[1];
                if wants(a) {
                    let buf = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, (n, 1), data(b), (1, n), 1.0, buf);
                }
                if wants(b) {
                    let buf = accumulate(&mut grads[b.0], k * n);
                    gemm(k, m, n, data(a), (1, k), g, (n, 1), 1.0, buf);
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (batch, m, k) = (shape(a)[0], shape(a)[1], shape(a)[2]);
                let n = out.shape()[2];
                let (mk, kn, mn) = (m * k, k * n, m * n);
                if wants(a) {
                    let b_strides = if trans_b { (k, 1) } else { (1, n) };
                    let buf = accumulate(&mut grads[a.0], batch * mk);
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * mn..(i + 1) * mn],
                            (n, 1),
                            &data(b)[i * kn..(i + 1) * kn],
                            b_strides,
                            1.0,
                            &mut buf[i * mk..(i + 1) * mk],
                        );
                    }
                }
                if wants(b) {
                    let buf = accumulate(&mut grads[b.0], batch * kn);
                    for i in 0..batch {
                        let ga = &g[i * mn..(i + 1) * mn];
                        let av = &data(a)[i * mk..(i + 1) * mk];
                        let gb = &mut buf[i * kn..(i + 1) * kn];
                        if trans_b {
                            // d(bᵀ) = aᵀg  =>  db = gᵀa, shape [n, k]
                            gemm(n, m, k, ga, (1, n), av, (k, 1), 1.0, gb);
                        } else {
                            gemm(k, m, n, av, (1, k), ga, (n, 1), 1.0, gb);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    add_into(grads, a, g, 1.0);
                }
                if wants(b) {
                    add_into(grads, b, g, 1.0);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(grads, a, g, 1.0);
                }
                if wants(b) {
                    add_into(grads, b, g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let prod: Vec<f64> = g.iter().zip(data(b)).map(|(g, y)| g * y).collect();
                    add_into(grads, a, &prod, 1.0);
                }
                if wants(b) {
                    let prod: Vec<f64> = g.iter().zip(data(a)).map(|(g, x)| g * x).collect();
                    add_into(grads, b, &prod, 1.0);
                }
            }
            &Op::AddBias { x, bias } => {
                if wants(x) {
                    add_into(grads, x, g, 1.0);
                }
                if wants(bias) {
                    let n = len(bias);
                    let buf = accumulate(&mut grads[bias.0], n);
                    for row in g.chunks(n) {
                        buf.iter_mut().zip(row).for_each(|(b, r)| *b += r);
                    }
                }
            }
            &Op::Scale(x, c) => add_into(grads, x, g, c),
            &Op::Tanh(x) => {
                let d: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                add_into(grads, x, &d, 1.0);
            }
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), axis);
                let y = out.data();
                let buf = accumulate(&mut grads[x.0], y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            buf[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = len(*gamma);
                let gam = data(*gamma);
                if wants(*x) {
                    let buf = accumulate(&mut grads[x.0], xhat.len());
                    for (r, rs) in rstd.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let (gr, xh) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_gy = 0.0;
                        let mut mean_gyx = 0.0;
                        for j in 0..n {
                            let gy = gr[j] * gam[j];
                            mean_gy += gy;
                            mean_gyx += gy * xh[j];
                        }
                        mean_gy /= n as f64;
                        mean_gyx /= n as f64;
                        for j in 0..n {
                            buf[r * n + j] += rs * (gr[j] * gam[j] - mean_gy - xh[j] * mean_gyx);
                        }
                    }
                }
                if wants(*gamma) {
                    let buf = accumulate(&mut grads[gamma.0], n);
                    for (gr, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            buf[j] += gr[j] * xh[j];
                        }
                    }
                }
                if wants(*beta) {
                    let buf = accumulate(&mut grads[beta.0], n);
                    for gr in g.chunks(n) {
                        buf.iter_mut().zip(gr).for_each(|(b, r)| *b += r);
                    }
                }
            }
            &Op::Reshape(x) => add_into(grads, x, g, 1.0),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inverse[a] = d;
                }
                let (back, _) = permute_data(g, out.shape(), &inverse);
                add_into(grads, *x, &back, 1.0);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = shape(p)[*axis];
                    if wants(p) {
                        let buf = accumulate(&mut grads[p.0], len(p));
                        let chunk = plen * inner;
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..chunk];
                            buf[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(b, s)| *b += s);
                        }
                    }
                    offset += plen;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_split(shape(x), axis);
                let n = out.shape()[axis];
                let buf = accumulate(&mut grads[x.0], len(x));
                for o in 0..outer {
                    let dst = &mut buf[o * full * inner + start * inner..][..n * inner];
                    let src = &g[o * n * inner..(o + 1) * n * inner];
                    dst.iter_mut().zip(src).for_each(|(b, s)| *b += s);
                }
            }
            &Op::Tile(x) => {
                let n = len(x);
                let buf = accumulate(&mut grads[x.0], n);
                for chunk in g.chunks(n) {
                    buf.iter_mut().zip(chunk).for_each(|(b, s)| *b += s);
                }
            }
            Op::IndexSelect { x, indices } => {
                let width = len(*x) / shape(*x)[0].max(1);
                let buf = accumulate(&mut grads[x.0], len(*x));
                for (r, &i) in indices.iter().enumerate() {
                    buf[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(b, s)| *b += s);
                }
            }
            &Op::Sum(x) => {
                let buf = accumulate(&mut grads[x.0], len(x));
                buf.iter_mut().for_each(|b| *b += g[0]);
            }
            &Op::StraightThrough { target } => add_into(grads, target, g, 1.0),
            Op::CrossEntropy { logits, probs, targets } => {
                let classes = shape(*logits)[1];
                let scale = g[0] / targets.len() as f64;
                let buf = accumulate(&mut grads[logits.0], probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        let p = probs[r * classes + c];
                        // inactive classes have p = 0 and are never the target
                        if p != 0.0 || c == t {
                            buf[r * classes + c] += scale * (p - onehot);
                        }
                    }
                }
            }
        }
    }
}
