use std::sync::Arc;

use super::kernels::{axis_split, gemm_acc, permute, transpose2};
use super::Tensor;
use crate::dist::dmol;
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};

/// Value written into masked attention logits.
pub const MASK_FILL: f64 = -1e9;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a learned parameter inside a model's parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { trans_b: bool },
    Add,
    Mul,
    AddBias,
    Scale(T),
    MulConst(Arc<Vec<T>>),
    Relu,
    Softmax { axis: usize },
    LayerNorm { eps: T },
    Embedding { ids: Vec<usize> },
    GatherRows { idx: Arc<Vec<Option<usize>>> },
    ConcatRows,
    Reshape,
    Permute { axes: Vec<usize> },
    MaskedFill { mask: Arc<Vec<bool>>, value: T },
    ReduceSum { axis: usize },
    SumAll,
    CategoricalNll { targets: Vec<u8> },
    DmolNll { targets: Vec<[u8; 3]>, mixtures: usize },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    param: Option<ParamId>,
}

/// Ordered record of primitive operations. Inputs always precede the
/// operations that consume them, so the record is topologically sorted.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
}

/// Reverse-mode gradients for every node reachable from a loss.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradient with respect to a registered parameter.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|&(_, v)| self.wrt(v))
    }

    /// All registered parameters with their gradients, in registration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Tensor<T>)> + '_ {
        self.params.iter().map(|&(p, v)| (p, self.wrt(v)))
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every branch taken by a piecewise op: ReLU input signs and
    /// DMOL log-scale clamps. Two evaluations with equal signatures lie on
    /// the same smooth piece of the recorded function.
    pub fn piece_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    for &x in self.nodes[node.inputs[0].0].value.data() {
                        (x > T::zero()).hash(&mut h);
                    }
                }
                Op::DmolNll { mixtures, .. } => {
                    let min: T = T::from_f64_lossy(crate::dist::dmol::LOG_SCALE_MIN);
                    let k = *mixtures;
                    let params = self.nodes[node.inputs[0].0].value.data();
                    for row in params.chunks(10 * k) {
                        for &ls in &row[4 * k..7 * k] {
                            (ls > min).hash(&mut h);
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that does not receive a parameter registration.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: t,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf registered as a learned parameter.
    pub fn param(&mut self, id: ParamId, t: &Tensor<T>) -> Var {
        let v = self.constant(t.clone());
        self.nodes[v.0].param = Some(id);
        self.params.push((id, v));
        v
    }

    pub fn param_vars(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            eval(&op, &vals)?
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Batched matrix product `a[.., m, k] · b[.., k, n]`. `b` may be rank 2,
    /// in which case it is shared across the leading extents of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul { trans_b: false }, vec![a, b])
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul { trans_b: true }, vec![a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, vec![a, b])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, vec![a, b])
    }

    /// `x[.., d] + bias[d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias, vec![x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.push(Op::Scale(c), vec![x])
    }

    /// Elementwise product with a constant that receives no gradient.
    pub fn mul_const(&mut self, x: Var, c: Arc<Vec<T>>) -> Result<Var> {
        self.push(Op::MulConst(c), vec![x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu, vec![x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax { axis }, vec![x])
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.push(Op::LayerNorm { eps }, vec![x, gain, bias])
    }

    /// Row lookup `table[ids[i]]`, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Embedding { ids: ids.to_vec() }, vec![table])
    }

    /// Gathers rows of `x` viewed as `[rows, d]`; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<Option<usize>>>) -> Result<Var> {
        self.push(Op::GatherRows { idx }, vec![x])
    }

    /// Stacks `a[ra, d]` on top of `b[rb, d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatRows, vec![a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let cur = self.shape(x);
        if n != cur.iter().product::<usize>() || shape.iter().any(|&e| e == 0) {
            return Err(mismatch("reshape", cur, shape));
        }
        let v = self.push(Op::Reshape, vec![x])?;
        self.nodes[v.0].value.shape = shape.to_vec();
        Ok(v)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.push(Op::Permute { axes: axes.to_vec() }, vec![x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(invalid("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Replaces entries where `mask` is true with `value`. The mask covers
    /// either the full shape or a suffix of it, repeated over leading axes.
    pub fn masked_fill(&mut self, x: Var, mask: Arc<Vec<bool>>, value: T) -> Result<Var> {
        self.push(Op::MaskedFill { mask, value }, vec![x])
    }

    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::ReduceSum { axis }, vec![x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SumAll, vec![x])
    }

    /// Summed negative log-likelihood of `targets` under `softmax(logits)`
    /// with `logits: [n, 256]`.
    pub fn categorical_nll(&mut self, logits: Var, targets: &[u8]) -> Result<Var> {
        self.push(
            Op::CategoricalNll {
                targets: targets.to_vec(),
            },
            vec![logits],
        )
    }

    /// Summed negative log-likelihood of RGB `targets` under discretized
    /// logistic mixtures parameterised by `params: [n, 10 * mixtures]`.
    pub fn dmol_nll(&mut self, params: Var, targets: &[[u8; 3]], mixtures: usize) -> Result<Var> {
        self.push(
            Op::DmolNll {
                targets: targets.to_vec(),
                mixtures,
            },
            vec![params],
        )
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep: T = lit(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        self.mul_const(x, Arc::new(mask))
    }

    /// Recomputes every node from its inputs, substituting the given leaf
    /// values. Returns the recomputed values in node order.
    pub fn replay(&self, leaves: &[(Var, Tensor<T>)]) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match node.op {
                Op::Leaf => leaves
                    .iter()
                    .find(|(var, _)| var.0 == i)
                    .map(|(_, t)| t.clone())
                    .unwrap_or_else(|| node.value.clone()),
                _ => {
                    let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &values[v.0]).collect();
                    let mut out = eval(&node.op, &ins)?;
                    if matches!(node.op, Op::Reshape) {
                        out.shape = node.value.shape.clone();
                    }
                    out
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gins = vjp(&node.op, &ins, &node.value, &gout);
                for (input, gin) in node.inputs.iter().zip(gins) {
                    let Some(gin) = gin else { continue };
                    match &mut grads[input.0] {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&gin) {
                                *a += *g;
                            }
                        }
                        slot @ None => *slot = Some(gin),
                    }
                }
            }
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            params: self.params.clone(),
        })
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(mismatch("matmul", a, b));
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let shared_b = lead_b.is_empty();
    if !shared_b && lead_a != lead_b {
        return Err(mismatch("matmul", a, b));
    }
    Ok(MatmulDims {
        batch: lead_a.iter().product(),
        m,
        k,
        n,
        shared_b,
    })
}

fn eval<T: Scalar>(op: &Op<T>, ins: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul { trans_b } => {
            let (a, b) = (ins[0], ins[1]);
            let d = matmul_dims(a.shape(), b.shape(), *trans_b)?;
            let mut out = vec![T::zero(); d.batch * d.m * d.n];
            let bsz = d.k * d.n;
            let shared_t;
            let b_rm: &[T] = if *trans_b && d.shared_b {
                shared_t = transpose2(b.data(), d.n, d.k);
                &shared_t
            } else {
                b.data()
            };
            for bi in 0..d.batch {
                let a_blk = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
                let c_blk = &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                if d.shared_b {
                    gemm_acc(d.m, d.k, d.n, a_blk, d.k, 1, b_rm, c_blk);
                } else if *trans_b {
                    let bt = transpose2(&b.data()[bi * bsz..(bi + 1) * bsz], d.n, d.k);
                    gemm_acc(d.m, d.k, d.n, a_blk, d.k, 1, &bt, c_blk);
                } else {
                    gemm_acc(d.m, d.k, d.n, a_blk, d.k, 1, &b_rm[bi * bsz..(bi + 1) * bsz], c_blk);
                }
            }
            let mut shape = a.shape()[..a.rank() - 2].to_vec();
            shape.extend([d.m, d.n]);
            Tensor { shape, data: out }
        }
        Op::Add | Op::Mul => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(if matches!(op, Op::Add) { "add" } else { "mul" }, a.shape(), b.shape()));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| if matches!(op, Op::Add) { x + y } else { x * y })
                .collect();
            Tensor {
                shape: a.shape().to_vec(),
                data,
            }
        }
        Op::AddBias => {
            let (x, b) = (ins[0], ins[1]);
            let d = last_dim(x.shape());
            if b.len() != d || x.rank() == 0 {
                return Err(mismatch("add_bias", x.shape(), b.shape()));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(d) {
                for (v, &bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            Tensor {
                shape: x.shape().to_vec(),
                data,
            }
        }
        Op::Scale(c) => ins[0].map(|v| v * *c),
        Op::MulConst(c) => {
            let x = ins[0];
            if c.len() != x.len() {
                return Err(mismatch("mul_const", x.shape(), &[c.len()]));
            }
            Tensor {
                shape: x.shape().to_vec(),
                data: x.data().iter().zip(c.iter()).map(|(&a, &b)| a * b).collect(),
            }
        }
        Op::Relu => ins[0].map(|v| if v > T::zero() { v } else { T::zero() }),
        Op::Softmax { axis } => {
            let x = ins[0];
            if *axis >= x.rank() {
                return Err(invalid(format!("softmax axis {axis} for rank {}", x.rank())));
            }
            if x.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("softmax"));
            }
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut data = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = T::neg_infinity();
                    for j in 0..len {
                        mx = mx.max(data[base + j * inner]);
                    }
                    let mut s = T::zero();
                    for j in 0..len {
                        let e = (data[base + j * inner] - mx).exp();
                        data[base + j * inner] = e;
                        s += e;
                    }
                    for j in 0..len {
                        data[base + j * inner] /= s;
                    }
                }
            }
            Tensor {
                shape: x.shape().to_vec(),
                data,
            }
        }
        Op::LayerNorm { eps } => {
            let (x, g, b) = (ins[0], ins[1], ins[2]);
            let d = last_dim(x.shape());
            if g.len() != d || b.len() != d || x.rank() == 0 {
                return Err(mismatch("layernorm", x.shape(), g.shape()));
            }
            let mut data = Vec::with_capacity(x.len());
            for row in x.data().chunks(d) {
                let (mean, rstd) = row_stats(row, *eps);
                for j in 0..d {
                    data.push((row[j] - mean) * rstd * g.data()[j] + b.data()[j]);
                }
            }
            Tensor {
                shape: x.shape().to_vec(),
                data,
            }
        }
        Op::Embedding { ids } => {
            let t = ins[0];
            if t.rank() != 2 {
                return Err(invalid("embedding table must be rank 2"));
            }
            let (v, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::IndexOutOfRange {
                        what: "embedding",
                        index: id,
                        limit: v,
                    });
                }
                data.extend_from_slice(t.row(id));
            }
            if ids.is_empty() {
                return Err(invalid("embedding lookup with no ids"));
            }
            Tensor {
                shape: vec![ids.len(), d],
                data,
            }
        }
        Op::GatherRows { idx } => {
            let x = ins[0];
            let d = last_dim(x.shape());
            let rows = x.len() / d;
            let mut data = Vec::with_capacity(idx.len() * d);
            for ix in idx.iter() {
                match *ix {
                    Some(r) if r < rows => data.extend_from_slice(&x.data()[r * d..(r + 1) * d]),
                    Some(r) => {
                        return Err(Error::IndexOutOfRange {
                            what: "gather_rows",
                            index: r,
                            limit: rows,
                        })
                    }
                    None => data.extend(std::iter::repeat(T::zero()).take(d)),
                }
            }
            if idx.is_empty() {
                return Err(invalid("gather_rows with no indices"));
            }
            Tensor {
                shape: vec![idx.len(), d],
                data,
            }
        }
        Op::ConcatRows => {
            let (a, b) = (ins[0], ins[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(mismatch("concat_rows", a.shape(), b.shape()));
            }
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor {
                shape: vec![a.shape()[0] + b.shape()[0], a.shape()[1]],
                data,
            }
        }
        // The final shape is patched in by the caller.
        Op::Reshape => ins[0].clone(),
        Op::Permute { axes } => {
            let x = ins[0];
            let mut sorted = axes.clone();
            sorted.sort_unstable();
            if sorted != (0..x.rank()).collect::<Vec<_>>() {
                return Err(invalid(format!("bad permutation {axes:?} for rank {}", x.rank())));
            }
            let (data, shape) = permute(x.data(), x.shape(), axes);
            Tensor { shape, data }
        }
        Op::MaskedFill { mask, value } => {
            let x = ins[0];
            if mask.is_empty() || x.len() % mask.len() != 0 || !suffix_len(x.shape(), mask.len()) {
                return Err(mismatch("masked_fill", x.shape(), &[mask.len()]));
            }
            let data = x
                .data()
                .iter()
                .zip(mask.iter().cycle())
                .map(|(&v, &m)| if m { *value } else { v })
                .collect();
            Tensor {
                shape: x.shape().to_vec(),
                data,
            }
        }
        Op::ReduceSum { axis } => {
            let x = ins[0];
            if *axis >= x.rank() {
                return Err(invalid(format!("reduce_sum axis {axis} for rank {}", x.rank())));
            }
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += x.data()[(o * len + j) * inner + i];
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            Tensor { shape, data }
        }
        Op::SumAll => Tensor::scalar(ins[0].data().iter().fold(T::zero(), |a, &b| a + b)),
        Op::CategoricalNll { targets } => {
            let logits = ins[0];
            let (n, v) = categorical_dims(logits, targets.len())?;
            let mut total = T::zero();
            for i in 0..n {
                let row = &logits.data()[i * v..(i + 1) * v];
                let t = targets[i] as usize;
                if t >= v {
                    return Err(Error::IndexOutOfRange {
                        what: "categorical target",
                        index: t,
                        limit: v,
                    });
                }
                total += log_sum_exp(row) - row[t];
            }
            Tensor::scalar(total)
        }
        Op::DmolNll { targets, mixtures } => {
            let p = ins[0];
            dmol::check_param_shape(p.shape(), targets.len(), *mixtures)?;
            let (nll, _) = dmol::nll_and_grad(p.data(), targets, *mixtures, false);
            Tensor::scalar(nll)
        }
    };
    Ok(out)
}

fn suffix_len(shape: &[usize], len: usize) -> bool {
    let mut acc = 1;
    if len == 1 {
        return true;
    }
    for &e in shape.iter().rev() {
        acc *= e;
        if acc == len {
            return true;
        }
    }
    false
}

fn categorical_dims<T: Scalar>(logits: &Tensor<T>, n_targets: usize) -> Result<(usize, usize)> {
    if logits.rank() != 2 || logits.shape()[0] != n_targets {
        return Err(mismatch("categorical_nll", logits.shape(), &[n_targets]));
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let s = row.iter().fold(T::zero(), |a, &v| a + (v - mx).exp());
    mx + s.ln()
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let d = T::from_count(row.len());
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / d;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / d;
    (mean, T::one() / (var + eps).sqrt())
}

/// Vector-Jacobian products: gradient for each input given the output gradient.
fn vjp<T: Scalar>(op: &Op<T>, ins: &[&Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { trans_b } => {
            let (a, b) = (ins[0], ins[1]);
            let d = matmul_dims(a.shape(), b.shape(), *trans_b).expect("validated in forward");
            let (m, k, n) = (d.m, d.k, d.n);
            let mut ga = vec![T::zero(); a.len()];
            let mut gb = vec![T::zero(); b.len()];
            let bsz = k * n;
            for bi in 0..d.batch {
                let gc = &g[bi * m * n..(bi + 1) * m * n];
                let a_blk = &a.data()[bi * m * k..(bi + 1) * m * k];
                let boff = if d.shared_b { 0 } else { bi * bsz };
                let b_blk = &b.data()[boff..boff + bsz];
                let ga_blk = &mut ga[bi * m * k..(bi + 1) * m * k];
                if *trans_b {
                    // b is [n, k]; C = A Bᵀ
                    gemm_acc(m, n, k, gc, n, 1, b_blk, ga_blk);
                    gemm_acc(n, m, k, gc, 1, n, a_blk, &mut gb[boff..boff + bsz]);
                } else {
                    let bt = transpose2(b_blk, k, n);
                    gemm_acc(m, n, k, gc, n, 1, &bt, ga_blk);
                    gemm_acc(k, m, n, a_blk, 1, k, gc, &mut gb[boff..boff + bsz]);
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::Mul => {
            let (a, b) = (ins[0], ins[1]);
            let ga = g.iter().zip(b.data()).map(|(&gi, &bv)| gi * bv).collect();
            let gb = g.iter().zip(a.data()).map(|(&gi, &av)| gi * av).collect();
            vec![Some(ga), Some(gb)]
        }
        Op::AddBias => {
            let d = ins[1].len();
            let mut gb = vec![T::zero(); d];
            for row in g.chunks(d) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(g.to_vec()), Some(gb)]
        }
        Op::Scale(c) => vec![Some(g.iter().map(|&v| v * *c).collect())],
        Op::MulConst(c) => vec![Some(g.iter().zip(c.iter()).map(|(&a, &b)| a * b).collect())],
        Op::Relu => vec![Some(
            g.iter()
                .zip(ins[0].data())
                .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                .collect(),
        )],
        Op::Softmax { axis } => {
            let y = out.data();
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot += g[base + j * inner] * y[base + j * inner];
                    }
                    for j in 0..len {
                        let ix = base + j * inner;
                        gx[ix] = y[ix] * (g[ix] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::LayerNorm { eps } => {
            let (x, gain) = (ins[0], ins[1]);
            let d = gain.len();
            let dn = T::from_count(d);
            let mut gx = vec![T::zero(); x.len()];
            let mut gg = vec![T::zero(); d];
            let mut gbias = vec![T::zero(); d];
            for (r, row) in x.data().chunks(d).enumerate() {
                let (mean, rstd) = row_stats(row, *eps);
                let gr = &g[r * d..(r + 1) * d];
                let mut sum_dxh = T::zero();
                let mut sum_dxh_xh = T::zero();
                for j in 0..d {
                    let xh = (row[j] - mean) * rstd;
                    let dxh = gr[j] * gain.data()[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                    gg[j] += gr[j] * xh;
                    gbias[j] += gr[j];
                }
                for j in 0..d {
                    let xh = (row[j] - mean) * rstd;
                    let dxh = gr[j] * gain.data()[j];
                    gx[r * d + j] = rstd * (dxh - sum_dxh / dn - xh * sum_dxh_xh / dn);
                }
            }
            vec![Some(gx), Some(gg), Some(gbias)]
        }
        Op::Embedding { ids } => {
            let t = ins[0];
            let d = t.shape()[1];
            let mut gt = vec![T::zero(); t.len()];
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[id * d + j] += g[i * d + j];
                }
            }
            vec![Some(gt)]
        }
        Op::GatherRows { idx } => {
            let x = ins[0];
            let d = last_dim(x.shape());
            let mut gx = vec![T::zero(); x.len()];
            for (i, ix) in idx.iter().enumerate() {
                if let Some(r) = *ix {
                    for j in 0..d {
                        gx[r * d + j] += g[i * d + j];
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::ConcatRows => {
            let na = ins[0].len();
            vec![Some(g[..na].to_vec()), Some(g[na..].to_vec())]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Permute { axes } => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            let (gx, _) = permute(g, out.shape(), &inv);
            vec![Some(gx)]
        }
        Op::MaskedFill { mask, .. } => vec![Some(
            g.iter()
                .zip(mask.iter().cycle())
                .map(|(&gi, &m)| if m { T::zero() } else { gi })
                .collect(),
        )],
        Op::ReduceSum { axis } => {
            let x = ins[0];
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut gx = vec![T::zero(); x.len()];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        gx[(o * len + j) * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::SumAll => vec![Some(vec![g[0]; ins[0].len()])],
        Op::CategoricalNll { targets } => {
            let logits = ins[0];
            let v = logits.shape()[1];
            let mut gl = vec![T::zero(); logits.len()];
            for (i, &t) in targets.iter().enumerate() {
                let row = &logits.data()[i * v..(i + 1) * v];
                let lse = log_sum_exp(row);
                for j in 0..v {
                    gl[i * v + j] = (row[j] - lse).exp() * g[0];
                }
                gl[i * v + t as usize] -= g[0];
            }
            vec![Some(gl)]
        }
        Op::DmolNll { targets, mixtures } => {
            let (_, mut gp) = dmol::nll_and_grad(ins[0].data(), targets, *mixtures, true);
            for v in gp.iter_mut() {
                *v *= g[0];
            }
            vec![Some(gp)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
        let r = g.constant(t(&[1, 2], &[1., 0.]));
        let c = g.constant(t(&[2, 1], &[5., 7.]));
        let s = g.matmul(r, c).unwrap();
        assert_eq!(g.value(s).data(), &[5.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2, 3], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let b = g.constant(t(&[2, 4, 3], &(0..24).map(|v| (v as f64) * 0.5).collect::<Vec<_>>()));
        let c1 = g.matmul_nt(a, b).unwrap();
        let bt = g.transpose(b).unwrap();
        let c2 = g.matmul(a, bt).unwrap();
        assert_eq!(g.value(c1), g.value(c2));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0., 0.]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[2], &[1f64.ln(), 2f64.ln()]));
        let s = g.softmax(x, 0).unwrap();
        assert!((g.value(s).data()[0] - 1. / 3.).abs() < 1e-15);
        let x = g.constant(t(&[2], &[1000., 0.]));
        let s = g.softmax(x, 0).unwrap();
        assert!((g.value(s).data()[0] - 1.).abs() < 1e-12 && g.value(s).data()[1] < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(g.softmax(x, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[0., 1., 2., 0., 1., 2.]));
        let s = g.softmax(x, 0).unwrap();
        assert!(g.value(s).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn layernorm_examples() {
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::ones(&[4]));
        let zeros = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(t(&[4], &[5., 5., 5., 5.]));
        let y = g.layernorm(x, ones, zeros, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let ones2 = g.constant(Tensor::ones(&[2]));
        let zeros2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2], &[1., -1.]));
        let y = g.layernorm(x, ones2, zeros2, 1e-14).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 1.).abs() < 1e-12 && (out[1] + 1.).abs() < 1e-12);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
        let o = g.constant(Tensor::ones(&[2, 3]));
        let s = g.sum_all(o).unwrap();
        assert_eq!(g.value(s).item(), 6.0);
        let rs = g.reduce_sum(o, 1).unwrap();
        assert_eq!(g.value(rs).shape(), &[2]);
        assert_eq!(g.value(rs).data(), &[3., 3.]);
        let m = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let tt = g.transpose(m).unwrap();
        let tt2 = g.transpose(tt).unwrap();
        assert_eq!(g.value(tt2), g.value(m));
        let sc = g.scale(m, 2.0).unwrap();
        assert_eq!(g.value(sc).data()[5], 12.);
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(m, bad).is_err());
    }

    #[test]
    fn embedding_examples() {
        let mut g = Graph::<f64>::new();
        let table = g.constant(Tensor::eye(3));
        let e = g.embedding(table, &[2]).unwrap();
        assert_eq!(g.value(e).data(), &[0., 0., 1.]);
        assert!(matches!(g.embedding(table, &[3]), Err(Error::IndexOutOfRange { .. })));

        let mut g = Graph::<f64>::new();
        let table = g.param(ParamId(0), &Tensor::eye(3));
        let e = g.embedding(table, &[0, 0]).unwrap();
        let w = g.constant(t(&[2, 3], &[1., 2., 3., 10., 20., 30.]));
        let prod = g.mul(e, w).unwrap();
        let loss = g.sum_all(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        let gt = grads.param(ParamId(0)).unwrap();
        assert_eq!(&gt.data()[0..3], &[11., 22., 33.]);
        assert!(gt.data()[3..].iter().all(|&v| v == 0.));
    }

    #[test]
    fn masked_fill_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[3., 3.]));
        let all = g.masked_fill(x, Arc::new(vec![true, true]), MASK_FILL).unwrap();
        assert_eq!(g.value(all).data(), &[MASK_FILL, MASK_FILL]);
        let none = g.masked_fill(x, Arc::new(vec![false, false]), MASK_FILL).unwrap();
        assert_eq!(g.value(none), g.value(x));
        let one = g.masked_fill(x, Arc::new(vec![false, true]), MASK_FILL).unwrap();
        let s = g.softmax(one, 0).unwrap();
        assert_eq!(g.value(s).data(), &[1., 0.]);
        let bad = g.masked_fill(x, Arc::new(vec![true; 3]), 0.0);
        assert!(bad.is_err());
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(ParamId(0), &t(&[2, 2], &[1., 2., 3., 4.]));
        let m = g.masked_fill(x, Arc::new(vec![true, false]), MASK_FILL).unwrap();
        let s = g.sum_all(m).unwrap();
        let gr = g.backward(s).unwrap().param(ParamId(0)).unwrap();
        assert_eq!(gr.data(), &[0., 1., 0., 1.]);
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.param(ParamId(0), &t(&[3], &[1., -2., 0.5]));
        let unused = g.param(ParamId(1), &t(&[2], &[1., 1.]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(ParamId(0)).unwrap().data(), &[2., -4., 1.]);
        assert_eq!(grads.param(ParamId(1)).unwrap().data(), &[0., 0.]);
        let _ = unused;
        assert!(matches!(g.backward(sq), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn dropout_identities() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::new(1);
        let x = g.constant(t(&[3], &[1., 2., 3.]));
        assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::new(11);
        let n = 100_000;
        let x = g.constant(Tensor::full(&[n], 2.0));
        let y = g.dropout(x, 0.3, &mut rng, true).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut g = Graph::<f32>::new();
        let a = g.param(ParamId(0), &Tensor::from_f64(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
        let b = g.param(ParamId(1), &Tensor::from_f64(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.25, 3.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let r = g.reshape(s, &[4]).unwrap();
        let out = g.sum_all(r).unwrap();
        let values = g.replay(&[]).unwrap();
        for i in 0..g.len() {
            let v = Var(i);
            let same = g
                .value(v)
                .data()
                .iter()
                .zip(values[i].data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same && g.value(v).shape() == values[i].shape());
        }
        let new_a = Tensor::from_f64(&[2, 3], &[1.0; 6]).unwrap();
        let replayed = g.replay(&[(a, new_a)]).unwrap();
        assert_ne!(replayed[c.index()], *g.value(c));
        let _ = out;
    }

    #[test]
    fn gather_concat_and_permute_gradients_route_correctly() {
        let mut g = Graph::<f64>::new();
        let x = g.param(ParamId(0), &t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let s = g.param(ParamId(1), &t(&[1, 2], &[9., 9.]));
        let cat = g.concat_rows(s, x).unwrap();
        let idx = Arc::new(vec![Some(0), None, Some(3), Some(3)]);
        let gathered = g.gather_rows(cat, idx).unwrap();
        assert_eq!(g.value(gathered).data(), &[9., 9., 0., 0., 5., 6., 5., 6.]);
        let w = g.constant(t(&[4, 2], &[1., 1., 1., 1., 1., 1., 1., 1.]));
        let p = g.mul(gathered, w).unwrap();
        let loss = g.sum_all(p).unwrap();
        let gr = g.backward(loss).unwrap();
        assert_eq!(gr.param(ParamId(0)).unwrap().data(), &[0., 0., 0., 0., 2., 2.]);
        assert_eq!(gr.param(ParamId(1)).unwrap().data(), &[1., 1.]);
    }
}
