//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Operands always precede their consumers, so a
//! single reverse sweep over the node list is a valid topological order.

use crate::error::{Error, Result};
use crate::tensor::{Float, Mask, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        map: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        map: Broadcast,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Relu {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    SwapAxes12 {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum {
        a: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Reshape { .. } => "reshape",
            Op::SwapAxes12 { .. } => "swap_axes12",
            Op::Softmax { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "embedding_gather",
            Op::CrossEntropy { .. } => "cross_entropy_masked",
            Op::Sum { .. } => "sum",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// How the smaller operand of a binary op is indexed from the output index.
#[derive(Debug, Clone)]
enum Broadcast {
    Same,
    Cycle(usize),
    Table(Vec<usize>),
}

impl Broadcast {
    /// Right-aligns `small` against `full`; each trailing axis must match or be 1.
    fn resolve(op: &'static str, full: &[usize], small: &[usize]) -> Result<Self> {
        if full == small {
            return Ok(Broadcast::Same);
        }
        if small.len() > full.len() {
            return Err(Error::dim(op, full, small));
        }
        let offset = full.len() - small.len();
        for (ax, &s) in small.iter().enumerate() {
            if s != 1 && s != full[offset + ax] {
                return Err(Error::dim(op, full, small));
            }
        }
        if small.iter().all(|&s| s != 1) || small.iter().product::<usize>() == 1 {
            return Ok(Broadcast::Cycle(small.iter().product()));
        }
        let mut strides = vec![0usize; full.len()];
        let mut acc = 1;
        for ax in (0..small.len()).rev() {
            if small[ax] != 1 {
                strides[offset + ax] = acc;
            }
            acc *= small[ax];
        }
        let total: usize = full.iter().product();
        let mut table = Vec::with_capacity(total);
        let mut idx = vec![0usize; full.len()];
        for _ in 0..total {
            table.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..full.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < full[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Broadcast::Table(table))
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Cycle(n) => i % n,
            Broadcast::Table(t) => t[i],
        }
    }
}

/// Operation record for one forward pass. Single writer; call [`Tape::reset`]
/// before reusing it after [`Tape::backward`].
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    first_nonfinite: Option<String>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
        self.first_nonfinite = None;
    }

    /// Debug builds only: the first op that turned finite inputs into a
    /// non-finite value (overflow or a numerical bug), if any.
    pub fn first_nonfinite(&self) -> Option<&str> {
        self.first_nonfinite.as_deref()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward fills its gradient.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if cfg!(debug_assertions) && self.first_nonfinite.is_none() && !value.is_finite() {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            if inputs_finite {
                self.first_nonfinite = Some(format!("node {} ({})", self.nodes.len(), op.name()));
            }
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("variable {} is not on this tape", v.0)));
        }
        Ok(())
    }

    /// `[m,k]·[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            T::zero(),
            (&mut out, n as isize, 1),
        );
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Per-group product `[g,m,k]·[g,k,n]`, or `[g,m,k]·[g,n,k]ᵀ` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (rs, cs) = if transpose_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        for gi in 0..g {
            T::gemm(
                m,
                k,
                n,
                (&da[gi * m * k..(gi + 1) * m * k], k as isize, 1),
                (&db[gi * k * n..(gi + 1) * k * n], rs, cs),
                T::zero(),
                (&mut out[gi * m * n..(gi + 1) * m * n], n as isize, 1),
            );
        }
        let value = Tensor::from_vec(&[g, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, transpose_b }, &[a, b]))
    }

    fn binary_operands(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var, Broadcast)> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        match Broadcast::resolve(op, sa, sb) {
            Ok(map) => Ok((a, b, map)),
            Err(e) => match Broadcast::resolve(op, sb, sa) {
                Ok(map) => Ok((b, a, map)),
                Err(_) => Err(e),
            },
        }
    }

    /// Elementwise sum. The smaller operand is broadcast by trailing-axis
    /// alignment where each of its axes equals the other's or is 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, map) = self.binary_operands("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[map.at(i)])
            .collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(value, Op::Add { a, b, map }, &[a, b]))
    }

    /// `[..., d] + [d]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.check(a)?;
        self.check(bias)?;
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != sb.first() {
            return Err(Error::dim("add_bias", sa, sb));
        }
        self.add(a, bias)
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, map) = self.binary_operands("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vb.data()[map.at(i)])
            .collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(value, Op::Mul { a, b, map }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let value = Tensor::from_vec(va.shape(), va.data().iter().map(|&x| x * factor).collect())?;
        Ok(self.push(value, Op::Scale { a, factor }, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(value, Op::Relu { a }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return Err(Error::dim("reshape", va.shape(), shape));
        }
        let value = Tensor::from_vec(shape, va.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// `[d0,d1,d2,d3] -> [d0,d2,d1,d3]`.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 4 {
            return Err(Error::dim("swap_axes12", s, &[0, 0, 0, 0]));
        }
        let (d0, d1, d2, d3) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![T::zero(); va.len()];
        swap12(va.data(), &mut out, [d0, d1, d2, d3]);
        let value = Tensor::from_vec(&[d0, d2, d1, d3], out)?;
        Ok(self.push(value, Op::SwapAxes12 { a }, &[a]))
    }

    /// Softmax over the last axis. Entries where `mask` is false are excluded
    /// and come out exactly zero; the mask covers trailing axes and repeats over
    /// the leading ones.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let shape = va.shape();
        let n = *shape.last().expect("rank >= 1");
        let keep: Option<&[bool]> = match mask {
            None => None,
            Some(m) => {
                let ms = m.shape();
                if ms.len() > shape.len() || shape[shape.len() - ms.len()..] != *ms {
                    return Err(Error::dim("softmax_rows", shape, ms));
                }
                Some(m.keep())
            }
        };
        let mut out = vec![T::zero(); va.len()];
        for (row, (x, y)) in va.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let keep_row = keep.map(|k| {
                let rows = k.len() / n;
                &k[(row % rows) * n..(row % rows + 1) * n]
            });
            let allowed = |j: usize| keep_row.map_or(true, |k| k[j]);
            if !(0..n).any(allowed) {
                return Err(Error::DegenerateRow { row });
            }
            let mut max = T::neg_infinity();
            let mut finite = true;
            for (j, &v) in x.iter().enumerate() {
                if allowed(j) {
                    finite &= v.is_finite();
                    if v > max {
                        max = v;
                    }
                }
            }
            if !finite {
                // propagate overflow as NaN instead of inventing a distribution
                for (j, o) in y.iter_mut().enumerate() {
                    if allowed(j) {
                        *o = T::nan();
                    }
                }
                continue;
            }
            let mut sum = T::zero();
            for (j, (&v, o)) in x.iter().zip(y.iter_mut()).enumerate() {
                if allowed(j) {
                    *o = (v - max).exp();
                    sum = sum + *o;
                }
            }
            let inv = T::one() / sum;
            y.iter_mut().for_each(|o| *o = *o * inv);
        }
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance
    /// (epsilon [`LAYER_NORM_EPS`]) then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check(a)?;
        self.check(gain)?;
        self.check(bias)?;
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gain)));
        }
        let (x, g, b) = (self.value(a).data(), self.value(gain).data(), self.value(bias).data());
        let rows = x.len() / d;
        let eps = T::from_f64(LAYER_NORM_EPS);
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[a, gain, bias],
        ))
    }

    /// Row lookup `table[ids[i]]`, producing `[ids.len(), d]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let vt = self.value(table);
        let s = vt.shape();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::dim("embedding_gather", s, &[ids.len()]));
        }
        let (vocab, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary { id, vocab });
            }
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean negative log-likelihood over positions where `mask` is true.
    ///
    /// Also returns the loss at every position (masked or not) so callers can
    /// attribute it per answer digit.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<(Var, Vec<T>)> {
        self.check(logits)?;
        let vl = self.value(logits);
        let s = vl.shape();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(Error::dim("cross_entropy_masked", s, &[targets.len(), mask.len()]));
        }
        let (rows, vocab) = (s[0], s[1]);
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut losses = Vec::with_capacity(rows);
        let mut total = T::zero();
        for (r, (x, p)) in vl.data().chunks(vocab).zip(probs.chunks_mut(vocab)).enumerate() {
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Vocabulary { id: t, vocab });
            }
            let max = x.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (pi, &xi) in p.iter_mut().zip(x) {
                *pi = (xi - max).exp();
                sum = sum + *pi;
            }
            p.iter_mut().for_each(|pi| *pi = *pi / sum);
            let loss = sum.ln() - (x[t] - max);
            losses.push(loss);
            if mask[r] {
                total = total + loss;
            }
        }
        let mean = total / T::from_f64(count as f64);
        let value = Tensor::scalar(mean);
        let var = self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        );
        Ok((var, losses))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let total = self.value(a).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum { a }, &[a]))
    }

    /// Accumulates d(root)/d(leaf) into every leaf that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; call reset() first".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let g = match &grads[i] {
                Some(_) => grads[i].take().unwrap(),
                None => continue,
            };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backward_node(nodes, node, &g, &mut grads);
        }

        let mut leaf_grads = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                leaf_grads.push((i, g));
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.set_grad(Some(g));
        }
        Ok(())
    }
}

fn swap12<T: Copy>(src: &[T], dst: &mut [T], [d0, d1, d2, d3]: [usize; 4]) {
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let s = ((i0 * d1 + i1) * d2 + i2) * d3;
                let t = ((i0 * d2 + i2) * d1 + i1) * d3;
                dst[t..t + d3].copy_from_slice(&src[s..s + d3]);
            }
        }
    }
}

fn slot<'a, T: Float>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
}

fn backward_node<T: Float>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(da) = slot(grads, nodes, *a) {
                // dA += dC · Bᵀ
                T::gemm(
                    m,
                    n,
                    k,
                    (g, n as isize, 1),
                    (val(*b).data(), 1, n as isize),
                    T::one(),
                    (da, k as isize, 1),
                );
            }
            if let Some(db) = slot(grads, nodes, *b) {
                // dB += Aᵀ · dC
                T::gemm(
                    k,
                    m,
                    n,
                    (val(*a).data(), 1, k as isize),
                    (g, n as isize, 1),
                    T::one(),
                    (db, n as isize, 1),
                );
            }
        }
        Op::BatchMatMul { a, b, transpose_b } => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (groups, m, k) = (sa[0], sa[1], sa[2]);
            let n = if *transpose_b { sb[1] } else { sb[2] };
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(grads, nodes, *a) {
                for gi in 0..groups {
                    // Bᵀ as an [n,k] view of the stored operand
                    let (rs, cs) = if *transpose_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    T::gemm(
                        m,
                        n,
                        k,
                        (&g[gi * m * n..(gi + 1) * m * n], n as isize, 1),
                        (&vb[gi * k * n..(gi + 1) * k * n], rs, cs),
                        T::one(),
                        (&mut da[gi * m * k..(gi + 1) * m * k], k as isize, 1),
                    );
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for gi in 0..groups {
                    let ga = &va[gi * m * k..(gi + 1) * m * k];
                    let gc = &g[gi * m * n..(gi + 1) * m * n];
                    let out = &mut db[gi * k * n..(gi + 1) * k * n];
                    if *transpose_b {
                        // d(stored [n,k]) += dCᵀ · A
                        T::gemm(
                            n,
                            m,
                            k,
                            (gc, 1, n as isize),
                            (ga, k as isize, 1),
                            T::one(),
                            (out, k as isize, 1),
                        );
                    } else {
                        T::gemm(
                            k,
                            m,
                            n,
                            (ga, 1, k as isize),
                            (gc, n as isize, 1),
                            T::one(),
                            (out, n as isize, 1),
                        );
                    }
                }
            }
        }
        Op::Add { a, b, map } => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for (i, &x) in g.iter().enumerate() {
                    let j = map.at(i);
                    db[j] = db[j] + x;
                }
            }
        }
        Op::Mul { a, b, map } => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(grads, nodes, *a) {
                for (i, d) in da.iter_mut().enumerate() {
                    *d = *d + g[i] * vb[map.at(i)];
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for (i, &x) in g.iter().enumerate() {
                    let j = map.at(i);
                    db[j] = db[j] + x * va[i];
                }
            }
        }
        Op::Scale { a, factor } => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *factor);
            }
        }
        Op::Relu { a } => {
            let va = val(*a).data();
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &x), &gi) in da.iter_mut().zip(va).zip(g) {
                    if x > T::zero() {
                        *d = *d + gi;
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
            }
        }
        Op::SwapAxes12 { a } => {
            let s = val(*a).shape();
            let (d0, d1, d2, d3) = (s[0], s[1], s[2], s[3]);
            if let Some(da) = slot(grads, nodes, *a) {
                let mut back = vec![T::zero(); g.len()];
                swap12(g, &mut back, [d0, d2, d1, d3]);
                da.iter_mut().zip(&back).for_each(|(d, &x)| *d = *d + x);
            }
        }
        Op::Softmax { a } => {
            let y = node.value.data();
            let n = *node.value.shape().last().unwrap();
            if let Some(da) = slot(grads, nodes, *a) {
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            a,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain).data();
            let d = gv.len();
            if let Some(dgain) = slot(grads, nodes, *gain) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dgain[j] = dgain[j] + gr[j] * hr[j];
                    }
                }
            }
            if let Some(dbias) = slot(grads, nodes, *bias) {
                for gr in g.chunks(d) {
                    for j in 0..d {
                        dbias[j] = dbias[j] + gr[j];
                    }
                }
            }
            if let Some(da) = slot(grads, nodes, *a) {
                let dn = T::from_f64(d as f64);
                let mut dh = vec![T::zero(); d];
                for (r, ((gr, hr), dr)) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(da.chunks_mut(d))
                    .enumerate()
                {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        dh[j] = gr[j] * gv[j];
                        s1 = s1 + dh[j];
                        s2 = s2 + dh[j] * hr[j];
                    }
                    let scale = inv_std[r] / dn;
                    for j in 0..d {
                        dr[j] = dr[j] + scale * (dn * dh[j] - s1 - hr[j] * s2);
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let d = val(*table).shape()[1];
            if let Some(dt) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            let vocab = val(*logits).shape()[1];
            let scale = g[0] / T::from_f64(*count as f64);
            if let Some(dl) = slot(grads, nodes, *logits) {
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let p = &probs[r * vocab..(r + 1) * vocab];
                    let dr = &mut dl[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dr[j] = dr[j] + scale * (p[j] - onehot);
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
    }
}
