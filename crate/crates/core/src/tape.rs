//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable op appends one node holding its output value and the
//! information its backward rule needs. `backward` walks the tape in reverse
//! and accumulates gradients additively. One tape per training step; it is
//! never shared between threads.

use crate::error::{Error, Result};
use crate::tensor::{
    gemm_acc, gemm_nt_acc, gemm_tn_acc, inverse_permutation, numel, permute_data, rows_last, softmax_rows,
    top_k_row_mask, Scalar, Tensor, LAYER_NORM_EPS,
};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, Scalar),
    AddConst(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MeanLast(Var),
    VarLast(Var),
    MaxLast {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<Scalar>,
        rstd: Vec<Scalar>,
    },
    Gelu(Var),
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    TopKMask {
        x: Var,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<Scalar>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<Scalar>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`GradTape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Scalar>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[Scalar]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of the given length when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<Scalar> {
        self.get(v).map(<[Scalar]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn gelu_fwd(x: Scalar) -> Scalar {
    const C: Scalar = 0.797_884_6; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: Scalar) -> Scalar {
    const C: Scalar = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn acc_into(slot: &mut Option<Vec<Scalar>>, len: usize, f: impl FnOnce(&mut [Scalar])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.grad = None;
        t.requires_grad = false;
        self.push(t, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.grad = None;
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v`'s value as a constant; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Batched product `[b,m,k] × [b,k,n] → [b,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_acc(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![bs, m, n], out), Op::BatchMatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(Scalar, Scalar) -> Scalar, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `x[..., n] + bias[n]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = rows_last(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, &bv)| *v += bv);
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: Scalar) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: Var, c: Scalar) -> Var {
        let data = self.value(x).data().iter().map(|&v| v + c).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(t, Op::AddConst(x), rg)
    }

    /// Sum of all elements, shape `[1]`, accumulated in f64.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as Scalar;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = (d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64) as Scalar;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::SumAxis { x, outer, len, inner }, rg))
    }

    fn last_axis_reduce(&mut self, x: Var, f: impl Fn(&[Scalar]) -> Scalar) -> Tensor {
        let shape = self.shape(x).to_vec();
        let (_, n) = rows_last(&shape);
        let out: Vec<Scalar> = self.value(x).data().chunks(n).map(f).collect();
        let mut new_shape = shape[..shape.len() - 1].to_vec();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        Tensor::from_parts(new_shape, out)
    }

    pub fn mean_last(&mut self, x: Var) -> Var {
        let t = self.last_axis_reduce(x, |r| r.iter().sum::<Scalar>() / r.len() as Scalar);
        let rg = self.rg(&[x]);
        self.push(t, Op::MeanLast(x), rg)
    }

    /// Population variance over the last axis.
    pub fn var_last(&mut self, x: Var) -> Var {
        let t = self.last_axis_reduce(x, |r| {
            let n = r.len() as Scalar;
            let mu = r.iter().sum::<Scalar>() / n;
            r.iter().map(|&v| (v - mu) * (v - mu)).sum::<Scalar>() / n
        });
        let rg = self.rg(&[x]);
        self.push(t, Op::VarLast(x), rg)
    }

    /// Maximum over the last axis; gradient goes to the first maximal entry.
    pub fn max_last(&mut self, x: Var) -> Var {
        let (_, n) = rows_last(self.shape(x));
        let argmax: Vec<usize> = self
            .value(x)
            .data()
            .chunks(n)
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        let t = self.last_axis_reduce(x, |r| r.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max));
        let rg = self.rg(&[x]);
        self.push(t, Op::MaxLast { x, argmax }, rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, n) = rows_last(self.shape(x));
        let data = softmax_rows(self.value(x).data(), n);
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with optional affine parameters.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_last(&shape);
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let xd = self.value(x).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<Scalar>() / d as Scalar;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<Scalar>() / d as Scalar;
            let rs = 1.0 / (var + LAYER_NORM_EPS as Scalar).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = self.value(g).data();
            out.chunks_mut(d).for_each(|row| row.iter_mut().zip(g).for_each(|(v, &gv)| *v *= gv));
        }
        if let Some(b) = bias {
            let b = self.value(b).data();
            out.chunks_mut(d).for_each(|row| row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv));
        }
        let mut deps = vec![x];
        deps.extend(gain);
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = crate::tensor::permute(self.value(x), axes)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(Error::Param("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let chunks: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let total_axis: usize = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// Keep the `k` largest entries of every last-axis row (ties → lower
    /// index), zero the rest. No renormalization.
    pub fn top_k_mask(&mut self, x: Var, k: usize) -> Result<Var> {
        let (_, n) = rows_last(self.shape(x));
        if k < 1 || k > n {
            return Err(Error::Param(format!("top-k requires 1 <= k <= {n}, got k={k}")));
        }
        let xd = self.value(x).data();
        let mut mask = Vec::with_capacity(xd.len());
        for row in xd.chunks(n) {
            mask.extend(top_k_row_mask(row, k));
        }
        let data = xd.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        let t = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::TopKMask { x, mask }, rg))
    }

    /// Mean cross-entropy of `logits[B×C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let probs = softmax_rows(self.value(logits).data(), c);
        let b = labels.len();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let p = probs[i * c + l];
                // `max` would swallow NaN; let it through so divergence is visible.
                if p.is_nan() {
                    p
                } else {
                    -p.max(Scalar::MIN_POSITIVE).ln()
                }
            })
            .sum::<Scalar>()
            / b as Scalar;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scale the whole tensor to unit Frobenius norm.
    pub fn normalize_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.normalize_chunks(x, n)
    }

    /// Scale every last-axis row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (_, n) = rows_last(self.shape(x));
        self.normalize_chunks(x, n)
    }

    fn normalize_chunks(&mut self, x: Var, n: usize) -> Var {
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len());
        let mut norms = Vec::with_capacity(xd.len() / n.max(1));
        for row in xd.chunks(n) {
            let ss: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum();
            // a zero chunk stays zero; its gradient passes through unscaled
            let norm = if ss > 0.0 { ss.sqrt() as Scalar } else { 1.0 };
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let t = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(t, Op::NormalizeRows { x, norms }, rg)
    }

    /// Reverse pass from a scalar output. Returns gradients for every node
    /// that requires them.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", self.shape(output), &[1]));
        }
        let mut grads: Vec<Option<Vec<Scalar>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[Scalar], grads: &mut [Option<Vec<Scalar>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.len();
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let bd = val(*b);
                    acc_into(&mut grads[a.0], m * k, |ga| gemm_nt_acc(g, bd, ga, m, n, k));
                }
                if wants(*b) {
                    let ad = val(*a);
                    acc_into(&mut grads[b.0], k * n, |gb| gemm_tn_acc(ad, g, gb, m, k, n));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if wants(*a) {
                    let bd = val(*b);
                    acc_into(&mut grads[a.0], bs * m * k, |ga| {
                        for i in 0..bs {
                            gemm_nt_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                }
                if wants(*b) {
                    let ad = val(*a);
                    acc_into(&mut grads[b.0], bs * k * n, |gb| {
                        for i in 0..bs {
                            gemm_tn_acc(
                                &ad[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        acc_into(&mut grads[v.0], g.len(), |gv| {
                            gv.iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y)
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        acc_into(&mut grads[v.0], g.len(), |gv| {
                            gv.iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y)
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bd = val(*b);
                    acc_into(&mut grads[a.0], g.len(), |ga| {
                        for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(bd) {
                            *x += gy * bv;
                        }
                    });
                }
                if wants(*b) {
                    let ad = val(*a);
                    acc_into(&mut grads[b.0], g.len(), |gb| {
                        for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(ad) {
                            *x += gy * av;
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                if wants(*a) {
                    acc_into(&mut grads[a.0], g.len(), |ga| {
                        for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(bd) {
                            *x += gy / bv;
                        }
                    });
                }
                if wants(*b) {
                    acc_into(&mut grads[b.0], g.len(), |gb| {
                        for (((x, &gy), &av), &bv) in gb.iter_mut().zip(g).zip(ad).zip(bd) {
                            *x -= gy * av / (bv * bv);
                        }
                    });
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    acc_into(&mut grads[x.0], g.len(), |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
                }
                if wants(*bias) {
                    let n = len(*bias);
                    acc_into(&mut grads[bias.0], n, |gb| {
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    acc_into(&mut grads[x.0], g.len(), |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += c * b));
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                if wants(*x) {
                    acc_into(&mut grads[x.0], g.len(), |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc_into(&mut grads[x.0], len(*x), |gx| gx.iter_mut().for_each(|a| *a += g[0]));
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = len(*x);
                    let s = g[0] / n as Scalar;
                    acc_into(&mut grads[x.0], n, |gx| gx.iter_mut().for_each(|a| *a += s));
                }
            }
            Op::SumAxis { x, outer, len: l, inner } => {
                if wants(*x) {
                    let (outer, l, inner) = (*outer, *l, *inner);
                    acc_into(&mut grads[x.0], outer * l * inner, |gx| {
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for j in 0..l {
                                let dst = &mut gx[(o * l + j) * inner..(o * l + j + 1) * inner];
                                dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                            }
                        }
                    });
                }
            }
            Op::MeanLast(x) => {
                if wants(*x) {
                    let (_, n) = rows_last(self.shape(*x));
                    acc_into(&mut grads[x.0], len(*x), |gx| {
                        for (row, &gy) in gx.chunks_mut(n).zip(g) {
                            row.iter_mut().for_each(|a| *a += gy / n as Scalar);
                        }
                    });
                }
            }
            Op::VarLast(x) => {
                if wants(*x) {
                    let (_, n) = rows_last(self.shape(*x));
                    let xd = val(*x);
                    acc_into(&mut grads[x.0], len(*x), |gx| {
                        for ((grow, xrow), &gy) in gx.chunks_mut(n).zip(xd.chunks(n)).zip(g) {
                            let mu = xrow.iter().sum::<Scalar>() / n as Scalar;
                            for (a, &xv) in grow.iter_mut().zip(xrow) {
                                *a += gy * 2.0 * (xv - mu) / n as Scalar;
                            }
                        }
                    });
                }
            }
            Op::MaxLast { x, argmax } => {
                if wants(*x) {
                    let (_, n) = rows_last(self.shape(*x));
                    acc_into(&mut grads[x.0], len(*x), |gx| {
                        for (r, (&j, &gy)) in argmax.iter().zip(g).enumerate() {
                            gx[r * n + j] += gy;
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let (_, n) = rows_last(node.value.shape());
                    let y = node.value.data();
                    acc_into(&mut grads[x.0], y.len(), |gx| {
                        for ((grow, yrow), gyrow) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                            let dot: Scalar = yrow.iter().zip(gyrow).map(|(&a, &b)| a * b).sum();
                            for ((a, &yv), &gy) in grow.iter_mut().zip(yrow).zip(gyrow) {
                                *a += yv * (gy - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (_, d) = rows_last(node.value.shape());
                if let Some(gn) = gain {
                    if wants(*gn) {
                        acc_into(&mut grads[gn.0], d, |gg| {
                            for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                                for ((a, &b), &c) in gg.iter_mut().zip(gy).zip(xh) {
                                    *a += b * c;
                                }
                            }
                        });
                    }
                }
                if let Some(bs) = bias {
                    if wants(*bs) {
                        acc_into(&mut grads[bs.0], d, |gb| {
                            for gy in g.chunks(d) {
                                gb.iter_mut().zip(gy).for_each(|(a, &b)| *a += b);
                            }
                        });
                    }
                }
                if wants(*x) {
                    let gain_vals = gain.map(|gn| val(gn));
                    acc_into(&mut grads[x.0], g.len(), |gx| {
                        let mut dxhat = vec![0.0; d];
                        for (r, ((grow, gy), xh)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                            for j in 0..d {
                                dxhat[j] = gy[j] * gain_vals.map_or(1.0, |gv| gv[j]);
                            }
                            let m1 = dxhat.iter().sum::<Scalar>() / d as Scalar;
                            let m2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<Scalar>() / d as Scalar;
                            for j in 0..d {
                                grow[j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                            }
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xd = val(*x);
                    acc_into(&mut grads[x.0], g.len(), |gx| {
                        for ((a, &gy), &xv) in gx.iter_mut().zip(g).zip(xd) {
                            *a += gy * gelu_grad(xv);
                        }
                    });
                }
            }
            Op::Permute { x, axes } => {
                if wants(*x) {
                    let inv = inverse_permutation(axes);
                    let (back, _) = permute_data(g, node.value.shape(), &inv);
                    acc_into(&mut grads[x.0], back.len(), |gx| {
                        gx.iter_mut().zip(&back).for_each(|(a, &b)| *a += b)
                    });
                }
            }
            Op::Concat { inputs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    if wants(v) {
                        acc_into(&mut grads[v.0], outer * c, |gv| {
                            for o in 0..*outer {
                                let src = &g[o * total + offset..o * total + offset + c];
                                gv[o * c..(o + 1) * c].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::TopKMask { x, mask } => {
                if wants(*x) {
                    acc_into(&mut grads[x.0], g.len(), |gx| {
                        for ((a, &gy), &m) in gx.iter_mut().zip(g).zip(mask) {
                            if m {
                                *a += gy;
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if wants(*logits) {
                    let c = self.shape(*logits)[1];
                    let scale = g[0] / labels.len() as Scalar;
                    acc_into(&mut grads[logits.0], probs.len(), |gl| {
                        for (i, &l) in labels.iter().enumerate() {
                            for j in 0..c {
                                let target = if j == l { 1.0 } else { 0.0 };
                                gl[i * c + j] += scale * (probs[i * c + j] - target);
                            }
                        }
                    });
                }
            }
            Op::NormalizeRows { x, norms } => {
                if wants(*x) {
                    let n = g.len() / norms.len();
                    let y = node.value.data();
                    acc_into(&mut grads[x.0], g.len(), |gx| {
                        for (((grow, yrow), gyrow), &norm) in
                            gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)).zip(norms)
                        {
                            let dot: Scalar = yrow.iter().zip(gyrow).map(|(&a, &b)| a * b).sum();
                            for ((a, &yv), &gy) in grow.iter_mut().zip(yrow).zip(gyrow) {
                                *a += (gy - yv * dot) / norm;
                            }
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clear_empties_tape() {
        let mut tape = GradTape::new();
        let a = tape.param(Tensor::ones(&[2, 2]));
        let b = tape.scale(a, 2.0);
        let _ = tape.sum(b);
        assert_eq!(tape.len(), 3);
        tape.clear();
        assert_eq!(tape.len(), 0);
        assert!(tape.is_empty());
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        // y = sum(a * a) uses `a` twice; dy/da = 2a
        let mut tape = GradTape::new();
        let a = tape.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(a, a).unwrap();
        let y = tape.sum(sq);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = GradTape::new();
        let a = tape.param(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        let s = tape.add(a, c).unwrap();
        let y = tape.sum(s);
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = GradTape::new();
        let a = tape.param(Tensor::ones(&[2]));
        let d = tape.detach(a);
        let y = tape.sum(d);
        let g = tape.backward(y).unwrap();
        assert!(g.get(a).is_none());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::full(&[1, 4], 5.0));
        let y = tape.layer_norm(x, None, None).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_entries() {
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let y = tape.layer_norm(x, None, None).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-4 && (d[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn top_k_passes_gradient_only_through_survivors() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::new(&[4], vec![0.1, 0.5, 0.3, 0.1]).unwrap());
        let m = tape.top_k_mask(x, 2).unwrap();
        let y = tape.sum(m);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = GradTape::new();
        let a = tape.param(Tensor::ones(&[2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn sum_axis_middle() {
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::new(&[2, 3, 2], (0..12).map(|v| v as Scalar).collect()).unwrap());
        let s = tape.sum_axis(x, 1).unwrap();
        assert_eq!(tape.shape(s), &[2, 2]);
        assert_eq!(tape.value(s).data(), &[6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn concat_last_axis() {
        let mut tape = GradTape::new();
        let a = tape.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
