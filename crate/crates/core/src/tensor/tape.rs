use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One term of a [`Tape::weighted_gather_sum`]:
/// `out[out_row, block * w + ch] += weight * x[src_row, ch]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatherEntry<T> {
    pub out_row: u32,
    pub block: u32,
    pub src_row: u32,
    pub weight: T,
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        relu: bool,
    },
    Softmax {
        x: Var,
        dims: AxisDims,
    },
    MaxReduce {
        x: Var,
        dims: AxisDims,
        argmax: Vec<usize>,
    },
    MeanReduce {
        x: Var,
        dims: AxisDims,
    },
    SumAll(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Reshape(Var),
    WeightedGatherSum {
        x: Var,
        entries: Vec<GatherEntry<T>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        eps: T,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone, Copy)]
struct AxisDims {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisDims {
    fn of(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        if shape[axis] == 0 {
            return Err(Error::EmptyAxis {
                axis,
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    #[inline]
    fn at(&self, o: usize, l: usize, i: usize) -> usize {
        (o * self.len + l) * self.inner + i
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) output w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `x W^T + b` over the last axis of `x`; `w` is `out x in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(mismatch("linear", &xs, &ws));
        }
        let (out, inp) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(mismatch("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).rows();
        let mut y = vec![T::zero(); rows * out];
        T::gemm(
            rows,
            inp,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut y,
            false,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, y)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-D product `a b`, or `a b^T` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 {
            return Err(mismatch("matmul", &as_, &bs));
        }
        let (m, k) = (as_[0], as_[1]);
        let (kb, n) = if trans_b {
            (bs[1], bs[0])
        } else {
            (bs[0], bs[1])
        };
        if k != kb {
            return Err(mismatch("matmul", &as_, &bs));
        }
        let mut y = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut y,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], y)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&e| e * s).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v
                .data()
                .iter()
                .map(|&e| if e > T::zero() { e } else { T::zero() })
                .collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Affine layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.layer_norm_impl(x, gamma, beta, false)
    }

    /// `relu(layer_norm(x))` as a single node.
    pub fn layer_norm_relu(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.layer_norm_impl(x, gamma, beta, true)
    }

    fn layer_norm_impl(&mut self, x: Var, gamma: Var, beta: Var, relu: bool) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::from_f64(LN_EPS);
        let inv_c = T::one() / T::from_f64(c as f64);
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); rows * c];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for (((row, hr), yr), rs) in xv
            .data()
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(y.chunks_exact_mut(c))
            .zip(rstd.iter_mut())
        {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            *rs = T::one() / (var + eps).sqrt();
            for ((((h, o), &v), &gg), &bb) in
                hr.iter_mut().zip(yr.iter_mut()).zip(row).zip(g).zip(b)
            {
                *h = (v - mean) * *rs;
                *o = *h * gg + bb;
            }
            if relu {
                yr.iter_mut()
                    .filter(|o| !(**o > T::zero()))
                    .for_each(|o| *o = T::zero());
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                relu,
            },
            rg,
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = AxisDims::of(self.shape(x), axis)?;
        let xv = self.value(x);
        let (len, inner) = (dims.len, dims.inner);
        let mut y = xv.data().to_vec();
        let mut mx = vec![T::zero(); inner];
        let mut sum = vec![T::zero(); inner];
        // rows along the axis are contiguous runs of `inner` values
        for block in y.chunks_exact_mut(len * inner) {
            mx.copy_from_slice(&block[..inner]);
            for row in block.chunks_exact(inner).skip(1) {
                for (m, &v) in mx.iter_mut().zip(row) {
                    *m = m.max(v);
                }
            }
            sum.iter_mut().for_each(|s| *s = T::zero());
            for row in block.chunks_exact_mut(inner) {
                for ((v, &m), s) in row.iter_mut().zip(&mx).zip(sum.iter_mut()) {
                    *v = (*v - m).exp();
                    *s += *v;
                }
            }
            sum.iter_mut().for_each(|s| *s = T::one() / *s);
            for row in block.chunks_exact_mut(inner) {
                for (v, &s) in row.iter_mut().zip(&sum) {
                    *v *= s;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, dims }, rg))
    }

    /// Max along `axis` (removed from the shape). Returns the winners'
    /// positions along the axis, lowest position on ties.
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let dims = AxisDims::of(self.shape(x), axis)?;
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let src = self.value(x).data();
        let (len, inner) = (dims.len, dims.inner);
        let mut y = Vec::with_capacity(dims.outer * inner);
        let mut argmax = vec![0usize; dims.outer * inner];
        for (block, am) in src
            .chunks_exact(len * inner)
            .zip(argmax.chunks_exact_mut(inner))
        {
            let start = y.len();
            y.extend_from_slice(&block[..inner]);
            let best = &mut y[start..];
            for (l, row) in block.chunks_exact(inner).enumerate().skip(1) {
                for ((b, a), &v) in best.iter_mut().zip(am.iter_mut()).zip(row) {
                    if v > *b {
                        *b = v;
                        *a = l;
                    }
                }
            }
        }
        let t = Tensor::new(shape, y)?;
        let rg = self.rg(x);
        let out = self.push(
            t,
            Op::MaxReduce {
                x,
                dims,
                argmax: argmax.clone(),
            },
            rg,
        );
        Ok((out, argmax))
    }

    /// Mean along `axis` (removed from the shape).
    pub fn mean_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = AxisDims::of(self.shape(x), axis)?;
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let src = self.value(x).data();
        let inv = T::one() / T::from_f64(dims.len as f64);
        let mut y = vec![T::zero(); dims.outer * dims.inner];
        for o in 0..dims.outer {
            for l in 0..dims.len {
                for i in 0..dims.inner {
                    y[o * dims.inner + i] += src[dims.at(o, l, i)];
                }
            }
        }
        y.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(shape, y)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MeanReduce { x, dims }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Selects rows along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.is_empty() {
            return Err(Error::InvalidArgument("gather_rows on a 0-d tensor".into()));
        }
        let n = shape[0];
        let w: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &r in idx {
            if r >= n {
                return Err(Error::InvalidArgument(format!(
                    "gather index {r} out of range for {n} rows"
                )));
            }
            data.extend_from_slice(&xv.data()[r * w..(r + 1) * w]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = idx.len();
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates 2-D parts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero parts".into()))?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Sparse weighted row gather into `blocks` column blocks of an
    /// `out_rows x (blocks * w)` output. Entries are summed in list order.
    pub fn weighted_gather_sum(
        &mut self,
        x: Var,
        entries: &[GatherEntry<T>],
        out_rows: usize,
        blocks: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "weighted_gather_sum expects a 2-D input, got {:?}",
                xv.shape()
            )));
        }
        let (n, w) = (xv.shape()[0], xv.shape()[1]);
        let width = blocks * w;
        let mut y = vec![T::zero(); out_rows * width];
        for e in entries {
            let (o, b, s) = (e.out_row as usize, e.block as usize, e.src_row as usize);
            if o >= out_rows || b >= blocks || s >= n {
                return Err(Error::InvalidArgument(format!(
                    "gather entry ({o}, {b}, {s}) out of range for {out_rows} x {blocks} from {n} rows"
                )));
            }
            let dst = &mut y[o * width + b * w..o * width + (b + 1) * w];
            for (d, &v) in dst.iter_mut().zip(xv.row(s)) {
                *d += e.weight * v;
            }
        }
        let t = Tensor::new(vec![out_rows, width], y)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::WeightedGatherSum {
                x,
                entries: entries.to_vec(),
            },
            rg,
        ))
    }

    /// Batch-mean cross entropy against `(1 - eps) onehot + eps / C` targets.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], eps: T) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return Err(mismatch("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let classes = lv.shape()[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput);
        }
        let off = eps / T::from_f64(classes as f64);
        let on = T::one() - eps + off;
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (b, &label) in labels.iter().enumerate() {
            let row = lv.row(b);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            for (c, &v) in row.iter().enumerate() {
                let logp = v - lse;
                probs[b * classes + c] = logp.exp();
                let q = if c == label { on } else { off };
                loss -= q * logp;
            }
        }
        loss /= T::from_f64(labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                eps,
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from `out`, seeding every element of `out` with 1
    /// (the gradient of the sum of its entries). Previous gradients are
    /// discarded.
    pub fn backward(&mut self, out: Var) {
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        if !self.nodes[out.0].requires_grad {
            return;
        }
        self.grads[out.0] = Some(vec![T::one(); self.nodes[out.0].value.len()]);
        for i in (0..=out.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                with_grad!(*x, |gx| T::gemm(
                    rows,
                    out,
                    inp,
                    g,
                    false,
                    wv.data(),
                    false,
                    gx,
                    true
                ));
                with_grad!(*w, |gw| T::gemm(
                    out,
                    rows,
                    inp,
                    g,
                    true,
                    xv.data(),
                    false,
                    gw,
                    true
                ));
                if let Some(b) = b {
                    with_grad!(*b, |gb| {
                        for row in g.chunks_exact(out) {
                            for (d, &v) in gb.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                if *trans_b {
                    with_grad!(*a, |ga| T::gemm(
                        m,
                        n,
                        k,
                        g,
                        false,
                        bv.data(),
                        false,
                        ga,
                        true
                    ));
                    with_grad!(*b, |gb| T::gemm(
                        n,
                        m,
                        k,
                        g,
                        true,
                        av.data(),
                        false,
                        gb,
                        true
                    ));
                } else {
                    with_grad!(*a, |ga| T::gemm(
                        m,
                        n,
                        k,
                        g,
                        false,
                        bv.data(),
                        true,
                        ga,
                        true
                    ));
                    with_grad!(*b, |gb| T::gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        true,
                        g,
                        false,
                        gb,
                        true
                    ));
                }
            }
            Op::Add(a, b) => {
                accumulate(nodes, grads, *a, g);
                accumulate(nodes, grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(nodes, grads, *a, g);
                with_grad!(*b, |gb| {
                    for (d, &v) in gb.iter_mut().zip(g) {
                        *d -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                with_grad!(*a, |ga| {
                    for ((d, &gv), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((d, &gv), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                });
            }
            Op::Scale(x, s) => with_grad!(*x, |gx| {
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d += v * *s;
                }
            }),
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                with_grad!(*x, |gx| {
                    for ((d, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                relu,
            } => {
                let c = node.value.cols();
                let gam = nodes[gamma.0].value.data();
                let masked: Vec<T>;
                let g = if *relu {
                    masked = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                        .collect();
                    &masked[..]
                } else {
                    g
                };
                with_grad!(*gamma, |gg| {
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((d, &a), &b) in gg.iter_mut().zip(gr).zip(hr) {
                            *d += a * b;
                        }
                    }
                });
                with_grad!(*beta, |gb| {
                    for gr in g.chunks_exact(c) {
                        add_into(gb, gr);
                    }
                });
                with_grad!(*x, |gx| {
                    let inv_c = T::one() / T::from_f64(c as f64);
                    for (((gr, hr), dst), &rs) in g
                        .chunks_exact(c)
                        .zip(xhat.chunks_exact(c))
                        .zip(gx.chunks_exact_mut(c))
                        .zip(rstd)
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for ((&a, &gm), &h) in gr.iter().zip(gam).zip(hr) {
                            let gh = a * gm;
                            m1 += gh;
                            m2 += gh * h;
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for (((d, &a), &gm), &h) in dst.iter_mut().zip(gr).zip(gam).zip(hr) {
                            *d += rs * (a * gm - m1 - h * m2);
                        }
                    }
                });
            }
            Op::Softmax { x, dims } => {
                let y = node.value.data();
                let (len, inner) = (dims.len, dims.inner);
                with_grad!(*x, |gx| {
                    let mut dot = vec![T::zero(); inner];
                    for ((yb, gb), xb) in y
                        .chunks_exact(len * inner)
                        .zip(g.chunks_exact(len * inner))
                        .zip(gx.chunks_exact_mut(len * inner))
                    {
                        dot.iter_mut().for_each(|d| *d = T::zero());
                        for (yr, gr) in yb.chunks_exact(inner).zip(gb.chunks_exact(inner)) {
                            for ((d, &a), &b) in dot.iter_mut().zip(yr).zip(gr) {
                                *d += a * b;
                            }
                        }
                        for ((yr, gr), xr) in yb
                            .chunks_exact(inner)
                            .zip(gb.chunks_exact(inner))
                            .zip(xb.chunks_exact_mut(inner))
                        {
                            for (((d, &a), &b), &p) in xr.iter_mut().zip(yr).zip(gr).zip(&dot) {
                                *d += a * (b - p);
                            }
                        }
                    }
                });
            }
            Op::MaxReduce { x, dims, argmax } => with_grad!(*x, |gx| {
                for o in 0..dims.outer {
                    for i in 0..dims.inner {
                        let r = o * dims.inner + i;
                        gx[dims.at(o, argmax[r], i)] += g[r];
                    }
                }
            }),
            Op::MeanReduce { x, dims } => with_grad!(*x, |gx| {
                let inv = T::one() / T::from_f64(dims.len as f64);
                for o in 0..dims.outer {
                    for l in 0..dims.len {
                        for i in 0..dims.inner {
                            gx[dims.at(o, l, i)] += g[o * dims.inner + i] * inv;
                        }
                    }
                }
            }),
            Op::SumAll(x) => with_grad!(*x, |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::GatherRows { x, idx } => with_grad!(*x, |gx| {
                let w = if idx.is_empty() {
                    0
                } else {
                    g.len() / idx.len()
                };
                for (k, &r) in idx.iter().enumerate() {
                    add_into(&mut gx[r * w..(r + 1) * w], &g[k * w..(k + 1) * w]);
                }
            }),
            Op::Concat { parts } => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    with_grad!(p, |gp| {
                        for (r, dst) in gp.chunks_exact_mut(w).enumerate() {
                            add_into(dst, &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Reshape(x) => accumulate(nodes, grads, *x, g),
            Op::WeightedGatherSum { x, entries } => {
                let w = nodes[x.0].value.cols();
                let width = node.value.cols();
                with_grad!(*x, |gx| {
                    for e in entries {
                        let src = e.out_row as usize * width + e.block as usize * w;
                        let dst = &mut gx[e.src_row as usize * w..(e.src_row as usize + 1) * w];
                        for (d, &v) in dst.iter_mut().zip(&g[src..src + w]) {
                            *d += e.weight * v;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                eps,
                probs,
            } => with_grad!(*logits, |gl| {
                let classes = probs.len() / labels.len();
                let off = *eps / T::from_f64(classes as f64);
                let on = T::one() - *eps + off;
                let scale = g[0] / T::from_f64(labels.len() as f64);
                for (b, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let q = if c == label { on } else { off };
                        gl[b * classes + c] += scale * (probs[b * classes + c] - q);
                    }
                }
            }),
        }
    }
}

fn grad_slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

/// Adds `src` to the gradient of `v`, copying it when none exists yet.
fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, src: &[T]) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(buf) => add_into(buf, src),
        slot @ None => *slot = Some(src.to_vec()),
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
