use super::{DiffError, Tensor};
use crate::Scalar;

/// Handle to a value inside a [`ComputationRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        padding: usize,
    },
    BiasAdd(NodeId, NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    MeanBatch(NodeId),
    Mse(NodeId, NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::BiasAdd(..) => "bias_add",
            Op::Relu(_) => "relu",
            Op::Reshape(_) => "reshape",
            Op::MeanBatch(_) => "mean_batch",
            Op::Mse(..) => "mse",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Ordered log of primitive applications. Nodes are appended as operations
/// run, so every input id precedes its consumer.
#[derive(Debug, Clone, Default)]
pub struct ComputationRecord<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar output with respect to every parameter node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> ComputationRecord<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId, DiffError> {
        self.push_checked(Op::Input, value, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId, DiffError> {
        self.push_checked(Op::Param, value, true)
    }

    fn get(&self, id: NodeId) -> Result<&Node<T>, DiffError> {
        self.nodes.get(id.0).ok_or(DiffError::UnknownNode(id.0))
    }

    fn push_checked(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Result<NodeId, DiffError> {
        if let Some(index) = value.first_non_finite() {
            return Err(DiffError::NonFinite { op: op.name(), index });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (av, bv) = (&self.get(a)?.value, &self.get(b)?.value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.push_checked(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), rg)
    }

    /// Stride-1 convolution with symmetric zero padding.
    /// Input `[n, c, h, w]`, kernel `[o, c, kh, kw]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, padding: usize) -> Result<NodeId, DiffError> {
        let (xv, wv) = (&self.get(input)?.value, &self.get(kernel)?.value);
        let geom = ConvGeom::new(xv.shape(), wv.shape(), padding)?;
        let out = geom.forward(xv.data(), wv.data());
        let rg = self.any_grad(&[input, kernel]);
        self.push_checked(
            Op::Conv2d { input, kernel, padding },
            Tensor::from_parts(geom.out_shape(), out),
            rg,
        )
    }

    /// Adds `bias[c]` along axis 1 of an `[n, c, ...]` tensor.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        let (xv, bv) = (&self.get(x)?.value, &self.get(bias)?.value);
        let (sx, sb) = (xv.shape(), bv.shape());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(DiffError::Shape {
                op: "bias_add",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let b = bv.data();
        let out: Vec<T> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % c])
            .collect();
        let rg = self.any_grad(&[x, bias]);
        self.push_checked(Op::BiasAdd(x, bias), Tensor::from_parts(sx.to_vec(), out), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let xv = &self.get(x)?.value;
        let out = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push_checked(Op::Relu(x), Tensor::from_parts(shape, out), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, DiffError> {
        let xv = &self.get(x)?.value;
        if shape.iter().product::<usize>() != xv.len() || shape.contains(&0) {
            return Err(DiffError::Shape {
                op: "reshape",
                lhs: xv.shape().to_vec(),
                rhs: shape,
            });
        }
        let data = xv.data().to_vec();
        let rg = self.any_grad(&[x]);
        self.push_checked(Op::Reshape(x), Tensor::from_parts(shape, data), rg)
    }

    /// Mean over axis 0: `[n, ...] -> [...]` (a scalar for rank-1 input).
    pub fn mean_batch(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let xv = &self.get(x)?.value;
        let s = xv.shape();
        if s.is_empty() {
            return Err(DiffError::Shape {
                op: "mean_batch",
                lhs: Vec::new(),
                rhs: Vec::new(),
            });
        }
        let n = s[0];
        let inner = xv.len() / n;
        let mut out = vec![T::zero(); inner];
        for row in xv.data().chunks_exact(inner) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let nt = T::of_usize(n);
        out.iter_mut().for_each(|o| *o = *o / nt);
        let shape = s[1..].to_vec();
        let rg = self.any_grad(&[x]);
        self.push_checked(Op::MeanBatch(x), Tensor::from_parts(shape, out), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, DiffError> {
        let (pv, tv) = (&self.get(pred)?.value, &self.get(target)?.value);
        if pv.shape() != tv.shape() {
            return Err(DiffError::Shape {
                op: "mse",
                lhs: pv.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let sum = pv
            .data()
            .iter()
            .zip(tv.data())
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
        let loss = sum / T::of_usize(pv.len());
        let rg = self.any_grad(&[pred, target]);
        self.push_checked(Op::Mse(pred, target), Tensor::scalar(loss), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]` for `[n, k]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, DiffError> {
        let lv = &self.get(logits)?.value;
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(DiffError::Shape {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(DiffError::Label {
                op: "softmax_cross_entropy",
                label,
                classes: k,
            });
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (row, &y) in lv.data().chunks_exact(k).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
            let log_z = z.ln() + max;
            total = total + (log_z - row[y]);
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let loss = total / T::of_usize(n);
        let rg = self.any_grad(&[logits]);
        self.push_checked(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// Reverse sweep from a scalar `output`, scaling by `seed`.
    ///
    /// Every `param` node up to `output` gets an entry; parameters the output
    /// does not depend on get zeros.
    pub fn backward(&self, output: NodeId, seed: T) -> Result<Gradients<T>, DiffError> {
        let out = self.get(output)?;
        if !out.value.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: out.value.shape().to_vec(),
            });
        }
        let mut acc: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        acc[output.0] = Some(vec![seed]);

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = acc[id].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    acc[id] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.nodes[a.0].requires_grad {
                        // dA = dY B^T
                        let mut da = vec![T::zero(); m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = T::zero();
                                for j in 0..n {
                                    s = s + dy[i * n + j] * bv.data()[p * n + j];
                                }
                                da[i * k + p] = s;
                            }
                        }
                        accumulate(&mut acc[a.0], da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T dY
                        let mut db = vec![T::zero(); k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let a_ip = av.data()[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] = db[p * n + j] + a_ip * dy[i * n + j];
                                }
                            }
                        }
                        accumulate(&mut acc[b.0], db);
                    }
                }
                Op::Conv2d { input, kernel, padding } => {
                    let (xv, wv) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
                    let geom = ConvGeom::new(xv.shape(), wv.shape(), *padding)?;
                    let (dx, dw) = geom.backward(xv.data(), wv.data(), &dy);
                    if self.nodes[input.0].requires_grad {
                        accumulate(&mut acc[input.0], dx);
                    }
                    if self.nodes[kernel.0].requires_grad {
                        accumulate(&mut acc[kernel.0], dw);
                    }
                }
                Op::BiasAdd(x, b) => {
                    let sx = self.nodes[x.0].value.shape();
                    let c = sx[1];
                    let inner: usize = sx[2..].iter().product();
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![T::zero(); c];
                        for (i, &g) in dy.iter().enumerate() {
                            let ch = (i / inner) % c;
                            db[ch] = db[ch] + g;
                        }
                        accumulate(&mut acc[b.0], db);
                    }
                    if self.nodes[x.0].requires_grad {
                        accumulate(&mut acc[x.0], dy);
                    }
                }
                Op::Relu(x) => {
                    if self.nodes[x.0].requires_grad {
                        let xv = self.nodes[x.0].value.data();
                        let dx = dy
                            .iter()
                            .zip(xv)
                            .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                            .collect();
                        accumulate(&mut acc[x.0], dx);
                    }
                }
                Op::Reshape(x) => {
                    if self.nodes[x.0].requires_grad {
                        accumulate(&mut acc[x.0], dy);
                    }
                }
                Op::MeanBatch(x) => {
                    if self.nodes[x.0].requires_grad {
                        let xv = &self.nodes[x.0].value;
                        let n = xv.shape()[0];
                        let nt = T::of_usize(n);
                        let mut dx = Vec::with_capacity(xv.len());
                        for _ in 0..n {
                            dx.extend(dy.iter().map(|&g| g / nt));
                        }
                        accumulate(&mut acc[x.0], dx);
                    }
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (&self.nodes[p.0].value, &self.nodes[t.0].value);
                    let scale = (T::one() + T::one()) * dy[0] / T::of_usize(pv.len());
                    let diff: Vec<T> = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&a, &b)| (a - b) * scale)
                        .collect();
                    if self.nodes[t.0].requires_grad {
                        accumulate(&mut acc[t.0], diff.iter().map(|&d| -d).collect());
                    }
                    if self.nodes[p.0].requires_grad {
                        accumulate(&mut acc[p.0], diff);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    if self.nodes[logits.0].requires_grad {
                        let n = labels.len();
                        let k = probs.len() / n;
                        let scale = dy[0] / T::of_usize(n);
                        let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                        for (i, &y) in labels.iter().enumerate() {
                            dl[i * k + y] = dl[i * k + y] - scale;
                        }
                        accumulate(&mut acc[logits.0], dl);
                    }
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| match node.op {
                Op::Param => {
                    let shape = node.value.shape().to_vec();
                    Some(match acc.get_mut(id).and_then(Option::take) {
                        Some(g) => Tensor::from_parts(shape, g),
                        None => Tensor::zeros(shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e = *e + c),
        None => *slot = Some(contrib),
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
    out
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], pad: usize) -> Result<Self, DiffError> {
        let bad = || DiffError::Shape {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        };
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(bad());
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(bad());
        }
        Ok(Self {
            n: xs[0],
            c: xs[1],
            h,
            w,
            o: ws[0],
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    /// Input coordinate for output position `i` and kernel offset `u`, if it
    /// falls inside the unpadded image.
    #[inline]
    fn src(i: usize, u: usize, pad: usize, limit: usize) -> Option<usize> {
        (i + u).checked_sub(pad).filter(|&v| v < limit)
    }

    fn forward<T: Scalar>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n * self.o * self.oh * self.ow];
        for b in 0..self.n {
            for o in 0..self.o {
                for i in 0..self.oh {
                    for j in 0..self.ow {
                        let mut s = T::zero();
                        for c in 0..self.c {
                            for u in 0..self.kh {
                                let Some(yi) = Self::src(i, u, self.pad, self.h) else {
                                    continue;
                                };
                                for v in 0..self.kw {
                                    let Some(xj) = Self::src(j, v, self.pad, self.w) else {
                                        continue;
                                    };
                                    s = s + x[((b * self.c + c) * self.h + yi) * self.w + xj]
                                        * w[((o * self.c + c) * self.kh + u) * self.kw + v];
                                }
                            }
                        }
                        out[((b * self.o + o) * self.oh + i) * self.ow + j] = s;
                    }
                }
            }
        }
        out
    }

    fn backward<T: Scalar>(&self, x: &[T], w: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        for b in 0..self.n {
            for o in 0..self.o {
                for i in 0..self.oh {
                    for j in 0..self.ow {
                        let g = dy[((b * self.o + o) * self.oh + i) * self.ow + j];
                        for c in 0..self.c {
                            for u in 0..self.kh {
                                let Some(yi) = Self::src(i, u, self.pad, self.h) else {
                                    continue;
                                };
                                for v in 0..self.kw {
                                    let Some(xj) = Self::src(j, v, self.pad, self.w) else {
                                        continue;
                                    };
                                    let xi = ((b * self.c + c) * self.h + yi) * self.w + xj;
                                    let wi = ((o * self.c + c) * self.kh + u) * self.kw + v;
                                    dw[wi] = dw[wi] + g * x[xi];
                                    dx[xi] = dx[xi] + g * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_linear_mse() {
        let mut r = ComputationRecord::new();
        let theta = r.param(t(&[1, 1], &[0.0])).unwrap();
        let x = r.input(t(&[1, 1], &[1.0])).unwrap();
        let target = r.input(t(&[1, 1], &[2.0])).unwrap();
        let y = r.matmul(x, theta).unwrap();
        let loss = r.mse(y, target).unwrap();
        assert_eq!(r.value(loss).item(), Some(4.0));
        let g = r.backward(loss, 1.0).unwrap();
        assert_eq!(g.get(theta).unwrap().data(), &[-4.0]);
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut r = ComputationRecord::new();
        let x = r.input(t(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.5, -6.0])).unwrap();
        assert_eq!(r.value(x), &t(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.5, -6.0]));
        let same = r.reshape(x, vec![2, 3]).unwrap();
        assert_eq!(r.value(same), r.value(x));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut r = ComputationRecord::new();
        let used = r.param(t(&[1, 1], &[0.5])).unwrap();
        let unused = r.param(t(&[2], &[1.0, 2.0])).unwrap();
        let x = r.input(t(&[1, 1], &[3.0])).unwrap();
        let tgt = r.input(t(&[1, 1], &[0.0])).unwrap();
        let y = r.matmul(x, used).unwrap();
        let loss = r.mse(y, tgt).unwrap();
        let g = r.backward(loss, 1.0).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut r = ComputationRecord::new();
        let p = r.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(r.backward(p, 1.0), Err(DiffError::NotScalar { .. })));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut r = ComputationRecord::new();
        let a = r.input(t(&[2, 3], &[0.0; 6])).unwrap();
        let b = r.input(t(&[2, 3], &[0.0; 6])).unwrap();
        let err = r.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let bias = r.input(t(&[2], &[0.0; 2])).unwrap();
        assert!(r.bias_add(a, bias).unwrap_err().to_string().contains("bias_add"));
        assert!(r.mse(a, bias).is_err());
        assert!(r.softmax_cross_entropy(a, &[0]).is_err());
        assert!(matches!(
            r.softmax_cross_entropy(a, &[0, 3]),
            Err(DiffError::Label { label: 3, .. })
        ));
    }

    #[test]
    fn non_finite_surfaces_as_error() {
        let mut r = ComputationRecord::<f64>::new();
        assert!(matches!(
            r.input(t(&[2], &[1.0, f64::NAN])),
            Err(DiffError::NonFinite { index: 1, .. })
        ));
        let a = r.input(t(&[1, 1], &[1e200])).unwrap();
        let b = r.input(t(&[1, 1], &[1e200])).unwrap();
        assert!(matches!(r.matmul(a, b), Err(DiffError::NonFinite { op: "matmul", .. })));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut r = ComputationRecord::new();
        let l = r.param(t(&[2, 4], &[0.0; 8])).unwrap();
        let loss = r.softmax_cross_entropy(l, &[0, 3]).unwrap();
        let v = r.value(loss).item().unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn conv_same_padding_keeps_spatial_dims() {
        let mut r = ComputationRecord::<f64>::new();
        let x = r.input(Tensor::zeros(vec![2, 3, 5, 4])).unwrap();
        let w = r.param(Tensor::zeros(vec![6, 3, 3, 3])).unwrap();
        let y = r.conv2d(x, w, 1).unwrap();
        assert_eq!(r.value(y).shape(), &[2, 6, 5, 4]);
        let y2 = r.conv2d(x, w, 0).unwrap();
        assert_eq!(r.value(y2).shape(), &[2, 6, 3, 2]);
    }

    #[test]
    fn conv_matches_hand_computation() {
        // 1x1x2x2 image, 1x1x2x2 kernel, no padding -> single dot product.
        let mut r = ComputationRecord::new();
        let x = r.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let w = r.param(t(&[1, 1, 2, 2], &[0.5, -1.0, 2.0, 0.25])).unwrap();
        let y = r.conv2d(x, w, 0).unwrap();
        assert_eq!(r.value(y).data(), &[0.5 - 2.0 + 6.0 + 1.0]);
    }
}
