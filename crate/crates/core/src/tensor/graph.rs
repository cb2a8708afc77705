use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeometry};
use super::{Scalar, Tensor};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Hadamard(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    ReduceMean {
        x: Var,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    Sum(Var),
    L2Normalize {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Stack(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode computation record.
///
/// Nodes are appended in evaluation order, which is already a topological
/// order, so [`Graph::backward`] walks the node list once from the loss down.
/// Shape errors in op construction are contract violations and panic.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one call to [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if cfg!(debug_assertions) && !matches!(op, Op::Leaf) {
            debug_assert!(value.all_finite(), "non-finite output from {:?}", op_name(&op));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (inputs, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shape mismatch: {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new([m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "transpose expects a matrix, got {:?}", s);
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let out = (0..r * c).map(|i| src[(i % r) * c + i / r]).collect();
        let ng = self.ng(x);
        self.push(Tensor::new([c, r], out), Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape.to_vec());
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Cross-correlation of `x` [c_in×h×w] with `k` [c_out×c_in×kh×kw],
    /// plus an optional per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        assert!(
            sx.len() == 3 && sk.len() == 4 && sk[1] == sx[0],
            "conv2d shape mismatch: input {:?}, kernel {:?}",
            sx,
            sk
        );
        assert!(stride > 0, "conv2d stride must be positive");
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ph, pw) = (sx[1] + 2 * pad, sx[2] + 2 * pad);
        assert!(
            kh <= ph && kw <= pw,
            "conv2d kernel {}x{} exceeds padded input {}x{}",
            kh,
            kw,
            ph,
            pw
        );
        assert!(
            (ph - kh) % stride == 0 && (pw - kw) % stride == 0,
            "conv2d output extent is not integral (padded {}x{}, kernel {}x{}, stride {})",
            ph,
            pw,
            kh,
            kw,
            stride
        );
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[c_out], "conv2d bias shape mismatch");
        }
        let geom = ConvGeometry {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let p = geom.positions();
        let mut out = vec![T::zero(); c_out * p];
        if let Some(b) = bias {
            for (co, &bv) in self.value(b).data().iter().enumerate() {
                out[co * p..(co + 1) * p].iter_mut().for_each(|o| *o = bv);
            }
        }
        kernels::matmul_nn_acc(self.value(k).data(), &cols, &mut out, c_out, geom.patch_len(), p);
        let ng = self.ng(x) || self.ng(k) || bias.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new([c_out, geom.oh, geom.ow], out),
            Op::Conv2d { x, k, bias, geom, cols },
            ng,
        )
    }

    /// Window max over each channel. Ties resolve to the first maximal
    /// element in row-major window order, and only that element gets gradient.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(
            s.len() == 3 && window > 0 && stride > 0,
            "maxpool2d expects c×h×w, got {:?}",
            s
        );
        assert!(
            window <= s[1] && window <= s[2],
            "maxpool2d window {} exceeds {:?}",
            window,
            s
        );
        let (c, h, w) = (s[0], s[1], s[2]);
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                            if best == usize::MAX || src[idx] > best_v {
                                best = idx;
                                best_v = src[idx];
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new([c, oh, ow], out), Op::MaxPool2d { x, argmax }, ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect());
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{} shape mismatch", name);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Hadamard(a, b), "hadamard")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |a| a * c, Op::Scale(x, c))
    }

    /// Multiply every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar expects a one-element multiplier");
        let c = self.value(s).item();
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * c).collect());
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::MulScalar(x, s), ng)
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(axis < s.len(), "reduce_mean axis {} out of range for {:?}", axis, s);
        let outer: usize = s[..axis].iter().product();
        let extent = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        assert!(extent > 0, "reduce_mean over an empty axis");
        let src = self.value(x).data();
        let inv = T::one() / T::lit(extent as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = s;
        shape.remove(axis);
        let ng = self.ng(x);
        self.push(
            Tensor::new(shape, out),
            Op::ReduceMean {
                x,
                outer,
                extent,
                inner,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(total), Op::Sum(x), ng)
    }

    /// Divide each row along the last axis by `max(‖row‖₂, eps)`. A row whose
    /// norm does not exceed `eps` comes out scaled by `1/eps` (zeros stay zero).
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().expect("l2_normalize on a scalar");
        assert!(d >= 1, "l2_normalize over an empty axis");
        let mut norms = Vec::with_capacity(v.len() / d);
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(d) {
            let n = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            if n <= eps {
                log::warn!("l2_normalize: row norm {} is within eps, output left unnormalized", n);
            }
            let n = n.max(eps);
            norms.push(n);
            out.extend(row.iter().map(|&a| a / n));
        }
        let shape = v.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::L2Normalize { x, eps, norms }, ng)
    }

    /// Mean over rows of `-log softmax(logits)[label]`, stabilised with log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert!(
            s.len() == 2 && s[0] == labels.len(),
            "softmax_cross_entropy expects B×N logits with B labels, got {:?} and {}",
            s,
            labels.len()
        );
        let (b, n) = (s[0], s[1]);
        assert!(b > 0, "softmax_cross_entropy on an empty batch");
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * n);
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            assert!(label < n, "label {} out of range for {} classes", label, n);
            let row = &src[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total = total + (lse - row[label]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::lit(b as f64);
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "stack of zero tensors");
        let s = self.shape(xs[0]).to_vec();
        let mut data = Vec::with_capacity(xs.len() * self.value(xs[0]).len());
        for &x in xs {
            assert_eq!(self.shape(x), &s[..], "stack shape mismatch");
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![xs.len()];
        shape.extend(s);
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::new(shape, data), Op::Stack(xs.to_vec()), ng)
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(
            !s.is_empty() && start + len <= s[0],
            "slice_rows {}..{} out of range for {:?}",
            start,
            start + len,
            s
        );
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut shape = s;
        shape[0] = len;
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data), Op::SliceRows { x, start }, ng)
    }

    /// Fingerprint of every branch decision taken in the forward pass
    /// (ReLU signs, pooling argmaxes, eps guards). Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn branch_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                Op::L2Normalize { eps, norms, .. } => {
                    for &n in norms {
                        (n <= *eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a one-element `loss`. Each node is visited once,
    /// in reverse insertion order.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    add_into(&mut grads[a.0], m * k, |da| kernels::matmul_nt_acc(g, bv, da, m, n, k));
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    add_into(&mut grads[b.0], k * n, |db| kernels::matmul_tn_acc(av, g, db, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                add_into(&mut grads[x.0], r * c, |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dx[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], len(*x), |dx| {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v)
            }),
            Op::Conv2d { x, k, bias, geom, cols } => {
                let c_out = self.shape(*k)[0];
                let p = geom.positions();
                let pl = geom.patch_len();
                if let Some(b) = bias {
                    if self.ng(*b) {
                        add_into(&mut grads[b.0], c_out, |db| {
                            for (co, d) in db.iter_mut().enumerate() {
                                *d = *d + g[co * p..(co + 1) * p].iter().copied().sum();
                            }
                        });
                    }
                }
                if self.ng(*k) {
                    add_into(&mut grads[k.0], c_out * pl, |dk| {
                        kernels::matmul_nt_acc(g, cols, dk, c_out, p, pl)
                    });
                }
                if self.ng(*x) {
                    let kv = self.value(*k).data();
                    let mut dcols = vec![T::zero(); pl * p];
                    kernels::matmul_tn_acc(kv, g, &mut dcols, pl, c_out, p);
                    add_into(&mut grads[x.0], len(*x), |dx| kernels::col2im_acc(&dcols, geom, dx));
                }
            }
            Op::MaxPool2d { x, argmax } => add_into(&mut grads[x.0], len(*x), |dx| {
                for (&idx, &v) in argmax.iter().zip(g) {
                    dx[idx] = dx[idx] + v;
                }
            }),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                add_into(&mut grads[x.0], xv.len(), |dx| {
                    for ((d, &v), &gi) in dx.iter_mut().zip(xv).zip(g) {
                        if v > T::zero() {
                            *d = *d + gi;
                        }
                    }
                })
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                add_into(&mut grads[x.0], y.len(), |dx| {
                    for ((d, &s), &gi) in dx.iter_mut().zip(y).zip(g) {
                        *d = *d + gi * s * (T::one() - s);
                    }
                })
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    add_into(&mut grads[a.0], av.len(), |da| {
                        for ((d, &y), &gi) in da.iter_mut().zip(bv).zip(g) {
                            *d = *d + gi * y;
                        }
                    });
                }
                if self.ng(*b) {
                    add_into(&mut grads[b.0], bv.len(), |db| {
                        for ((d, &y), &gi) in db.iter_mut().zip(av).zip(g) {
                            *d = *d + gi * y;
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.ng(*a) {
                    add_into(&mut grads[a.0], g.len(), |da| {
                        da.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v)
                    });
                }
                if self.ng(*b) {
                    add_into(&mut grads[b.0], g.len(), |db| {
                        db.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + sign * v)
                    });
                }
            }
            Op::Scale(x, c) => add_into(&mut grads[x.0], g.len(), |dx| {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *c)
            }),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                if self.ng(*x) {
                    add_into(&mut grads[x.0], g.len(), |dx| {
                        dx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * c)
                    });
                }
                if self.ng(*s) {
                    let xv = self.value(*x).data();
                    let total: T = xv.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    add_into(&mut grads[s.0], 1, |ds| ds[0] = ds[0] + total);
                }
            }
            Op::ReduceMean {
                x,
                outer,
                extent,
                inner,
            } => {
                let inv = T::one() / T::lit(*extent as f64);
                add_into(&mut grads[x.0], len(*x), |dx| {
                    for o in 0..*outer {
                        for e in 0..*extent {
                            for i in 0..*inner {
                                let d = &mut dx[(o * extent + e) * inner + i];
                                *d = *d + g[o * inner + i] * inv;
                            }
                        }
                    }
                })
            }
            Op::Sum(x) => add_into(&mut grads[x.0], len(*x), |dx| {
                dx.iter_mut().for_each(|d| *d = *d + g[0])
            }),
            Op::L2Normalize { x, eps, norms } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                add_into(&mut grads[x.0], y.len(), |dx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dr = &mut dx[r * d..(r + 1) * d];
                        if n > *eps {
                            let proj: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for ((o, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                                *o = *o + (gi - yi * proj) / n;
                            }
                        } else {
                            for (o, &gi) in dr.iter_mut().zip(gr) {
                                *o = *o + gi / n;
                            }
                        }
                    }
                })
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let n = self.shape(*logits)[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                add_into(&mut grads[logits.0], probs.len(), |dl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..n {
                            let mut v = probs[r * n + c];
                            if c == label {
                                v = v - T::one();
                            }
                            dl[r * n + c] = dl[r * n + c] + v * scale;
                        }
                    }
                })
            }
            Op::Stack(xs) => {
                let chunk = g.len() / xs.len();
                for (i, x) in xs.iter().enumerate() {
                    if self.ng(*x) {
                        let part = &g[i * chunk..(i + 1) * chunk];
                        add_into(&mut grads[x.0], chunk, |dx| {
                            dx.iter_mut().zip(part).for_each(|(d, &v)| *d = *d + v)
                        });
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let s = self.shape(*x);
                let row: usize = s[1..].iter().product();
                let offset = start * row;
                add_into(&mut grads[x.0], len(*x), |dx| {
                    for (i, &v) in g.iter().enumerate() {
                        dx[offset + i] = dx[offset + i] + v;
                    }
                })
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::Conv2d { .. } => "conv2d",
        Op::MaxPool2d { .. } => "maxpool2d",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Hadamard(..) => "hadamard",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Scale(..) => "scale",
        Op::MulScalar(..) => "mul_scalar",
        Op::ReduceMean { .. } => "reduce_mean",
        Op::Sum(_) => "sum",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        Op::Stack(_) => "stack",
        Op::SliceRows { .. } => "slice_rows",
    }
}
