//! Define-by-run reverse-mode autodiff tape.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse. A node tracks gradients only when at least one
//! of its inputs does, so constants and frozen parameters cost nothing on the
//! backward pass.

use crate::kernels::{self, ConvGeom};
use crate::tensor::gemm;
use crate::{Float, Tensor};

/// Handle to a node on a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRow(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MaxPool { x: Var, k: usize, argmax: Vec<u32> },
    Resize { x: Var },
    GlobalAvgPool(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    L2Normalize { x: Var, eps: T },
    GroupNorm { x: Var, inv_std: Vec<T> },
    Stretch { x: Var, extrema: Vec<Option<(usize, usize)>> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    InfoNce { q: Var, k: Var, negatives: Var, mask: Option<Vec<bool>>, tau: T },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    /// Whether gradients flow back through `v`.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tr(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies `v` into a fresh constant; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let t = self.tr(a) || self.tr(b);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let t = self.tr(a) || self.tr(b);
        self.push(value, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let t = self.tr(a) || self.tr(b);
        self.push(value, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let t = self.tr(a);
        self.push(value, Op::Scale(a, s), t)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul on non-matrices {sa:?} {sb:?}");
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner mismatch {sa:?}{} x {sb:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" });
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            T::one(),
            view(self.value(a).data(), &sa, ta),
            view(self.value(b).data(), &sb, tb),
            T::zero(),
            (out.data_mut(), n as isize, 1),
        );
        let t = self.tr(a) || self.tr(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, t)
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.shape(x);
        let n = *xs.last().expect("rank >= 1");
        assert_eq!(self.value(bias).numel(), n, "add_row bias length");
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let t = self.tr(x) || self.tr(bias);
        self.push(value, Op::AddRow(x, bias), t)
    }

    /// `x[N, C, ...] + bias[C]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let (c, inner) = channel_layout(self.shape(x));
        assert_eq!(self.value(bias).numel(), c, "add_channel bias length");
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(inner).enumerate() {
            let bb = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bb);
        }
        let t = self.tr(x) || self.tr(bias);
        self.push(value, Op::AddChannel(x, bias), t)
    }

    /// `x[N, C, ...] * scale[C]`.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Var {
        let (c, inner) = channel_layout(self.shape(x));
        assert_eq!(self.value(scale).numel(), c, "mul_channel scale length");
        let s = self.value(scale).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(inner).enumerate() {
            let ss = s[i % c];
            chunk.iter_mut().for_each(|v| *v *= ss);
        }
        let t = self.tr(x) || self.tr(scale);
        self.push(value, Op::MulChannel(x, scale), t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let t = self.tr(x);
        self.push(value, Op::Relu(x), t)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let t = self.tr(x);
        self.push(value, Op::LeakyRelu(x, slope), t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let t = self.tr(x);
        self.push(value, Op::Sigmoid(x), t)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        let t = self.tr(x);
        self.push(value, Op::Abs(x), t)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let t = self.tr(x);
        self.push(value, Op::Square(x), t)
    }

    /// Cross-correlation of NCHW input with OIHW weight, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad);
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new(&[geom.n, geom.o, geom.oh, geom.ow], data);
        let t = self.tr(x) || self.tr(w);
        self.push(value, Op::Conv2d { x, w, geom }, t)
    }

    /// Non-overlapping `k`x`k` max pooling (floor mode).
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "max_pool2d expects NCHW");
        let (data, argmax) = kernels::max_pool_forward(self.value(x).data(), s[0] * s[1], s[2], s[3], k);
        let value = Tensor::new(&[s[0], s[1], s[2] / k, s[3] / k], data);
        let t = self.tr(x);
        self.push(value, Op::MaxPool { x, k, argmax }, t)
    }

    /// Bilinear resize of NCHW planes (half-pixel centers, edge clamped).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "resize_bilinear expects NCHW");
        let data = kernels::resize_forward(self.value(x).data(), s[0] * s[1], (s[2], s[3]), (oh, ow));
        let value = Tensor::new(&[s[0], s[1], oh, ow], data);
        let t = self.tr(x);
        self.push(value, Op::Resize { x }, t)
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "global_avg_pool expects NCHW");
        let hw = s[2] * s[3];
        let inv = T::one() / T::of(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], data);
        let t = self.tr(x);
        self.push(value, Op::GlobalAvgPool(x), t)
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len() && s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                "concat shape mismatch {first:?} vs {s:?}"
            );
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = parts.iter().any(|&p| self.tr(p));
        self.push(Tensor::new(&shape, data), Op::Concat { parts: parts.to_vec(), axis }, t)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let t = self.tr(x);
        self.push(value, Op::Reshape(x), t)
    }

    /// Row-wise `x / (||x|| + eps)` on a matrix.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "l2_normalize_rows expects a matrix");
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(s[1]) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let inv = T::one() / (norm + eps);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let t = self.tr(x);
        self.push(value, Op::L2Normalize { x, eps }, t)
    }

    /// Group normalization without affine terms on NCHW input.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: T) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() >= 2 && s[1] % groups == 0, "channels {s:?} not divisible by {groups} groups");
        let (data, inv_std) = kernels::group_norm_forward(self.value(x).data(), s[0] * groups, eps);
        let t = self.tr(x);
        self.push(
            Tensor::new(&s, data),
            Op::GroupNorm { x, inv_std },
            t,
        )
    }

    /// Per-sample affine stretch `(x - min) / (max - min)` over all non-batch axes.
    ///
    /// Samples whose values are all equal map to zeros.
    pub fn stretch_to_unit(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let per: usize = s[1..].iter().product();
        let mut value = self.value(x).clone();
        let mut extrema = Vec::with_capacity(s[0]);
        for chunk in value.data_mut().chunks_mut(per) {
            let (mut lo, mut hi) = (0, 0);
            for (i, &v) in chunk.iter().enumerate() {
                if v < chunk[lo] {
                    lo = i;
                }
                if v > chunk[hi] {
                    hi = i;
                }
            }
            let (mn, mx) = (chunk[lo], chunk[hi]);
            if mx > mn {
                let inv = T::one() / (mx - mn);
                chunk.iter_mut().for_each(|v| *v = (*v - mn) * inv);
                extrema.push(Some((lo, hi)));
            } else {
                chunk.fill(T::zero());
                extrema.push(None);
            }
        }
        let t = self.tr(x);
        self.push(value, Op::Stretch { x, extrema }, t)
    }

    /// Per-row softmax cross-entropy, `[m, n] -> [m]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert!(s.len() == 2 && s[0] == targets.len(), "cross_entropy shape {s:?} vs {} targets", targets.len());
        let lv = self.value(logits);
        let data = (0..s[0])
            .map(|i| {
                let row = lv.row(i);
                assert!(targets[i] < s[1], "target {} out of range {}", targets[i], s[1]);
                log_sum_exp(row.iter().copied()) - row[targets[i]]
            })
            .collect();
        let t = self.tr(logits);
        self.push(
            Tensor::new(&[s[0]], data),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            t,
        )
    }

    /// Batched InfoNCE with cosine logits scaled by `1/tau`.
    ///
    /// Row `i` uses `k[i]` as its positive and every row `j` of `negatives`
    /// with `mask[i * M + j]` set as a negative. Output is `[m]`.
    pub fn info_nce(&mut self, q: Var, k: Var, negatives: Var, mask: Option<Vec<bool>>, tau: T) -> Var {
        let (qs, ks, ns) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(negatives).to_vec());
        assert!(qs.len() == 2 && qs == ks, "info_nce q {qs:?} k {ks:?}");
        assert!(ns.len() == 2 && ns[1] == qs[1], "info_nce negatives {ns:?} vs dim {}", qs[1]);
        let (m, big_m) = (qs[0], ns[0]);
        if let Some(mask) = &mask {
            assert_eq!(mask.len(), m * big_m, "info_nce mask size");
        }
        let (pos, neg) = nce_logits(self.value(q), self.value(k), self.value(negatives), tau);
        let data = (0..m)
            .map(|i| {
                let allowed = neg[i * big_m..(i + 1) * big_m]
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| mask.as_ref().is_none_or(|mk| mk[i * big_m + j]))
                    .map(|(_, &v)| v);
                log_sum_exp(std::iter::once(pos[i]).chain(allowed)) - pos[i]
            })
            .collect();
        let t = self.tr(q) || self.tr(k) || self.tr(negatives);
        self.push(Tensor::new(&[m], data), Op::InfoNce { q, k, negatives, mask, tau }, t)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let t = self.tr(x);
        self.push(value, Op::Sum(x), t)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / T::of(v.numel() as f64));
        let t = self.tr(x);
        self.push(value, Op::Mean(x), t)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar {:?}", self.shape(loss));
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.tr(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.tr(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.tr(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.tr(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * *s)),
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = g.dim(1);
                if self.tr(*a) {
                    // d op(a) = g @ op(b)^T, written into a's storage layout
                    let mut da = Tensor::zeros(&sa);
                    let dst = if *ta { (da.data_mut(), 1, m as isize) } else { (da.data_mut(), k as isize, 1) };
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        (g.data(), n as isize, 1),
                        view(self.value(*b).data(), &sb, !*tb),
                        T::zero(),
                        dst,
                    );
                    acc(*a, da);
                }
                if self.tr(*b) {
                    // d op(b) = op(a)^T @ g
                    let mut db = Tensor::zeros(&sb);
                    let dst = if *tb { (db.data_mut(), 1, k as isize) } else { (db.data_mut(), n as isize, 1) };
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        view(self.value(*a).data(), &sa, !*ta),
                        (g.data(), n as isize, 1),
                        T::zero(),
                        dst,
                    );
                    acc(*b, db);
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.clone());
                if self.tr(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*bias, Tensor::new(self.shape(*bias), db));
                }
            }
            Op::AddChannel(x, bias) => {
                acc(*x, g.clone());
                if self.tr(*bias) {
                    let (c, inner) = channel_layout(self.shape(*x));
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    acc(*bias, Tensor::new(self.shape(*bias), db));
                }
            }
            Op::MulChannel(x, scale) => {
                let (c, inner) = channel_layout(self.shape(*x));
                let s = self.value(*scale).data();
                if self.tr(*x) {
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        let ss = s[i % c];
                        chunk.iter_mut().for_each(|v| *v *= ss);
                    }
                    acc(*x, dx);
                }
                if self.tr(*scale) {
                    let mut ds = vec![T::zero(); c];
                    for (i, (gc, xc)) in g.data().chunks(inner).zip(self.value(*x).data().chunks(inner)).enumerate() {
                        ds[i % c] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    acc(*scale, Tensor::new(self.shape(*scale), ds));
                }
            }
            Op::Relu(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })),
            Op::LeakyRelu(x, slope) => {
                acc(*x, g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { gv * *slope }))
            }
            Op::Sigmoid(x) => acc(*x, g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y))),
            Op::Abs(x) => acc(
                *x,
                g.zip_map(self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Square(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| gv * (xv + xv))),
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    geom,
                    self.tr(*x),
                    self.tr(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(self.shape(*x), dx));
                }
                if let Some(dw) = dw {
                    acc(*w, Tensor::new(self.shape(*w), dw));
                }
            }
            Op::MaxPool { x, k, argmax } => {
                let s = self.shape(*x);
                let (hw, ohw) = (s[2] * s[3], (s[2] / k) * (s[3] / k));
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (i, (&gv, &a)) in g.data().iter().zip(argmax).enumerate() {
                    dx[(i / ohw) * hw + a as usize] += gv;
                }
                acc(*x, Tensor::new(s, dx));
            }
            Op::Resize { x } => {
                let s = self.shape(*x);
                let os = g.shape();
                let dx = kernels::resize_backward(g.data(), s[0] * s[1], (s[2], s[3]), (os[2], os[3]));
                acc(*x, Tensor::new(s, dx));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                acc(*x, Tensor::new(s, dx));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if self.tr(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[o * row + offset..o * row + offset + chunk]);
                        }
                        acc(p, Tensor::new(self.shape(p), d));
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x))),
            Op::L2Normalize { x, eps } => {
                let xv = self.value(*x);
                let n = xv.dim(1);
                let mut dx = Vec::with_capacity(xv.numel());
                for (xr, gr) in xv.data().chunks(n).zip(g.data().chunks(n)) {
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let s = norm + *eps;
                    let gx = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    let coef = if norm > T::zero() { gx / (norm * s * s) } else { T::zero() };
                    dx.extend(xr.iter().zip(gr).map(|(&xv, &gv)| gv / s - xv * coef));
                }
                acc(*x, Tensor::new(xv.shape(), dx));
            }
            Op::GroupNorm { x, inv_std } => {
                let dx = kernels::group_norm_backward(g.data(), node.value.data(), inv_std);
                acc(*x, Tensor::new(self.shape(*x), dx));
            }
            Op::Stretch { x, extrema } => {
                let xv = self.value(*x);
                let per = xv.numel() / xv.dim(0);
                let mut dx = vec![T::zero(); xv.numel()];
                for (b, ext) in extrema.iter().enumerate() {
                    let Some((lo, hi)) = *ext else { continue };
                    let xs = &xv.data()[b * per..(b + 1) * per];
                    let ys = &node.value.data()[b * per..(b + 1) * per];
                    let gs = &g.data()[b * per..(b + 1) * per];
                    let inv = T::one() / (xs[hi] - xs[lo]);
                    let d = &mut dx[b * per..(b + 1) * per];
                    let (mut dmin, mut dmax) = (T::zero(), T::zero());
                    for i in 0..per {
                        d[i] = gs[i] * inv;
                        dmin += gs[i] * (ys[i] - T::one());
                        dmax -= gs[i] * ys[i];
                    }
                    d[lo] += dmin * inv;
                    d[hi] += dmax * inv;
                }
                acc(*x, Tensor::new(xv.shape(), dx));
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let n = lv.dim(1);
                let mut dl = Vec::with_capacity(lv.numel());
                for (i, &t) in targets.iter().enumerate() {
                    let row = lv.row(i);
                    let lse = log_sum_exp(row.iter().copied());
                    let gi = g.data()[i];
                    dl.extend(row.iter().enumerate().map(|(j, &v)| {
                        let p = (v - lse).exp();
                        gi * (p - if j == t { T::one() } else { T::zero() })
                    }));
                }
                debug_assert_eq!(dl.len(), targets.len() * n);
                acc(*logits, Tensor::new(lv.shape(), dl));
            }
            Op::InfoNce { q, k, negatives, mask, tau } => {
                let (qv, kv, nv) = (self.value(*q), self.value(*k), self.value(*negatives));
                let (m, p, big_m) = (qv.dim(0), qv.dim(1), nv.dim(0));
                let (pos, neg) = nce_logits(qv, kv, nv, *tau);
                let inv_tau = T::one() / *tau;
                // coefficients: dL_i/dlogit, scaled by upstream gradient and 1/tau
                let mut cpos = vec![T::zero(); m];
                let mut cneg = vec![T::zero(); m * big_m];
                for i in 0..m {
                    let allowed = |j: usize| mask.as_ref().is_none_or(|mk| mk[i * big_m + j]);
                    let row = &neg[i * big_m..(i + 1) * big_m];
                    let lse = log_sum_exp(
                        std::iter::once(pos[i]).chain(row.iter().enumerate().filter(|(j, _)| allowed(*j)).map(|(_, &v)| v)),
                    );
                    let gi = g.data()[i] * inv_tau;
                    cpos[i] = gi * ((pos[i] - lse).exp() - T::one());
                    for j in 0..big_m {
                        if allowed(j) {
                            cneg[i * big_m + j] = gi * (row[j] - lse).exp();
                        }
                    }
                }
                if self.tr(*q) {
                    let mut dq = Tensor::zeros(&[m, p]);
                    gemm(m, big_m, p, T::one(), (&cneg, big_m as isize, 1), (nv.data(), p as isize, 1), T::zero(), (dq.data_mut(), p as isize, 1));
                    for i in 0..m {
                        let (dqr, kr) = (&mut dq.data_mut()[i * p..(i + 1) * p], kv.row(i));
                        for (d, &kk) in dqr.iter_mut().zip(kr) {
                            *d += cpos[i] * kk;
                        }
                    }
                    acc(*q, dq);
                }
                if self.tr(*k) {
                    let mut dk = qv.clone();
                    for (i, row) in dk.data_mut().chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v *= cpos[i]);
                    }
                    acc(*k, dk);
                }
                if self.tr(*negatives) {
                    let mut dn = Tensor::zeros(&[big_m, p]);
                    gemm(big_m, m, p, T::one(), (&cneg, 1, big_m as isize), (qv.data(), p as isize, 1), T::zero(), (dn.data_mut(), p as isize, 1));
                    acc(*negatives, dn);
                }
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gv = g.item() / T::of(n as f64);
                acc(*x, Tensor::full(self.shape(*x), gv));
            }
        }
    }
}

fn view<'a, T>(data: &'a [T], shape: &[usize], transposed: bool) -> (&'a [T], isize, isize) {
    if transposed {
        (data, 1, shape[1] as isize)
    } else {
        (data, shape[1] as isize, 1)
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize) {
    assert!(shape.len() >= 2, "channel op on rank {} tensor", shape.len());
    (shape[1], shape[2..].iter().product())
}

fn nce_logits<T: Float>(q: &Tensor<T>, k: &Tensor<T>, negatives: &Tensor<T>, tau: T) -> (Vec<T>, Vec<T>) {
    let (m, p, big_m) = (q.dim(0), q.dim(1), negatives.dim(0));
    let inv_tau = T::one() / tau;
    let pos = (0..m)
        .map(|i| q.row(i).iter().zip(k.row(i)).map(|(&a, &b)| a * b).sum::<T>() * inv_tau)
        .collect();
    let mut neg = vec![T::zero(); m * big_m];
    gemm(m, p, big_m, inv_tau, (q.data(), p as isize, 1), (negatives.data(), 1, p as isize), T::zero(), (&mut neg, big_m as isize, 1));
    (pos, neg)
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp<T: Float>(values: impl Iterator<Item = T> + Clone) -> T {
    let mx = values.clone().fold(T::neg_infinity(), |a, b| a.max(b));
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + values.map(|v| (v - mx).exp()).sum::<T>().ln()
}
