//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle onto a node of a dynamic
//! computation graph. Operations on traced tensors record the op that
//! produced them; [`Tensor::backward`] walks the graph in reverse
//! topological order and accumulates gradients into the grad buffers
//! of `requires_grad` leaves. Graphs are rebuilt on every forward pass
//! and freed when the last handle drops.
//!
//! Handles are `Rc`-based: a graph lives on one thread. Distinct
//! models/graphs on distinct threads share nothing.

mod adam;
mod kernels;

pub use adam::{adam_defaults, adam_step, Parameter};

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct TensorInner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Option<Op<T>>,
}

enum Op<T: Scalar> {
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    MaxPool2x2 {
        input: Tensor<T>,
        argmax: Vec<usize>,
    },
    Relu(Tensor<T>),
    Tanh(Tensor<T>),
    SpatialSoftmax(Tensor<T>),
    BroadcastMul {
        features: Tensor<T>,
        map: Tensor<T>,
    },
    ConcatChannels(Vec<Tensor<T>>),
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    Offset(Tensor<T>),
    Sum(Tensor<T>),
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        match self {
            Op::Conv2d { input, weight, bias } => vec![input.clone(), weight.clone(), bias.clone()],
            Op::MaxPool2x2 { input, .. } => vec![input.clone()],
            Op::Relu(x) | Op::Tanh(x) | Op::SpatialSoftmax(x) => vec![x.clone()],
            Op::BroadcastMul { features, map } => vec![features.clone(), map.clone()],
            Op::ConcatChannels(xs) => xs.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a.clone(), b.clone()],
            Op::Scale(x, _) | Op::Offset(x) | Op::Sum(x) => vec![x.clone()],
        }
    }
}

/// Handle onto a graph node; clones share the node.
pub struct Tensor<T: Scalar> {
    inner: Rc<RefCell<TensorInner<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(f, "Tensor(id={}, shape={:?})", inner.id, inner.shape)
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_inner(shape: Vec<usize>, data: Vec<T>, op: Option<Op<T>>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad: false,
                grad: None,
                op,
            })),
        }
    }

    /// New leaf from row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Self::from_inner(shape.to_vec(), data, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_inner(shape.to_vec(), vec![T::zero(); numel], None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self::from_inner(shape.to_vec(), vec![v; numel], None)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_inner(vec![1], vec![v], None)
    }

    /// New node produced by `op`; the op is only recorded when some
    /// parent is traced, so pure-constant computations stay graph-free.
    fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        let traced = op.parents().iter().any(Tensor::traced);
        Self::from_inner(shape, data, traced.then_some(op))
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrow the values without copying.
    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// Value of a one-element tensor.
    pub fn value(&self) -> T {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1);
        inner.data[0]
    }

    /// Mutate leaf values in place. Panics on non-leaf nodes: graph
    /// nodes cache forward results and must not change under a graph.
    pub fn modify(&self, f: impl FnOnce(&mut [T])) {
        let mut inner = self.inner.borrow_mut();
        assert!(inner.op.is_none(), "cannot modify a non-leaf tensor");
        f(&mut inner.data);
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Mark a leaf for gradient accumulation. Panics on non-leaf nodes.
    pub fn set_requires_grad(&self, on: bool) {
        let mut inner = self.inner.borrow_mut();
        assert!(inner.op.is_none(), "requires_grad applies to leaves only");
        inner.requires_grad = on;
        if !on {
            inner.grad = None;
        }
    }

    /// Builder form of [`set_requires_grad`](Self::set_requires_grad).
    pub fn traced_leaf(self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    fn traced(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || inner.op.is_some()
    }

    fn check_rank3(&self, what: &str) -> Result<(usize, usize, usize), TensorError> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "{what} must have shape [C,H,W], got {s:?}"
            )));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Same-padded 2-D convolution with gradients w.r.t. input, weight
    /// and bias. `weight` is `[C_out, C_in, k, k]` with odd `k`.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (c_in, h, w) = self.check_rank3("conv2d input")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d weight must be [C_out,C_in,k,k], got {ws:?}"
            )));
        }
        let (c_out, k) = (ws[0], ws[2]);
        if k % 2 == 0 {
            return Err(TensorError::ShapeMismatch(format!("kernel size {k} must be odd")));
        }
        if ws[1] != c_in {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d weight expects {} input channels, input has {c_in}",
                ws[1]
            )));
        }
        if bias.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d bias must be [{c_out}], got {:?}",
                bias.shape()
            )));
        }
        let mut out = vec![T::zero(); c_out * h * w];
        kernels::conv2d_forward(
            &self.data(),
            c_in,
            h,
            w,
            &weight.data(),
            c_out,
            k,
            &bias.data(),
            &mut out,
        );
        Ok(Tensor::from_op(
            vec![c_out, h, w],
            out,
            Op::Conv2d { input: self.clone(), weight: weight.clone(), bias: bias.clone() },
        ))
    }

    /// Non-overlapping 2x2 max pooling; H and W must be even.
    pub fn maxpool2x2(&self) -> Result<Tensor<T>, TensorError> {
        let (c, h, w) = self.check_rank3("maxpool input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "maxpool2x2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let mut out = vec![T::zero(); c * (h / 2) * (w / 2)];
        let mut argmax = vec![0usize; out.len()];
        kernels::maxpool2x2_forward(&self.data(), c, h, w, &mut out, &mut argmax);
        Ok(Tensor::from_op(
            vec![c, h / 2, w / 2],
            out,
            Op::MaxPool2x2 { input: self.clone(), argmax },
        ))
    }

    pub fn relu(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x.max(T::zero())).collect();
        Tensor::from_op(self.shape(), out, Op::Relu(self.clone()))
    }

    pub fn tanh(&self) -> Tensor<T> {
        let out = self.data().iter().map(|x| x.tanh()).collect();
        Tensor::from_op(self.shape(), out, Op::Tanh(self.clone()))
    }

    /// Softmax over all spatial positions of a `[1,H,W]` map; the
    /// output is positive and sums to 1.
    pub fn spatial_softmax(&self) -> Result<Tensor<T>, TensorError> {
        let (c, h, w) = self.check_rank3("spatial_softmax input")?;
        if c != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "spatial_softmax expects a single channel, got {c}"
            )));
        }
        let mut out = vec![T::zero(); h * w];
        kernels::spatial_softmax_forward(&self.data(), &mut out);
        Ok(Tensor::from_op(vec![1, h, w], out, Op::SpatialSoftmax(self.clone())))
    }

    /// Multiply `[C,H,W]` features by a `[1,H,W]` map, broadcast over
    /// channels.
    pub fn broadcast_mul(&self, map: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (c, h, w) = self.check_rank3("broadcast_mul features")?;
        if map.shape() != [1, h, w] {
            return Err(TensorError::ShapeMismatch(format!(
                "broadcast_mul map must be [1,{h},{w}], got {:?}",
                map.shape()
            )));
        }
        let plane = h * w;
        let feat = self.data();
        let m = map.data();
        let mut out = vec![T::zero(); c * plane];
        for ch in 0..c {
            for p in 0..plane {
                out[ch * plane + p] = feat[ch * plane + p] * m[p];
            }
        }
        drop(feat);
        drop(m);
        Ok(Tensor::from_op(
            vec![c, h, w],
            out,
            Op::BroadcastMul { features: self.clone(), map: map.clone() },
        ))
    }

    /// Concatenate `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch("concat of zero tensors".into()));
        }
        let (_, h, w) = parts[0].check_rank3("concat input")?;
        let mut c_total = 0;
        for p in parts {
            let (c, ph, pw) = p.check_rank3("concat input")?;
            if (ph, pw) != (h, w) {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat spatial dims differ: {h}x{w} vs {ph}x{pw}"
                )));
            }
            c_total += c;
        }
        let mut out = Vec::with_capacity(c_total * h * w);
        for p in parts {
            out.extend_from_slice(&p.data());
        }
        Ok(Tensor::from_op(
            vec![c_total, h, w],
            out,
            Op::ConcatChannels(parts.to_vec()),
        ))
    }

    fn zip_same_shape(&self, other: &Tensor<T>, what: &str) -> Result<Vec<usize>, TensorError> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(TensorError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
        }
        Ok(a)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let shape = self.zip_same_shape(other, "add")?;
        let out = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(shape, out, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let shape = self.zip_same_shape(other, "sub")?;
        let out = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(shape, out, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let shape = self.zip_same_shape(other, "mul")?;
        let out = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(shape, out, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x * factor).collect();
        Tensor::from_op(self.shape(), out, Op::Scale(self.clone(), factor))
    }

    pub fn offset(&self, c: T) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(self.shape(), out, Op::Offset(self.clone()))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for v in self.data().iter() {
            acc += *v;
        }
        Tensor::from_op(vec![1], vec![acc], Op::Sum(self.clone()))
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of this pass
    /// are accumulated into the persistent grad buffers of every
    /// reachable `requires_grad` leaf; calling again without
    /// [`zero_grad`](Self::zero_grad) adds another full pass.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape()));
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else { continue };
            node.propagate(&g, &mut grads);
            let mut inner = node.inner.borrow_mut();
            if inner.requires_grad {
                let grad = inner.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
                for (dst, src) in grad.iter_mut().zip(&g) {
                    *dst += *src;
                }
            }
        }
        Ok(())
    }

    /// Postorder over traced nodes: parents precede children.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            let parents = node.inner.borrow().op.as_ref().map(Op::parents);
            stack.push((node, true));
            if let Some(parents) = parents {
                for p in parents {
                    if p.traced() && !visited.contains(&p.id()) {
                        stack.push((p, false));
                    }
                }
            }
        }
        order
    }

    /// Accumulate this node's gradient contribution into its parents'
    /// pass-local buffers. Untraced parents are skipped.
    fn propagate(&self, g: &[T], grads: &mut HashMap<u64, Vec<T>>) {
        fn entry<'m, T: Scalar>(
            grads: &'m mut HashMap<u64, Vec<T>>,
            t: &Tensor<T>,
        ) -> Option<&'m mut Vec<T>> {
            if !t.traced() {
                return None;
            }
            let n = t.numel();
            Some(grads.entry(t.id()).or_insert_with(|| vec![T::zero(); n]))
        }

        let inner = self.inner.borrow();
        let Some(op) = &inner.op else { return };
        match op {
            Op::Conv2d { input, weight, bias } => {
                let (c_in, h, w) = {
                    let s = input.shape();
                    (s[0], s[1], s[2])
                };
                let ws = weight.shape();
                let (c_out, k) = (ws[0], ws[2]);
                if let Some(gi) = entry(grads, input) {
                    kernels::conv2d_backward_input(&weight.data(), g, c_in, h, w, c_out, k, gi);
                }
                if let Some(gw) = entry(grads, weight) {
                    kernels::conv2d_backward_weight(&input.data(), g, c_in, h, w, c_out, k, gw);
                }
                if let Some(gb) = entry(grads, bias) {
                    kernels::conv2d_backward_bias(g, c_out, h * w, gb);
                }
            }
            Op::MaxPool2x2 { input, argmax } => {
                if let Some(gi) = entry(grads, input) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gi[src] += g[o];
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gi) = entry(grads, x) {
                    for (i, xv) in x.data().iter().enumerate() {
                        if *xv > T::zero() {
                            gi[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gi) = entry(grads, x) {
                    for (i, y) in inner.data.iter().enumerate() {
                        gi[i] += g[i] * (T::one() - *y * *y);
                    }
                }
            }
            Op::SpatialSoftmax(x) => {
                if let Some(gi) = entry(grads, x) {
                    let y = &inner.data;
                    let mut dot = T::zero();
                    for (gv, yv) in g.iter().zip(y) {
                        dot += *gv * *yv;
                    }
                    for i in 0..y.len() {
                        gi[i] += y[i] * (g[i] - dot);
                    }
                }
            }
            Op::BroadcastMul { features, map } => {
                let plane = {
                    let s = map.shape();
                    s[1] * s[2]
                };
                let c = features.numel() / plane;
                if let Some(gf) = entry(grads, features) {
                    let m = map.data();
                    for ch in 0..c {
                        for p in 0..plane {
                            gf[ch * plane + p] += g[ch * plane + p] * m[p];
                        }
                    }
                }
                if let Some(gm) = entry(grads, map) {
                    let f = features.data();
                    for ch in 0..c {
                        for p in 0..plane {
                            gm[p] += g[ch * plane + p] * f[ch * plane + p];
                        }
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let mut off = 0;
                for part in parts {
                    let n = part.numel();
                    if let Some(gp) = entry(grads, part) {
                        for (dst, src) in gp.iter_mut().zip(&g[off..off + n]) {
                            *dst += *src;
                        }
                    }
                    off += n;
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = entry(grads, a) {
                    for (dst, src) in ga.iter_mut().zip(g) {
                        *dst += *src;
                    }
                }
                if let Some(gb) = entry(grads, b) {
                    for (dst, src) in gb.iter_mut().zip(g) {
                        *dst += *src;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = entry(grads, a) {
                    for (dst, src) in ga.iter_mut().zip(g) {
                        *dst += *src;
                    }
                }
                if let Some(gb) = entry(grads, b) {
                    for (dst, src) in gb.iter_mut().zip(g) {
                        *dst -= *src;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = entry(grads, a) {
                    let bd = b.data();
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if let Some(gb) = entry(grads, b) {
                    let ad = a.data();
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(gi) = entry(grads, x) {
                    for (dst, src) in gi.iter_mut().zip(g) {
                        *dst += *src * *factor;
                    }
                }
            }
            Op::Offset(x) => {
                if let Some(gi) = entry(grads, x) {
                    for (dst, src) in gi.iter_mut().zip(g) {
                        *dst += *src;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gi) = entry(grads, x) {
                    for dst in gi.iter_mut() {
                        *dst += g[0];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_backward_is_ones() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).traced_leaf();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn square_backward_is_two_x() {
        let x = t(&[1], &[3.0]).traced_leaf();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn disconnected_leaf_keeps_no_grad() {
        let x = t(&[1], &[3.0]).traced_leaf();
        let y = t(&[1], &[4.0]).traced_leaf();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
        assert!(y.grad().is_none());
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let x = t(&[3], &[1.0, -2.0, 0.5]).traced_leaf();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        let once = x.grad().unwrap();
        loss.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = t(&[2], &[1.0, 2.0]).traced_leaf();
        assert!(matches!(x.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let x = t(&[2, 2, 2], &[0.0; 8]);
        let w = t(&[1, 3, 1, 1], &[0.0; 3]);
        let b = t(&[1], &[0.0]);
        assert!(matches!(x.conv2d(&w, &b), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn even_kernel_rejected() {
        let x = t(&[1, 2, 2], &[0.0; 4]);
        let w = t(&[1, 1, 2, 2], &[0.0; 4]);
        let b = t(&[1], &[0.0]);
        assert!(matches!(x.conv2d(&w, &b), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn maxpool_odd_dims_rejected() {
        let x = t(&[1, 3, 2], &[0.0; 6]);
        assert!(matches!(x.maxpool2x2(), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = t(&[1, 2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).traced_leaf();
        let loss = x.maxpool2x2().unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_and_tanh_forward() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
        assert_eq!(t(&[1], &[0.0]).tanh().to_vec(), vec![0.0]);
    }

    #[test]
    fn broadcast_mul_identity_and_zero() {
        let f = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let ones = Tensor::full(&[1, 2, 2], 1.0);
        assert_eq!(f.broadcast_mul(&ones).unwrap().to_vec(), f.to_vec());
        let zeros = Tensor::zeros(&[1, 2, 2]);
        assert!(f.broadcast_mul(&zeros).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcast_mul_spatial_mismatch_rejected() {
        let f = t(&[1, 2, 2], &[0.0; 4]);
        let m = t(&[1, 2, 4], &[0.0; 8]);
        assert!(f.broadcast_mul(&m).is_err());
    }

    #[test]
    fn spatial_softmax_shift_invariant() {
        let vals = [0.3, -1.2, 2.4, 0.0, 1.1, -0.7];
        let a = t(&[1, 2, 3], &vals).spatial_softmax().unwrap();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 37.5).collect();
        let b = Tensor::from_vec(&[1, 2, 3], shifted).unwrap().spatial_softmax().unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn concat_splits_gradient() {
        let a = t(&[1, 2, 2], &[1.0; 4]).traced_leaf();
        let b = t(&[2, 2, 2], &[2.0; 8]).traced_leaf();
        let cat = Tensor::concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.shape(), vec![3, 2, 2]);
        cat.scale(2.0).sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![2.0; 8]);
    }

    #[test]
    fn untraced_computation_records_no_graph() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = x.relu().scale(2.0).sum();
        assert!(y.inner.borrow().op.is_none());
    }
}
