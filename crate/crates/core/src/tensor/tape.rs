use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, Padding};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Square,
    Abs,
}

enum Op<T> {
    /// Leaf or constant; nothing to propagate.
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Scale(usize, T),
    Sum(usize),
    Mean(usize),
    MatMul(usize, usize),
    Conv2d { x: usize, k: usize, geom: ConvGeom },
    ConvTranspose2d { x: usize, k: usize, geom: ConvGeom },
    SpatialSoftmax(usize),
    Blur { x: usize, k: usize },
    Gather { a: usize, index: Rc<[usize]> },
    ScatterAdd { a: usize, index: Rc<[usize]> },
    Concat { inputs: Vec<usize>, axis: usize },
    Reshape(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Record of operations for one forward/backward pass.
///
/// Nodes are appended in execution order; a node only ever refers to earlier
/// nodes, so a reverse sweep visits every consumer before its producers.
/// Operations whose inputs are all untracked are stored as constants.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by one reverse sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient reaching `var`, or `None` when no path carried one.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient reaching `var`, zeros when no path carried one.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.tape.nodes.borrow()[var.id].value.shape()),
        }
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked leaf: gradients are accumulated for it.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), true, Op::Leaf)
    }

    /// Untracked leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), false, Op::Leaf)
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push(value, false, Op::Leaf)
    }

    fn push(&self, value: Rc<Tensor<T>>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, name: &'static str, value: Tensor<T>, inputs: &[usize], op: Op<T>) -> Var<'_, T> {
        if cfg!(debug_assertions) && !value.is_finite() {
            let finite_inputs = inputs.iter().all(|&i| self.value(i).is_finite());
            assert!(!finite_inputs, "{name} produced non-finite output from finite inputs");
        }
        let requires_grad = inputs.iter().any(|&i| self.tracked(i));
        self.push(Rc::new(value), requires_grad, op)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in backward_rule(&nodes, node, &g)? {
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn want(nodes: &[Node<impl Real>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn backward_rule<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
    let val = |id: usize| &nodes[id].value;
    let mut out = Vec::with_capacity(2);
    match &node.op {
        Op::Leaf => {}
        &Op::Binary(kind, a, b) => {
            let (va, vb) = (val(a), val(b));
            let shape = node.value.shape();
            let mut ga = want(nodes, a).then(|| vec![T::zero(); va.numel()]);
            let mut gb = want(nodes, b).then(|| vec![T::zero(); vb.numel()]);
            let (da, db) = (va.data(), vb.data());
            let gd = g.data();
            kernels::for_each_broadcast(va.shape(), vb.shape(), shape, |o, ia, ib| {
                let (ca, cb) = match kind {
                    Binary::Add => (gd[o], gd[o]),
                    Binary::Sub => (gd[o], -gd[o]),
                    Binary::Mul => (gd[o] * db[ib], gd[o] * da[ia]),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += ca;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += cb;
                }
            });
            if let Some(ga) = ga {
                out.push((a, Tensor::new(va.shape(), ga)?));
            }
            if let Some(gb) = gb {
                out.push((b, Tensor::new(vb.shape(), gb)?));
            }
        }
        &Op::Unary(kind, a) => {
            let va = val(a);
            let data = va
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &gi)| match kind {
                    Unary::Relu => {
                        if x > T::zero() {
                            gi
                        } else {
                            T::zero()
                        }
                    }
                    Unary::Square => gi * (x + x),
                    Unary::Abs => {
                        if x > T::zero() {
                            gi
                        } else if x < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    }
                })
                .collect();
            out.push((a, Tensor::new(va.shape(), data)?));
        }
        &Op::Scale(a, c) => out.push((a, g.map(|v| v * c))),
        &Op::Sum(a) => out.push((a, Tensor::full(val(a).shape(), g.item()))),
        &Op::Mean(a) => {
            let n = T::of(val(a).numel() as f64);
            out.push((a, Tensor::full(val(a).shape(), g.item() / n)));
        }
        &Op::MatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if want(nodes, a) {
                let mut d = vec![T::zero(); m * k];
                T::gemm(m, n, k, g.data(), false, vb.data(), true, T::zero(), &mut d);
                out.push((a, Tensor::new(&[m, k], d)?));
            }
            if want(nodes, b) {
                let mut d = vec![T::zero(); k * n];
                T::gemm(k, m, n, va.data(), true, g.data(), false, T::zero(), &mut d);
                out.push((b, Tensor::new(&[k, n], d)?));
            }
        }
        &Op::Conv2d { x, k, geom } => {
            let (vx, vk) = (val(x), val(k));
            let (n, c, o) = (vx.shape()[0], vx.shape()[1], vk.shape()[0]);
            let (dx, dk) = kernels::conv2d_backward(
                vx.data(),
                n,
                c,
                vk.data(),
                o,
                &geom,
                g.data(),
                want(nodes, x),
                want(nodes, k),
            );
            if let Some(dx) = dx {
                out.push((x, Tensor::new(vx.shape(), dx)?));
            }
            if let Some(dk) = dk {
                out.push((k, Tensor::new(vk.shape(), dk)?));
            }
        }
        &Op::ConvTranspose2d { x, k, geom } => {
            let (vx, vk) = (val(x), val(k));
            let (n, o, c) = (vx.shape()[0], vx.shape()[1], vk.shape()[1]);
            let (dx, dk) = kernels::conv_transpose_backward(
                vx.data(),
                n,
                o,
                vk.data(),
                c,
                &geom,
                g.data(),
                want(nodes, x),
                want(nodes, k),
            );
            if let Some(dx) = dx {
                out.push((x, Tensor::new(vx.shape(), dx)?));
            }
            if let Some(dk) = dk {
                out.push((k, Tensor::new(vk.shape(), dk)?));
            }
        }
        &Op::SpatialSoftmax(a) => {
            let y = node.value.data();
            let shape = node.value.shape();
            let block = shape[shape.len() - 2] * shape[shape.len() - 1];
            let mut d = vec![T::zero(); y.len()];
            for ((yb, gb), db) in y.chunks(block).zip(g.data().chunks(block)).zip(d.chunks_mut(block)) {
                let inner: T = yb.iter().zip(gb).map(|(&yi, &gi)| yi * gi).sum();
                for ((di, &yi), &gi) in db.iter_mut().zip(yb).zip(gb) {
                    *di = yi * (gi - inner);
                }
            }
            out.push((a, Tensor::new(shape, d)?));
        }
        &Op::Blur { x, k } => {
            let (vx, vk) = (val(x), val(k));
            let s = vx.shape();
            let (kh, kw) = (vk.shape()[1], vk.shape()[2]);
            let (dx, dk) = kernels::blur_backward(
                vx.data(),
                s[0],
                s[1],
                s[2],
                s[3],
                vk.data(),
                kh,
                kw,
                g.data(),
                want(nodes, x),
                want(nodes, k),
            );
            if let Some(dx) = dx {
                out.push((x, Tensor::new(s, dx)?));
            }
            if let Some(dk) = dk {
                out.push((k, Tensor::new(vk.shape(), dk)?));
            }
        }
        Op::Gather { a, index } => {
            let va = val(*a);
            let mut d = vec![T::zero(); va.numel()];
            for (&i, &gi) in index.iter().zip(g.data()) {
                d[i] += gi;
            }
            out.push((*a, Tensor::new(va.shape(), d)?));
        }
        Op::ScatterAdd { a, index } => {
            let va = val(*a);
            let gd = g.data();
            let d = index.iter().map(|&i| gd[i]).collect();
            out.push((*a, Tensor::new(va.shape(), d)?));
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &i in inputs {
                let vi = val(i);
                let width = vi.shape()[*axis] * inner;
                if want(nodes, i) {
                    let mut d = Vec::with_capacity(vi.numel());
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + width]);
                    }
                    out.push((i, Tensor::new(vi.shape(), d)?));
                }
                offset += width;
            }
        }
        &Op::Reshape(a) => out.push((a, g.clone().reshape(val(a).shape())?)),
    }
    Ok(out)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracked(self.id)
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn binary(self, other: Var<'t, T>, kind: Binary, name: &'static str) -> Result<Var<'t, T>> {
        let (va, vb) = (self.value(), other.value());
        let shape = kernels::broadcast_shape(va.shape(), vb.shape())
            .ok_or_else(|| Error::shape(name, va.shape(), vb.shape()))?;
        let mut data = vec![T::zero(); shape.iter().product()];
        let (da, db) = (va.data(), vb.data());
        kernels::for_each_broadcast(va.shape(), vb.shape(), &shape, |o, ia, ib| {
            data[o] = match kind {
                Binary::Add => da[ia] + db[ib],
                Binary::Sub => da[ia] - db[ib],
                Binary::Mul => da[ia] * db[ib],
            }
        });
        let value = Tensor::new(&shape, data)?;
        Ok(self.tape.record(name, value, &[self.id, other.id], Op::Binary(kind, self.id, other.id)))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let value = self.value().map(|v| v * c);
        self.tape.record("scale", value, &[self.id], Op::Scale(self.id, c))
    }

    fn unary(self, kind: Unary, name: &'static str) -> Var<'t, T> {
        let value = self.value().map(|x| match kind {
            Unary::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
        });
        self.tape.record(name, value, &[self.id], Op::Unary(kind, self.id))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'t, T> {
        self.unary(Unary::Relu, "relu")
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(Unary::Square, "square")
    }

    /// `|x|`; the subgradient at 0 is 0.
    pub fn abs(self) -> Var<'t, T> {
        self.unary(Unary::Abs, "abs")
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.record("sum", value, &[self.id], Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let v = self.value();
        let value = Tensor::scalar(v.sum() / T::of(v.numel().max(1) as f64));
        self.tape.record("mean", value, &[self.id], Op::Mean(self.id))
    }

    /// Severs the gradient path: the result carries the same value but no
    /// gradient ever flows back through it.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.constant_rc(self.value())
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (va, vb) = (self.value(), other.value());
        let value = va.matmul(&vb)?;
        Ok(self
            .tape
            .record("matmul", value, &[self.id, other.id], Op::MatMul(self.id, other.id)))
    }

    /// Cross-correlation of `self[n, c, h, w]` with `kernel[o, c, kh, kw]`.
    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize, padding: Padding) -> Result<Var<'t, T>> {
        let (vx, vk) = (self.value(), kernel.value());
        let (xs, ks) = (vx.shape(), vk.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::shape("conv2d", xs, ks));
        }
        let geom = ConvGeom::conv(xs[2], xs[3], ks[2], ks[3], stride, padding)?;
        let data = kernels::conv2d_forward(vx.data(), xs[0], xs[1], vk.data(), ks[0], &geom);
        let value = Tensor::new(&[xs[0], ks[0], geom.ho, geom.wo], data)?;
        Ok(self.tape.record(
            "conv2d",
            value,
            &[self.id, kernel.id],
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                geom,
            },
        ))
    }

    /// Transposed convolution of `self[n, o, h, w]` with `kernel[o, c, kh, kw]`:
    /// the exact adjoint of [`Var::conv2d`] with the same kernel, stride and
    /// padding.
    pub fn conv_transpose2d(self, kernel: Var<'t, T>, stride: usize, padding: Padding) -> Result<Var<'t, T>> {
        let (vx, vk) = (self.value(), kernel.value());
        let (xs, ks) = (vx.shape(), vk.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] {
            return Err(Error::shape("conv_transpose2d", xs, ks));
        }
        let geom = ConvGeom::transpose(xs[2], xs[3], ks[2], ks[3], stride, padding)?;
        let data = kernels::conv_transpose_forward(vx.data(), xs[0], xs[1], vk.data(), ks[1], &geom);
        let value = Tensor::new(&[xs[0], ks[1], geom.h, geom.w], data)?;
        Ok(self.tape.record(
            "conv_transpose2d",
            value,
            &[self.id, kernel.id],
            Op::ConvTranspose2d {
                x: self.id,
                k: kernel.id,
                geom,
            },
        ))
    }

    /// Softmax normalised jointly over the last two axes.
    pub fn spatial_softmax(self) -> Result<Var<'t, T>> {
        let v = self.value();
        let s = v.shape();
        if s.len() < 2 {
            return Err(Error::InvalidArgument(format!("spatial_softmax needs >= 2 axes, got {s:?}")));
        }
        let block = s[s.len() - 2] * s[s.len() - 1];
        let value = Tensor::new(s, kernels::softmax_blocks(v.data(), block))?;
        Ok(self
            .tape
            .record("spatial_softmax", value, &[self.id], Op::SpatialSoftmax(self.id)))
    }

    /// Per-sample blur: true convolution of every channel of `self[n, c, h, w]`
    /// with `kernels[n, kh, kw]`, zero boundary, same-size output.
    pub fn blur(self, kernels: Var<'t, T>) -> Result<Var<'t, T>> {
        let (vx, vk) = (self.value(), kernels.value());
        let (xs, ks) = (vx.shape(), vk.shape());
        if xs.len() != 4 || ks.len() != 3 || xs[0] != ks[0] {
            return Err(Error::shape("blur", xs, ks));
        }
        let data = kernels::blur_forward(vx.data(), xs[0], xs[1], xs[2], xs[3], vk.data(), ks[1], ks[2]);
        let value = Tensor::new(xs, data)?;
        Ok(self.tape.record(
            "blur",
            value,
            &[self.id, kernels.id],
            Op::Blur {
                x: self.id,
                k: kernels.id,
            },
        ))
    }

    /// `out[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("gather", &[index.len()], shape));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} elements",
                v.numel()
            )));
        }
        let data = index.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.tape.record("gather", value, &[self.id], Op::Gather { a: self.id, index }))
    }

    /// `out = zeros(shape); out.flat[index[i]] += self.flat[i]`.
    pub fn scatter_add(self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        if index.len() != v.numel() {
            return Err(Error::shape("scatter_add", &[index.len()], v.shape()));
        }
        let mut data = vec![T::zero(); shape.iter().product()];
        for (&i, &x) in index.iter().zip(v.data()) {
            let slot = data
                .get_mut(i)
                .ok_or_else(|| Error::InvalidArgument(format!("scatter index {i} out of range")))?;
            *slot += x;
        }
        let value = Tensor::new(shape, data)?;
        Ok(self
            .tape
            .record("scatter_add", value, &[self.id], Op::ScatterAdd { a: self.id, index }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.record("reshape", value, &[self.id], Op::Reshape(self.id)))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero variables".into()))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut shape = base.clone();
        shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len() && (0..s.len()).all(|d| d == axis || s[d] == base[d]);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let width = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * width..(o + 1) * width]);
            }
        }
        let value = Tensor::new(&shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record("concat", value, &ids, Op::Concat { inputs: ids.clone(), axis }))
    }
}
