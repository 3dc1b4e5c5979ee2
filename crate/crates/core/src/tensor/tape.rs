use super::{kernels, pairwise_sum, Element, Tensor};
use crate::error::{Error, Result};

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Conv3d { input: Var, weight: Var, bias: Var, pad: usize },
    MaxPool { input: Var, argmax: Vec<u32> },
    Upsample(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Combine { x: Var, groups: Vec<Vec<usize>> },
    SliceBatch { x: Var, index: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed primitives.
///
/// Every operation appends one node holding its output and whatever context
/// its backward rule needs. Nodes are immutable once recorded. A node requires
/// a gradient iff one of its inputs does, so gradients are never computed for
/// constant subgraphs such as the input image or targets.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every leaf that requires one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn broadcast_shape(a: &[usize], na: usize, b: &[usize], nb: usize, what: &str) -> Result<Vec<usize>> {
    if a == b {
        Ok(a.to_vec())
    } else if nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        Err(Error::Shape(format!("{what}: shapes {a:?} and {b:?} differ")))
    }
}

#[inline]
fn pick<T: Copy>(s: &[T], i: usize) -> T {
    if s.len() == 1 {
        s[0]
    } else {
        s[i]
    }
}

/// Sums a full-size gradient down to the operand's shape (no-op unless the
/// operand was a broadcast scalar).
fn unbroadcast<T: Element>(g: Vec<T>, operand: &Tensor<T>) -> Tensor<T> {
    if operand.numel() == g.len() {
        Tensor::new(operand.shape().to_vec(), g).expect("shape checked on forward")
    } else {
        Tensor::new(operand.shape().to_vec(), vec![g.into_iter().sum()]).expect("scalar")
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Trainable parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), ta.numel(), tb.shape(), tb.numel(), what)?;
        let n = ta.numel().max(tb.numel());
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| f(pick(da, i), pick(db, i))).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        self.push(value, op, &[x])
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

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Var {
        self.unary(x, |v| v + k, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = pairwise_sum(self.value(x).data());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = pairwise_sum(t.data());
        let m = s / T::from_f64(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sums out one axis (the axis is removed from the shape).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("sum_axis: axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let d = t.data();
        if inner == 1 {
            for (o, acc) in out.iter_mut().enumerate() {
                *acc = pairwise_sum(&d[o * n..(o + 1) * n]);
            }
        } else {
            for o in 0..outer {
                for k in 0..n {
                    let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
        }
        let mut new_shape: Vec<usize> = shape.to_vec();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::Shape(format!("mean_axis: axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::from_f64(n as f64)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Collapses `[B, C, z, y, x]` to `[B, C]` by summing every voxel.
    pub fn sum_spatial(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("sum_spatial needs [B, C, ...], got {shape:?}")));
        }
        let v: usize = shape[2..].iter().product();
        let r = self.reshape(x, &[shape[0], shape[1], v])?;
        self.sum_axis(r, 2)
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let value = kernels::conv3d_forward(self.value(input), self.value(weight), self.value(bias), pad)?;
        Ok(self.push(value, Op::Conv3d { input, weight, bias, pad }, &[input, weight, bias]))
    }

    pub fn maxpool3d(&mut self, input: Var) -> Result<Var> {
        let (value, argmax) = kernels::maxpool2_forward(self.value(input))?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn upsample_trilinear3d(&mut self, input: Var) -> Result<Var> {
        let value = kernels::upsample2_forward(self.value(input))?;
        Ok(self.push(value, Op::Upsample(input), &[input]))
    }

    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let value = kernels::softmax_channels_forward(self.value(logits))?;
        Ok(self.push(value, Op::Softmax(logits), &[logits]))
    }

    /// Concatenates along the channel axis (axis 1).
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if first.len() < 2 {
            return Err(Error::Shape(format!("concat_channels needs [B, C, ...], got {first:?}")));
        }
        let b = first[0];
        let v: usize = first[2..].iter().product();
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[0] != b || s[2..] != first[2..] {
                return Err(Error::Shape(format!("concat_channels: {s:?} incompatible with {first:?}")));
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(b * channels * v);
        for bi in 0..b {
            for &x in xs {
                let t = self.value(x);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[bi * c * v..(bi + 1) * c * v]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    /// Builds output channel `k` as the sum of input channels `groups[k]`.
    /// Covers channel selection, merging into background and reordering.
    pub fn combine_channels(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("combine_channels needs [B, C, ...], got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(bad) = groups.iter().flatten().find(|&&g| g >= c) {
            return Err(Error::Shape(format!("combine_channels: channel {bad} out of range for {c} channels")));
        }
        let v: usize = shape[2..].iter().product();
        let d = self.value(x).data();
        let mut out = vec![T::zero(); b * groups.len() * v];
        for bi in 0..b {
            for (k, group) in groups.iter().enumerate() {
                let dst = &mut out[(bi * groups.len() + k) * v..(bi * groups.len() + k + 1) * v];
                for &ch in group {
                    for (o, &s) in dst.iter_mut().zip(&d[(bi * c + ch) * v..(bi * c + ch + 1) * v]) {
                        *o += s;
                    }
                }
            }
        }
        let mut new_shape = shape;
        new_shape[1] = groups.len();
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Combine { x, groups: groups.to_vec() }, &[x]))
    }

    /// Extracts batch element `index`, keeping a batch axis of size 1.
    pub fn slice_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::Shape(format!("slice_batch: index {index} out of range for {shape:?}")));
        }
        let per: usize = shape[1..].iter().product();
        let data = self.value(x).data()[index * per..(index + 1) * per].to_vec();
        let mut new_shape = shape;
        new_shape[0] = 1;
        let value = Tensor::new(new_shape, data)?;
        Ok(self.push(value, Op::SliceBatch { x, index }, &[x]))
    }

    /// Reverse pass from a scalar output. Records are visited in exact
    /// reverse execution order; gradients reaching a value from several
    /// consumers are summed.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(out.shape().to_vec(), vec![T::one()])?);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(g);
                continue;
            }
            for (input, contribution) in self.node_backward(node, g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn node_backward(&self, node: &Node<T>, g: Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let map = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
            // f(input, output, upstream)
            let xin = val(x).data();
            let data = xin
                .iter()
                .zip(node.value.data())
                .zip(g.data())
                .map(|((&a, &y), &gg)| f(a, y, gg))
                .collect();
            Tensor::new(val(x).shape().to_vec(), data).expect("same shape")
        };
        let gd = g.data();
        let n = gd.len();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => {
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, unbroadcast(gd.to_vec(), val(*a))));
                }
                if needs(*b) {
                    out.push((*b, unbroadcast(gd.to_vec(), val(*b))));
                }
                out
            }
            Op::Sub(a, b) => {
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, unbroadcast(gd.to_vec(), val(*a))));
                }
                if needs(*b) {
                    out.push((*b, unbroadcast(gd.iter().map(|&v| -v).collect(), val(*b))));
                }
                out
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                let mut out = Vec::new();
                if needs(*a) {
                    let ga = (0..n).map(|i| gd[i] * pick(db, i)).collect();
                    out.push((*a, unbroadcast(ga, val(*a))));
                }
                if needs(*b) {
                    let gb = (0..n).map(|i| gd[i] * pick(da, i)).collect();
                    out.push((*b, unbroadcast(gb, val(*b))));
                }
                out
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                let mut out = Vec::new();
                if needs(*a) {
                    let ga = (0..n).map(|i| gd[i] / pick(db, i)).collect();
                    out.push((*a, unbroadcast(ga, val(*a))));
                }
                if needs(*b) {
                    let gb = (0..n)
                        .map(|i| {
                            let d = pick(db, i);
                            -gd[i] * pick(da, i) / (d * d)
                        })
                        .collect();
                    out.push((*b, unbroadcast(gb, val(*b))));
                }
                out
            }
            Op::Scale(x, k) => {
                let k = *k;
                vec![(*x, map(*x, &|_, _, gg| gg * k))]
            }
            Op::AddScalar(x) => vec![(*x, map(*x, &|_, _, gg| gg))],
            Op::Relu(x) => vec![(*x, map(*x, &|a, _, gg| if a > T::zero() { gg } else { T::zero() }))],
            Op::Log(x) => vec![(*x, map(*x, &|a, _, gg| gg / a))],
            Op::Exp(x) => vec![(*x, map(*x, &|_, y, gg| gg * y))],
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                vec![(*x, map(*x, &|a, _, gg| two * a * gg))]
            }
            Op::Sum(x) => {
                let t = val(*x);
                vec![(*x, Tensor::full(t.shape(), gd[0]))]
            }
            Op::Mean(x) => {
                let t = val(*x);
                let v = gd[0] / T::from_f64(t.numel() as f64);
                vec![(*x, Tensor::full(t.shape(), v))]
            }
            Op::SumAxis { x, axis } => {
                let shape = val(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let k = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut d = Vec::with_capacity(outer * k * inner);
                for o in 0..outer {
                    for _ in 0..k {
                        d.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*x, Tensor::new(shape.to_vec(), d)?)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Conv3d { input, weight, bias, pad } => {
                let (di, dw, db) =
                    kernels::conv3d_backward(val(*input), val(*weight), &g, *pad, needs(*input))?;
                let mut out = vec![(*weight, dw), (*bias, db)];
                if let Some(di) = di {
                    out.push((*input, di));
                }
                out
            }
            Op::MaxPool { input, argmax } => {
                vec![(*input, kernels::maxpool2_backward(val(*input).shape(), argmax, &g))]
            }
            Op::Upsample(input) => vec![(*input, kernels::upsample2_backward(val(*input).shape(), &g)?)],
            Op::Softmax(x) => vec![(*x, kernels::softmax_channels_backward(&node.value, &g))],
            Op::Concat(xs) => {
                let shape = node.value.shape();
                let (b, total) = (shape[0], shape[1]);
                let v: usize = shape[2..].iter().product();
                let mut out = Vec::new();
                let mut offset = 0;
                for &x in xs {
                    let c = val(x).shape()[1];
                    if needs(x) {
                        let mut d = Vec::with_capacity(b * c * v);
                        for bi in 0..b {
                            let start = (bi * total + offset) * v;
                            d.extend_from_slice(&gd[start..start + c * v]);
                        }
                        out.push((x, Tensor::new(val(x).shape().to_vec(), d)?));
                    }
                    offset += c;
                }
                out
            }
            Op::Combine { x, groups } => {
                let shape = val(*x).shape();
                let (b, c) = (shape[0], shape[1]);
                let v: usize = shape[2..].iter().product();
                let mut d = vec![T::zero(); b * c * v];
                for bi in 0..b {
                    for (k, group) in groups.iter().enumerate() {
                        let src = &gd[(bi * groups.len() + k) * v..(bi * groups.len() + k + 1) * v];
                        for &ch in group {
                            for (o, &s) in d[(bi * c + ch) * v..(bi * c + ch + 1) * v].iter_mut().zip(src) {
                                *o += s;
                            }
                        }
                    }
                }
                vec![(*x, Tensor::new(shape.to_vec(), d)?)]
            }
            Op::SliceBatch { x, index } => {
                let shape = val(*x).shape();
                let per: usize = shape[1..].iter().product();
                let mut d = vec![T::zero(); shape[0] * per];
                d[index * per..(index + 1) * per].copy_from_slice(gd);
                vec![(*x, Tensor::new(shape.to_vec(), d)?)]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(t: &mut Tape<f64>, v: &[f64], grad: bool) -> Var {
        t.leaf(Tensor::new(vec![v.len()], v.to_vec()).unwrap(), grad)
    }

    #[test]
    fn relu_and_mean_values() {
        let mut t = Tape::new();
        let x = vec1(&mut t, &[-1.0, 0.0, 2.0], true);
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let y = vec1(&mut t, &[1.0, 2.0, 3.0], false);
        let m = t.mean(y);
        assert_eq!(t.value(m).item(), 2.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = vec1(&mut t, &[0.0, 1.0], true);
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn mean_square_gradient_is_two_x_over_n() {
        let xs = [0.5, -1.5, 2.0, 3.25];
        let mut t = Tape::new();
        let x = vec1(&mut t, &xs, true);
        let sq = t.square(x);
        let m = t.mean(sq);
        let g = t.backward(m).unwrap();
        for (gi, xi) in g.get(x).unwrap().data().iter().zip(xs) {
            assert!((gi - 2.0 * xi / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_accumulate_across_consumers() {
        // f = sum(x * x) + sum(3x): df/dx = 2x + 3
        let mut t = Tape::new();
        let x = vec1(&mut t, &[1.0, -2.0], true);
        let sq = t.mul(x, x).unwrap();
        let a = t.sum(sq);
        let lin = t.scale(x, 3.0);
        let b = t.sum(lin);
        let f = t.add(a, b).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut t = Tape::new();
        let x = vec1(&mut t, &[1.0, 2.0, 3.0], true);
        let s = vec1(&mut t, &[2.0], true);
        let y = t.mul(x, s).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 4.0, 6.0]);
        let total = t.sum(y);
        let g = t.backward(total).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[6.0]);
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);

        let z = vec1(&mut t, &[1.0, 2.0], false);
        assert!(matches!(t.add(x, z), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = vec1(&mut t, &[1.0, 2.0], true);
        let y = t.square(x);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = vec1(&mut t, &[1.0, 2.0], true);
        let c = vec1(&mut t, &[3.0, 4.0], false);
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(!t.requires_grad(c));
    }

    #[test]
    fn combine_channels_merges_and_routes_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 10.0, 20.0, 100.0, 200.0]).unwrap(), true);
        let y = t.combine_channels(x, &[vec![0, 2], vec![1]]).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 2]);
        assert_eq!(t.value(y).data(), &[101.0, 202.0, 10.0, 20.0]);
        let w = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = t.mul(y, w).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_fn(&[2, 1, 2], |i| i as f64), true);
        let b = t.leaf(Tensor::from_fn(&[2, 2, 2], |i| 10.0 + i as f64), true);
        let c = t.concat_channels(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[2, 3, 2]);
        assert_eq!(t.value(c).data(), &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]);
        let s1 = t.slice_batch(c, 1).unwrap();
        let s = t.sum(s1);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
