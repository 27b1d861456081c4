//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! Every forward pass appends nodes to a fresh [`Tape`]; the tape order is
//! already topological, so `backward` is a single reverse sweep. Node values
//! are immutable once pushed; gradients are accumulated into a separate
//! [`Gradients`] table, which keeps repeated backward calls deterministic.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Context handed to a node's backward rule.
pub struct BackwardCtx<'a> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a Tensor,
    /// Forward values of the node's parents, in push order.
    pub parents: &'a [Rc<Tensor>],
    /// Forward value of this node.
    pub output: &'a Tensor,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    is_leaf: bool,
}

/// Append-only computation graph. Single-threaded by construction; distinct
/// tapes may live on distinct threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, shape {:?})", self.idx, self.value().shape())
    }
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.idx).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf that is known to participate in the graph.
    pub fn expect(&self, var: Var<'_>) -> &Tensor {
        self.get(var).expect("no gradient recorded for variable")
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, is_leaf: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            is_leaf,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Differentiable input (parameters).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None, true)
    }

    /// Non-differentiable input (images, targets).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None, false)
    }

    /// Concatenates along `axis`. All parts must agree on every other extent.
    pub fn concat(&self, parts: &[Var<'_>], axis: usize) -> Result<Var<'_>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = parts[0].value();
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        let mut axis_extents = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.value();
            if s.rank() != rank
                || s.shape()[..axis] != first.shape()[..axis]
                || s.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(Error::shape("concat", first.shape(), s.shape()));
            }
            axis_extents.push(s.shape()[axis]);
        }
        let total: usize = axis_extents.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;

        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0usize;
        for p in parts {
            let v = p.value();
            let e = v.shape()[axis];
            for o in 0..outer {
                let src = &v.data()[o * e * inner..(o + 1) * e * inner];
                let dst_start = (o * total + offset) * inner;
                data[dst_start..dst_start + e * inner].copy_from_slice(src);
            }
            offset += e;
        }

        let parents: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let extents = axis_extents.clone();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |ctx| {
                let g = ctx.grad;
                let gshape = g.shape();
                let outer: usize = gshape[..axis].iter().product();
                let inner: usize = gshape[axis + 1..].iter().product();
                let total = gshape[axis];
                let mut offset = 0usize;
                let mut out = Vec::with_capacity(extents.len());
                for (i, &e) in extents.iter().enumerate() {
                    let mut shape = ctx.parents[i].shape().to_vec();
                    shape[axis] = e;
                    let mut part = vec![0.0; outer * e * inner];
                    for o in 0..outer {
                        let src_start = (o * total + offset) * inner;
                        part[o * e * inner..(o + 1) * e * inner]
                            .copy_from_slice(&g.data()[src_start..src_start + e * inner]);
                    }
                    out.push(Tensor::from_vec(shape, part).expect("concat backward shape"));
                    offset += e;
                }
                out
            })),
            false,
        ))
    }

    /// Reverse sweep from a scalar root. Returns gradients for leaves.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.idx];
        if root_node.value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", root_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.idx + 1);
        grads.resize_with(root.idx + 1, || None);
        grads[root.idx] = Some(Tensor::full(root_node.value.shape(), 1.0));

        for i in (0..=root.idx).rev() {
            let node = &nodes[i];
            let Some(grad) = grads[i].take() else { continue };
            if let Some(back) = &node.backward {
                let parent_values: Vec<Rc<Tensor>> =
                    node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
                let ctx = BackwardCtx {
                    grad: &grad,
                    parents: &parent_values,
                    output: &node.value,
                };
                let parent_grads = back(&ctx);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "backward shape mismatch");
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            if node.is_leaf {
                grads[i] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }
}

// Suffix broadcasting: the shorter shape must equal the trailing extents of
// the longer one (covers bias rows, per-channel scales, equal shapes).
fn broadcast_shapes<'s>(op: &'static str, a: &'s [usize], b: &'s [usize]) -> Result<&'s [usize]> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if &long[long.len() - short.len()..] != short {
        return Err(Error::shape(op, a, b));
    }
    Ok(long)
}

fn binary_map(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let out_shape = broadcast_shapes(op, a.shape(), b.shape())?.to_vec();
    let numel: usize = out_shape.iter().product();
    let (an, bn) = (a.numel(), b.numel());
    let mut data = Vec::with_capacity(numel);
    if an == numel && bn == numel {
        data.extend(a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
    } else if an == numel {
        let bd = b.data();
        data.extend(a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % bn])));
    } else {
        let ad = a.data();
        data.extend(b.data().iter().enumerate().map(|(i, &y)| f(ad[i % an], y)));
    }
    Tensor::from_vec(out_shape, data)
}

/// Sums `grad` over leading axes so it matches `target_shape`.
fn reduce_to_shape(grad: &Tensor, target_shape: &[usize]) -> Tensor {
    if grad.shape() == target_shape {
        return grad.clone();
    }
    let short_numel: usize = target_shape.iter().product();
    let mut data = vec![0.0; short_numel];
    for (i, &g) in grad.data().iter().enumerate() {
        data[i % short_numel] += g;
    }
    Tensor::from_vec(target_shape.to_vec(), data).expect("reduce shape")
}

/// Expands a suffix-broadcastable tensor to a full shape by repetition.
fn expand_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let numel: usize = shape.iter().product();
    let n = t.numel();
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        data.push(t.data()[i % n]);
    }
    Tensor::from_vec(shape.to_vec(), data).expect("expand shape")
}

fn last_axis(op: &'static str, t: &Tensor) -> Result<usize> {
    let n = *t
        .shape()
        .last()
        .ok_or_else(|| Error::invalid(op, "rank-0 tensor has no axis"))?;
    if n == 0 {
        return Err(Error::invalid(op, "zero-length axis"));
    }
    Ok(n)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.idx].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Node identity within its tape.
    pub fn node_id(&self) -> usize {
        self.idx
    }

    fn binary(
        &self,
        op: &'static str,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(&BackwardCtx) -> (Tensor, Tensor) + 'static,
    ) -> Result<Var<'t>> {
        let out = binary_map(op, &self.value(), &other.value(), f)?;
        Ok(self.tape.push(
            out,
            vec![self.idx, other.idx],
            Some(Box::new(move |ctx| {
                let (ga, gb) = back(ctx);
                let ga = reduce_to_shape(&ga, ctx.parents[0].shape());
                let gb = reduce_to_shape(&gb, ctx.parents[1].shape());
                vec![ga, gb]
            })),
            false,
        ))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("add", other, |a, b| a + b, |ctx| (ctx.grad.clone(), ctx.grad.clone()))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("sub", other, |a, b| a - b, |ctx| {
            (ctx.grad.clone(), ctx.grad.map(|g| -g))
        })
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("mul", other, |a, b| a * b, |ctx| {
            let shape = ctx.grad.shape();
            let a = expand_to(&ctx.parents[0], shape);
            let b = expand_to(&ctx.parents[1], shape);
            let ga = binary_map("mul", ctx.grad, &b, |g, b| g * b).expect("mul backward");
            let gb = binary_map("mul", ctx.grad, &a, |g, a| g * a).expect("mul backward");
            (ga, gb)
        })
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("div", other, |a, b| a / b, |ctx| {
            let shape = ctx.grad.shape();
            let a = expand_to(&ctx.parents[0], shape);
            let b = expand_to(&ctx.parents[1], shape);
            let g = ctx.grad.data();
            let ga_data: Vec<f64> = g.iter().zip(b.data()).map(|(&g, &b)| g / b).collect();
            let gb_data: Vec<f64> = g
                .iter()
                .zip(a.data().iter().zip(b.data()))
                .map(|(&g, (&a, &b))| -g * a / (b * b))
                .collect();
            (
                Tensor::from_vec(shape.to_vec(), ga_data).expect("div backward"),
                Tensor::from_vec(shape.to_vec(), gb_data).expect("div backward"),
            )
        })
    }

    /// Elementwise minimum; on ties the gradient flows to `self`.
    pub fn minimum(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("minimum", other, f64::min, |ctx| {
            let shape = ctx.grad.shape();
            let a = expand_to(&ctx.parents[0], shape);
            let b = expand_to(&ctx.parents[1], shape);
            min_max_backward(ctx.grad, &a, &b, true)
        })
    }

    /// Elementwise maximum; on ties the gradient flows to `self`.
    pub fn maximum(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary("maximum", other, f64::max, |ctx| {
            let shape = ctx.grad.shape();
            let a = expand_to(&ctx.parents[0], shape);
            let b = expand_to(&ctx.parents[1], shape);
            min_max_backward(ctx.grad, &a, &b, false)
        })
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64) -> f64 + 'static,
    ) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let data: Vec<f64> = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| g * dfdx(x))
                    .collect();
                vec![Tensor::from_vec(ctx.parents[0].shape().to_vec(), data).expect("unary backward")]
            })),
            false,
        )
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF via `erf`.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(gelu_value, gelu_derivative)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid_value, |x| {
            let s = sigmoid_value(x);
            s * (1.0 - s)
        })
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(f64::abs, f64::signum)
    }

    /// Scalar multiply by a compile-time constant (not a graph node).
    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(move |x| x * c, move |_| c)
    }

    /// Adds a constant to every element.
    pub fn shift(&self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_| 1.0)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let out = matmul_raw(a.data(), b.data(), m, k, n);
        Ok(self.tape.push(
            Tensor::from_vec(vec![m, n], out)?,
            vec![self.idx, other.idx],
            Some(Box::new(move |ctx| {
                let a = &ctx.parents[0];
                let b = &ctx.parents[1];
                let g = ctx.grad.data();
                // dA = G Bᵀ, dB = Aᵀ G
                let da = matmul_nt(g, b.data(), m, n, k);
                let db = matmul_tn(a.data(), g, k, m, n);
                vec![
                    Tensor::from_vec(vec![m, k], da).expect("matmul backward"),
                    Tensor::from_vec(vec![k, n], db).expect("matmul backward"),
                ]
            })),
            false,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() < 2 {
            return Err(Error::invalid("transpose", "needs rank >= 2"));
        }
        let out = transpose_last_two(&v);
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(|ctx| vec![transpose_last_two(ctx.grad)])),
            false,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::invalid(
                "reshape",
                format!("cannot reshape {:?} to {:?}", v.shape(), shape),
            ));
        }
        let out = Tensor::from_vec(shape.to_vec(), v.data().to_vec())?;
        Ok(self.tape.push(
            out,
            vec![self.idx],
            Some(Box::new(|ctx| {
                let src_shape = ctx.parents[0].shape().to_vec();
                vec![Tensor::from_vec(src_shape, ctx.grad.data().to_vec()).expect("reshape backward")]
            })),
            false,
        ))
    }

    /// Contiguous range along one axis.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.rank() || start > end || end > v.shape()[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of shape {:?}", v.shape()),
            ));
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let extent = v.shape()[axis];
        let e = end - start;
        let mut shape = v.shape().to_vec();
        shape[axis] = e;
        let mut data = vec![0.0; outer * e * inner];
        for o in 0..outer {
            let src_start = (o * extent + start) * inner;
            data[o * e * inner..(o + 1) * e * inner]
                .copy_from_slice(&v.data()[src_start..src_start + e * inner]);
        }
        Ok(self.tape.push(
            Tensor::from_vec(shape, data)?,
            vec![self.idx],
            Some(Box::new(move |ctx| {
                let src = &ctx.parents[0];
                let extent = src.shape()[axis];
                let mut out = Tensor::zeros(src.shape());
                for o in 0..outer {
                    let dst_start = (o * extent + start) * inner;
                    out.data_mut()[dst_start..dst_start + e * inner]
                        .copy_from_slice(&ctx.grad.data()[o * e * inner..(o + 1) * e * inner]);
                }
                vec![out]
            })),
            false,
        ))
    }

    /// Gathers rows of a rank-2 tensor; duplicate indices accumulate in the
    /// backward scatter.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::invalid("select_rows", "needs rank 2"));
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("select_rows", format!("row {bad} out of {rows}")));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&v.data()[i * cols..(i + 1) * cols]);
        }
        let idx: Vec<usize> = indices.to_vec();
        Ok(self.tape.push(
            Tensor::from_vec(vec![indices.len(), cols], data)?,
            vec![self.idx],
            Some(Box::new(move |ctx| {
                let mut out = Tensor::zeros(ctx.parents[0].shape());
                for (r, &i) in idx.iter().enumerate() {
                    let g = &ctx.grad.data()[r * cols..(r + 1) * cols];
                    for (dst, &src) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                vec![out]
            })),
            false,
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let v = self.value();
        let n = last_axis("softmax", &v)?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        Ok(self.tape.push(
            Tensor::from_vec(v.shape().to_vec(), data)?,
            vec![self.idx],
            Some(Box::new(move |ctx| {
                let s = ctx.output.data();
                let g = ctx.grad.data();
                let mut out = vec![0.0; g.len()];
                for r in 0..g.len() / n {
                    let (s, g) = (&s[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = s.iter().zip(g).map(|(&s, &g)| s * g).sum();
                    for c in 0..n {
                        out[r * n + c] = s[c] * (g[c] - dot);
                    }
                }
                vec![Tensor::from_vec(ctx.parents[0].shape().to_vec(), out).expect("softmax backward")]
            })),
            false,
        ))
    }

    /// Normalizes the last axis to zero mean, unit variance (pre-affine).
    pub fn layernorm(&self, eps: f64) -> Result<Var<'t>> {
        let v = self.value();
        let n = last_axis("layernorm", &v)?;
        let nf = n as f64;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / nf;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        Ok(self.tape.push(
            Tensor::from_vec(v.shape().to_vec(), data)?,
            vec![self.idx],
            Some(Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut out = vec![0.0; g.len()];
                for r in 0..g.len() / n {
                    let xr = &x[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mean = xr.iter().sum::<f64>() / nf;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / nf;
                    let gy_mean = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<f64>() / nf;
                    for c in 0..n {
                        out[r * n + c] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                    }
                }
                vec![Tensor::from_vec(ctx.parents[0].shape().to_vec(), out).expect("layernorm backward")]
            })),
            false,
        ))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>();
        self.tape.push(
            Tensor::scalar(s),
            vec![self.idx],
            Some(Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Tensor::full(ctx.parents[0].shape(), g)]
            })),
            false,
        )
    }

    pub fn mean_all(&self) -> Var<'t> {
        let v = self.value();
        let n = v.numel() as f64;
        let s = v.data().iter().sum::<f64>() / n;
        self.tape.push(
            Tensor::scalar(s),
            vec![self.idx],
            Some(Box::new(move |ctx| {
                let g = ctx.grad.item() / n;
                vec![Tensor::full(ctx.parents[0].shape(), g)]
            })),
            false,
        )
    }

    /// Sum of absolute differences (ℓ1) as a scalar.
    pub fn l1_distance(&self, other: Var<'t>) -> Result<Var<'t>> {
        Ok(self.sub(other)?.abs().sum_all())
    }

    /// Weighted multi-class cross-entropy over rows of `(n, k)` logits,
    /// averaged over rows: `mean_i w[t_i] * (logsumexp(l_i) - l_i[t_i])`.
    pub fn cross_entropy(&self, targets: &[usize], class_weights: &[f64]) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::invalid("cross_entropy", "logits must be rank 2"));
        }
        let (rows, k) = (v.shape()[0], v.shape()[1]);
        if targets.len() != rows {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), rows),
            ));
        }
        if class_weights.len() != k {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} class weights for {} classes", class_weights.len(), k),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid("cross_entropy", format!("target {t} out of {k} classes")));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += class_weights[t] * (lse - row[t]);
        }
        total /= rows as f64;
        let targets: Vec<usize> = targets.to_vec();
        let weights: Vec<f64> = class_weights.to_vec();
        Ok(self.tape.push(
            Tensor::scalar(total),
            vec![self.idx],
            Some(Box::new(move |ctx| {
                let v = &ctx.parents[0];
                let g = ctx.grad.item() / (v.shape()[0] as f64);
                let mut out = Tensor::zeros(v.shape());
                for (r, &t) in targets.iter().enumerate() {
                    let row = v.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                    let w = weights[t] * g;
                    let k = row.len();
                    let dst = &mut out.data_mut()[r * k..(r + 1) * k];
                    for c in 0..k {
                        let p = (row[c] - max).exp() / sum;
                        dst[c] = w * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                vec![out]
            })),
            false,
        ))
    }

    /// Fused `x @ w + b` with the bias broadcast over rows.
    pub fn linear(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] {
            return Err(Error::shape("linear", x.shape(), w.shape()));
        }
        let (m, k) = (x.shape()[0], x.shape()[1]);
        let n = w.shape()[1];
        if b.shape() != [n] {
            return Err(Error::shape("linear", w.shape(), b.shape()));
        }
        let mut out = matmul_raw(x.data(), w.data(), m, k, n);
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.tape.push(
            Tensor::from_vec(vec![m, n], out)?,
            vec![self.idx, weight.idx, bias.idx],
            Some(Box::new(move |ctx| {
                let x = &ctx.parents[0];
                let w = &ctx.parents[1];
                let g = ctx.grad.data();
                let dx = matmul_nt(g, w.data(), m, n, k);
                let dw = matmul_tn(x.data(), g, k, m, n);
                let mut db = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                vec![
                    Tensor::from_vec(vec![m, k], dx).expect("linear backward"),
                    Tensor::from_vec(vec![k, n], dw).expect("linear backward"),
                    Tensor::from_vec(vec![n], db).expect("linear backward"),
                ]
            })),
            false,
        ))
    }

    /// Fused `layernorm(x) * scale + bias` over the last axis.
    pub fn layernorm_affine(&self, eps: f64, scale: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let n = last_axis("layernorm", &x)?;
        let s = scale.value();
        let b = bias.value();
        if s.shape() != [n] || b.shape() != [n] {
            return Err(Error::shape("layernorm_affine", x.shape(), s.shape()));
        }
        let nf = n as f64;
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / nf;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
            let inv = 1.0 / (var + eps).sqrt();
            for (v, (&sv, &bv)) in row.iter_mut().zip(s.data().iter().zip(b.data())) {
                *v = (*v - mean) * inv * sv + bv;
            }
        }
        Ok(self.tape.push(
            Tensor::from_vec(x.shape().to_vec(), data)?,
            vec![self.idx, scale.idx, bias.idx],
            Some(Box::new(move |ctx| {
                let x = &ctx.parents[0];
                let s = ctx.parents[1].data();
                let g = ctx.grad.data();
                let rows = g.len() / n;
                let mut dx = vec![0.0; g.len()];
                let mut ds = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..rows {
                    let xr = &x.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mean = xr.iter().sum::<f64>() / nf;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    // d/d(normalized) = g * scale; then the usual LN backward.
                    let mut gy_mean = 0.0;
                    let mut g_mean = 0.0;
                    for c in 0..n {
                        let xhat = (xr[c] - mean) * inv;
                        let gn = gr[c] * s[c];
                        ds[c] += gr[c] * xhat;
                        db[c] += gr[c];
                        g_mean += gn;
                        gy_mean += gn * xhat;
                    }
                    g_mean /= nf;
                    gy_mean /= nf;
                    let dst = &mut dx[r * n..(r + 1) * n];
                    for c in 0..n {
                        let xhat = (xr[c] - mean) * inv;
                        dst[c] = inv * (gr[c] * s[c] - g_mean - xhat * gy_mean);
                    }
                }
                vec![
                    Tensor::from_vec(x.shape().to_vec(), dx).expect("ln backward"),
                    Tensor::from_vec(vec![n], ds).expect("ln backward"),
                    Tensor::from_vec(vec![n], db).expect("ln backward"),
                ]
            })),
            false,
        ))
    }

    /// Fused multi-head self-attention over a packed `(S, 3D)` QKV tensor:
    /// per head, `softmax(q kᵀ / sqrt(hd)) v`, heads concatenated to `(S, D)`.
    /// Returns the output and, when `capture` is set, the per-head attention
    /// matrices.
    pub fn multi_head_attention(&self, heads: usize, capture: bool) -> Result<(Var<'t>, Option<Vec<Tensor>>)> {
        let qkv = self.value();
        if qkv.rank() != 2 || qkv.shape()[1] % 3 != 0 || (qkv.shape()[1] / 3) % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("packed qkv shape {:?} incompatible with {heads} heads", qkv.shape()),
            ));
        }
        let s = qkv.shape()[0];
        let d = qkv.shape()[1] / 3;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let stride = 3 * d;

        // Gather one head's block into a compact (S, hd) buffer.
        let gather = |src: &Tensor, offset: usize| -> Vec<f64> {
            let mut out = vec![0.0; s * hd];
            for r in 0..s {
                let row = &src.data()[r * stride + offset..r * stride + offset + hd];
                out[r * hd..(r + 1) * hd].copy_from_slice(row);
            }
            out
        };

        let mut output = vec![0.0; s * d];
        let mut attn_maps: Vec<Tensor> = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = gather(&qkv, h * hd);
            let k = gather(&qkv, d + h * hd);
            let v = gather(&qkv, 2 * d + h * hd);
            // scores = q kᵀ * scale, then row softmax.
            let mut attn = matmul_nt(&q, &k, s, hd, s);
            for row in attn.chunks_mut(s) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * scale;
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x * scale - max).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            let head_out = matmul_raw(&attn, &v, s, s, hd);
            for r in 0..s {
                output[r * d + h * hd..r * d + (h + 1) * hd].copy_from_slice(&head_out[r * hd..(r + 1) * hd]);
            }
            attn_maps.push(Tensor::from_vec(vec![s, s], attn)?);
        }

        let captured = if capture { Some(attn_maps.clone()) } else { None };
        let out_var = self.tape.push(
            Tensor::from_vec(vec![s, d], output)?,
            vec![self.idx],
            Some(Box::new(move |ctx| {
                let qkv = &ctx.parents[0];
                let g = ctx.grad.data();
                let mut dqkv = Tensor::zeros(qkv.shape());
                for h in 0..heads {
                    let attn = attn_maps[h].data();
                    let q = {
                        let mut out = vec![0.0; s * hd];
                        for r in 0..s {
                            out[r * hd..(r + 1) * hd].copy_from_slice(
                                &qkv.data()[r * stride + h * hd..r * stride + (h + 1) * hd],
                            );
                        }
                        out
                    };
                    let k = {
                        let mut out = vec![0.0; s * hd];
                        for r in 0..s {
                            out[r * hd..(r + 1) * hd].copy_from_slice(
                                &qkv.data()[r * stride + d + h * hd..r * stride + d + (h + 1) * hd],
                            );
                        }
                        out
                    };
                    let v = {
                        let mut out = vec![0.0; s * hd];
                        for r in 0..s {
                            out[r * hd..(r + 1) * hd].copy_from_slice(
                                &qkv.data()[r * stride + 2 * d + h * hd..r * stride + 2 * d + (h + 1) * hd],
                            );
                        }
                        out
                    };
                    // g_h: (S, hd) slice of the output gradient.
                    let mut g_h = vec![0.0; s * hd];
                    for r in 0..s {
                        g_h[r * hd..(r + 1) * hd]
                            .copy_from_slice(&g[r * d + h * hd..r * d + (h + 1) * hd]);
                    }
                    // dV = attnᵀ g_h ; dAttn = g_h vᵀ
                    let dv = matmul_tn(attn, &g_h, s, s, hd);
                    let dattn = matmul_nt(&g_h, &v, s, hd, s);
                    // softmax backward per row, folding in the scale.
                    let mut dscores = vec![0.0; s * s];
                    for r in 0..s {
                        let a = &attn[r * s..(r + 1) * s];
                        let da = &dattn[r * s..(r + 1) * s];
                        let dot: f64 = a.iter().zip(da).map(|(&x, &y)| x * y).sum();
                        let dst = &mut dscores[r * s..(r + 1) * s];
                        for c in 0..s {
                            dst[c] = a[c] * (da[c] - dot) * scale;
                        }
                    }
                    // dQ = dScores k ; dK = dScoresᵀ q
                    let dq = matmul_raw(&dscores, &k, s, s, hd);
                    let dk = matmul_tn(&dscores, &q, s, s, hd);
                    let dst = dqkv.data_mut();
                    for r in 0..s {
                        dst[r * stride + h * hd..r * stride + (h + 1) * hd]
                            .copy_from_slice(&dq[r * hd..(r + 1) * hd]);
                        dst[r * stride + d + h * hd..r * stride + d + (h + 1) * hd]
                            .copy_from_slice(&dk[r * hd..(r + 1) * hd]);
                        dst[r * stride + 2 * d + h * hd..r * stride + 2 * d + (h + 1) * hd]
                            .copy_from_slice(&dv[r * hd..(r + 1) * hd]);
                    }
                }
                vec![dqkv]
            })),
            false,
        );
        Ok((out_var, captured))
    }

    /// Applies a fixed sparse row-mixing matrix: `out[r] = Σ w * in[src]`.
    /// Used for differentiable positional-embedding resizing; the weight
    /// table is data-independent, so the backward pass is its transpose.
    pub fn mix_rows(&self, weights: Rc<Vec<Vec<(usize, f64)>>>) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::invalid("mix_rows", "needs rank 2"));
        }
        let cols = v.shape()[1];
        let out_rows = weights.len();
        let mut data = vec![0.0; out_rows * cols];
        for (r, terms) in weights.iter().enumerate() {
            for &(src, w) in terms {
                let src_row = v.row(src);
                let dst = &mut data[r * cols..(r + 1) * cols];
                for (d, &s) in dst.iter_mut().zip(src_row) {
                    *d += w * s;
                }
            }
        }
        let w2 = Rc::clone(&weights);
        Ok(self.tape.push(
            Tensor::from_vec(vec![out_rows, cols], data)?,
            vec![self.idx],
            Some(Box::new(move |ctx| {
                let mut out = Tensor::zeros(ctx.parents[0].shape());
                for (r, terms) in w2.iter().enumerate() {
                    let g = &ctx.grad.data()[r * cols..(r + 1) * cols];
                    for &(src, w) in terms {
                        let dst = &mut out.data_mut()[src * cols..(src + 1) * cols];
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += w * gv;
                        }
                    }
                }
                vec![out]
            })),
            false,
        ))
    }
}

fn min_max_backward(grad: &Tensor, a: &Tensor, b: &Tensor, is_min: bool) -> (Tensor, Tensor) {
    let mut ga = vec![0.0; grad.numel()];
    let mut gb = vec![0.0; grad.numel()];
    for (i, &g) in grad.data().iter().enumerate() {
        let (av, bv) = (a.data()[i], b.data()[i]);
        let a_wins = if is_min { av <= bv } else { av >= bv };
        if a_wins {
            ga[i] = g;
        } else {
            gb[i] = g;
        }
    }
    (
        Tensor::from_vec(grad.shape().to_vec(), ga).expect("minmax backward"),
        Tensor::from_vec(grad.shape().to_vec(), gb).expect("minmax backward"),
    )
}

fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

fn gelu_value(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let phi = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    phi + x * pdf
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// C(m,k) = G(m,n) · Bᵀ where B is (k,n)
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(n)) {
            *o = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

// C(k,n) = Aᵀ · G where A is (m,k), G is (m,n)
fn matmul_tn(a: &[f64], g: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn transpose_last_two(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let outer: usize = shape[..r - 2].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape.swap(r - 2, r - 1);
    let mut data = vec![0.0; t.numel()];
    for o in 0..outer {
        let src = &t.data()[o * rows * cols..(o + 1) * rows * cols];
        let dst = &mut data[o * rows * cols..(o + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    Tensor::from_vec(out_shape, data).expect("transpose shape")
}

/// Central-difference gradient check.
///
/// Runs `f` at `point` to get the analytic gradient, then perturbs every
/// coordinate by `±step` and returns the worst relative disagreement
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape, Var<'a>) -> Result<Var<'a>>,
{
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&tape, x)?;
    let y_val = y.value();
    if y_val.numel() != 1 {
        return Err(Error::invalid("grad_check", "function must return a scalar"));
    }
    if !y_val.is_finite() {
        return Err(Error::invalid("grad_check", "non-finite function value"));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.expect(x).clone();

    let eval = |p: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(p.clone());
        let y = f(&tape, x)?;
        let v = y.value().item();
        if !v.is_finite() {
            return Err(Error::invalid("grad_check", "non-finite function value"));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut perturbed = point.clone();
    for i in 0..point.numel() {
        let orig = perturbed.data()[i];
        perturbed.data_mut()[i] = orig + step;
        let plus = eval(&perturbed)?;
        perturbed.data_mut()[i] = orig - step;
        let minus = eval(&perturbed)?;
        perturbed.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / f64::max(1.0, a.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let s = x.softmax().unwrap();
        for &p in s.value().data() {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[17, 9], -30.0, 30.0, &mut rng));
        let s = x.softmax().unwrap();
        let v = s.value();
        for r in 0..17 {
            let sum: f64 = v.row(r).iter().sum();
            assert!(close(sum, 1.0, 1e-12), "row sum {sum}");
            assert!(v.row(r).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = x.layernorm(1e-6).unwrap();
        let v = y.value();
        let mean: f64 = v.data().iter().sum::<f64>() / 3.0;
        let var: f64 = v.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
        assert!(close(var, 1.0, 1e-5)); // eps shifts variance by eps/(var+eps)
        // tighter check with tiny eps
        let y2 = x.layernorm(1e-15).unwrap();
        let v2 = y2.value();
        let var2: f64 = v2.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / 3.0;
        assert!(close(var2, 1.0, 1e-9));
    }

    #[test]
    fn matmul_of_ones() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3], 1.0));
        let b = tape.constant(Tensor::full(&[3, 2], 1.0));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.value().shape(), &[2, 2]);
        assert!(c.value().data().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn zero_length_axis_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 0]));
        assert!(x.softmax().is_err());
        assert!(x.layernorm(1e-6).is_err());
    }

    #[test]
    fn backward_of_square() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.expect(x).item(), 6.0);
    }

    #[test]
    fn backward_of_relu_below_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        let y = x.relu();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.expect(x).item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        let y = x.relu();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let tape = Tape::new();
            let x = tape.leaf(Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng));
            let w = tape.leaf(Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng));
            let y = x.matmul(w).unwrap().gelu().layernorm(1e-6).unwrap().sum_all();
            let grads = tape.backward(y).unwrap();
            (y.value().item(), grads.expect(x).clone(), grads.expect(w).clone())
        };
        let (v1, gx1, gw1) = run();
        let (v2, gx2, gw2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn grad_check_exact_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let point = Tensor::uniform(&[6], -2.0, 2.0, &mut rng);
        let err = grad_check(|_t, x| Ok(x.mul(x)?.sum_all()), &point, 1e-5).unwrap();
        assert!(err < 1e-8, "quadratic err {err}");
    }

    #[test]
    fn grad_check_gelu_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let point = Tensor::uniform(&[8], -2.0, 2.0, &mut rng);
        let err = grad_check(
            |_t, x| Ok(x.gelu().scale(1.5).shift(0.25).gelu().sum_all()),
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "gelu err {err}");
    }

    #[test]
    fn grad_check_every_primitive() {
        // Each closure reduces to a scalar through one primitive under test.
        type CheckFn = for<'a> fn(&'a Tape, Var<'a>) -> Result<Var<'a>>;
        type Case = (&'static str, Vec<usize>, CheckFn);
        let cases: Vec<Case> = vec![
            ("add", vec![3, 4], |t, x| {
                let c = t.constant(Tensor::full(&[4], 0.7));
                x.add(c)?.sum_all().scale(0.5).shift(1.0).mul(x.sum_all())
            }),
            ("sub", vec![2, 3], |t, x| {
                let c = t.constant(Tensor::full(&[2, 3], 0.3));
                Ok(x.sub(c)?.mul(x)?.sum_all())
            }),
            ("mul_broadcast", vec![2, 3], |t, x| {
                let c = t.constant(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
                Ok(x.mul(c)?.sum_all())
            }),
            ("div", vec![5], |t, x| {
                let c = t.constant(Tensor::from_vec(vec![5], vec![1.3, -2.0, 0.7, 3.0, -0.5]).unwrap());
                Ok(x.div(c)?.sum_all())
            }),
            ("div_by_x", vec![4], |t, x| {
                let c = t.constant(Tensor::full(&[4], 2.0));
                Ok(c.div(x.mul(x)?.shift(1.0))?.sum_all())
            }),
            ("minimum", vec![6], |t, x| {
                let c = t.constant(Tensor::from_vec(vec![6], vec![0.1, -0.4, 0.9, -1.2, 0.0, 2.0]).unwrap());
                Ok(x.minimum(c)?.sum_all())
            }),
            ("maximum", vec![6], |t, x| {
                let c = t.constant(Tensor::from_vec(vec![6], vec![0.1, -0.4, 0.9, -1.2, 0.0, 2.0]).unwrap());
                Ok(x.maximum(c)?.mul(x)?.sum_all())
            }),
            ("matmul", vec![3, 4], |t, x| {
                let c = t.constant(Tensor::from_vec(vec![4, 2], (0..8).map(|i| 0.1 * i as f64 - 0.3).collect()).unwrap());
                Ok(x.matmul(c)?.sum_all())
            }),
            ("transpose", vec![3, 4], |t, x| {
                let c = t.constant(Tensor::from_vec(vec![3, 2], (0..6).map(|i| 0.2 * i as f64).collect()).unwrap());
                Ok(x.transpose()?.matmul(c)?.sum_all())
            }),
            ("reshape", vec![2, 6], |_t, x| Ok(x.reshape(&[3, 4])?.gelu().sum_all())),
            ("concat_slice", vec![4, 3], |t, x| {
                let a = x.slice(0, 0, 2)?;
                let b = x.slice(0, 2, 4)?;
                let c = t.concat(&[b, a], 0)?;
                Ok(c.mul(x)?.sum_all())
            }),
            ("select_rows", vec![5, 3], |_t, x| {
                Ok(x.select_rows(&[4, 0, 0, 2])?.sum_all())
            }),
            ("softmax", vec![3, 5], |_t, x| {
                Ok(x.softmax()?.mul(x)?.sum_all())
            }),
            ("layernorm", vec![4, 6], |_t, x| {
                Ok(x.layernorm(1e-6)?.gelu().sum_all())
            }),
            ("relu", vec![8], |_t, x| Ok(x.relu().mul(x)?.sum_all())),
            ("gelu", vec![8], |_t, x| Ok(x.gelu().sum_all())),
            ("sigmoid", vec![8], |_t, x| Ok(x.sigmoid().mul(x)?.sum_all())),
            ("abs_l1", vec![7], |t, x| {
                let c = t.constant(Tensor::from_vec(vec![7], (0..7).map(|i| 0.3 * i as f64 - 1.0).collect()).unwrap());
                x.l1_distance(c)
            }),
            ("mean", vec![3, 3], |_t, x| Ok(x.mul(x)?.mean_all())),
            ("cross_entropy", vec![4, 3], |_t, x| {
                x.cross_entropy(&[0, 2, 1, 2], &[1.0, 0.5, 2.0])
            }),
        ];

        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for (name, shape, f) in cases {
            let mut worst = 0.0f64;
            // 100 random points across restarts of the same primitive.
            for _ in 0..100 {
                let point = Tensor::uniform(&shape, -1.5, 1.5, &mut rng);
                let err = grad_check(f, &point, 1e-5).unwrap();
                worst = worst.max(err);
            }
            assert!(worst < 1e-4, "{name}: worst rel err {worst}");
        }
    }

    #[test]
    fn fused_linear_matches_composition_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);

        // Same forward value as matmul + broadcast add.
        let tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let fused = xv.linear(wv, bv).unwrap();
        let composed = xv.matmul(wv).unwrap().add(bv).unwrap();
        assert_eq!(*fused.value(), *composed.value());

        // Gradients for each parent against central differences.
        let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
        let err = grad_check(
            move |t, v| v.linear(t.constant(wc.clone()), t.constant(bc.clone()))?.mul(v.matmul(t.constant(w.clone()))?.shift(0.3))?.sum_all().scale(0.5).shift(0.0).mul(v.sum_all().shift(1.0)),
            &xc,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "x err {err}");

        let (xc, bc) = (x.clone(), b.clone());
        let err = grad_check(
            move |t, v| Ok(t.constant(xc.clone()).linear(v, t.constant(bc.clone()))?.gelu().sum_all()),
            &Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "w err {err}");

        let xc = x.clone();
        let wc = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let err = grad_check(
            move |t, v| Ok(t.constant(xc.clone()).linear(t.constant(wc.clone()), v)?.sigmoid().sum_all()),
            &Tensor::uniform(&[4], -1.0, 1.0, &mut rng),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "b err {err}");
    }

    #[test]
    fn fused_layernorm_affine_matches_composition_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = Tensor::uniform(&[6, 5], -2.0, 2.0, &mut rng);
        let s = Tensor::uniform(&[5], 0.5, 1.5, &mut rng);
        let b = Tensor::uniform(&[5], -0.5, 0.5, &mut rng);

        let tape = Tape::new();
        let (xv, sv, bv) = (tape.constant(x.clone()), tape.constant(s.clone()), tape.constant(b.clone()));
        let fused = xv.layernorm_affine(1e-6, sv, bv).unwrap();
        let composed = xv.layernorm(1e-6).unwrap().mul(sv).unwrap().add(bv).unwrap();
        assert!(fused.value().max_abs_diff(&composed.value()) < 1e-14);

        let (sc, bc) = (s.clone(), b.clone());
        let err = grad_check(
            move |t, v| Ok(v.layernorm_affine(1e-6, t.constant(sc.clone()), t.constant(bc.clone()))?.gelu().sum_all()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "x err {err}");

        let (xc, bc) = (x.clone(), b.clone());
        let err = grad_check(
            move |t, v| {
                let x = t.constant(xc.clone());
                Ok(x.layernorm_affine(1e-6, v, t.constant(bc.clone()))?.mul(x)?.sum_all())
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "scale err {err}");

        let (xc, sc) = (x.clone(), s.clone());
        let err = grad_check(
            move |t, v| Ok(t.constant(xc.clone()).layernorm_affine(1e-6, t.constant(sc.clone()), v)?.abs().sum_all()),
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "bias err {err}");
    }

    #[test]
    fn fused_attention_matches_primitive_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let heads = 3;
        let (s, d) = (7, 6);
        let qkv = Tensor::uniform(&[s, 3 * d], -1.0, 1.0, &mut rng);
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let tape = Tape::new();
        let v = tape.constant(qkv.clone());
        let (fused, maps) = v.multi_head_attention(heads, true).unwrap();

        // Reference: the same computation from slices, transposes, matmuls
        // and softmaxes.
        let mut head_outs = Vec::new();
        for h in 0..heads {
            let q = v.slice(1, h * hd, (h + 1) * hd).unwrap();
            let k = v.slice(1, d + h * hd, d + (h + 1) * hd).unwrap();
            let val = v.slice(1, 2 * d + h * hd, 2 * d + (h + 1) * hd).unwrap();
            let attn = q.matmul(k.transpose().unwrap()).unwrap().scale(scale).softmax().unwrap();
            assert!(attn.value().max_abs_diff(&maps.as_ref().unwrap()[h]) < 1e-12);
            head_outs.push(attn.matmul(val).unwrap());
        }
        let composed = tape.concat(&head_outs, 1).unwrap();
        assert!(fused.value().max_abs_diff(&composed.value()) < 1e-12);

        // Gradient against central differences.
        let err = grad_check(
            move |_t, x| {
                let (out, _) = x.multi_head_attention(heads, false)?;
                Ok(out.mul(x.slice(1, 0, d)?)?.sum_all())
            },
            &qkv,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "attention grad err {err}");
    }

    #[test]
    fn mix_rows_matches_adjoint() {
        use std::rc::Rc;
        let weights = Rc::new(vec![
            vec![(0, 0.25), (1, 0.75)],
            vec![(1, 1.0)],
            vec![(0, 0.5), (2, 0.5)],
        ]);
        let w = Rc::clone(&weights);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let point = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let err = grad_check(
            move |_t, x| {
                let m = x.mix_rows(Rc::clone(&w))?;
                Ok(m.mul(m)?.sum_all())
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "mix_rows err {err}");
    }

    #[test]
    fn uniform_cross_entropy_matches_ln_k() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[5, 4]));
        let w = [0.1, 0.1, 0.1, 0.1];
        let ce = x.cross_entropy(&[3, 3, 3, 3, 3], &w).unwrap();
        assert!(close(ce.value().item(), 0.1 * 4f64.ln(), 1e-12));
    }
}
