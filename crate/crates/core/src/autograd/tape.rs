//! Reverse-mode differentiation tape.
//!
//! Values live in [`Tensor`]s; a [`Tape`] records the computation graph as a
//! flat list of nodes, each holding its output value and a backward step.
//! [`Var`] is an index into the tape. Backward walks the nodes in reverse
//! creation order, which is always a valid topological order.
//!
//! A tape built with gradients disabled records values only, so the same
//! forward code serves training and no-grad inference.

use crate::autograd::tensor::{broadcast_binary, reduce_to_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

/// Padding behavior for [`Tape::conv2d`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    pub(crate) fn get_node(&self, node: usize) -> Option<&Tensor> {
        self.by_node[node].as_ref()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    // (node index, parameter index) for every injected parameter leaf
    param_links: Vec<(usize, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            param_links: Vec::new(),
        }
    }

    /// Tape that records values only; every node has `requires_grad = false`.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            param_links: Vec::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn param_links(&self) -> &[(usize, usize)] {
        &self.param_links
    }

    pub(crate) fn link_param(&mut self, v: Var, param_index: usize) {
        self.param_links.push((v.0, param_index));
    }

    /// Constant leaf; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable leaf (ignored if the tape has gradients disabled).
    pub fn leaf_grad(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(value, rg)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, back: BackFn) -> Var {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|&p| self.nodes[p].requires_grad);
        if requires_grad {
            self.nodes.push(Node {
                value,
                requires_grad: true,
                parents,
                back: Some(back),
            });
        } else {
            self.nodes.push(Node {
                value,
                requires_grad: false,
                parents: Vec::new(),
                back: None,
            });
        }
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise binary ops (trailing-dimension broadcasting) ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(move |g, _, _, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(g, &sa)),
                    needs[1].then(|| reduce_to_shape(g, &sb)),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(move |g, _, _, needs| {
                vec![
                    needs[0].then(|| reduce_to_shape(g, &sa)),
                    needs[1].then(|| reduce_to_shape(&g.map(|v| -v), &sb)),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(move |g, p, _, needs| {
                vec![
                    needs[0].then(|| {
                        let ga = broadcast_binary("mul_bwd", g, p[1], |x, y| x * y).unwrap();
                        reduce_to_shape(&ga, &sa)
                    }),
                    needs[1].then(|| {
                        let gb = broadcast_binary("mul_bwd", g, p[0], |x, y| x * y).unwrap();
                        reduce_to_shape(&gb, &sb)
                    }),
                ]
            }),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("div", self.value(a), self.value(b), |x, y| x / y)?;
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(move |g, p, _, needs| {
                vec![
                    needs[0].then(|| {
                        let ga = broadcast_binary("div_bwd", g, p[1], |x, y| x / y).unwrap();
                        reduce_to_shape(&ga, &sa)
                    }),
                    needs[1].then(|| {
                        // d/db (a/b) = -a / b^2
                        let ga = broadcast_binary("div_bwd", g, p[0], |x, y| x * y).unwrap();
                        let gb =
                            broadcast_binary("div_bwd", &ga, p[1], |x, y| -x / (y * y)).unwrap();
                        reduce_to_shape(&gb, &sb)
                    }),
                ]
            }),
        ))
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.extremum(a, b, true)
    }

    /// Elementwise maximum; ties route the gradient to the first argument.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.extremum(a, b, false)
    }

    fn extremum(&mut self, a: Var, b: Var, take_min: bool) -> Result<Var> {
        let op: &'static str = if take_min { "min" } else { "max" };
        let out = broadcast_binary(op, self.value(a), self.value(b), move |x, y| {
            if take_min {
                if x <= y { x } else { y }
            } else if x >= y {
                x
            } else {
                y
            }
        })?;
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(move |g, p, _, needs| {
                let a_wins = broadcast_binary(
                    "ext_bwd",
                    p[0],
                    p[1],
                    move |x, y| {
                        let w = if take_min { x <= y } else { x >= y };
                        if w { 1.0 } else { 0.0 }
                    },
                )
                .unwrap();
                vec![
                    needs[0].then(|| {
                        let ga = broadcast_binary("ext_bwd", g, &a_wins, |x, m| x * m).unwrap();
                        reduce_to_shape(&ga, &sa)
                    }),
                    needs[1].then(|| {
                        let gb =
                            broadcast_binary("ext_bwd", g, &a_wins, |x, m| x * (1.0 - m)).unwrap();
                        reduce_to_shape(&gb, &sb)
                    }),
                ]
            }),
        ))
    }

    // ---- scalar ops ----

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(
            out,
            vec![a.0],
            Box::new(|g, _, _, _| vec![Some(g.clone())]),
        )
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * s))]),
        )
    }

    /// Elementwise `x^p` for constant `p`; inputs are expected nonnegative
    /// when `p` is fractional. The gradient at `x = 0` is defined as 0 to
    /// avoid infinities from exponents below 1.
    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|v| v.powf(p));
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, pv, _, _| {
                let x = pv[0];
                let mut gx = g.clone();
                for (gi, &xi) in gx.data_mut().iter_mut().zip(x.data()) {
                    let d = if p == 0.0 || xi == 0.0 {
                        0.0
                    } else {
                        p * xi.powf(p - 1.0)
                    };
                    *gi *= d;
                }
                vec![Some(gx)]
            }),
        )
    }

    // ---- unary ops ----

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| -v);
        self.push(
            out,
            vec![a.0],
            Box::new(|g, _, _, _| vec![Some(g.map(|v| -v))]),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(
            out,
            vec![a.0],
            Box::new(|g, p, _, _| {
                let gx = broadcast_binary("abs_bwd", g, p[0], |gi, xi| gi * xi.signum()).unwrap();
                vec![Some(gx)]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(
            out,
            vec![a.0],
            Box::new(|g, p, _, _| {
                let gx =
                    broadcast_binary("relu_bwd", g, p[0], |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                        .unwrap();
                vec![Some(gx)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        self.push(
            out,
            vec![a.0],
            Box::new(|g, _, y, _| {
                let gx = broadcast_binary("sig_bwd", g, y, |gi, yi| gi * yi * (1.0 - yi)).unwrap();
                vec![Some(gx)]
            }),
        )
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus_scalar);
        self.push(
            out,
            vec![a.0],
            Box::new(|g, p, _, _| {
                let gx =
                    broadcast_binary("sp_bwd", g, p[0], |gi, xi| gi * sigmoid_scalar(xi)).unwrap();
                vec![Some(gx)]
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(
            out,
            vec![a.0],
            Box::new(|g, _, y, _| {
                let gx = broadcast_binary("exp_bwd", g, y, |gi, yi| gi * yi).unwrap();
                vec![Some(gx)]
            }),
        )
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(
            out,
            vec![a.0],
            Box::new(|g, p, _, _| {
                let gx = broadcast_binary("log_bwd", g, p[0], |gi, xi| gi / xi).unwrap();
                vec![Some(gx)]
            }),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(
            out,
            vec![a.0],
            Box::new(|g, _, y, _| {
                let gx = broadcast_binary("sqrt_bwd", g, y, |gi, yi| gi / (2.0 * yi)).unwrap();
                vec![Some(gx)]
            }),
        )
    }

    // ---- matmul ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let out = mm(va, vb)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(|g, p, _, needs| {
                vec![
                    needs[0].then(|| mm(g, &p[1].transposed().unwrap()).unwrap()),
                    needs[1].then(|| mm(&p[0].transposed().unwrap(), g).unwrap()),
                ]
            }),
        ))
    }

    // ---- convolution ----

    /// 2-D cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.shape().len() != 3 || vw.shape().len() != 4 || vx.shape()[0] != vw.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: vx.shape().to_vec(),
                right: vw.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (h, wd) = (vx.shape()[1], vx.shape()[2]);
        let (kh, kw) = (vw.shape()[2], vw.shape()[3]);
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::invalid(format!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        let out = conv2d_forward(vx, vw, stride, padding, mode);
        Ok(self.push(
            out,
            vec![x.0, w.0],
            Box::new(move |g, p, _, needs| {
                let (gx, gw) = conv2d_backward(g, p[0], p[1], stride, padding, mode, needs);
                vec![gx, gw]
            }),
        ))
    }

    // ---- reductions ----

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        let shape = self.value(a).shape().to_vec();
        self.push(
            Tensor::scalar(total),
            vec![a.0],
            Box::new(move |g, _, _, _| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let total: f64 = self.value(a).data().iter().sum();
        let shape = self.value(a).shape().to_vec();
        self.push(
            Tensor::scalar(total / n),
            vec![a.0],
            Box::new(move |g, _, _, _| vec![Some(Tensor::full(&shape, g.data()[0] / n))]),
        )
    }

    /// Sum along `axis`, keeping it as size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.shape().len() {
            return Err(Error::invalid(format!(
                "sum_axis: axis {} out of range for shape {:?}",
                axis,
                v.shape()
            )));
        }
        let mut out_shape = v.shape().to_vec();
        let len = out_shape[axis];
        out_shape[axis] = 1;
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let outer: usize = v.shape()[..axis].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += v.data()[base + i];
                }
            }
        }
        let out = Tensor::new(out_shape, data)?;
        let in_shape = v.shape().to_vec();
        Ok(self.push(
            out,
            vec![a.0],
            Box::new(move |g, _, _, _| {
                let zeros = Tensor::zeros(&in_shape);
                let gx = broadcast_binary("sum_axis_bwd", g, &zeros, |gi, _| gi).unwrap();
                vec![Some(gx)]
            }),
        ))
    }

    /// Maximum along `axis` (removed from the shape); gradient flows to the
    /// first maximal element along the axis.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.shape().len() {
            return Err(Error::invalid(format!(
                "max_axis: axis {} out of range for shape {:?}",
                axis,
                v.shape()
            )));
        }
        let len = v.shape()[axis];
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let outer: usize = v.shape()[..axis].iter().product();
        let mut out_shape = v.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let val = v.data()[base + i];
                    if val > data[o * inner + i] {
                        data[o * inner + i] = val;
                        argmax[o * inner + i] = base + i;
                    }
                }
            }
        }
        let out = Tensor::new(out_shape, data)?;
        let in_shape = v.shape().to_vec();
        Ok(self.push(
            out,
            vec![a.0],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&in_shape);
                for (slot, &src) in argmax.iter().enumerate() {
                    gx.data_mut()[src] += g.data()[slot];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.shape().len() {
            return Err(Error::invalid(format!(
                "softmax: axis {} out of range for shape {:?}",
                axis,
                v.shape()
            )));
        }
        let len = v.shape()[axis];
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let outer: usize = v.shape()[..axis].iter().product();
        let mut data = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(data[(o * len + l) * inner + i]);
                }
                let mut z = 0.0;
                for l in 0..len {
                    let idx = (o * len + l) * inner + i;
                    data[idx] = (data[idx] - mx).exp();
                    z += data[idx];
                }
                for l in 0..len {
                    data[(o * len + l) * inner + i] /= z;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            vec![a.0],
            Box::new(move |g, _, y, _| {
                // dx = y * (g - sum(g * y, axis))
                let mut gx = vec![0.0; g.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            dot += g.data()[idx] * y.data()[idx];
                        }
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            gx[idx] = y.data()[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), gx).unwrap())]
            }),
        ))
    }

    // ---- indexing and shape ----

    /// Select rows (entries along the first axis) at `indices`; differentiable
    /// with respect to the source via scatter-add.
    pub fn gather0(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.shape().is_empty() {
            return Err(Error::invalid("gather0 on rank-0 tensor"));
        }
        let rows = v.shape()[0];
        let row_size: usize = v.shape()[1..].iter().product::<usize>().max(1);
        for &ix in indices {
            if ix >= rows {
                return Err(Error::invalid(format!(
                    "gather0 index {} out of range for {} rows",
                    ix, rows
                )));
            }
        }
        let mut out_shape = v.shape().to_vec();
        out_shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row_size);
        for &ix in indices {
            data.extend_from_slice(&v.data()[ix * row_size..(ix + 1) * row_size]);
        }
        let out = Tensor::new(out_shape, data)?;
        let in_shape = v.shape().to_vec();
        let idx = indices.to_vec();
        Ok(self.push(
            out,
            vec![a.0],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&in_shape);
                for (k, &ix) in idx.iter().enumerate() {
                    for j in 0..row_size {
                        gx.data_mut()[ix * row_size + j] += g.data()[k * row_size + j];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let numel: usize = new_shape.iter().product();
        if numel != v.numel() {
            return Err(Error::invalid(format!(
                "reshape {:?} -> {:?} changes element count",
                v.shape(),
                new_shape
            )));
        }
        let out = Tensor::new(new_shape.to_vec(), v.data().to_vec())?;
        let in_shape = v.shape().to_vec();
        Ok(self.push(
            out,
            vec![a.0],
            Box::new(move |g, _, _, _| {
                vec![Some(
                    Tensor::new(in_shape.clone(), g.data().to_vec()).unwrap(),
                )]
            }),
        ))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transposed()?;
        Ok(self.push(
            out,
            vec![a.0],
            Box::new(|g, _, _, _| vec![Some(g.transposed().unwrap())]),
        ))
    }

    /// Concatenate two rank-2 tensors along the last axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[0] != vb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let (r, ca, cb) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
        }
        let out = Tensor::new(vec![r, ca + cb], data)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Box::new(move |g, _, _, needs| {
                let split = |off: usize, cols: usize| {
                    let mut d = Vec::with_capacity(r * cols);
                    for i in 0..r {
                        let base = i * (ca + cb) + off;
                        d.extend_from_slice(&g.data()[base..base + cols]);
                    }
                    Tensor::new(vec![r, cols], d).unwrap()
                };
                vec![
                    needs[0].then(|| split(0, ca)),
                    needs[1].then(|| split(ca, cb)),
                ]
            }),
        ))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 || start + len > v.shape()[1] {
            return Err(Error::invalid(format!(
                "slice_cols [{start}, {}) out of range for shape {:?}",
                start + len,
                v.shape()
            )));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        Ok(self.push(
            out,
            vec![a.0],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..len {
                        gx.data_mut()[i * c + start + j] = g.data()[i * len + j];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root; returns per-node gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        if !self.grad_enabled {
            return Err(Error::invalid("backward on a no-grad tape"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let keep = node.requires_grad && node.back.is_none();
            if let Some(back) = &node.back {
                let pvals: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect();
                let pgrads = back(&g, &pvals, &node.value, &needs);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg)?,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if keep {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { by_node: grads })
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn mm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(k, b.shape()[0]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a.data()[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Padded copy of `x: [C, H, W]`.
fn pad_input(x: &Tensor, padding: usize, mode: PadMode) -> Tensor {
    if padding == 0 {
        return x.clone();
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let mut out = vec![0.0; c * hp * wp];
    for ci in 0..c {
        for iy in 0..hp {
            for ix in 0..wp {
                let v = match mode {
                    PadMode::Zero => {
                        if iy < padding || ix < padding || iy >= h + padding || ix >= w + padding {
                            0.0
                        } else {
                            x.data()[(ci * h + (iy - padding)) * w + (ix - padding)]
                        }
                    }
                    PadMode::Replicate => {
                        let sy = iy.saturating_sub(padding).min(h - 1);
                        let sx = ix.saturating_sub(padding).min(w - 1);
                        x.data()[(ci * h + sy) * w + sx]
                    }
                };
                out[(ci * hp + iy) * wp + ix] = v;
            }
        }
    }
    Tensor::new(vec![c, hp, wp], out).unwrap()
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, padding: usize, mode: PadMode) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (hp, wp) = (h + 2 * padding, wd + 2 * padding);
    let ho = (hp - kh) / stride + 1;
    let wo = (wp - kw) / stride + 1;
    let xp = pad_input(x, padding, mode);
    let mut out = vec![0.0; o * ho * wo];
    for co in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ky in 0..kh {
                        let xbase = (ci * hp + oy * stride + ky) * wp + ox * stride;
                        let wbase = ((co * c + ci) * kh + ky) * kw;
                        let xrow = &xp.data()[xbase..xbase + kw];
                        let wrow = &w.data()[wbase..wbase + kw];
                        for (xv, wv) in xrow.iter().zip(wrow) {
                            acc += xv * wv;
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![o, ho, wo], out).unwrap()
}

fn conv2d_backward(
    g: &Tensor,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    mode: PadMode,
    needs: &[bool],
) -> (Option<Tensor>, Option<Tensor>) {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (hp, wp) = (h + 2 * padding, wd + 2 * padding);
    let (ho, wo) = (g.shape()[1], g.shape()[2]);
    let xp = pad_input(x, padding, mode);

    let gw = needs[1].then(|| {
        let mut gw = Tensor::zeros(w.shape());
        for co in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g.data()[(co * ho + oy) * wo + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for ky in 0..kh {
                            let xbase = (ci * hp + oy * stride + ky) * wp + ox * stride;
                            let wbase = ((co * c + ci) * kh + ky) * kw;
                            let xrow = &xp.data()[xbase..xbase + kw];
                            let wrow = &mut gw.data_mut()[wbase..wbase + kw];
                            for (wv, &xv) in wrow.iter_mut().zip(xrow) {
                                *wv += gv * xv;
                            }
                        }
                    }
                }
            }
        }
        gw
    });

    let gx = needs[0].then(|| {
        let mut gxp = vec![0.0; c * hp * wp];
        for co in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g.data()[(co * ho + oy) * wo + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for ky in 0..kh {
                            let xbase = (ci * hp + oy * stride + ky) * wp + ox * stride;
                            let wbase = ((co * c + ci) * kh + ky) * kw;
                            let wrow = &w.data()[wbase..wbase + kw];
                            let xrow = &mut gxp[xbase..xbase + kw];
                            for (xv, &wv) in xrow.iter_mut().zip(wrow) {
                                *xv += gv * wv;
                            }
                        }
                    }
                }
            }
        }
        // fold padded gradient back onto the source pixels
        let mut gx = Tensor::zeros(x.shape());
        for ci in 0..c {
            for iy in 0..hp {
                for ix in 0..wp {
                    let v = gxp[(ci * hp + iy) * wp + ix];
                    if v == 0.0 {
                        continue;
                    }
                    match mode {
                        PadMode::Zero => {
                            if iy >= padding
                                && ix >= padding
                                && iy < h + padding
                                && ix < wd + padding
                            {
                                gx.data_mut()[(ci * h + iy - padding) * wd + ix - padding] += v;
                            }
                        }
                        PadMode::Replicate => {
                            let sy = iy.saturating_sub(padding).min(h - 1);
                            let sx = ix.saturating_sub(padding).min(wd - 1);
                            gx.data_mut()[(ci * h + sy) * wd + sx] += v;
                        }
                    }
                }
            }
        }
        gx
    });

    (gx, gw)
}

/// Indices of the `k` largest elements of the flattened tensor, sorted by
/// value descending; ties broken by ascending flat (row-major) index.
pub fn topk_indices(t: &Tensor, k: usize) -> Result<Vec<usize>> {
    if k > t.numel() {
        return Err(Error::invalid(format!(
            "topk: k = {} out of range for {} elements",
            k,
            t.numel()
        )));
    }
    if t.has_non_finite() {
        return Err(Error::NonFinite("topk input".into()));
    }
    let mut order: Vec<usize> = (0..t.numel()).collect();
    order.sort_by(|&i, &j| {
        t.data()[j]
            .partial_cmp(&t.data()[i])
            .expect("finite values")
            .then(i.cmp(&j))
    });
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::from_vec(vec![3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_one_is_bitwise_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.1, -2.5, 3.7e-13, 1e300]));
        let one = tape.leaf(Tensor::scalar(1.0));
        let y = tape.mul(x, one).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn grad_of_sum_of_product_is_other_factor() {
        let mut tape = Tape::new();
        let a = tape.leaf_grad(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let b = tape.leaf(Tensor::from_vec(vec![4.0, 5.0, 6.0]));
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.leaf(
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let x = tape.leaf(Tensor::new(vec![3, 2], (0..6).map(|v| v as f64).collect()).unwrap());
        let ix = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(ix).data(), tape.value(x).data());

        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let y = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_dimension_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data()[0], 0.5);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2.5; 5]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn topk_order_and_ties() {
        let t = Tensor::from_vec(vec![0.1, 0.9, 0.4]);
        assert_eq!(topk_indices(&t, 2).unwrap(), vec![1, 2]);
        let plateau = Tensor::from_vec(vec![0.5; 6]);
        assert_eq!(topk_indices(&plateau, 3).unwrap(), vec![0, 1, 2]);
        assert!(topk_indices(&t, 4).is_err());
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap());
        let w = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, w, 1, 0, PadMode::Zero).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_kernel_too_large_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 2]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(tape.conv2d(x, w, 1, 0, PadMode::Zero).is_err());
    }

    #[test]
    fn broadcast_backward_grad_shapes_match_inputs() {
        let mut tape = Tape::new();
        let a = tape.leaf_grad(Tensor::zeros(&[2, 3]));
        let b = tape.leaf_grad(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().shape(), &[2, 3]);
        assert_eq!(grads.get(b).unwrap().shape(), &[3]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn no_grad_tape_rejects_backward() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf_grad(Tensor::scalar(1.0));
        assert!(!tape.requires_grad(x));
        let y = tape.sigmoid(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn gather_rows_and_backward_scatter() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.gather0(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
