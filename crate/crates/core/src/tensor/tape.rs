use super::conv::{conv2d_backward, conv2d_forward, conv2d_output_extent, gemm, ConvGeometry};
use super::{check_finite, Tensor};
use crate::error::{invalid, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
///
/// Receives the output gradient and the input values; returns one optional
/// gradient per input, in input order.
pub trait BackwardRule: Send + Sync {
    fn backward(&self, grad_out: &[f64], inputs: &[&[f64]]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    ChannelBias {
        input: Var,
        bias: Var,
        channels: usize,
        inner: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        rows: usize,
        n: usize,
        m: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Square(Var),
    Log1p(Var),
    Tanh(Var),
    ScalarMul(Var, f64),
    Reduce {
        input: Var,
        map: Vec<usize>,
        scale: f64,
    },
    Reshape(Var),
    ConcatCols {
        left: Var,
        right: Var,
        rows: usize,
        n_left: usize,
        n_right: usize,
    },
    LayerNorm {
        input: Var,
        width: usize,
        inv_std: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Dynamic computation graph recorded in execution order.
///
/// Nodes are appended as operations run, so inputs always precede the nodes
/// that consume them and a single reverse sweep visits every node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    /// Accumulates the gradient of `var` into `tensor.grad`.
    pub fn write_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => {
                let zeros = vec![0.0; tensor.len()];
                tensor.accumulate_grad(&zeros)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf; gradients are tracked when `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad,
            Op::Leaf,
        )
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), false, Op::Leaf)
    }

    /// Records raw values as a non-differentiable leaf.
    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return invalid(format!("shape {shape:?} does not match {} values", data.len()));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Copy of a recorded value cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("recorded nodes are well-shaped")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return invalid(format!("expected a scalar, got shape {:?}", n.shape));
        }
        Ok(n.value[0])
    }

    /// Records an operation whose backward rule lives outside this module.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        rule: Box<dyn BackwardRule>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return invalid("custom op output does not match its shape");
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        ))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (is, ks) = (self.shape(input), self.shape(kernel));
        if is.len() != 4 || ks.len() != 4 {
            return invalid(format!("conv2d expects rank-4 input and kernel, got {is:?} and {ks:?}"));
        }
        if is[1] != ks[1] {
            return invalid(format!("conv2d channel mismatch: input {is:?}, kernel {ks:?}"));
        }
        if stride == 0 {
            return invalid("conv2d stride must be positive");
        }
        let h_out = conv2d_output_extent(is[2], ks[2], stride, padding);
        let w_out = conv2d_output_extent(is[3], ks[3], stride, padding);
        let (h_out, w_out) = match (h_out, w_out) {
            (Some(h), Some(w)) => (h, w),
            _ => return invalid(format!("kernel {ks:?} larger than padded input {is:?}")),
        };
        let geom = ConvGeometry {
            batch: is[0],
            c_in: is[1],
            h: is[2],
            w: is[3],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
            h_out,
            w_out,
        };
        check_finite(self.value(input), "conv2d input")?;
        let out = conv2d_forward(&geom, self.value(input), self.value(kernel));
        let rg = self.requires_grad(input) || self.requires_grad(kernel);
        Ok(self.push(
            vec![geom.batch, geom.c_out, h_out, w_out],
            out,
            rg,
            Op::Conv2d { input, kernel, geom },
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[B,C,...]` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let bs = self.shape(bias);
        if is.len() < 2 || bs.len() != 1 || bs[0] != is[1] {
            return invalid(format!("channel bias {bs:?} does not fit input {is:?}"));
        }
        let channels = is[1];
        let inner: usize = is[2..].iter().product();
        let b = self.value(bias).to_vec();
        let mut out = self.value(input).to_vec();
        for (chunk_idx, chunk) in out.chunks_mut(inner).enumerate() {
            let c = chunk_idx % channels;
            chunk.iter_mut().for_each(|v| *v += b[c]);
        }
        let rg = self.requires_grad(input) || self.requires_grad(bias);
        Ok(self.push(
            is,
            out,
            rg,
            Op::ChannelBias {
                input,
                bias,
                channels,
                inner,
            },
        ))
    }

    /// `input · weightᵀ + bias` for `input: [B,N]`, `weight: [M,N]`, `bias: [M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (is, ws) = (self.shape(input), self.shape(weight));
        if is.len() != 2 || ws.len() != 2 || is[1] != ws[1] {
            return invalid(format!("linear shape mismatch: input {is:?}, weight {ws:?}"));
        }
        let (rows, n, m) = (is[0], is[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [m] {
                return invalid(format!("linear bias shape {:?}, expected [{m}]", self.shape(b)));
            }
        }
        let mut out = vec![0.0; rows * m];
        gemm(
            rows,
            n,
            m,
            self.value(input),
            (n, 1),
            self.value(weight),
            (1, n),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let rg = self.requires_grad(input) || self.requires_grad(weight) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            vec![rows, m],
            out,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                n,
                m,
            },
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return invalid(format!(
                "{name}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, op))
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

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, rg, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `ln(1 + x)`; values at or below −1 produce a numeric error.
    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= -1.0) {
            return Err(crate::Error::Numeric("log1p of a value ≤ −1".into()));
        }
        Ok(self.unary(a, f64::ln_1p, Op::Log1p(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::ScalarMul(a, k))
    }

    fn reduce(&mut self, input: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let mut reduced = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() || reduced[ax] {
                return invalid(format!("invalid reduction axis {ax} for shape {shape:?}"));
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        // Flat index of the output element each input element folds into.
        let n = self.value(input).len();
        let mut map = vec![0usize; n];
        let mut idx = vec![0usize; shape.len()];
        for slot in map.iter_mut() {
            let mut o = 0;
            for (d, &i) in idx.iter().enumerate() {
                if !reduced[d] {
                    o = o * shape[d] + i;
                }
            }
            *slot = o;
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &o) in self.value(input).iter().zip(&map) {
            out[o] += v;
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let rg = self.requires_grad(input);
        Ok(self.push(out_shape, out, rg, Op::Reduce { input, map, scale }))
    }

    pub fn sum(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(input, axes, false)
    }

    pub fn mean(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(input, axes, true)
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        self.reduce(input, &axes, false).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, input: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        self.reduce(input, &axes, true).expect("all axes are valid")
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(input).len() {
            return invalid(format!("cannot reshape {:?} to {shape:?}", self.shape(input)));
        }
        let value = self.value(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(input)))
    }

    /// Flattens every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let rows = s[0];
        let rest = s[1..].iter().product();
        self.reshape(input, &[rows, rest])
    }

    /// Column-wise concatenation of `[B,N]` and `[B,M]`.
    pub fn concat_cols(&mut self, left: Var, right: Var) -> Result<Var> {
        let (ls, rs) = (self.shape(left), self.shape(right));
        if ls.len() != 2 || rs.len() != 2 || ls[0] != rs[0] {
            return invalid(format!("concat_cols shape mismatch {ls:?} vs {rs:?}"));
        }
        let (rows, n_left, n_right) = (ls[0], ls[1], rs[1]);
        let mut out = Vec::with_capacity(rows * (n_left + n_right));
        let (lv, rv) = (self.value(left), self.value(right));
        for r in 0..rows {
            out.extend_from_slice(&lv[r * n_left..(r + 1) * n_left]);
            out.extend_from_slice(&rv[r * n_right..(r + 1) * n_right]);
        }
        let rg = self.requires_grad(left) || self.requires_grad(right);
        Ok(self.push(
            vec![rows, n_left + n_right],
            out,
            rg,
            Op::ConcatCols {
                left,
                right,
                rows,
                n_left,
                n_right,
            },
        ))
    }

    /// Normalizes each row of a `[B,N]` tensor to zero mean and unit variance.
    pub fn layer_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 2 {
            return invalid(format!("layer_norm expects rank 2, got {s:?}"));
        }
        let width = s[1];
        let shape = s.to_vec();
        let mut out = Vec::with_capacity(self.value(input).len());
        let mut inv_std = Vec::with_capacity(shape[0]);
        for row in self.value(input).chunks(width) {
            let mu = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / width as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std.push(r);
            out.extend(row.iter().map(|x| (x - mu) * r));
        }
        let rg = self.requires_grad(input);
        Ok(self.push(shape, out, rg, Op::LayerNorm { input, width, inv_std }))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.backward_from(loss, &[1.0])
    }

    /// Reverse sweep seeded with an arbitrary cotangent for `output`
    /// (a vector–Jacobian product).
    pub fn backward_from(&self, output: Var, cotangent: &[f64]) -> Result<Grads> {
        if cotangent.len() != self.value(output).len() {
            return invalid("cotangent length does not match output");
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(cotangent.to_vec());
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contribution),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let (gi, gk) = conv2d_backward(
                    geom,
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    rg(*input),
                    rg(*kernel),
                );
                if let Some(gi) = gi {
                    acc(grads, *input, gi);
                }
                if let Some(gk) = gk {
                    acc(grads, *kernel, gk);
                }
            }
            Op::ChannelBias {
                input,
                bias,
                channels,
                inner,
            } => {
                if rg(*bias) {
                    let mut gb = vec![0.0; *channels];
                    for (chunk_idx, chunk) in g.chunks(*inner).enumerate() {
                        gb[chunk_idx % channels] += chunk.iter().sum::<f64>();
                    }
                    acc(grads, *bias, gb);
                }
                acc(grads, *input, g.to_vec());
            }
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                n,
                m,
            } => {
                let (rows, n, m) = (*rows, *n, *m);
                if rg(*input) {
                    let mut gi = vec![0.0; rows * n];
                    gemm(rows, m, n, g, (m, 1), self.value(*weight), (n, 1), &mut gi, false);
                    acc(grads, *input, gi);
                }
                if rg(*weight) {
                    let mut gw = vec![0.0; m * n];
                    gemm(m, rows, n, g, (1, m), self.value(*input), (n, 1), &mut gw, false);
                    acc(grads, *weight, gw);
                }
                if let Some(b) = bias {
                    if rg(*b) {
                        let mut gb = vec![0.0; m];
                        for row in g.chunks(m) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        acc(grads, *b, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if rg(*a) {
                    acc(grads, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if rg(*b) {
                    acc(grads, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Relu(a) => {
                let contribution = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, *a, contribution);
            }
            Op::Square(a) => {
                let contribution = g.iter().zip(self.value(*a)).map(|(g, x)| 2.0 * x * g).collect();
                acc(grads, *a, contribution);
            }
            Op::Log1p(a) => {
                let contribution = g.iter().zip(self.value(*a)).map(|(g, x)| g / (1.0 + x)).collect();
                acc(grads, *a, contribution);
            }
            Op::Tanh(a) => {
                let contribution = g.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(grads, *a, contribution);
            }
            Op::ScalarMul(a, k) => acc(grads, *a, g.iter().map(|v| v * k).collect()),
            Op::Reduce { input, map, scale } => {
                let contribution = map.iter().map(|&o| g[o] * scale).collect();
                acc(grads, *input, contribution);
            }
            Op::Reshape(a) => acc(grads, *a, g.to_vec()),
            Op::ConcatCols {
                left,
                right,
                rows,
                n_left,
                n_right,
            } => {
                let w = n_left + n_right;
                let mut gl = Vec::with_capacity(rows * n_left);
                let mut gr = Vec::with_capacity(rows * n_right);
                for row in g.chunks(w) {
                    gl.extend_from_slice(&row[..*n_left]);
                    gr.extend_from_slice(&row[*n_left..]);
                }
                acc(grads, *left, gl);
                acc(grads, *right, gr);
            }
            Op::LayerNorm { input, width, inv_std } => {
                // dx = r · (g − mean(g) − y · mean(g·y)) with y the normalized row.
                let mut gi = Vec::with_capacity(g.len());
                for ((grow, yrow), r) in g.chunks(*width).zip(node.value.chunks(*width)).zip(inv_std) {
                    let n = *width as f64;
                    let gm = grow.iter().sum::<f64>() / n;
                    let gym = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    gi.extend(grow.iter().zip(yrow).map(|(gv, y)| r * (gv - gm - y * gym)));
                }
                acc(grads, *input, gi);
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v)).collect();
                let outs = rule.backward(g, &values);
                for (v, gi) in inputs.iter().zip(outs) {
                    if let Some(gi) = gi {
                        acc(grads, *v, gi);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::reference::{conv2d_naive, linear_naive};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = tape.constant(&t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_sum_reduction() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let k = tape.constant(&t(&[1, 1, 2, 2], &[1.; 4]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y), &[10.0]);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, padding) in &[(2, 0), (1, 1), (3, 2)] {
            let x = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
            let k = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let (xv, kv) = (tape.constant(&x), tape.constant(&k));
            let y = tape.conv2d(xv, kv, stride, padding).unwrap();
            let (want, dims) = conv2d_naive(x.data(), [2, 3, 8, 8], k.data(), [4, 3, 3, 3], stride, padding);
            assert_eq!(tape.shape(y), &dims[..]);
            for (a, b) in tape.value(y).iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes_and_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(&Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, 1, 0), Err(crate::Error::InvalidArgument(_))));
        let big = tape.constant(&Tensor::zeros(&[1, 2, 5, 5]));
        assert!(tape.conv2d(x, big, 1, 0).is_err());
        let nan = tape.constant(&t(&[1, 1, 1, 1], &[f64::NAN]));
        let one = tape.constant(&t(&[1, 1, 1, 1], &[1.0]));
        assert!(matches!(tape.conv2d(nan, one, 1, 0), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn linear_hand_values_and_oracle() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[1., 2.]));
        let w = tape.constant(&t(&[1, 2], &[3., 4.]));
        let b = tape.constant(&t(&[1], &[5.]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[16.0]);

        let x = t(&[2, 3], &[1., -2., 3., 0.5, 0., -1.]);
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let zero = Tensor::zeros(&[3]);
        let (xv, wv, bv) = (tape.constant(&x), tape.constant(&eye), tape.constant(&zero));
        let y = tape.linear(xv, wv, Some(bv)).unwrap();
        assert_eq!(tape.value(y), x.data());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 6], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        let (xv, wv, bv) = (tape.constant(&x), tape.constant(&w), tape.constant(&b));
        let y = tape.linear(xv, wv, Some(bv)).unwrap();
        let want = linear_naive(x.data(), 4, 6, w.data(), 3, b.data());
        for (a, b) in tape.value(y).iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(tape.linear(xv, bv, None).is_err());
    }

    #[test]
    fn elementwise_semantics() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[3], &[-1., 0., 2.]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0., 0., 2.]);
        let z = tape.constant(&t(&[1], &[0.]));
        let l = tape.log1p(z).unwrap();
        assert_eq!(tape.value(l), &[0.0]);
        let bad = tape.constant(&t(&[1], &[-1.0]));
        assert!(tape.log1p(bad).is_err());
        let other = tape.constant(&t(&[2], &[1., 2.]));
        assert!(tape.add(x, other).is_err());
        assert!(tape.mul(x, other).is_err());
    }

    #[test]
    fn square_backward_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[3.0]).with_grad());
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x), Some(&[6.0][..]));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1., 2., 3.]).with_grad());
        let m = tape.mean_all(x);
        assert_eq!(tape.value(m), &[2.0]);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1. / 3., 1. / 3., 1. / 3.]);
        let zeros = tape.constant(&Tensor::zeros(&[4]));
        let s = tape.sum_all(zeros);
        assert_eq!(tape.value(s), &[0.0]);

        let x = tape.constant(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let s0 = tape.sum(x, &[0]).unwrap();
        assert_eq!(tape.value(s0), &[5., 7., 9.]);
        let m1 = tape.mean(x, &[1]).unwrap();
        assert_eq!(tape.value(m1), &[2., 5.]);
        assert!(tape.sum(x, &[2]).is_err());
        assert!(tape.sum(x, &[1, 1]).is_err());
    }

    #[test]
    fn backward_of_identity_and_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[4.0]).with_grad());
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x), Some(&[1.0][..]));
        let v = tape.leaf(&t(&[2], &[1., 2.]).with_grad());
        assert!(matches!(tape.backward(v), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn branches_accumulate() {
        // loss = sum(3x) + sum(x²) → grad 3 + 2x
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, -2.0]).with_grad());
        let a = tape.scalar_mul(x, 3.0);
        let a = tape.sum_all(a);
        let b = tape.square(x);
        let b = tape.sum_all(b);
        let loss = tape.add(a, b).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0, -1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
        let c = tape.constant(&t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let d = tape.detach(y);
        let z = tape.add(y, d).unwrap();
        let loss = tape.sum_all(z);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(d).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    }
}
