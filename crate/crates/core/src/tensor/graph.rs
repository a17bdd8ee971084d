use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Linear { x: Var, w: Var, b: Var, rows: usize, inp: usize, out: usize },
    MaxPool { x: Var, planes: usize, h: usize, w: usize, k: usize, stride: usize, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, area: usize },
    Mean(Var),
    Sum(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Ln(Var),
    Row { x: Var, index: usize },
    Stack(Vec<Var>),
    LogSumExp(Var),
    Cosine { u: Var, v: Var, eps: f64 },
    Focal { probs: Var, targets: Vec<f64>, alpha: f64, gamma: f64, eps: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias, .. } => vec![*input, *kernel, *bias],
            Op::Linear { x, w, b, .. } => vec![*x, *w, *b],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::Scale(x, _)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::LogSumExp(x) => vec![*x],
            Op::MaxPool { x, .. } | Op::GlobalAvgPool { x, .. } | Op::Row { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Stack(vs) => vs.clone(),
            Op::Cosine { u, v, .. } => vec![*u, *v],
            Op::Focal { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Node order is topological by construction: an operation can only refer to
/// nodes that already exist.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether gradients are
    /// collected for it; any previous gradient on the tensor is dropped.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Var {
        let (shape, data) = self.compute(&op);
        let requires_grad = op.inputs().iter().any(|&i| self.requires_grad(i));
        let value = Tensor { shape, data, requires_grad, grad: None };
        self.push(value, op)
    }

    /// Evaluates an operation on the values currently stored for its inputs.
    fn compute(&self, op: &Op) -> (Vec<usize>, Vec<f64>) {
        match op {
            Op::Leaf => unreachable!("leaves carry their own value"),
            Op::Conv2d { input, kernel, bias, geom } => (
                vec![geom.n, geom.f, geom.oh, geom.ow],
                kernels::conv2d_forward(geom, self.data(*input), self.data(*kernel), self.data(*bias)),
            ),
            Op::Relu(x) => self.map(*x, |v| v.max(0.0)),
            Op::Sigmoid(x) => self.map(*x, sigmoid),
            Op::Exp(x) => self.map(*x, f64::exp),
            Op::Ln(x) => self.map(*x, f64::ln),
            Op::Scale(x, c) => self.map(*x, |v| v * c),
            Op::Linear { x, w, b, rows, inp, out } => {
                let mut data = Vec::with_capacity(rows * out);
                for _ in 0..*rows {
                    data.extend_from_slice(self.data(*b));
                }
                gemm_linear(*rows, *inp, *out, self.data(*x), self.data(*w), &mut data);
                let shape = if self.shape(*x).len() == 1 { vec![*out] } else { vec![*rows, *out] };
                (shape, data)
            }
            Op::MaxPool { x, planes, h, w, k, stride, .. } => {
                let (data, _, oh, ow) = kernels::max_pool_forward(self.data(*x), *planes, *h, *w, *k, *stride);
                let s = self.shape(*x);
                let mut shape = s[..s.len() - 2].to_vec();
                shape.extend([oh, ow]);
                (shape, data)
            }
            Op::GlobalAvgPool { x, area, .. } => {
                let s = self.shape(*x);
                let data = self.data(*x).chunks_exact(*area).map(|c| c.iter().sum::<f64>() / *area as f64).collect();
                (s[..s.len() - 2].to_vec(), data)
            }
            Op::Mean(x) => {
                let d = self.data(*x);
                (vec![], vec![d.iter().sum::<f64>() / d.len() as f64])
            }
            Op::Sum(x) => (vec![], vec![self.data(*x).iter().sum()]),
            Op::Add(a, b) => self.zip(*a, *b, |x, y| x + y),
            Op::Sub(a, b) => self.zip(*a, *b, |x, y| x - y),
            Op::Mul(a, b) => self.zip(*a, *b, |x, y| x * y),
            Op::Row { x, index } => {
                let s = self.shape(*x);
                let len: usize = s[1..].iter().product();
                (s[1..].to_vec(), self.data(*x)[index * len..(index + 1) * len].to_vec())
            }
            Op::Stack(vs) => {
                let mut shape = vec![vs.len()];
                shape.extend_from_slice(self.shape(vs[0]));
                let data = vs.iter().flat_map(|&v| self.data(v).iter().copied()).collect();
                (shape, data)
            }
            Op::LogSumExp(x) => (vec![], vec![log_sum_exp(self.data(*x))]),
            Op::Cosine { u, v, eps } => (vec![], vec![cosine_parts(self.data(*u), self.data(*v), *eps).0]),
            Op::Focal { probs, targets, alpha, gamma, eps } => {
                let p = self.data(*probs);
                let total: f64 = p
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| focal_term(p.clamp(*eps, 1.0 - eps), y, *alpha, *gamma).0)
                    .sum();
                (vec![], vec![total / p.len() as f64])
            }
        }
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        (self.shape(x).to_vec(), self.data(x).iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        (self.shape(a).to_vec(), data)
    }

    /// Re-evaluates every recorded operation and reports whether all outputs
    /// are reproduced bit-for-bit.
    pub fn replay_matches(&self) -> bool {
        self.nodes.iter().all(|node| match &node.op {
            Op::Leaf => true,
            op => {
                let (shape, data) = self.compute(op);
                shape == node.value.shape
                    && data.iter().zip(&node.value.data).all(|(a, b)| a.to_bits() == b.to_bits())
            }
        })
    }

    /// 2-D convolution of `[N,C,H,W]` input with `[F,C,kH,kW]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (is, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if is.len() != 4 || ks.len() != 4 {
            return Err(Error::config(format!("conv2d expects rank-4 input and kernel, got {is:?} and {ks:?}")));
        }
        if ks[1] != is[1] {
            return Err(Error::config(format!(
                "conv2d kernel has {} input channels but input has {}",
                ks[1], is[1]
            )));
        }
        if bs != [ks[0]] {
            return Err(Error::config(format!("conv2d bias shape {bs:?} does not match {} filters", ks[0])));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be at least 1"));
        }
        if ks[2] > is[2] + 2 * padding || ks[3] > is[3] + 2 * padding {
            return Err(Error::config(format!("kernel {ks:?} larger than padded input {is:?}")));
        }
        let geom = ConvGeom {
            n: is[0],
            c: is[1],
            h: is[2],
            w: is[3],
            f: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
            oh: kernels::conv_output_size(is[2], ks[2], stride, padding),
            ow: kernels::conv_output_size(is[3], ks[3], stride, padding),
        };
        Ok(self.record(Op::Conv2d { input, kernel, bias, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.record(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.record(Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.record(Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.record(Op::Ln(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.record(Op::Scale(x, c))
    }

    /// Affine map `x W^T + b` for `x` of shape `[in]` or `[rows, in]` and
    /// `W` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || bs != [ws[0]] {
            return Err(Error::config(format!("linear weight {ws:?} / bias {bs:?} mismatch")));
        }
        let (rows, inp) = match xs {
            [i] => (1, *i),
            [r, i] => (*r, *i),
            _ => return Err(Error::config(format!("linear input must be rank 1 or 2, got {xs:?}"))),
        };
        if inp != ws[1] {
            return Err(Error::config(format!("linear input width {inp} does not match weight {ws:?}")));
        }
        let out = ws[0];
        Ok(self.record(Op::Linear { x, w, b, rows, inp, out }))
    }

    /// Max pooling over the last two axes.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        if k == 0 || stride == 0 {
            return Err(Error::config("pool window and stride must be positive"));
        }
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::config(format!("max_pool2d needs a spatial input, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if k > h || k > w {
            return Err(Error::config(format!("pool window {k} exceeds {h}x{w} map")));
        }
        let planes = s[..s.len() - 2].iter().product();
        let (_, argmax, _, _) = kernels::max_pool_forward(self.data(x), planes, h, w, k, stride);
        Ok(self.record(Op::MaxPool { x, planes, h, w, k, stride, argmax }))
    }

    /// Mean over the last two axes: `[.., H, W] -> [..]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 3 {
            return Err(Error::config(format!("global_avg_pool needs [.., C, H, W], got {s:?}")));
        }
        let area = s[s.len() - 2] * s[s.len() - 1];
        Ok(self.record(Op::GlobalAvgPool { x, area }))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        self.record(Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.record(Op::Sum(x))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.record(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.record(Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.record(Op::Mul(a, b)))
    }

    /// Slice `index` along the leading axis.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() || index >= s[0] {
            return Err(Error::config(format!("row {index} out of range for shape {s:?}")));
        }
        Ok(self.record(Op::Row { x, index }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::config("stack of zero tensors"))?;
        for &v in &vars[1..] {
            self.same_shape(first, v, "stack")?;
        }
        Ok(self.record(Op::Stack(vars.to_vec())))
    }

    /// Numerically stable `ln Σ exp(x)` over a vector.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        if self.value(x).numel() == 0 {
            return Err(Error::config("log_sum_exp of an empty tensor"));
        }
        Ok(self.record(Op::LogSumExp(x)))
    }

    /// Cosine similarity of two vectors. When either norm falls below `eps`
    /// the similarity is defined as 0 with zero gradient.
    pub fn cosine(&mut self, u: Var, v: Var, eps: f64) -> Result<Var> {
        self.same_shape(u, v, "cosine")?;
        Ok(self.record(Op::Cosine { u, v, eps }))
    }

    /// Mean focal loss over all cells of `probs` against 0/1 `targets`.
    /// Probabilities are clamped to `[eps, 1 - eps]`; clamped cells pass no
    /// gradient.
    pub fn focal(&mut self, probs: Var, targets: &[f64], alpha: f64, gamma: f64, eps: f64) -> Result<Var> {
        if targets.len() != self.value(probs).numel() {
            return Err(Error::config("focal targets do not match prediction count"));
        }
        Ok(self.record(Op::Focal { probs, targets: targets.to_vec(), alpha, gamma, eps }))
    }

    /// Reverse sweep from a scalar. Gradients are added into every
    /// `requires_grad` node reached, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(d) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.propagate(i, &d, &mut adj);
            self.nodes[i].value.accumulate_grad(&d);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, d: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value.data;
        let wants = |v: Var| self.requires_grad(v);
        let mut send = |v: Var, delta: Vec<f64>| accumulate(adj, v, delta);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    self.data(*input),
                    self.data(*kernel),
                    d,
                    [wants(*input), wants(*kernel), wants(*bias)],
                );
                if let Some(g) = grads.input {
                    send(*input, g);
                }
                if let Some(g) = grads.kernel {
                    send(*kernel, g);
                }
                if let Some(g) = grads.bias {
                    send(*bias, g);
                }
            }
            Op::Relu(x) => {
                let g = self.data(*x).iter().zip(d).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                send(*x, g);
            }
            Op::Sigmoid(x) => send(*x, y.iter().zip(d).map(|(&s, &g)| g * s * (1.0 - s)).collect()),
            Op::Exp(x) => send(*x, y.iter().zip(d).map(|(&e, &g)| g * e).collect()),
            Op::Ln(x) => send(*x, self.data(*x).iter().zip(d).map(|(&v, &g)| g / v).collect()),
            Op::Scale(x, c) => send(*x, d.iter().map(|g| g * c).collect()),
            Op::Linear { x, w, b, rows, inp, out } => {
                if wants(*x) {
                    let mut dx = vec![0.0; rows * inp];
                    // dX[rows, inp] = dY[rows, out] * W[out, inp]
                    gemm_raw(*rows, *out, *inp, d, (*out as isize, 1), self.data(*w), (*inp as isize, 1), &mut dx);
                    send(*x, dx);
                }
                if wants(*w) {
                    let mut dw = vec![0.0; out * inp];
                    // dW[out, inp] = dY^T[out, rows] * X[rows, inp]
                    gemm_raw(*out, *rows, *inp, d, (1, *out as isize), self.data(*x), (*inp as isize, 1), &mut dw);
                    send(*w, dw);
                }
                if wants(*b) {
                    let mut db = vec![0.0; *out];
                    for r in d.chunks_exact(*out) {
                        db.iter_mut().zip(r).for_each(|(a, g)| *a += g);
                    }
                    send(*b, db);
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&src, &g) in argmax.iter().zip(d) {
                    dx[src] += g;
                }
                send(*x, dx);
            }
            Op::GlobalAvgPool { x, area, .. } => {
                let scale = 1.0 / *area as f64;
                let dx = d.iter().flat_map(|&g| std::iter::repeat_n(g * scale, *area)).collect();
                send(*x, dx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![d[0] / n as f64; n]);
            }
            Op::Sum(x) => send(*x, vec![d[0]; self.value(*x).numel()]),
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, d.to_vec());
                }
                if wants(*b) {
                    send(*b, d.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    send(*a, d.to_vec());
                }
                if wants(*b) {
                    send(*b, d.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, d.iter().zip(self.data(*b)).map(|(g, v)| g * v).collect());
                }
                if wants(*b) {
                    send(*b, d.iter().zip(self.data(*a)).map(|(g, v)| g * v).collect());
                }
            }
            Op::Row { x, index } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                let len = d.len();
                dx[index * len..(index + 1) * len].copy_from_slice(d);
                send(*x, dx);
            }
            Op::Stack(vs) => {
                let len = d.len() / vs.len();
                for (k, &v) in vs.iter().enumerate() {
                    if wants(v) {
                        send(v, d[k * len..(k + 1) * len].to_vec());
                    }
                }
            }
            Op::LogSumExp(x) => {
                let lse = y[0];
                send(*x, self.data(*x).iter().map(|&v| d[0] * (v - lse).exp()).collect());
            }
            Op::Cosine { u, v, eps } => {
                let (uu, vv) = (self.data(*u), self.data(*v));
                let (cos, nu, nv) = cosine_parts(uu, vv, *eps);
                if nu * nv < *eps {
                    if wants(*u) {
                        send(*u, vec![0.0; uu.len()]);
                    }
                    if wants(*v) {
                        send(*v, vec![0.0; vv.len()]);
                    }
                    return;
                }
                let g = d[0];
                if wants(*u) {
                    let du = uu.iter().zip(vv).map(|(&a, &b)| g * (b / (nu * nv) - cos * a / (nu * nu))).collect();
                    send(*u, du);
                }
                if wants(*v) {
                    let dv = uu.iter().zip(vv).map(|(&a, &b)| g * (a / (nu * nv) - cos * b / (nv * nv))).collect();
                    send(*v, dv);
                }
            }
            Op::Focal { probs, targets, alpha, gamma, eps } => {
                let p = self.data(*probs);
                let scale = d[0] / p.len() as f64;
                let dp = p
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            scale * focal_term(p, t, *alpha, *gamma).1
                        }
                    })
                    .collect();
                send(*probs, dp);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn gemm_linear(rows: usize, inp: usize, out: usize, x: &[f64], w: &[f64], c: &mut [f64]) {
    // Y[rows, out] += X[rows, inp] * W^T[inp, out]
    // SAFETY: x is rows*inp, w is out*inp, c is rows*out.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            inp,
            out,
            1.0,
            x.as_ptr(),
            inp as isize,
            1,
            w.as_ptr(),
            1,
            inp as isize,
            1.0,
            c.as_mut_ptr(),
            out as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() == m * n);
    // SAFETY: callers pass buffers sized for the strided m*k and k*n views.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Returns `(cos, |u|, |v|)`; cos is 0 when `|u||v| < eps`.
pub(crate) fn cosine_parts(u: &[f64], v: &[f64], eps: f64) -> (f64, f64, f64) {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu * nv < eps {
        (0.0, nu, nv)
    } else {
        (dot / (nu * nv), nu, nv)
    }
}

/// Focal loss for one cell and its derivative with respect to `p`.
pub(crate) fn focal_term(p: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    if y >= 0.5 {
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * p.ln();
        let modulating = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p.ln() };
        (loss, alpha * (modulating - q.powf(gamma) / p))
    } else {
        let q = 1.0 - p;
        let loss = -(1.0 - alpha) * p.powf(gamma) * q.ln();
        let modulating = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) * q.ln() };
        (loss, -(1.0 - alpha) * (modulating - p.powf(gamma) / q))
    }
}
