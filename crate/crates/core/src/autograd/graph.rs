use super::array::Array;
use crate::error::{Error, Result};
use crate::spectral::kernel;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor {
    id: usize,
}

impl Tensor {
    pub fn node_id(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// Adds a `[C]` bias along axis 1 of `x`.
    AddBias { x: usize, bias: usize },
    MatMul(usize, usize),
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    Relu(usize),
    AvgPool2d { x: usize, size: usize },
    Reshape(usize),
    Sum(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, weights: Option<Vec<f64>>, probs: Vec<f64> },
    /// Stacks two same-shaped tensors along a new leading axis of extent 2.
    Stack(usize, usize),
    /// Picks one slab of the leading axis.
    Select { x: usize, part: usize },
    /// Complex DFT of a stacked `[2, ...]` tensor along `axes` of the unstacked shape.
    Dft { x: usize, axes: Vec<usize>, inverse: bool },
    Magnitude { re: usize, im: usize },
    Angle { re: usize, im: usize },
    PolarRe { amp: usize, phase: usize },
    PolarIm { amp: usize, phase: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
    grad: Option<Array>,
}

/// Below this magnitude a complex value's angle is defined as 0 and the
/// magnitude/angle partials are zero.
pub const PHASE_GUARD: f64 = 1e-12;

/// Append-only computation graph.
///
/// Nodes are only ever appended, and an op's inputs must already exist, so
/// append order is a topological order. [`Graph::backward`] walks it in
/// reverse, visiting each node once.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, inputs: &[usize]) -> Tensor {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Tensor { id: self.nodes.len() - 1 }
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Array) -> Tensor {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, grad: None });
        Tensor { id: self.nodes.len() - 1 }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Tensor {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, grad: None });
        Tensor { id: self.nodes.len() - 1 }
    }

    pub fn value(&self, t: Tensor) -> &Array {
        &self.nodes[t.id].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.id].value.shape()
    }

    pub fn grad(&self, t: Tensor) -> Option<&Array> {
        self.nodes[t.id].grad.as_ref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    /// Forward identity that severs the gradient edge: the result is a fresh
    /// constant leaf holding a copy of `x`'s values.
    pub fn stop_gradient(&mut self, x: Tensor) -> Tensor {
        let value = self.nodes[x.id].value.clone();
        self.constant(value)
    }

    fn same_shape(&self, a: Tensor, b: Tensor, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Tensor, b: Tensor, f: impl Fn(f64, f64) -> f64) -> Array {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Tensor, f: impl Fn(f64) -> f64) -> Array {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        Array::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a.id, b.id), &[a.id, b.id]))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a.id, b.id), &[a.id, b.id]))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a.id, b.id), &[a.id, b.id]))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a.id, c), &[a.id])
    }

    pub fn add_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::Dimension(format!(
                "add_bias: bias {bs:?} does not match axis 1 of {xs:?}"
            )));
        }
        let inner: usize = xs[2..].iter().product();
        let channels = xs[1];
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        Ok(self.push(out, Op::AddBias { x: x.id, bias: bias.id }, &[x.id, bias.id]))
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let v = Array::new(vec![sa[0], sb[1]], out)?;
        Ok(self.push(v, Op::MatMul(a.id, b.id), &[a.id, b.id]))
    }

    /// Cross-correlation of `x [N×C×H×W]` with `w [F×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad)?;
        let out = geo.forward(self.value(x).data(), self.value(w).data());
        let v = Array::new(vec![geo.n, geo.f, geo.oh, geo.ow], out)?;
        Ok(self.push(v, Op::Conv2d { x: x.id, w: w.id, stride, pad }, &[x.id, w.id]))
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let v = self.map(x, |a| if a > 0.0 { a } else { 0.0 });
        self.push(v, Op::Relu(x.id), &[x.id])
    }

    /// Non-overlapping `size×size` average pooling over the last two axes.
    pub fn avg_pool2d(&mut self, x: Tensor, size: usize) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::Config(format!("avg_pool2d: window {size} does not fit {s:?}")));
        }
        let (oh, ow) = (s[2] / size, s[3] / size);
        let xin = self.value(x).data();
        let planes = s[0] * s[1];
        let norm = 1.0 / (size * size) as f64;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..size {
                        for dx in 0..size {
                            acc += xin[(p * s[2] + oy * size + dy) * s[3] + ox * size + dx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        let v = Array::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(v, Op::AvgPool2d { x: x.id, size }, &[x.id]))
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x.id), &[x.id]))
    }

    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let s = self.value(x).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum(x.id), &[x.id])
    }

    /// Mean over the batch of `w[y_i] · (−log softmax(logits_i)[y_i])`.
    pub fn cross_entropy(
        &mut self,
        logits: Tensor,
        labels: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Tensor> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
            return Err(Error::Input(format!(
                "cross_entropy: label {y} at index {i} is outside [0, {k})"
            )));
        }
        if let Some(w) = weights {
            if w.len() != k {
                return Err(Error::Dimension(format!(
                    "cross_entropy: {} class weights for {k} classes",
                    w.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Input("cross_entropy: class weights must be finite and non-negative".into()));
            }
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let (arg, m) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            let mut rest = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[i * k + j] = e;
                if j != arg {
                    rest += e;
                }
            }
            let denom = 1.0 + rest;
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= denom;
            }
            // log-sum-exp minus the target logit, with log1p for the saturated case
            let nll = (m - row[labels[i]]) + rest.ln_1p();
            let w = weights.map_or(1.0, |w| w[labels[i]]);
            total += w * nll;
        }
        let v = Array::scalar(total / n as f64);
        let op = Op::CrossEntropy {
            logits: logits.id,
            labels: labels.to_vec(),
            weights: weights.map(<[f64]>::to_vec),
            probs,
        };
        Ok(self.push(v, op, &[logits.id]))
    }

    pub fn stack(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "stack")?;
        let mut shape = vec![2];
        shape.extend_from_slice(self.shape(a));
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let v = Array::new(shape, data)?;
        Ok(self.push(v, Op::Stack(a.id, b.id), &[a.id, b.id]))
    }

    pub fn select(&mut self, x: Tensor, part: usize) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[0] != 2 || part > 1 {
            return Err(Error::Dimension(format!("select: part {part} of {s:?}")));
        }
        let half = self.value(x).len() / 2;
        let data = self.value(x).data()[part * half..(part + 1) * half].to_vec();
        let v = Array::new(s[1..].to_vec(), data)?;
        Ok(self.push(v, Op::Select { x: x.id, part }, &[x.id]))
    }

    /// DFT of a stacked complex tensor `[2, ...]` along `axes` of the unstacked
    /// shape. Forward is unnormalized; inverse carries `1/M` per axis.
    pub fn dft(&mut self, x: Tensor, axes: &[usize], inverse: bool) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[0] != 2 {
            return Err(Error::Dimension(format!("dft: expected stacked complex input, got {s:?}")));
        }
        if axes.is_empty() {
            return Err(Error::Usage("dft: empty axis list".into()));
        }
        if let Some(a) = axes.iter().find(|&&a| a + 1 >= s.len()) {
            return Err(Error::Dimension(format!("dft: axis {a} out of range for {:?}", &s[1..])));
        }
        let mut data = self.value(x).data().to_vec();
        let inner = &s[1..];
        let (re, im) = data.split_at_mut(self.value(x).len() / 2);
        for &axis in axes {
            kernel::transform_axis(re, im, inner, axis, inverse);
        }
        let v = Array::new(s, data)?;
        Ok(self.push(v, Op::Dft { x: x.id, axes: axes.to_vec(), inverse }, &[x.id]))
    }

    /// `sqrt(re² + im²)`.
    pub fn magnitude(&mut self, re: Tensor, im: Tensor) -> Result<Tensor> {
        self.same_shape(re, im, "magnitude")?;
        let v = self.zip_map(re, im, f64::hypot);
        Ok(self.push(v, Op::Magnitude { re: re.id, im: im.id }, &[re.id, im.id]))
    }

    /// Two-argument arctangent in `(−π, π]`; 0 below [`PHASE_GUARD`].
    pub fn angle(&mut self, re: Tensor, im: Tensor) -> Result<Tensor> {
        self.same_shape(re, im, "angle")?;
        let v = self.zip_map(re, im, angle_of);
        Ok(self.push(v, Op::Angle { re: re.id, im: im.id }, &[re.id, im.id]))
    }

    /// `amp · cos(phase)`.
    pub fn polar_re(&mut self, amp: Tensor, phase: Tensor) -> Result<Tensor> {
        self.same_shape(amp, phase, "polar")?;
        let v = self.zip_map(amp, phase, |a, p| a * p.cos());
        Ok(self.push(v, Op::PolarRe { amp: amp.id, phase: phase.id }, &[amp.id, phase.id]))
    }

    /// `amp · sin(phase)`.
    pub fn polar_im(&mut self, amp: Tensor, phase: Tensor) -> Result<Tensor> {
        self.same_shape(amp, phase, "polar")?;
        let v = self.zip_map(amp, phase, |a, p| a * p.sin());
        Ok(self.push(v, Op::PolarIm { amp: amp.id, phase: phase.id }, &[amp.id, phase.id]))
    }

    /// Reverse pass from a scalar. Gradients of every tracked node reachable
    /// from `loss` are (re)populated; contributions from multiple consumers are
    /// summed.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.id].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.id].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            let shape = self.nodes[id].value.shape().to_vec();
            self.nodes[id].grad = Some(Array::new(shape, g).expect("gradient shape"));
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| self.nodes[i].value.data();
        let mut send = |target: usize, contrib: Vec<f64>| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::AddBias { x, bias } => {
                send(*x, g.to_vec());
                let xs = self.nodes[*x].value.shape();
                let inner: usize = xs[2..].iter().product();
                let channels = xs[1];
                let mut gb = vec![0.0; channels];
                for (i, v) in g.iter().enumerate() {
                    gb[(i / inner) % channels] += v;
                }
                send(*bias, gb);
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[*a].requires_grad {
                    // dA = G · Bᵀ
                    let vb = val(*b);
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * vb[kk * n + j];
                            }
                            ga[i * k + kk] = acc;
                        }
                    }
                    send(*a, ga);
                }
                if self.nodes[*b].requires_grad {
                    // dB = Aᵀ · G
                    let va = val(*a);
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let x = va[i * k + kk];
                            for j in 0..n {
                                gb[kk * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let geo = ConvGeometry::new(
                    self.nodes[*x].value.shape(),
                    self.nodes[*w].value.shape(),
                    *stride,
                    *pad,
                )
                .expect("validated in forward");
                if self.nodes[*x].requires_grad {
                    send(*x, geo.input_grad(g, val(*w)));
                }
                if self.nodes[*w].requires_grad {
                    send(*w, geo.weight_grad(g, val(*x)));
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                send(*x, g.iter().zip(vx).map(|(g, &a)| if a > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::AvgPool2d { x, size } => {
                let s = self.nodes[*x].value.shape();
                let (oh, ow) = (s[2] / size, s[3] / size);
                let norm = 1.0 / (size * size) as f64;
                let mut gx = vec![0.0; self.nodes[*x].value.len()];
                for p in 0..s[0] * s[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(p * oh + oy) * ow + ox] * norm;
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    gx[(p * s[2] + oy * size + dy) * s[3] + ox * size + dx] += go;
                                }
                            }
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Sum(x) => send(*x, vec![g[0]; self.nodes[*x].value.len()]),
            Op::CrossEntropy { logits, labels, weights, probs } => {
                let k = self.nodes[*logits].value.shape()[1];
                let n = labels.len();
                let scale = g[0] / n as f64;
                let mut gl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * k + y] -= 1.0;
                    let w = weights.as_ref().map_or(1.0, |w| w[y]) * scale;
                    for v in &mut gl[i * k..(i + 1) * k] {
                        *v *= w;
                    }
                }
                send(*logits, gl);
            }
            Op::Stack(a, b) => {
                let half = g.len() / 2;
                send(*a, g[..half].to_vec());
                send(*b, g[half..].to_vec());
            }
            Op::Select { x, part } => {
                let half = g.len();
                let mut gx = vec![0.0; 2 * half];
                gx[part * half..(part + 1) * half].copy_from_slice(g);
                send(*x, gx);
            }
            Op::Dft { x, axes, inverse } => {
                // The adjoint of the unnormalized forward DFT is the conjugate
                // transform without normalization; the adjoint of the inverse
                // is the forward transform with the same 1/M factors.
                let inner = &self.nodes[*x].value.shape()[1..];
                let mut gx = g.to_vec();
                let (re, im) = gx.split_at_mut(g.len() / 2);
                for &axis in axes.iter().rev() {
                    kernel::adjoint_axis(re, im, inner, axis, *inverse);
                }
                send(*x, gx);
            }
            Op::Magnitude { re, im } => {
                let (vr, vi) = (val(*re), val(*im));
                let r = &node.value.data();
                let mut gr = vec![0.0; g.len()];
                let mut gi = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if r[i] >= PHASE_GUARD {
                        gr[i] = g[i] * vr[i] / r[i];
                        gi[i] = g[i] * vi[i] / r[i];
                    }
                }
                send(*re, gr);
                send(*im, gi);
            }
            Op::Angle { re, im } => {
                let (vr, vi) = (val(*re), val(*im));
                let mut gr = vec![0.0; g.len()];
                let mut gi = vec![0.0; g.len()];
                for i in 0..g.len() {
                    let r = vr[i].hypot(vi[i]);
                    if r >= PHASE_GUARD {
                        let r2 = r * r;
                        gr[i] = -g[i] * vi[i] / r2;
                        gi[i] = g[i] * vr[i] / r2;
                    }
                }
                send(*re, gr);
                send(*im, gi);
            }
            Op::PolarRe { amp, phase } => {
                let (va, vp) = (val(*amp), val(*phase));
                send(*amp, (0..g.len()).map(|i| g[i] * vp[i].cos()).collect());
                send(*phase, (0..g.len()).map(|i| -g[i] * va[i] * vp[i].sin()).collect());
            }
            Op::PolarIm { amp, phase } => {
                let (va, vp) = (val(*amp), val(*phase));
                send(*amp, (0..g.len()).map(|i| g[i] * vp[i].sin()).collect());
                send(*phase, (0..g.len()).map(|i| g[i] * va[i] * vp[i].cos()).collect());
            }
        }
    }
}

fn angle_of(re: f64, im: f64) -> f64 {
    if re.hypot(im) < PHASE_GUARD {
        return 0.0;
    }
    let a = im.atan2(re);
    // atan2(-0.0, x<0) is -π; the range is (−π, π]
    if a <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        a
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let x = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += x * bj;
            }
        }
    }
    c
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Dimension(format!("conv2d: input {xs:?} vs kernel {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Config(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if (h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d: stride {stride} does not tile input {h}×{w} (pad {pad}, kernel {kh}×{kw})"
            )));
        }
        Ok(Self {
            n: xs[0],
            c: xs[1],
            h,
            w,
            f: ws[0],
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Source coordinate for output position `o` and kernel offset `k`, if inside the input.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = o * self.stride + k;
        if p < self.pad || p - self.pad >= extent {
            None
        } else {
            Some(p - self.pad)
        }
    }

    /// Output positions `lo..hi` whose tap at kernel offset `k` lands inside an input of `extent`.
    fn valid(&self, k: usize, extent: usize, out_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = (extent + self.pad).saturating_sub(k).div_ceil(self.stride).min(out_len);
        (lo, hi.max(lo))
    }

    /// Each output sums its taps in `(c, ky, kx)` order, starting from zero.
    fn forward(&self, x: &[f64], wt: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let in_plane = self.h * self.w;
        let rows: Vec<(usize, usize)> = (0..self.kh).map(|ky| self.valid(ky, self.h, self.oh)).collect();
        let cols: Vec<(usize, usize)> = (0..self.kw).map(|kx| self.valid(kx, self.w, self.ow)).collect();
        let mut out = vec![0.0; self.n * self.f * plane];
        for n in 0..self.n {
            for f in 0..self.f {
                let o = &mut out[(n * self.f + f) * plane..][..plane];
                for c in 0..self.c {
                    let xp = &x[(n * self.c + c) * in_plane..][..in_plane];
                    let wk = &wt[(f * self.c + c) * self.kh * self.kw..][..self.kh * self.kw];
                    for (ky, &(y0, y1)) in rows.iter().enumerate() {
                        for (kx, &(x0, x1)) in cols.iter().enumerate() {
                            let wv = wk[ky * self.kw + kx];
                            for oy in y0..y1 {
                                let iy = oy * self.stride + ky - self.pad;
                                let row = &xp[iy * self.w..][..self.w];
                                let orow = &mut o[oy * self.ow..][..self.ow];
                                if self.stride == 1 {
                                    let src = &row[x0 + kx - self.pad..x1 + kx - self.pad];
                                    for (acc, &v) in orow[x0..x1].iter_mut().zip(src) {
                                        *acc += v * wv;
                                    }
                                } else {
                                    for ox in x0..x1 {
                                        orow[ox] += row[ox * self.stride + kx - self.pad] * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn input_grad(&self, g: &[f64], wt: &[f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.n * self.c * self.h * self.w];
        for n in 0..self.n {
            for f in 0..self.f {
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let go = g[((n * self.f + f) * self.oh + oy) * self.ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for c in 0..self.c {
                            for ky in 0..self.kh {
                                let Some(iy) = self.src(oy, ky, self.h) else { continue };
                                for kx in 0..self.kw {
                                    let Some(ix) = self.src(ox, kx, self.w) else { continue };
                                    gx[((n * self.c + c) * self.h + iy) * self.w + ix] +=
                                        go * wt[((f * self.c + c) * self.kh + ky) * self.kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    fn weight_grad(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let mut gw = vec![0.0; self.f * self.c * self.kh * self.kw];
        for n in 0..self.n {
            for f in 0..self.f {
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let go = g[((n * self.f + f) * self.oh + oy) * self.ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for c in 0..self.c {
                            for ky in 0..self.kh {
                                let Some(iy) = self.src(oy, ky, self.h) else { continue };
                                for kx in 0..self.kw {
                                    let Some(ix) = self.src(ox, kx, self.w) else { continue };
                                    gw[((f * self.c + c) * self.kh + ky) * self.kw + kx] +=
                                        go * x[((n * self.c + c) * self.h + iy) * self.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        gw
    }
}
