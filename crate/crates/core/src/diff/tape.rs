use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probability clamp applied inside binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    AddRowBias { x: usize, b: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom, cols: Vec<f64> },
    AddChannelBias { x: usize, b: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    MeanPool { x: usize, k: usize },
    Reshape { x: usize },
    Add { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    MulConst { x: usize, mask: Vec<f64> },
    Sum { x: usize },
    Mean { x: usize },
    CrossEntropyItems { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    BceItems { prob: usize, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::MeanPool { .. } => "mean_pool",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::MulConst { .. } => "mul_const",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::CrossEntropyItems { .. } => "cross_entropy",
            Op::BceItems { .. } => "binary_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of primitive ops recorded during one forward pass.
///
/// Nodes only reference earlier nodes, so reverse insertion order is a
/// reverse topological order. A tape supports exactly one backward pass;
/// afterwards leaf tensors carry their gradients in [`Tensor::grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// σ'(z) evaluated from `z` so it stays nonzero where σ(z) rounds to 0 or 1.
fn sigmoid_slope(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
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

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records an input. Leaves with `requires_grad` receive a gradient on
    /// backward; others are treated as constants.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        let t = &mut self.nodes[v.0].value;
        let g = t.grad().map(<[f64]>::to_vec);
        t.clear_grad();
        g
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> Result<Var> {
        let name = op.name();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::shape("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sx[1];
        let bias = self.data(b);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % n])
            .collect();
        self.push(sx, out, Op::AddRowBias { x: x.0, b: b.0 }, &[x.0, b.0])
    }

    /// Cross-correlation of `x[B×C×H×W]` with `w[F×C×k×k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let (batch, in_c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (out_c, k) = (sw[0], sw[2]);
        let (span_h, span_w) = (h + 2 * pad, wd + 2 * pad);
        if k > span_h || k > span_w {
            return Err(Error::shape("conv2d", format!("kernel {k} exceeds padded input {span_h}x{span_w}")));
        }
        if (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("non-integral output size for {span_h}x{span_w}, kernel {k}, stride {stride}"),
            ));
        }
        let geom = ConvGeom {
            batch,
            in_c,
            h,
            w: wd,
            out_c,
            k,
            stride,
            pad,
            oh: (span_h - k) / stride + 1,
            ow: (span_w - k) / stride + 1,
        };
        let (q, p) = (geom.patch(), geom.out_pixels());
        let img = in_c * h * wd;
        let mut cols = vec![0.0; batch * q * p];
        let mut out = vec![0.0; batch * out_c * p];
        {
            let xd = self.data(x);
            let wdat = self.data(w);
            for b in 0..batch {
                let col = &mut cols[b * q * p..(b + 1) * q * p];
                im2col(&xd[b * img..(b + 1) * img], &geom, col);
                gemm_nn(wdat, col, &mut out[b * out_c * p..(b + 1) * out_c * p], out_c, q, p);
            }
        }
        self.push(
            vec![batch, out_c, geom.oh, geom.ow],
            out,
            Op::Conv2d { x: x.0, w: w.0, geom, cols },
            &[x.0, w.0],
        )
    }

    /// `x[B×C×H×W] + b[C]` broadcast over batch and pixels.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || self.shape(b) != [sx[1]] {
            return Err(Error::shape("add_channel_bias", format!("{sx:?} + {:?}", self.shape(b))));
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let bias = self.data(b);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[(i / hw) % c])
            .collect();
        self.push(sx, out, Op::AddChannelBias { x: x.0, b: b.0 }, &[x.0, b.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(shape, out, Op::Relu { x: x.0 }, &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&z| stable_sigmoid(z)).collect();
        self.push(shape, out, Op::Sigmoid { x: x.0 }, &[x.0])
    }

    /// Non-overlapping `k×k` average pooling; spatial dims must divide by `k`.
    pub fn mean_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || k == 0 || !sx[2].is_multiple_of(k) || !sx[3].is_multiple_of(k) {
            return Err(Error::shape("mean_pool", format!("{sx:?} with window {k}")));
        }
        let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let xd = self.data(x);
        let mut out = vec![0.0; bc * oh * ow];
        for plane in 0..bc {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / k) * ow + xx / k] += src[y * w + xx];
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
        self.push(vec![sx[0], sx[1], oh, ow], out, Op::MeanPool { x: x.0, k }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.data(x).to_vec();
        self.push(shape, out, Op::Reshape { x: x.0 }, &[x.0])
    }

    /// `[B×…] -> [B×rest]`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s[0];
        let rest = self.value(x).numel() / b;
        self.reshape(x, vec![b, rest])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().zip(self.data(b)).map(|(p, q)| p + q).collect();
        self.push(shape, out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|v| v * c).collect();
        self.push(shape, out, Op::Scale { x: x.0, c }, &[x.0])
    }

    /// Elementwise product with a constant (non-differentiated) array.
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {} constants", self.shape(x), mask.len()),
            ));
        }
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push(shape, out, Op::MulConst { x: x.0, mask }, &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![m], Op::Mean { x: x.0 }, &[x.0])
    }

    /// Per-item `−log softmax(logits)[label]` for `logits[B×K]`; output `[B]`.
    pub fn cross_entropy_items(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?}, {} labels", labels.len()),
            ));
        }
        let (b, k) = (s[0], s[1]);
        if k < 2 {
            return Err(Error::shape("cross_entropy", "need at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let z = self.data(logits);
        let mut probs = vec![0.0; b * k];
        let mut out = vec![0.0; b];
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + se.ln();
            out[i] = lse - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let op = Op::CrossEntropyItems {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
        };
        self.push(vec![b], out, op, &[logits.0])
    }

    /// Mean cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let items = self.cross_entropy_items(logits, labels)?;
        self.mean(items)
    }

    /// Per-item `−[t·log p + (1−t)·log(1−p)]` with `p` clamped to
    /// `[BCE_CLAMP, 1 − BCE_CLAMP]`. The clamp bounds the value only; the
    /// derivative is evaluated at the clamped probability and never zeroed.
    pub fn bce_items(&mut self, prob: Var, targets: &[f64]) -> Result<Var> {
        let s = self.shape(prob).to_vec();
        if s.len() != 1 || s[0] != targets.len() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("prob {s:?}, {} targets", targets.len()),
            ));
        }
        let out = self
            .data(prob)
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .collect();
        let op = Op::BceItems {
            prob: prob.0,
            targets: targets.to_vec(),
        };
        self.push(s, out, op, &[prob.0])
    }

    pub fn binary_cross_entropy(&mut self, prob: Var, targets: &[f64]) -> Result<Var> {
        let items = self.bce_items(prob, targets)?;
        self.mean(items)
    }

    /// Reverse pass from a scalar root. Every leaf created with
    /// `requires_grad` gets `d root / d leaf` (zeros when unreachable).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_shape = self.shape(root);
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: node.op.name() });
            }
            vjp(nodes, node, &g, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Runs `f` against the gradient buffer of `idx`, creating it on first use.
/// Inputs that do not require gradients are skipped.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[idx].requires_grad {
        return;
    }
    let buf = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.numel()]);
    f(buf);
}

fn vjp(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            accumulate(nodes, grads, *a, |da| gemm_nt(g, val(*b), da, m, n, k));
            accumulate(nodes, grads, *b, |db| gemm_tn(val(*a), g, db, k, m, n));
        }
        Op::AddRowBias { x, b } => {
            accumulate(nodes, grads, *x, |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            let n = nodes[*b].value.numel();
            accumulate(nodes, grads, *b, |db| {
                for (i, v) in g.iter().enumerate() {
                    db[i % n] += v;
                }
            });
        }
        Op::Conv2d { x, w, geom, cols } => {
            let (q, p) = (geom.patch(), geom.out_pixels());
            let (f, img) = (geom.out_c, geom.in_c * geom.h * geom.w);
            accumulate(nodes, grads, *w, |dw| {
                for b in 0..geom.batch {
                    gemm_nt(&g[b * f * p..(b + 1) * f * p], &cols[b * q * p..(b + 1) * q * p], dw, f, p, q);
                }
            });
            accumulate(nodes, grads, *x, |dx| {
                let mut dcols = vec![0.0; q * p];
                for b in 0..geom.batch {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    gemm_tn(val(*w), &g[b * f * p..(b + 1) * f * p], &mut dcols, q, f, p);
                    col2im(&dcols, geom, &mut dx[b * img..(b + 1) * img]);
                }
            });
        }
        Op::AddChannelBias { x, b } => {
            accumulate(nodes, grads, *x, |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            let s = nodes[*x].value.shape();
            let (c, hw) = (s[1], s[2] * s[3]);
            accumulate(nodes, grads, *b, |db| {
                for (i, v) in g.iter().enumerate() {
                    db[(i / hw) % c] += v;
                }
            });
        }
        Op::Relu { x } => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |dx| {
                for ((d, &v), &gi) in dx.iter_mut().zip(xv).zip(g) {
                    if v > 0.0 {
                        *d += gi;
                    }
                }
            });
        }
        Op::Sigmoid { x } => {
            let zv = val(*x);
            accumulate(nodes, grads, *x, |dx| {
                for ((d, &z), &gi) in dx.iter_mut().zip(zv).zip(g) {
                    *d += gi * sigmoid_slope(z);
                }
            });
        }
        Op::MeanPool { x, k } => {
            let s = nodes[*x].value.shape();
            let (h, w) = (s[2], s[3]);
            let ow = w / k;
            let oh = h / k;
            let norm = 1.0 / (k * k) as f64;
            accumulate(nodes, grads, *x, |dx| {
                for plane in 0..s[0] * s[1] {
                    let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] += src[(y / k) * ow + xx / k] * norm;
                        }
                    }
                }
            });
        }
        Op::Reshape { x } => {
            accumulate(nodes, grads, *x, |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += v));
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            accumulate(nodes, grads, *b, |db| db.iter_mut().zip(g).for_each(|(d, v)| *d += v));
        }
        Op::Scale { x, c } => {
            accumulate(nodes, grads, *x, |dx| dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v));
        }
        Op::MulConst { x, mask } => {
            accumulate(nodes, grads, *x, |dx| {
                for ((d, m), v) in dx.iter_mut().zip(mask).zip(g) {
                    *d += m * v;
                }
            });
        }
        Op::Sum { x } => {
            accumulate(nodes, grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean { x } => {
            let n = nodes[*x].value.numel() as f64;
            accumulate(nodes, grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
        }
        Op::CrossEntropyItems { logits, labels, probs } => {
            let k = nodes[*logits].value.shape()[1];
            accumulate(nodes, grads, *logits, |dz| {
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dz[i * k + j] += g[i] * (probs[i * k + j] - onehot);
                    }
                }
            });
        }
        Op::BceItems { prob, targets } => {
            let pv = val(*prob);
            accumulate(nodes, grads, *prob, |dp| {
                for (i, (&p, &t)) in pv.iter().zip(targets).enumerate() {
                    let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    dp[i] += g[i] * (-t / pc + (1.0 - t) / (1.0 - pc));
                }
            });
        }
    }
}
