use super::kernels::{self, ConvGeometry};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Conv2d { input: Var, kernel: Var, geo: ConvGeometry },
    WeightedSum { tensors: Vec<Var>, coeffs: Var },
    Resize { v: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Relu { a: Var },
    AddBias { x: Var, bias: Var, inner: usize },
    Reshape { a: Var },
    Gather { src: Var, start: usize },
    Concat { parts: Vec<Var> },
    Softmax { a: Var, cols: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mean { a: Var },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. A tape is built fresh for every optimization step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `param`'s gradient slot.
    pub fn accumulate_into(&self, v: Var, param: &mut Tensor) {
        match self.get(v) {
            Some(g) => param.accumulate_grad(g),
            None => param.accumulate_grad(&vec![0.0; param.len()]),
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Records a trainable input whose gradient backward will produce.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Matmul { a, b, m, k, n },
            tracked,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-D, got {s:?}")));
        }
        let out = kernels::transpose(self.data(a), s[0], s[1]);
        let tracked = self.tracked(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![s[1], s[0]], out),
            Op::Transpose {
                a,
                rows: s[0],
                cols: s[1],
            },
            tracked,
        ))
    }

    /// Direct cross-correlation of `[N,C,H,W]` input with `[F,C,kh,kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let geo = ConvGeometry {
            batch: si[0],
            in_channels: si[1],
            height: si[2],
            width: si[3],
            filters: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            padding,
        };
        let oh = ConvGeometry::out_extent(geo.height, geo.kh, stride, padding);
        let ow = ConvGeometry::out_extent(geo.width, geo.kw, stride, padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {si:?} with kernel {sk:?}, stride {stride}, padding {padding} \
                     has no integral output extent"
                ),
            ));
        };
        let out = kernels::conv2d(self.data(input), self.data(kernel), &geo);
        let tracked = self.tracked(&[input, kernel]);
        Ok(self.push(
            Tensor::from_parts(vec![geo.batch, geo.filters, oh, ow], out),
            Op::Conv2d { input, kernel, geo },
            tracked,
        ))
    }

    /// Elementwise `Σ_k coeffs[k] · tensors[k]`, accumulated in index order.
    pub fn weighted_sum(&mut self, tensors: &[Var], coeffs: Var) -> Result<Var> {
        let Some(&first) = tensors.first() else {
            return Err(Error::arg("weighted_sum", "empty tensor list"));
        };
        let shape = self.shape(first).to_vec();
        if let Some(bad) = tensors.iter().find(|t| self.shape(**t) != shape.as_slice()) {
            return Err(Error::Dimension {
                op: "weighted_sum",
                lhs: shape,
                rhs: self.shape(*bad).to_vec(),
            });
        }
        if self.value(coeffs).len() != tensors.len() {
            return Err(Error::arg(
                "weighted_sum",
                format!(
                    "{} coefficients for {} tensors",
                    self.value(coeffs).len(),
                    tensors.len()
                ),
            ));
        }
        let c = self.data(coeffs);
        let mut out: Vec<f64> = self.data(first).iter().map(|x| c[0] * x).collect();
        for (k, t) in tensors.iter().enumerate().skip(1) {
            for (o, x) in out.iter_mut().zip(self.data(*t)) {
                *o += c[k] * x;
            }
        }
        let mut deps = tensors.to_vec();
        deps.push(coeffs);
        let tracked = self.tracked(&deps);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::WeightedSum {
                tensors: tensors.to_vec(),
                coeffs,
            },
            tracked,
        ))
    }

    /// Align-corners linear resize of a flattened tensor to `m` samples.
    pub fn linear_resize_1d(&mut self, v: Var, m: usize) -> Result<Var> {
        if m == 0 {
            return Err(Error::arg("linear_resize_1d", "target length must be >= 1"));
        }
        let out = kernels::resize_linear(self.data(v), m);
        let tracked = self.tracked(&[v]);
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::Resize { v }, tracked))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, tracked))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Scale { a, factor }, tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = kernels::relu(self.data(a));
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Relu { a }, tracked)
    }

    /// Broadcasts `bias[C]` along axis 1 of `x[N, C, …]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let inner = numel(&sx[2..]);
        let out = kernels::add_bias(self.data(x), self.data(bias), inner);
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(Tensor::from_parts(sx, out), Op::AddBias { x, bias, inner }, tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::Reshape { a }, tracked))
    }

    /// `len` consecutive elements of flattened `src` starting at `start`,
    /// with indices taken modulo the source length.
    pub fn gather_modular(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        if len == 0 {
            return Err(Error::arg("gather_modular", "length must be >= 1"));
        }
        let data = self.data(src);
        let n = data.len();
        let out = (0..len).map(|t| data[(start + t) % n]).collect();
        let tracked = self.tracked(&[src]);
        Ok(self.push(
            Tensor::from_parts(vec![len], out),
            Op::Gather { src, start },
            tracked,
        ))
    }

    /// Concatenation of flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat", "empty input list"));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.data(*p));
        }
        let tracked = self.tracked(parts);
        Ok(self.push(
            Tensor::from_parts(vec![out.len()], out),
            Op::Concat {
                parts: parts.to_vec(),
            },
            tracked,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("nonempty shape");
        let out = kernels::softmax_rows(self.data(a), cols);
        let tracked = self.tracked(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax { a, cols }, tracked)
    }

    /// Mean softmax cross-entropy of `logits[N×C]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let cols = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::arg(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {cols} classes"),
            ));
        }
        let data = self.data(logits);
        let probs = kernels::softmax_rows(data, cols);
        let mut total = 0.0;
        for (row, &label) in data.chunks(cols).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[label];
        }
        let loss = total / labels.len() as f64;
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let v = d.iter().sum::<f64>() / d.len() as f64;
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(v), Op::Mean { a }, tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.data(a).iter().sum::<f64>();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(v), Op::Sum { a }, tracked)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            &Op::Matmul { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    kernels::matmul_grad_lhs(g, self.data(b), ga, m, k, n);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::matmul_grad_rhs(self.data(a), g, gb, m, k, n);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if let Some(ga) = self.slot(grads, a) {
                    let back = kernels::transpose(g, cols, rows);
                    ga.iter_mut().zip(back).for_each(|(x, y)| *x += y);
                }
            }
            Op::Conv2d { input, kernel, geo } => {
                // Conv needs two mutable slots at once; compute into scratch.
                let mut gi = self.nodes[input.0]
                    .tracked
                    .then(|| vec![0.0; self.value(*input).len()]);
                let mut gk = self.nodes[kernel.0]
                    .tracked
                    .then(|| vec![0.0; self.value(*kernel).len()]);
                kernels::conv2d_backward(
                    self.data(*input),
                    self.data(*kernel),
                    g,
                    geo,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if let (Some(slot), Some(gi)) = (self.slot(grads, *input), gi) {
                    slot.iter_mut().zip(gi).for_each(|(x, y)| *x += y);
                }
                if let (Some(slot), Some(gk)) = (self.slot(grads, *kernel), gk) {
                    slot.iter_mut().zip(gk).for_each(|(x, y)| *x += y);
                }
            }
            Op::WeightedSum { tensors, coeffs } => {
                let c = self.data(*coeffs).to_vec();
                if self.nodes[coeffs.0].tracked {
                    let dots: Vec<f64> = tensors
                        .iter()
                        .map(|t| self.data(*t).iter().zip(g).map(|(x, y)| x * y).sum())
                        .collect();
                    let gc = self.slot(grads, *coeffs).expect("tracked");
                    gc.iter_mut().zip(dots).for_each(|(x, y)| *x += y);
                }
                for (k, t) in tensors.iter().enumerate() {
                    if let Some(gt) = self.slot(grads, *t) {
                        gt.iter_mut().zip(g).for_each(|(x, y)| *x += c[k] * y);
                    }
                }
            }
            &Op::Resize { v } => {
                let n = self.value(v).len();
                if let Some(gv) = self.slot(grads, v) {
                    kernels::resize_linear_backward(g, n, gv);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (da, db) = (self.data(a).to_vec(), self.data(b).to_vec());
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, y), bv) in ga.iter_mut().zip(g).zip(&db) {
                        *x += y * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((x, y), av) in gb.iter_mut().zip(g).zip(&da) {
                        *x += y * av;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y);
                }
            }
            &Op::Relu { a } => {
                let da = self.data(a).to_vec();
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(&da) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            &Op::AddBias { x, bias, inner } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let c = self.value(bias).len();
                if let Some(gb) = self.slot(grads, bias) {
                    for (idx, y) in g.iter().enumerate() {
                        gb[(idx / inner) % c] += y;
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            &Op::Gather { src, start } => {
                let n = self.value(src).len();
                if let Some(gs) = self.slot(grads, src) {
                    for (t, y) in g.iter().enumerate() {
                        gs[(start + t) % n] += y;
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.slot(grads, *p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += len;
                }
            }
            &Op::Softmax { a, cols } => {
                // y = softmax(x): dx = y ⊙ (g − Σ g⊙y) row-wise.
                let out = kernels::softmax_rows(self.data(a), cols);
                if let Some(ga) = self.slot(grads, a) {
                    for ((grow, yrow), garow) in
                        g.chunks(cols).zip(out.chunks(cols)).zip(ga.chunks_mut(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((x, gy), y) in garow.iter_mut().zip(grow).zip(yrow) {
                            *x += y * (gy - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let cols = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..cols {
                            let p = probs[r * cols + c];
                            let target = if c == label { 1.0 } else { 0.0 };
                            gl[r * cols + c] += scale * (p - target);
                        }
                    }
                }
            }
            &Op::Mean { a } => {
                let n = self.value(a).len() as f64;
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
    }
}
