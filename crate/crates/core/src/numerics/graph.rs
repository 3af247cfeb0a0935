//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value. Nodes are stored in
//! creation order, which is a topological order, so `backward` is a single
//! reverse sweep over the tape.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bilinear taps for one output location of a crop-resize: four
/// `(flat spatial index, weight)` pairs.
type Taps = [(usize, f64); 4];

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Softmax {
        x: Var,
        temperature: f64,
    },
    LogSoftmax {
        x: Var,
        temperature: f64,
    },
    Sum(Var),
    Mean(Var),
    SquaredNorm(Var),
    SmoothL1(Var),
    L2Normalize(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    CropResize {
        x: Var,
        channels: usize,
        plane: usize,
        taps: Vec<Taps>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph recorded during a forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape().to_vec()))
    }
}

const NORM_EPS: f64 = 1e-12;

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let numel: usize = shape.iter().product();
    (numel / cols.max(1), cols)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        if tb.numel() == 1 {
            let y = tb.item();
            let data = ta.data().iter().map(|&x| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        if ta.numel() == 1 {
            let x = ta.item();
            let data = tb.data().iter().map(|&y| f(x, y)).collect();
            return Tensor::new(tb.shape().to_vec(), data);
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })
    }

    /// Elementwise sum; either side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * k).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, k), &[a])
    }

    /// Sum of any number of tensors of equal shape.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::invalid("add_all", "no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.matmul_value("matmul", a, b, None)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` for `x: [n, k]`, `w: [k, m]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = self.matmul_value("linear", x, w, Some(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    fn matmul_value(&self, op: &'static str, a: Var, b: Var, bias: Option<Var>) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        if let Some(bv) = bias {
            let sbias = self.shape(bv);
            if sbias != [m] {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: vec![m],
                    rhs: sbias.to_vec(),
                });
            }
            let bd = self.value(bv).data();
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bd);
            }
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                    *o += av * bv;
                }
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// 2-D convolution of a `[c, h, w]` image with `[o, c, kh, kw]` weights
    /// and `[o]` bias, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sb != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let geo = ConvGeom::new(sx, sw, stride, pad)?;
        let plane = geo.oh * geo.ow;
        let cols = geo.im2col(self.value(x).data());
        let (wd, bd) = (self.value(w).data(), self.value(b).data());
        let k = geo.c * geo.kh * geo.kw;
        let mut out = vec![0.0; geo.o * plane];
        for (o, orow) in out.chunks_mut(plane).enumerate() {
            orow.iter_mut().for_each(|v| *v = bd[o]);
            for (&wv, crow) in wd[o * k..(o + 1) * k].iter().zip(cols.chunks(plane)) {
                if wv != 0.0 {
                    orow.iter_mut().zip(crow).for_each(|(ov, &cv)| *ov += wv * cv);
                }
            }
        }
        let out = Tensor::new(vec![geo.o, geo.oh, geo.ow], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b]))
    }

    /// Max-pool over `k × k` windows with stride `k` on a `[c, h, w]` tensor.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || k == 0 || s[1] < k || s[2] < k {
            return Err(Error::invalid("max_pool", format!("window {k} on shape {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / k, w / k);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = (ch * h + oy * k + dy) * w + ox * k + dx;
                            if xd[idx] > best.0 {
                                best = (xd[idx], idx);
                            }
                        }
                    }
                    out.push(best.0);
                    argmax.push(best.1);
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    /// Elementwise smooth-L1 (Huber with unit transition point).
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(x, Op::SmoothL1(x), |v| {
            if v.abs() < 1.0 {
                0.5 * v * v
            } else {
                v.abs() - 0.5
            }
        })
    }

    /// Softmax of `x / temperature` along the last dimension.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let out = self.softmax_value("softmax", x, temperature, false)?;
        Ok(self.push(out, Op::Softmax { x, temperature }, &[x]))
    }

    /// Log-softmax of `x / temperature` along the last dimension.
    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let out = self.softmax_value("log_softmax", x, temperature, true)?;
        Ok(self.push(out, Op::LogSoftmax { x, temperature }, &[x]))
    }

    fn softmax_value(&self, op: &'static str, x: Var, temperature: f64, log: bool) -> Result<Tensor> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(op, format!("temperature {temperature} must be positive")));
        }
        let t = self.value(x);
        let (rows, cols) = rows_cols(t.shape());
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row, temperature);
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                let l = v / temperature - lse;
                *o = if log { l } else { l.exp() };
            }
        }
        Tensor::new(t.shape().to_vec(), out)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sum of squared entries.
    pub fn squared_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SquaredNorm(x), &[x])
    }

    /// Rescales each row (last dimension) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = rows_cols(t.shape());
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let out = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(out, Op::L2Normalize(x), &[x])
    }

    /// Picks flat elements of `x`: `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of range for shape {:?}", t.shape()),
            ));
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape, data).map_err(|_| {
            Error::invalid("gather", format!("{} indices do not fill the requested shape", index.len()))
        })?;
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    /// Selects rows of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("select_rows", format!("expected 2-D, got {s:?}")));
        }
        let cols = s[1];
        let index = rows
            .iter()
            .flat_map(|&r| (r * cols..(r + 1) * cols).collect::<Vec<_>>())
            .collect();
        self.gather(x, index, vec![rows.len(), cols])
    }

    /// Concatenates 2-D tensors along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let cols = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let out = self.value(x).reshape(shape.clone()).map_err(|_| Error::ShapeMismatch {
            op: "reshape",
            lhs: self.shape(x).to_vec(),
            rhs: shape,
        })?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Bilinear crop-and-resize of a `[c, h, w]` feature map.
    ///
    /// Each region is `(x1, y1, x2, y2)` in feature-map cell units (cell `j`
    /// spans `[j, j + 1)`); it is sampled on a `size × size` grid of bin
    /// centres. Output is `[regions, c * size * size]`, channel-major per row.
    /// Regions are constants: no gradient flows into the coordinates.
    pub fn crop_resize(&mut self, x: Var, regions: &[[f64; 4]], size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || size == 0 {
            return Err(Error::invalid("crop_resize", format!("input shape {s:?}, size {size}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut taps = Vec::with_capacity(regions.len() * size * size);
        for r in regions {
            if !(r[2] > r[0] && r[3] > r[1]) {
                return Err(Error::invalid("crop_resize", format!("degenerate region {r:?}")));
            }
            let (bw, bh) = ((r[2] - r[0]) / size as f64, (r[3] - r[1]) / size as f64);
            for sy in 0..size {
                let py = r[1] + (sy as f64 + 0.5) * bh - 0.5;
                for sx in 0..size {
                    let px = r[0] + (sx as f64 + 0.5) * bw - 0.5;
                    taps.push(bilinear_taps(px, py, h, w));
                }
            }
        }
        let xd = self.value(x).data();
        let plane = h * w;
        let per = size * size;
        let mut out = vec![0.0; regions.len() * c * per];
        for (ri, region_taps) in taps.chunks(per).enumerate() {
            for ch in 0..c {
                let src = &xd[ch * plane..(ch + 1) * plane];
                let dst = &mut out[(ri * c + ch) * per..(ri * c + ch + 1) * per];
                for (o, t) in dst.iter_mut().zip(region_taps) {
                    *o = t.iter().map(|&(i, wt)| wt * src[i]).sum();
                }
            }
        }
        let out = Tensor::new(vec![regions.len(), c * per], out)?;
        Ok(self.push(
            out,
            Op::CropResize {
                x,
                channels: c,
                plane,
                taps,
            },
            &[x],
        ))
    }

    /// Gradients of scalar `loss` with respect to all leaves requiring them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(*a, g, 1.0, grads);
                self.acc_broadcast(*b, g, 1.0, grads);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(*a, g, 1.0, grads);
                self.acc_broadcast(*b, g, -1.0, grads);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = (0..g.len()).map(|k| g[k] * bval(tb, k)).collect();
                let gb: Vec<f64> = (0..g.len()).map(|k| g[k] * bval(ta, k)).collect();
                self.acc_broadcast(*a, &ga, 1.0, grads);
                self.acc_broadcast(*b, &gb, 1.0, grads);
            }
            Op::Scale(a, k) => self.acc(*a, grads, |ga| {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += k * s)
            }),
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, None, g, grads),
            Op::Linear { x, w, b } => self.matmul_backward(*x, *w, Some(*b), g, grads),
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv_backward(*x, *w, *b, *stride, *pad, g, grads)
            }
            Op::MaxPool { x, argmax } => self.acc(*x, grads, |gx| {
                for (&src, &d) in argmax.iter().zip(g) {
                    gx[src] += d;
                }
            }),
            Op::Relu(x) => self.acc(*x, grads, |gx| {
                for k in 0..g.len() {
                    if out[k] > 0.0 {
                        gx[k] += g[k];
                    }
                }
            }),
            Op::Sigmoid(x) => self.acc(*x, grads, |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                self.acc(*x, grads, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] / xv[k];
                    }
                })
            }
            Op::SmoothL1(x) => {
                let xv = self.value(*x).data();
                self.acc(*x, grads, |gx| {
                    for k in 0..g.len() {
                        let v = xv[k];
                        gx[k] += g[k] * if v.abs() < 1.0 { v } else { v.signum() };
                    }
                })
            }
            Op::Softmax { x, temperature } => {
                let (rows, cols) = rows_cols(node.value.shape());
                self.acc(*x, grads, |gx| {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = g[span.clone()].iter().zip(&out[span.clone()]).map(|(a, b)| a * b).sum();
                        for k in span {
                            gx[k] += out[k] * (g[k] - dot) / temperature;
                        }
                    }
                })
            }
            Op::LogSoftmax { x, temperature } => {
                let (rows, cols) = rows_cols(node.value.shape());
                self.acc(*x, grads, |gx| {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let total: f64 = g[span.clone()].iter().sum();
                        for k in span {
                            gx[k] += (g[k] - out[k].exp() * total) / temperature;
                        }
                    }
                })
            }
            Op::Sum(x) => self.acc(*x, grads, |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                self.acc(*x, grads, |gx| gx.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::SquaredNorm(x) => {
                let xv = self.value(*x).data();
                self.acc(*x, grads, |gx| {
                    gx.iter_mut().zip(xv).for_each(|(d, &v)| *d += 2.0 * v * g[0])
                })
            }
            Op::L2Normalize(x) => {
                let xv = self.value(*x).data();
                let (rows, cols) = rows_cols(node.value.shape());
                self.acc(*x, grads, |gx| {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let n = xv[span.clone()].iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                        let dot: f64 = g[span.clone()].iter().zip(&out[span.clone()]).map(|(a, b)| a * b).sum();
                        for k in span {
                            gx[k] += (g[k] - out[k] * dot) / n;
                        }
                    }
                })
            }
            Op::Gather { x, index } => self.acc(*x, grads, |gx| {
                for (&src, &d) in index.iter().zip(g) {
                    gx[src] += d;
                }
            }),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let slice = &g[offset..offset + n];
                    self.acc(p, grads, |gp| {
                        gp.iter_mut().zip(slice).for_each(|(d, &s)| *d += s)
                    });
                    offset += n;
                }
            }
            Op::CropResize {
                x,
                channels,
                plane,
                taps,
            } => {
                let per = taps.len() / node.value.shape()[0].max(1);
                self.acc(*x, grads, |gx| {
                    for (ri, region_taps) in taps.chunks(per.max(1)).enumerate() {
                        for ch in 0..*channels {
                            let dst = &mut gx[ch * plane..(ch + 1) * plane];
                            let src = &g[(ri * channels + ch) * per..(ri * channels + ch + 1) * per];
                            for (t, &d) in region_taps.iter().zip(src) {
                                for &(idx, wt) in t {
                                    dst[idx] += wt * d;
                                }
                            }
                        }
                    }
                })
            }
            Op::Reshape(x) => self.acc(*x, grads, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s)
            }),
        }
    }

    fn acc(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn acc_broadcast(&self, v: Var, g: &[f64], sign: f64, grads: &mut [Option<Vec<f64>>]) {
        let n = self.value(v).numel();
        self.acc(v, grads, |gv| {
            if n == g.len() {
                gv.iter_mut().zip(g).for_each(|(d, &s)| *d += sign * s);
            } else {
                gv[0] += sign * g.iter().sum::<f64>();
            }
        });
    }

    fn matmul_backward(&self, a: Var, b: Var, bias: Option<Var>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        self.acc(a, grads, |ga| {
            for i in 0..n {
                let grow = &g[i * m..(i + 1) * m];
                for p in 0..k {
                    let brow = &bd[p * m..(p + 1) * m];
                    ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        });
        self.acc(b, grads, |gb| {
            for i in 0..n {
                let grow = &g[i * m..(i + 1) * m];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for (d, &s) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                        *d += av * s;
                    }
                }
            }
        });
        if let Some(bv) = bias {
            self.acc(bv, grads, |gbias| {
                for row in g.chunks(m) {
                    gbias.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let geo = ConvGeom::new(self.shape(x), self.shape(w), stride, pad).expect("checked in forward");
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let oplane = geo.oh * geo.ow;
        self.acc(b, grads, |gb| {
            for o in 0..geo.o {
                gb[o] += g[o * oplane..(o + 1) * oplane].iter().sum::<f64>();
            }
        });
        let x_needs = self.nodes[x.0].requires_grad;
        let w_needs = self.nodes[w.0].requires_grad;
        let k = geo.c * geo.kh * geo.kw;
        let mut gw = Vec::new();
        if w_needs {
            let cols = geo.im2col(xd);
            gw = vec![0.0; wd.len()];
            for (o, grow) in g.chunks(oplane).enumerate() {
                for (gv, crow) in gw[o * k..(o + 1) * k].iter_mut().zip(cols.chunks(oplane)) {
                    *gv += dot(grow, crow);
                }
            }
        }
        let mut gx = Vec::new();
        if x_needs {
            let mut gcols = vec![0.0; k * oplane];
            for (o, grow) in g.chunks(oplane).enumerate() {
                for (&wv, crow) in wd[o * k..(o + 1) * k].iter().zip(gcols.chunks_mut(oplane)) {
                    if wv != 0.0 {
                        crow.iter_mut().zip(grow).for_each(|(c, &gv)| *c += wv * gv);
                    }
                }
            }
            gx = geo.col2im(&gcols);
        }
        if x_needs {
            self.acc(x, grads, |d| d.iter_mut().zip(&gx).for_each(|(a, b)| *a += b));
        }
        if w_needs {
            self.acc(w, grads, |d| d.iter_mut().zip(&gw).for_each(|(a, b)| *a += b));
        }
    }
}

fn bval(t: &Tensor, k: usize) -> f64 {
    if t.numel() == 1 {
        t.item()
    } else {
        t.data()[k]
    }
}

/// Dot product with four running sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Numerically stable `ln Σ exp(v / temperature)`.
pub fn log_sum_exp(row: &[f64], temperature: f64) -> f64 {
    let m = row
        .iter()
        .map(|v| v / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v / temperature - m).exp()).sum::<f64>().ln()
}

fn bilinear_taps(px: f64, py: f64, h: usize, w: usize) -> Taps {
    let px = px.clamp(0.0, (w - 1) as f64);
    let py = py.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Unfolds a `[c, h, w]` image into `[c·kh·kw, oh·ow]` patch columns.
    fn im2col(&self, xd: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let mut cols = vec![0.0; self.c * self.kh * self.kw * plane];
        self.for_each_tap(|row, oy, x_lo, x_hi, src| {
            let crow = &mut cols[row * plane + oy * self.ow..row * plane + (oy + 1) * self.ow];
            for (i, ox) in (x_lo..x_hi).enumerate() {
                crow[ox] = xd[src + i * self.stride];
            }
        });
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: sums patch columns back into image
    /// positions.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let mut x = vec![0.0; self.c * self.h * self.w];
        self.for_each_tap(|row, oy, x_lo, x_hi, src| {
            let crow = &cols[row * plane + oy * self.ow..row * plane + (oy + 1) * self.ow];
            for (i, ox) in (x_lo..x_hi).enumerate() {
                x[src + i * self.stride] += crow[ox];
            }
        });
        x
    }

    /// Calls `f(row, oy, x_lo, x_hi, src)` for every in-bounds output row of
    /// every kernel tap, where `src` is the input index read by output
    /// column `x_lo`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        for c in 0..self.c {
            for ky in 0..self.kh {
                let (y_lo, y_hi) = self.valid_range(ky, self.h, self.oh);
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let (x_lo, x_hi) = self.valid_range(kx, self.w, self.ow);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in y_lo..y_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = (c * self.h + iy) * self.w + x_lo * self.stride + kx - self.pad;
                        f(row, oy, x_lo, x_hi, src);
                    }
                }
            }
        }
    }

    /// Output positions `[lo, hi)` whose kernel tap `k` lands inside an
    /// input axis of length `len`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        let hi = if len + self.pad > k {
            ((len - 1 + self.pad - k) / s + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}
