use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddBias { x: Var, bias: Var, axis: usize },
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize, groups: usize },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    PadReplicate(Var, usize),
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    Softmax(Var),
    Silu(Var),
    Relu(Var),
    Sigmoid(Var),
    GroupNorm { x: Var, rstd: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    Mse(Var, Var),
    Sum(Var),
    FrobeniusNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Single-owner record of primitive operations.
///
/// Every node stores its forward value. Nodes whose inputs do not require
/// gradients are stored as constants, so inference-only graphs carry no
/// backward bookkeeping.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` did not
    /// influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn conv_geom(xs: &[usize], ws: &[usize], stride: usize, pad: usize, groups: usize) -> ConvGeom {
    ConvGeom {
        channels: xs[1] / groups,
        height: xs[2],
        width: xs[3],
        kh: ws[2],
        kw: ws[3],
        stride,
        pad,
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

    /// Registers a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    /// Registers a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, rg, if rg { op } else { Op::Leaf }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).check_same(self.value(b), op)
    }

    fn image_dims(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::shape(op, format!("expected [N, C, H, W], got {s:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        self.push("add", v, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        self.push("sub", v, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push("scale", v, &[a], Op::Scale(a, c))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let v = Tensor::new(&[m, n], out)?;
        self.push("matmul", v, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = match *self.shape(a) {
            [m, n] => (m, n),
            ref s => return Err(Error::shape("transpose", format!("expected rank 2, got {s:?}"))),
        };
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let v = Tensor::new(&[n, m], out)?;
        self.push("transpose", v, &[a], Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, &[a], Op::Reshape(a))
    }

    /// Adds `bias` (a vector of length `shape[axis]`) along `axis`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || self.shape(bias) != [s[axis]] {
            return Err(Error::shape(
                "add_bias",
                format!("x {s:?}, bias {:?}, axis {axis}", self.shape(bias)),
            ));
        }
        let inner: usize = s[axis + 1..].iter().product();
        let dim = s[axis];
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % dim];
        }
        self.push("add_bias", out, &[x, bias], Op::AddBias { x, bias, axis })
    }

    /// 2-D cross-correlation with zero padding `pad` on every side.
    ///
    /// `x: [N, C, H, W]`, `w: [O, C / groups, kh, kw]`, `bias: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let [n, c, h, wd] = self.image_dims(x, "conv2d")?;
        let ws = self.shape(w).to_vec();
        let ok = ws.len() == 4
            && groups > 0
            && stride > 0
            && c % groups == 0
            && ws[0].is_multiple_of(groups)
            && ws[1] == c / groups
            && h + 2 * pad >= ws[2]
            && wd + 2 * pad >= ws[3]
            && bias.is_none_or(|b| self.shape(b) == [ws[0]]);
        if !ok {
            return Err(Error::shape(
                "conv2d",
                format!("x {:?}, w {ws:?}, groups {groups}", self.shape(x)),
            ));
        }
        let g = conv_geom(self.shape(x), &ws, stride, pad, groups);
        let (o, og) = (ws[0], ws[0] / groups);
        let (oh, ow) = (g.out_h(), g.out_w());
        let krows = g.col_rows();
        let mut cols = vec![0.0; krows * oh * ow];
        let mut out = vec![0.0; n * o * oh * ow];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for ni in 0..n {
            for gi in 0..groups {
                let xs = &xv[(ni * c + gi * g.channels) * h * wd..];
                kernels::im2col(xs, &g, &mut cols);
                let dst = &mut out[(ni * o + gi * og) * oh * ow..(ni * o + (gi + 1) * og) * oh * ow];
                let wg = &wv[gi * og * krows..(gi + 1) * og * krows];
                kernels::gemm(og, krows, oh * ow, wg, false, &cols, false, 0.0, dst);
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (i, v) in out.iter_mut().enumerate() {
                *v += bv[(i / (oh * ow)) % o];
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let v = Tensor::new(&[n, o, oh, ow], out)?;
        self.push("conv2d", v, &inputs, Op::Conv2d { x, w, bias, stride, pad, groups })
    }

    /// Non-overlapping `k × k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.image_dims(x, "avg_pool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape("avg_pool", format!("{h}x{w} not divisible by {k}")));
        }
        let mut out = vec![0.0; n * c * (h / k) * (w / k)];
        kernels::avg_pool(self.value(x).data(), n * c, h, w, k, &mut out);
        let v = Tensor::new(&[n, c, h / k, w / k], out)?;
        self.push("avg_pool", v, &[x], Op::AvgPool(x, k))
    }

    pub fn upsample_nearest(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.image_dims(x, "upsample_nearest")?;
        if k == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let mut out = vec![0.0; n * c * h * w * k * k];
        kernels::upsample_nearest(self.value(x).data(), n * c, h, w, k, &mut out);
        let v = Tensor::new(&[n, c, h * k, w * k], out)?;
        self.push("upsample_nearest", v, &[x], Op::Upsample(x, k))
    }

    /// Pads every plane by `p` pixels, repeating the border values.
    pub fn pad_replicate(&mut self, x: Var, p: usize) -> Result<Var> {
        let [n, c, h, w] = self.image_dims(x, "pad_replicate")?;
        let mut out = vec![0.0; n * c * (h + 2 * p) * (w + 2 * p)];
        kernels::pad_replicate(self.value(x).data(), n * c, h, w, p, &mut out);
        let v = Tensor::new(&[n, c, h + 2 * p, w + 2 * p], out)?;
        self.push("pad_replicate", v, &[x], Op::PadReplicate(x, p))
    }

    pub fn space_to_depth(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, c, h, w] = self.image_dims(x, "space_to_depth")?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::shape("space_to_depth", format!("{h}x{w} by {r}")));
        }
        let plane = c * h * w;
        let mut out = vec![0.0; n * plane];
        let xv = self.value(x).data();
        for ni in 0..n {
            kernels::space_to_depth(&xv[ni * plane..], c, h, w, r, &mut out[ni * plane..(ni + 1) * plane]);
        }
        let v = Tensor::new(&[n, c * r * r, h / r, w / r], out)?;
        self.push("space_to_depth", v, &[x], Op::SpaceToDepth(x, r))
    }

    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, c, h, w] = self.image_dims(x, "depth_to_space")?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::shape("depth_to_space", format!("{c} channels by {r}")));
        }
        let plane = c * h * w;
        let mut out = vec![0.0; n * plane];
        let xv = self.value(x).data();
        for ni in 0..n {
            kernels::depth_to_space(&xv[ni * plane..], c / (r * r), h, w, r, &mut out[ni * plane..(ni + 1) * plane]);
        }
        let v = Tensor::new(&[n, c / (r * r), h * r, w * r], out)?;
        self.push("depth_to_space", v, &[x], Op::DepthToSpace(x, r))
    }

    /// Softmax over the last dimension, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let last = *s.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = vec![0.0; self.value(x).len()];
        kernels::softmax_rows(self.value(x).data(), last, &mut out);
        let v = Tensor::new(&s, out)?;
        self.push("softmax", v, &[x], Op::Softmax(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a * kernels::sigmoid(a));
        self.push("silu", v, &[x], Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push("relu", v, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(kernels::sigmoid);
        self.push("sigmoid", v, &[x], Op::Sigmoid(x))
    }

    /// Normalizes each of `groups` channel groups (per leading index) to zero
    /// mean and unit variance. No affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || groups == 0 || !s[1].is_multiple_of(groups) {
            return Err(Error::shape("group_norm", format!("{s:?} into {groups} groups")));
        }
        let group_len = s[1..].iter().product::<usize>() / groups;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        let mut rstds = Vec::with_capacity(xv.len() / group_len);
        for (xg, yg) in xv.chunks_exact(group_len).zip(out.chunks_exact_mut(group_len)) {
            let mean = xg.iter().sum::<f64>() / group_len as f64;
            let var = xg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (y, &v) in yg.iter_mut().zip(xg) {
                *y = (v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let v = Tensor::new(&s, out)?;
        self.push("group_norm", v, &[x], Op::GroupNorm { x, rstd: rstds })
    }

    /// Rows `indices` of a `[V, D]` table, stacked into `[len, D]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, d) = match *self.shape(table) {
            [r, d] => (r, d),
            ref s => return Err(Error::shape("gather_rows", format!("table {s:?}"))),
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("row {bad} out of range for table of {rows}")));
        }
        let t = self.value(table).data();
        let out: Vec<f64> = indices.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        let v = Tensor::new(&[indices.len(), d], out)?;
        self.push("gather_rows", v, &[table], Op::GatherRows(table, indices.to_vec()))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = Tensor::scalar(total / av.len() as f64);
        self.push("mse", v, &[a, b], Op::Mse(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, &[x], Op::Sum(x))
    }

    /// Euclidean (Frobenius) norm, a scalar. The gradient at zero is taken
    /// to be zero.
    pub fn frobenius_norm(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).norm());
        self.push("frobenius_norm", v, &[x], Op::FrobeniusNorm(x))
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, || g.zip_map(bv, |x, y| x * y).expect("shape"));
                self.accumulate(grads, *b, || g.zip_map(av, |x, y| x * y).expect("shape"));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, || g.scale(*c)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, || {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, false, bv, true, 0.0, &mut da);
                    Tensor::new(&[m, k], da).expect("shape")
                });
                self.accumulate(grads, *b, || {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, av, true, gd, false, 0.0, &mut db);
                    Tensor::new(&[k, n], db).expect("shape")
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                self.accumulate(grads, *a, || {
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            out[j * m + i] = gd[i * n + j];
                        }
                    }
                    Tensor::new(&[n, m], out).expect("shape")
                });
            }
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, || g.clone().reshape(&s).expect("shape"));
            }
            Op::AddBias { x, bias, axis } => {
                self.accumulate(grads, *x, || g.clone());
                let s = g.shape();
                let inner: usize = s[axis + 1..].iter().product();
                let dim = s[*axis];
                self.accumulate(grads, *bias, || {
                    let mut db = vec![0.0; dim];
                    for (i, v) in gd.iter().enumerate() {
                        db[(i / inner) % dim] += v;
                    }
                    Tensor::new(&[dim], db).expect("shape")
                });
            }
            Op::Conv2d { x, w, bias, stride, pad, groups } => {
                self.conv2d_backward(*x, *w, *bias, *stride, *pad, *groups, g, grads);
            }
            Op::AvgPool(x, k) => {
                let s = self.shape(*x).to_vec();
                let kk = (k * k) as f64;
                self.accumulate(grads, *x, || {
                    let mut dx = vec![0.0; s.iter().product()];
                    kernels::upsample_nearest(gd, s[0] * s[1], s[2] / k, s[3] / k, *k, &mut dx);
                    dx.iter_mut().for_each(|v| *v /= kk);
                    Tensor::new(&s, dx).expect("shape")
                });
            }
            Op::Upsample(x, k) => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, || {
                    let mut dx = vec![0.0; s.iter().product()];
                    kernels::block_sum(gd, s[0] * s[1], s[2], s[3], *k, &mut dx);
                    Tensor::new(&s, dx).expect("shape")
                });
            }
            Op::PadReplicate(x, p) => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, || {
                    let mut dx = vec![0.0; s.iter().product()];
                    kernels::pad_replicate_backward(gd, s[0] * s[1], s[2], s[3], *p, &mut dx);
                    Tensor::new(&s, dx).expect("shape")
                });
            }
            Op::SpaceToDepth(x, r) => {
                let s = self.shape(*x).to_vec();
                let gs = g.shape();
                let plane: usize = s[1..].iter().product();
                self.accumulate(grads, *x, || {
                    let mut dx = vec![0.0; s.iter().product()];
                    for ni in 0..s[0] {
                        kernels::depth_to_space(&gd[ni * plane..], s[1], gs[2], gs[3], *r, &mut dx[ni * plane..(ni + 1) * plane]);
                    }
                    Tensor::new(&s, dx).expect("shape")
                });
            }
            Op::DepthToSpace(x, r) => {
                let s = self.shape(*x).to_vec();
                let gs = g.shape();
                let plane: usize = s[1..].iter().product();
                self.accumulate(grads, *x, || {
                    let mut dx = vec![0.0; s.iter().product()];
                    for ni in 0..s[0] {
                        kernels::space_to_depth(&gd[ni * plane..], gs[1], gs[2], gs[3], *r, &mut dx[ni * plane..(ni + 1) * plane]);
                    }
                    Tensor::new(&s, dx).expect("shape")
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let last = *node.value.shape().last().expect("rank");
                self.accumulate(grads, *x, || {
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks_exact(last).zip(gd.chunks_exact(last)).zip(dx.chunks_exact_mut(last)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    Tensor::new(node.value.shape(), dx).expect("shape")
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, || {
                    g.zip_map(xv, |gv, a| {
                        let s = kernels::sigmoid(a);
                        gv * (s + a * s * (1.0 - s))
                    })
                    .expect("shape")
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, || g.zip_map(xv, |gv, a| if a > 0.0 { gv } else { 0.0 }).expect("shape"));
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, || g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)).expect("shape"));
            }
            Op::GroupNorm { x, rstd, .. } => {
                let y = node.value.data();
                let group_len = y.len() / rstd.len();
                self.accumulate(grads, *x, || {
                    let mut dx = vec![0.0; y.len()];
                    for (gi, &r) in rstd.iter().enumerate() {
                        let range = gi * group_len..(gi + 1) * group_len;
                        let (yg, gg) = (&y[range.clone()], &gd[range.clone()]);
                        let n = group_len as f64;
                        let mean_g = gg.iter().sum::<f64>() / n;
                        let mean_gy = gg.iter().zip(yg).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((d, &gv), &yv) in dx[range].iter_mut().zip(gg).zip(yg) {
                            *d = r * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    Tensor::new(node.value.shape(), dx).expect("shape")
                });
            }
            Op::GatherRows(table, idx) => {
                let s = self.shape(*table).to_vec();
                let d = s[1];
                self.accumulate(grads, *table, || {
                    let mut dt = vec![0.0; s[0] * d];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += gd[r * d + j];
                        }
                    }
                    Tensor::new(&s, dt).expect("shape")
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = 2.0 * gd[0] / av.len() as f64;
                let diff = av.sub(bv).expect("shape");
                self.accumulate(grads, *a, || diff.scale(c));
                self.accumulate(grads, *b, || diff.scale(-c));
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, || Tensor::full(&s, gd[0]));
            }
            Op::FrobeniusNorm(x) => {
                let xv = self.value(*x);
                let norm = node.value.item();
                let c = if norm > 0.0 { gd[0] / norm } else { 0.0 };
                self.accumulate(grads, *x, || xv.scale(c));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [n, c, h, wd] = [xs[0], xs[1], xs[2], xs[3]];
        let geom = conv_geom(&xs, &ws, stride, pad, groups);
        let (o, og) = (ws[0], ws[0] / groups);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let krows = geom.col_rows();
        let gd = g.data();
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);

        let mut cols = vec![0.0; krows * oh * ow];
        let mut dx = need_x.then(|| vec![0.0; xv.len()]);
        let mut dw = need_w.then(|| vec![0.0; wv.len()]);
        for ni in 0..n {
            for gi in 0..groups {
                let gslice = &gd[(ni * o + gi * og) * oh * ow..(ni * o + (gi + 1) * og) * oh * ow];
                if let Some(dw) = dw.as_mut() {
                    kernels::im2col(&xv[(ni * c + gi * geom.channels) * h * wd..], &geom, &mut cols);
                    let dwg = &mut dw[gi * og * krows..(gi + 1) * og * krows];
                    kernels::gemm(og, oh * ow, krows, gslice, false, &cols, true, 1.0, dwg);
                }
                if let Some(dx) = dx.as_mut() {
                    let wg = &wv[gi * og * krows..(gi + 1) * og * krows];
                    kernels::gemm(krows, og, oh * ow, wg, true, gslice, false, 0.0, &mut cols);
                    let start = (ni * c + gi * geom.channels) * h * wd;
                    kernels::col2im(&cols, &geom, &mut dx[start..start + geom.channels * h * wd]);
                }
            }
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, || Tensor::new(&xs, dx).expect("shape"));
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, || Tensor::new(&ws, dw).expect("shape"));
        }
        if let Some(b) = bias {
            self.accumulate(grads, b, || {
                let mut db = vec![0.0; o];
                for (i, v) in gd.iter().enumerate() {
                    db[(i / (oh * ow)) % o] += v;
                }
                Tensor::new(&[o], db).expect("shape")
            });
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: impl FnOnce() -> Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let c = contribution();
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(c.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(c),
        }
    }
}
