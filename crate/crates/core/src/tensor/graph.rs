use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
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
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    Relu,
    Sqrt,
    Clamp { lo: f64, hi: f64 },
    Reshape,
    MatMul,
    AddBias,
    Conv2d(ConvGeometry),
    SpatialMean,
    SpatialVar,
    ChannelMean,
    ChannelVar,
    ExpandRows,
    ExpandCols,
    Normalize,
    ChannelAffine,
    Column(usize),
    ConcatCols,
    Sum,
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
    Mse,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<Var>,
}

/// Dynamic tape. Nodes are appended in execution order, so reverse index
/// order is a valid reverse topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `(N, C, spatial)` view of a tensor laid out as `[N, C, ...]`.
fn nc_spatial(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(dim_err(op, format!("expected [N, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
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

    /// Records `tensor` as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        if tensor.requires_grad && tensor.grad.is_none() {
            tensor.grad = Some(vec![0.0; tensor.data.len()]);
        }
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            parents: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable copy of `tensor` with a fresh zero gradient.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let t = Tensor {
            shape: tensor.shape.clone(),
            data: tensor.data.clone(),
            grad: None,
            requires_grad: false,
        };
        self.leaf(t.with_grad())
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Accumulated gradient of a leaf, if it requires one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Smallest distance between any recorded relu/clamp input and its
    /// non-differentiable point. Finite-difference checks are only
    /// meaningful when this exceeds the step size.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let kinks: &[f64] = match node.op {
                Op::Relu => &[0.0],
                Op::Clamp { lo, hi } => &[lo, hi],
                _ => continue,
            };
            for &x in self.data(node.parents[0]) {
                for &k in kinks {
                    if k.is_finite() {
                        margin = margin.min((x - k).abs());
                    }
                }
            }
        }
        margin
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: Vec<Var>) -> Var {
        let requires_grad = parents.iter().any(|p| self.requires_grad(*p));
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                grad: None,
                requires_grad,
            },
            op,
            parents,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, vec![a, b])
    }

    fn map(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, op, vec![x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add, a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub, a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul, a, b, |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip_with(Op::Div, a, b, |x, y| x / y))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.map(Op::Scale(k), x, |v| k * v)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.map(Op::AddScalar, x, |v| v + k)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Rectifier with subgradient 0 at the origin.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(Op::Relu, x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(Op::Sqrt, x, f64::sqrt)
    }

    /// Hard clamp; the gradient is passed only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(Op::Clamp { lo, hi }, x, |v| v.clamp(lo, hi))
    }

    /// Copies the current value of `x` as a constant (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t.shape, t.data, Op::Reshape, vec![x]))
    }

    /// `[M, K] x [K, N] -> [M, N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.data(a),
            kernels::row_major(k),
            self.data(b),
            kernels::row_major(n),
            0.0,
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul, vec![a, b]))
    }

    /// `x[N, F] + b[F]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(dim_err("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let f = sx[1];
        let bias = self.data(b);
        let data = self.data(x).iter().enumerate().map(|(i, v)| v + bias[i % f]).collect();
        let shape = sx.to_vec();
        Ok(self.push(shape, data, Op::AddBias, vec![x, b]))
    }

    /// Direct 2-D convolution without bias, `x[N,C,H,W] * w[F,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(dim_err(
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sw:?}"),
            ));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be at least 1"));
        }
        let k = sw[2];
        if k > sx[2] + 2 * pad || k > sx[3] + 2 * pad {
            return Err(dim_err(
                "conv2d",
                format!("kernel {k}x{k} exceeds padded input {:?} with pad {pad}", &sx[2..]),
            ));
        }
        let geo = ConvGeometry {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            k,
            stride,
            pad,
            oh: (sx[2] + 2 * pad - k) / stride + 1,
            ow: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let f = sw[0];
        let cols = kernels::im2col(self.data(x), &geo);
        let mut fnp = vec![0.0; f * geo.cols()];
        kernels::gemm(
            f,
            geo.rows(),
            geo.cols(),
            self.data(w),
            kernels::row_major(geo.rows()),
            &cols,
            kernels::row_major(geo.cols()),
            0.0,
            &mut fnp,
        );
        let out = kernels::fnp_to_nfp(&fnp, f, geo.n, geo.oh * geo.ow);
        Ok(self.push(vec![geo.n, f, geo.oh, geo.ow], out, Op::Conv2d(geo), vec![x, w]))
    }

    /// Mean over spatial positions: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, s) = nc_spatial("global_avg_pool", self.shape(x))?;
        let data = self
            .data(x)
            .chunks(s)
            .map(|p| p.iter().sum::<f64>() / s as f64)
            .collect();
        Ok(self.push(vec![n, c], data, Op::SpatialMean, vec![x]))
    }

    /// Biased variance over spatial positions: `[N, C, ...] -> [N, C]`.
    pub fn spatial_var(&mut self, x: Var) -> Result<Var> {
        let (n, c, s) = nc_spatial("spatial_var", self.shape(x))?;
        let data = self
            .data(x)
            .chunks(s)
            .map(|p| {
                let mean = p.iter().sum::<f64>() / s as f64;
                p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s as f64
            })
            .collect();
        Ok(self.push(vec![n, c], data, Op::SpatialVar, vec![x]))
    }

    fn channel_means(&self, x: Var) -> Result<(usize, usize, usize, Vec<f64>)> {
        let (n, c, s) = nc_spatial("channel_mean", self.shape(x))?;
        let data = self.data(x);
        let mut mean = vec![0.0; c];
        for ni in 0..n {
            for (ci, m) in mean.iter_mut().enumerate() {
                *m += data[(ni * c + ci) * s..(ni * c + ci + 1) * s].iter().sum::<f64>();
            }
        }
        let count = (n * s) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        Ok((n, c, s, mean))
    }

    /// Mean over batch and spatial positions: `[N, C, ...] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (_, c, _, mean) = self.channel_means(x)?;
        Ok(self.push(vec![c], mean, Op::ChannelMean, vec![x]))
    }

    /// Biased variance over batch and spatial positions: `[N, C, ...] -> [C]`.
    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        let (n, c, s, mean) = self.channel_means(x)?;
        let data = self.data(x);
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let m = mean[ci];
                var[ci] += data[(ni * c + ci) * s..(ni * c + ci + 1) * s]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
        }
        let count = (n * s) as f64;
        var.iter_mut().for_each(|v| *v /= count);
        Ok(self.push(vec![c], var, Op::ChannelVar, vec![x]))
    }

    /// Repeats a `[C]` vector into `[N, C]`.
    pub fn expand_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let s = self.shape(v);
        if s.len() != 1 {
            return Err(dim_err("expand_rows", format!("expected [C], got {s:?}")));
        }
        let c = s[0];
        let data = self.data(v).repeat(n);
        Ok(self.push(vec![n, c], data, Op::ExpandRows, vec![v]))
    }

    /// Repeats an `[N]` vector into `[N, C]`.
    pub fn expand_cols(&mut self, v: Var, c: usize) -> Result<Var> {
        let s = self.shape(v);
        if s.len() != 1 {
            return Err(dim_err("expand_cols", format!("expected [N], got {s:?}")));
        }
        let n = s[0];
        let data = self.data(v).iter().flat_map(|a| std::iter::repeat_n(*a, c)).collect();
        Ok(self.push(vec![n, c], data, Op::ExpandCols, vec![v]))
    }

    /// `(x - mu) / sigma` with per-(sample, channel) statistics broadcast
    /// over the spatial positions of `x[N, C, ...]`.
    pub fn normalize(&mut self, x: Var, mu: Var, sigma: Var) -> Result<Var> {
        let (n, c, s) = nc_spatial("normalize", self.shape(x))?;
        if self.shape(mu) != [n, c] || self.shape(sigma) != [n, c] {
            return Err(dim_err(
                "normalize",
                format!(
                    "statistics {:?}/{:?} do not match [N, C] = [{n}, {c}]",
                    self.shape(mu),
                    self.shape(sigma)
                ),
            ));
        }
        let (xd, md, sd) = (self.data(x), self.data(mu), self.data(sigma));
        let mut out = Vec::with_capacity(xd.len());
        for (j, plane) in xd.chunks(s).enumerate() {
            let (m, sg) = (md[j], sd[j]);
            out.extend(plane.iter().map(|v| (v - m) / sg));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Normalize, vec![x, mu, sigma]))
    }

    /// `gamma[c] * x + beta[c]` over `x[N, C, ...]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, c, s) = nc_spatial("channel_affine", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err(
                "channel_affine",
                format!(
                    "affine {:?}/{:?} do not match {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = Vec::with_capacity(xd.len());
        for (j, plane) in xd.chunks(s).enumerate() {
            let ci = j % c;
            out.extend(plane.iter().map(|v| gd[ci] * v + bd[ci]));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::ChannelAffine, vec![x, gamma, beta]))
    }

    /// Column `j` of `x[N, K]` as an `[N]` vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || j >= s[1] {
            return Err(dim_err("column", format!("column {j} of {s:?}")));
        }
        let (n, k) = (s[0], s[1]);
        let data = (0..n).map(|i| self.data(x)[i * k + j]).collect();
        Ok(self.push(vec![n], data, Op::Column(j), vec![x]))
    }

    /// `[N, A] ++ [N, B] -> [N, A + B]`
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(dim_err("concat_cols", format!("{sa:?} ++ {sb:?}")));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&self.data(a)[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&self.data(b)[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(vec![n, ca + cb], data, Op::ConcatCols, vec![a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push(Vec::new(), vec![total], Op::Sum, vec![x])
    }

    /// Batch-mean cross-entropy of `logits[N, Y]` against integer labels,
    /// computed with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(dim_err(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (n, y) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= y) {
            return Err(Error::Input(format!("label {bad} out of range for {y} classes")));
        }
        let mut probs = vec![0.0; n * y];
        let mut loss = 0.0;
        for (i, row) in self.data(logits).chunks(y).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, v) in probs[i * y..(i + 1) * y].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            probs[i * y..(i + 1) * y].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() - (row[labels[i]] - max);
        }
        let op = Op::SoftmaxCrossEntropy {
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Vec::new(), vec![loss / n as f64], op, vec![logits]))
    }

    /// `(1/N) sum_i ||a_i - b_i||^2` where `N` is the leading dimension.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.shape(a).first().copied().unwrap_or(1).max(1);
        let total: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Vec::new(), vec![total / n as f64], Op::Mse, vec![a, b]))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            let contributions = self.vjp(i, &g);
            for (parent, delta) in contributions {
                add_into(&mut adj[parent.0], delta);
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each parent that needs one.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let p = &node.parents;
        let wants = |k: usize| self.requires_grad(p[k]);
        let mut out = Vec::with_capacity(p.len());
        let out_val = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                for (k, &parent) in p.iter().enumerate().take(2) {
                    if wants(k) {
                        out.push((parent, g.to_vec()));
                    }
                }
            }
            Op::Sub => {
                if wants(0) {
                    out.push((p[0], g.to_vec()));
                }
                if wants(1) {
                    out.push((p[1], g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul => {
                let (a, b) = (self.data(p[0]), self.data(p[1]));
                if wants(0) {
                    out.push((p[0], g.iter().zip(b).map(|(g, b)| g * b).collect()));
                }
                if wants(1) {
                    out.push((p[1], g.iter().zip(a).map(|(g, a)| g * a).collect()));
                }
            }
            Op::Div => {
                let (a, b) = (self.data(p[0]), self.data(p[1]));
                if wants(0) {
                    out.push((p[0], g.iter().zip(b).map(|(g, b)| g / b).collect()));
                }
                if wants(1) {
                    let d = g
                        .iter()
                        .zip(a.iter().zip(b))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect();
                    out.push((p[1], d));
                }
            }
            Op::Scale(k) => out.push((p[0], g.iter().map(|v| k * v).collect())),
            Op::AddScalar | Op::Reshape => out.push((p[0], g.to_vec())),
            Op::Relu => {
                let x = self.data(p[0]);
                let d = g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                out.push((p[0], d));
            }
            Op::Sqrt => {
                let d = g.iter().zip(out_val).map(|(g, y)| g / (2.0 * y)).collect();
                out.push((p[0], d));
            }
            Op::Clamp { lo, hi } => {
                let x = self.data(p[0]);
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > *lo && *x < *hi { *g } else { 0.0 })
                    .collect();
                out.push((p[0], d));
            }
            Op::MatMul => {
                let (sa, sb) = (self.shape(p[0]), self.shape(p[1]));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(0) {
                    // dA = G · B^T
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(
                        m,
                        n,
                        k,
                        g,
                        kernels::row_major(n),
                        self.data(p[1]),
                        kernels::transposed(n),
                        0.0,
                        &mut da,
                    );
                    out.push((p[0], da));
                }
                if wants(1) {
                    // dB = A^T · G
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(
                        k,
                        m,
                        n,
                        self.data(p[0]),
                        kernels::transposed(k),
                        g,
                        kernels::row_major(n),
                        0.0,
                        &mut db,
                    );
                    out.push((p[1], db));
                }
            }
            Op::AddBias => {
                let f = self.shape(p[1])[0];
                if wants(0) {
                    out.push((p[0], g.to_vec()));
                }
                if wants(1) {
                    let mut db = vec![0.0; f];
                    for row in g.chunks(f) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((p[1], db));
                }
            }
            Op::Conv2d(geo) => {
                let f = self.shape(p[1])[0];
                let dmat = kernels::nfp_to_fnp(g, f, geo.n, geo.oh * geo.ow);
                if wants(1) {
                    // dW = G · cols^T
                    let cols = kernels::im2col(self.data(p[0]), geo);
                    let mut dw = vec![0.0; f * geo.rows()];
                    kernels::gemm(
                        f,
                        geo.cols(),
                        geo.rows(),
                        &dmat,
                        kernels::row_major(geo.cols()),
                        &cols,
                        kernels::transposed(geo.cols()),
                        0.0,
                        &mut dw,
                    );
                    out.push((p[1], dw));
                }
                if wants(0) {
                    // dcols = W^T · G
                    let mut dcols = vec![0.0; geo.rows() * geo.cols()];
                    kernels::gemm(
                        geo.rows(),
                        f,
                        geo.cols(),
                        self.data(p[1]),
                        kernels::transposed(geo.rows()),
                        &dmat,
                        kernels::row_major(geo.cols()),
                        0.0,
                        &mut dcols,
                    );
                    let mut dx = vec![0.0; geo.n * geo.c * geo.h * geo.w];
                    kernels::col2im_add(&dcols, geo, &mut dx);
                    out.push((p[0], dx));
                }
            }
            Op::SpatialMean => {
                let x = self.value(p[0]);
                let s = x.numel() / g.len();
                let d = g.iter().flat_map(|v| std::iter::repeat_n(v / s as f64, s)).collect();
                out.push((p[0], d));
            }
            Op::SpatialVar => {
                let x = self.data(p[0]);
                let s = x.len() / g.len();
                let mut d = Vec::with_capacity(x.len());
                for (plane, gv) in x.chunks(s).zip(g) {
                    let mean = plane.iter().sum::<f64>() / s as f64;
                    d.extend(plane.iter().map(|v| gv * 2.0 * (v - mean) / s as f64));
                }
                out.push((p[0], d));
            }
            Op::ChannelMean | Op::ChannelVar => {
                let shape = self.shape(p[0]);
                let (n, c) = (shape[0], shape[1]);
                let x = self.data(p[0]);
                let s = x.len() / (n * c);
                let count = (n * s) as f64;
                let mut d = vec![0.0; x.len()];
                if let Op::ChannelMean = node.op {
                    for (j, plane) in d.chunks_mut(s).enumerate() {
                        plane.iter_mut().for_each(|v| *v = g[j % c] / count);
                    }
                } else {
                    let mut mean = vec![0.0; c];
                    for (j, plane) in x.chunks(s).enumerate() {
                        mean[j % c] += plane.iter().sum::<f64>();
                    }
                    mean.iter_mut().for_each(|m| *m /= count);
                    for (j, (dp, xp)) in d.chunks_mut(s).zip(x.chunks(s)).enumerate() {
                        let ci = j % c;
                        for (dv, xv) in dp.iter_mut().zip(xp) {
                            *dv = g[ci] * 2.0 * (xv - mean[ci]) / count;
                        }
                    }
                }
                out.push((p[0], d));
            }
            Op::ExpandRows => {
                let c = self.shape(p[0])[0];
                let mut d = vec![0.0; c];
                for row in g.chunks(c) {
                    d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                out.push((p[0], d));
            }
            Op::ExpandCols => {
                let n = self.shape(p[0])[0];
                let c = g.len() / n.max(1);
                let d = g.chunks(c).map(|row| row.iter().sum()).collect();
                out.push((p[0], d));
            }
            Op::Normalize => {
                let (x, mu, sigma) = (self.data(p[0]), self.data(p[1]), self.data(p[2]));
                let s = x.len() / mu.len();
                if wants(0) {
                    let mut dx = Vec::with_capacity(x.len());
                    for (j, gp) in g.chunks(s).enumerate() {
                        dx.extend(gp.iter().map(|v| v / sigma[j]));
                    }
                    out.push((p[0], dx));
                }
                if wants(1) {
                    let dmu = g
                        .chunks(s)
                        .enumerate()
                        .map(|(j, gp)| -gp.iter().sum::<f64>() / sigma[j])
                        .collect();
                    out.push((p[1], dmu));
                }
                if wants(2) {
                    let dsigma = g
                        .chunks(s)
                        .zip(x.chunks(s))
                        .enumerate()
                        .map(|(j, (gp, xp))| {
                            let acc: f64 = gp.iter().zip(xp).map(|(g, x)| g * (x - mu[j])).sum();
                            -acc / (sigma[j] * sigma[j])
                        })
                        .collect();
                    out.push((p[2], dsigma));
                }
            }
            Op::ChannelAffine => {
                let (x, gamma) = (self.data(p[0]), self.data(p[1]));
                let c = gamma.len();
                let s = x.len() / (self.shape(p[0])[0] * c).max(1);
                if wants(0) {
                    let mut dx = Vec::with_capacity(x.len());
                    for (j, gp) in g.chunks(s).enumerate() {
                        dx.extend(gp.iter().map(|v| v * gamma[j % c]));
                    }
                    out.push((p[0], dx));
                }
                if wants(1) {
                    let mut dg = vec![0.0; c];
                    for (j, (gp, xp)) in g.chunks(s).zip(x.chunks(s)).enumerate() {
                        dg[j % c] += gp.iter().zip(xp).map(|(g, x)| g * x).sum::<f64>();
                    }
                    out.push((p[1], dg));
                }
                if wants(2) {
                    let mut db = vec![0.0; c];
                    for (j, gp) in g.chunks(s).enumerate() {
                        db[j % c] += gp.iter().sum::<f64>();
                    }
                    out.push((p[2], db));
                }
            }
            Op::Column(j) => {
                let k = self.shape(p[0])[1];
                let mut d = vec![0.0; g.len() * k];
                for (i, v) in g.iter().enumerate() {
                    d[i * k + j] = *v;
                }
                out.push((p[0], d));
            }
            Op::ConcatCols => {
                let (ca, cb) = (self.shape(p[0])[1], self.shape(p[1])[1]);
                let rows: Vec<&[f64]> = g.chunks(ca + cb).collect();
                if wants(0) {
                    out.push((p[0], rows.iter().flat_map(|r| r[..ca].to_vec()).collect()));
                }
                if wants(1) {
                    out.push((p[1], rows.iter().flat_map(|r| r[ca..].to_vec()).collect()));
                }
            }
            Op::Sum => {
                let n = self.value(p[0]).numel();
                out.push((p[0], vec![g[0]; n]));
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                let n = labels.len();
                let y = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, l) in labels.iter().enumerate() {
                    d[i * y + l] -= scale;
                }
                out.push((p[0], d));
            }
            Op::Mse => {
                let (a, b) = (self.data(p[0]), self.data(p[1]));
                let n = self.shape(p[0]).first().copied().unwrap_or(1).max(1);
                let k = 2.0 * g[0] / n as f64;
                let da: Vec<f64> = a.iter().zip(b).map(|(a, b)| k * (a - b)).collect();
                if wants(1) {
                    out.push((p[1], da.iter().map(|v| -v).collect()));
                }
                if wants(0) {
                    out.push((p[0], da));
                }
            }
        }
        out
    }
}
