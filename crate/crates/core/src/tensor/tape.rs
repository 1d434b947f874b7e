use super::conv::{conv_backward_geom, conv_forward_geom, ConvGeom};
use super::{matmul_into, ParamId, ParamStore, Scalar, Tensor, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Dot(Var, Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    RowDot(Var, Var),
    BatchedMatVec { m: Var, v: Var },
    NceRows { logits: Var, probs: Vec<T> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Wengert list of the forward computation.
///
/// Nodes are appended in execution order, which is a topological order, so
/// backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NumericalInstability(format!(
                "non-finite output from {name} with shape {:?}",
                value.shape()
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Which relu inputs are positive, over every relu on the tape in recording order.
    /// Two evaluations with equal patterns lie on the same smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                out.extend(self.data(x).iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Constant, "constant")
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id), store.name(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), self.shape(b), stride, pad)?;
        let out = conv_forward_geom(&geom, self.data(x), self.data(w), self.data(b));
        let t = Tensor::new(geom.out_shape(), out)?;
        self.push(t, Op::Conv2d { x, w, b, geom }, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push(t, Op::Relu(x), "relu")
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::InvalidShape {
                op: "avg_pool2d",
                shape: s,
                reason: "expected [N,C,H,W] with H,W >= 2".into(),
            });
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let quarter = T::from_f64_lossy(0.25);
        let mut out = vec![T::zero(); nc * oh * ow];
        for p in 0..nc {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    out[(p * oh + oy) * ow + ox] =
                        (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        self.push(t, Op::AvgPool2(x), "avg_pool2d")
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                shape: s,
                reason: "expected [N,C,H,W]".into(),
            });
        }
        let area = s[2] * s[3];
        let inv = T::one() / T::from_usize(area).unwrap();
        let out = self
            .data(x)
            .chunks(area)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new(vec![s[0], s[1]], out)?;
        self.push(t, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.data(a), self.data(b), m, k, n, false, false, &mut out, false);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul(a, b), "matmul")
    }

    /// `[N,M] + [M]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(shape_err("add_bias", sx, sb));
        }
        let bias = self.data(b);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(bias.len().max(1)) {
            add_into(row, bias);
        }
        let t = Tensor::new(sx.to_vec(), out)?;
        self.push(t, Op::AddBias(x, b), "add_bias")
    }

    /// `x W + b` with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(t, Op::Scale(x, c), "scale")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sa != sb {
            return Err(shape_err("dot", sa, sb));
        }
        let v = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).sum();
        self.push(Tensor::scalar(v), Op::Dot(a, b), "dot")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(v), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let v = self.data(x).iter().copied().sum::<T>() / T::from_usize(n).unwrap();
        self.push(Tensor::scalar(v), Op::Mean(x), "mean")
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = self.shape(*first).split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            match s.split_last() {
                Some((&w, l)) if l == lead.as_slice() => widths.push(w),
                _ => return Err(shape_err("concat", self.shape(*first), s)),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Concat(parts.to_vec()), "concat")
    }

    /// Gathers slices along the first axis.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some((&rows, rest)) = s.split_first() else {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: s,
                reason: "scalar input".into(),
            });
        };
        let width: usize = rest.iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(Error::invalid(format!("gather_rows index {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(rest);
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, "gather_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// Unit-normalizes along the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().ok_or_else(|| Error::InvalidShape {
            op: "l2_normalize",
            shape: s.clone(),
            reason: "scalar input".into(),
        })?;
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len());
        let mut norms = Vec::with_capacity(src.len() / width.max(1));
        for row in src.chunks(width.max(1)) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let n64 = norm.to_f64().unwrap_or(f64::NAN);
            if n64 <= NORM_EPS {
                return Err(Error::DegenerateEmbedding { norm: n64, eps: NORM_EPS });
            }
            out.extend(row.iter().map(|&v| v / norm));
            norms.push(norm);
        }
        let t = Tensor::new(s, out)?;
        self.push(t, Op::L2Normalize { x, norms }, "l2_normalize")
    }

    /// Row-wise inner products of two `[B,d]` tensors.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sa != sb {
            return Err(shape_err("row_dot", sa, sb));
        }
        let d = sa[1];
        let out = self
            .data(a)
            .chunks(d.max(1))
            .zip(self.data(b).chunks(d.max(1)))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        let t = Tensor::new(vec![sa[0]], out)?;
        self.push(t, Op::RowDot(a, b), "row_dot")
    }

    /// `[B,N,d] x [B,d] -> [B,N]`.
    pub fn batched_matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.len() != 3 || sv.len() != 2 || sm[0] != sv[0] || sm[2] != sv[1] {
            return Err(shape_err("batched_matvec", sm, sv));
        }
        let (b, n, d) = (sm[0], sm[1], sm[2]);
        let (md, vd) = (self.data(m), self.data(v));
        let mut out = Vec::with_capacity(b * n);
        for bi in 0..b {
            let vec = &vd[bi * d..(bi + 1) * d];
            for ni in 0..n {
                let row = &md[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                out.push(row.iter().zip(vec).map(|(&p, &q)| p * q).sum());
            }
        }
        let t = Tensor::new(vec![b, n], out)?;
        self.push(t, Op::BatchedMatVec { m, v }, "batched_matvec")
    }

    /// Binary-event contrastive loss per row of `[B, N+1]` logits.
    ///
    /// Column 0 is the positive pair and columns 1..=N the noise pairs. With
    /// `h_i = exp(x_i) / sum_j exp(x_j)` the row loss is
    /// `-log h_0 - sum_{i>0} log(1 - h_i)`, evaluated in log space.
    pub fn nce_rows(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[1] < 2 {
            return Err(Error::InvalidShape {
                op: "nce_rows",
                shape: s,
                reason: "expected [B, N+1] with N >= 1".into(),
            });
        }
        let width = s[1];
        let mut losses = Vec::with_capacity(s[0]);
        let mut probs = Vec::with_capacity(s[0] * width);
        for row in self.data(logits).chunks(width) {
            let (loss, p) = nce_row(row);
            losses.push(loss);
            probs.extend(p);
        }
        let t = Tensor::new(vec![s[0]], losses)?;
        self.push(t, Op::NceRows { logits, probs }, "nce_rows")
    }

    /// Softmax cross-entropy per row of `[B, K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                shape: s,
                reason: format!("expected [{}, K]", targets.len()),
            });
        }
        let k = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target class {bad} out of range for {k} logits")));
        }
        let mut losses = Vec::with_capacity(s[0]);
        let mut probs = Vec::with_capacity(s[0] * k);
        for (row, &t) in self.data(logits).chunks(k).zip(targets) {
            let lse = log_sum_exp(row);
            losses.push(lse - row[t]);
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let t = Tensor::new(vec![s[0]], losses)?;
        self.push(
            t,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    /// Reverse sweep from a scalar; parameter gradients are added into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalInstability(format!("non-finite gradient at node {id}")));
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => store.accumulate_grad(*pid, &g),
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        match &mut grads[v.0] {
            Some(acc) => add_into(acc, &g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Constant | Op::Param(_) => unreachable!(),
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv_backward_geom(geom, self.data(*x), self.data(*w), g);
                self.send(grads, *x, dx);
                self.send(grads, *w, dw);
                self.send(grads, *b, db);
            }
            Op::Relu(x) => {
                let dx = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.send(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64_lossy(0.25);
                let mut dx = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(p * oh + oy) * ow + ox] * quarter;
                            let i = p * h * w + 2 * oy * w + 2 * ox;
                            dx[i] = gv;
                            dx[i + 1] = gv;
                            dx[i + w] = gv;
                            dx[i + w + 1] = gv;
                        }
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let area = s[2] * s[3];
                let inv = T::one() / T::from_usize(area).unwrap();
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, area)).collect();
                self.send(grads, *x, dx);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut da = vec![T::zero(); m * k];
                matmul_into(g, self.data(*b), m, n, k, false, true, &mut da, false);
                let mut db = vec![T::zero(); k * n];
                matmul_into(self.data(*a), g, k, m, n, true, false, &mut db, false);
                self.send(grads, *a, da);
                self.send(grads, *b, db);
            }
            Op::AddBias(x, b) => {
                let width = self.shape(*b)[0];
                let mut db = vec![T::zero(); width];
                for row in g.chunks(width.max(1)) {
                    add_into(&mut db, row);
                }
                self.send(grads, *x, g.to_vec());
                self.send(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(self.data(*b)).map(|(&gv, &y)| gv * y).collect();
                let db = g.iter().zip(self.data(*a)).map(|(&gv, &x)| gv * x).collect();
                self.send(grads, *a, da);
                self.send(grads, *b, db);
            }
            Op::Scale(x, c) => {
                let dx = g.iter().map(|&gv| gv * *c).collect();
                self.send(grads, *x, dx);
            }
            Op::Dot(a, b) => {
                let gv = g[0];
                let da = self.data(*b).iter().map(|&y| gv * y).collect();
                let db = self.data(*a).iter().map(|&x| gv * x).collect();
                self.send(grads, *a, da);
                self.send(grads, *b, db);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gv = g[0] / T::from_usize(n).unwrap();
                self.send(grads, *x, vec![gv; n]);
            }
            Op::Concat(parts) => {
                let total = *out.shape().last().unwrap();
                let rows = out.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    self.send(grads, p, dp);
                }
            }
            Op::GatherRows { x, idx } => {
                let src = self.value(*x);
                let width = src.numel() / src.shape()[0].max(1);
                let mut dx = vec![T::zero(); src.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut dx[i * width..(i + 1) * width], &g[k * width..(k + 1) * width]);
                }
                self.send(grads, *x, dx);
            }
            Op::Reshape(x) => self.send(grads, *x, g.to_vec()),
            Op::L2Normalize { x, norms } => {
                let width = *out.shape().last().unwrap();
                let y = out.data();
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks(width).zip(g.chunks(width)).zip(norms) {
                    let proj: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * proj) / n));
                }
                self.send(grads, *x, dx);
            }
            Op::RowDot(a, b) => {
                let d = self.shape(*a)[1];
                let mut da = Vec::with_capacity(g.len() * d);
                let mut db = Vec::with_capacity(g.len() * d);
                for (r, &gv) in g.iter().enumerate() {
                    da.extend(self.data(*b)[r * d..(r + 1) * d].iter().map(|&v| gv * v));
                    db.extend(self.data(*a)[r * d..(r + 1) * d].iter().map(|&v| gv * v));
                }
                self.send(grads, *a, da);
                self.send(grads, *b, db);
            }
            Op::BatchedMatVec { m, v } => {
                let s = self.shape(*m);
                let (b, n, d) = (s[0], s[1], s[2]);
                let (md, vd) = (self.data(*m), self.data(*v));
                let mut dm = vec![T::zero(); b * n * d];
                let mut dv = vec![T::zero(); b * d];
                for bi in 0..b {
                    for ni in 0..n {
                        let gv = g[bi * n + ni];
                        let r = (bi * n + ni) * d;
                        for j in 0..d {
                            dm[r + j] = gv * vd[bi * d + j];
                            dv[bi * d + j] = dv[bi * d + j] + gv * md[r + j];
                        }
                    }
                }
                self.send(grads, *m, dm);
                self.send(grads, *v, dv);
            }
            Op::NceRows { logits, probs } => {
                let width = self.shape(*logits)[1];
                let mut dx = Vec::with_capacity(probs.len());
                for (p, &gv) in probs.chunks(width).zip(g) {
                    dx.extend(nce_row_grad(p).into_iter().map(|v| v * gv));
                }
                self.send(grads, *logits, dx);
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let mut dx = probs.clone();
                for (r, (&t, &gv)) in targets.iter().zip(g).enumerate() {
                    dx[r * k + t] = dx[r * k + t] - T::one();
                    dx[r * k..(r + 1) * k].iter_mut().for_each(|v| *v = *v * gv);
                }
                self.send(grads, *logits, dx);
            }
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// `log(1 - exp(a))` for `a < 0`.
fn log1m_exp<T: Scalar>(a: T) -> T {
    if a > -T::from_f64_lossy(std::f64::consts::LN_2) {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

/// Noise logits in ascending order, so sums over the noise columns do not
/// depend on the order in which negatives were drawn.
fn sorted_noise<T: Scalar>(row: &[T]) -> Vec<T> {
    let mut noise = row[1..].to_vec();
    noise.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    noise
}

/// Loss and event probabilities for one logit row.
///
/// Noise terms are summed in ascending logit order, which makes the loss
/// bit-identical under any permutation of the negatives.
pub(crate) fn nce_row<T: Scalar>(row: &[T]) -> (T, Vec<T>) {
    let noise = sorted_noise(row);
    let max = noise.iter().copied().fold(row[0], T::max);
    let lse = if max.is_finite() {
        let total = noise.iter().fold((row[0] - max).exp(), |acc, &x| acc + (x - max).exp());
        max + total.ln()
    } else {
        max
    };
    let mut loss = lse - row[0];
    for &x in &noise {
        loss = loss - log1m_exp(x - lse);
    }
    let probs = row.iter().map(|&x| (x - lse).exp()).collect();
    (loss, probs)
}

/// d loss / d logits given the event probabilities of one row.
fn nce_row_grad<T: Scalar>(p: &[T]) -> Vec<T> {
    // d(-log p0)/dx_i = p_i - [i = 0]
    // d(-log(1 - p_j))/dx_i = p_j ([i = j] - p_i) / (1 - p_j)
    let odds: Vec<T> = p.iter().map(|&pj| pj / (T::one() - pj)).collect();
    let total_odds = sorted_noise(&odds).into_iter().fold(T::zero(), |acc, o| acc + o);
    p.iter()
        .enumerate()
        .map(|(i, &pi)| {
            let mut gi = pi - pi * total_odds;
            if i == 0 {
                gi = gi - T::one();
            } else {
                gi = gi + odds[i];
            }
            gi
        })
        .collect()
}
