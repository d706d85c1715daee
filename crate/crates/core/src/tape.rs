//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse and accumulates gradients into the leaves that were
//! registered with `requires_grad`. Leaf gradients persist across calls
//! until [`Tape::zero_grad`], so calling `backward` twice accumulates.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::Tensor;

/// Scalar type a tape computes in. Pipeline code runs in `f32`; the `f64`
/// instantiation exists so gradient checks can resolve small partials.
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = beta * c + a · b` on raw strided buffers.
    ///
    /// # Safety
    /// Strides and sizes must stay inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<R> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    MulConst(Var, Vec<R>),
    Sum(Var),
    Relu(Var),
    ClampMin(Var, R),
    L2Norm(Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    AvgPool2(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ChannelMean(Var),
    ChannelVar {
        x: Var,
        mean: Var,
    },
    Normalize {
        x: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: R,
    },
    LogSoftmax(Var),
    Softmax(Var),
    RowCosine(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<R> {
    shape: Vec<usize>,
    value: Vec<R>,
    op: Op<R>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<R = f32> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
}

impl<R> Default for Tape<R> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<R>, op: Op<R>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<R> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let value = t.data().iter().map(|&v| R::of(v as f64)).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, requires_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_vec(&mut self, shape: &[usize], data: Vec<R>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(crate::error::shape(format!(
                "{shape:?} for {} values",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (s, d) = (n.shape.clone(), n.value.clone());
        self.push(s, d, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> R {
        self.node(v).value[0]
    }

    /// Current value of `v` as an `f32` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        let data = n.value.iter().map(|x| x.f64() as f32).collect();
        Tensor::new(n.shape.clone(), data).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads[v.0].as_deref()
    }

    /// Leaf gradient converted to `f32`, zero-filled if never reached.
    pub fn grad_f32(&self, v: Var) -> Vec<f32> {
        match self.grad(v) {
            Some(g) => g.iter().map(|x| x.f64() as f32).collect(),
            None => vec![0.0; self.value(v).len()],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op<R>, f: impl Fn(R) -> R) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<R>, f: impl Fn(R, R) -> R) -> Result<Var> {
        self.same_shape(a, b, "elementwise")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, op, rg))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = R::of(s);
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// Elementwise product with a constant buffer of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<R>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape(format!(
                "mul_const: {} vs {:?}",
                c.len(),
                self.shape(a)
            )));
        }
        let value = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::MulConst(a, c), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x.f64()).sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![R::of(s)], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(R::zero()))
    }

    /// `max(a, floor)`; clamped entries pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let floor = R::of(floor);
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    /// Euclidean norm of all entries. The subgradient at zero is zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x.f64() * x.f64()).sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![R::of(s.sqrt())], Op::L2Norm(a), rg)
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        if new_shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape(format!(
                "reshape {:?} -> {new_shape:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(new_shape.to_vec(), value, Op::Reshape(a), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let rows = *s.first().ok_or_else(|| shape("slice of a scalar"))?;
        if start + len > rows {
            return Err(shape(format!("rows {start}..{} of {rows}", start + len)));
        }
        let stride: usize = s[1..].iter().product();
        let value = self.value(x)[start * stride..(start + len) * stride].to_vec();
        let mut out_shape = s;
        out_shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, value, Op::SliceRows { x, start }, rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.first().ok_or_else(|| shape("select on a scalar"))?;
        let stride: usize = s[1..].iter().product();
        let xv = self.value(x);
        let mut value = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(shape(format!("row {r} of {n}")));
            }
            value.extend_from_slice(&xv[r * stride..(r + 1) * stride]);
        }
        let mut out_shape = s;
        out_shape[0] = rows.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            out_shape,
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    // ---- layers ----

    /// Same-padded, stride-1 convolution. `x` is NCHW, `w` is
    /// `[out, in, k, k]` with odd `k`, `b` is `[out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        if xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(shape(format!(
                "conv2d channels: input {xs:?} weight {ws:?}"
            )));
        }
        let g = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k: ws[2],
        };
        let value = conv_forward(&g, self.value(x), self.value(w), self.value(b));
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            vec![g.n, g.cout, g.h, g.w],
            value,
            Op::Conv2d { x, w, b },
            rg,
        ))
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape(format!("avg_pool2 input {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = R::of(0.25);
        let xv = self.value(x);
        let mut out = vec![R::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &xv[p * h * w..];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let r0 = 2 * i * w + 2 * j;
                    dst[i * ow + j] =
                        quarter * (src[r0] + src[r0 + 1] + src[r0 + w] + src[r0 + w + 1]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, c, oh, ow], out, Op::AvgPool2(x), rg))
    }

    /// `x · wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(shape(format!("linear input {xs:?} weight {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![R::zero(); n * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(self.value(b));
        }
        gemm(
            n,
            fin,
            fout,
            self.value(x),
            false,
            self.value(w),
            true,
            &mut out,
            R::one(),
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(vec![n, fout], out, Op::Linear { x, w, b }, rg))
    }

    /// Per-channel mean of an NCHW tensor over batch and spatial positions.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, hw) = nchw(self.shape(x))?;
        if n * hw == 0 {
            return Err(invalid("channel statistics of an empty batch"));
        }
        let sums = channel_sums(self.value(x), n, c, hw);
        let value = sums.iter().map(|s| R::of(s / (n * hw) as f64)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c], value, Op::ChannelMean(x), rg))
    }

    /// Per-channel population variance around `mean` (as produced by
    /// [`Tape::channel_mean`]).
    pub fn channel_var(&mut self, x: Var, mean: Var) -> Result<Var> {
        let (n, c, hw) = nchw(self.shape(x))?;
        if self.shape(mean) != [c] {
            return Err(shape(format!(
                "channel_var mean {:?} for {c} channels",
                self.shape(mean)
            )));
        }
        let (xv, mv) = (self.value(x), self.value(mean));
        let mut acc = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let m = mv[ch].f64();
                let base = (i * c + ch) * hw;
                acc[ch] += xv[base..base + hw]
                    .iter()
                    .map(|v| (v.f64() - m).powi(2))
                    .sum::<f64>();
            }
        }
        let value = acc.iter().map(|s| R::of(s / (n * hw) as f64)).collect();
        let rg = self.rg(&[x, mean]);
        Ok(self.push(vec![c], value, Op::ChannelVar { x, mean }, rg))
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
    pub fn normalize(
        &mut self,
        x: Var,
        mean: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let (n, c, hw) = nchw(self.shape(x))?;
        for p in [mean, var, gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape(format!(
                    "normalize parameter {:?} for {c} channels",
                    self.shape(p)
                )));
            }
        }
        let eps = R::of(eps);
        let (xv, mv, vv, gv, bv) = (
            self.value(x),
            self.value(mean),
            self.value(var),
            self.value(gamma),
            self.value(beta),
        );
        let mut out = vec![R::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let inv = (vv[ch] + eps).sqrt().recip();
                let base = (i * c + ch) * hw;
                for (o, &v) in out[base..base + hw].iter_mut().zip(&xv[base..base + hw]) {
                    *o = gv[ch] * (v - mv[ch]) * inv + bv[ch];
                }
            }
        }
        let rg = self.rg(&[x, mean, var, gamma, beta]);
        let s = self.shape(x).to_vec();
        Ok(self.push(
            s,
            out,
            Op::Normalize {
                x,
                mean,
                var,
                gamma,
                beta,
                eps,
            },
            rg,
        ))
    }

    /// Row-wise log-softmax of a `[n, k]` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = rows2(self.shape(x))?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(R::neg_infinity(), R::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<R>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = rows2(self.shape(x))?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg))
    }

    /// Cosine similarity of matching rows of two `[n, d]` tensors; errors on a
    /// zero-norm row, where the cosine is undefined.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_cosine")?;
        let (n, d) = rows2(self.shape(a))?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (ra, rb) = (&av[i * d..(i + 1) * d], &bv[i * d..(i + 1) * d]);
            let (na, nb) = (norm(ra), norm(rb));
            if na == 0.0 || nb == 0.0 {
                return Err(invalid(format!("cosine of a zero-norm vector (row {i})")));
            }
            out.push(R::of(dot(ra, rb) / (na * nb)));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![n], out, Op::RowCosine(a, b), rg))
    }

    // ---- backward ----

    /// Backpropagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut g: Vec<Option<Vec<R>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(vec![R::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = g[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                match &mut self.grads[idx] {
                    Some(acc) => add_into(acc, &gy),
                    None => self.grads[idx] = Some(gy),
                }
                continue;
            }
            self.backward_node(idx, &gy, &mut g);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, gy: &[R], g: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, g, *a) {
                    add_into(ga, gy);
                }
                if let Some(gb) = slot(nodes, g, *b) {
                    add_into(gb, gy);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, g, *a) {
                    add_into(ga, gy);
                }
                if let Some(gb) = slot(nodes, g, *b) {
                    gb.iter_mut().zip(gy).for_each(|(o, &d)| *o = *o - d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = slot(nodes, g, *a) {
                    for i in 0..gy.len() {
                        ga[i] = ga[i] + gy[i] * bv[i];
                    }
                }
                if let Some(gb) = slot(nodes, g, *b) {
                    for i in 0..gy.len() {
                        gb[i] = gb[i] + gy[i] * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, g, *a) {
                    ga.iter_mut().zip(gy).for_each(|(o, &d)| *o = *o + d * *s);
                }
            }
            Op::MulConst(a, c) => {
                if let Some(ga) = slot(nodes, g, *a) {
                    for i in 0..gy.len() {
                        ga[i] = ga[i] + gy[i] * c[i];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, g, *a) {
                    ga.iter_mut().for_each(|o| *o = *o + gy[0]);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(ga) = slot(nodes, g, *a) {
                    for i in 0..gy.len() {
                        if av[i] > R::zero() {
                            ga[i] = ga[i] + gy[i];
                        }
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let av = self.value(*a);
                if let Some(ga) = slot(nodes, g, *a) {
                    for i in 0..gy.len() {
                        if av[i] >= *floor {
                            ga[i] = ga[i] + gy[i];
                        }
                    }
                }
            }
            Op::L2Norm(a) => {
                let nrm = node.value[0];
                let av = self.value(*a);
                if let Some(ga) = slot(nodes, g, *a) {
                    if nrm > R::zero() {
                        for i in 0..av.len() {
                            ga[i] = ga[i] + gy[0] * av[i] / nrm;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, g, *a) {
                    add_into(ga, gy);
                }
            }
            Op::SliceRows { x, start } => {
                let stride: usize = node.shape.iter().skip(1).product();
                if let Some(gx) = slot(nodes, g, *x) {
                    add_into(&mut gx[start * stride..start * stride + gy.len()], gy);
                }
            }
            Op::SelectRows { x, rows } => {
                let stride: usize = node.shape.iter().skip(1).product();
                if let Some(gx) = slot(nodes, g, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut gx[r * stride..(r + 1) * stride],
                            &gy[k * stride..(k + 1) * stride],
                        );
                    }
                }
            }
            Op::Conv2d { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let geom = ConvGeom {
                    n: xs[0],
                    cin: xs[1],
                    h: xs[2],
                    w: xs[3],
                    cout: ws[0],
                    k: ws[2],
                };
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gb) = slot(nodes, g, *b) {
                    let hw = geom.h * geom.w;
                    for i in 0..geom.n {
                        for co in 0..geom.cout {
                            let base = (i * geom.cout + co) * hw;
                            gb[co] = gb[co] + gy[base..base + hw].iter().copied().sum::<R>();
                        }
                    }
                }
                if let Some(gw) = slot(nodes, g, *w) {
                    conv_backward_weight(&geom, xv, gy, gw);
                }
                if let Some(gx) = slot(nodes, g, *x) {
                    conv_backward_input(&geom, wv, gy, gx);
                }
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = R::of(0.25);
                if let Some(gx) = slot(nodes, g, *x) {
                    for p in 0..s[0] * s[1] {
                        for i in 0..oh {
                            for j in 0..ow {
                                let d = quarter * gy[p * oh * ow + i * ow + j];
                                let r0 = p * h * w + 2 * i * w + 2 * j;
                                for r in [r0, r0 + 1, r0 + w, r0 + w + 1] {
                                    gx[r] = gx[r] + d;
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gb) = slot(nodes, g, *b) {
                    for row in gy.chunks(fout) {
                        add_into(gb, row);
                    }
                }
                if let Some(gw) = slot(nodes, g, *w) {
                    // dW[out, in] += dYᵀ[out, n] · X[n, in]
                    gemm(fout, n, fin, gy, true, xv, false, gw, R::one());
                }
                if let Some(gx) = slot(nodes, g, *x) {
                    // dX[n, in] += dY[n, out] · W[out, in]
                    gemm(n, fout, fin, gy, false, wv, false, gx, R::one());
                }
            }
            Op::ChannelMean(x) => {
                let (n, c, hw) = nchw(self.shape(*x)).expect("checked in forward");
                let inv = R::of(1.0 / (n * hw) as f64);
                if let Some(gx) = slot(nodes, g, *x) {
                    for i in 0..n {
                        for ch in 0..c {
                            let d = gy[ch] * inv;
                            let base = (i * c + ch) * hw;
                            gx[base..base + hw].iter_mut().for_each(|o| *o = *o + d);
                        }
                    }
                }
            }
            Op::ChannelVar { x, mean } => {
                let (n, c, hw) = nchw(self.shape(*x)).expect("checked in forward");
                let inv = 1.0 / (n * hw) as f64;
                let (xv, mv) = (self.value(*x), self.value(*mean));
                if let Some(gx) = slot(nodes, g, *x) {
                    for i in 0..n {
                        for ch in 0..c {
                            let k = R::of(2.0 * inv) * gy[ch];
                            let base = (i * c + ch) * hw;
                            for j in base..base + hw {
                                gx[j] = gx[j] + k * (xv[j] - mv[ch]);
                            }
                        }
                    }
                }
                if let Some(gm) = slot(nodes, g, *mean) {
                    let sums = channel_sums(xv, n, c, hw);
                    for ch in 0..c {
                        let centered = sums[ch] - (n * hw) as f64 * mv[ch].f64();
                        gm[ch] = gm[ch] - R::of(2.0 * gy[ch].f64() * inv * centered);
                    }
                }
            }
            Op::Normalize {
                x,
                mean,
                var,
                gamma,
                beta,
                eps,
            } => {
                let (n, c, hw) = nchw(self.shape(*x)).expect("checked in forward");
                let (xv, mv, vv, gv) = (
                    self.value(*x),
                    self.value(*mean),
                    self.value(*var),
                    self.value(*gamma),
                );
                let inv: Vec<R> = vv.iter().map(|&v| (v + *eps).sqrt().recip()).collect();
                // Per-channel sums of gy and gy * xhat.
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            sum_g[ch] += gy[j].f64();
                            sum_gx[ch] += (gy[j] * (xv[j] - mv[ch]) * inv[ch]).f64();
                        }
                    }
                }
                if let Some(gx) = slot(nodes, g, *x) {
                    for i in 0..n {
                        for ch in 0..c {
                            let k = gv[ch] * inv[ch];
                            let base = (i * c + ch) * hw;
                            for j in base..base + hw {
                                gx[j] = gx[j] + gy[j] * k;
                            }
                        }
                    }
                }
                if let Some(gm) = slot(nodes, g, *mean) {
                    for ch in 0..c {
                        gm[ch] = gm[ch] - R::of(sum_g[ch] * (gv[ch] * inv[ch]).f64());
                    }
                }
                if let Some(gvar) = slot(nodes, g, *var) {
                    // d/dvar of (x - m)(var + eps)^(-1/2) = -xhat / (2 (var + eps))
                    for ch in 0..c {
                        let k = -0.5 * gv[ch].f64() * inv[ch].f64().powi(2);
                        gvar[ch] = gvar[ch] + R::of(sum_gx[ch] * k);
                    }
                }
                if let Some(gg) = slot(nodes, g, *gamma) {
                    for ch in 0..c {
                        gg[ch] = gg[ch] + R::of(sum_gx[ch]);
                    }
                }
                if let Some(gb) = slot(nodes, g, *beta) {
                    for ch in 0..c {
                        gb[ch] = gb[ch] + R::of(sum_g[ch]);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let k = node.shape[1];
                if let Some(gx) = slot(nodes, g, *x) {
                    for (r, (yrow, grow)) in node.value.chunks(k).zip(gy.chunks(k)).enumerate() {
                        let s: R = grow.iter().copied().sum();
                        for j in 0..k {
                            gx[r * k + j] = gx[r * k + j] + grow[j] - yrow[j].exp() * s;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let k = node.shape[1];
                if let Some(gx) = slot(nodes, g, *x) {
                    for (r, (yrow, grow)) in node.value.chunks(k).zip(gy.chunks(k)).enumerate() {
                        let d: R = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                        for j in 0..k {
                            gx[r * k + j] = gx[r * k + j] + yrow[j] * (grow[j] - d);
                        }
                    }
                }
            }
            Op::RowCosine(a, b) => {
                let d = self.shape(*a)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                for (which, u, v) in [(*a, av, bv), (*b, bv, av)] {
                    if let Some(gu) = slot(nodes, g, which) {
                        for i in 0..gy.len() {
                            let (ru, rv) = (&u[i * d..(i + 1) * d], &v[i * d..(i + 1) * d]);
                            let (nu, nv) = (norm(ru), norm(rv));
                            let cos = node.value[i].f64();
                            for j in 0..d {
                                let dj = rv[j].f64() / (nu * nv) - cos * ru[j].f64() / (nu * nu);
                                gu[i * d + j] = gu[i * d + j] + R::of(gy[i].f64() * dj);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, if it participates in differentiation.
fn slot<'a, R: Real>(
    nodes: &[Node<R>],
    g: &'a mut [Option<Vec<R>>],
    v: Var,
) -> Option<&'a mut Vec<R>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(g[v.0].get_or_insert_with(|| vec![R::zero(); n.value.len()]))
}

pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let m = row.iter().cloned().fold(R::neg_infinity(), R::max);
    let mut s = R::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

fn dot<R: Real>(a: &[R], b: &[R]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

fn norm<R: Real>(a: &[R]) -> f64 {
    dot(a, a).sqrt()
}

fn nchw(s: &[usize]) -> Result<(usize, usize, usize)> {
    if s.len() != 4 {
        return Err(shape(format!("expected NCHW, got {s:?}")));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

fn rows2(s: &[usize]) -> Result<(usize, usize)> {
    if s.len() != 2 {
        return Err(shape(format!("expected [rows, cols], got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn channel_sums<R: Real>(x: &[R], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            acc[ch] += x[base..base + hw].iter().map(|v| v.f64()).sum::<f64>();
        }
    }
    acc
}

/// `c = beta * c + op(a) · op(b)` for row-major `a: [m, k]`, `b: [k, n]`
/// (before the optional transposes).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    a_t: bool,
    b: &[R],
    b_t: bool,
    c: &mut [R],
    beta: R,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserted lengths cover every index reachable with these
    // strides, and `c` is a distinct mutable borrow.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Unfolds one `[cin, h, w]` image into `[cin*k*k, h*w]` patch columns.
fn im2col<R: Real>(g: &ConvGeom, img: &[R], cols: &mut [R]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let pad = (k / 2) as isize;
    let hw = g.h * g.w;
    for ci in 0..g.cin {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for y in 0..h {
                    let sy = y + dy;
                    let out = &mut row[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out.iter_mut().for_each(|v| *v = R::zero());
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + dx;
                        out[x as usize] = if sx < 0 || sx >= w {
                            R::zero()
                        } else {
                            plane[(sy * w + sx) as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<R: Real>(g: &ConvGeom, cols: &[R], img: &mut [R]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let pad = (k / 2) as isize;
    let hw = g.h * g.w;
    for ci in 0..g.cin {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + dx;
                        if sx >= 0 && sx < w {
                            let p = (sy * w + sx) as usize;
                            plane[p] = plane[p] + row[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<R: Real>(g: &ConvGeom, x: &[R], w: &[R], b: &[R]) -> Vec<R> {
    let hw = g.h * g.w;
    let mut out = vec![R::zero(); g.n * g.cout * hw];
    let mut cols = vec![R::zero(); g.col_rows() * hw];
    for i in 0..g.n {
        im2col(g, &x[i * g.cin * hw..(i + 1) * g.cin * hw], &mut cols);
        let o = &mut out[i * g.cout * hw..(i + 1) * g.cout * hw];
        for (co, row) in o.chunks_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v = b[co]);
        }
        gemm(
            g.cout,
            g.col_rows(),
            hw,
            w,
            false,
            &cols,
            false,
            o,
            R::one(),
        );
    }
    out
}

fn conv_backward_weight<R: Real>(g: &ConvGeom, x: &[R], gy: &[R], gw: &mut [R]) {
    let hw = g.h * g.w;
    let mut cols = vec![R::zero(); g.col_rows() * hw];
    for i in 0..g.n {
        im2col(g, &x[i * g.cin * hw..(i + 1) * g.cin * hw], &mut cols);
        // dW[cout, rows] += dY[cout, hw] · colsᵀ[hw, rows]
        let dy = &gy[i * g.cout * hw..(i + 1) * g.cout * hw];
        gemm(
            g.cout,
            hw,
            g.col_rows(),
            dy,
            false,
            &cols,
            true,
            gw,
            R::one(),
        );
    }
}

fn conv_backward_input<R: Real>(g: &ConvGeom, w: &[R], gy: &[R], gx: &mut [R]) {
    let hw = g.h * g.w;
    let mut dcols = vec![R::zero(); g.col_rows() * hw];
    for i in 0..g.n {
        let dy = &gy[i * g.cout * hw..(i + 1) * g.cout * hw];
        // dcols[rows, hw] = Wᵀ[rows, cout] · dY[cout, hw]
        gemm(
            g.col_rows(),
            g.cout,
            hw,
            w,
            true,
            dy,
            false,
            &mut dcols,
            R::zero(),
        );
        col2im(g, &dcols, &mut gx[i * g.cin * hw..(i + 1) * g.cin * hw]);
    }
}
