//! Define-by-run tape. Every op evaluates eagerly and records enough to
//! replay its adjoint; [`Graph::backward`] walks the tape in reverse.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    PixelShuffle(Var, usize),
    GlobalAvgPool(Var),
    MulChannel(Var, Var),
    Inject {
        x: Var,
        sigma: Var,
        eps: Tensor,
    },
    Separable {
        x: Var,
        rows: Arc<Tensor>,
        cols: Arc<Tensor>,
    },
    ConcatBatch(Vec<Var>),
    MeanAbsDiff(Var, Var),
    MeanSquareTo(Var, f64),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient (data, detached targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that accumulates gradient (trainable parameters).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copies the value of `v` into a fresh constant, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    /// 2-D convolution with zero padding. `w` is `(C_out, C_in, k, k)`,
    /// `b` is `(C_out)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        let (co, ci, k) = match ws.as_slice() {
            &[co, ci, k1, k2] if k1 == k2 => (co, ci, k1),
            _ => {
                return Err(TensorError::Invalid {
                    op: "conv2d",
                    reason: format!("weight must be (C_out, C_in, k, k), got {ws:?}"),
                })
            }
        };
        if ci != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.value(x).shape().to_vec(),
                right: ws,
            });
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(TensorError::Invalid {
                op: "conv2d",
                reason: format!("kernel {k} stride {stride} pad {pad} does not fit {h}x{wd}"),
            });
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![co],
                    right: self.value(b).shape().to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            batch: n,
            c_in: c,
            h,
            w: wd,
            c_out: co,
            k,
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(vec![n, co, ho, wo], data)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(TensorError::Invalid {
                op: "pixel_shuffle",
                reason: format!("{c} channels not divisible by {}", r * r),
            });
        }
        let co = c / (r * r);
        let data = kernels::pixel_shuffle(self.value(x).data(), (n, co, h, w), r, false);
        let t = Tensor::new(vec![n, co, h * r, w * r], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::PixelShuffle(x, r), rg))
    }

    /// `(N, C, H, W) → (N, C, 1, 1)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let t = Tensor::new(vec![n, c, 1, 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// Scales every channel plane of `x` by the matching entry of `s`
    /// (`(N, C, 1, 1)`).
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(s).shape() != [n, c, 1, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_channel",
                left: self.value(x).shape().to_vec(),
                right: self.value(s).shape().to_vec(),
            });
        }
        let plane = h * w;
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .zip(sv)
            .flat_map(|(p, &k)| p.iter().map(move |v| v * k))
            .collect();
        let t = Tensor::new(vec![n, c, h, w], data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulChannel(x, s), rg))
    }

    /// `x + sigma[c] · eps` with `sigma` of shape `(C)` and fixed noise `eps`
    /// shaped like `x`. Gradient reaches `sigma` through the sampled noise.
    pub fn inject(&mut self, x: Var, sigma: Var, eps: Tensor) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        self.value(x).ensure_same_shape(&eps, "inject")?;
        if self.value(sigma).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "inject",
                left: vec![c],
                right: self.value(sigma).shape().to_vec(),
            });
        }
        let plane = h * w;
        let sv = self.value(sigma).data();
        let mut data = self.value(x).data().to_vec();
        for (i, (d, e)) in data.chunks_mut(plane).zip(eps.data().chunks(plane)).enumerate() {
            let s = sv[i % c];
            if s == 0.0 {
                // keeps the sigma = 0 case bit-identical to the input
                continue;
            }
            for (v, n) in d.iter_mut().zip(e) {
                *v += s * n;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(sigma);
        Ok(self.push(t, Op::Inject { x, sigma, eps }, rg))
    }

    /// Fixed separable linear map `rows · X · colsᵀ` on each channel plane.
    /// Used for resampling and blurring.
    pub fn separable(&mut self, x: Var, rows: Arc<Tensor>, cols: Arc<Tensor>) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, hi) = matrix_dims(&rows)?;
        let (wo, wi) = matrix_dims(&cols)?;
        if hi != h || wi != w {
            return Err(TensorError::ShapeMismatch {
                op: "separable",
                left: self.value(x).shape().to_vec(),
                right: vec![hi, wi],
            });
        }
        let data = kernels::separable_forward(
            self.value(x).data(),
            n * c,
            (h, w),
            rows.data(),
            ho,
            cols.data(),
            wo,
        );
        let t = Tensor::new(vec![n, c, ho, wo], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Separable { x, rows, cols }, rg))
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let t = Tensor::concat_batch(&refs)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(t, Op::ConcatBatch(parts.to_vec()), rg))
    }

    /// Scalar `mean(|a - b|)`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), "mean_abs_diff")?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::MeanAbsDiff(a, b), rg))
    }

    /// Scalar `mean((a - target)²)`.
    pub fn mean_square_to(&mut self, a: Var, target: f64) -> Var {
        let t = self.value(a);
        let n = t.len() as f64;
        let s: f64 = t.data().iter().map(|x| (x - target) * (x - target)).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / n), Op::MeanSquareTo(a, target), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Reverse pass from `root`. Seeds the root with ones.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        if !self.rg(root) {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(self.value(root).shape().to_vec()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|v| v * k))?,
            Op::LeakyRelu(a, slope) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { gv * slope })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s))?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x >= *lo && x <= *hi {
                        gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Conv2d { x, w, b, geom } => {
                let want = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    geom,
                    want,
                );
                if let Some(dx) = dx {
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, dx)?)?;
                }
                if let Some(dw) = dw {
                    let shape = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::new(shape, dw)?)?;
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.accumulate(grads, *b, Tensor::new(vec![geom.c_out], db)?)?;
                }
            }
            Op::PixelShuffle(x, r) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let d = kernels::pixel_shuffle(g.data(), (n, c / (r * r), h, w), *r, true);
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], d)?)?;
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let plane = shape[2] * shape[3];
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / plane as f64, plane))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(shape, data)?)?;
            }
            Op::MulChannel(x, s) => {
                let xv = self.value(*x);
                let plane = xv.shape()[2] * xv.shape()[3];
                if self.rg(*x) {
                    let sv = self.value(*s).data();
                    let data = g
                        .data()
                        .chunks(plane)
                        .zip(sv)
                        .flat_map(|(p, &k)| p.iter().map(move |v| v * k))
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
                }
                if self.rg(*s) {
                    let data = g
                        .data()
                        .chunks(plane)
                        .zip(xv.data().chunks(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                        .collect();
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::new(shape, data)?)?;
                }
            }
            Op::Inject { x, sigma, eps } => {
                self.accumulate(grads, *x, g.clone())?;
                if self.rg(*sigma) {
                    let c = self.value(*sigma).len();
                    let plane = g.shape()[2] * g.shape()[3];
                    let mut ds = vec![0.0; c];
                    for (i, (gp, ep)) in g.data().chunks(plane).zip(eps.data().chunks(plane)).enumerate()
                    {
                        ds[i % c] += gp.iter().zip(ep).map(|(a, b)| a * b).sum::<f64>();
                    }
                    self.accumulate(grads, *sigma, Tensor::new(vec![c], ds)?)?;
                }
            }
            Op::Separable { x, rows, cols } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (ho, _) = matrix_dims(rows)?;
                let (wo, _) = matrix_dims(cols)?;
                let d = kernels::separable_backward(
                    g.data(),
                    n * c,
                    (h, w),
                    rows.data(),
                    ho,
                    cols.data(),
                    wo,
                );
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], d)?)?;
            }
            Op::ConcatBatch(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = self.value(p).len();
                    if self.rg(p) {
                        let d = g.data()[off..off + len].to_vec();
                        self.accumulate(grads, p, Tensor::new(shape, d)?)?;
                    }
                    off += len;
                }
            }
            Op::MeanAbsDiff(a, b) => {
                let av = self.value(*a);
                let k = g.data()[0] / av.len() as f64;
                let d = av.zip_map(self.value(*b), |x, y| {
                    if x > y {
                        k
                    } else if x < y {
                        -k
                    } else {
                        0.0
                    }
                })?;
                if self.rg(*b) {
                    self.accumulate(grads, *b, d.map(|v| -v))?;
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::MeanSquareTo(a, target) => {
                let av = self.value(*a);
                let k = 2.0 * g.data()[0] / av.len() as f64;
                self.accumulate(grads, *a, av.map(|x| k * (x - target)))?;
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let k = g.data()[0] / av.len() as f64;
                self.accumulate(grads, *a, Tensor::full(av.shape().to_vec(), k))?;
            }
        }
        Ok(())
    }
}

fn matrix_dims(m: &Tensor) -> Result<(usize, usize)> {
    match m.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(TensorError::Rank {
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}
