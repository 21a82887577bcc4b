//! Fixed separable resampling operators.
//!
//! Each operator is a dense `(n_out, n_in)` matrix applied along rows and
//! columns. Rows are normalised to sum to one, so constant images pass
//! through every operator unchanged, and borders use half-sample symmetric
//! reflection.

use std::sync::Arc;

use stochsr_tensor::{kernels, Tensor};

use crate::error::{Error, Result};
use crate::image::ImageBatch;

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Maps any integer index into `[0, n)` by symmetric reflection
/// (`-1 → 0`, `n → n - 1`).
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn build(n_out: usize, n_in: usize, weights: impl Fn(usize) -> Vec<(isize, f64)>) -> Tensor {
    let mut m = vec![0.0; n_out * n_in];
    for i in 0..n_out {
        let taps = weights(i);
        let total: f64 = taps.iter().map(|t| t.1).sum();
        for (j, w) in taps {
            m[i * n_in + reflect(j, n_in)] += w / total;
        }
    }
    Tensor::new(vec![n_out, n_in], m).expect("consistent dims")
}

/// Antialiased bicubic decimation by an integer factor.
pub fn downsample_matrix(n_in: usize, scale: usize) -> Result<Tensor> {
    if scale == 0 || !n_in.is_multiple_of(scale) {
        return Err(Error::Sizing(format!(
            "length {n_in} not divisible by scale {scale}"
        )));
    }
    let s = scale as f64;
    Ok(build(n_in / scale, n_in, |i| {
        let center = (i as f64 + 0.5) * s - 0.5;
        let lo = (center - 2.0 * s).floor() as isize;
        let hi = (center + 2.0 * s).ceil() as isize;
        (lo..=hi).map(|j| (j, cubic((j as f64 - center) / s))).collect()
    }))
}

/// Bicubic interpolation by an integer factor.
pub fn upsample_matrix(n_in: usize, scale: usize) -> Result<Tensor> {
    if scale == 0 {
        return Err(Error::Sizing("scale must be positive".into()));
    }
    let s = scale as f64;
    Ok(build(n_in * scale, n_in, |i| {
        let center = (i as f64 + 0.5) / s - 0.5;
        let lo = center.floor() as isize - 1;
        (lo..lo + 4).map(|j| (j, cubic(j as f64 - center))).collect()
    }))
}

/// Gaussian low-pass with standard deviation `sigma` pixels, truncated at 3σ.
pub fn gaussian_matrix(n: usize, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return build(n, n, |i| vec![(i as isize, 1.0)]);
    }
    let radius = (3.0 * sigma).ceil() as isize;
    build(n, n, |i| {
        (-radius..=radius)
            .map(|d| (i as isize + d, (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()))
            .collect()
    })
}

/// Row/column operator pair for one image size.
#[derive(Clone, Debug)]
pub struct Separable {
    pub rows: Arc<Tensor>,
    pub cols: Arc<Tensor>,
}

impl Separable {
    pub fn downsample(h: usize, w: usize, scale: usize) -> Result<Self> {
        Ok(Self {
            rows: Arc::new(downsample_matrix(h, scale)?),
            cols: Arc::new(downsample_matrix(w, scale)?),
        })
    }

    pub fn upsample(h: usize, w: usize, scale: usize) -> Result<Self> {
        Ok(Self {
            rows: Arc::new(upsample_matrix(h, scale)?),
            cols: Arc::new(upsample_matrix(w, scale)?),
        })
    }

    pub fn gaussian(h: usize, w: usize, sigma: f64) -> Self {
        Self {
            rows: Arc::new(gaussian_matrix(h, sigma)),
            cols: Arc::new(gaussian_matrix(w, sigma)),
        }
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Separable) -> Result<Self> {
        Ok(Self {
            rows: Arc::new(matmul(&self.rows, &first.rows)?),
            cols: Arc::new(matmul(&self.cols, &first.cols)?),
        })
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.rows.shape()[0], self.cols.shape()[0])
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = t.dims4()?;
        if self.rows.shape()[1] != h || self.cols.shape()[1] != w {
            return Err(Error::Sizing(format!(
                "operator expects {}x{} input, got {h}x{w}",
                self.rows.shape()[1],
                self.cols.shape()[1]
            )));
        }
        let (ho, wo) = self.out_hw();
        let data = kernels::separable_forward(
            t.data(),
            n * c,
            (h, w),
            self.rows.data(),
            ho,
            self.cols.data(),
            wo,
        );
        Ok(Tensor::new(vec![n, c, ho, wo], data)?)
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Shape(format!("cannot compose {m}x{k} with {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b.data()[p * n + j];
            }
        }
    }
    Ok(Tensor::new(vec![m, n], out)?)
}

/// Bicubic decimation of every image in the batch (no noise).
pub fn downsample(hr: &ImageBatch, scale: usize) -> Result<ImageBatch> {
    hr.ensure_divisible(scale)?;
    let (h, w) = hr.hw();
    let t = Separable::downsample(h, w, scale)?.apply(hr.tensor())?;
    ImageBatch::from_clamped(t)
}

/// Bicubic interpolation of every image in the batch, clamped to `[0, 1]`.
pub fn upsample(lr: &ImageBatch, scale: usize) -> Result<ImageBatch> {
    let (h, w) = lr.hw();
    let t = Separable::upsample(h, w, scale)?.apply(lr.tensor())?;
    ImageBatch::from_clamped(t)
}
