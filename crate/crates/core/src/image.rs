use stochsr_tensor::Tensor;

use crate::error::{Error, Result};

/// A batch of images in NCHW layout with values in `[0, 1]`.
///
/// Construction validates rank, channel count (1 or 3), finiteness and range,
/// so any `ImageBatch` in hand is safe to feed to a model or metric.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(t: Tensor) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("images need 1 or 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self(t))
    }

    /// Clamps into `[0, 1]` first; NaN is still rejected.
    pub fn from_clamped(t: Tensor) -> Result<Self> {
        if !t.all_finite() {
            return Err(Error::Numeric("non-finite pixel value".into()));
        }
        Self::new(t.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn constant(n: usize, c: usize, h: usize, w: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(vec![n, c, h, w], value))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("validated rank")
    }

    pub fn batch(&self) -> usize {
        self.dims().0
    }

    pub fn channels(&self) -> usize {
        self.dims().1
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, _, h, w) = self.dims();
        (h, w)
    }

    pub fn item(&self, i: usize) -> Result<ImageBatch> {
        Ok(Self(self.0.batch_item(i)?))
    }

    pub fn items(&self) -> impl Iterator<Item = ImageBatch> + '_ {
        (0..self.batch()).map(|i| self.item(i).expect("index in range"))
    }

    pub fn concat(parts: &[&ImageBatch]) -> Result<ImageBatch> {
        let ts: Vec<&Tensor> = parts.iter().map(|p| &p.0).collect();
        Ok(Self(Tensor::concat_batch(&ts)?))
    }

    /// Fails with a sizing error unless both spatial dims divide by `scale`.
    pub fn ensure_divisible(&self, scale: usize) -> Result<()> {
        let (h, w) = self.hw();
        if scale == 0 || h % scale != 0 || w % scale != 0 {
            return Err(Error::Sizing(format!(
                "{h}x{w} image is not divisible by scale {scale}"
            )));
        }
        Ok(())
    }

    /// Copies the `(size_h, size_w)` window at `(top, left)` from item `n`.
    pub fn crop(&self, n: usize, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<ImageBatch> {
        let (bn, c, h, w) = self.dims();
        if n >= bn || top + size_h > h || left + size_w > w {
            return Err(Error::Sizing(format!(
                "crop {size_h}x{size_w} at ({top}, {left}) exceeds {h}x{w} image {n}"
            )));
        }
        let src = self.0.data();
        let mut out = Vec::with_capacity(c * size_h * size_w);
        for ch in 0..c {
            for y in top..top + size_h {
                let row = ((n * c + ch) * h + y) * w;
                out.extend_from_slice(&src[row + left..row + left + size_w]);
            }
        }
        Ok(Self(Tensor::new(vec![1, c, size_h, size_w], out)?))
    }
}

impl TryFrom<Tensor> for ImageBatch {
    type Error = Error;
    fn try_from(t: Tensor) -> Result<Self> {
        Self::new(t)
    }
}
