//! 8-bit PNG on disk, `[0, 1]` reals in memory.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use stochsr_tensor::Tensor;

use crate::error::{io_err, Error, Result};
use crate::image::ImageBatch;

/// Sorted `*.png` paths directly under `dir`; a missing directory is empty.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Decodes one image as a `(1, C, H, W)` batch; grayscale stays single-channel.
pub fn read_png(path: &Path) -> Result<ImageBatch> {
    let img = image::open(path).map_err(|e| Error::Load(vec![(path.to_path_buf(), e.to_string())]))?;
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_)
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = if gray {
        (1, img.to_luma8().into_raw())
    } else {
        (3, img.to_rgb8().into_raw())
    };
    let mut data = vec![0.0; c * h * w];
    for (i, px) in raw.chunks(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * h * w + i] = v as f64 / 255.0;
        }
    }
    ImageBatch::new(Tensor::new(vec![1, c, h, w], data)?)
}

/// Quantises item `index` of `batch` to 8 bits and writes it as PNG.
pub fn write_png(path: &Path, batch: &ImageBatch, index: usize) -> Result<()> {
    let item = batch.item(index)?;
    let (_, c, h, w) = item.dims();
    let d = item.tensor().data();
    let q = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let res = if c == 1 {
        GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| q(v)).collect())
            .expect("buffer size")
            .save(path)
    } else {
        let mut raw = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            for ch in 0..3 {
                raw.push(q(d[ch * h * w + i]));
            }
        }
        RgbImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer size")
            .save(path)
    };
    res.map_err(|e| Error::Load(vec![(path.to_path_buf(), e.to_string())]))
}

/// Rounds to the values an 8-bit PNG round trip would produce.
pub fn quantize(batch: &ImageBatch) -> ImageBatch {
    ImageBatch::new(batch.tensor().map(|v| (v * 255.0).round() / 255.0)).expect("stays in range")
}
