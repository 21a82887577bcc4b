//! Test-time input perturbation sweeps and their line plots.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use stochsr_tensor::Tensor;

use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::metrics::{psnr, ssim};
use crate::rng;
use crate::sr::Restorer;

/// Mean PSNR/SSIM at each test-time noise level (8-bit scale).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub label: String,
    pub sigma_grid: Vec<f64>,
    #[serde(with = "inf_vec")]
    pub psnr_at_sigma: Vec<f64>,
    pub ssim_at_sigma: Vec<f64>,
}

impl RobustnessCurve {
    /// PSNR at the first grid point minus PSNR at the last.
    pub fn psnr_drop(&self) -> f64 {
        match (self.psnr_at_sigma.first(), self.psnr_at_sigma.last()) {
            (Some(a), Some(b)) => a - b,
            _ => 0.0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma,psnr,ssim\n");
        for ((g, p), q) in self.sigma_grid.iter().zip(&self.psnr_at_sigma).zip(&self.ssim_at_sigma) {
            s.push_str(&format!("{g},{},{q}\n", crate::metrics::fmt_db(*p)));
        }
        s
    }
}

mod inf_vec {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Serialize, Deserialize)]
    struct Item(#[serde(with = "crate::metrics::inf_sentinel")] f64);

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&Item(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Item>::deserialize(d)?.into_iter().map(|i| i.0).collect())
    }
}

/// Adds `sigma / 255` Gaussian noise to `lr` and clamps. Zero sigma returns
/// the input unchanged.
pub fn perturb(lr: &ImageBatch, sigma: f64, seed: u64) -> Result<ImageBatch> {
    if sigma == 0.0 {
        return Ok(lr.clone());
    }
    let mut r = rng::stream(seed, &[rng::PERTURB]);
    let s = sigma / 255.0;
    let data: Vec<f64> = lr
        .tensor()
        .data()
        .iter()
        .map(|v| v + s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
        .collect();
    ImageBatch::from_clamped(Tensor::new(lr.tensor().shape().to_vec(), data)?)
}

/// Evaluates `model` on every pair with its LR input perturbed at each grid
/// level. Noise for pair `i` at level `k` is seeded by `(seed, k, i)`.
pub fn robustness_sweep(
    model: &dyn Restorer,
    val_pairs: &[ImagePair],
    sigma_grid: &[f64],
    seed: u64,
) -> Result<RobustnessCurve> {
    if sigma_grid.is_empty() {
        return Err(Error::Argument("robustness sweep needs a non-empty sigma grid".into()));
    }
    if sigma_grid.iter().any(|s| !(*s >= 0.0 && s.is_finite()))
        || sigma_grid.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::Argument(format!(
            "sigma grid {sigma_grid:?} must be nonnegative and strictly increasing"
        )));
    }
    if val_pairs.is_empty() {
        return Err(Error::Argument("robustness sweep needs validation pairs".into()));
    }
    let mut curve = RobustnessCurve {
        label: model.label(),
        sigma_grid: sigma_grid.to_vec(),
        psnr_at_sigma: Vec::with_capacity(sigma_grid.len()),
        ssim_at_sigma: Vec::with_capacity(sigma_grid.len()),
    };
    for (k, &sigma) in sigma_grid.iter().enumerate() {
        let (mut p, mut q) = (0.0, 0.0);
        for (i, pair) in val_pairs.iter().enumerate() {
            let lr = perturb(&pair.lr, sigma, rng::derive(seed, &[k as u64, i as u64]))?;
            let pred = model.restore(&lr)?;
            let ps = psnr(&pred, &pair.hr, 1.0)?;
            let ss = ssim(&pred, &pair.hr)?;
            p += ps.iter().sum::<f64>() / ps.len() as f64;
            q += ss.iter().sum::<f64>() / ss.len() as f64;
        }
        curve.psnr_at_sigma.push(p / val_pairs.len() as f64);
        curve.ssim_at_sigma.push(q / val_pairs.len() as f64);
    }
    Ok(curve)
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

/// PSNR-versus-sigma line plot, one colour per curve (in palette order),
/// with a tick on the x axis at every grid point and one per dB on y.
pub fn plot_curves(path: &Path, curves: &[RobustnessCurve]) -> Result<()> {
    let (w, h, m) = (480u32, 320u32, 32u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let finite = |c: &RobustnessCurve| -> Vec<(f64, f64)> {
        c.sigma_grid
            .iter()
            .zip(&c.psnr_at_sigma)
            .filter(|(_, p)| p.is_finite())
            .map(|(s, p)| (*s, *p))
            .collect()
    };
    let pts: Vec<(f64, f64)> = curves.iter().flat_map(finite).collect();
    if pts.is_empty() {
        return Err(Error::Argument("nothing finite to plot".into()));
    }
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let (y0, y1) = ((y0 - 0.5).floor(), (y1 + 0.5).ceil());
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let px = |x: f64| m as f64 + (x - x0) / (x1 - x0) * (w - 2 * m) as f64;
    let py = |y: f64| (h - m) as f64 - (y - y0) / (y1 - y0) * (h - 2 * m) as f64;
    let black = Rgb([0, 0, 0]);
    line(&mut img, (m as f64, (h - m) as f64), ((w - m) as f64, (h - m) as f64), black);
    line(&mut img, (m as f64, m as f64), (m as f64, (h - m) as f64), black);
    for (s, _) in &pts {
        let x = px(*s);
        line(&mut img, (x, (h - m) as f64), (x, (h - m + 5) as f64), black);
    }
    let mut y = y0;
    while y <= y1 {
        let yy = py(y);
        line(&mut img, ((m - 5) as f64, yy), (m as f64, yy), black);
        y += 1.0;
    }
    for (c, colour) in curves.iter().zip(PALETTE.iter().cycle()) {
        let p = finite(c);
        for seg in p.windows(2) {
            line(&mut img, (px(seg[0].0), py(seg[0].1)), (px(seg[1].0), py(seg[1].1)), Rgb(*colour));
        }
        for (s, v) in &p {
            dot(&mut img, px(*s), py(*v), Rgb(*colour));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(crate::error::io_err(parent))?;
    }
    img.save(path)
        .map_err(|e| Error::Load(vec![(path.to_path_buf(), e.to_string())]))
}

fn put(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        put(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), c);
    }
}

fn dot(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    for dx in -2..=2 {
        for dy in -2..=2 {
            put(img, x + dx as f64, y + dy as f64, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sr::Bicubic;

    fn flat_pairs() -> Vec<ImagePair> {
        (0..2)
            .map(|i| {
                let img = ImageBatch::constant(1, 3, 32, 32, 0.5).unwrap();
                ImagePair {
                    id: format!("p{i}"),
                    hr: img.clone(),
                    lr: img,
                }
            })
            .collect()
    }

    #[test]
    fn zero_sigma_is_plain_evaluation() {
        let c = robustness_sweep(&Bicubic { scale: 1 }, &flat_pairs(), &[0.0, 5.0], 1).unwrap();
        assert_eq!(c.psnr_at_sigma[0], f64::INFINITY);
        assert_eq!(c.ssim_at_sigma[0], 1.0);
        assert!(c.psnr_at_sigma[1].is_finite());
    }

    #[test]
    fn grid_must_increase() {
        let m = Bicubic { scale: 1 };
        assert!(robustness_sweep(&m, &flat_pairs(), &[], 0).is_err());
        assert!(robustness_sweep(&m, &flat_pairs(), &[5.0, 5.0], 0).is_err());
    }

    #[test]
    fn curve_json_round_trip_with_infinity() {
        let c = robustness_sweep(&Bicubic { scale: 1 }, &flat_pairs(), &[0.0, 10.0], 3).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<RobustnessCurve>(&s).unwrap(), c);
    }

    #[test]
    fn plot_writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let c = robustness_sweep(&Bicubic { scale: 1 }, &flat_pairs(), &[0.0, 5.0, 10.0], 3).unwrap();
        let p = dir.path().join("plot.png");
        plot_curves(&p, &[c]).unwrap();
        assert!(crate::io::read_png(&p).is_ok());
    }
}
