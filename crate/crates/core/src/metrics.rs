//! Image quality metrics and distributional checks on degraders.

use serde::{Deserialize, Serialize};

use crate::data::{oracle_degrade, OracleDegradation};
use crate::degrader::Degrader;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::resample;
use crate::rng;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &ImageBatch, b: &ImageBatch, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Sizing(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Per-image PSNR in dB over all channels jointly. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageBatch, b: &ImageBatch, peak: f64) -> Result<Vec<f64>> {
    same_shape(a, b, "psnr")?;
    let per = a.tensor().len() / a.batch();
    Ok(a.tensor()
        .data()
        .chunks(per)
        .zip(b.tensor().data().chunks(per))
        .map(|(x, y)| {
            let mse = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / per as f64;
            if mse == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (peak * peak / mse).log10()
            }
        })
        .collect())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Per-image mean SSIM (11×11 Gaussian window, std 1.5, `k1 = 0.01`,
/// `k2 = 0.03`, peak 1) averaged over channels and valid window positions.
pub fn ssim(a: &ImageBatch, b: &ImageBatch) -> Result<Vec<f64>> {
    same_shape(a, b, "ssim")?;
    let (n, c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Sizing(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = h * w;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut total = 0.0;
        let mut count = 0usize;
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let x = &a.tensor().data()[off..off + plane];
            let y = &b.tensor().data()[off..off + plane];
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
            let mx = filter_valid(x, h, w, &k);
            let my = filter_valid(y, h, w, &k);
            let sxx = filter_valid(&xx, h, w, &k);
            let syy = filter_valid(&yy, h, w, &k);
            let sxy = filter_valid(&xy, h, w, &k);
            for j in 0..mx.len() {
                let (ma, mb) = (mx[j], my[j]);
                let va = sxx[j] - ma * ma;
                let vb = syy[j] - mb * mb;
                let cov = sxy[j] - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        out.push(total / count as f64);
    }
    Ok(out)
}

/// Serialises `f64` with infinities as the strings `"inf"` / `"-inf"`.
pub mod inf_sentinel {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected number or inf, got {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    #[serde(with = "inf_sentinel")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "inf_sentinel")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
    pub dataset: String,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageScore>,
    pub aggregate: Aggregate,
    pub meta: ReportMeta,
}

impl MetricReport {
    /// Builds the report; the aggregate is the plain mean of the entries.
    pub fn new(per_image: Vec<ImageScore>, meta: ReportMeta) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Argument("a metric report needs at least one image".into()));
        }
        let n = per_image.len() as f64;
        let aggregate = Aggregate {
            psnr: per_image.iter().map(|s| s.psnr).sum::<f64>() / n,
            ssim: per_image.iter().map(|s| s.ssim).sum::<f64>() / n,
        };
        Ok(Self {
            per_image,
            aggregate,
            meta,
        })
    }

    /// Scores `pred` against `target` image by image.
    pub fn score(ids: &[String], pred: &[ImageBatch], target: &[ImageBatch], meta: ReportMeta) -> Result<Self> {
        if ids.len() != pred.len() || pred.len() != target.len() {
            return Err(Error::Argument("ids, predictions and targets must align".into()));
        }
        let mut per_image = Vec::with_capacity(ids.len());
        for ((id, p), t) in ids.iter().zip(pred).zip(target) {
            let ps = psnr(p, t, 1.0)?;
            let ss = ssim(p, t)?;
            per_image.push(ImageScore {
                id: id.clone(),
                psnr: ps.iter().sum::<f64>() / ps.len() as f64,
                ssim: ss.iter().sum::<f64>() / ss.len() as f64,
            });
        }
        Self::new(per_image, meta)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr,ssim\n");
        for r in &self.per_image {
            s.push_str(&format!("{},{},{}\n", r.id, fmt_db(r.psnr), r.ssim));
        }
        s
    }
}

pub fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        v.to_string()
    }
}

/// Half-width of the flatness window.
pub const FLAT_RADIUS: usize = 3;
pub const FLAT_TOLERANCE: f64 = 1e-6;
/// Fewer flat pixels than this per image triggers the paired fallback.
pub const MIN_FLAT_PIXELS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub sigma: f64,
    pub flat_pixels: usize,
    /// True when too few flat pixels existed and the paired residual
    /// `noisy - clean` was used instead.
    pub fallback: bool,
}

/// Mask of pixels whose `(2r+1)²` neighbourhood in `clean` is constant in
/// every channel, excluding a border of `r`.
pub fn flat_mask(clean: &ImageBatch, index: usize) -> Result<Vec<bool>> {
    let img = clean.item(index)?;
    let (_, c, h, w) = img.dims();
    let d = img.tensor().data();
    let r = FLAT_RADIUS;
    let mut mask = vec![false; h * w];
    if h <= 2 * r || w <= 2 * r {
        return Ok(mask);
    }
    for y in r..h - r {
        'px: for x in r..w - r {
            for ch in 0..c {
                let p = &d[ch * h * w..(ch + 1) * h * w];
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for yy in y - r..=y + r {
                    for xx in x - r..=x + r {
                        let v = p[yy * w + xx];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                if hi - lo >= FLAT_TOLERANCE {
                    continue 'px;
                }
            }
            mask[y * w + x] = true;
        }
    }
    Ok(mask)
}

/// Noise std of item `index` of `noisy`, using flat regions of the
/// noise-free reference `clean`.
///
/// On flat pixels the residual `I - box3(I)` of white noise with std `s` has
/// variance `s² · 8/9`, which is inverted here.
pub fn estimate_noise(noisy: &ImageBatch, clean: &ImageBatch, index: usize) -> Result<NoiseEstimate> {
    same_shape(noisy, clean, "estimate_noise")?;
    let mask = flat_mask(clean, index)?;
    let img = noisy.item(index)?;
    let (_, c, h, w) = img.dims();
    let d = img.tensor().data();
    let flat: Vec<usize> = (0..h * w).filter(|&i| mask[i]).collect();
    if flat.len() < MIN_FLAT_PIXELS {
        let reference = clean.item(index)?;
        let e = d
            .iter()
            .zip(reference.tensor().data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / d.len() as f64;
        return Ok(NoiseEstimate {
            sigma: e.sqrt(),
            flat_pixels: flat.len(),
            fallback: true,
        });
    }
    let mut acc = 0.0;
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for &i in &flat {
            let (y, x) = (i / w, i % w);
            let mut box3 = 0.0;
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    box3 += p[yy * w + xx];
                }
            }
            let r = p[i] - box3 / 9.0;
            acc += r * r;
        }
    }
    let var = acc / (flat.len() * c) as f64 * 9.0 / 8.0;
    Ok(NoiseEstimate {
        sigma: var.sqrt(),
        flat_pixels: flat.len(),
        fallback: false,
    })
}

/// Wasserstein-1 distance between two empirical distributions on the line,
/// as the integral of `|F_a - F_b|`.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("wasserstein1 needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("wasserstein1 got a non-finite sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut pts: Vec<f64> = a.iter().chain(&b).copied().collect();
    pts.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut dist = 0.0;
    for win in pts.windows(2) {
        let x = win[0];
        while ia < a.len() && a[ia] <= x {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= x {
            ib += 1;
        }
        dist += (ia as f64 / na - ib as f64 / nb).abs() * (win[1] - win[0]);
    }
    Ok(dist)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Per-sample noise std estimates on the `[0, 1]` scale.
    pub generator_sigmas: Vec<f64>,
    pub oracle_sigmas: Vec<f64>,
    pub wasserstein: f64,
    /// Mean L1 between generator output and the noise-free downsample.
    pub mean_l1_to_clean: f64,
    /// Set when any sample needed the paired-residual fallback.
    pub fallback: bool,
}

pub const MIN_FIDELITY_SAMPLES: usize = 100;

/// Compares the per-image noise level distribution of `gen` with the
/// oracle's, over `n_samples` draws cycling through `hr_set`.
pub fn degrader_fidelity(
    gen: &dyn Degrader,
    oracle: &OracleDegradation,
    hr_set: &[ImageBatch],
    n_samples: usize,
    seed: u64,
) -> Result<FidelityReport> {
    if n_samples < MIN_FIDELITY_SAMPLES {
        return Err(Error::Argument(format!(
            "degrader_fidelity needs at least {MIN_FIDELITY_SAMPLES} samples, got {n_samples}"
        )));
    }
    if hr_set.is_empty() {
        return Err(Error::Argument("degrader_fidelity needs HR images".into()));
    }
    let scale = oracle.scale;
    if gen.scale() != scale {
        return Err(Error::Config(format!(
            "degrader scale {} differs from oracle scale {scale}",
            gen.scale()
        )));
    }
    let clean: Vec<ImageBatch> = hr_set
        .iter()
        .map(|h| resample::downsample(h, scale))
        .collect::<Result<_>>()?;
    let mut report = FidelityReport {
        generator_sigmas: Vec::with_capacity(n_samples),
        oracle_sigmas: Vec::with_capacity(n_samples),
        wasserstein: 0.0,
        mean_l1_to_clean: 0.0,
        fallback: false,
    };
    let mut l1 = 0.0;
    for k in 0..n_samples {
        let i = k % hr_set.len();
        let s = rng::derive(seed, &[k as u64]);
        let fake = gen.degrade(&hr_set[i], rng::derive(s, &[0]))?;
        let real = oracle_degrade(&hr_set[i], oracle, rng::derive(s, &[1]))?;
        let ef = estimate_noise(&fake, &clean[i], 0)?;
        let er = estimate_noise(&real, &clean[i], 0)?;
        report.fallback |= ef.fallback || er.fallback;
        report.generator_sigmas.push(ef.sigma);
        report.oracle_sigmas.push(er.sigma);
        l1 += fake.tensor().zip_map(clean[i].tensor(), |a, b| (a - b).abs())?.mean();
    }
    report.mean_l1_to_clean = l1 / n_samples as f64;
    report.wasserstein = wasserstein1(&report.generator_sigmas, &report.oracle_sigmas)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use stochsr_tensor::Tensor;

    #[test]
    fn psnr_identical_is_infinite_and_offset_matches_closed_form() {
        let a = ImageBatch::constant(1, 3, 8, 8, 0.5).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), vec![f64::INFINITY]);
        let b = ImageBatch::constant(1, 3, 8, 8, 0.5 + 16.0 / 255.0).unwrap();
        let expect = 20.0 * (255.0f64 / 16.0).log10();
        assert!((psnr(&a, &b, 1.0).unwrap()[0] - expect).abs() < 1e-9);
        assert!((expect - 24.05).abs() < 0.01);
    }

    #[test]
    fn ssim_identity_and_small_images() {
        let a = crate::synth::texture(1, 16, 3).unwrap();
        assert_eq!(ssim(&a, &a).unwrap(), vec![1.0]);
        let small = ImageBatch::constant(1, 1, 10, 16, 0.5).unwrap();
        assert!(matches!(ssim(&small, &small), Err(Error::Sizing(_))));
    }

    #[test]
    fn wasserstein_point_masses_and_identity() {
        assert_eq!(wasserstein1(&[0.0], &[2.0]).unwrap(), 2.0);
        assert_eq!(wasserstein1(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), 0.0);
        // point mass at 0 versus uniform grid on [1, 2]: mean distance 1.5
        let grid: Vec<f64> = (0..=1000).map(|i| 1.0 + i as f64 / 1000.0).collect();
        assert!((wasserstein1(&[0.0], &grid).unwrap() - 1.5).abs() < 1e-9);
    }

    #[test]
    fn sentinel_round_trips() {
        let s = ImageScore {
            id: "a".into(),
            psnr: f64::INFINITY,
            ssim: 1.0,
        };
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<ImageScore>(&j).unwrap(), s);
    }

    #[test]
    fn noise_estimate_on_flat_image() {
        let clean = ImageBatch::constant(1, 1, 128, 128, 0.5).unwrap();
        let mut r = rng::stream(3, &[0]);
        let noisy = ImageBatch::from_clamped(
            clean
                .tensor()
                .zip_map(&Tensor::randn(vec![1, 1, 128, 128], &mut r), |a, n| a + 0.05 * n)
                .unwrap(),
        )
        .unwrap();
        let e = estimate_noise(&noisy, &clean, 0).unwrap();
        assert!(!e.fallback);
        assert!((e.sigma / 0.05 - 1.0).abs() < 0.05, "{}", e.sigma);
    }
}
