//! Corpus loading, patch sampling and the ground-truth oracle degradation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::degrader::Degrader;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::io;
use crate::resample::Separable;
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownsampleKernel {
    /// Antialiased Keys cubic (`a = -0.5`) with symmetric borders.
    #[default]
    Bicubic,
}

/// Ground-truth stochastic HR→LR process: bicubic decimation followed by
/// additive Gaussian noise whose standard deviation is drawn once per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleDegradation {
    pub scale: usize,
    /// Closed interval on the 8-bit scale.
    pub noise_sigma_range: [f64; 2],
    #[serde(default)]
    pub downsample_kernel: DownsampleKernel,
    pub seed: u64,
}

impl Default for OracleDegradation {
    fn default() -> Self {
        Self {
            scale: 4,
            noise_sigma_range: [5.0, 25.0],
            downsample_kernel: DownsampleKernel::Bicubic,
            seed: 0,
        }
    }
}

impl OracleDegradation {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.noise_sigma_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "oracle.noise_sigma_range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if self.scale == 0 {
            return Err(Error::Config("oracle.scale must be positive".into()));
        }
        Ok(())
    }

    /// Mean of the per-image sigma distribution on the `[0, 1]` scale.
    pub fn mean_sigma(&self) -> f64 {
        (self.noise_sigma_range[0] + self.noise_sigma_range[1]) / 2.0 / 255.0
    }
}

/// Degrades `hr` with the oracle; see [`oracle_degrade_with_sigmas`].
pub fn oracle_degrade(
    hr: &ImageBatch,
    oracle: &OracleDegradation,
    rng_seed: u64,
) -> Result<ImageBatch> {
    oracle_degrade_with_sigmas(hr, oracle, rng_seed).map(|(lr, _)| lr)
}

/// Returns the LR batch and the per-image noise sigma (on the `[0, 1]` scale)
/// that was drawn for each item.
pub fn oracle_degrade_with_sigmas(
    hr: &ImageBatch,
    oracle: &OracleDegradation,
    rng_seed: u64,
) -> Result<(ImageBatch, Vec<f64>)> {
    oracle.validate()?;
    hr.ensure_divisible(oracle.scale)?;
    let (n, c, h, w) = hr.dims();
    let mut t = Separable::downsample(h, w, oracle.scale)?.apply(hr.tensor())?;
    let mut rng = rng::stream(oracle.seed, &[rng::ORACLE, rng_seed]);
    let [lo, hi] = oracle.noise_sigma_range;
    let sigmas: Vec<f64> = (0..n)
        .map(|_| {
            if lo == hi {
                lo / 255.0
            } else {
                rng.random_range(lo..=hi) / 255.0
            }
        })
        .collect();
    let per_image = c * (h / oracle.scale) * (w / oracle.scale);
    for (chunk, &s) in t.data_mut().chunks_mut(per_image).zip(&sigmas) {
        if s == 0.0 {
            continue;
        }
        for v in chunk {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((ImageBatch::from_clamped(t)?, sigmas))
}

impl Degrader for OracleDegradation {
    fn scale(&self) -> usize {
        self.scale
    }

    fn degrade(&self, hr: &ImageBatch, seed: u64) -> Result<ImageBatch> {
        oracle_degrade(hr, self, seed)
    }

    fn label(&self) -> String {
        format!(
            "oracle-sigma{}-{}",
            self.noise_sigma_range[0], self.noise_sigma_range[1]
        )
    }

    fn checksum(&self) -> u64 {
        rng::derive(
            self.seed,
            &[
                self.scale as u64,
                self.noise_sigma_range[0].to_bits(),
                self.noise_sigma_range[1].to_bits(),
            ],
        )
    }
}

/// One image of a corpus, held in memory as a `(1, C, H, W)` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageItem {
    pub id: String,
    pub image: ImageBatch,
}

/// Aligned HR/LR images of the same scene, used only for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub hr: ImageBatch,
    pub lr: ImageBatch,
}

/// Training corpus without correspondences between its two sides.
#[derive(Clone, Debug)]
pub struct UnpairedCorpus {
    pub hr_items: Vec<ImageItem>,
    pub lr_items: Vec<ImageItem>,
    pub patch_size_hr: usize,
    pub scale: usize,
}

impl UnpairedCorpus {
    pub fn new(
        hr_items: Vec<ImageItem>,
        lr_items: Vec<ImageItem>,
        patch_size_hr: usize,
        scale: usize,
    ) -> Result<Self> {
        if scale == 0 || patch_size_hr == 0 || !patch_size_hr.is_multiple_of(scale) {
            return Err(Error::Config(format!(
                "patch_size_hr {patch_size_hr} must be a positive multiple of scale {scale}"
            )));
        }
        let hr_ids: std::collections::HashSet<&str> =
            hr_items.iter().map(|i| i.id.as_str()).collect();
        if let Some(dup) = lr_items.iter().find(|i| hr_ids.contains(i.id.as_str())) {
            return Err(Error::Config(format!(
                "image {} appears on both HR and LR sides of an unpaired corpus",
                dup.id
            )));
        }
        Ok(Self {
            hr_items,
            lr_items,
            patch_size_hr,
            scale,
        })
    }

    pub fn patch_size_lr(&self) -> usize {
        self.patch_size_hr / self.scale
    }
}

fn sample_patches<R: Rng>(
    items: &[ImageItem],
    size: usize,
    batch: usize,
    rng: &mut R,
) -> Result<ImageBatch> {
    if items.is_empty() {
        return Err(Error::Config("cannot sample patches from an empty image set".into()));
    }
    let mut parts = Vec::with_capacity(batch);
    for _ in 0..batch {
        let item = &items[rng.random_range(0..items.len())];
        let (h, w) = item.image.hw();
        if size > h || size > w {
            return Err(Error::Sizing(format!(
                "patch {size} is larger than image {} ({h}x{w})",
                item.id
            )));
        }
        let top = rng.random_range(0..=h - size);
        let left = rng.random_range(0..=w - size);
        parts.push(item.image.crop(0, top, left, size, size)?);
    }
    let refs: Vec<&ImageBatch> = parts.iter().collect();
    ImageBatch::concat(&refs)
}

/// One HR training patch, `(1, C, patch, patch)`.
pub fn sample_hr_patch(corpus: &UnpairedCorpus, rng_seed: u64) -> Result<ImageBatch> {
    sample_hr_batch(corpus, 1, rng_seed)
}

/// `batch` HR patches drawn from one seeded stream; item 0 equals
/// [`sample_hr_patch`] with the same seed.
pub fn sample_hr_batch(corpus: &UnpairedCorpus, batch: usize, rng_seed: u64) -> Result<ImageBatch> {
    let mut rng = rng::stream(rng_seed, &[rng::HR_PATCH]);
    sample_patches(&corpus.hr_items, corpus.patch_size_hr, batch, &mut rng)
}

/// `batch` real-LR patches of side `patch_size_hr / scale`.
pub fn sample_lr_batch(corpus: &UnpairedCorpus, batch: usize, rng_seed: u64) -> Result<ImageBatch> {
    let mut rng = rng::stream(rng_seed, &[rng::LR_PATCH]);
    sample_patches(&corpus.lr_items, corpus.patch_size_lr(), batch, &mut rng)
}

/// Train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios(pub [f64; 3]);

impl Default for SplitRatios {
    fn default() -> Self {
        Self([0.8, 0.1, 0.1])
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.0.iter().sum();
        if self.0.iter().any(|r| !(0.0..=1.0).contains(r)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {:?} must be in [0, 1] and sum to 1",
                self.0
            )));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let exact: Vec<f64> = self.0.iter().map(|r| r * n as f64).collect();
        let mut counts = [0usize; 3];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = (e + 1e-9).floor() as usize;
        }
        let mut left = n.saturating_sub(counts.iter().sum());
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - counts[a] as f64;
            let fb = exact[b] - counts[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub hr: Vec<String>,
    pub lr: Vec<String>,
}

/// JSON manifest naming the files in each split, relative to the corpus root.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: SplitFiles,
    pub val: SplitFiles,
    pub test: SplitFiles,
}

#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub manifest: SplitManifest,
    pub train: UnpairedCorpus,
    pub val: Vec<ImagePair>,
    pub test: Vec<ImagePair>,
}

/// Loads `<root>/hr/*.png` and `<root>/lr/*.png` and splits them by file stem.
///
/// Stems are shuffled with `seed` and apportioned by `ratios`. Inside the
/// training split, a stem present on both sides is assigned to exactly one
/// side (alternating), so the HR and LR training sets never share a scene.
/// Validation and test stems present on both sides become evaluation pairs.
pub fn load_corpus(
    root: &Path,
    ratios: SplitRatios,
    seed: u64,
    patch_size_hr: usize,
    scale: usize,
) -> Result<LoadedCorpus> {
    ratios.validate()?;
    let hr_files = io::list_pngs(&root.join("hr"))?;
    let lr_files = io::list_pngs(&root.join("lr"))?;
    if hr_files.is_empty() && lr_files.is_empty() {
        return Err(Error::Config(format!(
            "{} contains no images under hr/ or lr/",
            root.display()
        )));
    }

    let mut failures = Vec::new();
    let mut load_all = |files: &[PathBuf]| -> BTreeMap<String, ImageBatch> {
        let mut out = BTreeMap::new();
        for f in files {
            match io::read_png(f) {
                Ok(img) => {
                    out.insert(io::stem(f), img);
                }
                Err(e) => failures.push((f.clone(), e.to_string())),
            }
        }
        out
    };
    let hr = load_all(&hr_files);
    let lr = load_all(&lr_files);
    if !failures.is_empty() {
        return Err(Error::Load(failures));
    }

    let mut stems: Vec<String> = hr.keys().chain(lr.keys()).cloned().collect();
    stems.sort();
    stems.dedup();
    stems.shuffle(&mut rng::stream(seed, &[rng::SPLIT]));
    let [n_train, n_val, _] = ratios.counts(stems.len());
    let (train, rest) = stems.split_at(n_train);
    let (val, test) = rest.split_at(n_val);

    let mut manifest = SplitManifest {
        seed,
        ratios: ratios.0,
        ..Default::default()
    };
    let mut hr_items = Vec::new();
    let mut lr_items = Vec::new();
    let mut paired_seen = 0usize;
    for stem in train {
        let side_hr = match (hr.contains_key(stem), lr.contains_key(stem)) {
            (true, true) => {
                paired_seen += 1;
                paired_seen % 2 == 1
            }
            (true, false) => true,
            _ => false,
        };
        if side_hr {
            manifest.train.hr.push(format!("hr/{stem}.png"));
            hr_items.push(ImageItem {
                id: stem.clone(),
                image: hr[stem].clone(),
            });
        } else {
            manifest.train.lr.push(format!("lr/{stem}.png"));
            lr_items.push(ImageItem {
                id: stem.clone(),
                image: lr[stem].clone(),
            });
        }
    }
    let pairs = |stems: &[String], files: &mut SplitFiles| {
        let mut out = Vec::new();
        for stem in stems {
            if hr.contains_key(stem) {
                files.hr.push(format!("hr/{stem}.png"));
            }
            if lr.contains_key(stem) {
                files.lr.push(format!("lr/{stem}.png"));
            }
            if let (Some(h), Some(l)) = (hr.get(stem), lr.get(stem)) {
                out.push(ImagePair {
                    id: stem.clone(),
                    hr: h.clone(),
                    lr: l.clone(),
                });
            }
        }
        out
    };
    let val = pairs(val, &mut manifest.val);
    let test = pairs(test, &mut manifest.test);
    Ok(LoadedCorpus {
        manifest,
        train: UnpairedCorpus::new(hr_items, lr_items, patch_size_hr, scale)?,
        val,
        test,
    })
}

/// Convenience constructor for tests and in-memory experiments.
pub fn items_from(prefix: &str, images: Vec<ImageBatch>) -> Vec<ImageItem> {
    images
        .into_iter()
        .enumerate()
        .map(|(i, image)| ImageItem {
            id: format!("{prefix}{i:04}"),
            image,
        })
        .collect()
}

/// Noise-free and oracle-degraded copies of `hr`, as evaluation pairs.
pub fn oracle_pairs(
    hr: &[ImageItem],
    oracle: &OracleDegradation,
    seed: u64,
) -> Result<Vec<ImagePair>> {
    hr.iter()
        .enumerate()
        .map(|(i, item)| {
            Ok(ImagePair {
                id: item.id.clone(),
                hr: item.image.clone(),
                lr: oracle_degrade(&item.image, oracle, rng::derive(seed, &[i as u64]))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resample;
    use crate::synth;

    #[test]
    fn split_counts_match_examples() {
        assert_eq!(SplitRatios([0.8, 0.1, 0.1]).counts(10), [8, 1, 1]);
        assert_eq!(SplitRatios([0.8, 0.1, 0.1]).counts(50), [40, 5, 5]);
        assert_eq!(SplitRatios([0.7, 0.2, 0.1]).counts(100), [70, 20, 10]);
        assert_eq!(SplitRatios([1.0 / 3.0; 3]).counts(10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn ratios_must_sum_to_one() {
        assert!(SplitRatios([0.5, 0.2, 0.2]).validate().is_err());
    }

    #[test]
    fn oracle_shape_and_zero_noise() {
        let hr = synth::texture(1, 64, 3).unwrap();
        let oracle = OracleDegradation {
            noise_sigma_range: [0.0, 0.0],
            ..Default::default()
        };
        let lr = oracle_degrade(&hr, &oracle, 5).unwrap();
        assert_eq!(lr.dims(), (1, 3, 16, 16));
        assert_eq!(lr, resample::downsample(&hr, 4).unwrap());
    }

    #[test]
    fn oracle_is_reproducible_and_sigma_in_range() {
        let hr = ImageBatch::constant(8, 3, 16, 16, 0.5).unwrap();
        let oracle = OracleDegradation::default();
        let (a, sa) = oracle_degrade_with_sigmas(&hr, &oracle, 9).unwrap();
        let (b, sb) = oracle_degrade_with_sigmas(&hr, &oracle, 9).unwrap();
        assert_eq!(a.tensor().checksum(), b.tensor().checksum());
        assert_eq!(sa, sb);
        assert!(sa.iter().all(|s| (5.0 / 255.0..=25.0 / 255.0).contains(s)));
        let (c, _) = oracle_degrade_with_sigmas(&hr, &oracle, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oracle_rejects_indivisible() {
        let hr = ImageBatch::constant(1, 3, 18, 16, 0.5).unwrap();
        assert!(matches!(
            oracle_degrade(&hr, &OracleDegradation::default(), 0),
            Err(Error::Sizing(_))
        ));
    }

    #[test]
    fn corpus_rejects_shared_ids() {
        let img = ImageBatch::constant(1, 3, 8, 8, 0.5).unwrap();
        let a = items_from("x", vec![img.clone()]);
        assert!(UnpairedCorpus::new(a.clone(), a, 8, 4).is_err());
    }

    #[test]
    fn patch_shape_and_determinism() {
        let hr = items_from("h", (0..2).map(|i| synth::texture(i, 96, 3).unwrap()).collect());
        let corpus = UnpairedCorpus::new(hr, vec![], 64, 4).unwrap();
        let p = sample_hr_patch(&corpus, 3).unwrap();
        assert_eq!(p.dims(), (1, 3, 64, 64));
        assert_eq!(p, sample_hr_patch(&corpus, 3).unwrap());
        let b = sample_hr_batch(&corpus, 4, 3).unwrap();
        assert_eq!(b.item(0).unwrap(), p);
    }

    #[test]
    fn oversized_patch_names_the_image() {
        let hr = items_from("small", vec![ImageBatch::constant(1, 3, 32, 32, 0.5).unwrap()]);
        let corpus = UnpairedCorpus::new(hr, vec![], 64, 4).unwrap();
        match sample_hr_patch(&corpus, 0) {
            Err(Error::Sizing(msg)) => assert!(msg.contains("small0000"), "{msg}"),
            other => panic!("expected sizing error, got {other:?}"),
        }
    }
}
