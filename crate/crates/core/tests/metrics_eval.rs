use proptest::prelude::*;
use stochsr::data::*;
use stochsr::degrader::Degrader;
use stochsr::generator::DegradationGenerator;
use stochsr::metrics::*;
use stochsr::robustness::*;
use stochsr::sr::{Bicubic, Restorer};
use stochsr::{rng, synth, ImageBatch, Result};
use stochsr_tensor::Tensor;

fn random_image(seed: u64, c: usize, h: usize, w: usize) -> ImageBatch {
    ImageBatch::new(Tensor::uniform(vec![1, c, h, w], 0.0, 1.0, &mut rng::stream(seed, &[]))).unwrap()
}

fn noisy_copy(a: &ImageBatch, std: f64, seed: u64) -> ImageBatch {
    let n = Tensor::randn(a.tensor().shape().to_vec(), &mut rng::stream(seed, &[]));
    ImageBatch::from_clamped(a.tensor().zip_map(&n, |x, e| x + std * e).unwrap()).unwrap()
}

fn reference_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]).powi(2);
    }
    let mse = se / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

// direct 2-D window sums, no separability and no moment shortcuts
fn reference_ssim(a: &ImageBatch, b: &ImageBatch) -> f64 {
    let (_, c, h, w) = a.dims();
    let mut g = [[0.0f64; 11]; 11];
    let mut z = 0.0;
    for (dy, row) in g.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let r2 = (dy as f64 - 5.0).powi(2) + (dx as f64 - 5.0).powi(2);
            *v = (-r2 / (2.0 * 1.5 * 1.5)).exp();
            z += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let at = |img: &ImageBatch, ch: usize, y: usize, x: usize| img.tensor().data()[(ch * h + y) * w + x];
    let mut total = 0.0;
    let mut count = 0.0;
    for ch in 0..c {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wgt = g[dy][dx] / z;
                        ma += wgt * at(a, ch, y0 + dy, x0 + dx);
                        mb += wgt * at(b, ch, y0 + dy, x0 + dx);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wgt = g[dy][dx] / z;
                        let (p, q) = (at(a, ch, y0 + dy, x0 + dx) - ma, at(b, ch, y0 + dy, x0 + dx) - mb);
                        va += wgt * p * p;
                        vb += wgt * q * q;
                        cov += wgt * p * q;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

#[test]
fn psnr_examples() {
    let a = random_image(1, 3, 8, 8);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), vec![f64::INFINITY]);
    let flat = ImageBatch::constant(1, 3, 8, 8, 0.4).unwrap();
    let off = ImageBatch::constant(1, 3, 8, 8, 0.4 + 16.0 / 255.0).unwrap();
    let closed = 20.0 * (255.0f64 / 16.0).log10();
    assert!((psnr(&flat, &off, 1.0).unwrap()[0] - closed).abs() < 1e-6);
    assert!((closed - 24.05).abs() < 0.005);
    let b = random_image(2, 3, 8, 8);
    assert!((psnr(&a, &b, 1.0).unwrap()[0] - reference_psnr(a.tensor().data(), b.tensor().data())).abs() < 1e-9);
    assert!(psnr(&a, &random_image(3, 3, 8, 9), 1.0).is_err());
}

#[test]
fn ssim_examples() {
    let a = random_image(4, 3, 16, 16);
    assert_eq!(ssim(&a, &a).unwrap(), vec![1.0]);
    let b = random_image(5, 3, 16, 16);
    assert!((ssim(&a, &b).unwrap()[0] - ssim(&b, &a).unwrap()[0]).abs() < 1e-12);
    let flat = ImageBatch::constant(1, 3, 24, 24, 0.5).unwrap();
    let n = noisy_copy(&flat, 0.01, 6);
    let s = ssim(&flat, &n).unwrap()[0];
    assert!(s > 0.9 && s < 1.0, "{s}");
    assert!((s - reference_ssim(&flat, &n)).abs() < 1e-6);
    assert!(ssim(&random_image(1, 1, 10, 16), &random_image(2, 1, 10, 16)).is_err());
}

#[test]
fn metrics_agree_with_references_on_random_pairs() {
    for k in 0..100 {
        let a = random_image(1000 + k, 3, 16, 16);
        let b = if k % 2 == 0 { random_image(2000 + k, 3, 16, 16) } else { noisy_copy(&a, 0.05, k) };
        let p = psnr(&a, &b, 1.0).unwrap()[0];
        assert!((p - reference_psnr(a.tensor().data(), b.tensor().data())).abs() < 1e-6);
        let s = ssim(&a, &b).unwrap()[0];
        assert!((s - reference_ssim(&a, &b)).abs() < 1e-6, "pair {k}: {s}");
        assert!((-1.0..=1.0).contains(&s));
    }
}

#[test]
fn report_aggregate_is_the_mean_of_entries() {
    let preds: Vec<_> = (0..4).map(|i| random_image(i, 3, 16, 16)).collect();
    let targets: Vec<_> = (0..4).map(|i| noisy_copy(&preds[i as usize], 0.02, i)).collect();
    let ids: Vec<String> = (0..4).map(|i| format!("img{i}")).collect();
    let r = MetricReport::score(&ids, &preds, &targets, ReportMeta::default()).unwrap();
    let mean = r.per_image.iter().map(|s| s.psnr).sum::<f64>() / 4.0;
    assert_eq!(r.aggregate.psnr, mean);
    let back: MetricReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

fn fidelity_hr() -> Vec<ImageBatch> {
    (0..8).map(|i| synth::texture(500 + i, 128, 3).unwrap()).collect()
}

struct OracleSampler(OracleDegradation);

impl Degrader for OracleSampler {
    fn scale(&self) -> usize {
        self.0.scale
    }
    fn degrade(&self, hr: &ImageBatch, seed: u64) -> Result<ImageBatch> {
        oracle_degrade(hr, &self.0, seed)
    }
    fn label(&self) -> String {
        "oracle".into()
    }
    fn checksum(&self) -> u64 {
        0
    }
}

#[test]
fn deterministic_generator_is_far_from_the_oracle() {
    let oracle = OracleDegradation::default();
    let gen = DegradationGenerator::linear_probe(3, 4, 0.0).unwrap();
    let r = degrader_fidelity(&gen, &oracle, &fidelity_hr(), 200, 1).unwrap();
    assert!(r.generator_sigmas.iter().all(|&s| s < 1e-12));
    assert!(r.wasserstein >= oracle.mean_sigma() * 0.95, "{} vs {}", r.wasserstein, oracle.mean_sigma());
}

#[test]
fn exact_sampler_matches_the_self_distance() {
    let oracle = OracleDegradation::default();
    let hr = fidelity_hr();
    let self_distance = degrader_fidelity(&OracleSampler(oracle.clone()), &oracle, &hr, 500, 2).unwrap().wasserstein;
    assert!(self_distance < 2.0 / 255.0, "{}", self_distance * 255.0);
    let sampler = degrader_fidelity(&OracleSampler(oracle.clone()), &oracle, &hr, 500, 3).unwrap().wasserstein;
    assert!(sampler <= 2.0 * self_distance, "{} vs {}", sampler * 255.0, self_distance * 255.0);
    assert!(degrader_fidelity(&OracleSampler(oracle.clone()), &oracle, &hr, 99, 0).is_err());
}

struct Identity;

impl Restorer for Identity {
    fn scale(&self) -> usize {
        1
    }
    fn restore(&self, lr: &ImageBatch) -> Result<ImageBatch> {
        Ok(lr.clone())
    }
    fn label(&self) -> String {
        "identity".into()
    }
}

#[test]
fn identity_sweep_follows_closed_form_noise_psnr() {
    let flat = ImageBatch::constant(1, 3, 64, 64, 0.5).unwrap();
    let pairs: Vec<_> = (0..4).map(|i| ImagePair { id: format!("f{i}"), hr: flat.clone(), lr: flat.clone() }).collect();
    let grid = [0.0, 5.0, 10.0, 15.0, 20.0];
    let c = robustness_sweep(&Identity, &pairs, &grid, 7).unwrap();
    assert_eq!(c.psnr_at_sigma[0], f64::INFINITY);
    for (s, p) in grid.iter().zip(&c.psnr_at_sigma).skip(1) {
        let closed = 20.0 * (255.0 / s).log10();
        assert!((p - closed).abs() < 0.2, "sigma {s}: {p} vs {closed}");
    }
    assert_eq!(c, robustness_sweep(&Identity, &pairs, &grid, 7).unwrap());
    assert!(robustness_sweep(&Identity, &pairs, &[], 7).is_err());
    assert!(robustness_sweep(&Identity, &pairs, &[5.0, 5.0], 7).is_err());
}

#[test]
fn bicubic_sweep_is_nonincreasing_and_zero_entry_is_plain_evaluation() {
    let hr = (0..4).map(|i| synth::texture(300 + i, 64, 3).unwrap()).collect();
    let pairs = oracle_pairs(&items_from("t", hr), &OracleDegradation::default(), 0).unwrap();
    let bic = Bicubic { scale: 4 };
    let c = robustness_sweep(&bic, &pairs, &[0.0, 5.0, 10.0, 15.0, 20.0], 0).unwrap();
    for w in c.psnr_at_sigma.windows(2) {
        assert!(w[1] <= w[0] + 0.1, "{:?}", c.psnr_at_sigma);
    }
    let plain = pairs
        .iter()
        .map(|p| psnr(&bic.restore(&p.lr).unwrap(), &p.hr, 1.0).unwrap()[0])
        .sum::<f64>()
        / pairs.len() as f64;
    assert_eq!(c.psnr_at_sigma[0], plain);
}

#[test]
fn curves_round_trip_through_json_and_plot() {
    let c = RobustnessCurve {
        label: "m".into(),
        sigma_grid: vec![0.0, 10.0],
        psnr_at_sigma: vec![f64::INFINITY, 27.125],
        ssim_at_sigma: vec![1.0, 0.75],
    };
    let back: RobustnessCurve = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plot.png");
    plot_curves(&path, &[c]).unwrap();
    assert!(std::fs::metadata(&path).unwrap().len() > 0);
}

proptest! {
    #[test]
    fn wasserstein_is_a_proper_distance_on_samples(
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        b in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let d = wasserstein1(&a, &b).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - wasserstein1(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        if sa != sb && a.len() == b.len() {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn shifting_a_sample_moves_w1_by_the_shift(a in prop::collection::vec(0.0f64..1.0, 1..30), t in 0.0f64..2.0) {
        let b: Vec<f64> = a.iter().map(|v| v + t).collect();
        prop_assert!((wasserstein1(&a, &b).unwrap() - t).abs() < 1e-9);
    }
}
