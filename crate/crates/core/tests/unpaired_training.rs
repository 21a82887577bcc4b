use std::sync::OnceLock;

use stochsr::data::*;
use stochsr::generator::*;
use stochsr::metrics::estimate_noise;
use stochsr::unpaired::*;
use stochsr::{resample, rng, synth, Error, ImageBatch};
use stochsr_tensor::Tensor;

const PATCH: usize = 32;

fn oracle_corpus(seed: u64) -> UnpairedCorpus {
    let oracle = OracleDegradation::default();
    let hr: Vec<_> = (0..8).map(|i| synth::texture(seed * 100 + i, 64, 3).unwrap()).collect();
    let lr: Vec<_> = (8..16)
        .map(|i| oracle_degrade(&synth::texture(seed * 100 + i, 64, 3).unwrap(), &oracle, i).unwrap())
        .collect();
    UnpairedCorpus::new(items_from("hr", hr), items_from("lr", lr), PATCH, 4).unwrap()
}

fn cfg(steps: usize) -> DegraderTrainConfig {
    DegraderTrainConfig {
        steps,
        seed: 3,
        ..Default::default()
    }
}

fn small(descriptor: &str) -> DegradationGenerator {
    build_ensemble(&[descriptor], 3, 4, 1).unwrap().into_members().remove(0)
}

fn random_logits(seed: u64) -> Tensor {
    Tensor::randn(vec![1, 1, 3, 3], &mut rng::stream(seed, &[]))
}

#[test]
fn lsgan_examples_and_hand_computed_oracle() {
    let ones = Tensor::ones(vec![1, 1, 4, 4]);
    let zeros = Tensor::zeros(vec![1, 1, 4, 4]);
    assert_eq!(gan_losses(&ones, &zeros).unwrap(), (1.0, 0.0));
    assert_eq!(gan_losses(&zeros, &ones).unwrap().0, 0.0);
    for seed in 0..10 {
        let (r, f) = (random_logits(seed), random_logits(seed + 100));
        let (mut g, mut d) = (0.0, 0.0);
        for i in 0..9 {
            let (a, b) = (r.data()[i], f.data()[i]);
            g += (b - 1.0) * (b - 1.0);
            d += (a - 1.0) * (a - 1.0) + b * b;
        }
        let (gl, dl) = gan_losses(&r, &f).unwrap();
        assert!((gl - g / 9.0).abs() < 1e-12 && (dl - d / 9.0).abs() < 1e-12);
    }
    let inf = Tensor::full(vec![1, 1, 3, 3], f64::INFINITY);
    assert!(matches!(gan_losses(&inf, &random_logits(0)), Err(Error::Numeric(_))));
}

#[test]
fn cycle_loss_examples() {
    let op = CycleOperator {
        scale: 4,
        blur_sigma: 8.0,
    };
    let flat = ImageBatch::constant(1, 3, 32, 32, 0.5).unwrap();
    assert!(cycle_loss(&flat, &resample::downsample(&flat, 4).unwrap(), &op).unwrap() < 1e-12);
    let lr = ImageBatch::constant(1, 3, 8, 8, 0.7).unwrap();
    assert!((cycle_loss(&flat, &lr, &op).unwrap() - 0.2).abs() < 1e-12);

    let hr = synth::texture(2, 64, 3).unwrap();
    let oracle = OracleDegradation {
        noise_sigma_range: [20.0, 20.0],
        ..Default::default()
    };
    let degraded = oracle_degrade(&hr, &oracle, 0).unwrap();
    let unrelated = resample::downsample(&synth::texture(3, 64, 3).unwrap(), 4).unwrap();
    assert!(cycle_loss(&hr, &degraded, &op).unwrap() < cycle_loss(&hr, &unrelated, &op).unwrap());
}

#[test]
fn zero_steps_returns_the_initial_generator() {
    let gen = small("residual-chain:width=8");
    let before = gen.params().checksum();
    let t = train_degrader(gen, Discriminator::new(3, 8, 0), &oracle_corpus(0), &cfg(0)).unwrap();
    assert_eq!(t.generator.params().checksum(), before);
    assert!(t.log.is_empty());
}

#[test]
fn same_seed_same_log_and_checksum() {
    let run = || {
        train_degrader(small("attention-strided:width=8"), Discriminator::new(3, 8, 0), &oracle_corpus(0), &cfg(30))
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.generator.params().checksum(), b.generator.params().checksum());
    assert_eq!(a.discriminator.params().checksum(), b.discriminator.params().checksum());
}

#[test]
fn single_member_ensemble_matches_train_degrader() {
    let corpus = oracle_corpus(0);
    let c = cfg(20);
    let ens = GeneratorEnsemble::new(vec![small("residual-chain:width=8")]).unwrap();
    let (trained, logs) = train_ensemble(ens, &corpus, &c, 3).unwrap();
    let direct = train_degrader(small("residual-chain:width=8"), Discriminator::new(3, c.disc_width, c.seed), &corpus, &c)
        .unwrap();
    assert_eq!(logs[0], direct.log);
    assert_eq!(trained.checksums()[0], direct.generator.params().checksum());
}

#[test]
fn corpus_sides_must_be_populated() {
    let mut corpus = oracle_corpus(0);
    corpus.lr_items.clear();
    let e = train_degrader(small("residual-chain:width=8"), Discriminator::new(3, 8, 0), &corpus, &cfg(1)).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
}

struct Trained {
    ensemble: GeneratorEnsemble,
    logs: Vec<Vec<LogRow>>,
}

// both families trained once for 2k steps and shared by the tests below
fn trained_pair() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let ens = build_ensemble(&["residual-chain:width=8", "attention-strided:width=16"], 3, 4, 0).unwrap();
        let (ensemble, logs) = train_ensemble(ens, &oracle_corpus(0), &cfg(2000), 3).unwrap();
        Trained { ensemble, logs }
    })
}

fn first_and_last_tenth(log: &[LogRow], f: impl Fn(&LogRow) -> f64) -> (f64, f64) {
    let tenth = log.len() / 10;
    let mean = |rows: &[LogRow]| rows.iter().map(&f).sum::<f64>() / rows.len() as f64;
    (mean(&log[..tenth]), mean(&log[log.len() - tenth..]))
}

#[test]
#[ignore = "the LSGAN generator term rises as the discriminator sharpens"]
fn generator_loss_decreases_over_training() {
    for (i, log) in trained_pair().logs.iter().enumerate() {
        let (first, last) = first_and_last_tenth(log, |r| r.g_loss);
        assert!(last < first, "member {i}: first {first} last {last}");
    }
}

#[test]
fn discriminator_loss_decreases_over_training() {
    for (i, log) in trained_pair().logs.iter().enumerate() {
        let (first, last) = first_and_last_tenth(log, |r| r.d_loss);
        assert!(last < first, "member {i}: first {first} last {last}");
        assert!(log.iter().all(|r| r.g_loss.is_finite() && r.cycle_loss < 0.05), "member {i}");
    }
}

fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut d: f64 = 0.0;
    for &x in a.iter().chain(&b) {
        let fa = a.partition_point(|&v| v <= x) as f64 / a.len() as f64;
        let fb = b.partition_point(|&v| v <= x) as f64 / b.len() as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

#[test]
fn distinct_families_learn_distinct_noise_levels() {
    let members = trained_pair().ensemble.members();
    let hr: Vec<_> = (0..20).map(|i| synth::texture(900 + i, 64, 3).unwrap()).collect();
    let clean: Vec<_> = hr.iter().map(|h| resample::downsample(h, 4).unwrap()).collect();
    let sigmas = |g: &DegradationGenerator| -> Vec<f64> {
        (0..200)
            .map(|k| {
                let out = g.degrade(&hr[k % 20], k as u64).unwrap();
                estimate_noise(&out, &clean[k % 20], 0).unwrap().sigma
            })
            .collect()
    };
    let (a, b) = (sigmas(&members[0]), sigmas(&members[1]));
    // two-sample critical value at alpha 0.05 for n = m = 200
    let critical = 1.358 * (2.0f64 / 200.0).sqrt();
    let d = ks_statistic(&a, &b);
    assert!(d > critical, "KS {d} <= {critical}");
}

#[test]
fn ensemble_rerun_is_bit_identical() {
    let ens = || build_ensemble(&["residual-chain:width=8", "attention-strided:width=8"], 3, 4, 0).unwrap();
    let corpus = oracle_corpus(1);
    let (a, la) = train_ensemble(ens(), &corpus, &cfg(15), 3).unwrap();
    let (b, lb) = train_ensemble(ens(), &corpus, &cfg(15), 3).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.checksums(), b.checksums());
}

#[test]
fn cycle_only_training_halves_the_held_out_cycle_loss() {
    let c = DegraderTrainConfig {
        adv_weight: 0.0,
        ..cfg(1000)
    };
    let op = CycleOperator {
        scale: 4,
        blur_sigma: c.lowpass_sigma * 4.0,
    };
    let held_out = synth::texture(777, PATCH, 3).unwrap();
    let gen = small("residual-chain:width=8");
    let before = cycle_loss(&held_out, &gen.degrade(&held_out, 0).unwrap(), &op).unwrap();
    let t = train_degrader(gen, Discriminator::new(3, 8, 0), &oracle_corpus(2), &c).unwrap();
    let after = cycle_loss(&held_out, &t.generator.degrade(&held_out, 0).unwrap(), &op).unwrap();
    assert!(after <= 0.5 * before, "cycle loss {before} -> {after}");
}
