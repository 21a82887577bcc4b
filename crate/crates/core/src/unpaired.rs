//! Adversarial training of a degradation generator on unpaired HR/LR data,
//! with a fixed-operator cycle constraint that pins image content.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stochsr_tensor::{Adam, AdamConfig, Bound, Graph, ParamStore, Tensor, Var};

use crate::data::{sample_hr_batch, sample_lr_batch, UnpairedCorpus};
use crate::error::{io_err, Divergence, Error, Result};
use crate::generator::{DegradationGenerator, GeneratorEnsemble};
use crate::image::ImageBatch;
use crate::nn::{lrelu, Conv};
use crate::resample::Separable;
use crate::rng;

/// Losses above this (or non-finite) abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

/// Fully convolutional patch critic over LR-sized inputs.
#[derive(Clone, Debug)]
pub struct Discriminator {
    params: ParamStore,
    layers: Vec<Conv>,
}

impl Discriminator {
    /// Kernel sizes of the four layers; stride 1 throughout.
    pub const KERNELS: [usize; 4] = [3, 5, 5, 5];

    pub fn new(channels: usize, width: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, &[rng::DISC]);
        let n = Self::KERNELS.len();
        let layers = Self::KERNELS
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let c_in = if i == 0 { channels } else { width };
                let c_out = if i + 1 == n { 1 } else { width };
                Conv::new(&mut params, &format!("d{i}"), c_in, c_out, k, 1, 1.0, &mut r)
            })
            .collect();
        Self { params, layers }
    }

    pub fn receptive_field() -> usize {
        1 + Self::KERNELS.iter().map(|k| k - 1).sum::<usize>()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = lrelu(g, h);
            }
        }
        Ok(h)
    }

    /// Logit map for a batch, without recording gradients.
    pub fn logits(&self, x: &ImageBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let v = g.constant(x.tensor().clone());
        let out = self.forward(&mut g, &p, v)?;
        Ok(g.value(out).clone())
    }
}

/// Least-squares GAN objectives `(generator, discriminator)`:
/// G minimises `mean((d_fake - 1)^2)`, D minimises
/// `mean((d_real - 1)^2) + mean(d_fake^2)`.
pub fn gan_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<(f64, f64)> {
    d_real.ensure_same_shape(d_fake, "gan_losses")?;
    for (name, t) in [("d_real", d_real), ("d_fake", d_fake)] {
        if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{name} logit {i} of {} is {}",
                t.len(),
                t.data()[i]
            )));
        }
    }
    let msq = |t: &Tensor, target: f64| {
        t.data().iter().map(|v| (v - target) * (v - target)).sum::<f64>() / t.len() as f64
    };
    Ok((msq(d_fake, 1.0), msq(d_real, 1.0) + msq(d_fake, 0.0)))
}

/// Fixed bicubic upsampling followed by a Gaussian blur (std `blur_sigma` in
/// HR pixels), compared against the blurred HR image: only the low-frequency
/// content is constrained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CycleOperator {
    pub scale: usize,
    pub blur_sigma: f64,
}

impl CycleOperator {
    /// Lifts an `h × w` LR image to blurred HR resolution.
    pub fn lift(&self, h: usize, w: usize) -> Result<Separable> {
        let (hh, ww) = (h * self.scale, w * self.scale);
        Separable::gaussian(hh, ww, self.blur_sigma).compose(&Separable::upsample(h, w, self.scale)?)
    }

    pub fn blur(&self, h: usize, w: usize) -> Separable {
        Separable::gaussian(h, w, self.blur_sigma)
    }

    fn check(&self, hr: (usize, usize), lr: (usize, usize)) -> Result<()> {
        if hr.0 != lr.0 * self.scale || hr.1 != lr.1 * self.scale {
            return Err(Error::Sizing(format!(
                "LR {}x{} is not HR {}x{} divided by scale {}",
                lr.0, lr.1, hr.0, hr.1, self.scale
            )));
        }
        Ok(())
    }

    /// Graph form of [`cycle_loss`].
    pub fn loss(&self, g: &mut Graph, hr: Var, lr_fake: Var) -> Result<Var> {
        let (_, _, hh, hw) = g.value(hr).dims4()?;
        let (_, _, lh, lw) = g.value(lr_fake).dims4()?;
        self.check((hh, hw), (lh, lw))?;
        let lift = self.lift(lh, lw)?;
        let blur = self.blur(hh, hw);
        let a = g.separable(lr_fake, lift.rows, lift.cols)?;
        let b = g.separable(hr, blur.rows, blur.cols)?;
        Ok(g.mean_abs_diff(a, b)?)
    }
}

/// `L1(blur(upsample(lr_fake)), blur(hr))`.
pub fn cycle_loss(hr: &ImageBatch, lr_fake: &ImageBatch, op: &CycleOperator) -> Result<f64> {
    let mut g = Graph::new();
    let h = g.constant(hr.tensor().clone());
    let l = g.constant(lr_fake.tensor().clone());
    let v = op.loss(&mut g, h, l)?;
    Ok(g.value(v).data()[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegraderTrainConfig {
    pub adv_weight: f64,
    pub cycle_weight: f64,
    /// Weight of an extra LR-domain term `L1(blur(lr_fake), blur(downsample(hr)))`.
    pub lowpass_weight: f64,
    /// Gaussian std of the low-pass band, in LR pixels (the cycle term blurs
    /// at HR resolution with `lowpass_sigma * scale`).
    pub lowpass_sigma: f64,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Step size multiplier for the noise parameters. Their gradient is zero
    /// in expectation at sigma = 0, so at the base rate they barely leave it
    /// within a short run.
    pub sigma_lr_scale: f64,
    pub batch_size: usize,
    pub disc_width: usize,
    pub seed: u64,
    /// Keeps every noise parameter at its initial value (deterministic arm).
    pub freeze_sigma: bool,
}

impl Default for DegraderTrainConfig {
    fn default() -> Self {
        Self {
            adv_weight: 1.0,
            cycle_weight: 10.0,
            lowpass_weight: 0.0,
            lowpass_sigma: 2.0,
            steps: 2000,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            sigma_lr_scale: 1000.0,
            batch_size: 4,
            disc_width: 16,
            seed: 0,
            freeze_sigma: false,
        }
    }
}

impl DegraderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("adv_weight", self.adv_weight),
            ("cycle_weight", self.cycle_weight),
            ("lowpass_weight", self.lowpass_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("degrader.{name} must be >= 0, got {v}")));
            }
        }
        if !(self.lowpass_sigma > 0.0) {
            return Err(Error::Config("degrader.lowpass_sigma must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.sigma_lr_scale >= 0.0) {
            return Err(Error::Config("degrader step sizes must be positive".into()));
        }
        if self.batch_size == 0 || self.disc_width == 0 {
            return Err(Error::Config(
                "degrader.batch_size and degrader.disc_width must be positive".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Weighted generator objective (adversarial + content terms).
    pub g_loss: f64,
    pub d_loss: f64,
    pub cycle_loss: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Invariant(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Invariant(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Debug)]
pub struct TrainedDegrader {
    pub generator: DegradationGenerator,
    pub discriminator: Discriminator,
    pub log: Vec<LogRow>,
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

fn bad(v: f64) -> bool {
    !v.is_finite() || v.abs() > DIVERGENCE_LIMIT
}

/// Alternating one-D-step/one-G-step LSGAN training with the cycle term.
///
/// Generator and discriminator parameters are checksummed around each
/// other's update; any cross-write is reported as an invariant violation.
pub fn train_degrader(
    mut gen: DegradationGenerator,
    mut disc: Discriminator,
    corpus: &UnpairedCorpus,
    cfg: &DegraderTrainConfig,
) -> Result<TrainedDegrader> {
    cfg.validate()?;
    if corpus.hr_items.is_empty() || corpus.lr_items.is_empty() {
        return Err(Error::Config("degrader training needs HR and LR images".into()));
    }
    if corpus.scale != gen.scale() {
        return Err(Error::Config(format!(
            "corpus scale {} does not match generator scale {}",
            corpus.scale,
            gen.scale()
        )));
    }
    let cycle = CycleOperator {
        scale: gen.scale(),
        blur_sigma: cfg.lowpass_sigma * gen.scale() as f64,
    };
    let noise_ids = gen.noise_param_ids();
    let (mut opt_g, mut opt_sigma) = (
        Adam::new(cfg.adam(cfg.lr), gen.params()),
        Adam::new(cfg.adam(cfg.lr * cfg.sigma_lr_scale), gen.params()),
    );
    let body_ids: Vec<_> = gen.params().ids().filter(|id| !noise_ids.contains(id)).collect();
    let mut opt_d = Adam::new(cfg.adam(cfg.lr), &disc.params);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let hr = sample_hr_batch(corpus, cfg.batch_size, rng::derive(cfg.seed, &[step as u64, 0]))?;
        let real = sample_lr_batch(corpus, cfg.batch_size, rng::derive(cfg.seed, &[step as u64, 1]))?;
        let diverged = |loss: f64, log: Vec<LogRow>, last_good: DegradationGenerator| {
            Error::Diverged(Box::new(Divergence {
                member: None,
                step,
                loss,
                last_good,
                log,
            }))
        };

        // discriminator update against a detached fake
        let g_sum = gen.params().checksum();
        let mut noise = rng::stream(cfg.seed, &[rng::NOISE, step as u64, 0]);
        let mut g = Graph::new();
        let pg = gen.params().bind_frozen(&mut g);
        let hv = g.constant(hr.tensor().clone());
        let fake = gen.forward(&mut g, &pg, hv, &mut noise)?;
        let fake = g.detach(fake);
        let pd = disc.params.bind(&mut g);
        let rv = g.constant(real.tensor().clone());
        let d_real = disc.forward(&mut g, &pd, rv)?;
        let d_fake = disc.forward(&mut g, &pd, fake)?;
        let lr_real = g.mean_square_to(d_real, 1.0);
        let lf = g.mean_square_to(d_fake, 0.0);
        let d_loss_v = g.add(lr_real, lf)?;
        let d_loss = scalar(&g, d_loss_v);
        if bad(d_loss) {
            return Err(diverged(d_loss, log, gen));
        }
        let grads = g.backward(d_loss_v)?;
        opt_d.step(&mut disc.params, &pd, &grads);
        if gen.params().checksum() != g_sum {
            return Err(Error::Invariant("discriminator step modified the generator".into()));
        }

        // generator update through a frozen discriminator
        let d_sum = disc.params.checksum();
        let mut noise = rng::stream(cfg.seed, &[rng::NOISE, step as u64, 1]);
        let mut g = Graph::new();
        let frozen: &[_] = if cfg.freeze_sigma { &noise_ids } else { &[] };
        let pg = gen.params().bind_except(&mut g, frozen);
        let hv = g.constant(hr.tensor().clone());
        let fake = gen.forward(&mut g, &pg, hv, &mut noise)?;
        let pd = disc.params.bind_frozen(&mut g);
        let d_fake = disc.forward(&mut g, &pd, fake)?;
        let adv = g.mean_square_to(d_fake, 1.0);
        let cyc = cycle.loss(&mut g, hv, fake)?;
        let adv_w = g.scale(adv, cfg.adv_weight);
        let cyc_w = g.scale(cyc, cfg.cycle_weight);
        let mut total = g.add(adv_w, cyc_w)?;
        if cfg.lowpass_weight > 0.0 {
            let (_, _, h, w) = hr.dims();
            let s = gen.scale();
            let down = Separable::downsample(h, w, s)?;
            let blur = Separable::gaussian(h / s, w / s, cfg.lowpass_sigma);
            let target = blur.compose(&down)?;
            let t = g.separable(hv, target.rows, target.cols)?;
            let f = g.separable(fake, blur.rows, blur.cols)?;
            let lp = g.mean_abs_diff(f, t)?;
            let lp = g.scale(lp, cfg.lowpass_weight);
            total = g.add(total, lp)?;
        }
        let g_loss = scalar(&g, total);
        if bad(g_loss) {
            return Err(diverged(g_loss, log, gen));
        }
        let last_good = gen.clone();
        let grads = g.backward(total)?;
        opt_g.step_only(gen.params_mut(), &pg, &grads, &body_ids);
        if !cfg.freeze_sigma {
            opt_sigma.step_only(gen.params_mut(), &pg, &grads, &noise_ids);
        }
        if disc.params.checksum() != d_sum {
            return Err(Error::Invariant("generator step modified the discriminator".into()));
        }
        if !gen.params().iter().all(|p| p.tensor.all_finite()) {
            return Err(diverged(f64::NAN, log, last_good));
        }
        log.push(LogRow {
            step,
            g_loss,
            d_loss,
            cycle_loss: scalar(&g, cyc),
        });
    }
    Ok(TrainedDegrader {
        generator: gen,
        discriminator: disc,
        log,
    })
}

/// Trains ensemble member `index` with seed `cfg.seed + index` and a fresh
/// discriminator, as [`train_ensemble`] does.
pub fn train_member(
    gen: DegradationGenerator,
    index: usize,
    corpus: &UnpairedCorpus,
    cfg: &DegraderTrainConfig,
    channels: usize,
) -> Result<TrainedDegrader> {
    let member_cfg = DegraderTrainConfig {
        seed: cfg.seed + index as u64,
        ..cfg.clone()
    };
    let disc = Discriminator::new(channels, cfg.disc_width, member_cfg.seed);
    train_degrader(gen, disc, corpus, &member_cfg)
}

/// Trains every member independently. Member `i` uses seed `cfg.seed + i`
/// and a fresh discriminator.
pub fn train_ensemble(
    ens: GeneratorEnsemble,
    corpus: &UnpairedCorpus,
    cfg: &DegraderTrainConfig,
    channels: usize,
) -> Result<(GeneratorEnsemble, Vec<Vec<LogRow>>)> {
    let mut members = Vec::with_capacity(ens.len());
    let mut logs = Vec::with_capacity(ens.len());
    for (i, gen) in ens.into_members().into_iter().enumerate() {
        match train_member(gen, i, corpus, cfg, channels) {
            Ok(t) => {
                members.push(t.generator);
                logs.push(t.log);
            }
            Err(Error::Diverged(mut d)) => {
                d.member = Some(i);
                return Err(Error::Diverged(d));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((GeneratorEnsemble::new(members)?, logs))
}
