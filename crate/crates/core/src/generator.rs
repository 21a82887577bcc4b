//! Probabilistic HR→LR generators: deterministic feature blocks with a
//! learned Gaussian noise injection after each one.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use stochsr_tensor::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

use crate::degrader::Degrader;
use crate::error::{io_err, Error, Result};
use crate::image::ImageBatch;
use crate::nn::{lrelu, ChannelAttention, Conv, ResidualBranch};
use crate::resample::Separable;
use crate::rng;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Stem conv, residual blocks at HR resolution, strided convs, head.
    ResidualChain,
    /// Strided convs first, then residual blocks with channel attention at LR
    /// resolution, head.
    AttentionStrided,
    /// Bicubic decimation, one injection site, identity head. Has a closed-form
    /// output distribution and is used for calibration checks.
    LinearProbe,
}

impl Family {
    /// Families accepted in architecture descriptors.
    pub const BUILDABLE: [Family; 2] = [Family::ResidualChain, Family::AttentionStrided];

    pub fn name(self) -> &'static str {
        match self {
            Family::ResidualChain => "residual-chain",
            Family::AttentionStrided => "attention-strided",
            Family::LinearProbe => "linear-probe",
        }
    }

    fn default_blocks(self) -> usize {
        match self {
            Family::ResidualChain => 4,
            Family::AttentionStrided => 3,
            Family::LinearProbe => 1,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::BUILDABLE
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| {
                let valid: Vec<_> = Family::BUILDABLE.iter().map(|f| f.name()).collect();
                Error::Config(format!(
                    "unknown generator family `{s}`; valid families: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// One learned sigma per channel, independent of the input.
    #[default]
    SharedSpatial,
    /// Sigma predicted per pixel by a zero-initialised 1×1 conv.
    InputDependent,
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "shared-spatial" => Ok(NoiseMode::SharedSpatial),
            "input-dependent" => Ok(NoiseMode::InputDependent),
            other => Err(Error::Config(format!(
                "unknown noise mode `{other}`; valid modes: shared-spatial, input-dependent"
            ))),
        }
    }
}

/// Everything needed to rebuild a generator's parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    pub width: usize,
    pub blocks: usize,
    pub noise: NoiseMode,
    pub channels: usize,
    pub scale: usize,
    pub seed: u64,
}

impl ArchSpec {
    pub fn new(family: Family, channels: usize, scale: usize, seed: u64) -> Self {
        Self {
            family,
            width: 16,
            blocks: family.default_blocks(),
            noise: NoiseMode::SharedSpatial,
            channels,
            scale,
            seed,
        }
    }

    /// Parses `family[:key=value,...]` with keys `width`, `blocks`, `seed`
    /// and `noise`. Unset keys keep the values from [`ArchSpec::new`].
    pub fn parse(descriptor: &str, channels: usize, scale: usize, seed: u64) -> Result<Self> {
        let (family, opts) = match descriptor.split_once(':') {
            Some((f, o)) => (f, o),
            None => (descriptor, ""),
        };
        let mut spec = ArchSpec::new(family.parse()?, channels, scale, seed);
        for kv in opts.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Error::Config(format!("descriptor option `{kv}` in `{descriptor}` is not key=value"))
            })?;
            let num = |v: &str| {
                v.trim().parse::<u64>().map_err(|_| {
                    Error::Config(format!("descriptor `{descriptor}`: `{k}` must be an integer"))
                })
            };
            match k.trim() {
                "width" => spec.width = num(v)? as usize,
                "blocks" => spec.blocks = num(v)? as usize,
                "seed" => spec.seed = num(v)?,
                "noise" => spec.noise = v.parse()?,
                other => {
                    return Err(Error::Config(format!(
                        "descriptor `{descriptor}`: unknown option `{other}` (width, blocks, seed, noise)"
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::Config(format!(
                "generator scale must be 2 or 4, got {}",
                self.scale
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "generator channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.blocks == 0 || self.width == 0 {
            return Err(Error::Config(
                "generator needs at least one block and a positive width".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum SigmaSource {
    Shared(ParamId),
    Predicted(Conv),
}

/// One noise site: `x + sigma ⊙ ε` with `ε ~ N(0, I)`.
#[derive(Clone, Debug)]
pub struct NoiseInjection {
    pub name: String,
    pub mode: NoiseMode,
    pub channels: usize,
    pub sigma: SigmaSource,
}

impl NoiseInjection {
    fn new(store: &mut ParamStore, name: String, mode: NoiseMode, channels: usize) -> Self {
        let sigma = match mode {
            NoiseMode::SharedSpatial => {
                SigmaSource::Shared(store.add(format!("{name}.sigma"), Tensor::zeros(vec![channels])))
            }
            NoiseMode::InputDependent => {
                SigmaSource::Predicted(Conv::zeros(store, &format!("{name}.sigma"), channels, channels, 1))
            }
        };
        Self {
            name,
            mode,
            channels,
            sigma,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.sigma {
            SigmaSource::Shared(id) => vec![*id],
            SigmaSource::Predicted(c) => c.param_ids().to_vec(),
        }
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "noise site `{}` expects {} channels, features have shape {shape:?}",
                self.name, self.channels
            )));
        }
        Ok(())
    }

    /// Records the injection on `g`, drawing `ε` from `rng`.
    pub fn forward<R: Rng>(&self, g: &mut Graph, p: &Bound, x: Var, rng: &mut R) -> Result<Var> {
        self.check(g.value(x).shape())?;
        let eps = Tensor::randn(g.value(x).shape().to_vec(), rng);
        match &self.sigma {
            SigmaSource::Shared(id) => Ok(g.inject(x, p[*id], eps)?),
            SigmaSource::Predicted(conv) => {
                let s = conv.forward(g, p, x)?;
                let e = g.constant(eps);
                let n = g.mul(s, e)?;
                Ok(g.add(x, n)?)
            }
        }
    }
}

/// Standalone injection on a feature tensor with a seeded `ε`.
pub fn inject_noise(
    features: &Tensor,
    layer: &NoiseInjection,
    params: &ParamStore,
    rng_seed: u64,
) -> Result<Tensor> {
    layer.check(features.shape())?;
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(features.clone());
    let mut r = rng::stream(rng_seed, &[rng::NOISE]);
    let y = layer.forward(&mut g, &p, x, &mut r)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug)]
enum Body {
    ResidualChain {
        stem: Conv,
        blocks: Vec<ResidualBranch>,
        down: Vec<Conv>,
        head: Conv,
    },
    AttentionStrided {
        down: Vec<Conv>,
        blocks: Vec<(ResidualBranch, ChannelAttention)>,
        head: Conv,
    },
    LinearProbe,
}

#[derive(Clone, Debug)]
pub struct DegradationGenerator {
    arch_id: String,
    spec: ArchSpec,
    params: ParamStore,
    body: Body,
    injections: Vec<NoiseInjection>,
}

impl DegradationGenerator {
    pub fn new(arch_id: impl Into<String>, spec: ArchSpec) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(spec.seed, &[rng::INIT]);
        let (w, c) = (spec.width, spec.channels);
        let n_down = spec.scale.trailing_zeros() as usize;
        let mut injections = Vec::new();
        let mut site = |store: &mut ParamStore, i: usize, ch: usize| {
            injections.push(NoiseInjection::new(store, format!("noise{i}"), spec.noise, ch));
        };
        let body = match spec.family {
            Family::ResidualChain => {
                let stem = Conv::new(&mut store, "stem", c, w, 3, 1, 1.0, &mut r);
                let mut blocks = Vec::new();
                for i in 0..spec.blocks {
                    blocks.push(ResidualBranch::new(&mut store, &format!("block{i}"), w, &mut r));
                    site(&mut store, i, w);
                }
                let down = (0..n_down)
                    .map(|i| Conv::new(&mut store, &format!("down{i}"), w, w, 3, 2, 1.0, &mut r))
                    .collect();
                let head = Conv::new(&mut store, "head", w, c, 3, 1, 0.1, &mut r);
                Body::ResidualChain {
                    stem,
                    blocks,
                    down,
                    head,
                }
            }
            Family::AttentionStrided => {
                // two strided convs up front; at scale 2 the second keeps resolution
                let down = (0..2)
                    .map(|i| {
                        let c_in = if i == 0 { c } else { w };
                        let stride = if i < n_down { 2 } else { 1 };
                        Conv::new(&mut store, &format!("down{i}"), c_in, w, 3, stride, 1.0, &mut r)
                    })
                    .collect();
                let mut blocks = Vec::new();
                for i in 0..spec.blocks {
                    let b = ResidualBranch::new(&mut store, &format!("block{i}"), w, &mut r);
                    let a = ChannelAttention::new(&mut store, &format!("block{i}.attn"), w, &mut r);
                    blocks.push((b, a));
                    site(&mut store, i, w);
                }
                let head = Conv::new(&mut store, "head", w, c, 3, 1, 0.1, &mut r);
                Body::AttentionStrided { down, blocks, head }
            }
            Family::LinearProbe => {
                site(&mut store, 0, c);
                Body::LinearProbe
            }
        };
        Ok(Self {
            arch_id: arch_id.into(),
            spec,
            params: store,
            body,
            injections,
        })
    }

    /// Probe generator whose single site already carries `sigma` on every channel.
    pub fn linear_probe(channels: usize, scale: usize, sigma: f64) -> Result<Self> {
        let mut spec = ArchSpec::new(Family::LinearProbe, channels, scale, 0);
        spec.width = channels;
        let mut g = Self::new("linear-probe", spec)?;
        g.set_sigma(sigma);
        Ok(g)
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn injections(&self) -> &[NoiseInjection] {
        &self.injections
    }

    pub fn scale(&self) -> usize {
        self.spec.scale
    }

    /// Parameters that control the noise scale (sigma vectors or sigma heads).
    pub fn noise_param_ids(&self) -> Vec<ParamId> {
        self.injections.iter().flat_map(NoiseInjection::param_ids).collect()
    }

    /// Sets every shared sigma entry to `value`; predicted sigma heads get it
    /// as a constant bias with zero weights.
    pub fn set_sigma(&mut self, value: f64) {
        for inj in &self.injections {
            match &inj.sigma {
                SigmaSource::Shared(id) => {
                    self.params.get_mut(*id).data_mut().fill(value);
                }
                SigmaSource::Predicted(conv) => {
                    self.params.get_mut(conv.weight).data_mut().fill(0.0);
                    self.params.get_mut(conv.bias).data_mut().fill(value);
                }
            }
        }
    }

    /// Largest absolute shared sigma entry (0 for input-dependent sites).
    pub fn max_sigma(&self) -> f64 {
        self.injections
            .iter()
            .filter_map(|inj| match inj.sigma {
                SigmaSource::Shared(id) => Some(self.params.get(id).data().iter().fold(0.0f64, |m, v| m.max(v.abs()))),
                SigmaSource::Predicted(_) => None,
            })
            .fold(0.0, f64::max)
    }

    /// Records one ancestral sample on `g`. `hr` is `(N, C, H, W)` with `H`
    /// and `W` divisible by the scale; the result is clamped to `[0, 1]`.
    pub fn forward<R: Rng>(&self, g: &mut Graph, p: &Bound, hr: Var, rng: &mut R) -> Result<Var> {
        let (_, c, h, w) = g.value(hr).dims4()?;
        if c != self.spec.channels {
            return Err(Error::Shape(format!(
                "generator {} expects {} channels, got {c}",
                self.arch_id, self.spec.channels
            )));
        }
        let s = self.spec.scale;
        if h % s != 0 || w % s != 0 {
            return Err(Error::Sizing(format!(
                "input {h}x{w} is not divisible by scale {s}"
            )));
        }
        let down = Separable::downsample(h, w, s)?;
        let skip = g.separable(hr, down.rows.clone(), down.cols.clone())?;
        let residual = match &self.body {
            Body::ResidualChain {
                stem,
                blocks,
                down,
                head,
            } => {
                let mut x = stem.forward(g, p, hr)?;
                x = lrelu(g, x);
                for (b, inj) in blocks.iter().zip(&self.injections) {
                    let r = b.forward(g, p, x)?;
                    x = g.add(x, r)?;
                    x = inj.forward(g, p, x, rng)?;
                }
                for d in down {
                    x = d.forward(g, p, x)?;
                    x = lrelu(g, x);
                }
                Some(head.forward(g, p, x)?)
            }
            Body::AttentionStrided { down, blocks, head } => {
                let mut x = hr;
                for d in down {
                    x = d.forward(g, p, x)?;
                    x = lrelu(g, x);
                }
                for ((b, a), inj) in blocks.iter().zip(&self.injections) {
                    let r = b.forward(g, p, x)?;
                    let r = a.forward(g, p, r)?;
                    x = g.add(x, r)?;
                    x = inj.forward(g, p, x, rng)?;
                }
                Some(head.forward(g, p, x)?)
            }
            Body::LinearProbe => None,
        };
        let out = match residual {
            Some(r) => g.add(skip, r)?,
            None => self.injections[0].forward(g, p, skip, rng)?,
        };
        Ok(g.clamp(out, 0.0, 1.0))
    }

    /// One seeded sample from the generator's LR distribution for each image.
    pub fn degrade(&self, hr: &ImageBatch, rng_seed: u64) -> Result<ImageBatch> {
        hr.ensure_divisible(self.spec.scale)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(hr.tensor().clone());
        let mut r = rng::stream(rng_seed, &[rng::NOISE]);
        let y = self.forward(&mut g, &p, x, &mut r)?;
        ImageBatch::from_clamped(g.value(y).clone())
    }

    /// Monte-Carlo mean and per-pixel sample standard deviation over
    /// `n_samples` seeded draws.
    pub fn degrade_expected(
        &self,
        hr: &ImageBatch,
        n_samples: usize,
        rng_seed: u64,
    ) -> Result<(ImageBatch, Tensor)> {
        if n_samples < 2 {
            return Err(Error::Argument(format!(
                "degrade_expected needs at least 2 samples, got {n_samples}"
            )));
        }
        let mut mean: Option<Tensor> = None;
        let mut m2: Option<Tensor> = None;
        for k in 0..n_samples {
            let x = self.degrade(hr, rng::derive(rng_seed, &[k as u64]))?.into_tensor();
            match (&mut mean, &mut m2) {
                (Some(mu), Some(m2)) => {
                    let kf = (k + 1) as f64;
                    for ((m, s), v) in mu.data_mut().iter_mut().zip(m2.data_mut()).zip(x.data()) {
                        let delta = v - *m;
                        *m += delta / kf;
                        *s += delta * (v - *m);
                    }
                }
                _ => {
                    m2 = Some(Tensor::zeros(x.shape().to_vec()));
                    mean = Some(x);
                }
            }
        }
        let mean = mean.expect("n_samples >= 2");
        let std = m2
            .expect("n_samples >= 2")
            .map(|s| (s / (n_samples - 1) as f64).sqrt());
        Ok((ImageBatch::from_clamped(mean)?, std))
    }

    pub fn to_checkpoint(&self, lineage_hash: Option<String>) -> GeneratorCheckpoint {
        GeneratorCheckpoint {
            format_version: CHECKPOINT_VERSION,
            kind: "degradation-generator".into(),
            arch_id: self.arch_id.clone(),
            scale: self.spec.scale,
            arch: self.spec.clone(),
            lineage_hash,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: GeneratorCheckpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_VERSION || ck.kind != "degradation-generator" {
            return Err(Error::Stale(format!(
                "checkpoint {} has kind `{}` version {}, expected degradation-generator version {CHECKPOINT_VERSION}",
                ck.arch_id, ck.kind, ck.format_version
            )));
        }
        if ck.scale != ck.arch.scale {
            return Err(Error::Invariant(format!(
                "checkpoint {} records scale {} but its architecture has {}",
                ck.arch_id, ck.scale, ck.arch.scale
            )));
        }
        let mut gen = Self::new(ck.arch_id, ck.arch)?;
        gen.params.copy_from(&ck.params)?;
        Ok(gen)
    }

    pub fn save(&self, path: &Path, lineage_hash: Option<String>) -> Result<()> {
        write_json(path, &self.to_checkpoint(lineage_hash))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        let ck: GeneratorCheckpoint = read_json(path)?;
        let lineage = ck.lineage_hash.clone();
        Ok((Self::from_checkpoint(ck)?, lineage))
    }
}

impl Degrader for DegradationGenerator {
    fn scale(&self) -> usize {
        self.spec.scale
    }

    fn degrade(&self, hr: &ImageBatch, seed: u64) -> Result<ImageBatch> {
        DegradationGenerator::degrade(self, hr, seed)
    }

    fn label(&self) -> String {
        self.arch_id.clone()
    }

    fn checksum(&self) -> u64 {
        self.params.checksum()
    }
}

/// On-disk form of a generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub arch_id: String,
    pub scale: usize,
    pub arch: ArchSpec,
    pub lineage_hash: Option<String>,
    pub params: ParamStore,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(io_err(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Missing(format!("{} does not exist", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// `K` generators with pairwise-distinct ids and a common scale.
#[derive(Clone, Debug)]
pub struct GeneratorEnsemble {
    members: Vec<DegradationGenerator>,
}

impl GeneratorEnsemble {
    pub fn new(members: Vec<DegradationGenerator>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Config("an ensemble needs at least one generator".into()));
        };
        let scale = first.scale();
        for (i, m) in members.iter().enumerate() {
            if m.scale() != scale {
                return Err(Error::Config(format!(
                    "ensemble member {i} has scale {} but member 0 has {scale}",
                    m.scale()
                )));
            }
            if members[..i].iter().any(|o| o.arch_id == m.arch_id) {
                return Err(Error::Config(format!("duplicate arch_id `{}`", m.arch_id)));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[DegradationGenerator] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [DegradationGenerator] {
        &mut self.members
    }

    pub fn into_members(self) -> Vec<DegradationGenerator> {
        self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn scale(&self) -> usize {
        self.members[0].scale()
    }

    pub fn checksums(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.params.checksum()).collect()
    }
}

/// Builds one generator per descriptor. Member `i` is seeded with
/// `seed + i` unless its descriptor sets `seed=` and is named `g{i}-{family}`.
pub fn build_ensemble<S: AsRef<str>>(
    descriptors: &[S],
    channels: usize,
    scale: usize,
    seed: u64,
) -> Result<GeneratorEnsemble> {
    if descriptors.is_empty() {
        return Err(Error::Config("ensemble needs at least one descriptor".into()));
    }
    let members = descriptors
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let spec = ArchSpec::parse(d.as_ref(), channels, scale, seed + i as u64)?;
            DegradationGenerator::new(format!("g{i}-{}", spec.family), spec)
        })
        .collect::<Result<Vec<_>>>()?;
    GeneratorEnsemble::new(members)
}
