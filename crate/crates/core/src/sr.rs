//! Super-resolution networks: a residual trunk at LR resolution, a single
//! sub-pixel projection to HR, and a global bicubic skip.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stochsr_tensor::{Bound, Graph, ParamStore, Var};

use crate::error::{Error, Result};
use crate::generator::{read_json, write_json};
use crate::image::ImageBatch;
use crate::nn::{lrelu, Conv, ResidualBranch};
use crate::resample::{self, Separable};
use crate::rng;

pub const SR_CHECKPOINT_VERSION: u32 = 1;

/// Anything that maps an LR batch to an HR batch.
pub trait Restorer {
    fn scale(&self) -> usize;
    fn restore(&self, lr: &ImageBatch) -> Result<ImageBatch>;
    fn label(&self) -> String;
}

/// Plain bicubic interpolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bicubic {
    pub scale: usize,
}

impl Restorer for Bicubic {
    fn scale(&self) -> usize {
        self.scale
    }

    fn restore(&self, lr: &ImageBatch) -> Result<ImageBatch> {
        resample::upsample(lr, self.scale)
    }

    fn label(&self) -> String {
        format!("bicubic-x{}", self.scale)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrSpec {
    pub width: usize,
    pub blocks: usize,
    pub channels: usize,
    pub scale: usize,
    pub seed: u64,
}

impl SrSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 1 | 2 | 4) {
            return Err(Error::Config(format!(
                "SR scale must be 1, 2 or 4, got {}",
                self.scale
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "SR channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("SR width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SrModel {
    id: String,
    spec: SrSpec,
    params: ParamStore,
    stem: Conv,
    blocks: Vec<ResidualBranch>,
    trunk: Conv,
    /// Projects to `channels · scale²` maps that are pixel-shuffled to HR.
    head: Conv,
}

impl SrModel {
    pub fn new(id: impl Into<String>, spec: SrSpec) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(spec.seed, &[rng::INIT]);
        let (w, c) = (spec.width, spec.channels);
        let stem = Conv::new(&mut store, "stem", c, w, 3, 1, 1.0, &mut r);
        let blocks = (0..spec.blocks)
            .map(|i| ResidualBranch::new(&mut store, &format!("block{i}"), w, &mut r))
            .collect();
        let trunk = Conv::new(&mut store, "trunk", w, w, 3, 1, 1.0, &mut r);
        let s2 = spec.scale * spec.scale;
        let head = Conv::new(&mut store, "head", w, c * s2, 3, 1, 0.1, &mut r);
        Ok(Self {
            id: id.into(),
            spec,
            params: store,
            stem,
            blocks,
            trunk,
            head,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn spec(&self) -> &SrSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Unclamped HR prediction recorded on `g`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, lr: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(lr).dims4()?;
        if c != self.spec.channels {
            return Err(Error::Shape(format!(
                "SR model {} expects {} channels, got {c}",
                self.id, self.spec.channels
            )));
        }
        let s = self.spec.scale;
        let lift = Separable::upsample(h, w, s)?;
        let skip = g.separable(lr, lift.rows, lift.cols)?;
        let f = self.stem.forward(g, p, lr)?;
        let f = lrelu(g, f);
        let mut x = f;
        for b in &self.blocks {
            let r = b.forward(g, p, x)?;
            x = g.add(x, r)?;
        }
        let t = self.trunk.forward(g, p, x)?;
        let x = g.add(f, t)?;
        let mut r = self.head.forward(g, p, x)?;
        if s > 1 {
            r = g.pixel_shuffle(r, s)?;
        }
        Ok(g.add(skip, r)?)
    }

    pub fn save(&self, path: &Path, lineage_hash: Option<String>) -> Result<()> {
        write_json(
            path,
            &SrCheckpoint {
                format_version: SR_CHECKPOINT_VERSION,
                kind: "sr-model".into(),
                id: self.id.clone(),
                arch: self.spec.clone(),
                lineage_hash,
                params: self.params.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        let ck: SrCheckpoint = read_json(path)?;
        if ck.format_version != SR_CHECKPOINT_VERSION || ck.kind != "sr-model" {
            return Err(Error::Stale(format!(
                "{} is `{}` version {}, expected sr-model version {SR_CHECKPOINT_VERSION}",
                path.display(),
                ck.kind,
                ck.format_version
            )));
        }
        let mut m = Self::new(ck.id, ck.arch)?;
        m.params.copy_from(&ck.params)?;
        Ok((m, ck.lineage_hash))
    }
}

impl Restorer for SrModel {
    fn scale(&self) -> usize {
        self.spec.scale
    }

    fn restore(&self, lr: &ImageBatch) -> Result<ImageBatch> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(lr.tensor().clone());
        let y = self.forward(&mut g, &p, x)?;
        ImageBatch::from_clamped(g.value(y).clone())
    }

    fn label(&self) -> String {
        self.id.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub id: String,
    pub arch: SrSpec,
    pub lineage_hash: Option<String>,
    pub params: ParamStore,
}
