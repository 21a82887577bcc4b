//! Experiment configuration: named presets, layered overrides, validation
//! and content hashes.
//!
//! Layers are merged in order preset ← file ← environment ← command line.
//! Environment keys use the prefix `STOCHSR_` and `__` between path
//! segments, e.g. `STOCHSR_SR__LAMBDA_ADA=1` sets `sr.lambda_ada`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::collab::{Ablation, CollabConfig};
use crate::data::{OracleDegradation, SplitRatios};
use crate::error::{io_err, Error, Result};
use crate::generator::ArchSpec;
use crate::sr::SrSpec;
use crate::unpaired::DegraderTrainConfig;

pub const ENV_PREFIX: &str = "STOCHSR_";

/// Optional keys, absent from a serialised config when unset.
const OPTIONAL_KEYS: [&str; 2] = ["data.root", "run_name"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Published hyper-parameters and model sizes.
    Paper,
    /// Reduced sizes and schedules for a single CPU.
    #[default]
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset `{s}`; valid: paper, desk"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generate textures and degrade them with the oracle.
    Oracle,
    /// Read `<root>/hr/*.png` and `<root>/lr/*.png`.
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Required for `directory`; ignored in oracle mode.
    pub root: Option<PathBuf>,
    /// Number of textures rendered in oracle mode.
    pub synthetic_count: usize,
    /// Side of each rendered HR texture.
    pub image_size: usize,
    pub channels: usize,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
    pub patch_size_hr: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorsConfig {
    /// One descriptor per ensemble member, `family[:key=value,...]`.
    pub specs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrModelConfig {
    pub width: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Test-time noise levels on the 8-bit scale.
    pub sigma_grid: Vec<f64>,
    /// Pixels removed from each HR border before scoring.
    pub border_crop: usize,
    /// Draws per generator in the noise-level fidelity check.
    pub fidelity_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Copied into every stage; stage tables carry no seed of their own.
    pub seed: u64,
    pub out: PathBuf,
    /// Fixed run directory name under `out`. When unset the name is derived
    /// from the training configuration, so edits land in a fresh directory;
    /// when set, artifacts from an older configuration are refused as stale.
    pub run_name: Option<String>,
    /// Arm used by `train-sr`, `evaluate` and `robustness`.
    pub ablation: Ablation,
    pub data: DataConfig,
    pub oracle: OracleDegradation,
    pub generators: GeneratorsConfig,
    pub degrader: DegraderTrainConfig,
    pub sr_model: SrModelConfig,
    pub sr: CollabConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = p == Preset::Desk;
        Self {
            preset: p,
            seed: 0,
            out: PathBuf::from("runs"),
            run_name: None,
            ablation: Ablation::Full,
            data: DataConfig {
                source: DataSource::Oracle,
                root: None,
                synthetic_count: 64,
                image_size: if desk { 64 } else { 128 },
                channels: 3,
                split: [0.8, 0.1, 0.1],
                patch_size_hr: if desk { 32 } else { 64 },
            },
            oracle: OracleDegradation::default(),
            generators: GeneratorsConfig {
                specs: if desk {
                    vec!["residual-chain:width=8".into(), "attention-strided:width=16".into()]
                } else {
                    vec!["residual-chain:width=32".into(), "attention-strided:width=32".into()]
                },
            },
            degrader: DegraderTrainConfig::default(),
            sr_model: if desk {
                SrModelConfig { width: 16, blocks: 2 }
            } else {
                SrModelConfig { width: 48, blocks: 6 }
            },
            sr: if desk { CollabConfig::desk() } else { CollabConfig::paper() },
            eval: EvalConfig {
                sigma_grid: vec![0.0, 5.0, 10.0, 15.0, 20.0],
                border_crop: 0,
                fidelity_samples: 200,
            },
        }
    }

    /// Scale shared by the oracle, generators and SR models.
    pub fn scale(&self) -> usize {
        self.oracle.scale
    }

    pub fn arch_specs(&self) -> Result<Vec<ArchSpec>> {
        self.generators
            .specs
            .iter()
            .enumerate()
            .map(|(i, d)| ArchSpec::parse(d, self.data.channels, self.scale(), self.seed + i as u64))
            .collect()
    }

    pub fn sr_spec(&self, index: usize) -> SrSpec {
        SrSpec {
            width: self.sr_model.width,
            blocks: self.sr_model.blocks,
            channels: self.data.channels,
            scale: self.scale(),
            seed: self.seed + index as u64,
        }
    }

    /// Collaborative config for the selected arm.
    pub fn collab(&self) -> CollabConfig {
        self.ablation.apply(&self.sr)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.source == DataSource::Directory && d.root.is_none() {
            return Err(Error::Config("data.root is required when data.source = \"directory\"".into()));
        }
        if d.channels != 1 && d.channels != 3 {
            return Err(Error::Config(format!("data.channels must be 1 or 3, got {}", d.channels)));
        }
        SplitRatios(d.split).validate()?;
        let s = self.scale();
        if s != 2 && s != 4 {
            return Err(Error::Config(format!("oracle.scale must be 2 or 4, got {s}")));
        }
        if d.patch_size_hr == 0 || !d.patch_size_hr.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "data.patch_size_hr {} must be a positive multiple of the scale {s}",
                d.patch_size_hr
            )));
        }
        if d.source == DataSource::Oracle && (d.image_size < d.patch_size_hr || !d.image_size.is_multiple_of(s)) {
            return Err(Error::Config(format!(
                "data.image_size {} must be a multiple of {s} and at least data.patch_size_hr",
                d.image_size
            )));
        }
        if self.generators.specs.is_empty() {
            return Err(Error::Config("generators.specs must name at least one generator".into()));
        }
        self.oracle.validate()?;
        for spec in self.arch_specs()? {
            spec.validate()?;
        }
        self.degrader.validate()?;
        self.sr_spec(0).validate()?;
        self.sr.validate()?;
        if self.sr.k != self.generators.specs.len() {
            return Err(Error::Config(format!(
                "sr.k = {} but generators.specs names {} generators",
                self.sr.k,
                self.generators.specs.len()
            )));
        }
        let g = &self.eval.sigma_grid;
        if g.is_empty() || g.iter().any(|v| !(*v >= 0.0)) || g.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "eval.sigma_grid {g:?} must be nonempty, nonnegative and strictly increasing"
            )));
        }
        if self.eval.fidelity_samples < crate::metrics::MIN_FIDELITY_SAMPLES {
            return Err(Error::Config(format!(
                "eval.fidelity_samples must be at least {}",
                crate::metrics::MIN_FIDELITY_SAMPLES
            )));
        }
        Ok(())
    }

    /// Canonical TOML text of the resolved config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// SHA-256 (hex) of the config without its output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.run_name = None;
        digest(&c)
    }

    /// Hash of everything a stage's artifacts depend on.
    pub fn lineage(&self, stage: Stage) -> String {
        let c = self;
        let data = digest(&(c.seed, &c.data, &c.oracle));
        match stage {
            Stage::Prepare => data,
            Stage::Degraders => digest(&(data, &c.generators, &c.degrader)),
            Stage::Sr => digest(&(c.lineage(Stage::Degraders), &c.sr_model, &c.sr, c.ablation)),
        }
    }

    /// `<preset>-<first 12 hex digits of the training lineage>`; evaluation
    /// settings and the ablation arm do not change it.
    pub fn run_id(&self) -> String {
        let mut c = self.clone();
        c.ablation = Ablation::Full;
        let h = digest(&(c.lineage(Stage::Sr), c.preset));
        format!("{}-{}", self.preset, &h[..12])
    }

    pub fn run_dir(&self) -> PathBuf {
        match &self.run_name {
            Some(n) => self.out.join(n),
            None => self.out.join(self.run_id()),
        }
    }
}

/// Stages whose outputs carry a lineage hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    Degraders,
    Sr,
}

fn digest<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("config values always serialise");
    hex::encode(Sha256::digest(bytes))
}

/// Command-line values that override every other layer.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ablation: Option<Ablation>,
}

/// Resolves the layered config and validates it.
pub fn load(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    cli: &Overrides,
) -> Result<ExperimentConfig> {
    let file_value = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::Missing(format!("config file {} not found", p.display()))
                } else {
                    io_err(p)(e)
                }
            })?;
            let v: Value = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Some(v)
        }
        None => None,
    };
    let env_pairs: Vec<(Vec<String>, String)> = env
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.split("__").map(|s| s.to_ascii_lowercase()).collect(), v))
        })
        .collect();

    // The preset can itself come from any layer.
    let mut preset = Preset::Desk;
    if let Some(p) = file_value.as_ref().and_then(|v| v.get("preset")).and_then(Value::as_str) {
        preset = p.parse()?;
    }
    if let Some((_, v)) = env_pairs.iter().find(|(k, _)| k.len() == 1 && k[0] == "preset") {
        preset = v.parse()?;
    }
    if let Some(p) = cli.preset {
        preset = p;
    }

    let mut root = Value::try_from(ExperimentConfig::preset(preset))
        .map_err(|e| Error::Config(format!("cannot serialise preset: {e}")))?;
    if let Some(v) = file_value {
        reject_stage_seeds(&v, "config file")?;
        merge(&mut root, v, "")?;
    }
    for (path, raw) in env_pairs {
        let key = path.join(".");
        if path.len() == 2 && path[1] == "seed" {
            return Err(Error::Config(format!(
                "{ENV_PREFIX}{}: stage seeds follow the top-level seed",
                key.to_ascii_uppercase().replace('.', "__")
            )));
        }
        set_path(&mut root, &path, parse_scalar(&raw), &key)?;
    }
    if let Value::Table(t) = &mut root {
        t.insert("preset".into(), Value::String(preset.name().into()));
        if let Some(s) = cli.seed {
            t.insert("seed".into(), Value::Integer(s as i64));
        }
        if let Some(o) = &cli.out {
            t.insert("out".into(), Value::String(o.to_string_lossy().into_owned()));
        }
        if let Some(a) = cli.ablation {
            t.insert("ablation".into(), Value::String(a.name().into()));
        }
    }
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    cfg.degrader.seed = cfg.seed;
    cfg.sr.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn reject_stage_seeds(v: &Value, origin: &str) -> Result<()> {
    for section in ["degrader", "sr"] {
        if v.get(section).and_then(|s| s.get("seed")).is_some() {
            return Err(Error::Config(format!(
                "{origin}: `{section}.seed` is not settable; stage seeds follow the top-level seed"
            )));
        }
    }
    Ok(())
}

/// Environment values are parsed as TOML literals when possible (numbers,
/// booleans, arrays) and as bare strings otherwise.
fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, over: Value, at: &str) -> Result<()> {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v, &path)?,
                    Some(slot) => *slot = v,
                    None if OPTIONAL_KEYS.contains(&path.as_str()) => {
                        b.insert(k, v);
                    }
                    None => return Err(Error::Config(format!("unknown key `{path}`"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, path: &[String], v: Value, key: &str) -> Result<()> {
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        let Value::Table(t) = cur else {
            return Err(Error::Config(format!("`{key}` does not name a config field")));
        };
        let last = i + 1 == path.len();
        if last {
            if !t.contains_key(seg) && !OPTIONAL_KEYS.contains(&key) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
            let v = match (t.get(seg), v) {
                // "0.5" for an integer-valued float field such as lambda_sup
                (Some(Value::Float(_)), Value::Integer(n)) => Value::Float(n as f64),
                (_, v) => v,
            };
            t.insert(seg.clone(), v);
            return Ok(());
        }
        cur = t
            .get_mut(seg)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
    }
    Err(Error::Config("empty config key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn paper_preset_values() {
        let c = ExperimentConfig::preset(Preset::Paper);
        assert_eq!((c.sr.lambda_sup, c.sr.lambda_col, c.sr.lambda_ada), (1.0, 0.01, 10.0));
        assert_eq!(c.sr.p_max, 1_000_000);
        assert_eq!(c.sr.lr, 1e-5);
        assert_eq!(c.sr.batch_size, 16);
        assert_eq!(c.scale(), 4);
        c.validate().unwrap();
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "seed = 3\n[sr]\nlambda_ada = 2.0\nsteps = 10\n").unwrap();
        let c = load(
            Some(&f),
            env(&[("STOCHSR_SR__STEPS", "20"), ("HOME", "/x")]),
            &Overrides {
                seed: Some(9),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(c.sr.lambda_ada, 2.0);
        assert_eq!(c.sr.steps, 20);
        assert_eq!((c.seed, c.sr.seed, c.degrader.seed), (9, 9, 9));
    }

    #[test]
    fn unknown_keys_and_bad_types_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "[sr]\nlambda_bogus = 1.0\n").unwrap();
        let e = load(Some(&f), vec![], &Overrides::default()).unwrap_err();
        assert!(e.to_string().contains("sr.lambda_bogus"), "{e}");
        std::fs::write(&f, "[sr]\nsteps = \"many\"\n").unwrap();
        let e = load(Some(&f), vec![], &Overrides::default()).unwrap_err();
        assert!(e.to_string().contains("sr.steps"), "{e}");
        let e = load(None, env(&[("STOCHSR_SR__NOPE", "1")]), &Overrides::default()).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn hash_ignores_output_dir_and_run_id_ignores_eval() {
        let a = ExperimentConfig::preset(Preset::Desk);
        let mut b = a.clone();
        b.out = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.eval.border_crop = 4;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.run_id(), b.run_id());
        b.sr.lr = 1.0;
        assert_ne!(a.run_id(), b.run_id());
    }
}
