//! Stage runners behind the command-line verbs. Every stage writes under
//! [`ExperimentConfig::run_dir`] and records what it read and wrote in
//! `manifests/<stage>.json`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::collab::{curves_csv, train_collab, train_naive, Ablation, CollabOutcome};
use crate::config::{DataSource, ExperimentConfig, Stage};
use crate::data::{load_corpus, oracle_degrade, ImagePair, LoadedCorpus, SplitManifest, SplitRatios};
use crate::error::{io_err, Error, Result};
use crate::generator::{build_ensemble, DegradationGenerator, GeneratorEnsemble};
use crate::image::ImageBatch;
use crate::io::write_png;
use crate::metrics::{degrader_fidelity, FidelityReport, MetricReport, ReportMeta};
use crate::robustness::{plot_curves, robustness_sweep, RobustnessCurve};
use crate::rng;
use crate::sr::{Bicubic, Restorer, SrModel};
use crate::synth;
use crate::unpaired::{train_member, write_log_csv};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub lineage_hash: String,
    pub seed: u64,
    /// Paths relative to the run directory, or absolute when outside it.
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

struct Recorder<'a> {
    cfg: &'a ExperimentConfig,
    run: PathBuf,
    stage: String,
    lineage: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    start: Instant,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a ExperimentConfig, stage: impl Into<String>, lineage: String) -> Self {
        Self {
            cfg,
            run: cfg.run_dir(),
            stage: stage.into(),
            lineage,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.run)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    }

    fn input(&mut self, p: &Path) {
        let r = self.rel(p);
        self.inputs.push(r);
    }

    fn output(&mut self, p: &Path) {
        let r = self.rel(p);
        self.outputs.push(r);
    }

    fn write_text(&mut self, p: &Path, text: &str) -> Result<()> {
        write_text(p, text)?;
        self.output(p);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, p: &Path, v: &T) -> Result<()> {
        self.write_text(p, &(serde_json::to_string_pretty(v)? + "\n"))
    }

    fn finish(self) -> Result<RunManifest> {
        let m = RunManifest {
            stage: self.stage.clone(),
            config_hash: self.cfg.hash(),
            lineage_hash: self.lineage,
            seed: self.cfg.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_secs: self.start.elapsed().as_secs_f64(),
        };
        for o in &m.outputs {
            if !self.run.join(o).exists() {
                return Err(Error::Invariant(format!("stage {} lists missing output {o}", m.stage)));
            }
        }
        write_text(
            &manifest_path(&self.run, &m.stage),
            &(serde_json::to_string_pretty(&m)? + "\n"),
        )?;
        Ok(m)
    }
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    if let Some(parent) = p.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(p, text).map_err(io_err(p))
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(format!("{} does not exist", p.display()))
        } else {
            io_err(p)(e)
        }
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn manifest_path(run: &Path, stage: &str) -> PathBuf {
    run.join("manifests").join(format!("{stage}.json"))
}

fn corpus_root(cfg: &ExperimentConfig) -> PathBuf {
    match cfg.data.source {
        DataSource::Oracle => cfg.run_dir().join("corpus"),
        DataSource::Directory => cfg.data.root.clone().expect("validated"),
    }
}

fn load(cfg: &ExperimentConfig) -> Result<LoadedCorpus> {
    load_corpus(
        &corpus_root(cfg),
        SplitRatios(cfg.data.split),
        cfg.seed,
        cfg.data.patch_size_hr,
        cfg.scale(),
    )
}

/// Renders the oracle corpus (oracle mode) and writes the split manifest.
pub fn prepare(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut rec = Recorder::new(cfg, "prepare", cfg.lineage(Stage::Prepare));
    let run = rec.run.clone();
    rec.write_text(&run.join("config.toml"), &cfg.to_toml()?)?;
    let root = corpus_root(cfg);
    match cfg.data.source {
        DataSource::Oracle => {
            for i in 0..cfg.data.synthetic_count {
                let name = format!("img{i:04}.png");
                let hr = synth::texture(
                    rng::derive(cfg.seed, &[rng::TEXTURE, i as u64]),
                    cfg.data.image_size,
                    cfg.data.channels,
                )?;
                let lr = oracle_degrade(&hr, &cfg.oracle, rng::derive(cfg.seed, &[i as u64]))?;
                let (hp, lp) = (root.join("hr").join(&name), root.join("lr").join(&name));
                if let Some(d) = hp.parent() {
                    fs::create_dir_all(d).map_err(io_err(d))?;
                }
                if let Some(d) = lp.parent() {
                    fs::create_dir_all(d).map_err(io_err(d))?;
                }
                write_png(&hp, &hr, 0)?;
                write_png(&lp, &lr, 0)?;
                rec.output(&hp);
                rec.output(&lp);
            }
        }
        DataSource::Directory => {
            if !root.is_dir() {
                return Err(Error::Missing(format!("data root {} does not exist", root.display())));
            }
            rec.input(&root);
        }
    }
    let loaded = load(cfg)?;
    rec.write_json(&run.join("splits.json"), &loaded.manifest)?;
    rec.finish()
}

fn check_lineage(path: &Path, found: Option<&str>, expected: &str) -> Result<()> {
    if found != Some(expected) {
        return Err(Error::Stale(format!(
            "{} was produced under a different configuration (lineage {}, expected {})",
            path.display(),
            found.unwrap_or("none"),
            &expected[..12]
        )));
    }
    Ok(())
}

/// Reloads the prepared corpus, refusing splits made under another config.
pub fn prepared(cfg: &ExperimentConfig) -> Result<(LoadedCorpus, PathBuf)> {
    let run = cfg.run_dir();
    let mpath = manifest_path(&run, "prepare");
    let m: RunManifest = read_json(&mpath).map_err(|e| match e {
        Error::Missing(_) => Error::Missing(format!(
            "no prepared corpus in {}; run `prepare` first",
            run.display()
        )),
        e => e,
    })?;
    check_lineage(&mpath, Some(&m.lineage_hash), &cfg.lineage(Stage::Prepare))?;
    let splits = run.join("splits.json");
    let saved: SplitManifest = read_json(&splits)?;
    let loaded = load(cfg)?;
    if loaded.manifest != saved {
        return Err(Error::Stale(format!(
            "{} no longer matches the corpus on disk",
            splits.display()
        )));
    }
    Ok((loaded, splits))
}

fn generator_path(run: &Path, arch_id: &str) -> PathBuf {
    run.join("generators").join(format!("{arch_id}.json"))
}

/// Trains every ensemble member and saves checkpoints and loss logs. A
/// diverging member is saved at its last good step before the error is
/// returned.
pub fn train_degraders(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let (corpus, splits) = prepared(cfg)?;
    let lineage = cfg.lineage(Stage::Degraders);
    let mut rec = Recorder::new(cfg, "train-degraders", lineage.clone());
    rec.input(&splits);
    let run = rec.run.clone();
    let ens = build_ensemble(&cfg.generators.specs, cfg.data.channels, cfg.scale(), cfg.seed)?;
    for (i, gen) in ens.into_members().into_iter().enumerate() {
        let id = gen.arch_id().to_string();
        let ck = generator_path(&run, &id);
        let log = run.join("generators").join(format!("{id}.log.csv"));
        log::info!("training generator {id} for {} steps", cfg.degrader.steps);
        match train_member(gen, i, &corpus.train, &cfg.degrader, cfg.data.channels) {
            Ok(t) => {
                t.generator.save(&ck, Some(lineage.clone()))?;
                write_log_csv(&log, &t.log)?;
                rec.output(&ck);
                rec.output(&log);
            }
            Err(Error::Diverged(mut d)) => {
                d.member = Some(i);
                d.last_good.save(&ck, None)?;
                write_log_csv(&log, &d.log)?;
                log::error!(
                    "generator {id} diverged; last good checkpoint {} and log {}",
                    ck.display(),
                    log.display()
                );
                return Err(Error::Diverged(d));
            }
            Err(e) => return Err(e),
        }
    }
    rec.finish()
}

/// Frozen generators of this run, in ensemble order.
pub fn load_generators(cfg: &ExperimentConfig) -> Result<(GeneratorEnsemble, Vec<PathBuf>)> {
    let run = cfg.run_dir();
    let expected = cfg.lineage(Stage::Degraders);
    let mut members = Vec::new();
    let mut paths = Vec::new();
    for (i, spec) in cfg.arch_specs()?.into_iter().enumerate() {
        let id = format!("g{i}-{}", spec.family.name());
        let p = generator_path(&run, &id);
        let (g, lineage) = DegradationGenerator::load(&p).map_err(|e| match e {
            Error::Missing(_) => Error::Missing(format!(
                "generator checkpoint {} is missing; run `train-degraders` first",
                p.display()
            )),
            e => e,
        })?;
        check_lineage(&p, lineage.as_deref(), &expected)?;
        members.push(g);
        paths.push(p);
    }
    Ok((GeneratorEnsemble::new(members)?, paths))
}

fn sr_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.run_dir().join(format!("sr-{}", cfg.ablation))
}

/// Trains the SR models of the configured ablation arm.
pub fn train_sr(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let (corpus, splits) = prepared(cfg)?;
    let (ens, gpaths) = load_generators(cfg)?;
    if corpus.val.is_empty() {
        return Err(Error::Config("the validation split holds no HR/LR pairs".into()));
    }
    let lineage = cfg.lineage(Stage::Sr);
    let mut rec = Recorder::new(cfg, format!("train-sr-{}", cfg.ablation), lineage.clone());
    rec.input(&splits);
    for p in &gpaths {
        rec.input(p);
    }
    let dir = sr_dir(cfg);
    let collab = cfg.collab();
    log::info!("training SR arm {} for {} steps", cfg.ablation, collab.steps);
    let result = match cfg.ablation {
        Ablation::Single => {
            let first = GeneratorEnsemble::new(vec![ens.members()[0].clone()])?;
            train_naive(SrModel::new("m0", cfg.sr_spec(0))?, &first, &corpus.train, &corpus.val, &collab)
        }
        Ablation::Naive => train_naive(SrModel::new("m0", cfg.sr_spec(0))?, &ens, &corpus.train, &corpus.val, &collab),
        Ablation::ClNoAda | Ablation::Full => {
            let models = (0..ens.len())
                .map(|i| SrModel::new(format!("m{i}"), cfg.sr_spec(i)))
                .collect::<Result<Vec<_>>>()?;
            train_collab(models, &ens, &corpus.train, &corpus.val, &collab)
        }
    };
    let out: CollabOutcome = match result {
        Ok(o) => o,
        Err(Error::SrDiverged(d)) => {
            for m in &d.last_good {
                m.save(&dir.join(format!("{}.json", m.id())), None)?;
            }
            write_text(&dir.join("curves.csv"), &curves_csv(&d.curves))?;
            log::error!("SR training diverged; last good models and curves in {}", dir.display());
            return Err(Error::SrDiverged(d));
        }
        Err(e) => return Err(e),
    };
    for m in &out.models {
        let p = dir.join(format!("{}.json", m.id()));
        m.save(&p, Some(lineage.clone()))?;
        rec.output(&p);
    }
    rec.write_text(&dir.join("curves.csv"), &curves_csv(&out.curves))?;
    rec.finish()
}

/// SR models of the configured arm, checked against the current config.
pub fn load_sr_models(cfg: &ExperimentConfig) -> Result<(Vec<SrModel>, Vec<PathBuf>)> {
    let dir = sr_dir(cfg);
    let expected = cfg.lineage(Stage::Sr);
    let k = match cfg.ablation {
        Ablation::Single | Ablation::Naive => 1,
        _ => cfg.generators.specs.len(),
    };
    let mut models = Vec::with_capacity(k);
    let mut paths = Vec::with_capacity(k);
    for i in 0..k {
        let p = dir.join(format!("m{i}.json"));
        let (m, lineage) = SrModel::load(&p).map_err(|e| match e {
            Error::Missing(_) => Error::Missing(format!(
                "SR checkpoint {} is missing; run `train-sr` first",
                p.display()
            )),
            e => e,
        })?;
        check_lineage(&p, lineage.as_deref(), &expected)?;
        models.push(m);
        paths.push(p);
    }
    Ok((models, paths))
}

fn eval_pairs(corpus: &LoadedCorpus) -> Result<&[ImagePair]> {
    if !corpus.test.is_empty() {
        Ok(&corpus.test)
    } else if !corpus.val.is_empty() {
        log::warn!("the test split holds no pairs; evaluating on the validation split");
        Ok(&corpus.val)
    } else {
        Err(Error::Config("no HR/LR pairs to evaluate on".into()))
    }
}

fn crop_border(b: &ImageBatch, c: usize) -> Result<ImageBatch> {
    if c == 0 {
        return Ok(b.clone());
    }
    let (n, _, h, w) = b.dims();
    if 2 * c >= h || 2 * c >= w {
        return Err(Error::Sizing(format!("border crop {c} leaves nothing of a {h}x{w} image")));
    }
    let parts = (0..n)
        .map(|i| b.crop(i, c, c, h - 2 * c, w - 2 * c))
        .collect::<Result<Vec<_>>>()?;
    ImageBatch::concat(&parts.iter().collect::<Vec<_>>())
}

/// Scores `model` on `pairs` after the configured border crop.
pub fn score(cfg: &ExperimentConfig, model: &dyn Restorer, pairs: &[ImagePair]) -> Result<MetricReport> {
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let c = cfg.eval.border_crop;
    let pred = pairs
        .iter()
        .map(|p| crop_border(&model.restore(&p.lr)?, c))
        .collect::<Result<Vec<_>>>()?;
    let target = pairs
        .iter()
        .map(|p| crop_border(&p.hr, c))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::score(
        &ids,
        &pred,
        &target,
        ReportMeta {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            dataset: "test".into(),
            model: model.label(),
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub ablation: Ablation,
    pub models: Vec<MetricReport>,
    /// Index into `models` with the highest mean PSNR.
    pub best: usize,
    pub bicubic: MetricReport,
    /// Per-generator noise-level fidelity against the oracle (oracle mode).
    pub fidelity: Vec<(String, FidelityReport)>,
}

/// Writes per-model reports, the best-of-K pick, a bicubic reference and,
/// in oracle mode, generator fidelity. `metrics.json` holds all of it.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<EvaluationSummary> {
    let (corpus, splits) = prepared(cfg)?;
    let (models, paths) = load_sr_models(cfg)?;
    let mut rec = Recorder::new(cfg, format!("evaluate-{}", cfg.ablation), cfg.lineage(Stage::Sr));
    rec.input(&splits);
    for p in &paths {
        rec.input(p);
    }
    let pairs = eval_pairs(&corpus)?;
    let dir = rec.run.join(format!("eval-{}", cfg.ablation));
    let mut reports = Vec::with_capacity(models.len());
    for m in &models {
        let r = score(cfg, m, pairs)?;
        rec.write_json(&dir.join(format!("{}.json", m.id())), &r)?;
        rec.write_text(&dir.join(format!("{}.csv", m.id())), &r.to_csv())?;
        reports.push(r);
    }
    let best = (0..reports.len())
        .max_by(|&a, &b| reports[a].aggregate.psnr.total_cmp(&reports[b].aggregate.psnr))
        .unwrap_or(0);
    let bicubic = score(cfg, &Bicubic { scale: cfg.scale() }, pairs)?;
    let mut fidelity = Vec::new();
    if cfg.data.source == DataSource::Oracle {
        let (ens, gpaths) = load_generators(cfg)?;
        for p in &gpaths {
            rec.input(p);
        }
        let hr: Vec<ImageBatch> = pairs.iter().map(|p| p.hr.clone()).collect();
        for g in ens.members() {
            let f = degrader_fidelity(g, &cfg.oracle, &hr, cfg.eval.fidelity_samples, cfg.seed)?;
            fidelity.push((g.arch_id().to_string(), f));
        }
    }
    let summary = EvaluationSummary {
        ablation: cfg.ablation,
        models: reports,
        best,
        bicubic,
        fidelity,
    };
    rec.write_json(&dir.join("metrics.json"), &summary)?;
    rec.finish()?;
    Ok(summary)
}

/// Sweeps every model of the arm and a bicubic reference over the
/// configured test-time noise grid; writes JSON, CSV and a line plot.
pub fn robustness(cfg: &ExperimentConfig) -> Result<Vec<RobustnessCurve>> {
    let (corpus, splits) = prepared(cfg)?;
    let (models, paths) = load_sr_models(cfg)?;
    let mut rec = Recorder::new(cfg, format!("robustness-{}", cfg.ablation), cfg.lineage(Stage::Sr));
    rec.input(&splits);
    for p in &paths {
        rec.input(p);
    }
    let pairs = eval_pairs(&corpus)?;
    let grid = &cfg.eval.sigma_grid;
    let mut curves = Vec::with_capacity(models.len() + 1);
    for m in &models {
        curves.push(robustness_sweep(m, pairs, grid, cfg.seed)?);
    }
    curves.push(robustness_sweep(&Bicubic { scale: cfg.scale() }, pairs, grid, cfg.seed)?);
    let dir = rec.run.join(format!("robustness-{}", cfg.ablation));
    rec.write_json(&dir.join("curves.json"), &curves)?;
    let mut csv = String::from("model,sigma,psnr,ssim\n");
    for c in &curves {
        for line in c.to_csv().lines().skip(1) {
            csv.push_str(&format!("{},{line}\n", c.label));
        }
    }
    rec.write_text(&dir.join("curves.csv"), &csv)?;
    let plot = dir.join("plot.png");
    plot_curves(&plot, &curves)?;
    rec.output(&plot);
    rec.finish()?;
    Ok(curves)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub best_model: String,
    #[serde(with = "crate::metrics::inf_sentinel")]
    pub psnr: f64,
    pub ssim: f64,
}

/// Trains and evaluates every arm, then tabulates the best model of each.
pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let mut rec = Recorder::new(cfg, "ablate", cfg.lineage(Stage::Degraders));
    for arm in Ablation::ALL {
        let mut c = cfg.clone();
        c.ablation = arm;
        train_sr(&c)?;
        let s = evaluate(&c)?;
        let m = rec.run.join(format!("eval-{arm}")).join("metrics.json");
        rec.input(&m);
        let b = &s.models[s.best];
        rows.push(AblationRow {
            ablation: arm,
            best_model: b.meta.model.clone(),
            psnr: b.aggregate.psnr,
            ssim: b.aggregate.ssim,
        });
    }
    let mut csv = String::from("ablation,best_model,psnr,ssim\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.ablation,
            r.best_model,
            crate::metrics::fmt_db(r.psnr),
            r.ssim
        ));
    }
    let run = rec.run.clone();
    rec.write_text(&run.join("ablation.csv"), &csv)?;
    rec.write_json(&run.join("ablation.json"), &rows)?;
    rec.finish()?;
    Ok(rows)
}

/// Files under `run` not listed as an output of any manifest.
pub fn orphans(run: &Path) -> Result<Vec<PathBuf>> {
    let mut listed = BTreeSet::new();
    let mdir = run.join("manifests");
    if mdir.is_dir() {
        for e in fs::read_dir(&mdir).map_err(io_err(&mdir))? {
            let p = e.map_err(io_err(&mdir))?.path();
            let m: RunManifest = read_json(&p)?;
            listed.extend(m.outputs.into_iter().map(|o| run.join(o)));
        }
    }
    let mut out = Vec::new();
    let mut stack = vec![run.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(io_err(&d))? {
            let p = e.map_err(io_err(&d))?.path();
            if p.is_dir() {
                if p != mdir {
                    stack.push(p);
                }
            } else if !listed.contains(&p) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
