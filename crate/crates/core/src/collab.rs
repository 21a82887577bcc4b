//! Collaborative training of `K` SR models on pseudo-pairs from `K` frozen
//! generators: own-pair supervision, peer distillation across generators,
//! and a ramped pseudo-label term on real LR images.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use stochsr_tensor::{Adam, AdamConfig, Bound, Graph, Tensor, Var};

use crate::data::{sample_hr_batch, sample_lr_batch, ImagePair, UnpairedCorpus};
use crate::error::{Error, Result};
use crate::generator::GeneratorEnsemble;
use crate::image::ImageBatch;
use crate::metrics::psnr;
use crate::rng;
use crate::sr::{Restorer, SrModel};

/// Linear schedule `p / P`, clamped to 1 past the end of the schedule.
pub fn ramp(p: usize, p_max: usize) -> Result<f64> {
    if p_max == 0 {
        return Err(Error::Argument("ramp needs P >= 1".into()));
    }
    if p > p_max {
        log::warn!("iteration {p} is past the ramp length {p_max}; using weight 1");
        return Ok(1.0);
    }
    Ok(p as f64 / p_max as f64)
}

fn l1(a: &Tensor, b: &Tensor, what: &str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Sizing(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Mean absolute error over all elements.
pub fn sup_loss(pred: &ImageBatch, target: &ImageBatch) -> Result<f64> {
    l1(pred.tensor(), target.tensor(), "sup_loss")
}

/// `Σ_{j≠i} L1(outputs[i][j], outputs[j][j])` where `outputs[i][j]` is model
/// `i` applied to generator `j`'s sample. The diagonal terms act as fixed
/// targets; `K = 1` gives 0.
pub fn collab_loss(outputs: &[Vec<Tensor>], i: usize) -> Result<f64> {
    let k = outputs.len();
    if i >= k || outputs.iter().any(|row| row.len() != k) {
        return Err(Error::Argument(format!(
            "collab_loss needs a square {k}x{k} output matrix and i < {k}"
        )));
    }
    let mut total = 0.0;
    for j in (0..k).filter(|&j| j != i) {
        total += l1(&outputs[i][j], &outputs[j][j], "collab_loss")?;
    }
    Ok(total)
}

/// Ensembled target for a real LR batch. Always detached from every model.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub y_hat: Tensor,
    pub teacher_count: usize,
    pub gradient_barrier: bool,
}

impl PseudoLabel {
    /// Elementwise mean of teacher outputs.
    pub fn from_outputs(outputs: &[Tensor]) -> Result<Self> {
        let Some(first) = outputs.first() else {
            return Err(Error::Argument("pseudo label needs at least one teacher".into()));
        };
        let mut acc = first.clone();
        for o in &outputs[1..] {
            acc.add_assign(o)?;
        }
        acc.scale_in_place(1.0 / outputs.len() as f64);
        Ok(Self {
            y_hat: acc,
            teacher_count: outputs.len(),
            gradient_barrier: true,
        })
    }
}

/// Runs every model on `x_real` and averages the (unclamped) outputs.
pub fn pseudo_label(models: &[SrModel], x_real: &ImageBatch) -> Result<PseudoLabel> {
    if models.is_empty() {
        return Err(Error::Argument("pseudo_label needs at least one model".into()));
    }
    let scale = models[0].spec().scale;
    if models.iter().any(|m| m.spec().scale != scale) {
        return Err(Error::Argument("pseudo_label models must share a scale".into()));
    }
    let outs = models
        .iter()
        .map(|m| raw_output(m, x_real.tensor()))
        .collect::<Result<Vec<_>>>()?;
    PseudoLabel::from_outputs(&outs)
}

fn raw_output(m: &SrModel, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = m.params().bind_frozen(&mut g);
    let v = g.constant(x.clone());
    let y = m.forward(&mut g, &p, v)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Pseudo-pairs from the generators: supervision plus peer distillation.
    Synthetic,
    /// Real LR images against the ensembled pseudo-label.
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollabConfig {
    pub lambda_sup: f64,
    pub lambda_col: f64,
    pub lambda_ada: f64,
    /// Ramp length `P` in iterations.
    pub p_max: usize,
    pub k: usize,
    /// Phases run, in order, within each iteration.
    pub alternation: Vec<Phase>,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    /// Held-out PSNR is logged every this many iterations (and at the end).
    pub val_every: usize,
    pub seed: u64,
}

impl CollabConfig {
    /// Published hyper-parameters.
    pub fn paper() -> Self {
        Self {
            lambda_sup: 1.0,
            lambda_col: 0.01,
            lambda_ada: 10.0,
            p_max: 1_000_000,
            k: 2,
            alternation: vec![Phase::Synthetic, Phase::Real],
            batch_size: 16,
            lr: 1e-5,
            steps: 1_000_000,
            val_every: 500,
            seed: 0,
        }
    }

    /// Scaled down for single-CPU runs.
    pub fn desk() -> Self {
        Self {
            p_max: 10_000,
            batch_size: 4,
            lr: 1e-4,
            steps: 10_000,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sup", self.lambda_sup),
            ("lambda_col", self.lambda_col),
            ("lambda_ada", self.lambda_ada),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sr.{name} must be >= 0, got {v}")));
            }
        }
        if self.p_max == 0 {
            return Err(Error::Config("sr.p_max must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("sr.k must be >= 1".into()));
        }
        if self.alternation.is_empty() {
            return Err(Error::Config("sr.alternation must name at least one phase".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || self.val_every == 0 {
            return Err(Error::Config(
                "sr.batch_size, sr.lr and sr.val_every must be positive".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Arms of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// One model on the first generator's pairs only.
    Single,
    /// One model on the pooled pairs of all generators.
    Naive,
    /// Collaborative training without the pseudo-label term.
    ClNoAda,
    /// Full objective.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Single, Ablation::Naive, Ablation::ClNoAda, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Single => "single",
            Ablation::Naive => "naive",
            Ablation::ClNoAda => "cl_no_ada",
            Ablation::Full => "full",
        }
    }

    /// The config this arm trains with.
    pub fn apply(self, cfg: &CollabConfig) -> CollabConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::Single => {
                c.k = 1;
                c.lambda_col = 0.0;
                c.lambda_ada = 0.0;
            }
            Ablation::Naive => {
                c.lambda_col = 0.0;
                c.lambda_ada = 0.0;
            }
            Ablation::ClNoAda => c.lambda_ada = 0.0,
            Ablation::Full => {}
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation `{s}`; valid: single, naive, cl_no_ada, full"
                ))
            })
    }
}

/// Unweighted term values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub col: f64,
    pub ada: f64,
    pub ramp: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `λ_sup·sup + λ_col·col + λ_ada·ramp·ada`.
    pub fn combine(sup: f64, col: f64, ada: f64, ramp: f64, cfg: &CollabConfig) -> Self {
        Self {
            sup,
            col,
            ada,
            ramp,
            total: cfg.lambda_sup * sup + cfg.lambda_col * col + cfg.lambda_ada * ramp * ada,
        }
    }
}

/// Pseudo-pairs for one iteration: `x[j]` is generator `j`'s sample of `y`.
#[derive(Clone, Debug)]
pub struct SynthBatch {
    pub y: ImageBatch,
    pub x: Vec<ImageBatch>,
}

/// Real LR batch with its ensembled target.
#[derive(Clone, Debug)]
pub struct RealBatch {
    pub x: ImageBatch,
    pub label: PseudoLabel,
}

/// Records model `i`'s full three-term objective on `g`, with `params[j]`
/// the bindings of model `j`. Peer targets `M_j(x_j)` are detached copies,
/// so only model `i` receives gradient.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_graph(
    g: &mut Graph,
    models: &[SrModel],
    params: &[Bound],
    i: usize,
    synth: &SynthBatch,
    real: Option<&RealBatch>,
    p: usize,
    cfg: &CollabConfig,
) -> Result<(Var, LossBreakdown)> {
    let k = models.len();
    if synth.x.len() != k || params.len() != k || i >= k {
        return Err(Error::Argument(format!(
            "total_loss needs one sample and binding per model (K = {k})"
        )));
    }
    let r = ramp(p, cfg.p_max)?;
    let y = g.constant(synth.y.tensor().clone());
    let xi = g.constant(synth.x[i].tensor().clone());
    let own = models[i].forward(g, &params[i], xi)?;
    let sup = g.mean_abs_diff(own, y)?;
    let mut total = g.scale(sup, cfg.lambda_sup);
    let mut col_value = 0.0;
    if k > 1 {
        let mut col: Option<Var> = None;
        for j in (0..k).filter(|&j| j != i) {
            let xj = g.constant(synth.x[j].tensor().clone());
            let pred = models[i].forward(g, &params[i], xj)?;
            let teacher = models[j].forward(g, &params[j], xj)?;
            let target = g.detach(teacher);
            let term = g.mean_abs_diff(pred, target)?;
            col = Some(match col {
                Some(c) => g.add(c, term)?,
                None => term,
            });
        }
        let col = col.expect("k > 1");
        col_value = g.value(col).data()[0];
        let w = g.scale(col, cfg.lambda_col);
        total = g.add(total, w)?;
    }
    let mut ada_value = 0.0;
    match real {
        Some(rb) => {
            let x = g.constant(rb.x.tensor().clone());
            let pred = models[i].forward(g, &params[i], x)?;
            let target = g.constant(rb.label.y_hat.clone());
            let ada = g.mean_abs_diff(pred, target)?;
            ada_value = g.value(ada).data()[0];
            let w = g.scale(ada, cfg.lambda_ada * r);
            total = g.add(total, w)?;
        }
        None if cfg.lambda_ada > 0.0 && r > 0.0 => {
            return Err(Error::Config(
                "the pseudo-label term is active but no real LR batch was given".into(),
            ))
        }
        None => {}
    }
    let sup_value = g.value(sup).data()[0];
    let mut bd = LossBreakdown::combine(sup_value, col_value, ada_value, r, cfg);
    bd.total = g.value(total).data()[0];
    Ok((total, bd))
}

/// Value-only form of [`total_loss_graph`].
pub fn total_loss(
    models: &[SrModel],
    i: usize,
    synth: &SynthBatch,
    real: Option<&RealBatch>,
    p: usize,
    cfg: &CollabConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let params: Vec<Bound> = models.iter().map(|m| m.params().bind_frozen(&mut g)).collect();
    total_loss_graph(&mut g, models, &params, i, synth, real, p, cfg).map(|(_, b)| b)
}

/// One logged validation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    /// Mean held-out PSNR of each model.
    pub psnr: Vec<f64>,
    /// Loss terms of the last iteration, averaged over models.
    pub loss: LossBreakdown,
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let k = rows.first().map_or(0, |r| r.psnr.len());
    let mut s = String::from("iteration");
    for i in 0..k {
        s.push_str(&format!(",psnr_m{i}"));
    }
    s.push_str(",sup,col,ada,ramp,total\n");
    for r in rows {
        s.push_str(&r.iteration.to_string());
        for v in &r.psnr {
            s.push_str(&format!(",{}", crate::metrics::fmt_db(*v)));
        }
        let l = &r.loss;
        s.push_str(&format!(",{},{},{},{},{}\n", l.sup, l.col, l.ada, l.ramp, l.total));
    }
    s
}

/// Mean PSNR of `model` over `pairs` (full images, no border crop).
pub fn held_out_psnr(model: &dyn Restorer, pairs: &[ImagePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("held-out evaluation needs pairs".into()));
    }
    let mut total = 0.0;
    for pair in pairs {
        let pred = model.restore(&pair.lr)?;
        total += psnr(&pred, &pair.hr, 1.0)?.iter().sum::<f64>() / pair.hr.batch() as f64;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug)]
pub struct CollabOutcome {
    pub models: Vec<SrModel>,
    pub curves: Vec<CurveRow>,
}

impl CollabOutcome {
    /// Index of the model with the highest final held-out PSNR.
    pub fn best(&self) -> usize {
        let last = self.curves.last().map(|r| r.psnr.clone()).unwrap_or_default();
        (0..last.len())
            .max_by(|&a, &b| last[a].total_cmp(&last[b]))
            .unwrap_or(0)
    }

    /// PSNR curve of [`CollabOutcome::best`].
    pub fn best_curve(&self) -> Vec<(usize, f64)> {
        let b = self.best();
        self.curves.iter().map(|r| (r.iteration, r.psnr[b])).collect()
    }
}

fn synth_batch(ens: &GeneratorEnsemble, corpus: &UnpairedCorpus, cfg: &CollabConfig, step: usize) -> Result<SynthBatch> {
    let y = sample_hr_batch(corpus, cfg.batch_size, rng::derive(cfg.seed, &[step as u64, 0]))?;
    let x = ens
        .members()
        .iter()
        .enumerate()
        .map(|(j, gen)| gen.degrade(&y, rng::derive(cfg.seed, &[step as u64, 2, j as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthBatch { y, x })
}

fn check_finite(v: f64, step: usize, models: &[SrModel], curves: &[CurveRow]) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    Err(Error::SrDiverged(Box::new(crate::error::SrDivergence {
        step,
        loss: v,
        last_good: models.to_vec(),
        curves: curves.to_vec(),
    })))
}

fn check_inputs(models: &[SrModel], ens: &GeneratorEnsemble, corpus: &UnpairedCorpus) -> Result<()> {
    if models.is_empty() {
        return Err(Error::Argument("training needs at least one SR model".into()));
    }
    for m in models {
        if m.spec().scale != ens.scale() || corpus.scale != ens.scale() {
            return Err(Error::Config(format!(
                "SR model {} (x{}), generators (x{}) and corpus (x{}) disagree on scale",
                m.id(),
                m.spec().scale,
                ens.scale(),
                corpus.scale
            )));
        }
    }
    Ok(())
}

fn validate_models(models: &[SrModel], val: &[ImagePair], iteration: usize, loss: LossBreakdown) -> Result<CurveRow> {
    let psnr = models
        .iter()
        .map(|m| held_out_psnr(m, val))
        .collect::<Result<Vec<_>>>()?;
    Ok(CurveRow {
        iteration,
        psnr,
        loss,
    })
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for p in parts {
        m.sup += p.sup / n;
        m.col += p.col / n;
        m.ada += p.ada / n;
        m.ramp = p.ramp;
        m.total += p.total / n;
    }
    m
}

/// Alternates synthetic and real phases per `cfg.alternation`.
///
/// Synthetic phase: every model's loss is built from outputs of the current
/// weights, then all models step together. Real phase (skipped while the
/// ramp or `λ_ada` is zero): the pseudo-label is recomputed from current
/// weights and each model steps on its ramped L1 to it.
pub fn train_collab(
    mut models: Vec<SrModel>,
    ens: &GeneratorEnsemble,
    corpus: &UnpairedCorpus,
    val: &[ImagePair],
    cfg: &CollabConfig,
) -> Result<CollabOutcome> {
    cfg.validate()?;
    check_inputs(&models, ens, corpus)?;
    let k = models.len();
    if ens.len() != k {
        return Err(Error::Config(format!(
            "{k} SR models but {} generators",
            ens.len()
        )));
    }
    let frozen = ens.checksums();
    let mut opts: Vec<Adam> = models.iter().map(|m| Adam::new(cfg.adam(), m.params())).collect();
    let mut curves = vec![validate_models(&models, val, 0, LossBreakdown::default())?];

    for step in 0..cfg.steps {
        let r = ramp(step, cfg.p_max)?;
        let mut parts = vec![LossBreakdown::default(); k];
        for phase in &cfg.alternation {
            match phase {
                Phase::Synthetic => {
                    let synth = synth_batch(ens, corpus, cfg, step)?;
                    synthetic_step(&mut models, &mut opts, &synth, cfg, &mut parts)?;
                }
                Phase::Real => {
                    if r == 0.0 || cfg.lambda_ada == 0.0 {
                        continue;
                    }
                    let x = sample_lr_batch(corpus, cfg.batch_size, rng::derive(cfg.seed, &[step as u64, 1]))?;
                    real_step(&mut models, &mut opts, &x, r, cfg, &mut parts)?;
                }
            }
        }
        for p in parts.iter_mut() {
            *p = LossBreakdown::combine(p.sup, p.col, p.ada, r, cfg);
            check_finite(p.total, step, &models, &curves)?;
        }
        let last = mean_breakdown(&parts);
        let done = step + 1;
        if done % cfg.val_every == 0 || done == cfg.steps {
            curves.push(validate_models(&models, val, done, last)?);
        }
    }
    if ens.checksums() != frozen {
        return Err(Error::Invariant("a frozen generator changed during SR training".into()));
    }
    Ok(CollabOutcome { models, curves })
}

fn synthetic_step(
    models: &mut [SrModel],
    opts: &mut [Adam],
    synth: &SynthBatch,
    cfg: &CollabConfig,
    parts: &mut [LossBreakdown],
) -> Result<()> {
    let k = models.len();
    let use_col = k > 1 && cfg.lambda_col > 0.0;
    // Forward every model on every sample it needs, with current weights.
    let mut graphs = Vec::with_capacity(k);
    for (i, m) in models.iter().enumerate() {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g);
        let outs: Vec<Option<Var>> = (0..k)
            .map(|j| {
                if j == i || use_col {
                    let x = g.constant(synth.x[j].tensor().clone());
                    m.forward(&mut g, &p, x).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        graphs.push((g, p, outs));
    }
    // Peer targets M_j(x_j), detached.
    let targets: Vec<Tensor> = graphs
        .iter()
        .enumerate()
        .map(|(j, (g, _, outs))| g.value(outs[j].expect("own output")).clone())
        .collect();
    let mut updates = Vec::with_capacity(k);
    for (i, (mut g, p, outs)) in graphs.into_iter().enumerate() {
        let y = g.constant(synth.y.tensor().clone());
        let sup = g.mean_abs_diff(outs[i].expect("own output"), y)?;
        parts[i].sup = g.value(sup).data()[0];
        let mut total = g.scale(sup, cfg.lambda_sup);
        if use_col {
            let mut col: Option<Var> = None;
            for j in (0..k).filter(|&j| j != i) {
                let t = g.constant(targets[j].clone());
                let term = g.mean_abs_diff(outs[j].expect("peer output"), t)?;
                col = Some(match col {
                    Some(c) => g.add(c, term)?,
                    None => term,
                });
            }
            let col = col.expect("k > 1");
            parts[i].col = g.value(col).data()[0];
            let w = g.scale(col, cfg.lambda_col);
            total = g.add(total, w)?;
        }
        if !g.value(total).data()[0].is_finite() {
            // reported by the caller with the pre-update models
            parts[i].sup = f64::NAN;
            return Ok(());
        }
        let grads = g.backward(total)?;
        updates.push((p, grads));
    }
    for ((m, opt), (p, grads)) in models.iter_mut().zip(opts.iter_mut()).zip(updates) {
        opt.step(m.params_mut(), &p, &grads);
    }
    Ok(())
}

fn real_step(
    models: &mut [SrModel],
    opts: &mut [Adam],
    x: &ImageBatch,
    r: f64,
    cfg: &CollabConfig,
    parts: &mut [LossBreakdown],
) -> Result<()> {
    let mut graphs = Vec::with_capacity(models.len());
    for m in models.iter() {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g);
        let xv = g.constant(x.tensor().clone());
        let out = m.forward(&mut g, &p, xv)?;
        graphs.push((g, p, out));
    }
    let outs: Vec<Tensor> = graphs.iter().map(|(g, _, o)| g.value(*o).clone()).collect();
    let label = PseudoLabel::from_outputs(&outs)?;
    let mut updates = Vec::with_capacity(models.len());
    for (i, (mut g, p, out)) in graphs.into_iter().enumerate() {
        let t = g.constant(label.y_hat.clone());
        let ada = g.mean_abs_diff(out, t)?;
        parts[i].ada = g.value(ada).data()[0];
        if !parts[i].ada.is_finite() {
            return Ok(());
        }
        let loss = g.scale(ada, cfg.lambda_ada * r);
        let grads = g.backward(loss)?;
        updates.push((p, grads));
    }
    for ((m, opt), (p, grads)) in models.iter_mut().zip(opts.iter_mut()).zip(updates) {
        opt.step(m.params_mut(), &p, &grads);
    }
    Ok(())
}

/// One model on the pooled pseudo-pairs of every generator, supervised L1
/// only. With one generator this is the single-generator baseline and
/// matches [`train_collab`] with `K = 1` and zero peer/pseudo-label weights
/// bit for bit.
pub fn train_naive(
    mut model: SrModel,
    ens: &GeneratorEnsemble,
    corpus: &UnpairedCorpus,
    val: &[ImagePair],
    cfg: &CollabConfig,
) -> Result<CollabOutcome> {
    cfg.validate()?;
    check_inputs(std::slice::from_ref(&model), ens, corpus)?;
    let frozen = ens.checksums();
    let mut opt = Adam::new(cfg.adam(), model.params());
    let mut curves = vec![validate_models(std::slice::from_ref(&model), val, 0, LossBreakdown::default())?];
    for step in 0..cfg.steps {
        let synth = synth_batch(ens, corpus, cfg, step)?;
        let (x, y) = if synth.x.len() == 1 {
            (synth.x[0].clone(), synth.y.clone())
        } else {
            let xs: Vec<&ImageBatch> = synth.x.iter().collect();
            let ys: Vec<&ImageBatch> = vec![&synth.y; synth.x.len()];
            (ImageBatch::concat(&xs)?, ImageBatch::concat(&ys)?)
        };
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let xv = g.constant(x.tensor().clone());
        let out = model.forward(&mut g, &p, xv)?;
        let yv = g.constant(y.tensor().clone());
        let sup = g.mean_abs_diff(out, yv)?;
        let total = g.scale(sup, cfg.lambda_sup);
        let sup_value = g.value(sup).data()[0];
        let r = ramp(step, cfg.p_max)?;
        let bd = LossBreakdown::combine(sup_value, 0.0, 0.0, r, cfg);
        check_finite(bd.total, step, std::slice::from_ref(&model), &curves)?;
        let grads = g.backward(total)?;
        opt.step(model.params_mut(), &p, &grads);
        let done = step + 1;
        if done % cfg.val_every == 0 || done == cfg.steps {
            curves.push(validate_models(std::slice::from_ref(&model), val, done, bd)?);
        }
    }
    if ens.checksums() != frozen {
        return Err(Error::Invariant("a frozen generator changed during SR training".into()));
    }
    Ok(CollabOutcome {
        models: vec![model],
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_clamp() {
        assert_eq!(ramp(0, 1000).unwrap(), 0.0);
        assert_eq!(ramp(1000, 1000).unwrap(), 1.0);
        assert_eq!(ramp(250, 1000).unwrap(), 0.25);
        assert_eq!(ramp(2000, 1000).unwrap(), 1.0);
        assert!(ramp(0, 0).is_err());
    }

    #[test]
    fn sup_loss_of_constants() {
        let a = ImageBatch::constant(1, 3, 4, 4, 0.2).unwrap();
        let b = ImageBatch::constant(1, 3, 4, 4, 0.5).unwrap();
        assert!((sup_loss(&a, &b).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(sup_loss(&a, &a).unwrap(), 0.0);
        let c = ImageBatch::constant(1, 3, 4, 5, 0.5).unwrap();
        assert!(matches!(sup_loss(&a, &c), Err(Error::Sizing(_))));
    }

    #[test]
    fn collab_loss_small_cases() {
        let t = |v: f64| Tensor::full(vec![1, 1, 2, 2], v);
        let same = vec![vec![t(0.3), t(0.5)], vec![t(0.1), t(0.5)]];
        assert_eq!(collab_loss(&same, 0).unwrap(), 0.0);
        let off = vec![vec![t(0.3), t(0.6)], vec![t(0.1), t(0.5)]];
        assert!((collab_loss(&off, 0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(collab_loss(&[vec![t(0.3)]], 0).unwrap(), 0.0);
    }

    #[test]
    fn pseudo_label_is_a_mean() {
        let lbl = PseudoLabel::from_outputs(&[Tensor::zeros(vec![1, 1, 2, 2]), Tensor::ones(vec![1, 1, 2, 2])])
            .unwrap();
        assert!(lbl.y_hat.data().iter().all(|&v| v == 0.5));
        assert_eq!(lbl.teacher_count, 2);
        assert!(lbl.gradient_barrier);
        assert!(PseudoLabel::from_outputs(&[]).is_err());
    }

    #[test]
    fn weighted_total_of_reference_components() {
        let cfg = CollabConfig::paper();
        let b = LossBreakdown::combine(0.2, 0.05, 0.1, 0.5, &cfg);
        assert!((b.total - 0.7005).abs() < 1e-15, "{}", b.total);
    }

    #[test]
    fn ablation_arms_set_weights() {
        let cfg = CollabConfig::desk();
        let naive = Ablation::Naive.apply(&cfg);
        assert_eq!((naive.lambda_col, naive.lambda_ada), (0.0, 0.0));
        assert_eq!(Ablation::ClNoAda.apply(&cfg).lambda_ada, 0.0);
        assert_eq!(Ablation::Single.apply(&cfg).k, 1);
        assert_eq!("cl_no_ada".parse::<Ablation>().unwrap(), Ablation::ClNoAda);
        assert!("bogus".parse::<Ablation>().is_err());
    }
}
