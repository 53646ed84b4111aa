//! The two training phases.
//!
//! Phase 1 fits the encoder on labeled videos alone: fast-pathway super
//! images with clip-consistent cropping, Mixup/CutMix and label smoothing.
//!
//! Phase 2 continues from a Phase 1 checkpoint. Each step takes `L_b` labeled
//! videos (fast pathway, smoothed cross-entropy) and `mu * L_b` unlabeled
//! videos, each rendered as a fast and a slow super image and passed through
//! the same encoder. Per-pathway argmax pseudo-labels group the unlabeled
//! rows, and the step minimizes
//! `L_sup + gamma * L_instance + beta * L_group`.
//!
//! Labeled batches, unlabeled batches and their augmentation and drop-path
//! decisions come from separate random streams, and the two parts of a step
//! run separate forward/backward passes whose gradients are summed. With
//! `gamma = beta = 0` the unlabeled gradient is exactly zero, so the run
//! follows the supervised-only trajectory step for step.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{mix_batch, smoothed_onehot, CropParams, MixParams};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::encoder::{add_grads, DropPlan, Encoder, Grads, ImageBatch, ParamSet, ReferenceEncoder};
use crate::error::{Result, SitarError};
use crate::linalg::{softmax_in_place, Matrix};
use crate::losses::{
    group_contrastive_with_grad, instance_contrastive_with_grad, pseudo_consistency_with_grad,
    soft_cross_entropy, total_loss,
};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::sampling::{FrameSource, SampleMode};
use crate::superimage::{build_super_image, SuperImage, SuperImageConfig};
use crate::types::{DatasetManifest, ManifestRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// What the unlabeled videos contribute in Phase 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase2Loss {
    /// Instance and group contrastive losses.
    Contrastive,
    /// Instance contrastive loss plus a consistency loss in place of the
    /// group loss: the slow pathway is trained toward the fast pathway's
    /// confident argmax labels.
    PseudoConsistency,
    /// Unlabeled videos are ignored; labeled batches are drawn exactly as in
    /// the other modes.
    SupervisedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// Labeled videos per step (`L_b`).
    pub labeled_batch: usize,
    /// Unlabeled videos per labeled video in a Phase 2 step.
    pub mu: usize,
    pub temperature: f64,
    pub gamma: f64,
    pub beta: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub grad_clip: Option<f64>,
    pub superimage: SuperImageConfig,
    pub label_smoothing: f64,
    pub mix: MixParams,
    pub crop: Option<CropParams>,
    /// Stochastic depth rate used when building the encoder.
    pub drop_path: f64,
    /// Minimum softmax confidence for a pseudo-label; `None` accepts all.
    pub pseudo_threshold: Option<f64>,
    pub phase2_loss: Phase2Loss,
    /// Confidence threshold of the consistency baseline.
    pub consistency_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_epochs: 25,
            phase2_epochs: 50,
            labeled_batch: 8,
            mu: 4,
            temperature: 0.5,
            gamma: 0.6,
            beta: 1.0,
            base_lr: 1e-4,
            weight_decay: 0.05,
            schedule: Schedule::Cosine,
            grad_clip: None,
            superimage: SuperImageConfig::default(),
            label_smoothing: 0.1,
            mix: MixParams::default(),
            crop: Some(CropParams::default()),
            drop_path: 0.1,
            pseudo_threshold: None,
            phase2_loss: Phase2Loss::Contrastive,
            consistency_threshold: 0.95,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the tiny encoder on 96-pixel super images: a larger
    /// learning rate than the full-scale default, and no Mixup/CutMix, which
    /// paste frames of one clip into another and scramble its motion.
    pub fn desk() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            superimage: SuperImageConfig::desk(),
            mix: MixParams {
                mixup_alpha: 0.0,
                cutmix_alpha: 0.0,
                ..MixParams::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SitarError::Config(m));
        if self.labeled_batch == 0 {
            return bad("labeled_batch must be >= 1".into());
        }
        if self.mu == 0 {
            return bad("mu must be >= 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.gamma >= 0.0) || !(self.beta >= 0.0) {
            return bad(format!("gamma and beta must be >= 0, got {} and {}", self.gamma, self.beta));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("base_lr must be > 0 and weight_decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path must be in [0, 1), got {}", self.drop_path));
        }
        if self.mix.mixup_alpha < 0.0 || self.mix.cutmix_alpha < 0.0 {
            return bad("mixing alphas must be >= 0".into());
        }
        if let Some(t) = self.pseudo_threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("pseudo_threshold must be in [0, 1], got {t}"));
            }
        }
        self.superimage.side()?;
        Ok(())
    }

    fn optimizer_config(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ..AdamWConfig::default()
        }
    }

    fn lr(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(step, total, self.base_lr),
            Schedule::Constant => self.base_lr,
        }
    }
}

/// Per-epoch means of the loss components. `wall_time` is kept out of the
/// serialized form so that metrics files of identical runs compare equal;
/// timings go to a separate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_sup: f64,
    pub l_ic: f64,
    pub l_gc: f64,
    pub total: f64,
    /// Step size of the epoch's last step.
    pub lr: f64,
    pub pseudo_label_accept_rate: f64,
    #[serde(skip)]
    pub wall_time: f64,
}

/// Argmax labels (ties to the lowest index) and, when a threshold is given,
/// whether each row's top softmax probability reaches it.
pub fn pseudo_label(logits: &Matrix, threshold: Option<f64>) -> (Vec<usize>, Vec<bool>) {
    let labels = logits.argmax_rows();
    let mask = match threshold {
        None => vec![true; logits.rows],
        Some(t) => (0..logits.rows)
            .map(|i| {
                let mut p = logits.row(i).to_vec();
                softmax_in_place(&mut p);
                p[labels[i]] >= t
            })
            .collect(),
    };
    (labels, mask)
}

pub struct TrainOutcome {
    pub model: ReferenceEncoder,
    pub optimizer: AdamW,
    pub metrics: Vec<EpochMetrics>,
}

/// Called after every optimizer step with the global step number (from 1)
/// and the updated parameters.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &ParamSet);

/// Where a run reads frames from and what it writes.
pub struct RunContext<'a> {
    pub source: &'a dyn FrameSource,
    /// Receives `metrics.jsonl`, `timing.jsonl` and `checkpoint.ckpt`.
    pub out_dir: Option<PathBuf>,
    pub on_step: Option<StepHook<'a>>,
}

impl<'a> RunContext<'a> {
    pub fn new(source: &'a dyn FrameSource) -> Self {
        RunContext {
            source,
            out_dir: None,
            on_step: None,
        }
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn with_hook(mut self, hook: StepHook<'a>) -> Self {
        self.on_step = Some(hook);
        self
    }
}

const PHASE1_STREAM: u64 = 1;
const LABELED_STREAM: u64 = 2;
const UNLABELED_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Endless reshuffled passes over `0..n`.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Cycler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn take(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn fast_images(
    cfg: &TrainConfig,
    source: &dyn FrameSource,
    records: &[&ManifestRecord],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SuperImage>> {
    let si = &cfg.superimage;
    records
        .iter()
        .map(|r| {
            build_super_image(
                source,
                &r.video,
                si.fast_frames,
                si.fast_frame_side,
                SampleMode::RandomInSegment,
                si.order,
                si.pad_value,
                cfg.crop.as_ref(),
                rng,
            )
        })
        .collect()
}

fn slow_images(
    cfg: &TrainConfig,
    source: &dyn FrameSource,
    records: &[&ManifestRecord],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SuperImage>> {
    let si = &cfg.superimage;
    records
        .iter()
        .map(|r| {
            build_super_image(
                source,
                &r.video,
                si.slow_frames,
                si.slow_frame_side,
                SampleMode::RandomInSegment,
                si.order,
                si.pad_value,
                cfg.crop.as_ref(),
                rng,
            )
        })
        .collect()
}

fn class_of(record: &ManifestRecord, num_classes: usize) -> Result<usize> {
    match record.class() {
        Some(c) if c < num_classes => Ok(c),
        _ => Err(SitarError::Data(format!(
            "video '{}' has label {} outside [0, {num_classes})",
            record.video.id, record.label
        ))),
    }
}

/// Writes per-epoch artifacts into the run directory.
struct RunLog {
    dir: Option<PathBuf>,
}

impl RunLog {
    fn start(dir: Option<&Path>) -> Result<Self> {
        if let Some(dir) = dir {
            fs::create_dir_all(dir).map_err(|e| SitarError::io(dir, e))?;
            for name in ["metrics.jsonl", "timing.jsonl"] {
                let p = dir.join(name);
                fs::write(&p, "").map_err(|e| SitarError::io(&p, e))?;
            }
        }
        Ok(RunLog {
            dir: dir.map(Path::to_path_buf),
        })
    }

    fn append(&self, name: &str, line: &str) -> Result<()> {
        if let Some(dir) = &self.dir {
            let p = dir.join(name);
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(&p)
                .map_err(|e| SitarError::io(&p, e))?;
            writeln!(f, "{line}").map_err(|e| SitarError::io(&p, e))?;
        }
        Ok(())
    }

    fn epoch(&self, m: &EpochMetrics, model: &ReferenceEncoder, opt: &AdamW) -> Result<()> {
        for v in [m.l_sup, m.l_ic, m.l_gc, m.total, m.lr, m.pseudo_label_accept_rate] {
            if !v.is_finite() {
                return Err(SitarError::Numeric(format!("non-finite metric in epoch {}", m.epoch)));
            }
        }
        log::info!(
            "epoch {:>3}  sup {:.4}  ic {:.4}  gc {:.4}  total {:.4}  lr {:.2e}  accept {:.3}  {:.1}s",
            m.epoch,
            m.l_sup,
            m.l_ic,
            m.l_gc,
            m.total,
            m.lr,
            m.pseudo_label_accept_rate,
            m.wall_time
        );
        self.append("metrics.jsonl", &serde_json::to_string(m).expect("metrics serialize"))?;
        self.append(
            "timing.jsonl",
            &format!("{{\"epoch\":{},\"wall_time\":{}}}", m.epoch, m.wall_time),
        )?;
        if let Some(dir) = &self.dir {
            save_checkpoint(model, Some(opt), m.epoch, &dir.join("checkpoint.ckpt"))?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct Accum {
    sup: f64,
    ic: f64,
    gc: f64,
    total: f64,
    accepted: usize,
    pseudo_rows: usize,
    steps: usize,
}

impl Accum {
    fn finish(&self, epoch: usize, lr: f64, started: Instant) -> EpochMetrics {
        let n = self.steps.max(1) as f64;
        EpochMetrics {
            epoch,
            l_sup: self.sup / n,
            l_ic: self.ic / n,
            l_gc: self.gc / n,
            total: self.total / n,
            lr,
            pseudo_label_accept_rate: if self.pseudo_rows == 0 {
                0.0
            } else {
                self.accepted as f64 / self.pseudo_rows as f64
            },
            wall_time: started.elapsed().as_secs_f64(),
        }
    }
}

/// Supervised training on the labeled manifest. An epoch is one shuffled pass
/// over the labeled videos.
pub fn train_phase1(
    cfg: &TrainConfig,
    labeled: &DatasetManifest,
    mut model: ReferenceEncoder,
    mut ctx: RunContext<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(SitarError::Config("phase 1 needs a nonempty labeled manifest".into()));
    }
    let num_classes = model.spec().num_classes;
    let targets: Vec<usize> = labeled
        .records
        .iter()
        .map(|r| class_of(r, num_classes))
        .collect::<Result<_>>()?;
    let log = RunLog::start(ctx.out_dir.as_deref())?;
    let mut rng = stream(cfg.seed, PHASE1_STREAM);
    let mut opt = AdamW::new(cfg.optimizer_config(), model.params());
    let steps_per_epoch = labeled.len().div_ceil(cfg.labeled_batch);
    let total_steps = steps_per_epoch * cfg.phase1_epochs;
    let mut step = 0;
    let mut lr = cfg.base_lr;
    let mut metrics = Vec::with_capacity(cfg.phase1_epochs);
    for epoch in 1..=cfg.phase1_epochs {
        let started = Instant::now();
        let mut acc = Accum::default();
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.labeled_batch) {
            let records: Vec<&ManifestRecord> = chunk.iter().map(|&i| &labeled.records[i]).collect();
            let images = fast_images(cfg, ctx.source, &records, &mut rng)?;
            let soft: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| smoothed_onehot(targets[i], num_classes, cfg.label_smoothing))
                .collect();
            let (images, soft) = mix_batch(&cfg.mix, &images, &soft, &mut rng);
            let batch = ImageBatch::from_super_images(&images)?;
            let plan = model.sample_drop_plan(batch.count, &mut rng);
            let (logits, cache) = model.forward(&batch, &plan)?;
            let (loss, dlogits) = soft_cross_entropy(&logits, &soft)?;
            let grads = model.backward(&cache, &dlogits);
            lr = cfg.lr(step, total_steps);
            opt.update(model.params_mut(), &grads, lr);
            step += 1;
            if let Some(hook) = ctx.on_step.as_mut() {
                hook(step, model.params());
            }
            acc.sup += loss;
            acc.total += loss;
            acc.steps += 1;
        }
        let m = acc.finish(epoch, lr, started);
        log.epoch(&m, &model, &opt)?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        metrics,
    })
}

/// Pseudo-labels of an unlabeled batch per pathway; `None` marks rows that
/// failed the confidence threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub fast: Vec<Option<usize>>,
    pub slow: Vec<Option<usize>>,
}

impl PseudoLabels {
    /// Argmax labels of fast and slow logits, thresholded if asked.
    pub fn from_logits(zf: &Matrix, zs: &Matrix, threshold: Option<f64>) -> Self {
        let keep = |z: &Matrix| -> Vec<Option<usize>> {
            let (labels, mask) = pseudo_label(z, threshold);
            labels.into_iter().zip(mask).map(|(l, ok)| ok.then_some(l)).collect()
        };
        PseudoLabels {
            fast: keep(zf),
            slow: keep(zs),
        }
    }

    pub fn accepted(&self) -> usize {
        self.fast.iter().chain(&self.slow).filter(|l| l.is_some()).count()
    }
}

/// Loss terms of one Phase 2 step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTerms {
    pub sup: f64,
    pub ic: f64,
    pub gc: f64,
    pub total: f64,
    /// Pseudo-labels accepted and considered.
    pub accepted: usize,
    pub pseudo_rows: usize,
    /// Labels used by the group loss, when it ran.
    pub pseudo: Option<PseudoLabels>,
}

/// Losses and logit gradients of one unlabeled batch.
struct UnlabeledTerms {
    ic: f64,
    gc: f64,
    accepted: usize,
    rows: usize,
    pseudo: Option<PseudoLabels>,
    dlogits: Matrix,
}

fn unlabeled_terms(
    cfg: &TrainConfig,
    logits: &Matrix,
    n: usize,
    num_classes: usize,
    fixed: Option<&PseudoLabels>,
) -> Result<UnlabeledTerms> {
    let zf = logits.slice_rows(0, n);
    let zs = logits.slice_rows(n, 2 * n);
    let ic = instance_contrastive_with_grad(&zf, &zs, cfg.temperature)?;
    let mut dfast = ic.grad_fast;
    let mut dslow = ic.grad_slow;
    for m in [&mut dfast, &mut dslow] {
        m.data.iter_mut().for_each(|g| *g *= cfg.gamma);
    }
    let (gc, accepted, rows, pseudo) = match cfg.phase2_loss {
        Phase2Loss::Contrastive => {
            let labels = match fixed {
                Some(l) => l.clone(),
                None => PseudoLabels::from_logits(&zf, &zs, cfg.pseudo_threshold),
            };
            let g = group_contrastive_with_grad(&zf, &zs, &labels.fast, &labels.slow, num_classes, cfg.temperature)?;
            for (d, s) in dfast.data.iter_mut().zip(&g.grad_fast.data) {
                *d += cfg.beta * s;
            }
            for (d, s) in dslow.data.iter_mut().zip(&g.grad_slow.data) {
                *d += cfg.beta * s;
            }
            (g.loss, labels.accepted(), 2 * n, Some(labels))
        }
        Phase2Loss::PseudoConsistency => {
            let (loss, dstrong, accepted) = pseudo_consistency_with_grad(&zf, &zs, cfg.consistency_threshold)?;
            for (d, s) in dslow.data.iter_mut().zip(&dstrong.data) {
                *d += cfg.beta * s;
            }
            (loss, accepted, n, None)
        }
        Phase2Loss::SupervisedOnly => unreachable!("no unlabeled terms in supervised-only mode"),
    };
    Ok(UnlabeledTerms {
        ic: ic.loss,
        gc,
        accepted,
        rows,
        pseudo,
        dlogits: Matrix::vstack(&[&dfast, &dslow]),
    })
}

/// Objective of one Phase 2 step and its gradient.
///
/// `labeled` is a batch of fast super images with soft targets. `unlabeled`
/// holds the fast super images of `n` videos followed by their slow super
/// images; batches of fewer than two videos contribute nothing. Pseudo-labels
/// are computed from the current logits unless `fixed` supplies them (they
/// are constants either way: no gradient flows through the argmax).
pub fn phase2_step(
    model: &ReferenceEncoder,
    cfg: &TrainConfig,
    labeled: (&ImageBatch, &DropPlan),
    targets: &[Vec<f64>],
    unlabeled: Option<(&ImageBatch, &DropPlan)>,
    fixed: Option<&PseudoLabels>,
) -> Result<(StepTerms, Grads)> {
    let (logits, cache) = model.forward(labeled.0, labeled.1)?;
    let (sup, dlogits) = soft_cross_entropy(&logits, targets)?;
    let mut grads = model.backward(&cache, &dlogits);
    drop(cache);
    let mut terms = StepTerms {
        sup,
        ic: 0.0,
        gc: 0.0,
        total: sup,
        accepted: 0,
        pseudo_rows: 0,
        pseudo: None,
    };
    if let Some((batch, plan)) = unlabeled {
        let n = batch.count / 2;
        if n >= 2 && cfg.phase2_loss != Phase2Loss::SupervisedOnly {
            let (logits, cache) = model.forward(batch, plan)?;
            let u = unlabeled_terms(cfg, &logits, n, model.spec().num_classes, fixed)?;
            add_grads(&mut grads, &model.backward(&cache, &u.dlogits));
            terms.ic = u.ic;
            terms.gc = u.gc;
            terms.accepted = u.accepted;
            terms.pseudo_rows = u.rows;
            terms.pseudo = u.pseudo;
            terms.total = total_loss(sup, u.ic, u.gc, cfg.gamma, cfg.beta);
        }
    }
    Ok((terms, grads))
}

/// Semi-supervised training from `init`. An epoch is one shuffled pass over
/// the unlabeled videos in batches of `mu * labeled_batch`; labeled batches
/// cycle through their own reshuffled passes. The optimizer state starts
/// fresh with its own schedule.
pub fn train_phase2(
    cfg: &TrainConfig,
    labeled: &DatasetManifest,
    unlabeled: &DatasetManifest,
    init: Checkpoint,
    mut ctx: RunContext<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(SitarError::Config("phase 2 needs a nonempty labeled manifest".into()));
    }
    let mut model = init.model;
    let num_classes = model.spec().num_classes;
    let targets: Vec<usize> = labeled
        .records
        .iter()
        .map(|r| class_of(r, num_classes))
        .collect::<Result<_>>()?;
    let use_unlabeled = !unlabeled.is_empty() && cfg.phase2_loss != Phase2Loss::SupervisedOnly;
    if unlabeled.is_empty() {
        log::warn!("unlabeled manifest is empty; phase 2 reduces to supervised fine-tuning");
    }
    let unl_batch = cfg.mu * cfg.labeled_batch;
    let steps_per_epoch = if unlabeled.is_empty() {
        labeled.len().div_ceil(cfg.labeled_batch)
    } else {
        unlabeled.len().div_ceil(unl_batch)
    };
    let total_steps = steps_per_epoch * cfg.phase2_epochs;
    let log = RunLog::start(ctx.out_dir.as_deref())?;
    let mut lab_rng = stream(cfg.seed, LABELED_STREAM);
    let mut unl_rng = stream(cfg.seed, UNLABELED_STREAM);
    let mut lab_cycle = Cycler::new(labeled.len());
    let mut opt = AdamW::new(cfg.optimizer_config(), model.params());
    let mut step = 0;
    let mut lr = cfg.base_lr;
    let mut metrics = Vec::with_capacity(cfg.phase2_epochs);
    for epoch in 1..=cfg.phase2_epochs {
        let started = Instant::now();
        let mut acc = Accum::default();
        let mut unl_order: Vec<usize> = (0..unlabeled.len()).collect();
        if use_unlabeled {
            unl_order.shuffle(&mut unl_rng);
        }
        for s in 0..steps_per_epoch {
            // Labeled part.
            let idx = lab_cycle.take(cfg.labeled_batch, &mut lab_rng);
            let records: Vec<&ManifestRecord> = idx.iter().map(|&i| &labeled.records[i]).collect();
            let images = fast_images(cfg, ctx.source, &records, &mut lab_rng)?;
            let soft: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| smoothed_onehot(targets[i], num_classes, cfg.label_smoothing))
                .collect();
            let lab_batch = ImageBatch::from_super_images(&images)?;
            let lab_plan = model.sample_drop_plan(lab_batch.count, &mut lab_rng);

            // Unlabeled part: fast rows, then slow rows of the same videos.
            let chunk: &[usize] = if use_unlabeled {
                let lo = s * unl_batch;
                &unl_order[lo..(lo + unl_batch).min(unl_order.len())]
            } else {
                &[]
            };
            let unl = if chunk.len() >= 2 {
                let records: Vec<&ManifestRecord> = chunk.iter().map(|&i| &unlabeled.records[i]).collect();
                let mut images = fast_images(cfg, ctx.source, &records, &mut unl_rng)?;
                images.extend(slow_images(cfg, ctx.source, &records, &mut unl_rng)?);
                let batch = ImageBatch::from_super_images(&images)?;
                let plan = model.sample_drop_plan(batch.count, &mut unl_rng);
                Some((batch, plan))
            } else {
                None
            };
            let (terms, grads) = phase2_step(
                &model,
                cfg,
                (&lab_batch, &lab_plan),
                &soft,
                unl.as_ref().map(|(b, p)| (b, p)),
                None,
            )?;
            acc.accepted += terms.accepted;
            acc.pseudo_rows += terms.pseudo_rows;

            lr = cfg.lr(step, total_steps);
            opt.update(model.params_mut(), &grads, lr);
            step += 1;
            if let Some(hook) = ctx.on_step.as_mut() {
                hook(step, model.params());
            }
            acc.sup += terms.sup;
            acc.ic += terms.ic;
            acc.gc += terms.gc;
            acc.total += terms.total;
            acc.steps += 1;
        }
        let m = acc.finish(epoch, lr, started);
        log.epoch(&m, &model, &opt)?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_label_examples() {
        let m = Matrix::from_rows(&[vec![0.1, 0.9, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.01, 0.0]]);
        let (labels, mask) = pseudo_label(&m, None);
        assert_eq!(labels, vec![1, 0, 1]);
        assert_eq!(mask, vec![true; 3]);
        let (_, mask) = pseudo_label(&m, Some(0.9));
        // Softmax oracle: the largest probability of each row is well below 0.9.
        for i in 0..3 {
            let row = m.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let top = row.iter().cloned().fold(f64::MIN, f64::max).exp() / z;
            assert_eq!(mask[i], top >= 0.9);
        }
        assert_eq!(mask, vec![false; 3]);
        let confident = Matrix::from_rows(&[vec![10.0, 0.0]]);
        assert_eq!(pseudo_label(&confident, Some(0.9)).1, vec![true]);
    }

    #[test]
    fn cycler_visits_each_index_once_per_pass() {
        let mut rng = stream(0, 9);
        let mut c = Cycler::new(5);
        let mut first = c.take(3, &mut rng);
        first.extend(c.take(2, &mut rng));
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.take(7, &mut rng).len(), 7);
    }

    #[test]
    fn default_config_is_valid_and_checked() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { mu: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn metrics_omit_wall_time() {
        let m = EpochMetrics {
            epoch: 1,
            l_sup: 1.0,
            l_ic: 0.0,
            l_gc: 0.0,
            total: 1.0,
            lr: 1e-4,
            pseudo_label_accept_rate: 0.0,
            wall_time: 3.5,
        };
        assert!(!serde_json::to_string(&m).unwrap().contains("wall_time"));
    }
}
