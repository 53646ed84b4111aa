//! End-to-end runs on synthetic data held in memory: render, split, train
//! both phases, evaluate.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datasets::{render_synthetic, SyntheticSpec};
use crate::encoder::{EncoderSpec, ReferenceEncoder};
use crate::error::Result;
use crate::eval::{evaluate, EvalConfig};
use crate::sampling::CachedSource;
use crate::trainer::{train_phase1, train_phase2, EpochMetrics, RunContext, TrainConfig, TrainOutcome};
use crate::types::{split_dataset, DatasetManifest, SplitSpec};

/// Sizes of the three synthetic splits, per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub labeled_per_class: usize,
    pub unlabeled_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            labeled_per_class: 4,
            unlabeled_per_class: 200,
            test_per_class: 100,
        }
    }
}

pub struct SyntheticData {
    pub labeled: DatasetManifest,
    pub unlabeled: DatasetManifest,
    pub test: DatasetManifest,
    pub source: CachedSource,
}

/// Renders a training pool and a disjoint test set into memory and splits
/// the pool into labeled and unlabeled parts, balanced per class.
pub fn synthetic_data(spec: &SyntheticSpec, sizes: &SplitSizes, split_seed: u64) -> Result<SyntheticData> {
    let source = CachedSource::new();
    let pool_spec = SyntheticSpec {
        videos_per_class: sizes.labeled_per_class + sizes.unlabeled_per_class,
        ..spec.clone()
    };
    let pool = render_synthetic(&pool_spec, &PathBuf::from("synthetic/train"), |r, v| {
        source.insert(&r.video.path, v.frames);
        Ok(())
    })?;
    let test_spec = SyntheticSpec {
        videos_per_class: sizes.test_per_class,
        seed: spec.seed ^ 0x7e57_5eed_0000_0001,
        ..spec.clone()
    };
    let test = render_synthetic(&test_spec, &PathBuf::from("synthetic/test"), |r, v| {
        source.insert(&r.video.path, v.frames);
        Ok(())
    })?;
    // Half a video of slack so that the floor inside the split lands exactly
    // on the requested count.
    let fraction = (sizes.labeled_per_class as f64 + 0.5) / pool_spec.videos_per_class as f64;
    let (labeled, unlabeled) = split_dataset(&pool, &SplitSpec::balanced(fraction.min(1.0), split_seed))?;
    Ok(SyntheticData {
        labeled,
        unlabeled,
        test,
        source,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seed: u64,
    pub phase1_top1: f64,
    pub phase2_top1: f64,
    pub phase1_metrics: Vec<EpochMetrics>,
    pub phase2_metrics: Vec<EpochMetrics>,
    pub seconds: f64,
}

impl ExperimentResult {
    pub fn final_phase2(&self) -> Option<&EpochMetrics> {
        self.phase2_metrics.last()
    }
}

/// Encoder seed used for a training seed.
pub fn encoder_seed(train_seed: u64) -> u64 {
    train_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(17)
}

/// Phase 1 from a fresh encoder.
pub fn run_phase1(cfg: &TrainConfig, encoder: &EncoderSpec, data: &SyntheticData) -> Result<TrainOutcome> {
    let spec = EncoderSpec {
        drop_path_rate: cfg.drop_path,
        ..encoder.clone()
    };
    let model = ReferenceEncoder::new(spec, encoder_seed(cfg.seed))?;
    train_phase1(cfg, &data.labeled, model, RunContext::new(&data.source))
}

/// Phase 2 from a Phase 1 outcome, then evaluation of both.
pub fn run_phase2(
    cfg: &TrainConfig,
    data: &SyntheticData,
    phase1: &TrainOutcome,
    phase1_top1: f64,
) -> Result<ExperimentResult> {
    let started = Instant::now();
    let init = Checkpoint {
        model: phase1.model.clone(),
        optimizer: Some(phase1.optimizer.clone()),
        epoch: cfg.phase1_epochs,
    };
    let out = train_phase2(cfg, &data.labeled, &data.unlabeled, init, RunContext::new(&data.source))?;
    let eval_cfg = EvalConfig::from_superimage(&cfg.superimage);
    let report = evaluate(&out.model, &data.test, &eval_cfg, &data.source)?;
    Ok(ExperimentResult {
        seed: cfg.seed,
        phase1_top1,
        phase2_top1: report.top1,
        phase1_metrics: phase1.metrics.clone(),
        phase2_metrics: out.metrics,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Phase 1, its evaluation, Phase 2 and its evaluation.
pub fn run_experiment(cfg: &TrainConfig, encoder: &EncoderSpec, data: &SyntheticData) -> Result<ExperimentResult> {
    let started = Instant::now();
    let p1 = run_phase1(cfg, encoder, data)?;
    let eval_cfg = EvalConfig::from_superimage(&cfg.superimage);
    let p1_top1 = evaluate(&p1.model, &data.test, &eval_cfg, &data.source)?.top1;
    let mut result = run_phase2(cfg, data, &p1, p1_top1)?;
    result.seconds = started.elapsed().as_secs_f64();
    Ok(result)
}
