//! Top-1 evaluation through the fast pathway only: one center-sampled,
//! unaugmented super image per video.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, ImageBatch};
use crate::error::{Result, SitarError};
use crate::linalg::{argmax, Matrix};
use crate::sampling::{FrameSource, SampleMode};
use crate::superimage::{build_super_image, FrameOrder, SuperImageConfig};
use crate::types::DatasetManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub fast_frames: usize,
    pub frame_side: usize,
    pub pad_value: f32,
    /// Frame order inside the super image; matches training for order studies.
    pub order: FrameOrder,
    pub batch_size: usize,
}

impl EvalConfig {
    pub fn from_superimage(si: &SuperImageConfig) -> Self {
        EvalConfig {
            fast_frames: si.fast_frames,
            frame_side: si.fast_frame_side,
            pad_value: si.pad_value,
            order: si.order,
            batch_size: 64,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            order: FrameOrder::Normal,
            ..Self::from_superimage(&SuperImageConfig::default())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub per_class_acc: Vec<f64>,
    pub num_samples: usize,
    pub wall_time_per_video: f64,
}

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
pub fn top1(logits: &Matrix, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows, labels.len(), "one label per row");
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Logits of every video in manifest order.
pub fn predict<E: Encoder>(
    model: &E,
    manifest: &DatasetManifest,
    cfg: &EvalConfig,
    source: &dyn FrameSource,
) -> Result<Matrix> {
    let c = model.spec().num_classes;
    let mut out = Matrix::zeros(0, c);
    for chunk in manifest.records.chunks(cfg.batch_size.max(1)) {
        let images = chunk
            .iter()
            .map(|r| {
                // Only consulted for random frame order; fixed for repeatability.
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                build_super_image(
                    source,
                    &r.video,
                    cfg.fast_frames,
                    cfg.frame_side,
                    SampleMode::CenterOfSegment,
                    cfg.order,
                    cfg.pad_value,
                    None,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = ImageBatch::from_super_images(&images)?;
        let (logits, _) = model.forward(&batch, &model.eval_plan(batch.count))?;
        out = Matrix::vstack(&[&out, &logits]);
    }
    Ok(out)
}

pub fn evaluate<E: Encoder>(
    model: &E,
    manifest: &DatasetManifest,
    cfg: &EvalConfig,
    source: &dyn FrameSource,
) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(SitarError::Data("cannot evaluate an empty manifest".into()));
    }
    let c = model.spec().num_classes;
    let labels: Vec<usize> = manifest
        .records
        .iter()
        .map(|r| match r.class() {
            Some(y) if y < c => Ok(y),
            _ => Err(SitarError::Data(format!(
                "evaluation needs labels in [0, {c}); video '{}' has {}",
                r.video.id, r.label
            ))),
        })
        .collect::<Result<_>>()?;
    let started = Instant::now();
    let logits = predict(model, manifest, cfg, source)?;
    let elapsed = started.elapsed().as_secs_f64();
    let mut hits = vec![0usize; c];
    let mut counts = vec![0usize; c];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        if argmax(logits.row(i)) == y {
            hits[y] += 1;
        }
    }
    Ok(EvalReport {
        top1: top1(&logits, &labels),
        per_class_acc: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
            .collect(),
        num_samples: labels.len(),
        wall_time_per_video: elapsed / labels.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top1_examples() {
        let always_zero = Matrix::from_rows(&vec![vec![1.0, 0.0, 0.0, 0.0]; 8]);
        let balanced: Vec<usize> = (0..8).map(|i| i % 4).collect();
        assert_eq!(top1(&always_zero, &balanced), 0.25);

        let onehot = Matrix::from_rows(
            &balanced
                .iter()
                .map(|&y| (0..4).map(|c| if c == y { 1.0 } else { 0.0 }).collect())
                .collect::<Vec<_>>(),
        );
        assert_eq!(top1(&onehot, &balanced), 1.0);

        // Ten rows, the first seven predicted correctly.
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let pick = if i < 7 { y } else { (y + 1) % 3 };
                (0..3).map(|c| if c == pick { 2.0 } else { 0.0 }).collect()
            })
            .collect();
        assert!((top1(&Matrix::from_rows(&rows), &labels) - 0.7).abs() < 1e-15);

        // Exact ties go to the lowest index.
        let tie = Matrix::from_rows(&[vec![1.0, 1.0]]);
        assert_eq!(top1(&tie, &[0]), 1.0);
    }
}
