use std::sync::Mutex;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sitar::augment::MixParams;
use sitar::datasets::SyntheticSpec;
use sitar::encoder::EncoderSpec;
use sitar::error::Result;
use sitar::eval::{evaluate, EvalConfig};
use sitar::experiment::{run_experiment, run_phase1, synthetic_data, SplitSizes, SyntheticData};
use sitar::frame::{Frame, FrameSequence};
use sitar::linalg::Matrix;
use sitar::losses::{group_averages, group_contrastive_loss, instance_contrastive_with_grad};
use sitar::sampling::FrameSource;
use sitar::superimage::{apply_order, compose, grid_dims, FrameOrder, SuperImageConfig};
use sitar::trainer::TrainConfig;
use sitar::types::VideoRef;

fn small_data() -> SyntheticData {
    let spec = SyntheticSpec {
        num_classes: 4,
        resolution: 32,
        object_size: (3.0, 5.0),
        seed: 3,
        ..SyntheticSpec::default()
    };
    let sizes = SplitSizes {
        labeled_per_class: 3,
        unlabeled_per_class: 4,
        test_per_class: 3,
    };
    synthetic_data(&spec, &sizes, 1).unwrap()
}

fn small_encoder() -> EncoderSpec {
    EncoderSpec {
        input_side: 24,
        num_classes: 4,
        width: 8,
        depth: 1,
        patch_size: 8,
        heads: 2,
        mlp_ratio: 2,
        drop_path_rate: 0.0,
        stem_patch: 4,
        stem_width: 4,
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        phase1_epochs: 30,
        phase2_epochs: 2,
        labeled_batch: 4,
        mu: 1,
        base_lr: 3e-3,
        mix: MixParams {
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            ..MixParams::default()
        },
        superimage: SuperImageConfig {
            fast_frame_side: 8,
            slow_frame_side: 12,
            ..SuperImageConfig::default()
        },
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn supervised_loss_goes_down() {
    let data = small_data();
    let out = run_phase1(&small_config(), &small_encoder(), &data).unwrap();
    let first = out.metrics.first().unwrap().l_sup;
    let last = out.metrics.last().unwrap().l_sup;
    assert_eq!(out.metrics.len(), 30);
    assert!(last < 0.8 * first, "l_sup {first} -> {last}");
}

#[test]
fn both_phases_run_end_to_end() {
    let data = small_data();
    let r = run_experiment(&small_config(), &small_encoder(), &data).unwrap();
    assert_eq!(r.phase2_metrics.len(), 2);
    for m in &r.phase2_metrics {
        assert!(m.total.is_finite() && m.l_sup.is_finite() && m.l_ic >= 0.0 && m.l_gc >= 0.0);
    }
    assert!((0.0..=1.0).contains(&r.phase2_top1));
    // Same seed, same result.
    let again = run_experiment(&small_config(), &small_encoder(), &data).unwrap();
    assert_eq!(r.phase2_top1, again.phase2_top1);
    let untimed = |ms: &[sitar::trainer::EpochMetrics]| {
        ms.iter().cloned().map(|m| sitar::trainer::EpochMetrics { wall_time: 0.0, ..m }).collect::<Vec<_>>()
    };
    assert_eq!(untimed(&r.phase2_metrics), untimed(&again.phase2_metrics));
}

/// Records how many frames every request asks for.
struct Recording<'a> {
    inner: &'a dyn FrameSource,
    counts: Mutex<Vec<usize>>,
}

impl FrameSource for Recording<'_> {
    fn frames(&self, video: &VideoRef, indices: &[usize]) -> Result<FrameSequence> {
        self.counts.lock().unwrap().push(indices.len());
        self.inner.frames(video, indices)
    }
}

#[test]
fn evaluation_reads_only_the_fast_pathway() {
    let data = small_data();
    let cfg = small_config();
    let model = sitar::encoder::ReferenceEncoder::new(small_encoder(), 1).unwrap();
    let source = Recording {
        inner: &data.source,
        counts: Mutex::new(Vec::new()),
    };
    let report = evaluate(&model, &data.test, &EvalConfig::from_superimage(&cfg.superimage), &source).unwrap();
    let counts = source.counts.into_inner().unwrap();
    assert_eq!(report.num_samples, data.test.len());
    assert_eq!(counts.len(), data.test.len());
    assert!(counts.iter().all(|&n| n == cfg.superimage.fast_frames), "{counts:?}");
}

fn reps(values: &[f64], rows: usize) -> Vec<Vec<f64>> {
    values.chunks(values.len() / rows).map(|c| c.to_vec()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_cell_holds_its_frame(m in 1usize..20, w in 1usize..9, h in 1usize..9, seed in 0u64..100) {
        let frames: Vec<Frame> = (0..m)
            .map(|k| Frame::new(w, h, (0..w * h * 3).map(|i| ((k * 31 + i) % 17) as f32 / 17.0).collect()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ordered = apply_order(FrameSequence::new(frames.clone(), (0..m).collect()), FrameOrder::Random, &mut rng);
        let si = compose(&ordered, 4, -3.0, FrameOrder::Random).unwrap();
        let (cols, pad) = grid_dims(m).unwrap();
        prop_assert_eq!(si.side(), cols * 4);
        prop_assert_eq!(si.pad_count, pad);
        for k in 0..cols * cols {
            let cell = si.cell(k);
            if k < m {
                prop_assert_eq!(&cell.data, &frames[ordered.indices[k]].resize(4, 4).data);
            } else {
                prop_assert!(cell.data.iter().all(|&v| v == -3.0));
            }
        }
    }

    #[test]
    fn contrastive_losses_are_bounded(
        b in 1usize..6,
        values in prop::collection::vec(-5.0f64..5.0, 60),
        labels in prop::collection::vec(prop::option::of(0usize..3), 10),
        tau in prop::sample::select(vec![0.1, 0.5, 1.0]),
    ) {
        let c = 3;
        let all = reps(&values[..2 * b * c], 2 * b);
        prop_assume!(all.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let (zf, zs) = (Matrix::from_rows(&all[..b]), Matrix::from_rows(&all[b..]));
        let ic = instance_contrastive_with_grad(&zf, &zs, tau).unwrap();
        prop_assert!(ic.loss.is_finite() && ic.loss >= 0.0);
        // Each anchor competes with at most 2B - 1 similarities, each within
        // a factor exp(2 / tau) of the positive.
        let bound = ((2 * b - 1) as f64).ln() + 2.0 / tau;
        prop_assert!(ic.loss <= bound + 1e-9, "{} > {}", ic.loss, bound);
        let gc = group_contrastive_loss(&group_averages(&zf, &zs, &labels[..b], &labels[5..5 + b], c), tau);
        prop_assert!(gc.is_finite() && gc >= 0.0);
    }
}
