//! Desk-scale run for tuning: `cargo run --release --example desk -- key=value ...`

use std::collections::HashMap;
use std::time::Instant;

use sitar::augment::{CropParams, MixParams};
use sitar::datasets::{ShapeKind, SyntheticSpec};
use sitar::encoder::EncoderSpec;
use sitar::eval::{evaluate, EvalConfig};
use sitar::experiment::{run_phase1, run_phase2, synthetic_data, SplitSizes};
use sitar::superimage::SuperImageConfig;
use sitar::trainer::{Phase2Loss, TrainConfig};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map_or(d, |v| v.parse().unwrap());
    let mut spec = SyntheticSpec::default();
    spec.noise_std = get("noise", spec.noise_std);
    spec.seed = get("data_seed", 0.0) as u64;
    spec.object_size = (get("size_min", spec.object_size.0), get("size_max", spec.object_size.1));
    spec.base_speed = get("speed", spec.base_speed);
    spec.trail = get("trail", spec.trail);
    spec.background_level = (get("bg_min", spec.background_level.0), get("bg_max", spec.background_level.1));
    spec.object_level = (get("obj_min", spec.object_level.0), get("obj_max", spec.object_level.1));
    match args.get("shape").map(String::as_str) {
        Some("disc") => spec.shapes = vec![ShapeKind::Disc],
        Some("square") => spec.shapes = vec![ShapeKind::Square],
        _ => {}
    }
    let sizes = SplitSizes {
        labeled_per_class: get("lab", 4.0) as usize,
        unlabeled_per_class: get("unl", 200.0) as usize,
        test_per_class: get("test", 100.0) as usize,
    };
    let t = Instant::now();
    let data = synthetic_data(&spec, &sizes, 0).unwrap();
    println!("data {:?}", t.elapsed());
    let mut enc = EncoderSpec::desk(8);
    enc.width = get("width", enc.width as f64) as usize;
    enc.depth = get("depth", enc.depth as f64) as usize;
    enc.heads = get("heads", enc.heads as f64) as usize;
    enc.patch_size = get("patch", enc.patch_size as f64) as usize;
    enc.stem_patch = get("stem_patch", enc.stem_patch as f64) as usize;
    enc.stem_width = get("stem_width", enc.stem_width as f64) as usize;
    let cfg = TrainConfig {
        phase1_epochs: get("p1", 25.0) as usize,
        phase2_epochs: get("p2", 50.0) as usize,
        labeled_batch: get("lb", 8.0) as usize,
        mu: get("mu", 4.0) as usize,
        gamma: get("gamma", 0.6),
        beta: get("beta", 1.0),
        base_lr: get("lr", 1e-3),
        weight_decay: get("wd", 0.05),
        superimage: SuperImageConfig::desk(),
        crop: (get("crop", 1.0) > 0.0).then(|| CropParams {
            scale: (get("crop_min", 0.6), 1.0),
            ..CropParams::default()
        }),
        mix: MixParams {
            mixup_alpha: get("mixup", 0.0),
            cutmix_alpha: get("cutmix", 0.0),
            ..MixParams::default()
        },
        drop_path: get("dp", 0.1),
        phase2_loss: match args.get("mode").map(String::as_str) {
            Some("sup") => Phase2Loss::SupervisedOnly,
            Some("pc") => Phase2Loss::PseudoConsistency,
            _ => Phase2Loss::Contrastive,
        },
        seed: get("seed", 0.0) as u64,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let p1 = run_phase1(&cfg, &enc, &data).unwrap();
    let ev = EvalConfig::from_superimage(&cfg.superimage);
    let train_acc = evaluate(&p1.model, &data.labeled, &ev, &data.source).unwrap().top1;
    let top1 = evaluate(&p1.model, &data.test, &ev, &data.source).unwrap().top1;
    println!("phase1 {:?} train {train_acc:.3} test {top1:.3}", t.elapsed());
    if cfg.phase2_epochs > 0 {
        let r = run_phase2(&cfg, &data, &p1, top1).unwrap();
        println!("phase2 {:.1}s test {:.3} (phase1 {:.3})", r.seconds, r.phase2_top1, r.phase1_top1);
    }
}
