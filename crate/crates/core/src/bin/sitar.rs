use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sitar::ablation::{run_study, Study};
use sitar::checkpoint::load_checkpoint;
use sitar::config::Settings;
use sitar::datasets::generate_synthetic;
use sitar::encoder::{Encoder, ReferenceEncoder};
use sitar::error::{Result, SitarError};
use sitar::eval::{evaluate, EvalConfig};
use sitar::experiment::encoder_seed;
use sitar::sampling::{frame_path, CachedSource, DiskSource, SampleMode};
use sitar::superimage::{build_super_image, grid_dims, FrameOrder};
use sitar::trainer::{train_phase1, train_phase2, RunContext, TrainOutcome};
use sitar::types::{split_dataset, DatasetManifest, SplitSpec, VideoRef};

#[derive(Parser)]
#[command(name = "sitar", version, about = "Semi-supervised action recognition on super images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic moving-shape dataset and its manifest.
    MakeSynthetic {
        /// Config file; only the synthetic-data keys matter here.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Split a labeled manifest into labeled and unlabeled manifests.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Fraction of videos that keep their labels.
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw uniformly instead of per class.
        #[arg(long)]
        uniform: bool,
        /// Defaults to the manifest's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Supervised training on the labeled manifest.
    TrainPhase1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Semi-supervised training from a Phase 1 checkpoint.
    TrainPhase2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Top-1 accuracy of a checkpoint on a labeled manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Frames per super image; must match training.
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value = "normal")]
        order: FrameOrder,
        /// Report path; defaults to eval_report.json next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the super image of one frame directory as a PNG.
    ComposeSuperimage {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value = "normal")]
        order: FrameOrder,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        frame_side: usize,
        /// Seed for the random order.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an ablation study on synthetic data.
    Ablate {
        #[arg(long)]
        study: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run variants on separate threads, each in its own output directory.
        #[arg(long)]
        parallel: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeSynthetic { spec, out, overrides } => {
            let settings = Settings::resolve(spec.as_deref(), &overrides)?;
            let manifest = generate_synthetic(&settings.synthetic, &out)?;
            settings.write_snapshot(&out)?;
            log::info!("wrote {} videos", manifest.len());
            println!("{}", out.join("manifest.jsonl").display());
        }
        Command::Split {
            manifest,
            fraction,
            seed,
            uniform,
            out_dir,
        } => {
            let full = DatasetManifest::load(&manifest)?;
            let spec = SplitSpec {
                per_class_balanced: !uniform,
                ..SplitSpec::balanced(fraction, seed)
            };
            let (labeled, unlabeled) = split_dataset(&full, &spec)?;
            let dir = out_dir.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
            for (name, m) in [("labeled.jsonl", &labeled), ("unlabeled.jsonl", &unlabeled)] {
                let path = dir.join(name);
                m.save(&path)?;
                println!("{} ({} videos)", path.display(), m.len());
            }
        }
        Command::TrainPhase1 { config, overrides } => {
            let settings = Settings::resolve(Some(&config), &overrides)?;
            let out_dir = settings.require_path("out_dir")?;
            let labeled = DatasetManifest::load(&settings.require_path("labeled_manifest")?)?;
            let spec = settings.encoder_spec(labeled.num_classes)?;
            let model = ReferenceEncoder::new(spec, encoder_seed(settings.train.seed))?;
            settings.write_snapshot(&out_dir)?;
            let source = CachedSource::new();
            let outcome = train_phase1(
                &settings.train,
                &labeled,
                model,
                RunContext::new(&source).with_out_dir(&out_dir),
            )?;
            report_training(&outcome, &out_dir);
        }
        Command::TrainPhase2 { config, overrides } => {
            let settings = Settings::resolve(Some(&config), &overrides)?;
            let out_dir = settings.require_path("out_dir")?;
            let labeled = DatasetManifest::load(&settings.require_path("labeled_manifest")?)?;
            let unlabeled = DatasetManifest::load(&settings.require_path("unlabeled_manifest")?)?;
            let init = load_checkpoint(&settings.require_path("init_checkpoint")?)?;
            let side = settings.train.superimage.side()?;
            if init.model.spec().input_side != side {
                return Err(SitarError::Config(format!(
                    "checkpoint expects {} px super images but the layout gives {side} px",
                    init.model.spec().input_side
                )));
            }
            settings.write_snapshot(&out_dir)?;
            let source = CachedSource::new();
            let outcome = train_phase2(
                &settings.train,
                &labeled,
                &unlabeled,
                init,
                RunContext::new(&source).with_out_dir(&out_dir),
            )?;
            report_training(&outcome, &out_dir);
        }
        Command::Eval {
            checkpoint,
            manifest,
            frames,
            order,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let test = DatasetManifest::load(&manifest)?;
            let (cols, _) = grid_dims(frames)?;
            let side = ckpt.model.spec().input_side;
            if side % cols != 0 {
                return Err(SitarError::Argument(format!(
                    "{frames} frames do not tile the checkpoint's {side} px super image"
                )));
            }
            let cfg = EvalConfig {
                fast_frames: frames,
                frame_side: side / cols,
                order,
                ..EvalConfig::default()
            };
            let report = evaluate(&ckpt.model, &test, &cfg, &DiskSource)?;
            let out = out.unwrap_or_else(|| checkpoint.with_file_name("eval_report.json"));
            let body = serde_json::to_string_pretty(&report).expect("report serializes");
            std::fs::write(&out, body + "\n").map_err(|e| SitarError::io(&out, e))?;
            println!("top1 {:.6}", report.top1);
        }
        Command::ComposeSuperimage {
            video,
            frames,
            order,
            out,
            frame_side,
            seed,
        } => {
            let frame_count = (0..).take_while(|&i| frame_path(&video, i).exists()).count();
            if frame_count == 0 {
                return Err(SitarError::Data(format!(
                    "no frames found in {} (expected 00000.png, 00001.png, ...)",
                    video.display()
                )));
            }
            let video_ref = VideoRef {
                id: video.display().to_string(),
                path: video.clone(),
                frame_count,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let image = build_super_image(
                &DiskSource,
                &video_ref,
                frames,
                frame_side,
                SampleMode::CenterOfSegment,
                order,
                0.0,
                None,
                &mut rng,
            )?;
            image.save_png(&out)?;
            println!("{}", out.display());
        }
        Command::Ablate {
            study,
            config,
            overrides,
            parallel,
        } => {
            let study: Study = study.parse()?;
            let settings = Settings::resolve(config.as_deref(), &overrides)?;
            let out_dir = settings.out_dir.clone().unwrap_or_else(|| PathBuf::from("ablation"));
            settings.write_snapshot(&out_dir)?;
            let report = run_study(study, &settings, parallel)?;
            let (json, _) = report.write(&out_dir)?;
            print!("{}", report.to_table());
            println!("{}", json.display());
        }
    }
    Ok(())
}

fn report_training(outcome: &TrainOutcome, out_dir: &Path) {
    if let Some(m) = outcome.metrics.last() {
        println!(
            "epoch {} l_sup {:.6} l_ic {:.6} l_gc {:.6} total {:.6}",
            m.epoch, m.l_sup, m.l_ic, m.l_gc, m.total
        );
    }
    println!("{}", out_dir.join("checkpoint.ckpt").display());
}
