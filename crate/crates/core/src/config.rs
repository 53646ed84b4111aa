//! Flat `key = value` configuration files.
//!
//! One file carries every setting a command may need: training, super-image
//! layout, encoder shape, synthetic data and run paths. Blank lines and lines
//! starting with `#` are ignored. Unknown keys are errors that name the key,
//! so a typo never silently falls back to a default. Values are resolved in
//! the order defaults, file, `SITAR_SEED`, command-line overrides.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::CropParams;
use crate::datasets::{ShapeKind, SyntheticSpec};
use crate::encoder::EncoderSpec;
use crate::error::{Result, SitarError};
use crate::experiment::SplitSizes;
use crate::trainer::{Phase2Loss, Schedule, TrainConfig};

/// Environment variable that replaces the configured training seed.
pub const SEED_ENV: &str = "SITAR_SEED";

/// File name of the resolved-config snapshot written next to run outputs.
pub const SNAPSHOT_FILE: &str = "resolved_config.txt";

/// Everything a command can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    /// Encoder shape; `input_side`, `num_classes` and `drop_path_rate` are
    /// filled in from the layout, the data and `train` by [`Settings::encoder_spec`].
    pub encoder: EncoderSpec,
    pub synthetic: SyntheticSpec,
    pub sizes: SplitSizes,
    pub split_seed: u64,
    /// Training seeds for multi-seed runs (ablations).
    pub seeds: Vec<u64>,
    pub labeled_manifest: Option<PathBuf>,
    pub unlabeled_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for Settings {
    /// Desk-scale defaults.
    fn default() -> Self {
        Settings {
            train: TrainConfig::desk(),
            encoder: EncoderSpec::desk(8),
            synthetic: SyntheticSpec::default(),
            sizes: SplitSizes::default(),
            split_seed: 0,
            seeds: vec![0, 1, 2],
            labeled_manifest: None,
            unlabeled_manifest: None,
            test_manifest: None,
            init_checkpoint: None,
            out_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| SitarError::Config(format!("bad value '{value}' for '{key}': {e}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (value != "none").then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn show_list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(SitarError::Config(format!("bad value '{value}' for '{key}': expected true or false"))),
    }
}

fn parse_schedule(key: &str, value: &str) -> Result<Schedule> {
    match value {
        "cosine" => Ok(Schedule::Cosine),
        "constant" => Ok(Schedule::Constant),
        _ => Err(SitarError::Config(format!("bad value '{value}' for '{key}': expected cosine or constant"))),
    }
}

fn show_schedule(s: Schedule) -> String {
    match s {
        Schedule::Cosine => "cosine",
        Schedule::Constant => "constant",
    }
    .to_string()
}

fn parse_loss(key: &str, value: &str) -> Result<Phase2Loss> {
    match value {
        "contrastive" => Ok(Phase2Loss::Contrastive),
        "pseudo_consistency" => Ok(Phase2Loss::PseudoConsistency),
        "supervised_only" => Ok(Phase2Loss::SupervisedOnly),
        _ => Err(SitarError::Config(format!(
            "bad value '{value}' for '{key}': expected contrastive, pseudo_consistency or supervised_only"
        ))),
    }
}

fn show_loss(l: Phase2Loss) -> String {
    match l {
        Phase2Loss::Contrastive => "contrastive",
        Phase2Loss::PseudoConsistency => "pseudo_consistency",
        Phase2Loss::SupervisedOnly => "supervised_only",
    }
    .to_string()
}

fn parse_shapes(key: &str, value: &str) -> Result<Vec<ShapeKind>> {
    value
        .split(',')
        .map(|s| match s.trim() {
            "disc" => Ok(ShapeKind::Disc),
            "square" => Ok(ShapeKind::Square),
            other => Err(SitarError::Config(format!(
                "bad value '{other}' for '{key}': expected disc or square"
            ))),
        })
        .collect()
}

fn show_shapes(shapes: &[ShapeKind]) -> String {
    shapes
        .iter()
        .map(|s| match s {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Crop sub-keys switch cropping on; `crop` comes after them in snapshots so
/// that `crop = false` survives a round trip.
fn crop_mut(s: &mut Settings) -> &mut CropParams {
    s.train.crop.get_or_insert_with(CropParams::default)
}

fn crop_ref(s: &Settings) -> CropParams {
    s.train.crop.clone().unwrap_or_default()
}

type Getter = fn(&Settings) -> String;
type Setter = fn(&mut Settings, &str, &str) -> Result<()>;

struct Key {
    name: &'static str,
    get: Getter,
    set: Setter,
}

/// A key whose value parses with `FromStr` and prints with `Display`.
macro_rules! plain {
    ($name:literal, $($field:ident).+) => {
        Key {
            name: $name,
            get: |s| s.$($field).+.to_string(),
            set: |s, k, v| {
                s.$($field).+ = parse(k, v)?;
                Ok(())
            },
        }
    };
}

/// One element of a pair-valued field.
macro_rules! pair {
    ($name:literal, $($field:ident).+, $idx:tt) => {
        Key {
            name: $name,
            get: |s| s.$($field).+.$idx.to_string(),
            set: |s, k, v| {
                s.$($field).+.$idx = parse(k, v)?;
                Ok(())
            },
        }
    };
}

macro_rules! path {
    ($name:literal, $field:ident) => {
        Key {
            name: $name,
            get: |s| show_path(&s.$field),
            set: |s, _, v| {
                s.$field = parse_path(v);
                Ok(())
            },
        }
    };
}

const KEYS: &[Key] = &[
    // Training.
    plain!("phase1_epochs", train.phase1_epochs),
    plain!("phase2_epochs", train.phase2_epochs),
    plain!("labeled_batch", train.labeled_batch),
    plain!("mu", train.mu),
    plain!("temperature", train.temperature),
    plain!("gamma", train.gamma),
    plain!("beta", train.beta),
    plain!("base_lr", train.base_lr),
    plain!("weight_decay", train.weight_decay),
    Key {
        name: "schedule",
        get: |s| show_schedule(s.train.schedule),
        set: |s, k, v| {
            s.train.schedule = parse_schedule(k, v)?;
            Ok(())
        },
    },
    Key {
        name: "grad_clip",
        get: |s| show_opt(&s.train.grad_clip),
        set: |s, k, v| {
            s.train.grad_clip = parse_opt(k, v)?;
            Ok(())
        },
    },
    plain!("label_smoothing", train.label_smoothing),
    plain!("mixup", train.mix.mixup_alpha),
    plain!("cutmix", train.mix.cutmix_alpha),
    plain!("mix_switch_prob", train.mix.switch_prob),
    Key {
        name: "crop_scale_min",
        get: |s| crop_ref(s).scale.0.to_string(),
        set: |s, k, v| {
            crop_mut(s).scale.0 = parse(k, v)?;
            Ok(())
        },
    },
    Key {
        name: "crop_scale_max",
        get: |s| crop_ref(s).scale.1.to_string(),
        set: |s, k, v| {
            crop_mut(s).scale.1 = parse(k, v)?;
            Ok(())
        },
    },
    Key {
        name: "hflip_prob",
        get: |s| crop_ref(s).hflip_prob.to_string(),
        set: |s, k, v| {
            crop_mut(s).hflip_prob = parse(k, v)?;
            Ok(())
        },
    },
    Key {
        name: "crop",
        get: |s| s.train.crop.is_some().to_string(),
        set: |s, k, v| {
            if parse_bool(k, v)? {
                crop_mut(s);
            } else {
                s.train.crop = None;
            }
            Ok(())
        },
    },
    plain!("drop_path", train.drop_path),
    Key {
        name: "pseudo_threshold",
        get: |s| show_opt(&s.train.pseudo_threshold),
        set: |s, k, v| {
            s.train.pseudo_threshold = parse_opt(k, v)?;
            Ok(())
        },
    },
    Key {
        name: "phase2_loss",
        get: |s| show_loss(s.train.phase2_loss),
        set: |s, k, v| {
            s.train.phase2_loss = parse_loss(k, v)?;
            Ok(())
        },
    },
    plain!("consistency_threshold", train.consistency_threshold),
    plain!("seed", train.seed),
    // Super-image layout.
    plain!("fast_frames", train.superimage.fast_frames),
    plain!("slow_frames", train.superimage.slow_frames),
    plain!("fast_frame_side", train.superimage.fast_frame_side),
    plain!("slow_frame_side", train.superimage.slow_frame_side),
    plain!("pad_value", train.superimage.pad_value),
    plain!("order", train.superimage.order),
    // Encoder.
    plain!("encoder_width", encoder.width),
    plain!("encoder_depth", encoder.depth),
    plain!("patch_size", encoder.patch_size),
    plain!("heads", encoder.heads),
    plain!("mlp_ratio", encoder.mlp_ratio),
    plain!("stem_patch", encoder.stem_patch),
    plain!("stem_width", encoder.stem_width),
    // Synthetic data.
    plain!("num_classes", synthetic.num_classes),
    plain!("videos_per_class", synthetic.videos_per_class),
    plain!("frames_per_video", synthetic.frames_per_video),
    plain!("resolution", synthetic.resolution),
    pair!("object_size_min", synthetic.object_size, 0),
    pair!("object_size_max", synthetic.object_size, 1),
    Key {
        name: "shapes",
        get: |s| show_shapes(&s.synthetic.shapes),
        set: |s, k, v| {
            s.synthetic.shapes = parse_shapes(k, v)?;
            Ok(())
        },
    },
    pair!("background_min", synthetic.background_level, 0),
    pair!("background_max", synthetic.background_level, 1),
    pair!("object_level_min", synthetic.object_level, 0),
    pair!("object_level_max", synthetic.object_level, 1),
    plain!("base_speed", synthetic.base_speed),
    pair!("speed_jitter_min", synthetic.speed_jitter, 0),
    pair!("speed_jitter_max", synthetic.speed_jitter, 1),
    plain!("noise_std", synthetic.noise_std),
    plain!("trail", synthetic.trail),
    plain!("data_seed", synthetic.seed),
    // Splits and seeds.
    plain!("labeled_per_class", sizes.labeled_per_class),
    plain!("unlabeled_per_class", sizes.unlabeled_per_class),
    plain!("test_per_class", sizes.test_per_class),
    plain!("split_seed", split_seed),
    Key {
        name: "seeds",
        get: |s| show_list(&s.seeds),
        set: |s, k, v| {
            s.seeds = parse_list(k, v)?;
            Ok(())
        },
    },
    // Paths.
    path!("labeled_manifest", labeled_manifest),
    path!("unlabeled_manifest", unlabeled_manifest),
    path!("test_manifest", test_manifest),
    path!("init_checkpoint", init_checkpoint),
    path!("out_dir", out_dir),
];

/// Every recognized key, in snapshot order.
pub fn known_keys() -> Vec<&'static str> {
    KEYS.iter().map(|k| k.name).collect()
}

impl Settings {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let entry = KEYS
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| SitarError::Config(format!("unknown config key '{key}'")))?;
        (entry.set)(self, key, value.trim())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }

    /// Applies the lines of a config file; `origin` names it in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SitarError::Config(format!("{origin}:{}: expected key = value, got '{line}'", n + 1))
            })?;
            self.set(key.trim(), value).map_err(|e| match e {
                SitarError::Config(m) => SitarError::Config(format!("{origin}:{}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| SitarError::Argument(format!("override '{kv}' is not key=value")))?;
        self.set(key.trim(), value)
    }

    /// Replaces the training seed with `value` from [`SEED_ENV`], if given.
    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<()> {
        match value {
            Some(v) => self.set("seed", v).map_err(|_| {
                SitarError::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer"))
            }),
            None => Ok(()),
        }
    }

    /// Defaults, then `file`, then `SITAR_SEED`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| SitarError::io(path, e))?;
            s.apply_text(&text, &path.display().to_string())?;
        }
        s.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
        for kv in overrides {
            s.apply_override(kv)?;
        }
        Ok(s)
    }

    /// Every key with its current value, one `key = value` per line; reading
    /// it back yields the same settings.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.name, (k.get)(self)))
            .collect()
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| SitarError::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_text()).map_err(|e| SitarError::io(&path, e))?;
        Ok(path)
    }

    /// Encoder spec for `num_classes` classes on this layout.
    pub fn encoder_spec(&self, num_classes: usize) -> Result<EncoderSpec> {
        let spec = EncoderSpec {
            input_side: self.train.superimage.side()?,
            num_classes,
            drop_path_rate: self.train.drop_path,
            ..self.encoder.clone()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        let value = match key {
            "labeled_manifest" => &self.labeled_manifest,
            "unlabeled_manifest" => &self.unlabeled_manifest,
            "test_manifest" => &self.test_manifest,
            "init_checkpoint" => &self.init_checkpoint,
            "out_dir" => &self.out_dir,
            _ => unreachable!("not a path key: {key}"),
        };
        value
            .clone()
            .ok_or_else(|| SitarError::Config(format!("'{key}' must be set")))
    }
}

impl FromStr for Settings {
    type Err = SitarError;

    fn from_str(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        s.apply_text(text, "<config>")?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::superimage::FrameOrder;

    #[test]
    fn snapshot_round_trips() {
        let mut s = Settings::default();
        s.apply_text(
            "# comment\n\ngamma = 0.25\nbase_lr=3e-4\ncrop = false\npseudo_threshold = 0.7\n\
             shapes = disc,square\nseeds = 4,5\norder = reverse\nout_dir = runs/a\nphase2_loss = pseudo_consistency\n",
            "t",
        )
        .unwrap();
        assert_eq!(s.train.gamma, 0.25);
        assert_eq!(s.train.crop, None);
        assert_eq!(s.train.pseudo_threshold, Some(0.7));
        assert_eq!(s.seeds, vec![4, 5]);
        assert_eq!(s.train.superimage.order, FrameOrder::Reverse);
        let back: Settings = s.to_text().parse().unwrap();
        assert_eq!(back, s);
        let defaults: Settings = Settings::default().to_text().parse().unwrap();
        assert_eq!(defaults, Settings::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = "gamma = 0.5\ngama = 0.5\n".parse::<Settings>().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("'gama'") && msg.contains(":2"), "{msg}");
        assert_eq!(err.exit_code(), 2);
        assert!(Settings::default().apply_override("nope=1").is_err());
        assert!(Settings::default().apply_override("gamma").is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        for line in ["mu = four", "crop = maybe", "schedule = linear", "order = sideways", "shapes = blob"] {
            assert!(line.parse::<Settings>().is_err(), "{line}");
        }
    }

    #[test]
    fn precedence_is_file_then_env_then_overrides() {
        let mut s: Settings = "seed = 3\nmu = 2\n".parse().unwrap();
        s.apply_seed_env(Some("9")).unwrap();
        assert_eq!(s.train.seed, 9);
        s.apply_override("seed=11").unwrap();
        assert_eq!(s.train.seed, 11);
        assert_eq!(s.train.mu, 2);
        assert!(s.apply_seed_env(Some("x")).is_err());
    }

    #[test]
    fn floats_survive_the_text_form() {
        let mut s = Settings::default();
        s.train.base_lr = 0.1 + 0.2;
        s.train.temperature = 1.0 / 3.0;
        let back: Settings = s.to_text().parse().unwrap();
        assert_eq!(back.train.base_lr.to_bits(), s.train.base_lr.to_bits());
        assert_eq!(back.train.temperature.to_bits(), s.train.temperature.to_bits());
    }

    #[test]
    fn every_key_is_listed_once() {
        let keys = known_keys();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), keys.len());
        for k in keys {
            assert!(Settings::default().get(k).is_some());
        }
    }
}
