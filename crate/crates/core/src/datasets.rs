//! Datasets: a synthetic moving-shape generator and ingestion of
//! pre-extracted frame directories.
//!
//! In a synthetic video one shape glides across a noisy background. The class
//! is the direction of travel (class `k` moves at angle `k * 360 / C` degrees,
//! counter-clockwise from east, with image y pointing down). Speed, start
//! position, size, shape and colors are drawn per video from the configured
//! ranges and carry no label information, so playing a clip faster or slower
//! never changes its class.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SitarError};
use crate::sampling::frame_path;
use crate::types::{DatasetManifest, ManifestRecord, VideoRef};

pub const DIRECTION_NAMES_8: [&str; 8] = [
    "east",
    "northeast",
    "north",
    "northwest",
    "west",
    "southwest",
    "south",
    "southeast",
];
pub const DIRECTION_NAMES_4: [&str; 4] = ["east", "north", "west", "south"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Square,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    /// Frames are `resolution x resolution`.
    pub resolution: usize,
    /// Half-extent of the shape in pixels.
    pub object_size: (f64, f64),
    pub shapes: Vec<ShapeKind>,
    /// Per-channel range of the background color, in `[0, 1]`.
    pub background_level: (f64, f64),
    /// Per-channel range of the object color, in `[0, 1]`.
    pub object_level: (f64, f64),
    /// Nominal displacement in pixels per frame before jitter.
    pub base_speed: f64,
    /// Multiplicative speed factor range; drawn log-uniformly.
    pub speed_jitter: (f64, f64),
    /// Standard deviation of additive Gaussian pixel noise, in `[0, 1]` units.
    pub noise_std: f64,
    /// Length, in frames of travel, of a fading trail left behind the shape
    /// (a persistence effect, as with long exposures); `0` disables it.
    pub trail: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// A single bright disc with a fading trail on a flat background: the
    /// direction of travel is the only thing that separates classes, and it
    /// stays visible in every frame.
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            videos_per_class: 10,
            frames_per_video: 16,
            resolution: 64,
            object_size: (7.0, 11.0),
            shapes: vec![ShapeKind::Disc],
            background_level: (0.2, 0.2),
            object_level: (0.9, 0.9),
            base_speed: 1.5,
            speed_jitter: (0.5, 2.0),
            noise_std: 0.03,
            trail: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Validates these settings; `fast_frames` is the number of frames the fast pathway
    /// samples, which every video must be able to supply.
    pub fn validate(&self, fast_frames: usize) -> Result<()> {
        let bad = |m: String| Err(SitarError::Config(m));
        if self.num_classes != 4 && self.num_classes != 8 {
            return bad(format!("num_classes must be 4 or 8, got {}", self.num_classes));
        }
        if self.frames_per_video < fast_frames.max(2) {
            return bad(format!(
                "frames_per_video {} is below the fast pathway's {} frames",
                self.frames_per_video, fast_frames
            ));
        }
        if self.videos_per_class == 0 {
            return bad("videos_per_class must be >= 1".into());
        }
        let (s0, s1) = self.object_size;
        if !(s0 > 0.0 && s0 <= s1) || 2.0 * (s1 + 1.0) >= self.resolution as f64 {
            return bad(format!(
                "object_size ({s0}, {s1}) does not fit a {} px frame",
                self.resolution
            ));
        }
        let (j0, j1) = self.speed_jitter;
        if !(j0 > 0.0 && j0 <= j1) || self.base_speed <= 0.0 {
            return bad(format!(
                "speeds must be positive (base {}, jitter ({j0}, {j1}))",
                self.base_speed
            ));
        }
        for (name, (a, b)) in [
            ("background_level", self.background_level),
            ("object_level", self.object_level),
        ] {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
                return bad(format!("{name} ({a}, {b}) must be an ordered range in [0, 1]"));
            }
        }
        if self.shapes.is_empty() {
            return bad("shapes must not be empty".into());
        }
        if !(self.trail >= 0.0) {
            return bad(format!("trail must be >= 0, got {}", self.trail));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let names: &[&str] = if self.num_classes == 4 {
            &DIRECTION_NAMES_4
        } else {
            &DIRECTION_NAMES_8
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Unit displacement `(dx, dy)` of a class in image coordinates.
    pub fn direction(&self, class: usize) -> (f64, f64) {
        let angle = class as f64 * std::f64::consts::TAU / self.num_classes as f64;
        (angle.cos(), -angle.sin())
    }
}

/// Latent parameters of one generated video.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub class: usize,
    pub shape: ShapeKind,
    pub size: f64,
    /// Pixels per frame actually travelled.
    pub speed: f64,
    pub start: (f64, f64),
    pub frames: Vec<RgbImage>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Renders video number `index` of the dataset. Each video has its own random
/// stream, so any subset can be regenerated independently.
pub fn render_video(spec: &SyntheticSpec, class: usize, index: u64) -> SyntheticVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let res = spec.resolution as f64;
    let t_last = (spec.frames_per_video - 1) as f64;

    let shape = spec.shapes[rng.gen_range(0..spec.shapes.len())];
    let size = uniform(&mut rng, spec.object_size);
    let jitter = uniform(&mut rng, (spec.speed_jitter.0.ln(), spec.speed_jitter.1.ln())).exp();
    let (dx, dy) = spec.direction(class);
    // Keep the whole trajectory inside the frame; slow down only if even the
    // longest axis cannot fit the travel.
    let margin = size + 1.0;
    let room = res - 1.0 - 2.0 * margin;
    let axis = dx.abs().max(dy.abs());
    let speed = (spec.base_speed * jitter).min(room / (t_last * axis));
    let (tx, ty) = (dx * speed * t_last, dy * speed * t_last);
    let span = |travel: f64| {
        let lo = margin - travel.min(0.0);
        let hi = res - 1.0 - margin - travel.max(0.0);
        (lo, hi.max(lo))
    };
    let x0 = uniform(&mut rng, span(tx));
    let y0 = uniform(&mut rng, span(ty));
    let bg: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, spec.background_level));
    let fg: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, spec.object_level));
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite noise std");

    let n = spec.resolution;
    // Trail samples at most half a pixel apart, weighted down linearly with age.
    let trail_samples = if spec.trail > 0.0 {
        (spec.trail * speed / 0.5).ceil() as usize
    } else {
        0
    };
    let frames = (0..spec.frames_per_video)
        .map(|t| {
            let mut alpha = vec![0.0f64; n * n];
            for k in 0..=trail_samples {
                let age = if trail_samples == 0 {
                    0.0
                } else {
                    spec.trail * k as f64 / trail_samples as f64
                };
                let weight = 1.0 - age / (spec.trail + 1.0);
                let cx = x0 + dx * speed * (t as f64 - age);
                let cy = y0 + dy * speed * (t as f64 - age);
                let lo = |c: f64| (c - size - 1.0).floor().max(0.0) as usize;
                let hi = |c: f64| ((c + size + 1.0).ceil().max(-1.0) as usize + 1).min(n);
                for y in lo(cy)..hi(cy) {
                    for x in lo(cx)..hi(cx) {
                        let (px, py) = (x as f64 - cx, y as f64 - cy);
                        // Coverage with a one-pixel linear edge for sub-pixel motion.
                        let cover = match shape {
                            ShapeKind::Disc => (size + 0.5 - (px * px + py * py).sqrt()).clamp(0.0, 1.0),
                            ShapeKind::Square => {
                                (size + 0.5 - px.abs()).clamp(0.0, 1.0)
                                    * (size + 0.5 - py.abs()).clamp(0.0, 1.0)
                            }
                        };
                        let a = &mut alpha[y * n + x];
                        *a = a.max(weight * cover);
                    }
                }
            }
            let mut img = RgbImage::new(n as u32, n as u32);
            for (i, a) in alpha.iter().enumerate() {
                let px: [u8; 3] = std::array::from_fn(|c| {
                    let mut v = bg[c] + a * (fg[c] - bg[c]);
                    if spec.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel((i % n) as u32, (i / n) as u32, Rgb(px));
            }
            img
        })
        .collect();
    SyntheticVideo {
        class,
        shape,
        size,
        speed,
        start: (x0, y0),
        frames,
    }
}

/// Identifier of video `j` of class `class`.
pub fn synthetic_video_id(spec: &SyntheticSpec, class: usize, j: usize) -> String {
    format!("{}_{j:05}", spec.class_names()[class])
}

/// Renders the whole dataset in memory, class by class, calling `sink` with
/// each video's manifest record and frames.
pub fn render_synthetic<F>(spec: &SyntheticSpec, out_dir: &Path, mut sink: F) -> Result<DatasetManifest>
where
    F: FnMut(&ManifestRecord, SyntheticVideo) -> Result<()>,
{
    spec.validate(1)?;
    let mut manifest = DatasetManifest::new(spec.num_classes);
    manifest.class_names = spec.class_names();
    for class in 0..spec.num_classes {
        for j in 0..spec.videos_per_class {
            let index = (class * spec.videos_per_class + j) as u64;
            let id = synthetic_video_id(spec, class, j);
            let record = ManifestRecord {
                video: VideoRef {
                    path: out_dir.join(&id),
                    id,
                    frame_count: spec.frames_per_video,
                },
                label: class as i64,
            };
            sink(&record, render_video(spec, class, index))?;
            manifest.records.push(record);
        }
    }
    Ok(manifest)
}

/// Writes every video as numbered PNGs under `out_dir/<id>/` plus
/// `out_dir/manifest.jsonl`, and returns the manifest.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir).map_err(|e| SitarError::io(out_dir, e))?;
    let manifest = render_synthetic(spec, out_dir, |record, video| {
        let dir = &record.video.path;
        fs::create_dir_all(dir).map_err(|e| SitarError::io(dir, e))?;
        for (i, frame) in video.frames.iter().enumerate() {
            let path = frame_path(dir, i);
            frame.save(&path).map_err(|e| SitarError::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    })?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Parses a labels file: one `video_id class_name` pair per line, separated by
/// whitespace or a comma. Blank lines and lines starting with `#` are ignored.
pub fn parse_labels(text: &str, source: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty());
        match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(class), None) => out.push((id.to_string(), class.to_string())),
            _ => {
                return Err(SitarError::format(
                    source,
                    format!("line {}: expected 'video_id class_name'", lineno + 1),
                ))
            }
        }
    }
    Ok(out)
}

/// Checks that `dir` holds exactly `00000.png .. {n-1}.png`; returns the
/// frame count or the list of problems.
fn count_frames(dir: &Path) -> std::result::Result<usize, Vec<String>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => return Err(vec![format!("cannot read directory {}: {e}", dir.display())]),
    };
    let mut problems = Vec::new();
    let mut indices = BTreeSet::new();
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".png") else {
            continue;
        };
        match stem.parse::<usize>() {
            Ok(i) if stem.len() == 5 => {
                indices.insert(i);
            }
            _ => problems.push(format!("unexpected frame file name '{name}'")),
        }
    }
    if indices.is_empty() {
        problems.push("no frames".into());
    }
    let n = indices.iter().next_back().map_or(0, |&m| m + 1);
    let missing: Vec<String> = (0..n)
        .filter(|i| !indices.contains(i))
        .map(|i| format!("{i:05}.png"))
        .collect();
    if !missing.is_empty() {
        problems.push(format!("missing frames {}", missing.join(", ")));
    }
    if problems.is_empty() {
        Ok(n)
    } else {
        Err(problems)
    }
}

/// Builds a manifest from `<root>/<video_id>/NNNNN.png` directories and a
/// labels file. Class indices follow the sorted class names, which are kept in
/// the manifest header. Every video with a numbering problem is reported.
pub fn ingest_frame_dirs(root: &Path, labels_file: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(labels_file).map_err(|e| SitarError::io(labels_file, e))?;
    let labels = parse_labels(&text, labels_file)?;
    if labels.is_empty() {
        return Err(SitarError::Data(format!(
            "labels file {} lists no videos",
            labels_file.display()
        )));
    }
    let classes: BTreeMap<&str, usize> = labels
        .iter()
        .map(|(_, c)| c.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, i))
        .collect();
    let mut manifest = DatasetManifest::new(classes.len());
    manifest.class_names = classes.keys().map(|c| c.to_string()).collect();
    let mut report = Vec::new();
    for (id, class) in &labels {
        let dir: PathBuf = root.join(id);
        match count_frames(&dir) {
            Ok(n) => manifest.records.push(ManifestRecord {
                video: VideoRef {
                    id: id.clone(),
                    path: dir,
                    frame_count: n,
                },
                label: classes[class.as_str()] as i64,
            }),
            Err(problems) => {
                report.extend(problems.into_iter().map(|p| format!("video '{id}': {p}")))
            }
        }
    }
    if !report.is_empty() {
        return Err(SitarError::Data(format!(
            "frame directory violations:\n  {}",
            report.join("\n  ")
        )));
    }
    let violations = crate::types::validate_manifest(&manifest);
    if !violations.is_empty() {
        return Err(SitarError::Data(violations.join("; ")));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_manifest;

    /// Intensity-weighted centroid of pixels that differ clearly from the
    /// frame's median color (the background).
    fn centroid(img: &RgbImage) -> (f64, f64) {
        let mut lum: Vec<u32> = img.pixels().map(|p| p.0.iter().map(|&v| v as u32).sum()).collect();
        let mut sorted = lum.clone();
        sorted.sort_unstable();
        let bg = sorted[sorted.len() / 2] as f64;
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        let w = img.width() as usize;
        for (i, l) in lum.iter_mut().enumerate() {
            let d = (*l as f64 - bg).max(0.0);
            if d > 60.0 {
                sx += d * (i % w) as f64;
                sy += d * (i / w) as f64;
                sw += d;
            }
        }
        (sx / sw, sy / sw)
    }

    /// Nearest compass class of a displacement vector.
    fn direction_class(dx: f64, dy: f64, num_classes: usize) -> usize {
        let angle = (-dy).atan2(dx).rem_euclid(std::f64::consts::TAU);
        let step = std::f64::consts::TAU / num_classes as f64;
        ((angle / step).round() as usize) % num_classes
    }

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            videos_per_class: 3,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn east_moves_right() {
        let spec = small(1);
        for j in 0..5 {
            let v = render_video(&spec, 0, j);
            let xs: Vec<f64> = v.frames.iter().map(|f| centroid(f).0).collect();
            assert!(xs.windows(2).all(|w| w[1] > w[0]), "{xs:?}");
        }
    }

    #[test]
    fn centroid_direction_recovers_every_class_even_subsampled() {
        let spec = small(2);
        for class in 0..8 {
            for j in 0..4 {
                let v = render_video(&spec, class, (class * 10 + j) as u64);
                for stride in [1, 2] {
                    let sub: Vec<&RgbImage> = v.frames.iter().step_by(stride).collect();
                    let (a, b) = (centroid(sub[0]), centroid(sub[sub.len() - 1]));
                    assert_eq!(direction_class(b.0 - a.0, b.1 - a.1, 8), class);
                }
            }
        }
    }

    #[test]
    fn unit_jitter_gives_constant_steps() {
        let spec = SyntheticSpec {
            speed_jitter: (1.0, 1.0),
            noise_std: 0.0,
            ..small(3)
        };
        for class in [0, 3] {
            let v = render_video(&spec, class, 7);
            assert!((v.speed - spec.base_speed).abs() < 1e-12);
            let cs: Vec<(f64, f64)> = v.frames.iter().map(centroid).collect();
            let steps: Vec<f64> = cs
                .windows(2)
                .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
                .collect();
            for s in &steps {
                assert!((s - spec.base_speed).abs() < 0.15, "{steps:?}");
            }
        }
    }

    #[test]
    fn trajectory_stays_in_frame() {
        let spec = SyntheticSpec {
            speed_jitter: (2.0, 2.0),
            ..small(4)
        };
        for class in 0..8 {
            let v = render_video(&spec, class, class as u64);
            let (dx, dy) = spec.direction(class);
            for t in [0.0, 15.0] {
                let x = v.start.0 + dx * v.speed * t;
                let y = v.start.1 + dy * v.speed * t;
                assert!(x - v.size >= 0.0 && x + v.size <= 63.0, "{class} {x}");
                assert!(y - v.size >= 0.0 && y + v.size <= 63.0, "{class} {y}");
            }
        }
    }

    #[test]
    fn generation_is_byte_identical_and_valid() {
        let spec = SyntheticSpec {
            num_classes: 4,
            videos_per_class: 2,
            ..small(5)
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        assert!(validate_manifest(&ma).is_empty());
        assert_eq!(ma.len(), 8);
        assert_eq!(ma.class_names, vec!["east", "north", "west", "south"]);
        for r in &ma.records {
            for i in 0..16 {
                let fa = fs::read(frame_path(&r.video.path, i)).unwrap();
                let fb = fs::read(frame_path(&b.path().join(&r.video.id), i)).unwrap();
                assert_eq!(fa, fb);
            }
        }
        let reread = DatasetManifest::load(&a.path().join("manifest.jsonl")).unwrap();
        assert_eq!(reread, ma);
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec::default().validate(8).is_ok());
        assert!(SyntheticSpec { num_classes: 6, ..Default::default() }.validate(8).is_err());
        assert!(SyntheticSpec { frames_per_video: 7, ..Default::default() }.validate(8).is_err());
    }

    #[test]
    fn ingest_reports_gaps() {
        let root = tempfile::tempdir().unwrap();
        let img = RgbImage::new(4, 4);
        for (id, frames) in [("a", vec![0, 1, 2]), ("b", vec![0, 2]), ("c", vec![0])] {
            let dir = root.path().join(id);
            fs::create_dir_all(&dir).unwrap();
            for i in frames {
                img.save(frame_path(&dir, i)).unwrap();
            }
        }
        let labels = root.path().join("labels.txt");
        fs::write(&labels, "a jump\nc,run\n").unwrap();
        let m = ingest_frame_dirs(root.path(), &labels).unwrap();
        assert_eq!(m.class_names, vec!["jump", "run"]);
        assert_eq!(m.records[0].video.frame_count, 3);
        assert_eq!(m.records[1].label, 1);

        fs::write(&labels, "a jump\nb run\nmissing run\n").unwrap();
        let err = ingest_frame_dirs(root.path(), &labels).unwrap_err().to_string();
        assert!(err.contains("video 'b': missing frames 00001.png"), "{err}");
        assert!(err.contains("video 'missing'"), "{err}");
    }
}
