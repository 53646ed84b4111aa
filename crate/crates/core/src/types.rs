//! Dataset manifests and labeled/unlabeled splitting.
//!
//! A manifest is a list of frame-directory videos with an integer label each,
//! where [`UNLABELED`] marks videos whose label is withheld. On disk it is a
//! JSON Lines file: the first line is a header `{"num_classes": C}` (plus an
//! optional `class_names` array), every following line one record
//! `{"id", "path", "frames", "label"}`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SitarError};

/// Label value of a record in the unlabeled split.
pub const UNLABELED: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRef {
    pub id: String,
    pub path: PathBuf,
    pub frame_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub video: VideoRef,
    pub label: i64,
}

impl ManifestRecord {
    pub fn is_labeled(&self) -> bool {
        self.label != UNLABELED
    }

    /// Class index for labeled records.
    pub fn class(&self) -> Option<usize> {
        usize::try_from(self.label).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub num_classes: usize,
    /// Optional human-readable class names, indexed by class.
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    path: PathBuf,
    frames: usize,
    label: i64,
}

impl DatasetManifest {
    pub fn new(num_classes: usize) -> Self {
        DatasetManifest {
            records: Vec::new(),
            num_classes,
            class_names: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_labeled(&self) -> usize {
        self.records.iter().filter(|r| r.is_labeled()).count()
    }

    /// Same header, different records.
    pub fn with_records(&self, records: Vec<ManifestRecord>) -> Self {
        DatasetManifest {
            records,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = HeaderLine {
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for r in &self.records {
            let line = RecordLine {
                id: r.video.id.clone(),
                path: r.video.path.clone(),
                frames: r.video.frame_count,
                label: r.label,
            };
            out.push_str(&serde_json::to_string(&line).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, source: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| SitarError::format(source, "empty manifest (missing header line)"))?;
        let header: HeaderLine = serde_json::from_str(first)
            .map_err(|e| SitarError::format(source, format!("bad header line: {e}")))?;
        let mut manifest = DatasetManifest::new(header.num_classes);
        manifest.class_names = header.class_names;
        for (lineno, line) in lines {
            let rec: RecordLine = serde_json::from_str(line).map_err(|e| {
                SitarError::format(source, format!("line {}: {e}", lineno + 1))
            })?;
            manifest.records.push(ManifestRecord {
                video: VideoRef {
                    id: rec.id,
                    path: rec.path,
                    frame_count: rec.frames,
                },
                label: rec.label,
            });
        }
        Ok(manifest)
    }

    /// Reads a manifest file. Relative video paths are taken relative to the
    /// manifest's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SitarError::io(path, e))?;
        let mut manifest = Self::from_jsonl(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for r in &mut manifest.records {
            if r.video.path.is_relative() {
                r.video.path = base.join(&r.video.path);
            }
        }
        Ok(manifest)
    }

    /// Writes a manifest file. Video paths under the manifest's directory are
    /// stored relative to it, so the dataset can be moved as a whole.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        if !base.as_os_str().is_empty() {
            fs::create_dir_all(base).map_err(|e| SitarError::io(base, e))?;
        }
        let mut stored = self.clone();
        for r in &mut stored.records {
            if let Ok(rel) = r.video.path.strip_prefix(base) {
                r.video.path = rel.to_path_buf();
            }
        }
        let mut f = fs::File::create(path).map_err(|e| SitarError::io(path, e))?;
        f.write_all(stored.to_jsonl().as_bytes())
            .map_err(|e| SitarError::io(path, e))
    }
}

/// Returns every invariant violation in the manifest; empty means well formed.
///
/// Records are referred to by their zero-based position.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<String> {
    let mut violations = Vec::new();
    let c = manifest.num_classes as i64;
    if manifest.num_classes == 0 {
        violations.push("num_classes must be positive".to_string());
    }
    let mut seen = HashSet::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if r.label < UNLABELED || r.label >= c {
            violations.push(format!("label out of range @record {i}"));
        }
        if r.video.frame_count == 0 {
            violations.push(format!("frame_count must be >= 1 @record {i}"));
        }
        if r.video.id.is_empty() {
            violations.push(format!("empty id @record {i}"));
        }
        if !seen.insert(r.video.id.as_str()) {
            violations.push(format!("duplicate id '{}'", r.video.id));
        }
    }
    violations
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub labeled_fraction: f64,
    pub seed: u64,
    pub per_class_balanced: bool,
}

impl SplitSpec {
    pub fn balanced(labeled_fraction: f64, seed: u64) -> Self {
        SplitSpec {
            labeled_fraction,
            seed,
            per_class_balanced: true,
        }
    }
}

/// Splits a fully labeled manifest into a labeled and an unlabeled part.
///
/// Balanced splitting gives each class `max(1, floor(fraction * count_c))`
/// labeled videos; otherwise `max(1, floor(fraction * N))` videos are drawn
/// uniformly. Both outputs keep the input record order. Unlabeled records have
/// their label replaced by [`UNLABELED`].
pub fn split_dataset(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(spec.labeled_fraction > 0.0 && spec.labeled_fraction <= 1.0) {
        return Err(SitarError::Argument(format!(
            "labeled_fraction must be in (0, 1], got {}",
            spec.labeled_fraction
        )));
    }
    let violations = validate_manifest(manifest);
    if !violations.is_empty() {
        return Err(SitarError::Data(format!(
            "manifest invalid: {}",
            violations.join("; ")
        )));
    }
    if let Some((i, _)) = manifest
        .records
        .iter()
        .enumerate()
        .find(|(_, r)| !r.is_labeled())
    {
        return Err(SitarError::Data(format!(
            "split requires a fully labeled manifest; record {i} is unlabeled"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen = vec![false; manifest.records.len()];
    if spec.per_class_balanced {
        let mut by_class: BTreeMap<usize, Vec<usize>> =
            (0..manifest.num_classes).map(|c| (c, Vec::new())).collect();
        for (i, r) in manifest.records.iter().enumerate() {
            by_class.entry(r.class().unwrap()).or_default().push(i);
        }
        for (class, mut members) in by_class {
            if members.is_empty() {
                let name = manifest
                    .class_names
                    .get(class)
                    .map(|n| format!("{class} ('{n}')"))
                    .unwrap_or_else(|| class.to_string());
                return Err(SitarError::Data(format!(
                    "class {name} has no videos, cannot receive a labeled sample"
                )));
            }
            let k = ((spec.labeled_fraction * members.len() as f64).floor() as usize).max(1);
            members.shuffle(&mut rng);
            for &i in &members[..k] {
                chosen[i] = true;
            }
        }
    } else {
        let mut all: Vec<usize> = (0..manifest.records.len()).collect();
        let k = ((spec.labeled_fraction * all.len() as f64).floor() as usize)
            .max(1)
            .min(all.len());
        all.shuffle(&mut rng);
        for &i in &all[..k] {
            chosen[i] = true;
        }
    }

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (r, &is_labeled) in manifest.records.iter().zip(&chosen) {
        if is_labeled {
            labeled.push(r.clone());
        } else {
            unlabeled.push(ManifestRecord {
                video: r.video.clone(),
                label: UNLABELED,
            });
        }
    }
    Ok((manifest.with_records(labeled), manifest.with_records(unlabeled)))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_manifest(per_class: usize, classes: usize) -> DatasetManifest {
        let mut m = DatasetManifest::new(classes);
        for c in 0..classes {
            for j in 0..per_class {
                let id = format!("v{}", c * per_class + j);
                m.records.push(ManifestRecord {
                    video: VideoRef {
                        path: PathBuf::from(format!("/data/{id}")),
                        id,
                        frame_count: 16,
                    },
                    label: c as i64,
                });
            }
        }
        m
    }

    #[test]
    fn well_formed_manifest_has_no_violations() {
        assert!(validate_manifest(&toy_manifest(5, 2)).is_empty());
    }

    #[test]
    fn label_equal_to_num_classes_is_flagged() {
        let mut m = toy_manifest(5, 2);
        m.records[3].label = 2;
        assert_eq!(validate_manifest(&m), vec!["label out of range @record 3"]);
    }

    #[test]
    fn duplicate_id_is_flagged() {
        let mut m = toy_manifest(5, 2);
        m.records[2].video.id = "v7".into();
        assert_eq!(validate_manifest(&m), vec!["duplicate id 'v7'"]);
    }

    #[test]
    fn balanced_split_one_per_class() {
        let m = toy_manifest(10, 10);
        let (lab, unl) = split_dataset(&m, &SplitSpec::balanced(0.1, 3)).unwrap();
        assert_eq!(lab.len(), 10);
        assert_eq!(unl.len(), 90);
        let mut per_class = vec![0; 10];
        for r in &lab.records {
            per_class[r.class().unwrap()] += 1;
        }
        assert!(per_class.iter().all(|&n| n == 1));
        assert!(unl.records.iter().all(|r| r.label == UNLABELED));
    }

    #[test]
    fn full_fraction_leaves_unlabeled_empty() {
        let m = toy_manifest(4, 3);
        let (lab, unl) = split_dataset(&m, &SplitSpec::balanced(1.0, 0)).unwrap();
        assert_eq!(lab, m);
        assert!(unl.is_empty());
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let m = toy_manifest(7, 4);
        let spec = SplitSpec {
            labeled_fraction: 0.3,
            seed: 11,
            per_class_balanced: false,
        };
        let a = split_dataset(&m, &spec).unwrap();
        let b = split_dataset(&m, &spec).unwrap();
        assert_eq!(a.0.to_jsonl(), b.0.to_jsonl());
        assert_eq!(a.1.to_jsonl(), b.1.to_jsonl());
        let mut ids: Vec<_> = a
            .0
            .records
            .iter()
            .chain(&a.1.records)
            .map(|r| r.video.id.clone())
            .collect();
        ids.sort();
        let mut expected: Vec<_> = m.records.iter().map(|r| r.video.id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
    }

    #[test]
    fn empty_class_is_an_error_naming_it() {
        let mut m = toy_manifest(3, 3);
        m.records.retain(|r| r.label != 1);
        m.class_names = vec!["east".into(), "north".into(), "west".into()];
        let err = split_dataset(&m, &SplitSpec::balanced(0.5, 0)).unwrap_err();
        assert!(err.to_string().contains("'north'"), "{err}");
    }

    #[test]
    fn unlabeled_input_is_rejected() {
        let mut m = toy_manifest(3, 2);
        m.records[0].label = UNLABELED;
        assert!(split_dataset(&m, &SplitSpec::balanced(0.5, 0)).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut m = toy_manifest(2, 2);
        m.class_names = vec!["a".into(), "b".into()];
        m.records[1].label = UNLABELED;
        let text = m.to_jsonl();
        assert!(text.starts_with("{\"num_classes\":2"));
        let back = DatasetManifest::from_jsonl(&text, Path::new("x")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn files_store_paths_relative_to_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let mut m = toy_manifest(2, 1);
        for r in &mut m.records {
            r.video.path = root.join(&r.video.id);
        }
        m.records[1].video.path = PathBuf::from("/elsewhere/v");
        let path = root.join("manifest.jsonl");
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains(root.to_str().unwrap()), "{text}");
        assert!(text.contains("/elsewhere/v"));
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }
}
