//! Segment-based frame sampling: a video of `T` frames is cut into `M`
//! consecutive non-overlapping segments and one frame is taken from each.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SitarError};
use crate::frame::{Frame, FrameSequence};
use crate::types::VideoRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Uniform draw inside each segment (training).
    RandomInSegment,
    /// Middle frame of each segment (evaluation).
    CenterOfSegment,
}

/// Picks `m` frame indices out of `total_frames`.
///
/// Segment `i` spans `[floor(i*T/M), floor((i+1)*T/M) - 1]`. When `T < M`
/// some segments are empty; the index is then the floor of a position on the
/// continuous timeline `[i*T/M, (i+1)*T/M)`, so frames repeat in order.
pub fn segment_indices<R: Rng + ?Sized>(
    total_frames: usize,
    m: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if total_frames == 0 || m == 0 {
        return Err(SitarError::Argument(format!(
            "segment_indices needs total_frames >= 1 and M >= 1 (got {total_frames}, {m})"
        )));
    }
    let t = total_frames;
    let out = (0..m)
        .map(|i| {
            if t >= m {
                let lo = i * t / m;
                let hi = (i + 1) * t / m - 1;
                match mode {
                    SampleMode::CenterOfSegment => lo + (hi - lo + 1) / 2,
                    SampleMode::RandomInSegment => rng.gen_range(lo..=hi),
                }
            } else {
                let offset = match mode {
                    SampleMode::CenterOfSegment => 0.5,
                    SampleMode::RandomInSegment => rng.gen::<f64>(),
                };
                let pos = (i as f64 + offset) * t as f64 / m as f64;
                (pos.floor() as usize).min(t - 1)
            }
        })
        .collect();
    Ok(out)
}

pub fn frame_path(video_dir: &Path, index: usize) -> PathBuf {
    video_dir.join(format!("{index:05}.png"))
}

/// Decodes the requested frames of a video directory, in the given order.
pub fn load_frames(video: &VideoRef, indices: &[usize]) -> Result<FrameSequence> {
    let mut frames = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= video.frame_count {
            return Err(SitarError::Argument(format!(
                "frame index {i} out of range for video '{}' with {} frames",
                video.id, video.frame_count
            )));
        }
        frames.push(Frame::load_png(&frame_path(&video.path, i))?);
    }
    Ok(FrameSequence::new(frames, indices.to_vec()))
}

/// Anything that can produce frames of a video.
pub trait FrameSource: Send + Sync {
    fn frames(&self, video: &VideoRef, indices: &[usize]) -> Result<FrameSequence>;
}

/// Reads PNG frames from disk on every request.
#[derive(Debug, Default, Clone, Copy)]
pub struct DiskSource;

impl FrameSource for DiskSource {
    fn frames(&self, video: &VideoRef, indices: &[usize]) -> Result<FrameSequence> {
        load_frames(video, indices)
    }
}

/// Decodes each video once and keeps its frames as bytes in memory, keyed
/// by frame directory.
#[derive(Default)]
pub struct CachedSource {
    cache: Mutex<HashMap<PathBuf, Arc<Vec<image::RgbImage>>>>,
    loads: AtomicUsize,
}

impl CachedSource {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers already-decoded frames for the video stored at `dir`.
    pub fn insert(&self, dir: &Path, frames: Vec<image::RgbImage>) {
        self.cache
            .lock()
            .unwrap()
            .insert(dir.to_path_buf(), Arc::new(frames));
    }

    /// Number of frame requests served so far.
    pub fn requests(&self) -> usize {
        self.loads.load(Ordering::Relaxed)
    }

    fn video(&self, video: &VideoRef) -> Result<Arc<Vec<image::RgbImage>>> {
        if let Some(v) = self.cache.lock().unwrap().get(&video.path) {
            return Ok(Arc::clone(v));
        }
        let mut all = Vec::with_capacity(video.frame_count);
        for i in 0..video.frame_count {
            let path = frame_path(&video.path, i);
            if !path.exists() {
                return Err(SitarError::io(
                    &path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "frame file missing"),
                ));
            }
            let img = image::open(&path).map_err(|e| SitarError::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            all.push(img.to_rgb8());
        }
        let all = Arc::new(all);
        self.cache
            .lock()
            .unwrap()
            .insert(video.path.clone(), Arc::clone(&all));
        Ok(all)
    }
}

impl FrameSource for CachedSource {
    fn frames(&self, video: &VideoRef, indices: &[usize]) -> Result<FrameSequence> {
        self.loads.fetch_add(1, Ordering::Relaxed);
        let all = self.video(video)?;
        let mut frames = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = all.get(i).ok_or_else(|| {
                SitarError::Argument(format!(
                    "frame index {i} out of range for video '{}' with {} frames",
                    video.id,
                    all.len()
                ))
            })?;
            frames.push(Frame::from_rgb8(img));
        }
        Ok(FrameSequence::new(frames, indices.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force segment membership: frame `f` belongs to the last segment
    /// whose start does not exceed it.
    fn oracle_segments(t: usize, m: usize) -> Vec<Vec<usize>> {
        let starts: Vec<usize> = (0..m)
            .map(|i| ((i as f64) * t as f64 / m as f64).floor() as usize)
            .collect();
        let mut segs = vec![Vec::new(); m];
        for f in 0..t {
            let s = (0..m).rev().find(|&i| starts[i] <= f).unwrap();
            segs[s].push(f);
        }
        segs
    }

    fn center(t: usize, m: usize) -> Vec<usize> {
        segment_indices(t, m, SampleMode::CenterOfSegment, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
    }

    #[test]
    fn one_frame_per_segment() {
        assert_eq!(center(8, 8), vec![0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn center_of_two_frame_segments() {
        let expected: Vec<usize> = oracle_segments(16, 8)
            .iter()
            .map(|s| s[s.len() / 2])
            .collect();
        assert_eq!(expected, vec![1, 3, 5, 7, 9, 11, 13, 15]);
        assert_eq!(center(16, 8), expected);
    }

    #[test]
    fn short_video_repeats_frames() {
        // Four segments over a length-3 timeline, centers at 3/8, 9/8, 15/8, 21/8.
        let expected: Vec<usize> = (0..4)
            .map(|i| (((2 * i + 1) as f64 * 3.0) / 8.0).floor() as usize)
            .collect();
        assert_eq!(expected, vec![0, 1, 1, 2]);
        assert_eq!(center(3, 4), expected);
    }

    #[test]
    fn zero_arguments_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(segment_indices(0, 4, SampleMode::CenterOfSegment, &mut rng).is_err());
        assert!(segment_indices(4, 0, SampleMode::RandomInSegment, &mut rng).is_err());
    }

    #[test]
    fn random_mode_is_reproducible() {
        let a = segment_indices(50, 8, SampleMode::RandomInSegment, &mut ChaCha8Rng::seed_from_u64(9));
        let b = segment_indices(50, 8, SampleMode::RandomInSegment, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn random_draws_stay_in_their_segments() {
        for (t, m) in [(16, 8), (37, 8), (10, 3), (100, 4)] {
            let segs = oracle_segments(t, m);
            let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
            for _ in 0..1000 {
                let idx = segment_indices(t, m, SampleMode::RandomInSegment, &mut rng).unwrap();
                for (i, s) in idx.iter().zip(&segs) {
                    assert!(s.contains(i), "T={t} M={m}: {i} not in {s:?}");
                }
            }
        }
    }

    #[test]
    fn missing_frame_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let video = VideoRef {
            id: "v".into(),
            path: dir.path().to_path_buf(),
            frame_count: 2,
        };
        let err = load_frames(&video, &[1]).unwrap_err();
        assert!(err.to_string().contains("00001.png"), "{err}");
    }

    proptest! {
        #[test]
        fn center_indices_are_increasing_and_in_segment(t in 1usize..200, m in 1usize..20) {
            prop_assume!(t >= m);
            let idx = center(t, m);
            let segs = oracle_segments(t, m);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for (i, s) in idx.iter().zip(&segs) {
                prop_assert!(s.contains(i));
            }
        }

        #[test]
        fn indices_are_nondecreasing_and_in_range(t in 1usize..40, m in 1usize..40, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for mode in [SampleMode::CenterOfSegment, SampleMode::RandomInSegment] {
                let idx = segment_indices(t, m, mode, &mut rng).unwrap();
                prop_assert_eq!(idx.len(), m);
                prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(idx.iter().all(|&i| i < t));
            }
        }
    }
}
