//! Super images: the sampled frames of a clip tiled into one square grid.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{random_resized_crop_clip, CropParams};
use crate::error::{Result, SitarError};
use crate::frame::{Frame, FrameSequence};
use crate::sampling::{segment_indices, FrameSource, SampleMode};
use crate::types::VideoRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOrder {
    Normal,
    Random,
    Reverse,
}

impl FrameOrder {
    pub const ALL: [FrameOrder; 3] = [FrameOrder::Normal, FrameOrder::Random, FrameOrder::Reverse];

    pub fn as_str(self) -> &'static str {
        match self {
            FrameOrder::Normal => "normal",
            FrameOrder::Random => "random",
            FrameOrder::Reverse => "reverse",
        }
    }
}

impl FromStr for FrameOrder {
    type Err = SitarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(FrameOrder::Normal),
            "random" => Ok(FrameOrder::Random),
            "reverse" => Ok(FrameOrder::Reverse),
            other => Err(SitarError::Argument(format!(
                "unknown frame order '{other}' (expected normal, random or reverse)"
            ))),
        }
    }
}

impl std::fmt::Display for FrameOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A composed `side x side` RGB grid, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperImage {
    pub pixels: Vec<f32>,
    pub grid_side: usize,
    pub pad_count: usize,
    pub order: FrameOrder,
    pub frame_side: usize,
}

impl SuperImage {
    pub fn side(&self) -> usize {
        self.grid_side * self.frame_side
    }

    /// Copies grid cell `k` (row-major) back out as a frame.
    pub fn cell(&self, k: usize) -> Frame {
        assert!(k < self.grid_side * self.grid_side, "cell {k} out of grid");
        let side = self.side();
        let fs = self.frame_side;
        let (row, col) = (k / self.grid_side, k % self.grid_side);
        let mut data = Vec::with_capacity(fs * fs * 3);
        for y in 0..fs {
            let start = ((row * fs + y) * side + col * fs) * 3;
            data.extend_from_slice(&self.pixels[start..start + fs * 3]);
        }
        Frame::new(fs, fs, data)
    }

    pub fn as_frame(&self) -> Frame {
        Frame::new(self.side(), self.side(), self.pixels.clone())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.as_frame()
            .to_rgb8()
            .save(path)
            .map_err(|e| SitarError::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

/// Grid side `m = ceil(sqrt(n))` and the number of padded cells `m^2 - n`.
pub fn grid_dims(num_frames: usize) -> Result<(usize, usize)> {
    if num_frames == 0 {
        return Err(SitarError::Argument("grid_dims needs at least one frame".into()));
    }
    let mut m = (num_frames as f64).sqrt() as usize;
    while m * m < num_frames {
        m += 1;
    }
    while m > 1 && (m - 1) * (m - 1) >= num_frames {
        m -= 1;
    }
    Ok((m, m * m - num_frames))
}

/// Reorders frames (and their provenance indices) for placement in the grid.
pub fn apply_order<R: Rng + ?Sized>(
    frames: FrameSequence,
    order: FrameOrder,
    rng: &mut R,
) -> FrameSequence {
    let mut perm: Vec<usize> = (0..frames.len()).collect();
    match order {
        FrameOrder::Normal => return frames,
        FrameOrder::Reverse => perm.reverse(),
        FrameOrder::Random => perm.shuffle(rng),
    }
    let FrameSequence { frames, indices } = frames;
    let mut slots: Vec<Option<Frame>> = frames.into_iter().map(Some).collect();
    let frames = perm.iter().map(|&p| slots[p].take().unwrap()).collect();
    let indices = perm.iter().map(|&p| indices[p]).collect();
    FrameSequence::new(frames, indices)
}

/// Tiles the frames left-to-right, top-to-bottom after resizing each to
/// `frame_side`; trailing cells are filled with `pad_value`.
pub fn compose(
    frames: &FrameSequence,
    frame_side: usize,
    pad_value: f32,
    order: FrameOrder,
) -> Result<SuperImage> {
    if frames.is_empty() {
        return Err(SitarError::Argument("cannot compose an empty clip".into()));
    }
    if frame_side == 0 {
        return Err(SitarError::Argument("frame_side must be >= 1".into()));
    }
    let (w0, h0) = (frames.frames[0].width, frames.frames[0].height);
    if let Some(f) = frames.frames.iter().find(|f| f.width != w0 || f.height != h0) {
        return Err(SitarError::Argument(format!(
            "mixed frame sizes in clip: {w0}x{h0} vs {}x{}",
            f.width, f.height
        )));
    }
    let (m, pad_count) = grid_dims(frames.len())?;
    let side = m * frame_side;
    let mut pixels = vec![pad_value; side * side * 3];
    for (k, frame) in frames.frames.iter().enumerate() {
        let resized = frame.resize(frame_side, frame_side);
        let (row, col) = (k / m, k % m);
        for y in 0..frame_side {
            let dst = ((row * frame_side + y) * side + col * frame_side) * 3;
            let src = y * frame_side * 3;
            pixels[dst..dst + frame_side * 3]
                .copy_from_slice(&resized.data[src..src + frame_side * 3]);
        }
    }
    Ok(SuperImage {
        pixels,
        grid_side: m,
        pad_count,
        order,
        frame_side,
    })
}

/// Layout of the two pathways' super images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperImageConfig {
    pub fast_frames: usize,
    pub slow_frames: usize,
    pub fast_frame_side: usize,
    pub slow_frame_side: usize,
    pub pad_value: f32,
    pub order: FrameOrder,
}

impl Default for SuperImageConfig {
    /// Full-size layout: 3x3 grid of 192 px and 2x2 grid of 288 px, 576 px total.
    fn default() -> Self {
        SuperImageConfig {
            fast_frames: 8,
            slow_frames: 4,
            fast_frame_side: 192,
            slow_frame_side: 288,
            pad_value: 0.0,
            order: FrameOrder::Normal,
        }
    }
}

impl SuperImageConfig {
    /// Desk-scale layout: 3x32 and 2x48 pixels, 96 px total.
    pub fn desk() -> Self {
        SuperImageConfig {
            fast_frame_side: 32,
            slow_frame_side: 48,
            ..Self::default()
        }
    }

    pub fn fast_side(&self) -> Result<usize> {
        Ok(grid_dims(self.fast_frames)?.0 * self.fast_frame_side)
    }

    /// Common super-image side of both pathways.
    pub fn side(&self) -> Result<usize> {
        let fast = self.fast_side()?;
        let slow = grid_dims(self.slow_frames)?.0 * self.slow_frame_side;
        if fast != slow {
            return Err(SitarError::Config(format!(
                "fast super image side {fast} differs from slow side {slow}"
            )));
        }
        if self.slow_frames >= self.fast_frames {
            return Err(SitarError::Config(format!(
                "slow pathway must use fewer frames than fast ({} >= {})",
                self.slow_frames, self.fast_frames
            )));
        }
        Ok(fast)
    }
}

/// Samples, augments, orders and composes one super image from a video.
#[allow(clippy::too_many_arguments)]
pub fn build_super_image<R: Rng + ?Sized>(
    source: &dyn FrameSource,
    video: &VideoRef,
    num_frames: usize,
    frame_side: usize,
    mode: SampleMode,
    order: FrameOrder,
    pad_value: f32,
    crop: Option<&CropParams>,
    rng: &mut R,
) -> Result<SuperImage> {
    let indices = segment_indices(video.frame_count, num_frames, mode, rng)?;
    let mut clip = source.frames(video, &indices)?;
    if let Some(crop) = crop {
        clip = random_resized_crop_clip(&clip, crop, rng)?;
    }
    let clip = apply_order(clip, order, rng);
    compose(&clip, frame_side, pad_value, order)
}

/// Fast and slow super images of one video, sampled independently.
pub fn super_image_pair<R: Rng + ?Sized>(
    source: &dyn FrameSource,
    video: &VideoRef,
    cfg: &SuperImageConfig,
    mode: SampleMode,
    crop: Option<&CropParams>,
    rng: &mut R,
) -> Result<(SuperImage, SuperImage)> {
    cfg.side()?;
    let fast = build_super_image(
        source,
        video,
        cfg.fast_frames,
        cfg.fast_frame_side,
        mode,
        cfg.order,
        cfg.pad_value,
        crop,
        rng,
    )?;
    let slow = build_super_image(
        source,
        video,
        cfg.slow_frames,
        cfg.slow_frame_side,
        mode,
        cfg.order,
        cfg.pad_value,
        crop,
        rng,
    )?;
    Ok((fast, slow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tagged_clip(n: usize, side: usize) -> FrameSequence {
        let frames = (0..n)
            .map(|k| Frame::filled(side, side, [k as f32 / 10.0, 0.0, -(k as f32) / 10.0]))
            .collect();
        FrameSequence::new(frames, (0..n).collect())
    }

    #[test]
    fn grid_dims_examples() {
        assert_eq!(grid_dims(8).unwrap(), (3, 1));
        assert_eq!(grid_dims(4).unwrap(), (2, 0));
        assert_eq!(grid_dims(1).unwrap(), (1, 0));
        assert_eq!(grid_dims(16).unwrap(), (4, 0));
        assert!(grid_dims(0).is_err());
    }

    #[test]
    fn reverse_and_singleton_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = apply_order(tagged_clip(3, 1), FrameOrder::Reverse, &mut rng);
        assert_eq!(r.indices, vec![2, 1, 0]);
        let s = apply_order(tagged_clip(1, 1), FrameOrder::Random, &mut rng);
        assert_eq!(s.indices, vec![0]);
    }

    #[test]
    fn random_order_is_seeded() {
        let a = apply_order(tagged_clip(8, 1), FrameOrder::Random, &mut ChaCha8Rng::seed_from_u64(5));
        let b = apply_order(tagged_clip(8, 1), FrameOrder::Random, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let mut sorted = a.indices.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn eight_frames_at_192() {
        let si = compose(&tagged_clip(8, 4), 192, 0.0, FrameOrder::Normal).unwrap();
        assert_eq!(si.side(), 576);
        assert_eq!(si.pad_count, 1);
        assert!(si.cell(8).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_equals_resized_frame() {
        let f = Frame::new(3, 2, (0..18).map(|v| v as f32 / 18.0).collect());
        let clip = FrameSequence::new(vec![f.clone()], vec![0]);
        let si = compose(&clip, 64, 0.0, FrameOrder::Normal).unwrap();
        assert_eq!(si.as_frame(), f.resize(64, 64));
    }

    #[test]
    fn quadrants_hold_their_colors() {
        let colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.5]];
        let frames = colors.iter().map(|&c| Frame::filled(5, 5, c)).collect();
        let si = compose(&FrameSequence::new(frames, vec![0, 1, 2, 3]), 2, -9.0, FrameOrder::Normal)
            .unwrap();
        // Pixel enumeration: (x, y) belongs to quadrant (y / 2) * 2 + x / 2.
        for y in 0..4 {
            for x in 0..4 {
                let o = (y * 4 + x) * 3;
                assert_eq!(&si.pixels[o..o + 3], &colors[(y / 2) * 2 + x / 2]);
            }
        }
    }

    #[test]
    fn mixed_sizes_are_rejected() {
        let clip = FrameSequence::new(vec![Frame::filled(2, 2, [0.0; 3]), Frame::filled(3, 2, [0.0; 3])], vec![0, 1]);
        assert!(compose(&clip, 4, 0.0, FrameOrder::Normal).is_err());
    }

    #[test]
    fn pathway_sides_must_agree() {
        assert_eq!(SuperImageConfig::default().side().unwrap(), 576);
        assert_eq!(SuperImageConfig::desk().side().unwrap(), 96);
        let bad = SuperImageConfig {
            slow_frame_side: 40,
            ..SuperImageConfig::desk()
        };
        assert!(bad.side().is_err());
    }

    proptest! {
        #[test]
        fn grid_is_the_smallest_square(n in 1usize..5000) {
            let (m, pad) = grid_dims(n).unwrap();
            prop_assert!(m * m >= n);
            prop_assert!((m - 1) * (m - 1) < n);
            prop_assert_eq!(pad, m * m - n);
        }

        #[test]
        fn cells_round_trip(n in 1usize..10, side in 1usize..6, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<Frame> = (0..n)
                .map(|_| Frame::new(7, 5, (0..105).map(|_| rng.gen_range(-1.0f32..1.0)).collect()))
                .collect();
            let clip = FrameSequence::new(frames, (0..n).collect());
            let si = compose(&clip, side, 3.0, FrameOrder::Normal).unwrap();
            for (k, f) in clip.frames.iter().enumerate() {
                prop_assert_eq!(si.cell(k), f.resize(side, side));
            }
            for k in n..si.grid_side * si.grid_side {
                prop_assert!(si.cell(k).data.iter().all(|&v| v == 3.0));
            }
        }
    }
}
