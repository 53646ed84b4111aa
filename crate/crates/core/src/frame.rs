//! RGB frames and the pixel operations shared by sampling, augmentation and
//! super-image composition.

use std::path::Path;

use crate::error::{Result, SitarError};

/// An RGB frame stored row-major as interleaved `[r, g, b]` values.
///
/// Frames decoded from disk are normalized to `[-1, 1]` (`v / 127.5 - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * 3, "frame buffer size mismatch");
        Frame {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Frame::new(width, height, data)
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| normalize_u8(v)).collect();
        Frame::new(img.width() as usize, img.height() as usize, data)
    }

    /// Inverse of the load-time normalization, clamped to the byte range.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|&v| denormalize_to_u8(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SitarError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "frame file missing"),
            ));
        }
        let img = image::open(path).map_err(|e| SitarError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Frame::from_rgb8(&img.to_rgb8()))
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Bilinear resize of the full frame.
    pub fn resize(&self, width: usize, height: usize) -> Frame {
        self.resize_region(0.0, 0.0, self.width as f32, self.height as f32, width, height)
    }

    /// Bilinear resample of the axis-aligned region `[x0, x0+w) x [y0, y0+h)`
    /// (in source pixel units) onto an `out_w x out_h` grid, using half-pixel
    /// centers and edge clamping. Sampling the full frame at its own size
    /// reproduces it exactly.
    pub fn resize_region(
        &self,
        x0: f32,
        y0: f32,
        w: f32,
        h: f32,
        out_w: usize,
        out_h: usize,
    ) -> Frame {
        if x0 == 0.0
            && y0 == 0.0
            && w == self.width as f32
            && h == self.height as f32
            && out_w == self.width
            && out_h == self.height
        {
            return self.clone();
        }
        let sx = w / out_w as f32;
        let sy = h / out_h as f32;
        let xs: Vec<(usize, usize, f32)> = (0..out_w)
            .map(|x| sample_axis(x0 + (x as f32 + 0.5) * sx - 0.5, self.width))
            .collect();
        let mut data = Vec::with_capacity(out_w * out_h * 3);
        for y in 0..out_h {
            let (y_lo, y_hi, fy) = sample_axis(y0 + (y as f32 + 0.5) * sy - 0.5, self.height);
            let row_lo = y_lo * self.width;
            let row_hi = y_hi * self.width;
            for &(x_lo, x_hi, fx) in &xs {
                for c in 0..3 {
                    let a = self.data[(row_lo + x_lo) * 3 + c];
                    let b = self.data[(row_lo + x_hi) * 3 + c];
                    let d = self.data[(row_hi + x_lo) * 3 + c];
                    let e = self.data[(row_hi + x_hi) * 3 + c];
                    let top = a + (b - a) * fx;
                    let bottom = d + (e - d) * fx;
                    data.push(top + (bottom - top) * fy);
                }
            }
        }
        Frame::new(out_w, out_h, data)
    }
}

#[inline]
fn sample_axis(pos: f32, len: usize) -> (usize, usize, f32) {
    let max = (len - 1) as f32;
    let p = pos.clamp(0.0, max);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, p - lo as f32)
}

#[inline]
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

#[inline]
pub fn denormalize_to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Frames sampled from one video, with the source frame index of each.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
    pub indices: Vec<usize>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, indices: Vec<usize>) -> Self {
        assert_eq!(frames.len(), indices.len());
        FrameSequence { frames, indices }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Frame {
        let data = (0..w * h * 3).map(|i| i as f32 / 100.0).collect();
        Frame::new(w, h, data)
    }

    #[test]
    fn same_size_resize_is_exact() {
        let f = ramp(5, 4);
        assert_eq!(f.resize(5, 4), f);
    }

    #[test]
    fn halving_averages_pixel_pairs() {
        let f = Frame::new(2, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let r = f.resize(1, 1);
        assert_eq!(r.data, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn constant_frame_stays_constant() {
        let f = Frame::filled(7, 5, [0.25, -0.5, 1.0]);
        let r = f.resize(3, 11);
        assert!(r.data.chunks(3).all(|p| p == [0.25, -0.5, 1.0]));
    }

    #[test]
    fn byte_normalization_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(denormalize_to_u8(normalize_u8(v)), v);
        }
    }
}
